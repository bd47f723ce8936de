// Copyright 2026 The icarus-kv Authors.
// SPDX-License-Identifier: Apache-2.0

// Subcommands behind the `icarus` tool. A run is fully determined by the
// config file and the flag overrides; every file it writes is listed with
// its FNV-1a hash in <out>/manifest.json.
//
// Config file layout (all sections and keys optional):
//
//   { "seed": 0,
//     "model":  { "num_layers": 4, "hidden": 64, ... },
//     "train":  { "steps": 500, "learning_rate": 0.01, "rule": "copy", "modes": "both", ... },
//     "sim":    { "agents": [8], "qps": [0.05, 0.1], "budget_mb": 64, "eviction": "recompute",
//                 "workload": { "pattern": "react", "input": [64, 192], ... },
//                 "cost": { "prefill_token": 0.0005, ... } },
//     "verify": { "purity_trials": 20, "decode_steps": 1000 } }

#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "icarus/checkpoint.hpp"
#include "icarus/errors.hpp"
#include "icarus/hash.hpp"
#include "icarus/serving_sim.hpp"
#include "icarus/trainer.hpp"
#include "icarus/verify.hpp"
#include "icarus/workload.hpp"

namespace icarus {

struct CliConfig {
  std::string config_path;
  uint64_t config_hash = 0;
  uint64_t seed = 0;
  std::string out_dir = "icarus-out";
  ModelConfig model;

  TrainConfig train;
  std::string corpus_rule = "copy";
  size_t corpus_samples = 512;
  std::vector<TrainMode> train_modes{TrainMode::icarus, TrainMode::conventional};

  SweepSpec sim = default_sweep();
  std::string engine = "accounting";
  DecodePath path = DecodePath::fused;

  VerifyOptions verify;

  static SweepSpec default_sweep() {
    SweepSpec s;
    s.agents = {8};
    s.qps = {0.025, 0.05, 0.1, 0.2, 0.4};
    s.budget.kv_bytes = size_t{64} << 20;
    s.budget.swap_bytes = size_t{256} << 20;
    return s;
  }
};

// Command-line values; unset ones leave the file (or default) value alone.
struct Overrides {
  std::optional<uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> mode;
  std::optional<std::vector<size_t>> agents;
  std::optional<std::vector<double>> qps;
  std::optional<double> budget_mb;
  std::optional<std::string> eviction;
  std::optional<size_t> steps;
  std::optional<std::string> path;
};

namespace cli_detail {

using nlohmann::json;

// Reads known keys of one JSON object and rejects the rest.
class Section {
 public:
  Section(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }

  void range(const std::string& key, LengthRange& out) {
    std::vector<size_t> v;
    get(key, v);
    if (!has(key)) return;
    if (v.size() != 2) throw ConfigError(where_ + "." + key + ": expected [lo, hi]");
    out = {v[0], v[1]};
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  std::optional<Section> child(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return std::nullopt;
    return Section(*it, where_ + "." + key);
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(where_ + ": unknown key '" + it.key() + "'");
    }
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

inline std::vector<TrainMode> parse_train_modes(const std::string& s) {
  if (s == "both") return {TrainMode::icarus, TrainMode::conventional};
  if (s == "icarus" || s == "conventional") return {parse_train_mode(s)};
  throw UsageError("unknown training mode '" + s + "' (expected icarus, conventional or both)");
}

inline std::vector<CacheMode> parse_cache_modes(const std::string& s) {
  if (s == "both") return {CacheMode::baseline, CacheMode::icarus};
  if (s == "baseline" || s == "icarus") return {parse_mode(s)};
  throw UsageError("unknown cache mode '" + s + "' (expected baseline, icarus or both)");
}

inline DecodePath parse_path(const std::string& s) {
  if (s == "fused") return DecodePath::fused;
  if (s == "sequential") return DecodePath::sequential;
  throw UsageError("unknown decode path '" + s + "' (expected fused or sequential)");
}

inline void read_model(Section s, ModelConfig& m) {
  s.get("num_layers", m.num_layers);
  s.get("hidden", m.hidden);
  s.get("num_heads", m.num_heads);
  s.get("num_kv_heads", m.num_kv_heads);
  s.get("head_dim", m.head_dim);
  s.get("ffn_dim", m.ffn_dim);
  s.get("vocab_size", m.vocab_size);
  s.get("rope_theta", m.rope_theta);
  s.get("rms_eps", m.rms_eps);
  s.get("max_context", m.max_context);
  s.finish();
}

inline void read_train(Section s, CliConfig& c) {
  TrainConfig& t = c.train;
  s.get("learning_rate", t.learning_rate);
  s.get("steps", t.steps);
  s.get("batch_size", t.batch_size);
  s.get("seq_len", t.seq_len);
  s.get("beta1", t.beta1);
  s.get("beta2", t.beta2);
  s.get("weight_decay", t.weight_decay);
  s.get("warmup_fraction", t.warmup_fraction);
  s.get("rank", t.rank);
  s.get("alpha", t.alpha);
  s.get("eval_samples", t.eval_samples);
  s.get("rule", c.corpus_rule);
  s.get("samples", c.corpus_samples);
  std::string modes;
  s.get("modes", modes);
  if (!modes.empty()) c.train_modes = parse_train_modes(modes);
  s.finish();
}

inline void read_workload(Section s, WorkloadConfig& w) {
  std::string pattern, routing;
  s.get("pattern", pattern);
  if (!pattern.empty()) w.pattern = parse_pattern(pattern);
  s.get("routing", routing);
  if (!routing.empty()) w.routing = parse_routing(routing);
  s.get("skew", w.skew);
  s.get("requests", w.total_requests);
  s.get("vocab_size", w.vocab_size);
  s.get("shared_prefix", w.shared_prefix_tokens);
  s.range("input", w.input);
  s.range("output", w.output);
  s.range("turns", w.turns);
  s.range("observation", w.observation);
  s.range("reflection", w.reflection);
  s.get("reflect_every", w.reflect_every);
  s.get("tool_latency", w.tool_latency);
  s.finish();
}

inline void read_sim(Section s, CliConfig& c) {
  SweepSpec& sp = c.sim;
  s.get("agents", sp.agents);
  s.get("qps", sp.qps);
  std::vector<std::string> modes;
  s.get("modes", modes);
  if (s.has("modes")) {
    sp.modes.clear();
    for (const auto& m : modes) sp.modes.push_back(parse_mode(m));
  }
  double budget_mb = -1, swap_mb = -1;
  s.get("budget_mb", budget_mb);
  s.get("swap_mb", swap_mb);
  if (budget_mb >= 0) sp.budget.kv_bytes = static_cast<size_t>(budget_mb * (1 << 20));
  if (swap_mb >= 0) sp.budget.swap_bytes = static_cast<size_t>(swap_mb * (1 << 20));
  std::string eviction, path;
  s.get("eviction", eviction);
  if (!eviction.empty()) sp.eviction = parse_policy(eviction);
  s.get("path", path);
  if (!path.empty()) c.path = parse_path(path);
  s.get("engine", c.engine);
  if (auto w = s.child("workload")) read_workload(*w, sp.workload);
  if (auto k = s.child("cost")) {
    k->get("prefill_token", sp.cost.prefill_token);
    k->get("param_event", sp.cost.param_event);
    k->get("kv_byte", sp.cost.kv_byte);
    k->get("recompute_token", sp.cost.recompute_token);
    k->get("swap_byte", sp.cost.swap_byte);
    k->finish();
  }
  s.finish();
}

inline void read_verify(Section s, VerifyOptions& v) {
  s.get("purity_trials", v.purity_trials);
  s.get("max_prompt", v.max_prompt);
  s.get("decode_steps", v.decode_steps);
  s.get("inject_kv_adapter", v.inject_kv_adapter);
  s.finish();
}

}  // namespace cli_detail

// `text` is the config file's content ("" for defaults).
inline CliConfig parse_config(const std::string& text, const std::string& source = "<defaults>") {
  using namespace cli_detail;
  CliConfig c;
  c.config_path = source;
  c.config_hash = fnv1a(text);
  if (text.find_first_not_of(" \t\r\n") == std::string::npos) return c;
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(source + ": " + e.what());
  }
  Section root(j, "config");
  root.get("seed", c.seed);
  root.get("out", c.out_dir);
  if (auto m = root.child("model")) read_model(*m, c.model);
  if (auto t = root.child("train")) read_train(*t, c);
  if (auto s = root.child("sim")) read_sim(*s, c);
  if (auto v = root.child("verify")) read_verify(*v, c.verify);
  root.finish();
  return c;
}

inline CliConfig load_config(const std::string& path) {
  if (path.empty()) return parse_config("");
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open config file " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str(), path);
}

// Flags win over the file. `subcommand` decides what --mode means.
inline void apply_overrides(CliConfig& c, const Overrides& o, const std::string& subcommand) {
  if (o.seed) c.seed = *o.seed;
  if (o.out) c.out_dir = *o.out;
  if (o.mode) {
    if (subcommand == "train") {
      c.train_modes = cli_detail::parse_train_modes(*o.mode);
    } else if (subcommand == "sim") {
      c.sim.modes = cli_detail::parse_cache_modes(*o.mode);
    } else {
      throw UsageError("--mode does not apply to " + subcommand);
    }
  }
  if (o.agents) c.sim.agents = *o.agents;
  if (o.qps) c.sim.qps = *o.qps;
  if (o.budget_mb) {
    if (!(*o.budget_mb > 0)) throw UsageError("--budget-mb must be positive");
    c.sim.budget.kv_bytes = static_cast<size_t>(*o.budget_mb * (1 << 20));
  }
  if (o.eviction) c.sim.eviction = parse_policy(*o.eviction);
  if (o.steps) c.train.steps = *o.steps;
  if (o.path) c.path = cli_detail::parse_path(*o.path);
  // One seed drives every generator.
  c.train.seed = c.seed;
  c.sim.workload.seed = c.seed;
}

inline nlohmann::json resolved_json(const CliConfig& c) {
  nlohmann::json j;
  j["seed"] = c.seed;
  const ModelConfig& m = c.model;
  j["model"] = {{"num_layers", m.num_layers}, {"hidden", m.hidden},       {"num_heads", m.num_heads},
                {"num_kv_heads", m.num_kv_heads}, {"head_dim", m.head_dim}, {"ffn_dim", m.ffn_dim},
                {"vocab_size", m.vocab_size}, {"rope_theta", m.rope_theta}, {"rms_eps", m.rms_eps},
                {"max_context", m.max_context}};
  const TrainConfig& t = c.train;
  std::vector<std::string> tm;
  for (auto mode : c.train_modes) tm.push_back(train_mode_name(mode));
  j["train"] = {{"learning_rate", t.learning_rate}, {"steps", t.steps}, {"batch_size", t.batch_size},
                {"seq_len", t.seq_len}, {"beta1", t.beta1}, {"beta2", t.beta2},
                {"weight_decay", t.weight_decay}, {"warmup_fraction", t.warmup_fraction}, {"rank", t.rank},
                {"alpha", t.alpha}, {"eval_samples", t.eval_samples}, {"rule", c.corpus_rule},
                {"samples", c.corpus_samples}, {"modes", tm}};
  const SweepSpec& s = c.sim;
  const WorkloadConfig& w = s.workload;
  std::vector<std::string> sm;
  for (auto mode : s.modes) sm.push_back(mode_name(mode));
  j["sim"] = {{"agents", s.agents},
              {"qps", s.qps},
              {"modes", sm},
              {"budget_bytes", s.budget.kv_bytes},
              {"swap_bytes", s.budget.swap_bytes},
              {"eviction", policy_name(s.eviction)},
              {"path", path_name(c.path)},
              {"engine", c.engine},
              {"cost", s.cost},
              {"workload",
               {{"pattern", pattern_name(w.pattern)}, {"routing", routing_name(w.routing)}, {"skew", w.skew},
                {"requests", w.total_requests}, {"vocab_size", w.vocab_size},
                {"shared_prefix", w.shared_prefix_tokens}, {"input", w.input}, {"output", w.output},
                {"turns", w.turns}, {"observation", w.observation}, {"reflection", w.reflection},
                {"reflect_every", w.reflect_every}, {"tool_latency", w.tool_latency}}}};
  j["verify"] = {{"purity_trials", c.verify.purity_trials}, {"max_prompt", c.verify.max_prompt},
                 {"decode_steps", c.verify.decode_steps}, {"inject_kv_adapter", c.verify.inject_kv_adapter}};
  return j;
}

struct ManifestEntry {
  std::string path;  // relative to the output directory
  size_t bytes = 0;
  std::string fnv1a;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(ManifestEntry, path, bytes, fnv1a)

struct RunManifest {
  std::string subcommand;
  std::string config_path;
  std::string config_hash;
  uint64_t seed = 0;
  std::string out_dir;
  std::vector<ManifestEntry> outputs;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(RunManifest, subcommand, config_path, config_hash, seed, out_dir, outputs)

// Writes files under one directory and records them in the manifest.
class OutputDir {
 public:
  OutputDir(const CliConfig& c, std::string subcommand) : dir_(c.out_dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir_, ec);
    if (ec) throw ConfigError("cannot create output directory " + dir_.string() + ": " + ec.message());
    manifest_.subcommand = std::move(subcommand);
    manifest_.config_path = c.config_path;
    manifest_.config_hash = hex64(c.config_hash);
    manifest_.seed = c.seed;
    manifest_.out_dir = c.out_dir;
  }

  void write(const std::string& name, const std::string& content) {
    const auto path = dir_ / name;
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ConfigError("cannot write " + path.string());
    os << content;
    if (!os) throw ConfigError("short write to " + path.string());
    manifest_.outputs.push_back({name, content.size(), hex64(fnv1a(content))});
  }

  // The manifest lists everything written before it.
  const RunManifest& finish() {
    nlohmann::json j = manifest_;
    const std::string text = j.dump(2) + "\n";
    std::ofstream os(dir_ / "manifest.json", std::ios::binary);
    os << text;
    if (!os) throw ConfigError("cannot write manifest in " + dir_.string());
    return manifest_;
  }

 private:
  std::filesystem::path dir_;
  RunManifest manifest_;
};

inline int cmd_verify(const CliConfig& c, std::ostream& log) {
  OutputDir out(c, "verify");
  const VerifySummary s = run_verification(c.model, c.seed, c.verify);
  for (const auto& r : s.suites) {
    log << (r.passed ? "PASS " : "FAIL ") << r.name << " (" << r.checks << " checks)";
    if (!r.passed) log << ": " << r.failure;
    log << '\n';
  }
  log << "summary hash " << hex64(s.hash()) << '\n';
  out.write("verify_summary.json", s.to_json().dump(2) + "\n");
  out.write("resolved_config.json", resolved_json(c).dump(2) + "\n");
  out.finish();
  return s.passed() ? 0 : 1;
}

inline constexpr const char* kLossTraceSchema = "icarus-loss-trace v1";

inline std::string loss_trace_csv(TrainMode mode, const std::vector<double>& losses) {
  std::string s = std::string("# ") + kLossTraceSchema + "\nstep,mode,loss\n";
  for (size_t i = 0; i < losses.size(); ++i) {
    s += std::to_string(i) + "," + train_mode_name(mode) + "," + sim_detail::num(losses[i]) + "\n";
  }
  return s;
}

inline int cmd_train(const CliConfig& c, std::ostream& log) {
  c.model.validate();
  c.train.validate();
  ToyCorpus corpus(c.corpus_rule, c.model.vocab_size, c.corpus_samples, c.seed, c.train.seq_len);
  OutputDir out(c, "train");
  const auto base = BaseWeights::init(c.model, c.seed);
  nlohmann::json summary;
  summary["schema"] = "icarus-train-summary v1";
  summary["rule"] = c.corpus_rule;
  summary["steps"] = c.train.steps;
  std::map<TrainMode, double> finals;
  for (TrainMode mode : c.train_modes) {
    TrainConfig tc = c.train;
    tc.mode = mode;
    auto r = train_loop(tc, corpus, base);
    const std::string name = train_mode_name(mode);
    out.write("loss_" + name + ".csv", loss_trace_csv(mode, r.losses));
    std::ostringstream ck;
    if (mode == TrainMode::icarus) {
      save_adapter(ck, r.adapter, c.model);
    } else {
      save_conventional(ck, r.conventional, c.model);
    }
    out.write(name + "_adapter.ckpt", ck.str());
    summary["runs"][name] = {{"initial_eval_loss", r.initial_eval_loss},
                             {"final_eval_loss", r.final_eval_loss},
                             {"first_step_loss", r.losses.empty() ? 0.0 : r.losses.front()},
                             {"last_step_loss", r.losses.empty() ? 0.0 : r.losses.back()}};
    finals[mode] = r.final_eval_loss;
    log << name << ": eval loss " << r.initial_eval_loss << " -> " << r.final_eval_loss << '\n';
  }
  if (finals.size() == 2) {
    const double ratio = finals[TrainMode::icarus] / finals[TrainMode::conventional];
    summary["final_loss_ratio"] = ratio;
    log << "final loss ratio icarus/conventional " << ratio << '\n';
  }
  out.write("train_summary.json", summary.dump(2) + "\n");
  out.write("resolved_config.json", resolved_json(c).dump(2) + "\n");
  out.finish();
  return 0;
}

inline int cmd_sim(const CliConfig& c, std::ostream& log) {
  std::vector<RunReport> cells;
  if (c.engine == "accounting") {
    cells = sweep(c.sim, SimEngine::accounting(c.model, c.path));
  } else if (c.engine == "real") {
    size_t agents = 1;
    for (size_t n : c.sim.agents) agents = std::max(agents, n);
    const auto base = BaseWeights::init(c.model, c.seed);
    std::vector<AdapterSet> adapters;
    std::vector<ConventionalAdapterSet> conventional;
    for (size_t i = 0; i < agents; ++i) {
      adapters.push_back(verify_detail::random_adapter(c.model, c.seed * 1000 + i));
      conventional.push_back(verify_detail::random_conventional(c.model, c.seed * 1000 + i));
    }
    cells = sweep(c.sim, SimEngine::real(base, adapters, conventional, c.path));
  } else {
    throw UsageError("unknown engine '" + c.engine + "' (expected accounting or real)");
  }
  OutputDir out(c, "sim");
  std::ostringstream csv;
  write_report_csv(csv, cells);
  out.write("sim_report.csv", csv.str());
  nlohmann::json summary = summary_json(cells);
  const bool paired = std::count(c.sim.modes.begin(), c.sim.modes.end(), CacheMode::baseline) &&
                      std::count(c.sim.modes.begin(), c.sim.modes.end(), CacheMode::icarus);
  if (paired) {
    for (size_t n : c.sim.agents) {
      TrendVerdict v = check_trend(cells, n);
      summary["trends"].push_back({{"agents", n},
                                   {"ok", v.ok()},
                                   {"baseline_evicts", v.baseline_evicts},
                                   {"icarus_never_evicts", v.icarus_never_evicts},
                                   {"p95_ordered", v.p95_ordered},
                                   {"throughput_ordered", v.throughput_ordered},
                                   {"baseline_plateaus", v.baseline_plateaus},
                                   {"icarus_nondecreasing", v.icarus_nondecreasing},
                                   {"notes", v.notes}});
    }
  }
  out.write("sim_summary.json", summary.dump(2) + "\n");
  out.write("resolved_config.json", resolved_json(c).dump(2) + "\n");
  out.finish();
  for (const auto& r : cells) {
    log << r.mode << " N=" << r.agents << " qps=" << r.qps << " p95=" << r.p95_latency
        << " throughput=" << r.throughput << " evictions=" << r.evictions << '\n';
  }
  return 0;
}

}  // namespace icarus
