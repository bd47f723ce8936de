// Copyright 2026 The icarus-kv Authors.
// SPDX-License-Identifier: Apache-2.0

// Discrete-event serving of a multi-agent trace through one KV pool.
//
// One FIFO server handles turns in order of readiness. A turn looks up the
// longest cached prefix of its context in the agent's namespace, computes
// the rest, decodes its teacher-forced outputs and commits the context back.
// Between turns a request keeps a soft hold on what it committed in every
// namespace it has visited; losing such a block counts as an eviction.
//
// Time is simulated: each turn costs what its ledger says under a CostModel,
// plus any swap or recompute charges the pool accrued. The real engine runs
// the model; the accounting engine predicts the same ledger from token
// counts. Both must produce identical reports.

#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <map>
#include <optional>
#include <ostream>
#include <queue>
#include <string>
#include <vector>

#include "json.hpp"

#include "icarus/errors.hpp"
#include "icarus/kv_pool.hpp"
#include "icarus/metrics.hpp"
#include "icarus/model.hpp"
#include "icarus/runtime.hpp"
#include "icarus/workload.hpp"

namespace icarus {

// Seconds charged per ledger unit.
struct CostModel {
  double prefill_token = 5e-4;
  double param_event = 8e-3;
  double kv_byte = 2e-9;
  double recompute_token = 0.0;  // surcharge on top of the prefill it causes
  double swap_byte = 1e-8;

  void validate() const {
    for (double v : {prefill_token, param_event, kv_byte, recompute_token, swap_byte}) {
      if (!(v >= 0) || !std::isfinite(v)) throw ConfigError("cost model entries must be finite and >= 0");
    }
  }

  double charge(const MetricsLedger& l) const {
    return prefill_token * static_cast<double>(l.prefill_tokens) +
           param_event * static_cast<double>(l.param_read_events) +
           kv_byte * static_cast<double>(l.kv_bytes_read);
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(CostModel, prefill_token, param_event, kv_byte, recompute_token, swap_byte)

class SimEngine {
 public:
  static SimEngine accounting(const ModelConfig& config, DecodePath path = DecodePath::fused) {
    config.validate();
    SimEngine e;
    e.config_ = config;
    e.path_ = path;
    return e;
  }

  // adapters[i] / conventional[i] serve agent i in icarus / baseline mode.
  static SimEngine real(const BaseWeights& base, const std::vector<AdapterSet>& adapters,
                        const std::vector<ConventionalAdapterSet>& conventional,
                        DecodePath path = DecodePath::fused) {
    SimEngine e;
    e.config_ = base.config();
    e.path_ = path;
    e.base_ = &base;
    e.adapters_ = &adapters;
    e.conventional_ = &conventional;
    return e;
  }

  bool is_real() const { return base_ != nullptr; }
  const ModelConfig& config() const { return config_; }
  DecodePath path() const { return path_; }

  void check(CacheMode mode, size_t agents) const {
    if (!is_real()) return;
    const size_t have = mode == CacheMode::icarus ? adapters_->size() : conventional_->size();
    if (have < agents) {
      throw ConfigError(std::string("real engine has ") + std::to_string(have) + " " + mode_name(mode) +
                        " adapters for " + std::to_string(agents) + " agents");
    }
  }

  GenerationSession session(CacheMode mode, size_t agent, std::vector<TokenId> prompt, SessionOptions opts) const {
    if (mode == CacheMode::icarus) return GenerationSession(*base_, &(*adapters_)[agent], std::move(prompt), opts);
    return GenerationSession::conventional(*base_, (*conventional_)[agent], std::move(prompt), opts);
  }

 private:
  ModelConfig config_;
  DecodePath path_ = DecodePath::fused;
  const BaseWeights* base_ = nullptr;
  const std::vector<AdapterSet>* adapters_ = nullptr;
  const std::vector<ConventionalAdapterSet>* conventional_ = nullptr;
};

struct RunReport {
  std::string mode;
  std::string eviction;
  std::string pattern;
  std::string routing;
  size_t agents = 0;
  double qps = 0.0;

  std::vector<double> latencies;  // by request id
  double p95_latency = 0.0;
  double mean_latency = 0.0;
  double throughput = 0.0;  // completed requests per simulated second
  double makespan = 0.0;
  double busy_time = 0.0;
  size_t completed = 0;
  size_t turns = 0;

  size_t evictions = 0;
  size_t reclaims = 0;
  size_t recompute_tokens = 0;
  size_t swap_out_bytes = 0;
  size_t swap_in_bytes = 0;
  size_t peak_kv_bytes = 0;
  size_t cross_model_hit_blocks = 0;

  size_t prompt_tokens = 0;
  size_t prefill_tokens = 0;
  size_t prefix_hit_tokens = 0;
  size_t decode_steps = 0;
  size_t param_read_events = 0;
  size_t kv_read_events = 0;
  size_t kv_attention_passes = 0;
  size_t kv_bytes_read = 0;

  bool operator==(const RunReport&) const = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(RunReport, mode, eviction, pattern, routing, agents, qps, latencies,
                                   p95_latency, mean_latency, throughput, makespan, busy_time, completed,
                                   turns, evictions, reclaims, recompute_tokens, swap_out_bytes,
                                   swap_in_bytes, peak_kv_bytes, cross_model_hit_blocks, prompt_tokens,
                                   prefill_tokens, prefix_hit_tokens, decode_steps, param_read_events,
                                   kv_read_events, kv_attention_passes, kv_bytes_read)

// Everything except the labels that name the mode and eviction policy.
inline bool same_metrics(RunReport a, RunReport b) {
  a.mode = b.mode;
  a.eviction = b.eviction;
  return a == b;
}

// Nearest rank: the ceil(0.95 n)-th smallest sample.
inline double p95(std::vector<double> xs) {
  if (xs.empty()) return 0.0;
  std::sort(xs.begin(), xs.end());
  const size_t rank = static_cast<size_t>(std::ceil(0.95 * static_cast<double>(xs.size())));
  return xs[std::max<size_t>(rank, 1) - 1];
}

namespace sim_detail {

// What the runtime records for a prefill of n new tokens after `cached`.
inline MetricsLedger predict_prefill(size_t cached, size_t n, size_t bytes_per_token) {
  MetricsLedger l;
  l.kv_read_events = 1;
  l.prefix_hit_tokens = cached;
  if (n == 0) return l;
  l.param_read_events = 1;
  l.kv_attention_passes = 1;
  l.prefill_tokens = n;
  l.kv_bytes_read = bytes_per_token * (n * cached + n * (n + 1) / 2);
  return l;
}

// One decode step appending position `pos`.
inline MetricsLedger predict_decode(size_t pos, bool sequential, size_t bytes_per_token) {
  MetricsLedger l;
  const uint64_t passes = sequential ? 2 : 1;
  l.param_read_events = passes;
  l.kv_read_events = 1;
  l.kv_attention_passes = passes;
  l.decode_steps = 1;
  l.kv_bytes_read = passes * bytes_per_token * (pos + 1);
  return l;
}

struct Job {
  double ready;
  uint64_t seq;
  size_t request;
  size_t turn;
};

struct Later {
  bool operator()(const Job& a, const Job& b) const {
    if (a.ready != b.ready) return a.ready > b.ready;
    return a.seq > b.seq;
  }
};

struct RequestState {
  std::vector<TokenId> context;
  std::map<NamespaceId, std::vector<BlockId>> held;
};

}  // namespace sim_detail

inline RunReport run(const WorkloadTrace& trace, CacheMode mode, MemoryBudget budget, EvictionPolicy eviction,
                     const CostModel& cost, const SimEngine& engine) {
  using namespace sim_detail;
  cost.validate();
  const WorkloadConfig& wc = trace.config;
  const ModelConfig& mc = engine.config();
  if (wc.vocab_size > mc.vocab_size) {
    throw ConfigError("workload vocabulary " + std::to_string(wc.vocab_size) + " exceeds the model's " +
                      std::to_string(mc.vocab_size));
  }
  engine.check(mode, wc.num_agents);
  budget.recompute_cost_per_token = cost.recompute_token;
  budget.swap_cost_per_byte = cost.swap_byte;
  KvPool pool(mc, budget, eviction, kDefaultBlockTokens, engine.is_real());
  const size_t bpt = mc.kv_bytes_per_token();
  const bool sequential = mode == CacheMode::icarus && engine.path() == DecodePath::sequential;

  RunReport rep;
  rep.mode = mode_name(mode);
  rep.eviction = policy_name(eviction);
  rep.pattern = pattern_name(wc.pattern);
  rep.routing = routing_name(wc.routing);
  rep.agents = wc.num_agents;
  rep.qps = wc.qps;
  rep.latencies.assign(trace.requests.size(), 0.0);

  std::vector<RequestState> state(trace.requests.size());
  std::priority_queue<Job, std::vector<Job>, Later> queue;
  uint64_t seq = 0;
  for (size_t i = 0; i < trace.requests.size(); ++i) {
    if (!trace.requests[i].turns.empty()) queue.push({trace.requests[i].arrival, seq++, i, 0});
  }

  double clock = 0.0;
  double first_arrival = trace.requests.empty() ? 0.0 : trace.requests.front().arrival;
  double last_done = first_arrival;
  for (const auto& r : trace.requests) first_arrival = std::min(first_arrival, r.arrival);
  MetricsLedger total;

  while (!queue.empty()) {
    const Job job = queue.top();
    queue.pop();
    const Request& rq = trace.requests[job.request];
    const Turn& turn = rq.turns[job.turn];
    if (turn.agent >= wc.num_agents) throw ConfigError("turn routed to a nonexistent agent");
    RequestState& st = state[job.request];
    const double start = std::max(clock, job.ready);
    st.context.insert(st.context.end(), turn.input.begin(), turn.input.end());
    if (st.context.empty()) throw ConfigError("turn with an empty context");
    const NamespaceId ns = namespace_for(mode, turn.agent);

    std::optional<GenerationSession> session;
    LookupResult hit;
    MetricsLedger led;
    if (engine.is_real()) {
      SessionOptions opts;
      opts.max_new_tokens = std::max<size_t>(opts.max_new_tokens, turn.output.size());
      opts.block_tokens = pool.block_tokens();
      session.emplace(engine.session(mode, turn.agent, st.context, opts));
      hit = prefill_from_pool(pool, ns, *session, turn.agent).hit;
    } else {
      hit = pool.lookup_prefix(ns, st.context, turn.agent);
      led += predict_prefill(hit.matched_tokens, st.context.size() - hit.matched_tokens, bpt);
    }

    const size_t private_bytes = (st.context.size() - hit.matched_tokens + turn.output.size()) * bpt;
    try {
      pool.reserve_private(private_bytes);
    } catch (const CapacityError& e) {
      pool.release(hit.chain);
      throw ConfigError(std::string("memory budget cannot hold a single turn: ") + e.what());
    }
    for (size_t i = 0; i < turn.output.size(); ++i) {
      if (session) {
        decode_step(*session, turn.output[i], engine.path());
      } else {
        led += predict_decode(st.context.size() + i, sequential, bpt);
      }
    }
    if (session) led = session->ledger();
    pool.release_private(private_bytes);

    st.context.insert(st.context.end(), turn.output.begin(), turn.output.end());
    CommitResult cr;
    try {
      cr = session ? commit_session(pool, ns, *session, turn.agent)
                   : pool.commit(ns, st.context, nullptr, turn.agent);
    } catch (const CapacityError& e) {
      pool.release(hit.chain);
      throw ConfigError(std::string("memory budget cannot hold a single turn: ") + e.what());
    }
    pool.retain(cr.chain);
    auto held = st.held.find(ns);
    if (held != st.held.end()) pool.unretain(held->second);
    st.held[ns] = cr.chain;
    pool.release(cr.chain);
    pool.release(hit.chain);

    const double duration = cost.charge(led) + pool.take_charges();
    clock = start + duration;
    rep.busy_time += duration;
    rep.prompt_tokens += st.context.size() - turn.output.size();
    total += led;
    ++rep.turns;

    if (job.turn + 1 < rq.turns.size()) {
      const double pause = turn.kind == TurnKind::act ? wc.tool_latency : 0.0;
      queue.push({clock + pause, seq++, job.request, job.turn + 1});
    } else {
      for (auto& [n, chain] : st.held) pool.unretain(chain);
      st.held.clear();
      st.context = {};
      rep.latencies[job.request] = clock - rq.arrival;
      ++rep.completed;
      last_done = std::max(last_done, clock);
    }
  }

  rep.p95_latency = p95(rep.latencies);
  double sum = 0.0;
  for (double l : rep.latencies) sum += l;
  rep.mean_latency = rep.latencies.empty() ? 0.0 : sum / static_cast<double>(rep.latencies.size());
  rep.makespan = last_done - first_arrival;
  rep.throughput = rep.makespan > 0 ? static_cast<double>(rep.completed) / rep.makespan : 0.0;

  const PoolStats& ps = pool.stats();
  rep.evictions = ps.evictions;
  rep.reclaims = ps.reclaims;
  rep.recompute_tokens = ps.recompute_tokens;
  rep.swap_out_bytes = ps.swap_out_bytes;
  rep.swap_in_bytes = ps.swap_in_bytes;
  rep.peak_kv_bytes = ps.peak_bytes;
  rep.cross_model_hit_blocks = ps.cross_model_hit_blocks;
  rep.prefill_tokens = total.prefill_tokens;
  rep.prefix_hit_tokens = total.prefix_hit_tokens;
  rep.decode_steps = total.decode_steps;
  rep.param_read_events = total.param_read_events;
  rep.kv_read_events = total.kv_read_events;
  rep.kv_attention_passes = total.kv_attention_passes;
  rep.kv_bytes_read = total.kv_bytes_read;
  return rep;
}

struct SweepSpec {
  WorkloadConfig workload;
  std::vector<double> qps;
  std::vector<size_t> agents;
  std::vector<CacheMode> modes{CacheMode::baseline, CacheMode::icarus};
  MemoryBudget budget;
  EvictionPolicy eviction = EvictionPolicy::recompute;
  CostModel cost;
};

// Cells in (agents, qps, mode) order. Every cell reuses the workload seed,
// so cells at one agent count differ only in arrival times.
inline std::vector<RunReport> sweep(const SweepSpec& spec, const SimEngine& engine) {
  std::vector<RunReport> out;
  for (size_t n : spec.agents) {
    for (double q : spec.qps) {
      WorkloadConfig wc = spec.workload;
      wc.num_agents = n;
      wc.qps = q;
      const WorkloadTrace trace = generate_workload(wc);
      for (CacheMode m : spec.modes) out.push_back(run(trace, m, spec.budget, spec.eviction, spec.cost, engine));
    }
  }
  return out;
}

namespace sim_detail {

inline std::string num(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

}  // namespace sim_detail

inline constexpr const char* kReportSchema = "icarus-sim-report v1";

// One row per cell; latencies are left to the summary.
inline void write_report_csv(std::ostream& os, const std::vector<RunReport>& cells) {
  using sim_detail::num;
  os << "# " << kReportSchema << '\n';
  os << "mode,eviction,pattern,routing,agents,qps,completed,turns,p95_latency,mean_latency,throughput,"
        "makespan,busy_time,evictions,reclaims,recompute_tokens,swap_out_bytes,swap_in_bytes,peak_kv_bytes,"
        "cross_model_hit_blocks,prompt_tokens,prefill_tokens,prefix_hit_tokens,decode_steps,"
        "param_read_events,kv_read_events,kv_attention_passes,kv_bytes_read\n";
  for (const auto& r : cells) {
    os << r.mode << ',' << r.eviction << ',' << r.pattern << ',' << r.routing << ',' << r.agents << ','
       << num(r.qps) << ',' << r.completed << ',' << r.turns << ',' << num(r.p95_latency) << ','
       << num(r.mean_latency) << ',' << num(r.throughput) << ',' << num(r.makespan) << ','
       << num(r.busy_time) << ',' << r.evictions << ',' << r.reclaims << ',' << r.recompute_tokens << ','
       << r.swap_out_bytes << ',' << r.swap_in_bytes << ',' << r.peak_kv_bytes << ','
       << r.cross_model_hit_blocks << ',' << r.prompt_tokens << ',' << r.prefill_tokens << ','
       << r.prefix_hit_tokens << ',' << r.decode_steps << ',' << r.param_read_events << ','
       << r.kv_read_events << ',' << r.kv_attention_passes << ',' << r.kv_bytes_read << '\n';
  }
}

// Direction checks over one agent count's sweep, QPS ascending. Throughput
// comparisons allow `rel_tol` of floating-point slack; "plateau" means the
// baseline gains at most `plateau_gain` per step once it has evicted.
struct TrendVerdict {
  bool baseline_evicts = false;
  bool icarus_never_evicts = true;
  bool p95_ordered = true;
  bool throughput_ordered = true;
  bool baseline_plateaus = true;
  bool icarus_nondecreasing = true;
  std::vector<std::string> notes;

  bool ok() const {
    return baseline_evicts && icarus_never_evicts && p95_ordered && throughput_ordered && baseline_plateaus &&
           icarus_nondecreasing;
  }
};

inline TrendVerdict check_trend(const std::vector<RunReport>& cells, size_t agents, double rel_tol = 1e-9,
                                double plateau_gain = 0.05) {
  std::vector<const RunReport*> base, ica;
  for (const auto& r : cells) {
    if (r.agents != agents) continue;
    (r.mode == "icarus" ? ica : base).push_back(&r);
  }
  auto by_qps = [](const RunReport* a, const RunReport* b) { return a->qps < b->qps; };
  std::sort(base.begin(), base.end(), by_qps);
  std::sort(ica.begin(), ica.end(), by_qps);
  TrendVerdict v;
  if (base.size() != ica.size() || base.empty()) {
    v.baseline_evicts = false;
    v.notes.push_back("sweep lacks paired baseline/icarus cells");
    return v;
  }
  bool seen_eviction = false;
  for (size_t i = 0; i < base.size(); ++i) {
    const RunReport& b = *base[i];
    const RunReport& c = *ica[i];
    const std::string at = "qps " + sim_detail::num(b.qps) + ": ";
    if (c.evictions != 0) {
      v.icarus_never_evicts = false;
      v.notes.push_back(at + "icarus evicted " + std::to_string(c.evictions) + " blocks");
    }
    if (i > 0 && c.throughput < ica[i - 1]->throughput * (1 - rel_tol)) {
      v.icarus_nondecreasing = false;
      v.notes.push_back(at + "icarus throughput fell");
    }
    if (seen_eviction && b.throughput > base[i - 1]->throughput * (1 + plateau_gain)) {
      v.baseline_plateaus = false;
      v.notes.push_back(at + "baseline throughput still rising after evictions began");
    }
    if (b.evictions == 0) continue;
    seen_eviction = true;
    v.baseline_evicts = true;
    if (!(c.p95_latency < b.p95_latency)) {
      v.p95_ordered = false;
      v.notes.push_back(at + "icarus p95 not below baseline");
    }
    if (!(c.throughput > b.throughput)) {
      v.throughput_ordered = false;
      v.notes.push_back(at + "icarus throughput not above baseline");
    }
  }
  if (!v.baseline_evicts) v.notes.push_back("baseline never evicted; budget too generous");
  return v;
}

inline nlohmann::json summary_json(const std::vector<RunReport>& cells) {
  nlohmann::json j;
  j["schema"] = "icarus-sim-summary v1";
  j["cells"] = cells;
  nlohmann::json pairs = nlohmann::json::array();
  for (const auto& b : cells) {
    if (b.mode != "baseline") continue;
    for (const auto& c : cells) {
      if (c.mode != "icarus" || c.agents != b.agents || c.qps != b.qps) continue;
      pairs.push_back({{"agents", b.agents},
                       {"qps", b.qps},
                       {"p95_speedup", c.p95_latency > 0 ? b.p95_latency / c.p95_latency : 0.0},
                       {"throughput_gain", b.throughput > 0 ? c.throughput / b.throughput : 0.0},
                       {"baseline_evictions", b.evictions},
                       {"icarus_evictions", c.evictions}});
    }
  }
  j["comparisons"] = pairs;
  return j;
}

}  // namespace icarus
