// Copyright 2026 The icarus-kv Authors.
// SPDX-License-Identifier: Apache-2.0

// Self-checks run by `icarus verify`: cache identity with the base model,
// fused vs two-pass decode, per-step ledger counts, adapter gradients, and
// per-namespace memory and prefill scaling.

#pragma once

#include <algorithm>
#include <cstring>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "icarus/hash.hpp"
#include "icarus/kv_pool.hpp"
#include "icarus/model.hpp"
#include "icarus/runtime.hpp"
#include "icarus/trainer.hpp"

namespace icarus {

struct VerifyOptions {
  size_t purity_trials = 20;
  size_t max_prompt = 64;
  size_t purity_decode = 8;
  size_t decode_steps = 1000;
  double logit_tolerance = 1e-5;
  double gradient_tolerance = 1e-4;
  // Serve purity trials with a model whose K/V projections are adapted.
  bool inject_kv_adapter = false;
};

struct SuiteResult {
  explicit SuiteResult(std::string n) : name(std::move(n)) {}

  std::string name;
  bool passed = true;
  size_t checks = 0;
  std::string failure;
  nlohmann::json metrics = nlohmann::json::object();

  void check(bool ok, const std::string& what) {
    ++checks;
    if (!ok && passed) {
      passed = false;
      failure = what;
    }
  }
};

inline void to_json(nlohmann::json& j, const SuiteResult& r) {
  j = {{"name", r.name}, {"passed", r.passed}, {"checks", r.checks}, {"failure", r.failure},
       {"metrics", r.metrics}};
}

// First (layer, position) where two caches differ, if any.
inline std::optional<std::string> first_kv_mismatch(const KvCacheTensor& a, const KvCacheTensor& b) {
  if (a.num_layers() != b.num_layers() || a.kv_dim() != b.kv_dim()) return "cache geometry differs";
  for (size_t l = 0; l < a.num_layers(); ++l) {
    if (a.length(l) != b.length(l)) {
      return "layer " + std::to_string(l) + " holds " + std::to_string(a.length(l)) + " vs " +
             std::to_string(b.length(l)) + " positions";
    }
    for (size_t p = 0; p < a.length(l); ++p) {
      const bool k = std::memcmp(a.key(l, p).data(), b.key(l, p).data(), a.kv_dim() * sizeof(float)) == 0;
      const bool v = std::memcmp(a.value(l, p).data(), b.value(l, p).data(), a.kv_dim() * sizeof(float)) == 0;
      if (!k || !v) {
        return std::string(k ? "value" : "key") + " bytes differ at layer " + std::to_string(l) + ", position " +
               std::to_string(p);
      }
    }
  }
  return std::nullopt;
}

namespace verify_detail {

inline std::vector<TokenId> tokens(std::mt19937_64& rng, size_t n, size_t vocab) {
  std::uniform_int_distribution<TokenId> d(0, static_cast<TokenId>(vocab) - 1);
  std::vector<TokenId> out(n);
  for (auto& t : out) t = d(rng);
  return out;
}

inline AdapterSet random_adapter(const ModelConfig& c, uint64_t seed) {
  auto a = AdapterSet::init(c, 8, 16.0, seed, "task" + std::to_string(seed));
  a.randomize_b(seed ^ 0xb5ad4eceda1ce2a9ULL, 0.2);
  return a;
}

inline ConventionalAdapterSet random_conventional(const ModelConfig& c, uint64_t seed) {
  auto a = ConventionalAdapterSet::init(c, 8, 16.0, seed, "conv" + std::to_string(seed));
  a.randomize_b(seed ^ 0xb5ad4eceda1ce2a9ULL, 0.2);
  return a;
}

}  // namespace verify_detail

inline SuiteResult verify_encoder_purity(const ModelConfig& c, uint64_t seed, const VerifyOptions& o) {
  using namespace verify_detail;
  SuiteResult r{"encoder_purity"};
  std::mt19937_64 rng(seed * 0x9e3779b97f4a7c15ULL + 1);
  size_t positions = 0;
  for (size_t t = 0; t < o.purity_trials; ++t) {
    const uint64_t s = seed * 1000 + t;
    auto base = BaseWeights::init(c, s);
    auto prompt = tokens(rng, std::uniform_int_distribution<size_t>(1, o.max_prompt)(rng), c.vocab_size);
    std::optional<GenerationSession> session;
    AdapterSet adapter;
    ConventionalAdapterSet conv;
    if (o.inject_kv_adapter) {
      conv = random_conventional(c, s + 1);
      session.emplace(GenerationSession::conventional(base, conv, prompt));
    } else {
      adapter = random_adapter(c, s + 1);
      session.emplace(base, &adapter, prompt);
    }
    generate(*session, o.purity_decode, DecodePath::fused);
    auto diff = first_kv_mismatch(session->cache(), base_kv(base, session->context()));
    r.check(!diff, "trial " + std::to_string(t) + ": " + diff.value_or(""));
    r.check(base.freeze_intact(), "trial " + std::to_string(t) + ": base weights changed");
    positions += session->context().size();
  }
  r.metrics["trials"] = o.purity_trials;
  r.metrics["positions_compared"] = positions;
  return r;
}

inline SuiteResult verify_fused_equivalence(const ModelConfig& c, uint64_t seed, const VerifyOptions& o) {
  using namespace verify_detail;
  SuiteResult r{"fused_equivalence"};
  std::mt19937_64 rng(seed * 0x9e3779b97f4a7c15ULL + 2);
  size_t steps = 0, ties = 0;
  double worst = 0.0;
  auto base = BaseWeights::init(c, seed + 11);
  for (size_t trial = 0; steps < o.decode_steps; ++trial) {
    auto adapter = random_adapter(c, seed * 7919 + trial);
    auto prompt = tokens(rng, std::uniform_int_distribution<size_t>(1, 32)(rng), c.vocab_size);
    GenerationSession fused(base, &adapter, prompt), seq(base, &adapter, prompt);
    TokenId tok = prefill(fused);
    prefill(seq);
    for (size_t i = 0; i < 50 && steps < o.decode_steps; ++i, ++steps) {
      const TokenId a = decode_step_fused(fused, tok);
      const TokenId b = decode_step_sequential(seq, tok);
      const double err = relative_error(fused.last_logits(), seq.last_logits());
      worst = std::max(worst, err);
      r.check(err <= o.logit_tolerance, "step " + std::to_string(steps) + ": logits differ by " +
                                            std::to_string(err) + " relative");
      if (a != b) {
        const auto& l = fused.last_logits();
        const double gap = std::abs(static_cast<double>(l[static_cast<size_t>(a)]) - l[static_cast<size_t>(b)]);
        r.check(gap < o.logit_tolerance, "step " + std::to_string(steps) + ": greedy tokens " +
                                             std::to_string(a) + " vs " + std::to_string(b));
        ++ties;
      }
      tok = a;
    }
  }
  r.metrics["steps"] = steps;
  r.metrics["max_relative_error"] = worst;
  r.metrics["logged_ties"] = ties;
  return r;
}

inline SuiteResult verify_ledger(const ModelConfig& c, uint64_t seed) {
  using namespace verify_detail;
  SuiteResult r{"ledger"};
  std::mt19937_64 rng(seed * 0x9e3779b97f4a7c15ULL + 3);
  auto base = BaseWeights::init(c, seed + 13);
  auto adapter = random_adapter(c, seed + 14);
  auto prompt = tokens(rng, 24, c.vocab_size);
  for (DecodePath path : {DecodePath::fused, DecodePath::sequential}) {
    GenerationSession s(base, &adapter, prompt);
    TokenId tok = prefill(s);
    const uint64_t want = path == DecodePath::fused ? 1 : 2;
    for (size_t i = 0; i < 16; ++i) {
      const MetricsLedger before = s.ledger();
      tok = decode_step(s, tok, path);
      const MetricsLedger d = s.ledger() - before;
      r.check(d.param_read_events == want,
              std::string(path_name(path)) + " step " + std::to_string(i) + ": " +
                  std::to_string(d.param_read_events) + " parameter reads");
      r.check(d.kv_read_events == 1, std::string(path_name(path)) + " step " + std::to_string(i) + ": " +
                                         std::to_string(d.kv_read_events) + " KV reads");
    }
    r.metrics[path_name(path)] = s.ledger();
  }
  return r;
}

// Central differences over every adapter entry, as one relative error.
template <typename Set, typename LossFn>
double adapter_gradient_error(Set& set, const std::map<std::string, Tensor64>& grads, LossFn loss,
                              double h = 1e-6) {
  std::vector<double> analytic, numeric;
  set.for_each_mutable([&](const std::string& name, Tensor64& t) {
    Tensor64 fd = finite_difference_grad(
        [&](const Tensor64& p) {
          Tensor64 saved = t;
          t = p;
          const double l = loss();
          t = saved;
          return l;
        },
        t, h);
    const Tensor64& g = grads.at(name);
    analytic.insert(analytic.end(), g.data().begin(), g.data().end());
    numeric.insert(numeric.end(), fd.data().begin(), fd.data().end());
  });
  return relative_error(Tensor64({analytic.size()}, analytic), Tensor64({numeric.size()}, numeric));
}

inline SuiteResult verify_gradients(uint64_t seed, const VerifyOptions& o) {
  using namespace verify_detail;
  SuiteResult r{"gradient"};
  const auto c = ModelConfig::toy();
  std::mt19937_64 rng(seed * 0x9e3779b97f4a7c15ULL + 4);
  auto base = BaseWeightsT<double>::init(c, seed + 17);
  auto adapter = AdapterSetT<double>::init(c, 4, 8.0, seed + 18, "grad");
  adapter.randomize_b(seed + 19, 0.3);
  Batch batch{tokens(rng, 7, c.vocab_size), tokens(rng, 5, c.vocab_size)};
  auto lg = icarus_loss_and_grads(base, adapter, batch);
  double base_max = 0.0;
  for (const auto& [n, g] : lg.base_grads) {
    for (double x : g.data()) base_max = std::max(base_max, std::abs(x));
  }
  r.check(base_max == 0.0, "base gradient magnitude " + std::to_string(base_max));
  const double err = adapter_gradient_error(adapter, lg.adapter_grads, [&] { return icarus_loss(base, adapter, batch); });
  r.check(err <= o.gradient_tolerance, "adapter gradient relative error " + std::to_string(err));
  r.metrics["base_grad_max_abs"] = base_max;
  r.metrics["adapter_relative_error"] = err;
  return r;
}

struct NamespaceCounts {
  size_t peak_bytes = 0;
  size_t prefill_tokens = 0;
};

// N models each prefill the same prompt through one pool.
inline NamespaceCounts namespace_run(const BaseWeights& base, CacheMode mode, size_t n,
                                     std::span<const TokenId> prompt, uint64_t seed) {
  KvPool pool(base.config(), MemoryBudget{});
  NamespaceCounts out;
  for (size_t agent = 0; agent < n; ++agent) {
    const NamespaceId ns = namespace_for(mode, agent);
    std::vector<TokenId> p(prompt.begin(), prompt.end());
    AdapterSet adapter;
    ConventionalAdapterSet conv;
    std::optional<GenerationSession> s;
    if (mode == CacheMode::icarus) {
      adapter = verify_detail::random_adapter(base.config(), seed + agent);
      s.emplace(base, &adapter, p);
    } else {
      conv = verify_detail::random_conventional(base.config(), seed + agent);
      s.emplace(GenerationSession::conventional(base, conv, p));
    }
    auto pf = prefill_from_pool(pool, ns, *s, agent);
    auto cr = commit_session(pool, ns, *s, agent);
    pool.release(cr.chain);
    pool.release(pf.hit.chain);
    out.prefill_tokens += s->ledger().prefill_tokens;
  }
  out.peak_bytes = pool.stats().peak_bytes;
  return out;
}

inline SuiteResult verify_namespaces(const ModelConfig& c, uint64_t seed) {
  using namespace verify_detail;
  SuiteResult r{"namespace"};
  std::mt19937_64 rng(seed * 0x9e3779b97f4a7c15ULL + 5);
  auto base = BaseWeights::init(c, seed + 23);
  auto prompt = tokens(rng, 256, c.vocab_size);
  for (size_t n : {2u, 4u, 8u}) {
    const auto b = namespace_run(base, CacheMode::baseline, n, prompt, seed + 100);
    const auto i = namespace_run(base, CacheMode::icarus, n, prompt, seed + 100);
    const double ratio = static_cast<double>(b.peak_bytes) / static_cast<double>(i.peak_bytes);
    const std::string at = "N=" + std::to_string(n) + ": ";
    r.check(ratio >= n - 1.0 && ratio <= static_cast<double>(n), at + "peak ratio " + std::to_string(ratio));
    r.check(b.prefill_tokens == n * i.prefill_tokens,
            at + "prefill " + std::to_string(b.prefill_tokens) + " vs " + std::to_string(i.prefill_tokens));
    r.metrics["N" + std::to_string(n)] = {{"peak_ratio", ratio},
                                          {"baseline_prefill", b.prefill_tokens},
                                          {"icarus_prefill", i.prefill_tokens}};
  }
  return r;
}

struct VerifySummary {
  std::vector<SuiteResult> suites;

  bool passed() const {
    return std::all_of(suites.begin(), suites.end(), [](const SuiteResult& s) { return s.passed; });
  }
  nlohmann::json to_json() const {
    return {{"schema", "icarus-verify v1"}, {"passed", passed()}, {"suites", suites}};
  }
  uint64_t hash() const { return fnv1a(to_json().dump()); }
};

inline VerifySummary run_verification(const ModelConfig& c, uint64_t seed, const VerifyOptions& o) {
  VerifySummary s;
  s.suites.push_back(verify_encoder_purity(c, seed, o));
  s.suites.push_back(verify_fused_equivalence(c, seed, o));
  s.suites.push_back(verify_ledger(c, seed));
  s.suites.push_back(verify_gradients(seed, o));
  s.suites.push_back(verify_namespaces(c, seed));
  return s;
}

}  // namespace icarus
