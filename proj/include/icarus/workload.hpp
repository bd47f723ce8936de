// Copyright 2026 The icarus-kv Authors.
// SPDX-License-Identifier: Apache-2.0

// Synthetic multi-agent request traces.
//
// A request is a chain of turns over one growing context. The first turn
// carries a prefix common to every request plus the task input; each act
// turn is answered by one agent, after which a tool observation is appended
// and the next agent takes over. Reflexion traces insert a reflection turn
// after every few act turns; it re-reads the whole context so far.
//
// Turn outputs are fixed in the trace. Engines feed them back as the decode
// inputs, so every mode sees the same token stream whatever its adapters
// would have produced.

#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "icarus/errors.hpp"
#include "icarus/model.hpp"

namespace icarus {

enum class Pattern { react, reflexion };
enum class Routing { round_robin, random_skewed };
enum class TurnKind { act, reflect };

inline const char* pattern_name(Pattern p) { return p == Pattern::reflexion ? "reflexion" : "react"; }
inline const char* routing_name(Routing r) { return r == Routing::random_skewed ? "random_skewed" : "round_robin"; }

inline Pattern parse_pattern(const std::string& s) {
  if (s == "react") return Pattern::react;
  if (s == "reflexion") return Pattern::reflexion;
  throw UsageError("unknown pattern '" + s + "' (expected react or reflexion)");
}

inline Routing parse_routing(const std::string& s) {
  if (s == "round_robin") return Routing::round_robin;
  if (s == "random_skewed") return Routing::random_skewed;
  throw UsageError("unknown routing '" + s + "' (expected round_robin or random_skewed)");
}

// Inclusive integer range, sampled uniformly.
struct LengthRange {
  size_t lo = 0;
  size_t hi = 0;

  bool operator==(const LengthRange&) const = default;
};

struct WorkloadConfig {
  Pattern pattern = Pattern::react;
  size_t num_agents = 8;
  Routing routing = Routing::round_robin;
  double skew = 0.5;  // probability mass of the hot agent (agent 0)
  double qps = 0.1;
  size_t total_requests = 128;
  size_t vocab_size = 256;
  size_t shared_prefix_tokens = 64;
  LengthRange input{64, 192};
  LengthRange output{24, 64};
  LengthRange turns{6, 12};  // act turns per request
  LengthRange observation{32, 96};
  LengthRange reflection{16, 32};  // reflection prompt length
  size_t reflect_every = 3;
  double tool_latency = 0.5;  // simulated seconds per observation
  uint64_t seed = 0;

  void validate() const {
    if (num_agents == 0) throw ConfigError("workload needs at least one agent");
    if (!(skew >= 0.0 && skew <= 1.0)) throw ConfigError("skew mass must lie in [0, 1]");
    if (!(qps > 0) || !std::isfinite(qps)) throw ConfigError("qps must be positive");
    if (vocab_size < 2) throw ConfigError("vocabulary too small for a workload");
    if (!(tool_latency >= 0)) throw ConfigError("tool latency must be non-negative");
    for (const LengthRange* r : {&input, &output, &turns, &observation, &reflection}) {
      if (r->lo > r->hi) throw ConfigError("length range with lo > hi");
    }
    if (turns.lo == 0) throw ConfigError("a request needs at least one turn");
    if (shared_prefix_tokens + input.lo == 0) throw ConfigError("first turn would have an empty prompt");
    if (pattern == Pattern::reflexion && reflect_every == 0) throw ConfigError("reflect_every must be positive");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(LengthRange, lo, hi)

struct Turn {
  size_t agent = 0;
  TurnKind kind = TurnKind::act;
  std::vector<TokenId> input;   // appended to the context before the turn
  std::vector<TokenId> output;  // generated by the agent, teacher-forced
};

struct Request {
  size_t id = 0;
  double arrival = 0.0;
  std::vector<Turn> turns;

  size_t final_context() const {
    size_t n = 0;
    for (const auto& t : turns) n += t.input.size() + t.output.size();
    return n;
  }
};

struct WorkloadTrace {
  WorkloadConfig config;
  std::vector<Request> requests;

  size_t total_turns() const {
    size_t n = 0;
    for (const auto& r : requests) n += r.turns.size();
    return n;
  }

  // Agents of every turn, request by request.
  std::vector<size_t> agent_sequence() const {
    std::vector<size_t> out;
    for (const auto& r : requests) {
      for (const auto& t : r.turns) out.push_back(t.agent);
    }
    return out;
  }
};

namespace workload_detail {

inline uint64_t mix(uint64_t seed, uint64_t stream) {
  uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline size_t draw(std::mt19937_64& rng, LengthRange r) {
  return std::uniform_int_distribution<size_t>(r.lo, r.hi)(rng);
}

inline std::vector<TokenId> tokens(std::mt19937_64& rng, size_t n, size_t vocab) {
  std::uniform_int_distribution<TokenId> d(0, static_cast<TokenId>(vocab) - 1);
  std::vector<TokenId> out(n);
  for (auto& t : out) t = d(rng);
  return out;
}

class Router {
 public:
  Router(const WorkloadConfig& c, std::mt19937_64& rng) : c_(c), rng_(rng) {}

  size_t route(size_t turn_index) {
    if (c_.num_agents == 1) return 0;
    if (c_.routing == Routing::round_robin) return turn_index % c_.num_agents;
    if (std::uniform_real_distribution<double>(0.0, 1.0)(rng_) < c_.skew) return 0;
    return 1 + std::uniform_int_distribution<size_t>(0, c_.num_agents - 2)(rng_);
  }

 private:
  const WorkloadConfig& c_;
  std::mt19937_64& rng_;
};

}  // namespace workload_detail

// Arrival gaps come from their own stream as unit exponentials divided by
// the rate, so traces that differ only in qps have identical contents and
// proportionally scaled arrival times.
inline WorkloadTrace generate_workload(const WorkloadConfig& config) {
  using namespace workload_detail;
  config.validate();
  WorkloadTrace trace;
  trace.config = config;

  std::mt19937_64 prefix_rng(mix(config.seed, 0));
  const auto prefix = tokens(prefix_rng, config.shared_prefix_tokens, config.vocab_size);

  std::mt19937_64 arrival_rng(mix(config.seed, 1));
  std::exponential_distribution<double> gap(1.0);
  double clock = 0.0;

  for (size_t id = 0; id < config.total_requests; ++id) {
    Request r;
    r.id = id;
    clock += gap(arrival_rng) / config.qps;
    r.arrival = clock;

    std::mt19937_64 rng(mix(config.seed, 2 + id));
    std::mt19937_64 route_rng(mix(config.seed ^ 0x5bd1e995ULL, 2 + id));
    Router router(config, route_rng);
    const size_t acts = draw(rng, config.turns);
    for (size_t a = 0; a < acts; ++a) {
      Turn t;
      t.kind = TurnKind::act;
      if (a == 0) {
        t.input = prefix;
        auto question = tokens(rng, draw(rng, config.input), config.vocab_size);
        t.input.insert(t.input.end(), question.begin(), question.end());
      } else {
        t.input = tokens(rng, draw(rng, config.observation), config.vocab_size);
      }
      t.output = tokens(rng, draw(rng, config.output), config.vocab_size);
      t.agent = router.route(r.turns.size());
      r.turns.push_back(std::move(t));

      if (config.pattern == Pattern::reflexion && (a + 1) % config.reflect_every == 0) {
        Turn re;
        re.kind = TurnKind::reflect;
        re.input = tokens(rng, draw(rng, config.reflection), config.vocab_size);
        re.output = tokens(rng, draw(rng, config.output), config.vocab_size);
        re.agent = router.route(r.turns.size());
        r.turns.push_back(std::move(re));
      }
    }
    trace.requests.push_back(std::move(r));
  }
  return trace;
}

}  // namespace icarus
