// Copyright 2026 The icarus-kv Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <random>
#include <vector>

#include "icarus/model.hpp"

namespace icarus::testing {

inline std::vector<TokenId> random_tokens(size_t n, size_t vocab, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<TokenId> d(0, static_cast<TokenId>(vocab) - 1);
  std::vector<TokenId> out(n);
  for (auto& t : out) t = d(rng);
  return out;
}

// An adapter whose B matrices are nonzero, i.e. a decoder that actually
// differs from the base.
inline AdapterSet trained_like_adapter(const ModelConfig& c, uint64_t seed, double stddev = 0.2) {
  auto a = AdapterSet::init(c, 8, 16.0, seed, "task" + std::to_string(seed));
  a.randomize_b(seed * 31 + 7, stddev);
  return a;
}

inline ModelConfig small_config() {
  ModelConfig c;
  c.num_layers = 2;
  c.hidden = 32;
  c.num_heads = 4;
  c.num_kv_heads = 2;
  c.head_dim = 8;
  c.ffn_dim = 64;
  c.vocab_size = 64;
  return c;
}

}  // namespace icarus::testing
