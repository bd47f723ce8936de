// Copyright 2026 The icarus-kv Authors.
// SPDX-License-Identifier: Apache-2.0

#include <random>

#include <gtest/gtest.h>

#include "icarus/layers.hpp"
#include "icarus/runtime.hpp"
#include "test_util.hpp"

namespace icarus {
namespace {

using testing::random_tokens;
using testing::small_config;
using testing::trained_like_adapter;

Tensor rnd(Shape s, uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0, scale);
  Tensor t(s);
  for (float& v : t.data()) v = static_cast<float>(d(rng));
  return t;
}

TEST(ModelConfig, ValidationRejectsBadGrouping) {
  ModelConfig c;
  c.num_kv_heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(BaseWeights::init(c, 1), ConfigError);
  ModelConfig d;
  d.hidden = 60;
  EXPECT_THROW(d.validate(), ConfigError);
  EXPECT_NO_THROW(ModelConfig{}.validate());
  EXPECT_NO_THROW(ModelConfig::toy().validate());
}

TEST(BaseWeights, DeterministicPerSeed) {
  auto c = small_config();
  EXPECT_EQ(BaseWeights::init(c, 5).freeze_hash(), BaseWeights::init(c, 5).freeze_hash());
  EXPECT_NE(BaseWeights::init(c, 5).freeze_hash(), BaseWeights::init(c, 6).freeze_hash());
}

TEST(BaseWeights, ShapesFollowConfig) {
  ModelConfig c;
  c.num_layers = 2;
  c.hidden = 32;
  c.num_heads = 4;
  c.num_kv_heads = 2;
  c.head_dim = 8;
  c.ffn_dim = 48;
  c.vocab_size = 40;
  auto w = BaseWeights::init(c, 1);
  EXPECT_EQ(w.embedding().shape(), (Shape{40, 32}));
  EXPECT_EQ(w.lm_head().shape(), (Shape{32, 40}));
  EXPECT_EQ(w.final_norm().shape(), (Shape{32}));
  for (size_t l = 0; l < 2; ++l) {
    const auto& L = w.layer(l);
    EXPECT_EQ(L.wq.shape(), (Shape{32, 32}));
    EXPECT_EQ(L.wk.shape(), (Shape{32, 16}));
    EXPECT_EQ(L.wv.shape(), (Shape{32, 16}));
    EXPECT_EQ(L.wo.shape(), (Shape{32, 32}));
    EXPECT_EQ(L.w_gate.shape(), (Shape{32, 48}));
    EXPECT_EQ(L.w_up.shape(), (Shape{32, 48}));
    EXPECT_EQ(L.w_down.shape(), (Shape{48, 32}));
    EXPECT_EQ(L.attn_norm.shape(), (Shape{32}));
  }
}

TEST(BaseWeights, InitScaleIsInverseSqrtFanIn) {
  ModelConfig c;
  auto w = BaseWeights::init(c, 3);
  double ss = 0;
  for (float v : w.layer(0).w_up.data()) ss += double(v) * v;
  const double var = ss / static_cast<double>(w.layer(0).w_up.numel());
  EXPECT_NEAR(var, 1.0 / 64, 0.1 / 64);
}

TEST(AdapterSet, StartsAtZeroAndHasNoKeyValueSlot) {
  auto c = small_config();
  auto a = AdapterSet::init(c, 8, 16.0, 1, "math");
  EXPECT_FLOAT_EQ(a.scaling(), 2.0f);
  size_t tensors = 0;
  a.for_each([&](const std::string& name, const Tensor& t) {
    ++tensors;
    EXPECT_EQ(name.find(".k."), std::string::npos);
    EXPECT_EQ(name.find(".v."), std::string::npos);
    if (name.back() == 'b') {
      for (float v : t.data()) EXPECT_EQ(v, 0.0f);
    }
  });
  EXPECT_EQ(tensors, c.num_layers * 5 * 2);
  EXPECT_EQ(std::size(kAdapterTargets), 5u);
  EXPECT_THROW(AdapterSet::init(c, 0, 1.0, 1, "x"), ConfigError);
}

TEST(IcarusLinear, ZeroAdapterBranchesEqualBitwise) {
  auto c = small_config();
  auto w = BaseWeights::init(c, 1);
  auto a = AdapterSet::init(c, 8, 16.0, 2, "t");
  Tensor x = rnd({1, c.hidden}, 3);
  Tensor pair({2, c.hidden});
  std::copy(x.data().begin(), x.data().end(), pair.row(0).begin());
  std::copy(x.data().begin(), x.data().end(), pair.row(1).begin());
  Tensor y = icarus_linear(pair, w.layer(0).wq, &a.layer(0).q, a.scaling());
  for (size_t j = 0; j < y.cols(); ++j) EXPECT_EQ(y(0, j), y(1, j));
}

TEST(IcarusLinear, NoAdapterEqualsPlainMatmul) {
  auto c = small_config();
  auto w = BaseWeights::init(c, 1);
  Tensor pair = rnd({2, c.hidden}, 4);
  EXPECT_TRUE(icarus_linear(pair, w.layer(0).wo, nullptr, 2.0f).bit_identical(matmul(pair, w.layer(0).wo)));
}

TEST(IcarusLinear, RandomAdapterMatchesTwoStepOracle) {
  auto c = small_config();
  auto w = BaseWeights::init(c, 1);
  auto a = trained_like_adapter(c, 5);
  Tensor pair = rnd({2, c.hidden}, 6);
  MetricsLedger ledger;
  const auto& lr = a.layer(1).gate;
  Tensor y = icarus_linear(pair, w.layer(1).w_gate, &lr, a.scaling(), &ledger);
  EXPECT_EQ(ledger.linear_weight_reads, 1u);
  const auto& W = w.layer(1).w_gate;
  for (size_t r = 0; r < 2; ++r) {
    // Independent oracle in double: x W + s * ((x A) B), row 1 only.
    std::vector<double> xa(lr.rank(), 0.0);
    for (size_t k = 0; k < lr.rank(); ++k) {
      for (size_t i = 0; i < c.hidden; ++i) xa[k] += double(pair(r, i)) * lr.a(i, k);
    }
    for (size_t j = 0; j < W.cols(); ++j) {
      double base = 0, delta = 0;
      for (size_t i = 0; i < c.hidden; ++i) base += double(pair(r, i)) * W(i, j);
      for (size_t k = 0; k < lr.rank(); ++k) delta += xa[k] * lr.b(k, j);
      const double want = r == 0 ? base : base + a.scaling() * delta;
      EXPECT_NEAR(y(r, j), want, 1e-5);
    }
  }
}

TEST(IcarusLinear, RejectsBadShapes) {
  auto c = small_config();
  auto w = BaseWeights::init(c, 1);
  auto a = AdapterSet::init(c, 4, 8.0, 1, "t");
  Tensor pair = rnd({2, c.hidden}, 7);
  EXPECT_THROW(icarus_linear(pair, w.layer(0).w_gate, &a.layer(0).q, 2.0f), ConfigError);
  EXPECT_THROW(icarus_linear(rnd({3, c.hidden}, 8), w.layer(0).wq, nullptr, 2.0f), DimensionError);
}

KvCacheTensor random_cache(const ModelConfig& c, size_t len, uint64_t seed) {
  KvCacheTensor kv(c);
  for (size_t l = 0; l < c.num_layers; ++l) {
    for (size_t p = 0; p < len; ++p) {
      Tensor k = rnd({c.kv_dim()}, seed + 100 * l + 2 * p);
      Tensor v = rnd({c.kv_dim()}, seed + 100 * l + 2 * p + 1);
      kv.append(l, Branch::encoder, k.data(), v.data());
    }
  }
  return kv;
}

TEST(LayerAttention, SingleKeyReturnsValue) {
  auto c = small_config();
  auto kv = random_cache(c, 1, 1);
  Tensor q = rnd({c.num_heads, c.head_dim}, 2);
  Tensor out = layer_attention(q, kv, 0, 1, c);
  for (size_t h = 0; h < c.num_heads; ++h) {
    const size_t g = h / c.group_size();
    for (size_t d = 0; d < c.head_dim; ++d) EXPECT_EQ(out(h, d), kv.value(0, 0)[g * c.head_dim + d]);
  }
}

TEST(LayerAttention, FusedEqualsTwoSeparateCalls) {
  auto c = small_config();
  auto kv = random_cache(c, 9, 3);
  Tensor q0 = rnd({c.num_heads, c.head_dim}, 4);
  Tensor q1 = rnd({c.num_heads, c.head_dim}, 5);
  MetricsLedger fused_ledger, split_ledger;
  auto [o0, o1] = split_numhead(layer_attention(concat_numhead(q0, q1, c.num_kv_heads), kv, 1, 9, c, &fused_ledger),
                                c.num_kv_heads);
  Tensor s0 = layer_attention(q0, kv, 1, 9, c, &split_ledger);
  Tensor s1 = layer_attention(q1, kv, 1, 9, c, &split_ledger);
  EXPECT_LE(max_abs_diff(o0, s0), 1e-6);
  EXPECT_LE(max_abs_diff(o1, s1), 1e-6);
  EXPECT_EQ(2 * fused_ledger.kv_bytes_read, split_ledger.kv_bytes_read);
}

TEST(LayerAttention, GroupedEqualsReplicatedHeads) {
  auto c = small_config();
  auto kv = random_cache(c, 6, 6);
  ModelConfig full = c;
  full.num_kv_heads = c.num_heads;
  KvCacheTensor expanded(full);
  for (size_t p = 0; p < 6; ++p) {
    std::vector<float> k, v;
    for (size_t h = 0; h < c.num_heads; ++h) {
      const size_t g = h / c.group_size();
      auto ks = kv.key(0, p).subspan(g * c.head_dim, c.head_dim);
      auto vs = kv.value(0, p).subspan(g * c.head_dim, c.head_dim);
      k.insert(k.end(), ks.begin(), ks.end());
      v.insert(v.end(), vs.begin(), vs.end());
    }
    expanded.append(0, Branch::encoder, k, v);
  }
  Tensor q = rnd({c.num_heads, c.head_dim}, 7);
  EXPECT_LE(max_abs_diff(layer_attention(q, kv, 0, 6, c), layer_attention(q, expanded, 0, 6, full)), 1e-6);
}

TEST(LayerAttention, RejectsOtherHeadCounts) {
  auto c = small_config();
  auto kv = random_cache(c, 2, 8);
  EXPECT_THROW(layer_attention(rnd({3, c.head_dim}, 9), kv, 0, 2, c), ModeError);
  EXPECT_THROW(layer_attention(rnd({c.num_heads, c.head_dim}, 9), kv, 0, 3, c), StateError);
}

TEST(KvCacheTensor, DecoderBranchWriteIsContractViolation) {
  auto c = small_config();
  KvCacheTensor kv(c);
  std::vector<float> row(c.kv_dim(), 1.0f);
  EXPECT_THROW(kv.append(0, Branch::decoder, row, row), ContractViolation);
  EXPECT_EQ(kv.length(), 0u);
}

TEST(KvCacheTensor, ExportImportRoundTrip) {
  auto c = small_config();
  auto kv = random_cache(c, 5, 10);
  KvCacheTensor copy(c);
  copy.import_range(kv.export_range(0, 3), 3);
  copy.import_range(kv.export_range(3, 5), 2);
  EXPECT_TRUE(copy.bit_identical(kv));
}

TEST(BlockForward, PrefillAndDecodeGrowCache) {
  auto c = small_config();
  auto w = BaseWeights::init(c, 1);
  KvCacheTensor kv(c);
  auto ids = random_tokens(7, c.vocab_size, 2);
  Tensor h = embed_tokens(ids, w);
  for (size_t l = 0; l < c.num_layers; ++l) h = block_forward(h, l, w, nullptr, kv, BlockMode::prefill);
  EXPECT_EQ(kv.length(), 7u);
  TokenId pair[2] = {3, 3};
  Tensor x = embed_tokens(pair, w);
  auto a = trained_like_adapter(c, 3);
  for (size_t l = 0; l < c.num_layers; ++l) x = block_forward(x, l, w, &a, kv, BlockMode::decode_fused);
  EXPECT_EQ(kv.length(), 8u);
}

TEST(BlockForward, EncoderRowOfFusedStepEqualsBaseDecode) {
  auto c = small_config();
  auto w = BaseWeights::init(c, 11);
  auto a = trained_like_adapter(c, 12);
  auto ids = random_tokens(10, c.vocab_size, 13);
  KvCacheTensor kv_fused(c), kv_base(c);
  Tensor h = embed_tokens(ids, w);
  for (size_t l = 0; l < c.num_layers; ++l) h = block_forward(h, l, w, nullptr, kv_fused, BlockMode::prefill);
  kv_base = kv_fused;
  const TokenId next = 17;
  const TokenId pair[2] = {next, next};
  const TokenId one[1] = {next};
  Tensor f = embed_tokens(pair, w);
  Tensor b = embed_tokens(one, w);
  for (size_t l = 0; l < c.num_layers; ++l) {
    f = block_forward(f, l, w, &a, kv_fused, BlockMode::decode_fused);
    b = block_forward(b, l, w, nullptr, kv_base, BlockMode::decode_encoder);
    for (size_t j = 0; j < c.hidden; ++j) ASSERT_EQ(f(0, j), b(0, j)) << "layer " << l;
  }
  EXPECT_TRUE(kv_fused.bit_identical(kv_base));
}

TEST(BlockForward, KeyValueAdapterOnlyForConventional) {
  auto c = small_config();
  auto w = BaseWeights::init(c, 1);
  auto conv = ConventionalAdapterSet::init(c, 4, 8.0, 2, "conv");
  KvCacheTensor kv(c);
  Tensor h = embed_tokens(random_tokens(3, c.vocab_size, 3), w);
  EXPECT_THROW(block_forward(h, 0, w, &conv.decoder, kv, BlockMode::prefill, nullptr, &conv.kv[0]),
               ContractViolation);
}

TEST(BaseWeights, FreezeWitnessSurvivesInference) {
  auto c = small_config();
  auto w = BaseWeights::init(c, 21);
  auto a = trained_like_adapter(c, 22);
  GenerationSession s(w, &a, random_tokens(12, c.vocab_size, 23));
  generate(s, 8, DecodePath::fused);
  EXPECT_TRUE(w.freeze_intact());
}

}  // namespace
}  // namespace icarus
