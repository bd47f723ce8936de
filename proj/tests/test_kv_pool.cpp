// Copyright 2026 The icarus-kv Authors.
// SPDX-License-Identifier: Apache-2.0

#include <sstream>

#include <gtest/gtest.h>

#include "icarus/kv_pool.hpp"
#include "test_util.hpp"

namespace icarus {
namespace {

using testing::random_tokens;
using testing::small_config;
using testing::trained_like_adapter;

MemoryBudget roomy() {
  MemoryBudget b;
  b.kv_bytes = size_t{64} << 20;
  return b;
}

TEST(KvPool, EmptyIndexMisses) {
  KvPool pool(small_config(), roomy(), EvictionPolicy::recompute, 16, false);
  auto r = pool.lookup_prefix(kSharedNamespace, random_tokens(40, 64, 1));
  EXPECT_EQ(r.matched_tokens, 0u);
  EXPECT_TRUE(r.chain.empty());
}

TEST(KvPool, FreshStatsAreZero) {
  KvPool pool(small_config(), roomy());
  EXPECT_EQ(pool.stats(), PoolStats{});
}

TEST(KvPool, SharedNamespaceCrossModelHit) {
  auto c = small_config();
  auto w = BaseWeights::init(c, 1);
  auto a = trained_like_adapter(c, 2), b = trained_like_adapter(c, 3);
  KvPool pool(c, roomy());
  auto prompt = random_tokens(64, c.vocab_size, 4);

  GenerationSession sa(w, &a, prompt);
  auto pa = prefill_from_pool(pool, namespace_for(CacheMode::icarus, 0), sa, 0);
  auto ca = commit_session(pool, namespace_for(CacheMode::icarus, 0), sa, 0);
  pool.release(pa.hit.chain);
  pool.release(ca.chain);

  GenerationSession sb(w, &b, prompt);
  auto pb = prefill_from_pool(pool, namespace_for(CacheMode::icarus, 1), sb, 1);
  EXPECT_EQ(pb.hit.matched_tokens, 64u);
  EXPECT_EQ(sb.ledger().prefill_tokens, 0u);
  EXPECT_EQ(pb.first, pa.first);
  EXPECT_TRUE(sb.cache().bit_identical(sa.cache()));
  EXPECT_EQ(pool.stats().cross_model_hit_blocks, 4u);
  pool.release(pb.hit.chain);
}

TEST(KvPool, BaselineNamespacesDoNotShare) {
  auto c = small_config();
  KvPool pool(c, roomy(), EvictionPolicy::recompute, 16, false);
  auto prompt = random_tokens(64, c.vocab_size, 5);
  auto ca = pool.commit(namespace_for(CacheMode::baseline, 0), prompt, nullptr, 0);
  pool.release(ca.chain);
  auto r = pool.lookup_prefix(namespace_for(CacheMode::baseline, 1), prompt, 1);
  EXPECT_EQ(r.matched_tokens, 0u);
  auto own = pool.lookup_prefix(namespace_for(CacheMode::baseline, 0), prompt, 0);
  EXPECT_EQ(own.matched_tokens, 64u);
  pool.release(own.chain);
}

TEST(KvPool, CommitThenLookupAndDedup) {
  auto c = small_config();
  KvPool pool(c, roomy(), EvictionPolicy::recompute, 16, false);
  auto toks = random_tokens(32, c.vocab_size, 6);
  auto first = pool.commit(kSharedNamespace, toks, nullptr);
  EXPECT_EQ(first.new_bytes, 2 * pool.block_bytes());
  auto second = pool.commit(kSharedNamespace, toks, nullptr);
  EXPECT_EQ(second.new_bytes, 0u);
  EXPECT_EQ(pool.stats().duplicate_avoided_bytes, 2 * pool.block_bytes());
  auto hit = pool.lookup_prefix(kSharedNamespace, toks);
  EXPECT_EQ(hit.matched_tokens, 32u);
  for (auto* ch : {&first.chain, &second.chain, &hit.chain}) pool.release(*ch);
}

TEST(KvPool, TailTokensAreNotIndexed) {
  auto c = small_config();
  KvPool pool(c, roomy(), EvictionPolicy::recompute, 16, false);
  auto toks = random_tokens(17, c.vocab_size, 7);
  auto r = pool.commit(kSharedNamespace, toks, nullptr);
  EXPECT_EQ(r.chain.size(), 1u);
  EXPECT_EQ(pool.bytes_in_use(), pool.block_bytes());
  auto hit = pool.lookup_prefix(kSharedNamespace, toks);
  EXPECT_EQ(hit.matched_tokens, 16u);
  pool.release(r.chain);
  pool.release(hit.chain);
}

TEST(KvPool, CommitChecksCacheLength) {
  auto c = small_config();
  KvPool pool(c, roomy());
  KvCacheTensor kv(c);
  auto toks = random_tokens(16, c.vocab_size, 8);
  EXPECT_THROW(pool.commit(kSharedNamespace, toks, &kv), ContractViolation);
}

TEST(KvPool, LookupVerifiesTokensNotJustHashes) {
  auto c = small_config();
  KvPool pool(c, roomy(), EvictionPolicy::recompute, 16, false);
  auto a = random_tokens(32, c.vocab_size, 9);
  auto b = a;
  b[20] = (b[20] + 1) % static_cast<TokenId>(c.vocab_size);
  auto r = pool.commit(kSharedNamespace, a, nullptr);
  pool.release(r.chain);
  auto hit = pool.lookup_prefix(kSharedNamespace, b);
  EXPECT_EQ(hit.matched_tokens, 16u);
  for (BlockId id : hit.chain) {
    const auto& blk = pool.block(id);
    EXPECT_TRUE(std::equal(blk.tokens.begin(), blk.tokens.end(), b.begin() + blk.depth * 16));
  }
  pool.release(hit.chain);
}

TEST(KvPool, EvictSkipsPinnedBlocks) {
  auto c = small_config();
  KvPool pool(c, roomy(), EvictionPolicy::recompute, 16, false);
  auto r = pool.commit(kSharedNamespace, random_tokens(48, c.vocab_size, 10), nullptr);
  auto e = pool.evict(EvictionPolicy::recompute, pool.block_bytes());
  EXPECT_EQ(e.freed, 0u);
  EXPECT_EQ(e.shortfall, pool.block_bytes());
  pool.release(r.chain);
  EXPECT_THROW(pool.evict(EvictionPolicy::recompute, 0), ConfigError);
}

TEST(KvPool, EvictsLeastRecentlyUsedFirst) {
  auto c = small_config();
  KvPool pool(c, roomy(), EvictionPolicy::recompute, 16, false);
  auto old_t = random_tokens(16, c.vocab_size, 11);
  auto new_t = random_tokens(16, c.vocab_size, 12);
  auto o = pool.commit(1, old_t, nullptr);
  auto n = pool.commit(1, new_t, nullptr);
  const BlockId old_id = o.chain[0], new_id = n.chain[0];
  pool.release(o.chain);
  pool.release(n.chain);
  auto e = pool.evict(EvictionPolicy::recompute, 1);
  EXPECT_EQ(e.freed, pool.block_bytes());
  EXPECT_FALSE(pool.contains(old_id));
  EXPECT_TRUE(pool.contains(new_id));
}

TEST(KvPool, UnheldBlocksGoBeforeRetainedOnes) {
  auto c = small_config();
  KvPool pool(c, roomy(), EvictionPolicy::recompute, 16, false);
  auto held = pool.commit(1, random_tokens(16, c.vocab_size, 13), nullptr);
  auto loose = pool.commit(1, random_tokens(16, c.vocab_size, 14), nullptr);
  pool.retain(held.chain);
  pool.release(held.chain);
  pool.release(loose.chain);
  pool.evict(EvictionPolicy::recompute, 1);
  EXPECT_TRUE(pool.contains(held.chain[0]));
  EXPECT_EQ(pool.stats().reclaims, 1u);
  EXPECT_EQ(pool.stats().evictions, 0u);
  pool.evict(EvictionPolicy::recompute, 1);
  EXPECT_EQ(pool.stats().evictions, 1u);
}

TEST(KvPool, RecomputeChargedLazilyOnMiss) {
  auto c = small_config();
  MemoryBudget b = roomy();
  b.recompute_cost_per_token = 0.5;
  KvPool pool(c, b, EvictionPolicy::recompute, 16, false);
  auto toks = random_tokens(32, c.vocab_size, 15);
  auto r = pool.commit(1, toks, nullptr);
  pool.retain(r.chain);
  pool.release(r.chain);
  pool.evict(EvictionPolicy::recompute, 2 * pool.block_bytes());
  EXPECT_EQ(pool.stats().recompute_tokens, 0u);
  EXPECT_EQ(pool.take_charges(), 0.0);
  auto miss = pool.lookup_prefix(1, toks);
  EXPECT_EQ(miss.matched_tokens, 0u);
  EXPECT_EQ(miss.recompute_tokens, 32u);
  EXPECT_EQ(pool.take_charges(), 16.0);
  // Charged once: a second miss does not pay again.
  EXPECT_EQ(pool.lookup_prefix(1, toks).recompute_tokens, 0u);
}

TEST(KvPool, SwapThenTouchChargesSwapInOnce) {
  auto c = small_config();
  MemoryBudget b;
  b.kv_bytes = size_t{1} << 20;
  b.swap_bytes = size_t{1} << 20;
  b.swap_cost_per_byte = 1e-6;
  KvPool pool(c, b, EvictionPolicy::swap);
  auto w = BaseWeights::init(c, 16);
  GenerationSession s(w, nullptr, random_tokens(16, c.vocab_size, 17));
  prefill(s);
  auto r = commit_session(pool, 3, s);
  pool.retain(r.chain);
  pool.release(r.chain);
  auto e = pool.evict(EvictionPolicy::swap, 1);
  EXPECT_EQ(e.freed, pool.block_bytes());
  EXPECT_EQ(pool.stats().swap_outs, 1u);
  EXPECT_EQ(pool.bytes_in_use(), 0u);
  EXPECT_EQ(pool.block(r.chain[0]).state, Residency::swapped);
  const double out_cost = pool.take_charges();
  EXPECT_DOUBLE_EQ(out_cost, pool.block_bytes() * 1e-6);

  auto hit = pool.lookup_prefix(3, s.prompt());
  EXPECT_EQ(hit.matched_tokens, 16u);
  EXPECT_EQ(hit.swap_in_bytes, pool.block_bytes());
  EXPECT_EQ(pool.block(r.chain[0]).state, Residency::resident);
  EXPECT_DOUBLE_EQ(pool.take_charges(), pool.block_bytes() * 1e-6);
  auto again = pool.lookup_prefix(3, s.prompt());
  EXPECT_EQ(again.swap_in_bytes, 0u);
  EXPECT_EQ(pool.stats().swap_ins, 1u);
  // The restored payload is the original one.
  EXPECT_EQ(pool.block(r.chain[0]).payload, s.cache().export_range(0, 16));
  pool.release(hit.chain);
  pool.release(again.chain);
}

TEST(KvPool, BudgetNeverExceeded) {
  auto c = small_config();
  MemoryBudget b;
  b.kv_bytes = 5 * 16 * c.kv_bytes_per_token();
  KvPool pool(c, b, EvictionPolicy::recompute, 16, false);
  std::mt19937_64 rng(18);
  std::vector<std::vector<BlockId>> held;
  for (int i = 0; i < 200; ++i) {
    auto toks = random_tokens(16 * (1 + rng() % 3) + rng() % 16, c.vocab_size, 1000 + rng() % 40);
    try {
      auto r = pool.commit(rng() % 3, toks, nullptr);
      if (rng() % 4 == 0) {
        held.push_back(r.chain);
      } else {
        pool.release(r.chain);
      }
    } catch (const CapacityError&) {
    }
    if (held.size() > 2) {
      pool.release(held.front());
      held.erase(held.begin());
    }
    ASSERT_LE(pool.bytes_in_use(), b.kv_bytes);
    ASSERT_LE(pool.stats().peak_bytes, b.kv_bytes);
  }
}

TEST(KvPool, CommitFailsWhenEverythingIsPinned) {
  auto c = small_config();
  MemoryBudget b;
  b.kv_bytes = 2 * 16 * c.kv_bytes_per_token();
  KvPool pool(c, b, EvictionPolicy::recompute, 16, false);
  auto r = pool.commit(1, random_tokens(32, c.vocab_size, 19), nullptr);
  EXPECT_THROW(pool.commit(1, random_tokens(32, c.vocab_size, 20), nullptr), CapacityError);
  EXPECT_LE(pool.bytes_in_use(), b.kv_bytes);
  pool.release(r.chain);
  EXPECT_NO_THROW(pool.release(pool.commit(1, random_tokens(32, c.vocab_size, 20), nullptr).chain));
}

TEST(KvPool, PeakBytesScaleWithNamespaces) {
  auto c = small_config();
  auto prompt = random_tokens(256, c.vocab_size, 21);
  for (size_t n : {2u, 4u, 8u}) {
    size_t peak[2] = {0, 0};
    for (CacheMode m : {CacheMode::baseline, CacheMode::icarus}) {
      KvPool pool(c, roomy(), EvictionPolicy::recompute, 16, false);
      for (size_t agent = 0; agent < n; ++agent) {
        auto hit = pool.lookup_prefix(namespace_for(m, agent), prompt, agent);
        auto r = pool.commit(namespace_for(m, agent), prompt, nullptr, agent);
        pool.release(hit.chain);
        pool.release(r.chain);
      }
      peak[m == CacheMode::icarus] = pool.stats().peak_bytes;
    }
    EXPECT_EQ(peak[1], 256 * c.kv_bytes_per_token());
    EXPECT_EQ(peak[0], n * peak[1]);
  }
}

TEST(KvPool, PrefillTwiceComputesZeroSecondTime) {
  auto c = small_config();
  auto w = BaseWeights::init(c, 22);
  KvPool pool(c, roomy());
  auto prompt = random_tokens(48, c.vocab_size, 23);
  GenerationSession s1(w, nullptr, prompt);
  auto p1 = prefill_from_pool(pool, kSharedNamespace, s1);
  auto c1 = commit_session(pool, kSharedNamespace, s1);
  GenerationSession s2(w, nullptr, prompt);
  auto p2 = prefill_from_pool(pool, kSharedNamespace, s2);
  EXPECT_EQ(s1.ledger().prefill_tokens, 48u);
  EXPECT_EQ(s2.ledger().prefill_tokens, 0u);
  EXPECT_EQ(s2.ledger().prefix_hit_tokens, 48u);
  EXPECT_EQ(p1.first, p2.first);
  pool.release(p1.hit.chain);
  pool.release(c1.chain);
  pool.release(p2.hit.chain);
}

TEST(KvPool, StatsExportOneJsonRecordPerLine) {
  KvPool pool(small_config(), roomy(), EvictionPolicy::recompute, 16, false);
  std::ostringstream os;
  write_stats_record(os, "a", pool.stats());
  pool.release(pool.commit(1, random_tokens(16, 64, 24), nullptr).chain);
  write_stats_record(os, "b", pool.stats());
  std::istringstream is(os.str());
  std::string line;
  std::vector<nlohmann::json> recs;
  while (std::getline(is, line)) recs.push_back(nlohmann::json::parse(line));
  ASSERT_EQ(recs.size(), 2u);
  EXPECT_EQ(recs[0]["label"], "a");
  EXPECT_EQ(recs[1]["allocated_bytes"].get<size_t>(), pool.block_bytes());
  EXPECT_EQ(recs[1].get<PoolStats>(), pool.stats());
}

}  // namespace
}  // namespace icarus
