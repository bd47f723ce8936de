// Copyright 2026 The icarus-kv Authors.
// SPDX-License-Identifier: Apache-2.0

// Block-granular KV store shared by all sessions of a serving run.
//
// Full 16-token chunks are content addressed by a chained hash of
// (namespace, parent hash, chunk tokens); partial tail chunks stay in the
// session. Shared-encoder models all use one namespace, so a prefix written
// while serving one adapter is a hit for every other. Conventional models
// get one namespace each.
//
// Memory is reclaimed from unpinned blocks in two tiers. Blocks no live
// request holds are reclaimed first (they are only an opportunistic cache);
// blocks that a request between turns still retains are evicted after that,
// by recompute or swap.

#pragma once

#include <algorithm>
#include <functional>
#include <optional>
#include <set>
#include <ostream>
#include <span>
#include <string>
#include <tuple>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "json.hpp"

#include "icarus/errors.hpp"
#include "icarus/hash.hpp"
#include "icarus/kv_cache.hpp"
#include "icarus/model.hpp"
#include "icarus/runtime.hpp"

namespace icarus {

using BlockId = uint64_t;
using NamespaceId = uint64_t;

inline constexpr NamespaceId kSharedNamespace = 0;
inline constexpr size_t kDefaultBlockTokens = 16;

enum class CacheMode { baseline, icarus };
enum class EvictionPolicy { recompute, swap };

inline const char* mode_name(CacheMode m) { return m == CacheMode::icarus ? "icarus" : "baseline"; }
inline const char* policy_name(EvictionPolicy p) { return p == EvictionPolicy::swap ? "swap" : "recompute"; }

inline CacheMode parse_mode(const std::string& s) {
  if (s == "icarus") return CacheMode::icarus;
  if (s == "baseline") return CacheMode::baseline;
  throw UsageError("unknown mode '" + s + "' (expected baseline or icarus)");
}

inline EvictionPolicy parse_policy(const std::string& s) {
  if (s == "recompute") return EvictionPolicy::recompute;
  if (s == "swap") return EvictionPolicy::swap;
  throw UsageError("unknown eviction policy '" + s + "' (expected recompute or swap)");
}

// Agent ids are 0-based. Baseline namespaces start at 1 so they never
// collide with the shared one.
inline NamespaceId namespace_for(CacheMode mode, size_t agent) {
  return mode == CacheMode::icarus ? kSharedNamespace : static_cast<NamespaceId>(agent) + 1;
}

struct MemoryBudget {
  size_t kv_bytes = size_t{64} << 20;
  size_t swap_bytes = 0;
  double recompute_cost_per_token = 0.0;
  double swap_cost_per_byte = 0.0;

  void validate() const {
    if (kv_bytes == 0) throw ConfigError("memory budget must be positive");
    if (!(recompute_cost_per_token >= 0) || !(swap_cost_per_byte >= 0)) {
      throw ConfigError("memory budget costs must be non-negative");
    }
  }
};

enum class Residency : uint8_t { resident, swapped, freed };

struct KvBlock {
  BlockId id = 0;
  NamespaceId ns = 0;
  uint64_t hash = 0;
  BlockId parent = 0;  // 0 for the first block of a chain
  size_t depth = 0;
  std::vector<TokenId> tokens;
  std::vector<float> payload;  // empty when the pool keeps accounting only
  size_t bytes = 0;
  size_t refs = 0;
  size_t retains = 0;
  uint64_t last_touch = 0;
  Residency state = Residency::resident;
  size_t writer = 0;
  std::optional<TokenId> next_token;
};

struct PoolStats {
  size_t bytes_in_use = 0;
  size_t peak_bytes = 0;
  size_t swap_bytes_in_use = 0;
  size_t peak_swap_bytes = 0;
  size_t private_bytes = 0;
  size_t blocks_resident = 0;
  size_t lookups = 0;
  size_t hit_blocks = 0;
  size_t miss_lookups = 0;
  size_t hit_tokens = 0;
  size_t cross_model_hit_blocks = 0;
  size_t allocated_bytes = 0;
  size_t duplicate_avoided_bytes = 0;
  size_t reclaims = 0;
  size_t evictions = 0;
  size_t swap_outs = 0;
  size_t swap_ins = 0;
  size_t swap_out_bytes = 0;
  size_t swap_in_bytes = 0;
  size_t recompute_tokens = 0;
  size_t hash_collisions = 0;
  double recompute_cost = 0.0;
  double swap_cost = 0.0;

  bool operator==(const PoolStats&) const = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(PoolStats, bytes_in_use, peak_bytes, swap_bytes_in_use, peak_swap_bytes,
                                   private_bytes, blocks_resident, lookups, hit_blocks, miss_lookups, hit_tokens,
                                   cross_model_hit_blocks, allocated_bytes, duplicate_avoided_bytes, reclaims,
                                   evictions, swap_outs, swap_ins, swap_out_bytes, swap_in_bytes,
                                   recompute_tokens, hash_collisions, recompute_cost, swap_cost)

// One JSON object per line.
inline void write_stats_record(std::ostream& os, const std::string& label, const PoolStats& s) {
  nlohmann::json j = s;
  j["label"] = label;
  os << j.dump() << '\n';
}

struct LookupResult {
  size_t matched_tokens = 0;
  std::vector<BlockId> chain;  // pinned; hand back through release()
  size_t recompute_tokens = 0;
  size_t swap_in_bytes = 0;
  std::optional<TokenId> next_token;
};

struct CommitResult {
  std::vector<BlockId> chain;  // pinned; hand back through release()
  size_t new_bytes = 0;
};

struct EvictResult {
  size_t freed = 0;
  size_t shortfall = 0;
};

class KvPool {
 public:
  KvPool(const ModelConfig& config, MemoryBudget budget, EvictionPolicy policy = EvictionPolicy::recompute,
         size_t block_tokens = kDefaultBlockTokens, bool store_payload = true)
      : config_(config), budget_(budget), policy_(policy), block_tokens_(block_tokens),
        store_payload_(store_payload) {
    config_.validate();
    budget_.validate();
    if (block_tokens_ == 0) throw ConfigError("block size must be positive");
    block_bytes_ = block_tokens_ * config_.kv_bytes_per_token();
  }

  size_t block_tokens() const { return block_tokens_; }
  size_t block_bytes() const { return block_bytes_; }
  EvictionPolicy policy() const { return policy_; }
  const MemoryBudget& budget() const { return budget_; }
  const ModelConfig& config() const { return config_; }
  size_t bytes_in_use() const { return stats_.bytes_in_use; }

  // Longest cached full-block prefix. Returned blocks are pinned. Swapped
  // blocks on the path are brought back (charged); if that is impossible
  // the match stops there.
  LookupResult lookup_prefix(NamespaceId ns, std::span<const TokenId> tokens, size_t reader = 0) {
    ++stats_.lookups;
    ++tick_;
    LookupResult r;
    const size_t chunks = tokens.size() / block_tokens_;
    uint64_t parent_hash = 0;
    BlockId parent = 0;
    size_t c = 0;
    for (; c < chunks; ++c) {
      auto chunk = tokens.subspan(c * block_tokens_, block_tokens_);
      const uint64_t h = chain_hash(ns, parent_hash, chunk);
      BlockId id = find(ns, h, parent, chunk);
      if (id == 0) break;
      KvBlock& b = blocks_.at(id);
      if (b.state == Residency::swapped) {
        b.refs += 1;  // protect while making room
        const bool ok = swap_in(b);
        mutate(b, [](KvBlock& x) { x.refs -= 1; });
        if (!ok) break;
        r.swap_in_bytes += b.bytes;
      }
      mutate(b, [](KvBlock& x) { x.refs += 1; });
      r.chain.push_back(id);
      if (b.writer != reader) ++stats_.cross_model_hit_blocks;
      parent_hash = h;
      parent = id;
    }
    // Children are touched before parents so the tail of a chain is older.
    touch(r.chain);
    r.matched_tokens = r.chain.size() * block_tokens_;
    if (!r.chain.empty()) r.next_token = blocks_.at(r.chain.back()).next_token;
    stats_.hit_blocks += r.chain.size();
    stats_.hit_tokens += r.matched_tokens;
    if (r.chain.empty()) ++stats_.miss_lookups;

    // Lazily charge recomputation of chunks this pool once held and dropped.
    for (; c < chunks; ++c) {
      auto chunk = tokens.subspan(c * block_tokens_, block_tokens_);
      const uint64_t h = chain_hash(ns, parent_hash, chunk);
      auto it = dropped_.find(key(ns, h));
      if (it == dropped_.end()) break;
      dropped_.erase(it);
      r.recompute_tokens += block_tokens_;
      parent_hash = h;
    }
    stats_.recompute_tokens += r.recompute_tokens;
    const double rc = static_cast<double>(r.recompute_tokens) * budget_.recompute_cost_per_token;
    stats_.recompute_cost += rc;
    charges_ += rc;
    return r;
  }

  // Indexes every full chunk of `tokens`. Existing blocks are reused, so a
  // second commit of identical content allocates nothing. `next_token(p)`
  // supplies the base model's prediction after position p for block ends.
  CommitResult commit(NamespaceId ns, std::span<const TokenId> tokens, const KvCacheTensor* kv,
                      size_t writer = 0,
                      const std::function<std::optional<TokenId>(size_t)>& next_token = {}) {
    if (kv && kv->length() != tokens.size()) {
      throw ContractViolation("commit: cache holds " + std::to_string(kv->length()) + " positions for " +
                              std::to_string(tokens.size()) + " tokens");
    }
    if (store_payload_ && !kv) throw ContractViolation("commit: payload pool needs the session cache");
    ++tick_;
    CommitResult r;
    const size_t chunks = tokens.size() / block_tokens_;
    uint64_t parent_hash = 0;
    BlockId parent = 0;
    try {
      for (size_t c = 0; c < chunks; ++c) {
        auto chunk = tokens.subspan(c * block_tokens_, block_tokens_);
        const uint64_t h = chain_hash(ns, parent_hash, chunk);
        BlockId id = find(ns, h, parent, chunk);
        const size_t last_pos = (c + 1) * block_tokens_ - 1;
        if (id != 0) {
          KvBlock& b = blocks_.at(id);
          if (b.state == Residency::swapped) {
            b.refs += 1;
            const bool ok = swap_in(b);
            mutate(b, [](KvBlock& x) { x.refs -= 1; });
            if (!ok) throw CapacityError("commit: cannot bring a swapped block back within budget");
          }
          stats_.duplicate_avoided_bytes += b.bytes;
          if (!b.next_token && next_token) b.next_token = next_token(last_pos);
        } else {
          make_room(block_bytes_);
          KvBlock b;
          b.id = next_id_++;
          b.ns = ns;
          b.hash = h;
          b.parent = parent;
          b.depth = c;
          b.tokens.assign(chunk.begin(), chunk.end());
          if (store_payload_) b.payload = kv->export_range(c * block_tokens_, (c + 1) * block_tokens_);
          b.bytes = block_bytes_;
          b.writer = writer;
          if (next_token) b.next_token = next_token(last_pos);
          dropped_.erase(key(ns, h));
          index_.emplace(key(ns, h), b.id);
          id = b.id;
          victims_.insert(victim_key(b));
          blocks_.emplace(id, std::move(b));
          ++stats_.blocks_resident;
          add_resident(block_bytes_);
          stats_.allocated_bytes += block_bytes_;
          r.new_bytes += block_bytes_;
        }
        mutate(blocks_.at(id), [](KvBlock& x) { x.refs += 1; });
        r.chain.push_back(id);
        parent_hash = h;
        parent = id;
      }
    } catch (...) {
      release(r.chain);
      throw;
    }
    touch(r.chain);
    return r;
  }

  void release(std::span<const BlockId> chain) {
    for (BlockId id : chain) {
      KvBlock& b = blocks_.at(id);
      if (b.refs == 0) throw StateError("release of an unpinned block");
      mutate(b, [](KvBlock& x) { x.refs -= 1; });
    }
  }

  // Soft hold by a request between turns: such blocks are evicted only
  // after every unheld block is gone.
  void retain(std::span<const BlockId> chain) {
    for (BlockId id : chain) mutate(blocks_.at(id), [](KvBlock& x) { x.retains += 1; });
  }
  void unretain(std::span<const BlockId> chain) {
    for (BlockId id : chain) {
      auto it = blocks_.find(id);
      if (it == blocks_.end()) continue;  // freed while held
      if (it->second.retains == 0) throw StateError("unretain of an unheld block");
      mutate(it->second, [](KvBlock& x) { x.retains -= 1; });
    }
  }

  // Session-private bytes (tail positions and positions computed this turn).
  void reserve_private(size_t bytes) {
    make_room(bytes);
    add_resident(bytes);
    stats_.private_bytes += bytes;
  }
  void release_private(size_t bytes) {
    if (bytes > stats_.private_bytes) throw StateError("releasing more private bytes than reserved");
    stats_.private_bytes -= bytes;
    stats_.bytes_in_use -= bytes;
  }

  // Frees unpinned blocks in LRU order (unheld tier first) until `needed`
  // bytes of device memory are released.
  EvictResult evict(EvictionPolicy policy, size_t needed) {
    if (needed == 0) throw ConfigError("evict: needed bytes must be positive");
    EvictResult r;
    while (r.freed < needed) {
      BlockId victim = pick_victim();
      if (victim == 0) break;
      r.freed += drop(victim, policy);
    }
    r.shortfall = r.freed >= needed ? 0 : needed - r.freed;
    return r;
  }

  const KvBlock& block(BlockId id) const { return blocks_.at(id); }
  bool contains(BlockId id) const { return blocks_.count(id) != 0; }

  const PoolStats& stats() const { return stats_; }

  // Swap and recompute charges accrued since the last call.
  double take_charges() {
    double c = charges_;
    charges_ = 0;
    return c;
  }

  size_t indexed_bytes(NamespaceId ns) const {
    size_t n = 0;
    for (const auto& [id, b] : blocks_) {
      if (b.ns == ns && b.state == Residency::resident) n += b.bytes;
    }
    return n;
  }

 private:
  struct Key {
    NamespaceId ns;
    uint64_t hash;
    bool operator==(const Key&) const = default;
  };
  struct KeyHash {
    size_t operator()(const Key& k) const { return static_cast<size_t>(k.hash ^ (k.ns * 0x9e3779b97f4a7c15ULL)); }
  };

  static Key key(NamespaceId ns, uint64_t h) { return {ns, h}; }

  static uint64_t chain_hash(NamespaceId ns, uint64_t parent, std::span<const TokenId> chunk) {
    Fnv1a f;
    f.value(ns).value(parent).span(chunk);
    return f.digest();
  }

  // Index hit with full token and parent verification.
  BlockId find(NamespaceId ns, uint64_t h, BlockId parent, std::span<const TokenId> chunk) {
    auto it = index_.find(key(ns, h));
    if (it == index_.end()) return 0;
    const KvBlock& b = blocks_.at(it->second);
    if (b.parent != parent || !std::equal(chunk.begin(), chunk.end(), b.tokens.begin(), b.tokens.end())) {
      ++stats_.hash_collisions;
      return 0;
    }
    return b.id;
  }

  void add_resident(size_t bytes) {
    stats_.bytes_in_use += bytes;
    stats_.peak_bytes = std::max(stats_.peak_bytes, stats_.bytes_in_use);
  }

  // Victim order: unheld before held, then least recently touched.
  using VictimKey = std::tuple<bool, uint64_t, BlockId>;
  static VictimKey victim_key(const KvBlock& b) { return {b.retains > 0, b.last_touch, b.id}; }
  static bool evictable(const KvBlock& b) { return b.state == Residency::resident && b.refs == 0; }

  template <typename F>
  void mutate(KvBlock& b, F f) {
    if (evictable(b)) victims_.erase(victim_key(b));
    f(b);
    if (evictable(b)) victims_.insert(victim_key(b));
  }

  // Children before parents so the tail of a chain is older.
  void touch(const std::vector<BlockId>& chain) {
    for (size_t i = chain.size(); i-- > 0;) {
      mutate(blocks_.at(chain[i]), [&](KvBlock& x) { x.last_touch = ++tick_; });
    }
  }

  void make_room(size_t bytes) {
    if (bytes > budget_.kv_bytes) {
      throw CapacityError("request for " + std::to_string(bytes) + " bytes exceeds the KV budget of " +
                          std::to_string(budget_.kv_bytes));
    }
    if (stats_.bytes_in_use + bytes <= budget_.kv_bytes) return;
    const size_t need = stats_.bytes_in_use + bytes - budget_.kv_bytes;
    EvictResult r = evict(policy_, need);
    if (r.shortfall > 0) {
      throw CapacityError("KV budget exhausted: " + std::to_string(r.shortfall) +
                          " bytes short after evicting every unpinned block");
    }
  }

  BlockId pick_victim() const { return victims_.empty() ? 0 : std::get<2>(*victims_.begin()); }

  size_t drop(BlockId id, EvictionPolicy policy) {
    KvBlock& b = blocks_.at(id);
    const size_t bytes = b.bytes;
    const bool held = b.retains > 0;
    victims_.erase(victim_key(b));
    --stats_.blocks_resident;
    if (held) {
      ++stats_.evictions;
    } else {
      ++stats_.reclaims;
    }
    stats_.bytes_in_use -= bytes;
    if (held && policy == EvictionPolicy::swap && stats_.swap_bytes_in_use + bytes <= budget_.swap_bytes) {
      b.state = Residency::swapped;
      stats_.swap_bytes_in_use += bytes;
      stats_.peak_swap_bytes = std::max(stats_.peak_swap_bytes, stats_.swap_bytes_in_use);
      ++stats_.swap_outs;
      stats_.swap_out_bytes += bytes;
      charge_swap(bytes);
    } else {
      dropped_.insert(key(b.ns, b.hash));
      index_.erase(key(b.ns, b.hash));
      blocks_.erase(id);
    }
    return bytes;
  }

  bool swap_in(KvBlock& b) {
    if (b.bytes > budget_.kv_bytes) return false;
    if (stats_.bytes_in_use + b.bytes > budget_.kv_bytes) {
      EvictResult r = evict(policy_, stats_.bytes_in_use + b.bytes - budget_.kv_bytes);
      if (r.shortfall > 0) return false;
    }
    mutate(b, [](KvBlock& x) { x.state = Residency::resident; });
    ++stats_.blocks_resident;
    stats_.swap_bytes_in_use -= b.bytes;
    ++stats_.swap_ins;
    stats_.swap_in_bytes += b.bytes;
    charge_swap(b.bytes);
    add_resident(b.bytes);
    return true;
  }

  void charge_swap(size_t bytes) {
    const double c = static_cast<double>(bytes) * budget_.swap_cost_per_byte;
    stats_.swap_cost += c;
    charges_ += c;
  }

  ModelConfig config_;
  MemoryBudget budget_;
  EvictionPolicy policy_;
  size_t block_tokens_;
  size_t block_bytes_ = 0;
  bool store_payload_;
  BlockId next_id_ = 1;
  uint64_t tick_ = 0;
  double charges_ = 0.0;
  std::unordered_map<BlockId, KvBlock> blocks_;
  std::unordered_map<Key, BlockId, KeyHash> index_;
  std::unordered_set<Key, KeyHash> dropped_;
  std::set<VictimKey> victims_;
  PoolStats stats_;
};

// Session glue: adopt a pooled prefix, prefill the rest.
struct PooledPrefill {
  TokenId first = 0;
  LookupResult hit;
};

inline PooledPrefill prefill_from_pool(KvPool& pool, NamespaceId ns, GenerationSession& s, size_t reader = 0) {
  PooledPrefill out;
  out.hit = pool.lookup_prefix(ns, s.prompt(), reader);
  try {
    for (size_t i = 0; i < out.hit.chain.size(); ++i) {
      const KvBlock& b = pool.block(out.hit.chain[i]);
      const bool last = i + 1 == out.hit.chain.size();
      s.adopt_prefix(b.payload, pool.block_tokens(), last ? b.next_token : std::nullopt);
    }
    out.first = prefill(s);
  } catch (...) {
    pool.release(out.hit.chain);
    throw;
  }
  return out;
}

inline CommitResult commit_session(KvPool& pool, NamespaceId ns, const GenerationSession& s, size_t writer = 0) {
  return pool.commit(ns, s.context(), &s.cache(), writer,
                     [&](size_t pos) { return s.base_next_token_at(pos); });
}

}  // namespace icarus
