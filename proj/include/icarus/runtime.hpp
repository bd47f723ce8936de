// Copyright 2026 The icarus-kv Authors.
// SPDX-License-Identifier: Apache-2.0

// Inference over one session. Prefill runs the frozen base model alone; the
// fused decode step carries the encoder and decoder branches as a batch of
// two, concatenates their query heads and attends to the shared cache once.
// The sequential step runs the same two branches one after the other and
// exists as an oracle for the fused one.

#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "icarus/errors.hpp"
#include "icarus/kv_cache.hpp"
#include "icarus/layers.hpp"
#include "icarus/metrics.hpp"
#include "icarus/model.hpp"

namespace icarus {

enum class DecodePath { fused, sequential };

inline const char* path_name(DecodePath p) { return p == DecodePath::fused ? "fused" : "sequential"; }

struct SessionOptions {
  size_t max_new_tokens = 1024;
  std::optional<TokenId> end_token;
  // Positions p with (p + 1) % block_tokens == 0 get a base next-token
  // annotation (see GenerationSession::base_next_token_at).
  size_t block_tokens = 16;
};

class GenerationSession {
 public:
  GenerationSession(const BaseWeights& base, const AdapterSet* adapter, std::vector<TokenId> prompt,
                    SessionOptions opts = {})
      : base_(&base), adapter_(adapter), prompt_(std::move(prompt)), opts_(opts),
        cache_(base.config()) {
    if (adapter_) adapter_->check_against(base.config());
    context_ = prompt_;
  }

  // A conventionally fine-tuned model: one branch, adapted K/V, own cache.
  static GenerationSession conventional(const BaseWeights& base, const ConventionalAdapterSet& adapter,
                                        std::vector<TokenId> prompt, SessionOptions opts = {}) {
    GenerationSession s(base, nullptr, std::move(prompt), opts);
    adapter.decoder.check_against(base.config());
    s.conventional_ = &adapter;
    return s;
  }

  const BaseWeights& base() const { return *base_; }
  const AdapterSet* adapter() const { return adapter_; }
  const ConventionalAdapterSet* conventional_adapter() const { return conventional_; }
  bool shares_encoder() const { return conventional_ == nullptr; }

  std::span<const TokenId> prompt() const { return prompt_; }
  const std::vector<TokenId>& produced() const { return produced_; }
  // Tokens whose K/V are in the cache, in order.
  const std::vector<TokenId>& context() const { return context_; }

  KvCacheTensor& cache() { return cache_; }
  const KvCacheTensor& cache() const { return cache_; }
  const MetricsLedger& ledger() const { return ledger_; }
  bool prefilled() const { return prefilled_; }

  // Loads `positions` cached positions (export_range layout) ahead of
  // prefill. `next_token` is the cached base prediction after the last of
  // them, needed when the whole prompt is served from cache.
  void adopt_prefix(std::span<const float> payload, size_t positions,
                    std::optional<TokenId> next_token = std::nullopt) {
    if (prefilled_) throw StateError("adopt_prefix after prefill");
    cache_.import_range(payload, positions);
    if (cache_.length() > prompt_.size()) throw StateError("cached prefix longer than the prompt");
    if (next_token) base_next_[cache_.length() - 1] = *next_token;
  }

  // Decoder-branch logits of the last step (base logits after prefill).
  const Tensor& last_logits() const { return last_logits_; }
  const Tensor& last_base_logits() const { return last_base_logits_; }

  // The base model's greedy next token after position `pos`, recorded for
  // block-final positions and for the last prompt position.
  std::optional<TokenId> base_next_token_at(size_t pos) const {
    auto it = base_next_.find(pos);
    if (it == base_next_.end()) return std::nullopt;
    return it->second;
  }

  const SessionOptions& options() const { return opts_; }

 private:
  friend TokenId prefill(GenerationSession&);
  friend TokenId decode_step_fused(GenerationSession&, TokenId);
  friend TokenId decode_step_sequential(GenerationSession&, TokenId);
  friend TokenId decode_step_conventional(GenerationSession&, TokenId);

  void check_decode(TokenId token) const {
    if (!prefilled_ || cache_.length() == 0) throw StateError("decode step without a prefilled cache");
    if (cache_.length() >= base_->config().max_context) {
      throw CapacityError("context of " + std::to_string(cache_.length()) +
                          " positions reached max_context");
    }
    if (produced_.size() >= opts_.max_new_tokens) {
      throw CapacityError("session already produced max_new_tokens");
    }
    if (token < 0 || static_cast<size_t>(token) >= base_->config().vocab_size) {
      throw IndexError("token id " + std::to_string(token) + " outside vocabulary");
    }
  }

  bool annotates(size_t pos) const {
    return opts_.block_tokens > 0 && (pos + 1) % opts_.block_tokens == 0;
  }

  const BaseWeights* base_;
  const AdapterSet* adapter_;
  const ConventionalAdapterSet* conventional_ = nullptr;
  std::vector<TokenId> prompt_;
  std::vector<TokenId> produced_;
  std::vector<TokenId> context_;
  SessionOptions opts_;
  KvCacheTensor cache_;
  MetricsLedger ledger_;
  bool prefilled_ = false;
  Tensor last_logits_;
  Tensor last_base_logits_;
  std::map<size_t, TokenId> base_next_;
};

inline TokenId greedy(std::span<const float> logits) { return static_cast<TokenId>(argmax(logits)); }

// Fills the cache for every prompt position not already adopted from a
// prefix hit and returns the base model's greedy next token.
inline TokenId prefill(GenerationSession& s) {
  const ModelConfig& c = s.base_->config();
  if (s.prefilled_) throw StateError("session already prefilled");
  if (s.prompt_.empty()) throw StateError("prefill of an empty prompt");
  if (s.prompt_.size() > c.max_context) {
    throw CapacityError("prompt of " + std::to_string(s.prompt_.size()) +
                        " tokens exceeds max_context " + std::to_string(c.max_context));
  }
  const size_t cached = s.cache_.length();
  const size_t n = s.prompt_.size() - cached;
  s.ledger_.kv_read_events += 1;
  s.ledger_.prefix_hit_tokens += cached;
  s.prefilled_ = true;

  if (n == 0) {
    auto hint = s.base_next_token_at(cached - 1);
    if (!hint) throw StateError("fully cached prompt without a cached next-token annotation");
    return *hint;
  }

  std::span<const TokenId> suffix(s.prompt_.data() + cached, n);
  Tensor h = embed_tokens(suffix, *s.base_);
  s.ledger_.param_read_events += 1;
  s.ledger_.kv_attention_passes += 1;
  s.ledger_.prefill_tokens += n;
  for (size_t l = 0; l < c.num_layers; ++l) {
    if (s.conventional_) {
      h = block_forward(h, l, *s.base_, &s.conventional_->decoder, s.cache_, BlockMode::conventional,
                        &s.ledger_, &s.conventional_->kv[l]);
    } else {
      h = block_forward(h, l, *s.base_, nullptr, s.cache_, BlockMode::prefill, &s.ledger_);
    }
  }

  // Only rows whose logits are needed go through the LM head.
  std::vector<size_t> rows;
  for (size_t r = 0; r < n; ++r) {
    if (s.annotates(cached + r) || r + 1 == n) rows.push_back(r);
  }
  Tensor picked({rows.size(), c.hidden});
  for (size_t i = 0; i < rows.size(); ++i) {
    auto src = h.row(rows[i]);
    std::copy(src.begin(), src.end(), picked.row(i).begin());
  }
  Tensor logits = lm_logits(picked, *s.base_, &s.ledger_);
  for (size_t i = 0; i < rows.size(); ++i) {
    s.base_next_[cached + rows[i]] = greedy(logits.row(i));
  }
  s.last_base_logits_ = Tensor({c.vocab_size}, std::vector<float>(logits.row(rows.size() - 1).begin(),
                                                                  logits.row(rows.size() - 1).end()));
  s.last_logits_ = s.last_base_logits_;
  return greedy(s.last_base_logits_.data());
}

inline TokenId decode_step_fused(GenerationSession& s, TokenId token) {
  if (!s.shares_encoder()) throw ModeError("fused decode needs a shared-encoder (adapter-only) model");
  s.check_decode(token);
  const ModelConfig& c = s.base_->config();
  const size_t pos = s.cache_.length();
  const TokenId pair[2] = {token, token};
  Tensor h = embed_tokens(pair, *s.base_);
  s.ledger_.param_read_events += 1;
  s.ledger_.kv_read_events += 1;
  s.ledger_.kv_attention_passes += 1;
  s.ledger_.decode_steps += 1;
  for (size_t l = 0; l < c.num_layers; ++l) {
    h = block_forward(h, l, *s.base_, s.adapter_, s.cache_, BlockMode::decode_fused, &s.ledger_);
  }
  Tensor logits = lm_logits(h, *s.base_, &s.ledger_);
  s.last_base_logits_ = Tensor({c.vocab_size}, std::vector<float>(logits.row(0).begin(), logits.row(0).end()));
  s.last_logits_ = Tensor({c.vocab_size}, std::vector<float>(logits.row(1).begin(), logits.row(1).end()));
  s.base_next_[pos] = greedy(s.last_base_logits_.data());
  s.context_.push_back(token);
  const TokenId next = greedy(s.last_logits_.data());
  s.produced_.push_back(next);
  return next;
}

inline TokenId decode_step_sequential(GenerationSession& s, TokenId token) {
  if (!s.shares_encoder()) throw ModeError("sequential two-pass decode needs a shared-encoder model");
  s.check_decode(token);
  const ModelConfig& c = s.base_->config();
  const size_t pos = s.cache_.length();
  const TokenId one[1] = {token};
  s.ledger_.param_read_events += 2;
  s.ledger_.kv_read_events += 1;
  s.ledger_.kv_attention_passes += 2;
  s.ledger_.decode_steps += 1;

  Tensor enc = embed_tokens(one, *s.base_);
  for (size_t l = 0; l < c.num_layers; ++l) {
    enc = block_forward(enc, l, *s.base_, nullptr, s.cache_, BlockMode::decode_encoder, &s.ledger_);
  }
  s.last_base_logits_ = lm_logits(enc, *s.base_, &s.ledger_).reshaped({c.vocab_size});

  Tensor dec = embed_tokens(one, *s.base_);
  for (size_t l = 0; l < c.num_layers; ++l) {
    dec = block_forward(dec, l, *s.base_, s.adapter_, s.cache_, BlockMode::decode_decoder, &s.ledger_);
  }
  s.last_logits_ = lm_logits(dec, *s.base_, &s.ledger_).reshaped({c.vocab_size});

  s.base_next_[pos] = greedy(s.last_base_logits_.data());
  s.context_.push_back(token);
  const TokenId next = greedy(s.last_logits_.data());
  s.produced_.push_back(next);
  return next;
}

inline TokenId decode_step_conventional(GenerationSession& s, TokenId token) {
  if (s.shares_encoder()) throw ModeError("conventional decode on a shared-encoder model");
  s.check_decode(token);
  const ModelConfig& c = s.base_->config();
  const size_t pos = s.cache_.length();
  const TokenId one[1] = {token};
  s.ledger_.param_read_events += 1;
  s.ledger_.kv_read_events += 1;
  s.ledger_.kv_attention_passes += 1;
  s.ledger_.decode_steps += 1;
  Tensor h = embed_tokens(one, *s.base_);
  for (size_t l = 0; l < c.num_layers; ++l) {
    h = block_forward(h, l, *s.base_, &s.conventional_->decoder, s.cache_, BlockMode::conventional,
                      &s.ledger_, &s.conventional_->kv[l]);
  }
  s.last_logits_ = lm_logits(h, *s.base_, &s.ledger_).reshaped({c.vocab_size});
  s.last_base_logits_ = s.last_logits_;
  s.base_next_[pos] = greedy(s.last_logits_.data());
  s.context_.push_back(token);
  const TokenId next = greedy(s.last_logits_.data());
  s.produced_.push_back(next);
  return next;
}

inline TokenId decode_step(GenerationSession& s, TokenId token, DecodePath path) {
  if (!s.shares_encoder()) return decode_step_conventional(s, token);
  return path == DecodePath::fused ? decode_step_fused(s, token) : decode_step_sequential(s, token);
}

// Prefill, then up to max_new decode steps. The returned list starts with
// the prefill token; the cache ends up holding prompt + (size - 1) positions.
inline std::vector<TokenId> generate(GenerationSession& s, size_t max_new, DecodePath path) {
  std::vector<TokenId> out;
  TokenId tok = prefill(s);
  out.push_back(tok);
  const size_t limit = std::min(max_new, s.options().max_new_tokens);
  for (size_t i = 0; i < limit; ++i) {
    if (s.options().end_token && tok == *s.options().end_token) break;
    tok = decode_step(s, tok, path);
    out.push_back(tok);
  }
  return out;
}

// The bare base model's cache for a token sequence (oracle for encoder
// purity).
inline KvCacheTensor base_kv(const BaseWeights& base, std::span<const TokenId> tokens) {
  GenerationSession s(base, nullptr, std::vector<TokenId>(tokens.begin(), tokens.end()));
  prefill(s);
  return s.cache();
}

}  // namespace icarus
