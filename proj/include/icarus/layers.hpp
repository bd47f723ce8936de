// Copyright 2026 The icarus-kv Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "icarus/errors.hpp"
#include "icarus/kv_cache.hpp"
#include "icarus/metrics.hpp"
#include "icarus/model.hpp"
#include "icarus/tensor.hpp"

namespace icarus {

using LowRank = LowRankT<float>;
using LayerAdapter = LayerAdapterT<float>;
using KvLowRank = KvLowRankT<float>;

// y = x * w for every row with a single pass over w, then
// y[r] += scaling * (x[r] * a) * b for rows r >= first_adapted_row.
inline Tensor linear_rows(const Tensor& x, const Tensor& w, const LowRank* adapter,
                          float scaling, size_t first_adapted_row, MetricsLedger* ledger) {
  Tensor y = matmul(x, w);
  if (ledger) {
    ledger->linear_weight_reads += 1;
    ledger->param_bytes_read += w.numel() * sizeof(float);
  }
  if (adapter == nullptr || first_adapted_row >= x.rows()) return y;
  if (adapter->a.dim(0) != w.dim(0) || adapter->b.dim(1) != w.dim(1) ||
      adapter->a.dim(1) != adapter->b.dim(0)) {
    throw ConfigError("adapter " + shape_str(adapter->a.shape()) + "x" +
                      shape_str(adapter->b.shape()) + " does not fit base weight " +
                      shape_str(w.shape()));
  }
  const size_t n = x.rows() - first_adapted_row;
  Tensor xs({n, x.cols()},
            std::vector<float>(x.data().begin() + first_adapted_row * x.cols(), x.data().end()));
  Tensor delta = matmul(matmul(xs, adapter->a), adapter->b);
  for (size_t r = 0; r < n; ++r) {
    auto dst = y.row(first_adapted_row + r);
    auto src = delta.row(r);
    for (size_t j = 0; j < dst.size(); ++j) dst[j] += scaling * src[j];
  }
  if (ledger) ledger->adapter_bytes_read += (adapter->a.numel() + adapter->b.numel()) * sizeof(float);
  return y;
}

// Batch-of-two linear: row 0 is the encoder input and sees only the base
// weight, row 1 is the decoder input and additionally gets the adapter.
// Counts one weight read.
inline Tensor icarus_linear(const Tensor& x_pair, const Tensor& w, const LowRank* adapter,
                            float scaling, MetricsLedger* ledger = nullptr) {
  if (x_pair.rows() != 2) {
    throw DimensionError("icarus_linear expects exactly two rows, got " + shape_str(x_pair.shape()));
  }
  return linear_rows(x_pair, w, adapter, scaling, 1, ledger);
}

// Stacks two [H, d_k] query sets into [2H, d_k] so that the query heads of
// both branches that read kv head g are contiguous:
//   g0: enc heads of g0, dec heads of g0, g1: enc heads of g1, ...
// A standard GQA kernel with group size 2H/H_kv then serves both branches
// from one pass over the cache.
inline Tensor concat_numhead(const Tensor& enc, const Tensor& dec, size_t num_kv_heads) {
  if (enc.shape() != dec.shape() || enc.rank() != 2) {
    throw DimensionError("concat_numhead " + shape_str(enc.shape()) + " vs " + shape_str(dec.shape()));
  }
  const size_t h = enc.dim(0), dk = enc.dim(1), group = h / num_kv_heads;
  Tensor out({2 * h, dk});
  size_t dst = 0;
  for (size_t g = 0; g < num_kv_heads; ++g) {
    for (const Tensor* src : {&enc, &dec}) {
      for (size_t i = 0; i < group; ++i, ++dst) {
        auto s = src->row(g * group + i);
        std::copy(s.begin(), s.end(), out.row(dst).begin());
      }
    }
  }
  return out;
}

// Inverse of concat_numhead: returns {enc, dec}.
inline std::pair<Tensor, Tensor> split_numhead(const Tensor& fused, size_t num_kv_heads) {
  const size_t h = fused.dim(0) / 2, dk = fused.dim(1), group = h / num_kv_heads;
  Tensor enc({h, dk}), dec({h, dk});
  size_t src = 0;
  for (size_t g = 0; g < num_kv_heads; ++g) {
    for (Tensor* dst : {&enc, &dec}) {
      for (size_t i = 0; i < group; ++i, ++src) {
        auto s = fused.row(src);
        std::copy(s.begin(), s.end(), dst->row(g * group + i).begin());
      }
    }
  }
  return {std::move(enc), std::move(dec)};
}

// Grouped-query attention of one position's query heads over the first
// `length` cached positions of `layer`. q is [H, d_k] or, in fused mode,
// [2H, d_k] laid out by concat_numhead. Each cached key/value row is loaded
// once per call and shared by every query head of its group.
inline Tensor layer_attention(const Tensor& q, const KvCacheTensor& kv, size_t layer, size_t length,
                              const ModelConfig& c, MetricsLedger* ledger = nullptr) {
  const size_t nq = q.rows();
  if (nq != c.num_heads && nq != 2 * c.num_heads) {
    throw ModeError("attention expects " + std::to_string(c.num_heads) + " or " +
                    std::to_string(2 * c.num_heads) + " query heads, got " + std::to_string(nq));
  }
  if (q.cols() != c.head_dim) throw DimensionError("query head width " + std::to_string(q.cols()));
  if (length == 0 || length > kv.length(layer)) {
    throw StateError("attention over " + std::to_string(length) + " positions, cache holds " +
                     std::to_string(kv.length(layer)));
  }
  const size_t dk = c.head_dim;
  const size_t group = nq / c.num_kv_heads;
  const float scale = 1.0f / std::sqrt(static_cast<float>(dk));
  Tensor out({nq, dk});
  std::vector<float> scores(group * length);
  for (size_t g = 0; g < c.num_kv_heads; ++g) {
    for (size_t j = 0; j < length; ++j) {
      const float* kj = kv.key(layer, j).data() + g * dk;
      for (size_t i = 0; i < group; ++i) {
        const float* qh = &q(g * group + i, 0);
        float dot = 0;
        for (size_t d = 0; d < dk; ++d) dot += qh[d] * kj[d];
        scores[i * length + j] = dot * scale;
      }
    }
    for (size_t i = 0; i < group; ++i) softmax_inplace(std::span<float>(&scores[i * length], length));
    for (size_t j = 0; j < length; ++j) {
      const float* vj = kv.value(layer, j).data() + g * dk;
      for (size_t i = 0; i < group; ++i) {
        float* o = &out(g * group + i, 0);
        const float p = scores[i * length + j];
        for (size_t d = 0; d < dk; ++d) o[d] += p * vj[d];
      }
    }
  }
  if (ledger) ledger->kv_bytes_read += 2 * length * c.kv_dim() * sizeof(float);
  return out;
}

enum class BlockMode {
  prefill,         // N encoder rows at consecutive positions (base only)
  decode_fused,    // [enc, dec] pair for one position, shared attention
  decode_encoder,  // one encoder row: writes KV, base weights only
  decode_decoder,  // one decoder row: adapters, reads KV, never writes
  conventional,    // N rows of a single adapted model that writes its own KV
};

// One transformer block. Returns the hidden states for the next layer and
// extends `kv` (layer `layer`) by the positions this mode produces.
inline Tensor block_forward(const Tensor& x, size_t layer, const BaseWeights& base,
                            const AdapterSet* adapter, KvCacheTensor& kv, BlockMode mode,
                            MetricsLedger* ledger = nullptr,
                            const KvLowRank* kv_adapter = nullptr) {
  const ModelConfig& c = base.config();
  const auto& W = base.layer(layer);
  const size_t rows = x.rows();
  const float eps = static_cast<float>(c.rms_eps);

  switch (mode) {
    case BlockMode::decode_fused:
      if (rows != 2) throw DimensionError("fused decode needs an [enc, dec] pair");
      break;
    case BlockMode::decode_encoder:
    case BlockMode::decode_decoder:
      if (rows != 1) throw DimensionError("single-branch decode needs one row");
      break;
    default:
      if (rows == 0) throw DimensionError("block_forward on zero rows");
  }
  if (kv_adapter && mode != BlockMode::conventional) {
    throw ContractViolation("key/value adapters are only valid for a conventional model");
  }

  const LayerAdapter* la = nullptr;
  size_t adapted_from = rows;
  if (adapter) {
    switch (mode) {
      case BlockMode::decode_fused: adapted_from = 1; la = &adapter->layer(layer); break;
      case BlockMode::decode_decoder:
      case BlockMode::conventional: adapted_from = 0; la = &adapter->layer(layer); break;
      default: break;
    }
  }
  const float s = adapter ? adapter->scaling() : 0.0f;
  auto lin = [&](const Tensor& in, const Tensor& w, const LowRank* lr) {
    return linear_rows(in, w, la ? lr : nullptr, s, adapted_from, ledger);
  };

  Tensor xn = rms_norm(x, W.attn_norm, eps);
  Tensor q = lin(xn, W.wq, la ? &la->q : nullptr);

  // Keys/values: written only from encoder rows (row 0 of a fused pair).
  const size_t start = kv.length(layer);
  if (mode != BlockMode::decode_decoder) {
    Tensor kv_in = xn;
    if (mode == BlockMode::decode_fused) kv_in = Tensor({1, c.hidden}, std::vector<float>(xn.row(0).begin(), xn.row(0).end()));
    Tensor k = linear_rows(kv_in, W.wk, kv_adapter ? &kv_adapter->k : nullptr, s, 0, ledger);
    Tensor v = linear_rows(kv_in, W.wv, kv_adapter ? &kv_adapter->v : nullptr, s, 0, ledger);
    for (size_t r = 0; r < k.rows(); ++r) {
      rope_inplace<float>(k.row(r), c.head_dim, start + r, c.rope_theta);
      kv.append(layer, Branch::encoder, k.row(r), v.row(r));
    }
    if (ledger) ledger->kv_bytes_written += 2 * k.rows() * c.kv_dim() * sizeof(float);
  }

  Tensor attn({rows, c.q_dim()});
  auto head_view = [&](size_t r) {
    return Tensor({c.num_heads, c.head_dim}, std::vector<float>(q.row(r).begin(), q.row(r).end()));
  };
  switch (mode) {
    case BlockMode::prefill:
    case BlockMode::conventional:
      for (size_t r = 0; r < rows; ++r) {
        rope_inplace<float>(q.row(r), c.head_dim, start + r, c.rope_theta);
        Tensor a = layer_attention(head_view(r), kv, layer, start + r + 1, c, ledger);
        std::copy(a.data().begin(), a.data().end(), attn.row(r).begin());
      }
      break;
    case BlockMode::decode_fused: {
      rope_inplace<float>(q.row(0), c.head_dim, start, c.rope_theta);
      rope_inplace<float>(q.row(1), c.head_dim, start, c.rope_theta);
      Tensor fused = concat_numhead(head_view(0), head_view(1), c.num_kv_heads);
      Tensor a = layer_attention(fused, kv, layer, start + 1, c, ledger);
      auto [enc, dec] = split_numhead(a, c.num_kv_heads);
      std::copy(enc.data().begin(), enc.data().end(), attn.row(0).begin());
      std::copy(dec.data().begin(), dec.data().end(), attn.row(1).begin());
      break;
    }
    case BlockMode::decode_encoder: {
      rope_inplace<float>(q.row(0), c.head_dim, start, c.rope_theta);
      Tensor a = layer_attention(head_view(0), kv, layer, start + 1, c, ledger);
      std::copy(a.data().begin(), a.data().end(), attn.row(0).begin());
      break;
    }
    case BlockMode::decode_decoder: {
      if (start == 0) throw StateError("decoder pass needs the current position in the cache");
      rope_inplace<float>(q.row(0), c.head_dim, start - 1, c.rope_theta);
      Tensor a = layer_attention(head_view(0), kv, layer, start, c, ledger);
      std::copy(a.data().begin(), a.data().end(), attn.row(0).begin());
      break;
    }
  }

  Tensor h = x;
  add_inplace(h, lin(attn, W.wo, la ? &la->o : nullptr));
  Tensor xn2 = rms_norm(h, W.ffn_norm, eps);
  Tensor gate = lin(xn2, W.w_gate, la ? &la->gate : nullptr);
  Tensor up = lin(xn2, W.w_up, la ? &la->up : nullptr);
  for (size_t i = 0; i < gate.numel(); ++i) gate[i] = silu_scalar(gate[i]) * up[i];
  add_inplace(h, lin(gate, W.w_down, la ? &la->down : nullptr));
  return h;
}

// Final norm + LM head on every row (one weight read).
inline Tensor lm_logits(const Tensor& h, const BaseWeights& base, MetricsLedger* ledger = nullptr) {
  Tensor xn = rms_norm(h, base.final_norm(), static_cast<float>(base.config().rms_eps));
  return linear_rows(xn, base.lm_head(), nullptr, 0.0f, 0, ledger);
}

inline Tensor embed_tokens(std::span<const TokenId> ids, const BaseWeights& base) {
  const auto& table = base.embedding();
  Tensor out({ids.size(), table.cols()});
  for (size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<size_t>(ids[r]) >= table.rows()) {
      throw IndexError("token id " + std::to_string(ids[r]) + " outside vocabulary of " +
                       std::to_string(table.rows()));
    }
    auto src = table.row(static_cast<size_t>(ids[r]));
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  return out;
}

}  // namespace icarus
