// Copyright 2026 The icarus-kv Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstring>
#include <span>
#include <string>
#include <vector>

#include "icarus/errors.hpp"
#include "icarus/model.hpp"

namespace icarus {

// Which logical branch produced a row. Only the encoder may write KV.
enum class Branch : uint8_t { encoder = 0, decoder = 1 };

// Per-layer keys and values, [positions, kv_heads * head_dim] each.
// Append-only: a written position is never modified.
class KvCacheTensor {
 public:
  KvCacheTensor() = default;
  KvCacheTensor(size_t num_layers, size_t kv_dim)
      : kv_dim_(kv_dim), keys_(num_layers), values_(num_layers) {}
  explicit KvCacheTensor(const ModelConfig& c) : KvCacheTensor(c.num_layers, c.kv_dim()) {}

  size_t num_layers() const { return keys_.size(); }
  size_t kv_dim() const { return kv_dim_; }

  // Positions written in layer 0; all layers agree between forward steps.
  size_t length() const { return keys_.empty() ? 0 : keys_[0].size() / kv_dim_; }
  size_t length(size_t layer) const { return keys_.at(layer).size() / kv_dim_; }

  void append(size_t layer, Branch from, std::span<const float> key, std::span<const float> value) {
    if (from != Branch::encoder) {
      throw ContractViolation("KV write attempted from the decoder branch at layer " +
                              std::to_string(layer) + "; only the frozen encoder produces KV");
    }
    if (key.size() != kv_dim_ || value.size() != kv_dim_) {
      throw DimensionError("KV row of width " + std::to_string(key.size()) + "/" +
                           std::to_string(value.size()) + ", cache expects " +
                           std::to_string(kv_dim_));
    }
    keys_.at(layer).insert(keys_[layer].end(), key.begin(), key.end());
    values_.at(layer).insert(values_[layer].end(), value.begin(), value.end());
  }

  std::span<const float> key(size_t layer, size_t pos) const {
    return {keys_.at(layer).data() + pos * kv_dim_, kv_dim_};
  }
  std::span<const float> value(size_t layer, size_t pos) const {
    return {values_.at(layer).data() + pos * kv_dim_, kv_dim_};
  }
  std::span<const float> keys(size_t layer) const { return keys_.at(layer); }
  std::span<const float> values(size_t layer) const { return values_.at(layer); }

  size_t bytes() const { return 2 * num_layers() * length() * kv_dim_ * sizeof(float); }

  bool bit_identical(const KvCacheTensor& o) const {
    if (kv_dim_ != o.kv_dim_ || keys_.size() != o.keys_.size()) return false;
    for (size_t l = 0; l < keys_.size(); ++l) {
      if (keys_[l].size() != o.keys_[l].size() || values_[l].size() != o.values_[l].size()) return false;
      if (std::memcmp(keys_[l].data(), o.keys_[l].data(), keys_[l].size() * sizeof(float)) != 0) return false;
      if (std::memcmp(values_[l].data(), o.values_[l].data(), values_[l].size() * sizeof(float)) != 0) return false;
    }
    return true;
  }

  // Positions [begin, end) of every layer, keys then values per layer.
  std::vector<float> export_range(size_t begin, size_t end) const {
    std::vector<float> out;
    out.reserve(2 * num_layers() * (end - begin) * kv_dim_);
    for (size_t l = 0; l < num_layers(); ++l) {
      auto k = keys(l).subspan(begin * kv_dim_, (end - begin) * kv_dim_);
      auto v = values(l).subspan(begin * kv_dim_, (end - begin) * kv_dim_);
      out.insert(out.end(), k.begin(), k.end());
      out.insert(out.end(), v.begin(), v.end());
    }
    return out;
  }

  // Inverse of export_range: appends `count` positions to every layer.
  void import_range(std::span<const float> payload, size_t count) {
    const size_t per = count * kv_dim_;
    if (payload.size() != 2 * num_layers() * per) {
      throw DimensionError("KV payload of " + std::to_string(payload.size()) +
                           " values does not hold " + std::to_string(count) + " positions");
    }
    for (size_t l = 0; l < num_layers(); ++l) {
      const float* base = payload.data() + 2 * l * per;
      for (size_t p = 0; p < count; ++p) {
        append(l, Branch::encoder, {base + p * kv_dim_, kv_dim_}, {base + per + p * kv_dim_, kv_dim_});
      }
    }
  }

 private:
  size_t kv_dim_ = 0;
  std::vector<std::vector<float>> keys_;
  std::vector<std::vector<float>> values_;
};

}  // namespace icarus
