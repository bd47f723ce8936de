// Copyright 2026 The icarus-kv Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <cstdio>
#include <span>
#include <string>
#include <string_view>

namespace icarus {

// 64-bit FNV-1a. Stable across platforms and runs, which std::hash is not.
class Fnv1a {
 public:
  static constexpr uint64_t kOffset = 0xcbf29ce484222325ULL;
  static constexpr uint64_t kPrime = 0x100000001b3ULL;

  Fnv1a() = default;
  explicit Fnv1a(uint64_t seed) : state_(seed) {}

  Fnv1a& bytes(const void* data, size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
      state_ ^= p[i];
      state_ *= kPrime;
    }
    return *this;
  }

  template <typename T>
  Fnv1a& value(const T& v) {
    return bytes(&v, sizeof(T));
  }

  template <typename T>
  Fnv1a& span(std::span<const T> s) {
    return bytes(s.data(), s.size_bytes());
  }

  Fnv1a& str(std::string_view s) {
    value(static_cast<uint64_t>(s.size()));
    return bytes(s.data(), s.size());
  }

  uint64_t digest() const { return state_; }

 private:
  uint64_t state_ = kOffset;
};

inline uint64_t fnv1a(std::string_view s) {
  return Fnv1a().bytes(s.data(), s.size()).digest();
}

inline std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace icarus
