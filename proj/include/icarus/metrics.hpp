// Copyright 2026 The icarus-kv Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>

#include "json.hpp"

namespace icarus {

// Instrumented counters for one session (or one aggregated run).
//
// A "parameter read event" is one traversal of the base weights: every
// linear weight of every layer plus the LM head is streamed once, however
// many rows (positions, branches) ride along. A "KV read event" is one
// acquisition of the session cache for a step; kv_attention_passes counts
// the sweeps actually made over it and kv_bytes_read the traffic they cost.
struct MetricsLedger {
  uint64_t param_read_events = 0;
  uint64_t linear_weight_reads = 0;
  uint64_t param_bytes_read = 0;
  uint64_t adapter_bytes_read = 0;
  uint64_t kv_read_events = 0;
  uint64_t kv_attention_passes = 0;
  uint64_t kv_bytes_read = 0;
  uint64_t kv_bytes_written = 0;
  uint64_t prefill_tokens = 0;
  uint64_t prefix_hit_tokens = 0;
  uint64_t decode_steps = 0;

  MetricsLedger& operator+=(const MetricsLedger& o) {
    param_read_events += o.param_read_events;
    linear_weight_reads += o.linear_weight_reads;
    param_bytes_read += o.param_bytes_read;
    adapter_bytes_read += o.adapter_bytes_read;
    kv_read_events += o.kv_read_events;
    kv_attention_passes += o.kv_attention_passes;
    kv_bytes_read += o.kv_bytes_read;
    kv_bytes_written += o.kv_bytes_written;
    prefill_tokens += o.prefill_tokens;
    prefix_hit_tokens += o.prefix_hit_tokens;
    decode_steps += o.decode_steps;
    return *this;
  }

  friend MetricsLedger operator-(MetricsLedger a, const MetricsLedger& b) {
    a.param_read_events -= b.param_read_events;
    a.linear_weight_reads -= b.linear_weight_reads;
    a.param_bytes_read -= b.param_bytes_read;
    a.adapter_bytes_read -= b.adapter_bytes_read;
    a.kv_read_events -= b.kv_read_events;
    a.kv_attention_passes -= b.kv_attention_passes;
    a.kv_bytes_read -= b.kv_bytes_read;
    a.kv_bytes_written -= b.kv_bytes_written;
    a.prefill_tokens -= b.prefill_tokens;
    a.prefix_hit_tokens -= b.prefix_hit_tokens;
    a.decode_steps -= b.decode_steps;
    return a;
  }

  bool operator==(const MetricsLedger&) const = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(MetricsLedger, param_read_events, linear_weight_reads,
                                   param_bytes_read, adapter_bytes_read, kv_read_events,
                                   kv_attention_passes, kv_bytes_read, kv_bytes_written,
                                   prefill_tokens, prefix_hit_tokens, decode_steps)

}  // namespace icarus
