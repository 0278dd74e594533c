#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>

#include "colosim/profiles.hpp"

namespace colosim {

// Every duration and byte count in the simulator comes from these pure
// functions, so offline map profiling stays valid at runtime.

enum class CopyDirection { HostToDevice, DeviceToHost };

/// Whole-prompt parallel pass: batch * (alpha*t + beta*t^2), times the
/// recording multiplier when activation recording is enabled.
inline double prefill_latency(const ModelProfile& m, std::uint64_t tokens, std::uint64_t batch,
                              bool recording) {
    if (tokens == 0) throw std::invalid_argument("prefill_latency: tokens must be >= 1");
    if (batch == 0) throw std::invalid_argument("prefill_latency: batch must be >= 1");
    double t = static_cast<double>(tokens);
    double base = static_cast<double>(batch) * (m.prefill_coef_linear * t + m.prefill_coef_quad * t * t);
    return recording ? base * m.record_prefill_multiplier : base;
}

/// One auto-regressive step: batch * (gamma + delta*context).
inline double decode_step_latency(const ModelProfile& m, std::uint64_t context_tokens,
                                  std::uint64_t batch, bool recording) {
    if (context_tokens == 0) throw std::invalid_argument("decode_step_latency: context must be >= 1");
    if (batch == 0) throw std::invalid_argument("decode_step_latency: batch must be >= 1");
    double base = static_cast<double>(batch) *
                  (m.decode_coef_const + m.decode_coef_context * static_cast<double>(context_tokens));
    return recording ? base * m.record_decode_multiplier : base;
}

/// Even per-layer split of a single-sequence unrecorded prefill;
/// num_layers of these sum back to the whole pass.
inline double forward_layer_latency(const ModelProfile& m, std::uint64_t tokens) {
    return prefill_latency(m, tokens, 1, false) / static_cast<double>(m.num_layers);
}

inline double backward_layer_latency(const ModelProfile& m, std::uint64_t tokens) {
    return m.backward_to_forward_ratio * forward_layer_latency(m, tokens);
}

inline std::uint64_t activation_bytes(const ModelProfile& m, std::uint64_t tokens,
                                      std::uint64_t layers) {
    if (layers > m.num_layers)
        throw std::invalid_argument("activation_bytes: layers exceeds num_layers");
    return tokens * layers * m.act_bytes_per_token_per_layer;
}

inline std::uint64_t kv_bytes(const ModelProfile& m, std::uint64_t tokens, std::uint64_t batch) {
    return batch * tokens * m.kv_bytes_per_token;
}

/// KV plus transient workspace; deterministic in its inputs.
inline std::uint64_t serving_memory(const ModelProfile& m, std::uint64_t tokens, std::uint64_t batch) {
    if (tokens == 0) throw std::invalid_argument("serving_memory: tokens must be >= 1");
    if (batch == 0) throw std::invalid_argument("serving_memory: batch must be >= 1");
    std::uint64_t kv = kv_bytes(m, tokens, batch);
    std::uint64_t workspace =
        static_cast<std::uint64_t>(std::llround(m.workspace_factor * static_cast<double>(kv)));
    return kv + workspace;
}

inline double transfer_time(const GpuProfile& g, std::uint64_t bytes, CopyDirection dir) {
    std::uint64_t bw = dir == CopyDirection::HostToDevice ? g.h2d_bandwidth : g.d2h_bandwidth;
    return static_cast<double>(bytes) / static_cast<double>(bw);
}

} // namespace colosim
