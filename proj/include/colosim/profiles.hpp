#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>

#include "colosim/kvfile.hpp"

namespace colosim {

inline constexpr std::uint64_t kKiB = 1024ull;
inline constexpr std::uint64_t kMiB = 1024ull * 1024;
inline constexpr std::uint64_t kGiB = 1024ull * 1024 * 1024;
inline constexpr std::uint64_t kMB = 1000ull * 1000;
inline constexpr std::uint64_t kGB = 1000ull * 1000 * 1000;

/// Analytic per-model constants. Defaults are the Llama-8B-like profile:
/// L=32, 0.5 MiB KV/token, 0.417 MB recorded activations/token/layer
/// (3000 tokens across 32 layers ~ 40 GB), quadratic prefill term for
/// superlinear attention, backward/forward ratio solved so the forward
/// share of a full train iteration is 43%.
struct ModelProfile {
    std::uint64_t num_layers = 32;
    std::uint64_t kv_bytes_per_token = 512 * kKiB;         // all layers, K+V, one token
    std::uint64_t act_bytes_per_token_per_layer = 417000;  // adapter-regime recording footprint
    double prefill_coef_linear = 1e-4;                     // s/token
    double prefill_coef_quad = 2e-8;                       // s/token^2
    double decode_coef_const = 0.020;                      // s/step
    double decode_coef_context = 2e-6;                     // s per context token per step
    double backward_to_forward_ratio = 1.326;
    double record_prefill_multiplier = 1.21;
    double record_decode_multiplier = 1.35;
    double workspace_factor = 1.0;                         // serving transient = factor * KV bytes
    std::uint64_t weights_bytes = 16 * kGiB;

    void validate() const {
        auto positive = [](double v, const char* name) {
            if (!(v > 0)) throw std::runtime_error(std::string("model profile: ") + name + " must be > 0");
        };
        if (num_layers == 0) throw std::runtime_error("model profile: num_layers must be > 0");
        if (kv_bytes_per_token == 0) throw std::runtime_error("model profile: kv_bytes_per_token must be > 0");
        if (act_bytes_per_token_per_layer == 0)
            throw std::runtime_error("model profile: act_bytes_per_token_per_layer must be > 0");
        if (weights_bytes == 0) throw std::runtime_error("model profile: weights_bytes must be > 0");
        positive(prefill_coef_linear, "prefill_coef_linear");
        positive(prefill_coef_quad, "prefill_coef_quad");
        positive(decode_coef_const, "decode_coef_const");
        positive(decode_coef_context, "decode_coef_context");
        positive(backward_to_forward_ratio, "backward_to_forward_ratio");
        if (record_prefill_multiplier < 1.0)
            throw std::runtime_error("model profile: record_prefill_multiplier must be >= 1.0");
        if (record_decode_multiplier < 1.0)
            throw std::runtime_error("model profile: record_decode_multiplier must be >= 1.0");
        if (workspace_factor < 0.0)
            throw std::runtime_error("model profile: workspace_factor must be >= 0");
    }

    static ModelProfile from_kv(KvFile& kv) {
        ModelProfile m;
        m.num_layers = kv.get_u64("num_layers");
        m.kv_bytes_per_token = kv.get_u64("kv_bytes_per_token");
        m.act_bytes_per_token_per_layer = kv.get_u64("act_bytes_per_token_per_layer");
        m.prefill_coef_linear = kv.get_f64("prefill_coef_linear");
        m.prefill_coef_quad = kv.get_f64("prefill_coef_quad");
        m.decode_coef_const = kv.get_f64("decode_coef_const");
        m.decode_coef_context = kv.get_f64("decode_coef_context");
        m.backward_to_forward_ratio = kv.get_f64("backward_to_forward_ratio");
        m.record_prefill_multiplier = kv.get_f64("record_prefill_multiplier");
        m.record_decode_multiplier = kv.get_f64("record_decode_multiplier");
        m.workspace_factor = kv.get_f64("workspace_factor");
        m.weights_bytes = kv.get_u64("weights_bytes");
        m.validate();
        return m;
    }

    static ModelProfile from_file(const std::string& path) {
        KvFile kv = KvFile::parse_file(path);
        ModelProfile m = from_kv(kv);
        kv.reject_unknown();
        return m;
    }

    // Same shape as the default; kept as a named alias for sweep layouts.
    static ModelProfile mistral7b_like() { return ModelProfile{}; }

    // Larger illustrative profile: 40 layers, 1.6x byte constants, 24 GiB weights.
    static ModelProfile phi14b_like() {
        ModelProfile m;
        m.num_layers = 40;
        m.kv_bytes_per_token = 838861;
        m.act_bytes_per_token_per_layer = 667200;
        m.weights_bytes = 24 * kGiB;
        return m;
    }
};

struct GpuProfile {
    std::uint64_t capacity_bytes = 80 * kGiB;
    std::uint64_t h2d_bandwidth = 24 * kGB;  // bytes/s
    std::uint64_t d2h_bandwidth = 24 * kGB;
    std::uint64_t runtime_reserve_bytes = 2 * kGiB;

    void validate() const {
        if (capacity_bytes == 0) throw std::runtime_error("gpu profile: capacity_bytes must be > 0");
        if (h2d_bandwidth == 0) throw std::runtime_error("gpu profile: h2d_bandwidth must be > 0");
        if (d2h_bandwidth == 0) throw std::runtime_error("gpu profile: d2h_bandwidth must be > 0");
    }

    static GpuProfile from_kv(KvFile& kv) {
        GpuProfile g;
        g.capacity_bytes = kv.get_u64("capacity_bytes");
        g.h2d_bandwidth = kv.get_u64("h2d_bandwidth");
        g.d2h_bandwidth = kv.get_u64("d2h_bandwidth");
        g.runtime_reserve_bytes = kv.get_u64("runtime_reserve_bytes");
        g.validate();
        return g;
    }

    static GpuProfile from_file(const std::string& path) {
        KvFile kv = KvFile::parse_file(path);
        GpuProfile g = from_kv(kv);
        kv.reject_unknown();
        return g;
    }
};

/// The simulator refuses pairs where the weights and runtime reserve leave no room.
inline void validate_profile_pair(const ModelProfile& m, const GpuProfile& g) {
    m.validate();
    g.validate();
    if (m.weights_bytes + g.runtime_reserve_bytes >= g.capacity_bytes)
        throw std::runtime_error("profile pair rejected: weights + runtime reserve >= device capacity");
}

/// FNV-1a over the canonical field string; pins maps to the profiles they were built from.
inline std::uint64_t profile_hash(const ModelProfile& m, const GpuProfile& g) {
    std::ostringstream os;
    os.precision(17);
    os << m.num_layers << '|' << m.kv_bytes_per_token << '|' << m.act_bytes_per_token_per_layer << '|'
       << m.prefill_coef_linear << '|' << m.prefill_coef_quad << '|' << m.decode_coef_const << '|'
       << m.decode_coef_context << '|' << m.backward_to_forward_ratio << '|'
       << m.record_prefill_multiplier << '|' << m.record_decode_multiplier << '|'
       << m.workspace_factor << '|' << m.weights_bytes << '|' << g.capacity_bytes << '|'
       << g.h2d_bandwidth << '|' << g.d2h_bandwidth << '|' << g.runtime_reserve_bytes;
    std::uint64_t h = 14695981039346656037ull;
    for (char c : os.str()) {
        h ^= static_cast<unsigned char>(c);
        h *= 1099511628211ull;
    }
    return h;
}

} // namespace colosim
