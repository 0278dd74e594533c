#pragma once

#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "colosim/cost_model.hpp"
#include "colosim/profiles.hpp"

namespace colosim {

enum class TrainingMode { CPT, CPA };

inline const char* to_string(TrainingMode m) { return m == TrainingMode::CPT ? "cpt" : "cpa"; }

inline TrainingMode training_mode_from_string(const std::string& s) {
    if (s == "cpt") return TrainingMode::CPT;
    if (s == "cpa") return TrainingMode::CPA;
    throw std::runtime_error("unknown training mode: " + s + " (expected cpt or cpa)");
}

/// Round up to the nearest multiple of step (inclusive boundary: an exact
/// multiple maps to itself).
inline std::uint64_t round_up_bucket(std::uint64_t value, std::uint64_t step) {
    return (value + step - 1) / step * step;
}

enum class OffloadAction { NoAction, FreeLayers, AllToHost };

struct OffloadDecision {
    OffloadAction action = OffloadAction::NoAction;
    std::uint64_t layers = 0;  // meaningful for FreeLayers

    bool operator==(const OffloadDecision&) const = default;

    /// Layers released by this decision; AllToHost counts as the full stack.
    std::uint64_t layers_to_free(std::uint64_t num_layers) const {
        switch (action) {
            case OffloadAction::NoAction: return 0;
            case OffloadAction::FreeLayers: return layers;
            case OffloadAction::AllToHost: return num_layers;
        }
        return 0;
    }
};

/// Per-mode memory footprint the activation slot charges to the device for
/// `cached` trained tokens: activations always, prompt/response KV only in
/// CPA mode (CPT training needs no KV after serving completes).
inline std::uint64_t cached_activation_footprint(const ModelProfile& m, std::uint64_t cached) {
    return activation_bytes(m, cached, m.num_layers);
}

inline std::uint64_t cached_kv_footprint(const ModelProfile& m, std::uint64_t cached,
                                         TrainingMode mode) {
    return mode == TrainingMode::CPA ? kv_bytes(m, cached, 1) : 0;
}

struct GridSteps {
    std::uint64_t cached_token_step = 500;
    std::uint64_t incoming_token_step = 500;
    std::uint64_t batch_step = 5;
};

struct GridBounds {
    std::uint64_t max_cached_tokens = 8000;
    std::uint64_t max_incoming_tokens = 8000;
    std::uint64_t max_batch = 50;
};

/// Offline grid (cached tokens, incoming tokens, batch) -> decision.
/// Lookups round every input up to its bucket before indexing.
class OffloadingMap {
  public:
    GridSteps steps;
    GridBounds bounds;
    TrainingMode mode = TrainingMode::CPA;
    std::uint64_t profile_hash_value = 0;
    std::uint64_t num_layers = 0;

    std::size_t cached_count() const { return bounds.max_cached_tokens / steps.cached_token_step + 1; }
    std::size_t incoming_count() const { return bounds.max_incoming_tokens / steps.incoming_token_step; }
    std::size_t batch_count() const { return bounds.max_batch / steps.batch_step; }

    const OffloadDecision& cell(std::size_t ci, std::size_t ii, std::size_t bi) const {
        return cells_[(ci * incoming_count() + ii) * batch_count() + bi];
    }
    OffloadDecision& cell(std::size_t ci, std::size_t ii, std::size_t bi) {
        return cells_[(ci * incoming_count() + ii) * batch_count() + bi];
    }

    void init_cells() { cells_.assign(cached_count() * incoming_count() * batch_count(), {}); }

    /// nullopt when any input exceeds the grid bounds after round-up;
    /// callers decide the fallback (the engine treats it as AllToHost).
    std::optional<OffloadDecision> lookup(std::uint64_t cached, std::uint64_t incoming,
                                          std::uint64_t batch) const {
        std::uint64_t cb = round_up_bucket(cached, steps.cached_token_step);
        std::uint64_t ib = round_up_bucket(incoming, steps.incoming_token_step);
        std::uint64_t bb = round_up_bucket(batch, steps.batch_step);
        if (cb > bounds.max_cached_tokens || ib > bounds.max_incoming_tokens || bb > bounds.max_batch)
            return std::nullopt;
        if (incoming == 0 || batch == 0) return std::nullopt;
        return cell(cb / steps.cached_token_step, ib / steps.incoming_token_step - 1,
                    bb / steps.batch_step - 1);
    }

    std::uint64_t cached_bucket_value(std::size_t ci) const { return ci * steps.cached_token_step; }
    std::uint64_t incoming_bucket_value(std::size_t ii) const {
        return (ii + 1) * steps.incoming_token_step;
    }
    std::uint64_t batch_bucket_value(std::size_t bi) const { return (bi + 1) * steps.batch_step; }

    void save(const std::string& path) const {
        std::ofstream out(path);
        if (!out) throw std::runtime_error("cannot write map file: " + path);
        out << "version 1\nkind offload\nmode " << to_string(mode) << "\nprofile_hash "
            << profile_hash_value << "\nnum_layers " << num_layers << "\ncached_step "
            << steps.cached_token_step << "\nincoming_step " << steps.incoming_token_step
            << "\nbatch_step " << steps.batch_step << "\nmax_cached " << bounds.max_cached_tokens
            << "\nmax_incoming " << bounds.max_incoming_tokens << "\nmax_batch " << bounds.max_batch
            << "\n";
        for (std::size_t ci = 0; ci < cached_count(); ++ci)
            for (std::size_t ii = 0; ii < incoming_count(); ++ii)
                for (std::size_t bi = 0; bi < batch_count(); ++bi) {
                    const auto& d = cell(ci, ii, bi);
                    out << cached_bucket_value(ci) << ',' << incoming_bucket_value(ii) << ','
                        << batch_bucket_value(bi) << ',';
                    switch (d.action) {
                        case OffloadAction::NoAction: out << "noaction"; break;
                        case OffloadAction::FreeLayers: out << "free:" << d.layers; break;
                        case OffloadAction::AllToHost: out << "host"; break;
                    }
                    out << '\n';
                }
    }

    static OffloadingMap load(const std::string& path, std::uint64_t expected_hash) {
        std::ifstream in(path);
        if (!in) throw std::runtime_error("cannot open map file: " + path);
        OffloadingMap m;
        auto expect = [&](const char* key) -> std::string {
            std::string k, v;
            if (!(in >> k >> v) || k != key)
                throw std::runtime_error(path + ": malformed map header, expected " + std::string(key));
            return v;
        };
        if (expect("version") != "1") throw std::runtime_error(path + ": unsupported map version");
        if (expect("kind") != "offload") throw std::runtime_error(path + ": not an offloading map");
        m.mode = training_mode_from_string(expect("mode"));
        m.profile_hash_value = std::stoull(expect("profile_hash"));
        if (m.profile_hash_value != expected_hash)
            throw std::runtime_error(path + ": profile hash mismatch; map was built from different profiles");
        m.num_layers = std::stoull(expect("num_layers"));
        m.steps.cached_token_step = std::stoull(expect("cached_step"));
        m.steps.incoming_token_step = std::stoull(expect("incoming_step"));
        m.steps.batch_step = std::stoull(expect("batch_step"));
        m.bounds.max_cached_tokens = std::stoull(expect("max_cached"));
        m.bounds.max_incoming_tokens = std::stoull(expect("max_incoming"));
        m.bounds.max_batch = std::stoull(expect("max_batch"));
        m.init_cells();
        std::string line;
        std::getline(in, line);  // trailing newline of header
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            std::uint64_t c, i, b;
            char comma;
            std::istringstream ls(line);
            ls >> c >> comma >> i >> comma >> b >> comma;
            std::string dec;
            std::getline(ls, dec);
            OffloadDecision d;
            if (dec == "noaction") {
                d.action = OffloadAction::NoAction;
            } else if (dec == "host") {
                d.action = OffloadAction::AllToHost;
            } else if (dec.rfind("free:", 0) == 0) {
                d.action = OffloadAction::FreeLayers;
                d.layers = std::stoull(dec.substr(5));
            } else {
                throw std::runtime_error(path + ": bad decision token: " + dec);
            }
            m.cell(c / m.steps.cached_token_step, i / m.steps.incoming_token_step - 1,
                   b / m.steps.batch_step - 1) = d;
        }
        return m;
    }

  private:
    std::vector<OffloadDecision> cells_;
};

inline void validate_grid(const GridSteps& s, const GridBounds& b) {
    if (s.cached_token_step == 0 || s.incoming_token_step == 0 || s.batch_step == 0)
        throw std::runtime_error("map grid: steps must be positive");
    if (b.max_cached_tokens == 0 || b.max_incoming_tokens == 0 || b.max_batch == 0)
        throw std::runtime_error("map grid: bounds must be positive");
    if (b.max_cached_tokens % s.cached_token_step != 0)
        throw std::runtime_error("map grid: cached bound is not a multiple of its step");
    if (b.max_incoming_tokens % s.incoming_token_step != 0)
        throw std::runtime_error("map grid: incoming bound is not a multiple of its step");
    if (b.max_batch % s.batch_step != 0)
        throw std::runtime_error("map grid: batch bound is not a multiple of its step");
}

/// Decision for one grid cell. Headroom is what the device has left after
/// weights, runtime reserve and the cached slot; the cell frees the minimum
/// whole-layer count that restores enough room, escalating to AllToHost when
/// freeing every layer is not enough or when the cached footprint alone
/// cannot sit on the device (streaming regime during recording).
inline OffloadDecision offload_cell_decision(const ModelProfile& m, const GpuProfile& g,
                                             TrainingMode mode, std::uint64_t cached,
                                             std::uint64_t incoming, std::uint64_t batch) {
    std::uint64_t budget = g.capacity_bytes - g.runtime_reserve_bytes - m.weights_bytes;
    std::uint64_t acts = cached_activation_footprint(m, cached);
    std::uint64_t kv = cached_kv_footprint(m, cached, mode);
    if (acts + kv > budget) return {OffloadAction::AllToHost, 0};
    std::uint64_t headroom = budget - acts - kv;
    std::uint64_t need = serving_memory(m, incoming, batch);
    if (need <= headroom) return {OffloadAction::NoAction, 0};
    std::uint64_t deficit = need - headroom;
    std::uint64_t per_layer = cached * m.act_bytes_per_token_per_layer;
    if (per_layer == 0) return {OffloadAction::AllToHost, 0};
    std::uint64_t n = (deficit + per_layer - 1) / per_layer;
    if (n > m.num_layers) return {OffloadAction::AllToHost, 0};
    return {OffloadAction::FreeLayers, n};
}

inline OffloadingMap build_offloading_map(const ModelProfile& m, const GpuProfile& g,
                                          const GridSteps& steps, const GridBounds& bounds,
                                          TrainingMode mode) {
    validate_profile_pair(m, g);
    validate_grid(steps, bounds);
    OffloadingMap map;
    map.steps = steps;
    map.bounds = bounds;
    map.mode = mode;
    map.profile_hash_value = profile_hash(m, g);
    map.num_layers = m.num_layers;
    map.init_cells();
    for (std::size_t ci = 0; ci < map.cached_count(); ++ci)
        for (std::size_t ii = 0; ii < map.incoming_count(); ++ii)
            for (std::size_t bi = 0; bi < map.batch_count(); ++bi)
                map.cell(ci, ii, bi) =
                    offload_cell_decision(m, g, mode, map.cached_bucket_value(ci),
                                          map.incoming_bucket_value(ii), map.batch_bucket_value(bi));
    return map;
}

enum class HedgeDecision { LoadBack, Recompute };

/// Offline grid (cached tokens, freed layers) -> load back vs recompute.
class HedgingMap {
  public:
    std::uint64_t cached_token_step = 500;
    std::uint64_t max_cached_tokens = 8000;
    std::uint64_t num_layers = 0;  // freed axis runs 0..num_layers, exact
    TrainingMode mode = TrainingMode::CPA;
    std::uint64_t assumed_output_tokens = 128;
    std::uint64_t profile_hash_value = 0;

    std::size_t cached_count() const { return max_cached_tokens / cached_token_step; }
    std::size_t freed_count() const { return num_layers + 1; }

    HedgeDecision& cell(std::size_t ci, std::size_t fi) { return cells_[ci * freed_count() + fi]; }
    HedgeDecision cell(std::size_t ci, std::size_t fi) const { return cells_[ci * freed_count() + fi]; }

    void init_cells() { cells_.assign(cached_count() * freed_count(), HedgeDecision::LoadBack); }

    /// Round-up on the cached axis, exact on freed layers. nullopt out of
    /// range; the engine falls back to Recompute with a logged warning.
    std::optional<HedgeDecision> lookup(std::uint64_t cached, std::uint64_t freed_layers) const {
        std::uint64_t cb = round_up_bucket(cached, cached_token_step);
        if (cb == 0 || cb > max_cached_tokens || freed_layers > num_layers) return std::nullopt;
        return cell(cb / cached_token_step - 1, freed_layers);
    }

    std::uint64_t cached_bucket_value(std::size_t ci) const { return (ci + 1) * cached_token_step; }

    void save(const std::string& path) const {
        std::ofstream out(path);
        if (!out) throw std::runtime_error("cannot write map file: " + path);
        out << "version 1\nkind hedge\nmode " << to_string(mode) << "\nprofile_hash "
            << profile_hash_value << "\nnum_layers " << num_layers << "\nassumed_output_tokens "
            << assumed_output_tokens << "\ncached_step " << cached_token_step << "\nmax_cached "
            << max_cached_tokens << "\n";
        for (std::size_t ci = 0; ci < cached_count(); ++ci)
            for (std::size_t fi = 0; fi < freed_count(); ++fi)
                out << cached_bucket_value(ci) << ',' << fi << ','
                    << (cell(ci, fi) == HedgeDecision::LoadBack ? "load" : "recompute") << '\n';
    }

    static HedgingMap load(const std::string& path, std::uint64_t expected_hash) {
        std::ifstream in(path);
        if (!in) throw std::runtime_error("cannot open map file: " + path);
        HedgingMap m;
        auto expect = [&](const char* key) -> std::string {
            std::string k, v;
            if (!(in >> k >> v) || k != key)
                throw std::runtime_error(path + ": malformed map header, expected " + std::string(key));
            return v;
        };
        if (expect("version") != "1") throw std::runtime_error(path + ": unsupported map version");
        if (expect("kind") != "hedge") throw std::runtime_error(path + ": not a hedging map");
        m.mode = training_mode_from_string(expect("mode"));
        m.profile_hash_value = std::stoull(expect("profile_hash"));
        if (m.profile_hash_value != expected_hash)
            throw std::runtime_error(path + ": profile hash mismatch; map was built from different profiles");
        m.num_layers = std::stoull(expect("num_layers"));
        m.assumed_output_tokens = std::stoull(expect("assumed_output_tokens"));
        m.cached_token_step = std::stoull(expect("cached_step"));
        m.max_cached_tokens = std::stoull(expect("max_cached"));
        m.init_cells();
        std::string line;
        std::getline(in, line);
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            std::istringstream ls(line);
            std::uint64_t c, f;
            char comma;
            ls >> c >> comma >> f >> comma;
            std::string dec;
            std::getline(ls, dec);
            m.cell(c / m.cached_token_step - 1, f) =
                dec == "load" ? HedgeDecision::LoadBack : HedgeDecision::Recompute;
        }
        return m;
    }

  private:
    std::vector<HedgeDecision> cells_;
};

/// Forward-pass time the training job repeats when it abandons its stored
/// activations. CPA reuses the shared prompt KV and re-runs only the two
/// response passes; CPT must redo the whole prompt pass.
inline double hedge_recompute_time(const ModelProfile& m, TrainingMode mode, std::uint64_t cached,
                                   std::uint64_t assumed_output_tokens) {
    if (mode == TrainingMode::CPA)
        return 2.0 * prefill_latency(m, assumed_output_tokens, 1, false);
    return prefill_latency(m, cached, 1, false);
}

/// Residual load time after overlapping with the retained layers' backward.
inline double hedge_residual_load_time(const ModelProfile& m, const GpuProfile& g,
                                       std::uint64_t cached, std::uint64_t freed_layers) {
    double load = transfer_time(g, activation_bytes(m, cached, freed_layers),
                                CopyDirection::HostToDevice);
    double credit = static_cast<double>(m.num_layers - freed_layers) *
                    backward_layer_latency(m, cached == 0 ? 1 : cached);
    return std::max(0.0, load - credit);
}

inline HedgingMap build_hedging_map(const ModelProfile& m, const GpuProfile& g,
                                    std::uint64_t cached_step, std::uint64_t max_cached,
                                    TrainingMode mode, std::uint64_t assumed_output_tokens = 128) {
    validate_profile_pair(m, g);
    if (cached_step == 0 || max_cached == 0)
        throw std::runtime_error("hedging map: step and bound must be positive");
    if (max_cached % cached_step != 0)
        throw std::runtime_error("hedging map: cached bound is not a multiple of its step");
    HedgingMap map;
    map.cached_token_step = cached_step;
    map.max_cached_tokens = max_cached;
    map.num_layers = m.num_layers;
    map.mode = mode;
    map.assumed_output_tokens = assumed_output_tokens;
    map.profile_hash_value = profile_hash(m, g);
    map.init_cells();
    for (std::size_t ci = 0; ci < map.cached_count(); ++ci) {
        std::uint64_t cached = map.cached_bucket_value(ci);
        double recompute = hedge_recompute_time(m, mode, cached, assumed_output_tokens);
        for (std::size_t fi = 0; fi < map.freed_count(); ++fi) {
            double residual = hedge_residual_load_time(m, g, cached, fi);
            map.cell(ci, fi) =
                residual > recompute ? HedgeDecision::Recompute : HedgeDecision::LoadBack;
        }
    }
    return map;
}

} // namespace colosim
