#pragma once

#include <cstdint>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "colosim/engine.hpp"
#include "colosim/kvfile.hpp"
#include "colosim/maps.hpp"
#include "colosim/profiles.hpp"
#include "colosim/workload.hpp"

namespace colosim {

/// Distribution spec strings: fixed:<v> | uniform:<lo>,<hi> | histogram:<path> | none
inline std::optional<LengthDistribution> parse_distribution(const std::string& s) {
    if (s == "none") return std::nullopt;
    auto colon = s.find(':');
    std::string kind = s.substr(0, colon);
    std::string rest = colon == std::string::npos ? "" : s.substr(colon + 1);
    if (kind == "fixed") return LengthDistribution::fixed(std::stod(rest));
    if (kind == "uniform") {
        auto comma = rest.find(',');
        if (comma == std::string::npos)
            throw std::runtime_error("distribution: uniform needs lo,hi: " + s);
        return LengthDistribution::uniform(std::stod(rest.substr(0, comma)),
                                           std::stod(rest.substr(comma + 1)));
    }
    if (kind == "histogram") return load_histogram(rest);
    throw std::runtime_error("unknown distribution spec: " + s);
}

struct TraceSpec {
    std::optional<std::string> file;
    double qps = 1.0;
    double duration = 100.0;
    std::uint64_t seed = 7;
    LengthDistribution length_dist = LengthDistribution::fixed(1000);
    std::optional<std::uint64_t> min_tokens;
    std::optional<LengthDistribution> label_delay = LengthDistribution::fixed(0.01);

    Trace realize() const {
        if (file) return load_trace(*file);
        LengthDistribution d = length_dist;
        d.min_tokens = min_tokens;
        return generate_trace(qps, duration, d, label_delay, seed);
    }
};

struct ExperimentConfig {
    SimMode mode = SimMode::Colocated;
    TrainingMode training = TrainingMode::CPA;
    ModelProfile model;
    GpuProfile gpu;
    double cache_timeout = 60.0;
    std::uint64_t seed = 7;
    TraceSpec trace_spec;
    GridSteps map_steps;
    GridBounds map_bounds;

    std::vector<double> sweep_qps;
    std::vector<std::uint64_t> sweep_token_lengths;
    std::optional<std::uint64_t> sweep_min_tokens;
    std::vector<TrainingMode> sweep_modes;

    static ExperimentConfig from_file(const std::string& path) {
        KvFile kv = KvFile::parse_file(path);
        ExperimentConfig ec;
        KvFile model_kv = kv.section("model");
        ec.model = ModelProfile::from_kv(model_kv);
        model_kv.reject_unknown();
        KvFile gpu_kv = kv.section("gpu");
        ec.gpu = GpuProfile::from_kv(gpu_kv);
        gpu_kv.reject_unknown();

        KvFile sim = kv.section("sim");
        ec.mode = sim_mode_from_string(sim.get_string_or("mode", "colocated"));
        ec.training = training_mode_from_string(sim.get_string_or("training", "cpa"));
        ec.cache_timeout = sim.get_f64_or("cache_timeout", 60.0);
        ec.seed = sim.get_u64_or("seed", 7);
        sim.reject_unknown();

        KvFile tr = kv.section("trace");
        if (tr.has("file")) ec.trace_spec.file = tr.get_string("file");
        ec.trace_spec.qps = tr.get_f64_or("qps", 1.0);
        ec.trace_spec.duration = tr.get_f64_or("duration", 100.0);
        ec.trace_spec.seed = tr.get_u64_or("seed", ec.seed);
        if (tr.has("length_dist")) {
            auto d = parse_distribution(tr.get_string("length_dist"));
            if (!d) throw std::runtime_error(path + ": trace.length_dist cannot be none");
            ec.trace_spec.length_dist = *d;
        }
        if (tr.has("min_tokens")) ec.trace_spec.min_tokens = tr.get_u64("min_tokens");
        if (tr.has("label_delay"))
            ec.trace_spec.label_delay = parse_distribution(tr.get_string("label_delay"));
        tr.reject_unknown();

        KvFile maps = kv.section("map");
        ec.map_steps.cached_token_step = maps.get_u64_or("cached_step", 500);
        ec.map_steps.incoming_token_step = maps.get_u64_or("incoming_step", 500);
        ec.map_steps.batch_step = maps.get_u64_or("batch_step", 5);
        ec.map_bounds.max_cached_tokens = maps.get_u64_or("max_cached", 8000);
        ec.map_bounds.max_incoming_tokens = maps.get_u64_or("max_incoming", 8000);
        ec.map_bounds.max_batch = maps.get_u64_or("max_batch", 50);
        maps.reject_unknown();

        KvFile sweep = kv.section("sweep");
        if (sweep.has("qps"))
            for (const auto& tok : split_list(sweep.get_string("qps"))) ec.sweep_qps.push_back(std::stod(tok));
        if (sweep.has("token_lengths"))
            for (const auto& tok : split_list(sweep.get_string("token_lengths")))
                ec.sweep_token_lengths.push_back(std::stoull(tok));
        if (sweep.has("min_tokens")) ec.sweep_min_tokens = sweep.get_u64("min_tokens");
        if (sweep.has("modes"))
            for (const auto& tok : split_list(sweep.get_string("modes")))
                ec.sweep_modes.push_back(training_mode_from_string(tok));
        sweep.reject_unknown();

        kv.reject_unknown();
        return ec;
    }

    static std::vector<std::string> split_list(const std::string& s) {
        std::vector<std::string> out;
        std::istringstream ss(s);
        std::string tok;
        while (std::getline(ss, tok, ',')) {
            if (!tok.empty()) out.push_back(tok);
        }
        return out;
    }
};

/// Builds both maps for the given mode from the profiles; callers cache them
/// across paired runs so maps stay bit-identical.
struct BuiltMaps {
    OffloadingMap offload;
    HedgingMap hedge;
};

inline BuiltMaps build_maps(const ModelProfile& m, const GpuProfile& g, const GridSteps& steps,
                            const GridBounds& bounds, TrainingMode mode,
                            std::uint64_t assumed_output_tokens = 128) {
    BuiltMaps maps;
    maps.offload = build_offloading_map(m, g, steps, bounds, mode);
    maps.hedge = build_hedging_map(m, g, steps.cached_token_step, bounds.max_cached_tokens, mode,
                                   assumed_output_tokens);
    return maps;
}

inline SimConfig make_sim_config(const ModelProfile& m, const GpuProfile& g, SimMode mode,
                                 TrainingMode training, const BuiltMaps& maps, Trace trace,
                                 double cache_timeout = 60.0, bool collect_events = false) {
    SimConfig cfg;
    cfg.mode = mode;
    cfg.training = training;
    cfg.model = m;
    cfg.gpu = g;
    cfg.offload_map = maps.offload;
    cfg.hedge_map = maps.hedge;
    cfg.cache_timeout = cache_timeout;
    cfg.trace = std::move(trace);
    cfg.collect_events = collect_events;
    return cfg;
}

struct PairedResult {
    MetricsReport colocated;
    MetricsReport baseline;
};

/// Colocated and separate-cluster runs over byte-identical traces.
inline PairedResult run_paired(const ModelProfile& m, const GpuProfile& g, TrainingMode training,
                               const BuiltMaps& maps, const Trace& trace,
                               double cache_timeout = 60.0) {
    PairedResult out;
    out.colocated = run_simulation(
        make_sim_config(m, g, SimMode::Colocated, training, maps, trace, cache_timeout));
    out.baseline = run_simulation(
        make_sim_config(m, g, SimMode::SeparateCluster, training, maps, trace, cache_timeout));
    return out;
}

/// true when a single uncontended job of this prompt length trains to
/// completion without hitting the training-side memory wall.
inline bool supports_prompt_length(const ModelProfile& m, const GpuProfile& g,
                                   TrainingMode training, const BuiltMaps& maps, SimMode mode,
                                   std::uint64_t prompt_tokens);

/// Largest total trained token count (prompt + responses for CPA) a single
/// job can reach before the training side runs out of memory, by binary
/// search over the prompt length.
inline std::uint64_t max_trainable_tokens(const ModelProfile& m, const GpuProfile& g,
                                          TrainingMode training, const BuiltMaps& maps,
                                          SimMode mode, std::uint64_t hi_prompt) {
    std::uint64_t extra = training == TrainingMode::CPA ? 256 : 0;
    std::uint64_t lo = 16, hi = hi_prompt, best = 0;
    while (lo <= hi) {
        std::uint64_t mid = lo + (hi - lo) / 2;
        if (supports_prompt_length(m, g, training, maps, mode, mid)) {
            best = mid;
            lo = mid + 1;
        } else {
            if (mid == 0) break;
            hi = mid - 1;
        }
    }
    return best == 0 ? 0 : best + extra;
}

/// Widely spaced single-length queries: every job runs uncontended.
inline Trace uncontended_trace(std::uint64_t prompt_tokens, std::size_t queries, double spacing,
                               bool with_labels = true) {
    Trace t;
    t.seed = 0;
    t.qps = 0;
    for (std::size_t i = 0; i < queries; ++i) {
        QueryRecord r;
        r.query_id = i;
        r.arrival_time = static_cast<double>(i) * spacing;
        r.prompt_tokens = prompt_tokens;
        r.output_tokens = 128;
        if (with_labels) r.label_delay = 0.01;
        t.records.push_back(r);
    }
    return t;
}

inline bool supports_prompt_length(const ModelProfile& m, const GpuProfile& g,
                                   TrainingMode training, const BuiltMaps& maps, SimMode mode,
                                   std::uint64_t prompt_tokens) {
    Trace t = uncontended_trace(prompt_tokens, 1, 1000.0);
    try {
        MetricsReport r = run_simulation(make_sim_config(m, g, mode, training, maps, std::move(t)));
        return r.completed_jobs == 1 && !r.oom_flag;
    } catch (const std::exception&) {
        return false;
    }
}

} // namespace colosim
