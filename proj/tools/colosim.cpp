// Experiment driver: builds offloading/hedging maps, runs single simulations
// and paired comparisons, sweeps QPS and token-length grids, and emits
// reports plus plot data.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "colosim/engine.hpp"
#include "colosim/experiment.hpp"
#include "colosim/metrics.hpp"

namespace fs = std::filesystem;
using namespace colosim;

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitInvariantBreach = 3;

/// Paths that do not exist as given are retried under COLOSIM_PROFILE_DIR.
std::string resolve_path(const std::string& path) {
    if (fs::exists(path)) return path;
    if (const char* dir = std::getenv("COLOSIM_PROFILE_DIR")) {
        fs::path alt = fs::path(dir) / path;
        if (fs::exists(alt)) return alt.string();
    }
    return path;
}

std::string out_file(const fs::path& dir, const std::string& name, bool force) {
    fs::path p = dir / name;
    if (fs::exists(p) && !force)
        throw std::runtime_error("refusing to overwrite " + p.string() + " (pass --force)");
    return p.string();
}

void write_text(const std::string& path, const std::string& content) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << content;
}

struct LoadedConfig {
    ExperimentConfig ec;
    BuiltMaps maps;  // for ec.training
};

LoadedConfig load_config(const std::string& path, const std::string& offload_map_path,
                         const std::string& hedge_map_path) {
    LoadedConfig lc;
    lc.ec = ExperimentConfig::from_file(resolve_path(path));
    std::uint64_t hash = profile_hash(lc.ec.model, lc.ec.gpu);
    if (!offload_map_path.empty())
        lc.maps.offload = OffloadingMap::load(resolve_path(offload_map_path), hash);
    else
        lc.maps.offload = build_offloading_map(lc.ec.model, lc.ec.gpu, lc.ec.map_steps,
                                               lc.ec.map_bounds, lc.ec.training);
    if (!hedge_map_path.empty())
        lc.maps.hedge = HedgingMap::load(resolve_path(hedge_map_path), hash);
    else
        lc.maps.hedge =
            build_hedging_map(lc.ec.model, lc.ec.gpu, lc.ec.map_steps.cached_token_step,
                              lc.ec.map_bounds.max_cached_tokens, lc.ec.training, 128);
    return lc;
}

// ---- profile ---------------------------------------------------------------

int cmd_profile(const std::string& model_path, const std::string& gpu_path, const GridSteps& steps,
                const GridBounds& bounds, std::uint64_t output_tokens, const std::string& out_dir,
                bool force) {
    ModelProfile model = ModelProfile::from_file(resolve_path(model_path));
    GpuProfile gpu = GpuProfile::from_file(resolve_path(gpu_path));
    fs::create_directories(out_dir);
    for (TrainingMode mode : {TrainingMode::CPT, TrainingMode::CPA}) {
        OffloadingMap off = build_offloading_map(model, gpu, steps, bounds, mode);
        HedgingMap hedge = build_hedging_map(model, gpu, steps.cached_token_step,
                                             bounds.max_cached_tokens, mode, output_tokens);
        std::string tag = to_string(mode);
        off.save(out_file(out_dir, "offload_" + tag + ".map", force));
        hedge.save(out_file(out_dir, "hedge_" + tag + ".map", force));
        std::printf("wrote offload_%s.map (%zu cells) and hedge_%s.map (%zu cells)\n", tag.c_str(),
                    off.cached_count() * off.incoming_count() * off.batch_count(), tag.c_str(),
                    hedge.cached_count() * hedge.freed_count());
    }
    return 0;
}

// ---- run -------------------------------------------------------------------

int cmd_run(const std::string& config_path, const std::string& trace_path,
            const std::string& offload_map_path, const std::string& hedge_map_path,
            std::int64_t seed_override, const std::string& mode_override,
            const std::string& out_dir, bool emit_events, bool force) {
    LoadedConfig lc = load_config(config_path, offload_map_path, hedge_map_path);
    if (!mode_override.empty()) lc.ec.mode = sim_mode_from_string(mode_override);
    if (seed_override >= 0) {
        lc.ec.seed = static_cast<std::uint64_t>(seed_override);
        lc.ec.trace_spec.seed = lc.ec.seed;
    }
    if (!trace_path.empty()) lc.ec.trace_spec.file = resolve_path(trace_path);

    Trace trace = lc.ec.trace_spec.realize();
    SimConfig cfg = make_sim_config(lc.ec.model, lc.ec.gpu, lc.ec.mode, lc.ec.training, lc.maps,
                                    std::move(trace), lc.ec.cache_timeout, emit_events);
    cfg.seed = lc.ec.seed;

    Simulation sim(std::move(cfg));
    MetricsReport report = sim.run();

    fs::create_directories(out_dir);
    export_csv(report, out_file(out_dir, "report.csv", force));
    export_jsonl(report, out_file(out_dir, "report.jsonl", force));
    export_tpt_cdf(report, out_file(out_dir, "tpt_cdf.csv", force));
    if (emit_events) write_text(out_file(out_dir, "events.jsonl", force), sim.events_json());

    std::printf("%s: %llu tokens served, %llu trained", report.mode_tag.c_str(),
                static_cast<unsigned long long>(report.generated_tokens),
                static_cast<unsigned long long>(report.trained_tokens));
    if (report.training_throughput) std::printf(", %.1f tok/s training", *report.training_throughput);
    if (report.tpt_mean) std::printf(", mean TPT %.4f s", *report.tpt_mean);
    if (report.oom_flag) std::printf(", training OOM");
    std::printf("\n");
    return 0;
}

// ---- compare ---------------------------------------------------------------

struct MaxTokenSearch {
    std::uint64_t colocated = 0;
    std::uint64_t baseline = 0;
};

int cmd_compare(const std::string& config_path, const std::string& out_dir, bool force) {
    LoadedConfig lc = load_config(config_path, "", "");
    const ExperimentConfig& ec = lc.ec;
    fs::create_directories(out_dir);

    std::vector<TrainingMode> modes = ec.sweep_modes;
    if (modes.empty()) modes = {ec.training};

    // Figure dataset 1 + 4: throughput and peak memory vs token length, plus
    // the max-token comparison, per training mode.
    if (!ec.sweep_token_lengths.empty()) {
        std::string tput = "mode,prompt_tokens,colocated_tput,baseline_tput,ratio,baseline_oom\n";
        std::string mem =
            "mode,prompt_tokens,colocated_peak_bytes,baseline_peak_bytes,saving,baseline_oom\n";
        std::string maxtok = "mode,colocated_max_tokens,baseline_max_tokens,ratio\n";
        for (TrainingMode mode : modes) {
            BuiltMaps maps = build_maps(ec.model, ec.gpu, ec.map_steps, ec.map_bounds, mode);
            for (std::uint64_t tokens : ec.sweep_token_lengths) {
                Trace trace = uncontended_trace(tokens, 3, 1000.0);
                PairedResult pr = run_paired(ec.model, ec.gpu, mode, maps, trace, ec.cache_timeout);
                char line[256];
                double ratio = pr.colocated.training_throughput && pr.baseline.training_throughput
                                   ? *pr.colocated.training_throughput / *pr.baseline.training_throughput
                                   : 0.0;
                std::snprintf(line, sizeof(line), "%s,%llu,%.6f,%.6f,%.6f,%d\n", to_string(mode),
                              static_cast<unsigned long long>(tokens),
                              pr.colocated.training_throughput.value_or(0.0),
                              pr.baseline.training_throughput.value_or(0.0), ratio,
                              pr.baseline.oom_flag ? 1 : 0);
                tput += line;
                double saving = pr.baseline.peak_training_activation_bytes
                                    ? 1.0 - static_cast<double>(pr.colocated.peak_training_activation_bytes) /
                                                static_cast<double>(pr.baseline.peak_training_activation_bytes)
                                    : 0.0;
                std::snprintf(line, sizeof(line), "%s,%llu,%llu,%llu,%.6f,%d\n", to_string(mode),
                              static_cast<unsigned long long>(tokens),
                              static_cast<unsigned long long>(pr.colocated.peak_training_activation_bytes),
                              static_cast<unsigned long long>(pr.baseline.peak_training_activation_bytes),
                              saving, pr.baseline.oom_flag ? 1 : 0);
                mem += line;
            }
            std::uint64_t hi_prompt = ec.map_bounds.max_cached_tokens -
                                      (mode == TrainingMode::CPA ? 256 : 0);
            MaxTokenSearch ms;
            ms.colocated =
                max_trainable_tokens(ec.model, ec.gpu, mode, maps, SimMode::Colocated, hi_prompt);
            ms.baseline = max_trainable_tokens(ec.model, ec.gpu, mode, maps,
                                               SimMode::SeparateCluster, hi_prompt);
            char line[128];
            std::snprintf(line, sizeof(line), "%s,%llu,%llu,%.4f\n", to_string(mode),
                          static_cast<unsigned long long>(ms.colocated),
                          static_cast<unsigned long long>(ms.baseline),
                          ms.baseline ? static_cast<double>(ms.colocated) / static_cast<double>(ms.baseline)
                                      : 0.0);
            maxtok += line;
        }
        write_text(out_file(out_dir, "tput_vs_tokens.csv", force), tput);
        write_text(out_file(out_dir, "mem_vs_tokens.csv", force), mem);
        write_text(out_file(out_dir, "max_tokens.csv", force), maxtok);
    }

    // Figure dataset 2 + 3: offload impact and TPT overhead across QPS.
    if (!ec.sweep_qps.empty()) {
        std::string offl =
            "qps,colocated_tput,baseline_tput,layers_freed,loads,recomputes,preemptions\n";
        std::string tptq = "qps,colocated_mean_tpt,serving_only_mean_tpt,overhead\n";
        BuiltMaps maps = build_maps(ec.model, ec.gpu, ec.map_steps, ec.map_bounds, ec.training);
        for (double qps : ec.sweep_qps) {
            TraceSpec spec = ec.trace_spec;
            spec.file.reset();
            spec.qps = qps;
            spec.duration = std::max(spec.duration, 80.0 / qps);  // enough queries per point
            if (ec.sweep_min_tokens) spec.min_tokens = ec.sweep_min_tokens;
            Trace trace = spec.realize();
            MetricsReport colo = run_simulation(make_sim_config(
                ec.model, ec.gpu, SimMode::Colocated, ec.training, maps, trace, ec.cache_timeout));
            MetricsReport base = run_simulation(make_sim_config(ec.model, ec.gpu,
                                                                SimMode::SeparateCluster, ec.training,
                                                                maps, trace, ec.cache_timeout));
            MetricsReport serve = run_simulation(make_sim_config(
                ec.model, ec.gpu, SimMode::ServingOnly, ec.training, maps, trace, ec.cache_timeout));
            char line[256];
            std::snprintf(line, sizeof(line), "%.4f,%.6f,%.6f,%llu,%llu,%llu,%llu\n", qps,
                          colo.training_throughput.value_or(0.0),
                          base.training_throughput.value_or(0.0),
                          static_cast<unsigned long long>(colo.layers_freed),
                          static_cast<unsigned long long>(colo.loads),
                          static_cast<unsigned long long>(colo.recomputes),
                          static_cast<unsigned long long>(colo.preemptions));
            offl += line;
            double overhead = colo.tpt_mean && serve.tpt_mean && *serve.tpt_mean > 0
                                  ? *colo.tpt_mean / *serve.tpt_mean - 1.0
                                  : 0.0;
            std::snprintf(line, sizeof(line), "%.4f,%.6f,%.6f,%.6f\n", qps,
                          colo.tpt_mean.value_or(0.0), serve.tpt_mean.value_or(0.0), overhead);
            tptq += line;
            if (qps == ec.sweep_qps.back()) {
                export_tpt_cdf(colo, out_file(out_dir, "tpt_cdf_colocated.csv", force));
                export_tpt_cdf(serve, out_file(out_dir, "tpt_cdf_serving_only.csv", force));
            }
        }
        write_text(out_file(out_dir, "tput_vs_qps.csv", force), offl);
        write_text(out_file(out_dir, "tpt_mean_vs_qps.csv", force), tptq);
    }

    if (ec.sweep_token_lengths.empty() && ec.sweep_qps.empty())
        throw std::runtime_error("compare: config declares no sweep axes (sweep.token_lengths / sweep.qps)");

    std::printf("comparison datasets written to %s\n", out_dir.c_str());
    return 0;
}

// ---- plotdata ----------------------------------------------------------------

int cmd_plotdata(const std::string& report_path, const std::string& out_dir, bool force) {
    MetricsReport r = import_jsonl(resolve_path(report_path));
    fs::create_directories(out_dir);
    export_tpt_cdf(r, out_file(out_dir, "tpt_cdf.csv", force));
    std::printf("plot data written to %s\n", out_dir.c_str());
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"colosim: discrete-event simulator for co-located LLM serving and continual training"};
    app.require_subcommand(1);
    app.footer(
        "Config file keys (flat `key = value` text):\n"
        "  model.num_layers, model.kv_bytes_per_token, model.act_bytes_per_token_per_layer,\n"
        "  model.prefill_coef_linear, model.prefill_coef_quad, model.decode_coef_const,\n"
        "  model.decode_coef_context, model.backward_to_forward_ratio,\n"
        "  model.record_prefill_multiplier, model.record_decode_multiplier,\n"
        "  model.workspace_factor, model.weights_bytes\n"
        "  gpu.capacity_bytes, gpu.h2d_bandwidth, gpu.d2h_bandwidth, gpu.runtime_reserve_bytes\n"
        "  sim.mode (colocated|baseline|serving-only), sim.training (cpt|cpa),\n"
        "  sim.cache_timeout, sim.seed\n"
        "  trace.file | trace.qps, trace.duration, trace.seed, trace.length_dist,\n"
        "  trace.min_tokens, trace.label_delay  (distributions: fixed:<v>,\n"
        "  uniform:<lo>,<hi>, histogram:<path>, none)\n"
        "  map.cached_step, map.incoming_step, map.batch_step, map.max_cached,\n"
        "  map.max_incoming, map.max_batch\n"
        "  sweep.qps, sweep.token_lengths (comma lists), sweep.min_tokens, sweep.modes\n"
        "Profile files use the bare model/gpu key names. COLOSIM_PROFILE_DIR, when set,\n"
        "is searched for file arguments that do not resolve as given.\n"
        "Exit codes: 0 ok, 2 validation error, 3 internal invariant breach.");

    // profile
    auto* profile = app.add_subcommand("profile", "build offloading and hedging maps from profiles");
    std::string p_model, p_gpu, p_out = "out";
    GridSteps p_steps;
    GridBounds p_bounds;
    std::uint64_t p_output_tokens = 128;
    bool p_force = false;
    profile->add_option("--model", p_model, "model profile file")->required();
    profile->add_option("--gpu", p_gpu, "gpu profile file")->required();
    profile->add_option("--cached-step", p_steps.cached_token_step, "cached-token step");
    profile->add_option("--incoming-step", p_steps.incoming_token_step, "incoming-token step");
    profile->add_option("--batch-step", p_steps.batch_step, "batch step");
    profile->add_option("--max-cached", p_bounds.max_cached_tokens, "cached-token bound");
    profile->add_option("--max-incoming", p_bounds.max_incoming_tokens, "incoming-token bound");
    profile->add_option("--max-batch", p_bounds.max_batch, "batch bound");
    profile->add_option("--output-tokens", p_output_tokens, "assumed response length for hedging");
    profile->add_option("--out", p_out, "output directory");
    profile->add_flag("--force", p_force, "overwrite existing outputs");

    // run
    auto* run = app.add_subcommand("run", "run one simulation and write its report");
    std::string r_config, r_trace, r_offload, r_hedge, r_mode, r_out = "out";
    std::int64_t r_seed = -1;
    bool r_events = false, r_force = false;
    run->add_option("--config", r_config, "experiment config file")->required();
    run->add_option("--trace", r_trace, "trace file (overrides trace.* generation keys)");
    run->add_option("--offload-map", r_offload, "offloading map file (default: built from config)");
    run->add_option("--hedge-map", r_hedge, "hedging map file (default: built from config)");
    run->add_option("--seed", r_seed, "seed override");
    run->add_option("--mode", r_mode, "mode override: colocated | baseline | serving-only");
    run->add_option("--out", r_out, "output directory");
    run->add_flag("--emit-events", r_events, "write the full event log");
    run->add_flag("--force", r_force, "overwrite existing outputs");

    // compare
    auto* cmp = app.add_subcommand("compare", "paired sweeps and figure datasets");
    std::string c_config, c_out = "out";
    bool c_force = false;
    cmp->add_option("--config", c_config, "experiment config file with sweep.* axes")->required();
    cmp->add_option("--out", c_out, "output directory");
    cmp->add_flag("--force", c_force, "overwrite existing outputs");

    // plotdata
    auto* plot = app.add_subcommand("plotdata", "derive plot files from a report");
    std::string d_report, d_out = "out";
    bool d_force = false;
    plot->add_option("--report", d_report, "report.jsonl produced by run")->required();
    plot->add_option("--out", d_out, "output directory");
    plot->add_flag("--force", d_force, "overwrite existing outputs");

    CLI11_PARSE(app, argc, argv);

    try {
        if (profile->parsed())
            return cmd_profile(p_model, p_gpu, p_steps, p_bounds, p_output_tokens, p_out, p_force);
        if (run->parsed())
            return cmd_run(r_config, r_trace, r_offload, r_hedge, r_seed, r_mode, r_out, r_events,
                           r_force);
        if (cmp->parsed()) return cmd_compare(c_config, c_out, c_force);
        if (plot->parsed()) return cmd_plotdata(d_report, d_out, d_force);
    } catch (const InvariantBreach& e) {
        std::fprintf(stderr, "invariant breach: %s\n", e.what());
        return kExitInvariantBreach;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitValidation;
    }
    return 0;
}
