#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

namespace colosim {

struct MetricsReport {
    std::vector<double> tpt_samples;  // one per generated token, seconds
    std::optional<double> tpt_p50, tpt_p90, tpt_p99, tpt_mean;

    std::uint64_t trained_tokens = 0;
    double training_busy_time = 0;
    std::optional<double> training_throughput;  // absent when busy time is zero

    std::uint64_t peak_device_bytes = 0;
    std::uint64_t peak_training_activation_bytes = 0;  // trained-token acts + training-held KV
    bool oom_flag = false;  // baseline training side hit a job it cannot fit

    std::uint64_t preemptions = 0;
    std::uint64_t layers_freed = 0;
    std::uint64_t loads = 0;
    std::uint64_t recomputes = 0;
    double copy_stall_seconds = 0;
    std::uint64_t labels_dropped = 0;

    double prefetch_wait_seconds = 0;
    std::uint64_t completed_jobs = 0;
    std::uint64_t oom_jobs = 0;
    std::uint64_t map_fallbacks = 0;  // out-of-range map lookups
    std::uint64_t generated_tokens = 0;
    std::uint64_t trace_hash = 0;
    std::string mode_tag;

    bool operator==(const MetricsReport&) const = default;
};

/// Nearest-rank percentile over sorted samples (no interpolation).
inline double nearest_rank(const std::vector<double>& sorted, double q) {
    std::size_t n = sorted.size();
    std::size_t rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(n)));
    if (rank == 0) rank = 1;
    return sorted[rank - 1];
}

/// Fills the derived fields from the raw samples and counters.
inline void finalize(MetricsReport& r) {
    if (!r.tpt_samples.empty()) {
        std::vector<double> sorted = r.tpt_samples;
        std::sort(sorted.begin(), sorted.end());
        r.tpt_p50 = nearest_rank(sorted, 0.50);
        r.tpt_p90 = nearest_rank(sorted, 0.90);
        r.tpt_p99 = nearest_rank(sorted, 0.99);
        double sum = 0;
        for (double v : sorted) sum += v;
        r.tpt_mean = sum / static_cast<double>(sorted.size());
    }
    if (r.training_busy_time > 0)
        r.training_throughput = static_cast<double>(r.trained_tokens) / r.training_busy_time;
}

struct ComparisonSummary {
    std::optional<double> throughput_ratio;  // a / b
    std::optional<double> peak_device_ratio;
    std::optional<double> peak_training_ratio;
    std::optional<double> mean_tpt_ratio;
    bool a_oom = false, b_oom = false;
    bool paired = false;
};

inline ComparisonSummary compare(const MetricsReport& a, const MetricsReport& b,
                                 bool allow_unpaired = false) {
    if (a.trace_hash != b.trace_hash && !allow_unpaired)
        throw std::runtime_error("compare: reports come from different traces; pass unpaired to override");
    ComparisonSummary s;
    s.paired = a.trace_hash == b.trace_hash;
    s.a_oom = a.oom_flag;
    s.b_oom = b.oom_flag;
    if (a.training_throughput && b.training_throughput && *b.training_throughput > 0)
        s.throughput_ratio = *a.training_throughput / *b.training_throughput;
    if (b.peak_device_bytes > 0)
        s.peak_device_ratio =
            static_cast<double>(a.peak_device_bytes) / static_cast<double>(b.peak_device_bytes);
    if (b.peak_training_activation_bytes > 0)
        s.peak_training_ratio = static_cast<double>(a.peak_training_activation_bytes) /
                                static_cast<double>(b.peak_training_activation_bytes);
    if (a.tpt_mean && b.tpt_mean && *b.tpt_mean > 0) s.mean_tpt_ratio = *a.tpt_mean / *b.tpt_mean;
    return s;
}

namespace detail {
inline std::string f64(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}
inline std::string opt(const std::optional<double>& v) { return v ? f64(*v) : std::string(); }
inline std::optional<double> parse_opt(const std::string& s) {
    if (s.empty()) return std::nullopt;
    return std::stod(s);
}
} // namespace detail

inline const char* kReportCsvHeader =
    "mode,trace_hash,generated_tokens,tpt_mean,tpt_p50,tpt_p90,tpt_p99,trained_tokens,"
    "training_busy_time,training_throughput,peak_device_bytes,peak_training_activation_bytes,"
    "oom_flag,preemptions,layers_freed,loads,recomputes,copy_stall_seconds,labels_dropped,"
    "prefetch_wait_seconds,completed_jobs,oom_jobs,map_fallbacks,tpt_samples";

inline void export_csv(const MetricsReport& r, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write report: " + path);
    out << kReportCsvHeader << '\n';
    out << r.mode_tag << ',' << r.trace_hash << ',' << r.generated_tokens << ','
        << detail::opt(r.tpt_mean) << ',' << detail::opt(r.tpt_p50) << ',' << detail::opt(r.tpt_p90)
        << ',' << detail::opt(r.tpt_p99) << ',' << r.trained_tokens << ','
        << detail::f64(r.training_busy_time) << ',' << detail::opt(r.training_throughput) << ','
        << r.peak_device_bytes << ',' << r.peak_training_activation_bytes << ','
        << (r.oom_flag ? 1 : 0) << ',' << r.preemptions << ',' << r.layers_freed << ',' << r.loads
        << ',' << r.recomputes << ',' << detail::f64(r.copy_stall_seconds) << ','
        << r.labels_dropped << ',' << detail::f64(r.prefetch_wait_seconds) << ','
        << r.completed_jobs << ',' << r.oom_jobs << ',' << r.map_fallbacks << ',';
    for (std::size_t i = 0; i < r.tpt_samples.size(); ++i) {
        if (i) out << ';';
        out << detail::f64(r.tpt_samples[i]);
    }
    out << '\n';
}

inline MetricsReport import_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open report: " + path);
    std::string header, line;
    if (!std::getline(in, header) || header != kReportCsvHeader)
        throw std::runtime_error(path + ": unexpected report header");
    if (!std::getline(in, line)) throw std::runtime_error(path + ": missing report row");
    std::vector<std::string> fields;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            fields.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    fields.push_back(cur);
    if (fields.size() != 24) throw std::runtime_error(path + ": wrong field count");
    MetricsReport r;
    std::size_t i = 0;
    r.mode_tag = fields[i++];
    r.trace_hash = std::stoull(fields[i++]);
    r.generated_tokens = std::stoull(fields[i++]);
    r.tpt_mean = detail::parse_opt(fields[i++]);
    r.tpt_p50 = detail::parse_opt(fields[i++]);
    r.tpt_p90 = detail::parse_opt(fields[i++]);
    r.tpt_p99 = detail::parse_opt(fields[i++]);
    r.trained_tokens = std::stoull(fields[i++]);
    r.training_busy_time = std::stod(fields[i++]);
    r.training_throughput = detail::parse_opt(fields[i++]);
    r.peak_device_bytes = std::stoull(fields[i++]);
    r.peak_training_activation_bytes = std::stoull(fields[i++]);
    r.oom_flag = fields[i++] == "1";
    r.preemptions = std::stoull(fields[i++]);
    r.layers_freed = std::stoull(fields[i++]);
    r.loads = std::stoull(fields[i++]);
    r.recomputes = std::stoull(fields[i++]);
    r.copy_stall_seconds = std::stod(fields[i++]);
    r.labels_dropped = std::stoull(fields[i++]);
    r.prefetch_wait_seconds = std::stod(fields[i++]);
    r.completed_jobs = std::stoull(fields[i++]);
    r.oom_jobs = std::stoull(fields[i++]);
    r.map_fallbacks = std::stoull(fields[i++]);
    const std::string& samples = fields[i++];
    if (!samples.empty()) {
        std::istringstream ss(samples);
        std::string tok;
        while (std::getline(ss, tok, ';')) r.tpt_samples.push_back(std::stod(tok));
    }
    return r;
}

/// JSON-lines report: one record per metric group.
inline void export_jsonl(const MetricsReport& r, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write report: " + path);
    auto optj = [](const std::optional<double>& v) {
        return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
    };
    nlohmann::json run{{"group", "run"},
                       {"mode", r.mode_tag},
                       {"trace_hash", r.trace_hash},
                       {"generated_tokens", r.generated_tokens}};
    nlohmann::json tpt{{"group", "tpt"},         {"mean", optj(r.tpt_mean)}, {"p50", optj(r.tpt_p50)},
                       {"p90", optj(r.tpt_p90)}, {"p99", optj(r.tpt_p99)},  {"samples", r.tpt_samples}};
    nlohmann::json training{{"group", "training"},
                            {"trained_tokens", r.trained_tokens},
                            {"busy_time", r.training_busy_time},
                            {"throughput", optj(r.training_throughput)},
                            {"completed_jobs", r.completed_jobs},
                            {"oom_jobs", r.oom_jobs}};
    nlohmann::json memory{{"group", "memory"},
                          {"peak_device_bytes", r.peak_device_bytes},
                          {"peak_training_activation_bytes", r.peak_training_activation_bytes},
                          {"oom_flag", r.oom_flag}};
    nlohmann::json counters{{"group", "counters"},
                            {"preemptions", r.preemptions},
                            {"layers_freed", r.layers_freed},
                            {"loads", r.loads},
                            {"recomputes", r.recomputes},
                            {"copy_stall_seconds", r.copy_stall_seconds},
                            {"labels_dropped", r.labels_dropped},
                            {"prefetch_wait_seconds", r.prefetch_wait_seconds},
                            {"map_fallbacks", r.map_fallbacks}};
    out << run.dump() << '\n'
        << tpt.dump() << '\n'
        << training.dump() << '\n'
        << memory.dump() << '\n'
        << counters.dump() << '\n';
}

inline MetricsReport import_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open report: " + path);
    MetricsReport r;
    std::string line;
    auto getopt = [](const nlohmann::json& j, const char* key) -> std::optional<double> {
        if (j.at(key).is_null()) return std::nullopt;
        return j.at(key).get<double>();
    };
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto j = nlohmann::json::parse(line);
        std::string group = j.at("group");
        if (group == "run") {
            r.mode_tag = j.at("mode");
            r.trace_hash = j.at("trace_hash");
            r.generated_tokens = j.at("generated_tokens");
        } else if (group == "tpt") {
            r.tpt_mean = getopt(j, "mean");
            r.tpt_p50 = getopt(j, "p50");
            r.tpt_p90 = getopt(j, "p90");
            r.tpt_p99 = getopt(j, "p99");
            r.tpt_samples = j.at("samples").get<std::vector<double>>();
        } else if (group == "training") {
            r.trained_tokens = j.at("trained_tokens");
            r.training_busy_time = j.at("busy_time");
            r.training_throughput = getopt(j, "throughput");
            r.completed_jobs = j.at("completed_jobs");
            r.oom_jobs = j.at("oom_jobs");
        } else if (group == "memory") {
            r.peak_device_bytes = j.at("peak_device_bytes");
            r.peak_training_activation_bytes = j.at("peak_training_activation_bytes");
            r.oom_flag = j.at("oom_flag");
        } else if (group == "counters") {
            r.preemptions = j.at("preemptions");
            r.layers_freed = j.at("layers_freed");
            r.loads = j.at("loads");
            r.recomputes = j.at("recomputes");
            r.copy_stall_seconds = j.at("copy_stall_seconds");
            r.labels_dropped = j.at("labels_dropped");
            r.prefetch_wait_seconds = j.at("prefetch_wait_seconds");
            r.map_fallbacks = j.at("map_fallbacks");
        }
    }
    return r;
}

/// Sorted (tpt, cumulative_fraction) pairs for CDF plots.
inline void export_tpt_cdf(const MetricsReport& r, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write cdf file: " + path);
    out << "tpt_seconds,cumulative_fraction\n";
    std::vector<double> sorted = r.tpt_samples;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size(); ++i)
        out << detail::f64(sorted[i]) << ','
            << detail::f64(static_cast<double>(i + 1) / static_cast<double>(sorted.size())) << '\n';
}

} // namespace colosim
