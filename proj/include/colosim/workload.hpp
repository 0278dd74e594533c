#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

namespace colosim {

/// Deterministic RNG wrapper. All draws go through explicit bit-to-double
/// conversion so traces are identical across standard libraries.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    /// Exponential with the given rate (mean 1/rate).
    double exponential(double rate) { return -std::log(1.0 - uniform()) / rate; }

  private:
    std::mt19937_64 gen_;
};

enum class DistKind { Fixed, UniformRange, Histogram };

/// Sampling spec for prompt lengths (tokens) and label delays (seconds).
struct LengthDistribution {
    DistKind kind = DistKind::Fixed;
    double fixed_value = 0;
    double range_lo = 0, range_hi = 0;
    std::vector<std::pair<double, double>> bins;  // (value, probability)
    std::optional<std::uint64_t> min_tokens;      // floor applied after sampling

    static LengthDistribution fixed(double v) {
        LengthDistribution d;
        d.kind = DistKind::Fixed;
        d.fixed_value = v;
        return d;
    }

    static LengthDistribution uniform(double lo, double hi) {
        LengthDistribution d;
        d.kind = DistKind::UniformRange;
        d.range_lo = lo;
        d.range_hi = hi;
        return d;
    }

    static LengthDistribution histogram(std::vector<std::pair<double, double>> b) {
        LengthDistribution d;
        d.kind = DistKind::Histogram;
        d.bins = std::move(b);
        return d;
    }

    void validate() const {
        switch (kind) {
            case DistKind::Fixed:
                if (fixed_value < 0) throw std::runtime_error("distribution: fixed value must be >= 0");
                break;
            case DistKind::UniformRange:
                if (range_lo > range_hi)
                    throw std::runtime_error("distribution: range min exceeds max");
                break;
            case DistKind::Histogram: {
                if (bins.empty()) throw std::runtime_error("distribution: histogram has no bins");
                double sum = 0;
                for (const auto& [v, p] : bins) {
                    if (p < 0) throw std::runtime_error("distribution: negative bin probability");
                    sum += p;
                }
                if (std::abs(sum - 1.0) > 1e-9)
                    throw std::runtime_error("distribution: histogram probabilities sum to " +
                                             std::to_string(sum) + ", expected 1");
                break;
            }
        }
    }

    double sample_raw(Rng& rng) const {
        switch (kind) {
            case DistKind::Fixed:
                return fixed_value;
            case DistKind::UniformRange:
                return range_lo + (range_hi - range_lo) * rng.uniform();
            case DistKind::Histogram: {
                double u = rng.uniform();
                double acc = 0;
                for (const auto& [v, p] : bins) {
                    acc += p;
                    if (u < acc) return v;
                }
                return bins.back().first;
            }
        }
        return 0;
    }
};

/// Token-count sample with the min_tokens floor applied.
inline std::uint64_t sample_length(const LengthDistribution& dist, Rng& rng) {
    double raw = dist.sample_raw(rng);
    auto tokens = static_cast<std::uint64_t>(std::llround(std::max(raw, 1.0)));
    if (dist.min_tokens && tokens < *dist.min_tokens) tokens = *dist.min_tokens;
    return tokens;
}

inline double sample_seconds(const LengthDistribution& dist, Rng& rng) {
    return std::max(0.0, dist.sample_raw(rng));
}

struct QueryRecord {
    std::uint64_t query_id = 0;
    double arrival_time = 0;
    std::uint64_t prompt_tokens = 1;
    std::uint64_t output_tokens = 128;
    std::optional<double> label_delay;  // absent: feedback never arrives

    bool operator==(const QueryRecord&) const = default;
};

struct Trace {
    std::vector<QueryRecord> records;
    std::uint64_t seed = 0;
    double qps = 0;  // 0 when loaded from file

    double end_time() const { return records.empty() ? 0.0 : records.back().arrival_time; }

    /// Content hash used to pair runs that must share a workload.
    std::uint64_t content_hash() const {
        std::uint64_t h = 14695981039346656037ull;
        auto mix = [&h](std::uint64_t v) {
            for (int i = 0; i < 8; ++i) {
                h ^= (v >> (i * 8)) & 0xff;
                h *= 1099511628211ull;
            }
        };
        for (const auto& r : records) {
            mix(r.query_id);
            std::uint64_t bits;
            static_assert(sizeof(bits) == sizeof(r.arrival_time));
            std::memcpy(&bits, &r.arrival_time, 8);
            mix(bits);
            mix(r.prompt_tokens);
            mix(r.output_tokens);
            double d = r.label_delay ? *r.label_delay : -1.0;
            std::memcpy(&bits, &d, 8);
            mix(bits);
        }
        return h;
    }
};

inline void validate_trace(Trace& trace) {
    std::stable_sort(trace.records.begin(), trace.records.end(),
                     [](const QueryRecord& a, const QueryRecord& b) {
                         if (a.arrival_time != b.arrival_time) return a.arrival_time < b.arrival_time;
                         return a.query_id < b.query_id;
                     });
    std::vector<std::uint64_t> ids;
    ids.reserve(trace.records.size());
    for (const auto& r : trace.records) {
        if (r.arrival_time < 0)
            throw std::runtime_error("trace: query " + std::to_string(r.query_id) +
                                     ": negative arrival_time");
        if (r.prompt_tokens == 0)
            throw std::runtime_error("trace: query " + std::to_string(r.query_id) +
                                     ": prompt_tokens must be >= 1");
        if (r.output_tokens == 0)
            throw std::runtime_error("trace: query " + std::to_string(r.query_id) +
                                     ": output_tokens must be >= 1");
        ids.push_back(r.query_id);
    }
    std::sort(ids.begin(), ids.end());
    auto dup = std::adjacent_find(ids.begin(), ids.end());
    if (dup != ids.end())
        throw std::runtime_error("trace: duplicate query_id: " + std::to_string(*dup));
}

/// Poisson arrivals at `qps` for `duration` seconds; prompt lengths from
/// `dist`, optional per-query label delay from `label_delay_dist`.
/// Identical inputs produce identical traces.
inline Trace generate_trace(double qps, double duration, const LengthDistribution& dist,
                            const std::optional<LengthDistribution>& label_delay_dist,
                            std::uint64_t seed) {
    if (!(qps > 0)) throw std::runtime_error("generate_trace: qps must be > 0");
    if (!(duration > 0)) throw std::runtime_error("generate_trace: duration must be > 0");
    dist.validate();
    if (label_delay_dist) label_delay_dist->validate();

    Trace trace;
    trace.seed = seed;
    trace.qps = qps;
    Rng rng(seed);
    double t = 0;
    std::uint64_t id = 0;
    while (true) {
        t += rng.exponential(qps);
        if (t > duration) break;
        QueryRecord r;
        r.query_id = id++;
        r.arrival_time = t;
        r.prompt_tokens = sample_length(dist, rng);
        r.output_tokens = 128;
        if (label_delay_dist) r.label_delay = sample_seconds(*label_delay_dist, rng);
        trace.records.push_back(r);
    }
    validate_trace(trace);
    return trace;
}

/// JSON-lines trace loader: one record per line with keys query_id,
/// arrival_time, prompt_tokens, output_tokens, label_delay (nullable).
inline Trace load_trace(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open trace file: " + path);
    Trace trace;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
        try {
            QueryRecord r;
            r.query_id = j.at("query_id").get<std::uint64_t>();
            r.arrival_time = j.at("arrival_time").get<double>();
            r.prompt_tokens = j.at("prompt_tokens").get<std::uint64_t>();
            r.output_tokens = j.value("output_tokens", std::uint64_t{128});
            if (j.contains("label_delay") && !j.at("label_delay").is_null())
                r.label_delay = j.at("label_delay").get<double>();
            trace.records.push_back(r);
        } catch (const nlohmann::json::exception& e) {
            throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    validate_trace(trace);
    return trace;
}

inline void save_trace(const Trace& trace, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write trace file: " + path);
    for (const auto& r : trace.records) {
        nlohmann::json j;
        j["query_id"] = r.query_id;
        j["arrival_time"] = r.arrival_time;
        j["prompt_tokens"] = r.prompt_tokens;
        j["output_tokens"] = r.output_tokens;
        if (r.label_delay)
            j["label_delay"] = *r.label_delay;
        else
            j["label_delay"] = nullptr;
        out << j.dump() << '\n';
    }
}

/// Histogram file: JSON-lines of {tokens, probability}.
inline LengthDistribution load_histogram(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open histogram file: " + path);
    std::vector<std::pair<double, double>> bins;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            auto j = nlohmann::json::parse(line);
            bins.emplace_back(j.at("tokens").get<double>(), j.at("probability").get<double>());
        } catch (const nlohmann::json::exception& e) {
            throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    auto d = LengthDistribution::histogram(std::move(bins));
    d.validate();
    return d;
}

} // namespace colosim
