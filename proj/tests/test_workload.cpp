#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "colosim/workload.hpp"

using namespace colosim;

namespace {
std::string temp_path(const char* name) {
    return (std::filesystem::temp_directory_path() / name).string();
}
} // namespace

TEST_CASE("trace generation is deterministic in (seed, parameters)") {
    auto dist = LengthDistribution::uniform(100, 2000);
    Trace a = generate_trace(1.0, 500, dist, LengthDistribution::fixed(0.01), 42);
    Trace b = generate_trace(1.0, 500, dist, LengthDistribution::fixed(0.01), 42);
    CHECK(a.records == b.records);
    CHECK(a.content_hash() == b.content_hash());
    Trace c = generate_trace(1.0, 500, dist, LengthDistribution::fixed(0.01), 43);
    CHECK(a.content_hash() != c.content_hash());
}

TEST_CASE("poisson arrival count concentrates around qps * duration") {
    Trace t = generate_trace(1.0, 10000, LengthDistribution::fixed(1000), std::nullopt, 7);
    CHECK(t.records.size() >= 9700);
    CHECK(t.records.size() <= 10300);
}

TEST_CASE("mean inter-arrival gap tracks 1/qps at the rate used in the latency study") {
    Trace t = generate_trace(1.7, 20000, LengthDistribution::fixed(100), std::nullopt, 11);
    double sum = 0;
    for (std::size_t i = 1; i < t.records.size(); ++i)
        sum += t.records[i].arrival_time - t.records[i - 1].arrival_time;
    double mean = sum / static_cast<double>(t.records.size() - 1);
    CHECK(mean == doctest::Approx(1.0 / 1.7).epsilon(0.02));
}

TEST_CASE("inter-arrival gaps pass a KS test against the exponential law") {
    double qps = 1.3;
    Trace t = generate_trace(qps, 8000, LengthDistribution::fixed(10), std::nullopt, 99);
    std::vector<double> gaps;
    double prev = 0;
    for (const auto& r : t.records) {
        gaps.push_back(r.arrival_time - prev);
        prev = r.arrival_time;
    }
    REQUIRE(gaps.size() >= 5000);
    std::sort(gaps.begin(), gaps.end());
    double n = static_cast<double>(gaps.size());
    double d = 0;
    for (std::size_t i = 0; i < gaps.size(); ++i) {
        double cdf = 1.0 - std::exp(-qps * gaps[i]);
        d = std::max(d, std::abs(cdf - static_cast<double>(i + 1) / n));
        d = std::max(d, std::abs(cdf - static_cast<double>(i) / n));
    }
    // critical value at significance 0.01
    CHECK(d < 1.6276 / std::sqrt(n));
}

TEST_CASE("sample_length: fixed, clamped uniform, histogram frequencies") {
    Rng rng(5);
    auto fixed = LengthDistribution::fixed(3000);
    for (int i = 0; i < 10; ++i) CHECK(sample_length(fixed, rng) == 3000);

    auto uni = LengthDistribution::uniform(500, 7000);
    uni.min_tokens = 4000;
    for (int i = 0; i < 2000; ++i) {
        auto v = sample_length(uni, rng);
        CHECK(v >= 4000);
        CHECK(v <= 7000);
    }

    auto hist = LengthDistribution::histogram({{1000, 0.5}, {2000, 0.5}});
    int low = 0;
    const int n = 100000;
    for (int i = 0; i < n; ++i)
        if (sample_length(hist, rng) == 1000) ++low;
    CHECK(std::abs(low / static_cast<double>(n) - 0.5) < 0.01);
}

TEST_CASE("histogram probabilities must sum to one") {
    auto bad = LengthDistribution::histogram({{1000, 0.5}, {2000, 0.4}});
    CHECK_THROWS_AS(bad.validate(), std::runtime_error);
}

TEST_CASE("trace save/load round-trip") {
    auto dist = LengthDistribution::uniform(100, 999);
    Trace t = generate_trace(2.0, 50, dist, LengthDistribution::fixed(0.5), 3);
    t.records[0].label_delay.reset();  // exercise the nullable field
    std::string path = temp_path("colosim_trace_roundtrip.jsonl");
    save_trace(t, path);
    Trace back = load_trace(path);
    CHECK(back.records == t.records);
}

TEST_CASE("trace loading validates and sorts") {
    std::string path = temp_path("colosim_trace_validate.jsonl");
    {
        std::ofstream out(path);
        out << R"({"query_id":2,"arrival_time":5.0,"prompt_tokens":10,"output_tokens":4,"label_delay":null})"
            << "\n";
        out << R"({"query_id":1,"arrival_time":1.0,"prompt_tokens":10,"output_tokens":4,"label_delay":0.5})"
            << "\n";
        out << R"({"query_id":3,"arrival_time":2.0,"prompt_tokens":10,"output_tokens":4,"label_delay":null})"
            << "\n";
    }
    Trace t = load_trace(path);
    REQUIRE(t.records.size() == 3);
    CHECK(t.records[0].query_id == 1);
    CHECK(t.records[1].query_id == 3);
    CHECK(t.records[2].query_id == 2);

    {
        std::ofstream out(path);
        out << R"({"query_id":7,"arrival_time":0.0,"prompt_tokens":10})" << "\n";
        out << R"({"query_id":7,"arrival_time":1.0,"prompt_tokens":10})" << "\n";
    }
    CHECK_THROWS_WITH_AS(load_trace(path), doctest::Contains("7"), std::runtime_error);

    {
        std::ofstream out(path);
        out << R"({"query_id":9,"arrival_time":0.0,"prompt_tokens":0})" << "\n";
    }
    CHECK_THROWS_WITH_AS(load_trace(path), doctest::Contains("prompt_tokens"), std::runtime_error);

    {
        std::ofstream out(path);
        out << "{not json}\n";
    }
    CHECK_THROWS_WITH_AS(load_trace(path), doctest::Contains(":1"), std::runtime_error);
}

TEST_CASE("generation parameter validation") {
    CHECK_THROWS_AS(generate_trace(0.0, 10, LengthDistribution::fixed(10), std::nullopt, 1),
                    std::runtime_error);
    CHECK_THROWS_AS(generate_trace(1.0, 0, LengthDistribution::fixed(10), std::nullopt, 1),
                    std::runtime_error);
}
