#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <span>
#include <sstream>
#include <thread>

#include "doctest.h"
#include "joulebench/power_meter.hpp"
#include "joulebench/rng.hpp"

using namespace joulebench;
using namespace joulebench::power;

namespace {

std::vector<PowerSample> constant_samples(Component c, double watts, int n, double dt) {
    std::vector<PowerSample> out;
    for (int i = 0; i < n; ++i) out.push_back({i * dt, c, watts});
    return out;
}

std::filesystem::path write_temp(const std::string& name, const std::string& content) {
    const auto path = std::filesystem::temp_directory_path() / name;
    std::ofstream out(path);
    out << content;
    return path;
}

}  // namespace

TEST_CASE("integrate: constant power rectangle") {
    const auto samples = constant_samples(Component::Cpu, 10.0, 4, 15.0);
    const auto joules = integrate(samples, 15.0);
    CHECK(joules[0] == doctest::Approx(600.0));
    CHECK(joules[1] == 0.0);
    CHECK(joules[2] == 0.0);
}

TEST_CASE("integrate: empty input is zero everywhere") {
    const auto joules = integrate(std::vector<PowerSample>{}, 15.0);
    CHECK(joules[0] == 0.0);
    CHECK(joules[1] == 0.0);
    CHECK(joules[2] == 0.0);
}

TEST_CASE("integrate: hand-summed trace values") {
    // (5 + 10 + 15) * 15 = 450
    std::vector<PowerSample> samples{{0, Component::Cpu, 5}, {15, Component::Cpu, 10}, {30, Component::Cpu, 15}};
    CHECK(integrate(samples, 15.0)[0] == doctest::Approx(450.0));
}

TEST_CASE("integrate: error paths") {
    const auto samples = constant_samples(Component::Cpu, 1.0, 2, 1.0);
    CHECK_THROWS_AS(integrate(samples, -1.0), std::invalid_argument);
    CHECK_THROWS_AS(integrate(samples, 0.0), std::invalid_argument);
    std::vector<PowerSample> bad{{0, Component::Cpu, -2.0}};
    CHECK_THROWS_AS(integrate(bad, 1.0), InvalidSampleError);
    std::vector<PowerSample> unsorted{{5, Component::Cpu, 1.0}, {1, Component::Cpu, 1.0}};
    CHECK_THROWS_AS(integrate(unsorted, 1.0), std::invalid_argument);
}

TEST_CASE("memory_watts: paper constant") {
    CHECK(memory_watts(0.0) == 0.0);
    CHECK(memory_watts(2.0) == doctest::Approx(0.75));
    CHECK_THROWS_AS(memory_watts(-1.0), std::invalid_argument);
    // 6 GB sustained for 3600 s at 15 s sampling: 2.25 W x 3600 s.
    const auto samples = constant_samples(Component::Ram, memory_watts(6.0), 240, 15.0);
    CHECK(integrate(samples, 15.0)[2] == doctest::Approx(8100.0));
}

TEST_CASE("integrate properties: linearity and additivity over generated streams") {
    Rng rng(13);
    for (int trial = 0; trial < 300; ++trial) {
        const int n = 1 + static_cast<int>(rng.uniform_index(40));
        std::vector<PowerSample> samples;
        double t = 0.0;
        for (int i = 0; i < n; ++i) {
            t += rng.uniform01();
            samples.push_back({t, kComponents[rng.uniform_index(3)], 100.0 * rng.uniform01()});
        }
        const double dt = 0.1 + 10.0 * rng.uniform01();
        const auto once = integrate(samples, dt);
        const auto twice = integrate(samples, 2.0 * dt);
        const std::size_t split = rng.uniform_index(n + 1);
        const auto head = integrate(std::span(samples).first(split), dt);
        const auto tail = integrate(std::span(samples).subspan(split), dt);
        for (int c = 0; c < 3; ++c) {
            CHECK(twice[c] == doctest::Approx(2.0 * once[c]).epsilon(1e-12));
            CHECK(head[c] + tail[c] == doctest::Approx(once[c]).epsilon(1e-12));
            CHECK(once[c] >= 0.0);
        }
    }
}

TEST_CASE("record_session: two synthetic sources, four polls") {
    std::vector<std::unique_ptr<PowerSource>> sources;
    sources.push_back(std::make_unique<SyntheticSource>(Component::Cpu, 10.0));
    sources.push_back(std::make_unique<SyntheticSource>(Component::Gpu, 30.0));
    MeterSession session(std::move(sources), 15.0, "double-synthetic");
    session.run_ticks(4);
    const EnergyLedger ledger = session.ledger();
    CHECK(ledger.joules[0] == doctest::Approx(600.0));
    CHECK(ledger.joules[1] == doctest::Approx(1800.0));
    CHECK(ledger.total_joules() == doctest::Approx(2400.0));
    CHECK(ledger.sample_count[0] == 4);
    CHECK(ledger.sample_count[1] == 4);
    CHECK(ledger.degraded.empty());
    // The ledger matches integrate() applied to the collected samples.
    const auto joules = integrate(session.samples(), 15.0);
    for (int c = 0; c < 3; ++c) CHECK(joules[c] == doctest::Approx(ledger.joules[c]));
}

TEST_CASE("record_session: memory estimator at constant residency") {
    std::vector<std::unique_ptr<PowerSource>> sources;
    sources.push_back(std::make_unique<MemoryEstimatorSource>([] { return 2.0; }));
    MeterSession session(std::move(sources), 15.0, "mem");
    session.run_ticks(240);
    CHECK(session.ledger().joules[2] == doctest::Approx(2700.0));
}

TEST_CASE("trace replay: deterministic byte-identical ledgers") {
    const auto path = write_temp("jb_trace_det.csv",
                                 "t_s,component,value\n"
                                 "0,cpu,5\n0,gpu,20\n0,ram,2\n"
                                 "15,cpu,10\n15,gpu,22\n15,ram,2\n"
                                 "30,cpu,15\n30,gpu,18\n30,ram,2\n");
    auto run = [&path] {
        std::vector<std::unique_ptr<PowerSource>> sources;
        sources.push_back(std::make_unique<TraceReplaySource>(path));
        MeterSession session(std::move(sources), 15.0, "trace");
        session.drain();
        return session.ledger();
    };
    const EnergyLedger a = run();
    const EnergyLedger b = run();
    CHECK(a == b);
    CHECK(a.to_json().dump() == b.to_json().dump());
    CHECK(a.joules[0] == doctest::Approx(450.0));
    CHECK(a.joules[2] == doctest::Approx(3 * memory_watts(2.0) * 15.0));
    CHECK(a.sample_count[0] == 3);
}

TEST_CASE("trace replay: parse errors carry line numbers") {
    SUBCASE("bad header") {
        std::istringstream in("time,comp,watts\n0,cpu,5\n");
        CHECK_THROWS_AS(TraceReplaySource{in}, ParseError);
    }
    SUBCASE("bad component") {
        std::istringstream in("t_s,component,value\n0,tpu,5\n");
        try {
            TraceReplaySource src(in);
            FAIL("expected ParseError");
        } catch (const ParseError& e) {
            CHECK(e.line == 2);
        }
    }
    SUBCASE("unsorted rows") {
        std::istringstream in("t_s,component,value\n10,cpu,5\n0,cpu,5\n");
        CHECK_THROWS_AS(TraceReplaySource{in}, ParseError);
    }
    SUBCASE("duplicate component timestamp") {
        std::istringstream in("t_s,component,value\n0,cpu,5\n0,cpu,6\n");
        CHECK_THROWS_AS(TraceReplaySource{in}, ParseError);
    }
}

TEST_CASE("degraded source: partial energy retained, session continues") {
    struct FlakySource : PowerSource {
        int polls = 0;
        std::string name() const override { return "flaky"; }
        std::vector<PowerReading> poll(double) override {
            if (++polls > 2) throw std::runtime_error("sensor gone");
            return {{Component::Gpu, 50.0}};
        }
    };
    std::vector<std::unique_ptr<PowerSource>> sources;
    sources.push_back(std::make_unique<SyntheticSource>(Component::Cpu, 10.0));
    sources.push_back(std::make_unique<FlakySource>());
    MeterSession session(std::move(sources), 1.0, "flaky-run");
    session.run_ticks(5);
    const EnergyLedger ledger = session.ledger();
    CHECK(ledger.joules[0] == doctest::Approx(50.0));  // 10 W x 5 s, unaffected
    CHECK(ledger.joules[1] == doctest::Approx(100.0)); // two good polls retained
    REQUIRE(ledger.degraded.size() == 1);
    CHECK(ledger.degraded[0] == "flaky");
}

TEST_CASE("cpu counter: delta over time with wraparound correction") {
    // Sequence A wraps once, sequence B is the unwrapped equivalent.
    const double max_range = 1e9;  // 1000 J in microjoules
    auto make_session = [&max_range](std::vector<std::uint64_t> values) {
        auto it = std::make_shared<std::size_t>(0);
        auto vals = std::make_shared<std::vector<std::uint64_t>>(std::move(values));
        std::vector<std::unique_ptr<PowerSource>> sources;
        sources.push_back(std::make_unique<CpuCounterSource>(
            [it, vals] { return (*vals)[(*it)++]; }, max_range));
        MeterSession session(std::move(sources), 1.0, "counter");
        session.run_ticks(3);
        return session.ledger();
    };
    const auto wrapped = make_session({800'000'000, 950'000'000, 100'000'000});
    const auto unwrapped = make_session({800'000'000, 950'000'000, 1'100'000'000});
    CHECK(wrapped.joules[0] == doctest::Approx(unwrapped.joules[0]));
    CHECK(wrapped.joules[0] == doctest::Approx(300.0));  // (150 + 150) J over 1 s each
    CHECK(wrapped.joules[0] >= 0.0);
    // Warm-up poll emits no sample.
    CHECK(wrapped.sample_count[0] == 2);
}

TEST_CASE("cpu counter: generated wrap sequences never yield negative power") {
    Rng rng(99);
    for (int trial = 0; trial < 200; ++trial) {
        const double max_range = 1e6 + 1e9 * rng.uniform01();
        std::vector<std::uint64_t> values;
        double cumulative = rng.uniform01() * max_range;
        const int n = 3 + static_cast<int>(rng.uniform_index(10));
        std::vector<std::uint64_t> raw;
        for (int i = 0; i < n; ++i) {
            raw.push_back(static_cast<std::uint64_t>(std::fmod(cumulative, max_range)));
            cumulative += rng.uniform01() * 0.4 * max_range;
        }
        auto it = std::make_shared<std::size_t>(0);
        auto vals = std::make_shared<std::vector<std::uint64_t>>(std::move(raw));
        std::vector<std::unique_ptr<PowerSource>> sources;
        sources.push_back(std::make_unique<CpuCounterSource>(
            [it, vals] { return (*vals)[(*it)++]; }, max_range));
        MeterSession session(std::move(sources), 0.5, "wrap");
        session.run_ticks(n);
        for (const PowerSample& s : session.samples()) CHECK(s.watts >= 0.0);
    }
}

TEST_CASE("cpu counter: sysfs fixture directory via env override") {
    namespace fs = std::filesystem;
    const auto root = fs::temp_directory_path() / "jb_rapl_fixture";
    fs::create_directories(root / "intel-rapl:0");
    {
        std::ofstream(root / "intel-rapl:0" / "energy_uj") << 1'000'000;
        std::ofstream(root / "intel-rapl:0" / "max_energy_range_uj") << 262'143'328'850;
    }
    CpuCounterSource source(root);
    CHECK(source.poll(0.0).empty());  // warm-up
    std::ofstream(root / "intel-rapl:0" / "energy_uj") << 5'000'000;
    const auto readings = source.poll(2.0);
    REQUIRE(readings.size() == 1);
    CHECK(readings[0].component == Component::Cpu);
    CHECK(readings[0].watts == doctest::Approx(2.0));  // 4 J over 2 s

    CHECK_THROWS_AS(CpuCounterSource(root / "missing"), PlatformError);
}

TEST_CASE("ledger json round trip and invariants") {
    std::vector<std::unique_ptr<PowerSource>> sources;
    sources.push_back(std::make_unique<SyntheticSource>(Component::Cpu, 12.5));
    MeterSession session(std::move(sources), 0.5, "roundtrip");
    session.run_ticks(7);
    const EnergyLedger ledger = session.ledger();
    const EnergyLedger back = EnergyLedger::from_json(ledger.to_json());
    CHECK(back == ledger);
    CHECK(ledger.total_joules() == doctest::Approx(ledger.joules[0] + ledger.joules[1] + ledger.joules[2]));
    // joules <= max watts x samples x interval
    CHECK(ledger.joules[0] <= 12.5 * ledger.sample_count[0] * 0.5 + 1e-9);
}

TEST_CASE("record_session: realtime stop signal") {
    std::vector<std::unique_ptr<PowerSource>> sources;
    sources.push_back(std::make_unique<SyntheticSource>(Component::Cpu, 10.0));
    std::atomic<bool> stop{false};
    std::thread timer([&stop] {
        std::this_thread::sleep_for(std::chrono::milliseconds(120));
        stop.store(true);
    });
    const EnergyLedger ledger = record_session(std::move(sources), 0.05, stop, "rt");
    timer.join();
    CHECK(ledger.sample_count[0] >= 2);
    CHECK(ledger.joules[0] > 0.0);
    // Loose bound; scheduling noise is expected here.
    CHECK(ledger.joules[0] <= 10.0 * (ledger.wall_time_s + 0.5));
}

TEST_CASE("make_source specs") {
    CHECK(make_source("synthetic:cpu:10")->name() == "synthetic-cpu");
    CHECK(make_source("mem:2")->poll(0.0)[0].watts == doctest::Approx(0.75));
    CHECK_THROWS_AS(make_source("synthetic:cpu"), std::invalid_argument);
    CHECK_THROWS_AS(make_source("bogus:1"), std::invalid_argument);
    CHECK_THROWS_AS(make_source("trace:/nonexistent/file.csv"), std::invalid_argument);
}
