#pragma once

// Sampled power metering: pluggable per-component power sources, a polling
// session, and left-Riemann integration of samples into per-component joules.

#include <array>
#include <atomic>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <istream>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "joulebench/errors.hpp"

namespace joulebench::power {

enum class Component : int { Cpu = 0, Gpu = 1, Ram = 2 };

inline constexpr std::array<Component, 3> kComponents{Component::Cpu, Component::Gpu, Component::Ram};
inline constexpr double kJoulesPerKwh = 3.6e6;

// Default memory power model: watts drawn per resident GB.
inline constexpr double kWattsPerGb = 0.375;

std::string_view component_name(Component c);
Component component_from_name(std::string_view name);

// One timestamped instantaneous power reading for one hardware component.
// Timestamps are seconds since session start; strictly increasing within
// one source's stream.
struct PowerSample {
    double timestamp_s = 0.0;
    Component component = Component::Cpu;
    double watts = 0.0;
};

using ComponentEnergy = std::array<double, 3>;  // joules, indexed by Component

// Accumulated joules per component for one run, with sampling metadata.
struct EnergyLedger {
    std::string run_id;
    double interval_s = 0.0;
    double wall_time_s = 0.0;
    ComponentEnergy joules{};
    std::array<std::int64_t, 3> sample_count{};
    std::vector<std::string> degraded;  // sources that failed mid-session

    double total_joules() const { return joules[0] + joules[1] + joules[2]; }
    double total_kwh() const { return total_joules() / kJoulesPerKwh; }

    nlohmann::json to_json() const;
    static EnergyLedger from_json(const nlohmann::json& j);
    bool operator==(const EnergyLedger&) const = default;
};

// Left Riemann sum: each sample contributes watts * interval_s.
// Samples must be sorted by timestamp (non-decreasing across components).
ComponentEnergy integrate(std::span<const PowerSample> samples, double interval_s);

// 0.375 W per resident GB.
double memory_watts(double resident_gb);

struct PowerReading {
    Component component;
    double watts;
};

// A pollable instantaneous-power reader. poll() returns the readings for one
// sampling tick (usually exactly one; a trace yields every reading that
// shares the next timestamp, a warm-up poll of a counter yields none).
class PowerSource {
public:
    virtual ~PowerSource() = default;
    virtual std::string name() const = 0;
    virtual std::vector<PowerReading> poll(double elapsed_s) = 0;
    // True once the source has nothing further to report (exhausted trace).
    virtual bool done() const { return false; }
};

// Constant or function-of-time power.
class SyntheticSource : public PowerSource {
public:
    SyntheticSource(Component component, double watts);
    SyntheticSource(Component component, std::function<double(double)> watts_at, std::string label);

    std::string name() const override { return label_; }
    std::vector<PowerReading> poll(double elapsed_s) override;

private:
    Component component_;
    std::function<double(double)> watts_at_;
    std::string label_;
};

// Deterministic playback of a recorded CSV trace: `t_s,component,value`
// with component in {cpu,gpu,ram}; value is watts for cpu/gpu and resident
// GB for ram. Rows must be sorted by t_s, strictly increasing per component.
class TraceReplaySource : public PowerSource {
public:
    explicit TraceReplaySource(const std::filesystem::path& csv_path);
    explicit TraceReplaySource(std::istream& csv, std::string label = "trace");

    std::string name() const override { return label_; }
    std::vector<PowerReading> poll(double elapsed_s) override;
    bool done() const override { return next_ >= rows_.size(); }

private:
    struct Row {
        double t_s;
        Component component;
        double watts;
    };
    void parse(std::istream& in);

    std::vector<Row> rows_;
    std::size_t next_ = 0;
    std::string label_;
};

// Name of the environment variable that overrides the RAPL sysfs root
// (for running against fixture directories).
inline constexpr const char* kRaplRootEnv = "JOULEBENCH_RAPL_ROOT";

// RAPL-style cumulative energy counter converted to power. The counter
// reports cumulative microjoules; power is delta energy over delta time
// between consecutive polls, with wraparound corrected via the counter's
// declared maximum range. The first poll only warms up the delta.
class CpuCounterSource : public PowerSource {
public:
    // Reads every intel-rapl:<n> package under the sysfs root
    // (JOULEBENCH_RAPL_ROOT overrides the default /sys/class/powercap).
    CpuCounterSource();
    explicit CpuCounterSource(const std::filesystem::path& sysfs_root);
    // Injected counter, for tests and exotic platforms.
    CpuCounterSource(std::function<std::uint64_t()> read_energy_uj, double max_range_uj,
                     std::string label = "cpu-counter");

    std::string name() const override { return label_; }
    std::vector<PowerReading> poll(double elapsed_s) override;

private:
    struct Counter {
        std::function<std::uint64_t()> read_uj;
        double max_range_uj;
        bool primed = false;
        std::uint64_t last_uj = 0;
    };
    std::vector<Counter> counters_;
    bool primed_ = false;
    double last_elapsed_s_ = 0.0;
    std::string label_;
};

// GPU power via the vendor management library (NVML), loaded at runtime.
// Throws PlatformError when the library or a device is unavailable.
class GpuPollerSource : public PowerSource {
public:
    GpuPollerSource();
    ~GpuPollerSource() override;

    std::string name() const override { return "gpu-nvml"; }
    std::vector<PowerReading> poll(double elapsed_s) override;

private:
    void* lib_ = nullptr;
    void* device_ = nullptr;
    int (*get_power_mw_)(void*, unsigned int*) = nullptr;
    int (*shutdown_)() = nullptr;
};

// Resident-set memory power: resident GB * 0.375 W/GB.
class MemoryEstimatorSource : public PowerSource {
public:
    MemoryEstimatorSource();  // reads VmRSS of the current process
    MemoryEstimatorSource(std::function<double()> resident_gb, std::string label = "mem");

    std::string name() const override { return label_; }
    std::vector<PowerReading> poll(double elapsed_s) override;

private:
    std::function<double()> resident_gb_;
    std::string label_;
};

// Builds a source from a CLI/config spec string:
//   synthetic:<cpu|gpu|ram>:<watts>   constant power
//   trace:<path>                      CSV trace playback
//   rapl                              live CPU counter (env-overridable root)
//   nvml                              live GPU poller
//   mem | mem:<gb>                    resident-set estimator (live or fixed)
std::unique_ptr<PowerSource> make_source(const std::string& spec);

// Polls every source once per tick and accumulates energy. Tick-driven runs
// advance a virtual clock by exactly interval_s per tick and are fully
// deterministic; run_realtime sleeps between polls and integrates with the
// actually elapsed delta when it deviates more than 10% from interval_s.
// Single writer: the session owns collection; the ledger is immutable once
// built and safe to read from any context.
class MeterSession {
public:
    MeterSession(std::vector<std::unique_ptr<PowerSource>> sources, double interval_s,
                 std::string run_id = "session");

    void tick();
    std::size_t run_ticks(std::size_t n);
    // Ticks until every source reports done(); returns ticks executed.
    std::size_t drain(std::size_t max_ticks = 10'000'000);
    void run_realtime(const std::atomic<bool>& stop);

    bool all_done() const;
    const std::vector<PowerSample>& samples() const { return samples_; }
    EnergyLedger ledger() const;

private:
    void poll_round(double now_s, double effective_dt_s);

    struct Entry {
        std::unique_ptr<PowerSource> source;
        bool degraded = false;
    };
    std::vector<Entry> entries_;
    double interval_s_;
    std::string run_id_;
    std::vector<PowerSample> samples_;
    ComponentEnergy joules_{};
    std::array<std::int64_t, 3> counts_{};
    std::vector<std::string> degraded_;
    double wall_time_s_ = 0.0;
    std::size_t ticks_ = 0;
};

// Wall-clock sampling loop; polls until `stop` becomes true.
EnergyLedger record_session(std::vector<std::unique_ptr<PowerSource>> sources, double interval_s,
                            const std::atomic<bool>& stop, std::string run_id = "session");

}  // namespace joulebench::power
