#include "joulebench/power_meter.hpp"

#include <dlfcn.h>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <thread>

namespace joulebench::power {

std::string_view component_name(Component c) {
    switch (c) {
        case Component::Cpu: return "cpu";
        case Component::Gpu: return "gpu";
        case Component::Ram: return "ram";
    }
    return "cpu";
}

Component component_from_name(std::string_view name) {
    if (name == "cpu") return Component::Cpu;
    if (name == "gpu") return Component::Gpu;
    if (name == "ram") return Component::Ram;
    throw std::invalid_argument("unknown component name: " + std::string(name));
}

nlohmann::json EnergyLedger::to_json() const {
    nlohmann::json j;
    j["run_id"] = run_id;
    j["interval_s"] = interval_s;
    j["wall_time_s"] = wall_time_s;
    j["joules"] = {{"cpu", joules[0]}, {"gpu", joules[1]}, {"ram", joules[2]}};
    j["samples"] = {{"cpu", sample_count[0]}, {"gpu", sample_count[1]}, {"ram", sample_count[2]}};
    j["degraded"] = degraded;
    return j;
}

EnergyLedger EnergyLedger::from_json(const nlohmann::json& j) {
    EnergyLedger l;
    l.run_id = j.at("run_id").get<std::string>();
    l.interval_s = j.at("interval_s").get<double>();
    l.wall_time_s = j.at("wall_time_s").get<double>();
    for (Component c : kComponents) {
        const auto key = std::string(component_name(c));
        l.joules[static_cast<int>(c)] = j.at("joules").at(key).get<double>();
        l.sample_count[static_cast<int>(c)] = j.at("samples").at(key).get<std::int64_t>();
    }
    l.degraded = j.at("degraded").get<std::vector<std::string>>();
    return l;
}

ComponentEnergy integrate(std::span<const PowerSample> samples, double interval_s) {
    if (!(interval_s > 0.0)) throw std::invalid_argument("interval_s must be positive");
    ComponentEnergy joules{};
    double prev_t = -std::numeric_limits<double>::infinity();
    for (const PowerSample& s : samples) {
        if (s.watts < 0.0) throw InvalidSampleError("negative watts in sample stream");
        if (s.timestamp_s < prev_t) throw std::invalid_argument("samples not sorted by timestamp");
        prev_t = s.timestamp_s;
        joules[static_cast<int>(s.component)] += s.watts * interval_s;
    }
    return joules;
}

double memory_watts(double resident_gb) {
    if (resident_gb < 0.0) throw std::invalid_argument("resident_gb must be >= 0");
    return kWattsPerGb * resident_gb;
}

// ---- SyntheticSource ----

SyntheticSource::SyntheticSource(Component component, double watts)
    : component_(component),
      watts_at_([watts](double) { return watts; }),
      label_("synthetic-" + std::string(component_name(component))) {
    if (watts < 0.0) throw std::invalid_argument("synthetic watts must be >= 0");
}

SyntheticSource::SyntheticSource(Component component, std::function<double(double)> watts_at, std::string label)
    : component_(component), watts_at_(std::move(watts_at)), label_(std::move(label)) {}

std::vector<PowerReading> SyntheticSource::poll(double elapsed_s) {
    return {{component_, watts_at_(elapsed_s)}};
}

// ---- TraceReplaySource ----

TraceReplaySource::TraceReplaySource(const std::filesystem::path& csv_path) : label_("trace:" + csv_path.string()) {
    std::ifstream in(csv_path);
    if (!in) throw std::invalid_argument("cannot open trace file: " + csv_path.string());
    parse(in);
}

TraceReplaySource::TraceReplaySource(std::istream& csv, std::string label) : label_(std::move(label)) {
    parse(csv);
}

void TraceReplaySource::parse(std::istream& in) {
    std::string line;
    std::size_t lineno = 0;
    if (!std::getline(in, line)) throw ParseError("empty trace file", 1);
    ++lineno;
    // Tolerate a UTF-8 BOM and require the exact header.
    if (line.starts_with("\xEF\xBB\xBF")) line.erase(0, 3);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != "t_s,component,value") throw ParseError("expected header 't_s,component,value'", 1);

    std::array<double, 3> last_t{-1.0, -1.0, -1.0};
    double last_any = -std::numeric_limits<double>::infinity();
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string t_str, comp_str, val_str;
        if (!std::getline(ss, t_str, ',') || !std::getline(ss, comp_str, ',') || !std::getline(ss, val_str)) {
            throw ParseError("expected 3 comma-separated fields", lineno);
        }
        Row row{};
        try {
            row.t_s = std::stod(t_str);
            row.component = component_from_name(comp_str);
            const double value = std::stod(val_str);
            row.watts = row.component == Component::Ram ? memory_watts(value) : value;
            if (row.watts < 0.0) throw std::invalid_argument("negative value");
        } catch (const ParseError&) {
            throw;
        } catch (const std::exception& e) {
            throw ParseError(std::string("bad trace row: ") + e.what(), lineno);
        }
        if (row.t_s < last_any) throw ParseError("trace rows not sorted by t_s", lineno);
        auto& comp_last = last_t[static_cast<int>(row.component)];
        if (row.t_s <= comp_last) throw ParseError("timestamps must be strictly increasing per component", lineno);
        comp_last = row.t_s;
        last_any = row.t_s;
        rows_.push_back(row);
    }
}

std::vector<PowerReading> TraceReplaySource::poll(double) {
    std::vector<PowerReading> out;
    if (next_ >= rows_.size()) return out;
    const double t = rows_[next_].t_s;
    while (next_ < rows_.size() && rows_[next_].t_s == t) {
        out.push_back({rows_[next_].component, rows_[next_].watts});
        ++next_;
    }
    return out;
}

// ---- CpuCounterSource ----

namespace {

std::uint64_t read_u64_file(const std::filesystem::path& p) {
    std::ifstream in(p);
    std::uint64_t v = 0;
    if (!(in >> v)) throw std::runtime_error("cannot read counter file: " + p.string());
    return v;
}

std::filesystem::path rapl_root() {
    if (const char* env = std::getenv(kRaplRootEnv)) return env;
    return "/sys/class/powercap";
}

}  // namespace

CpuCounterSource::CpuCounterSource() : CpuCounterSource(rapl_root()) {}

CpuCounterSource::CpuCounterSource(const std::filesystem::path& sysfs_root) : label_("cpu-rapl") {
    std::error_code ec;
    if (!std::filesystem::is_directory(sysfs_root, ec)) {
        throw PlatformError("RAPL sysfs root not available: " + sysfs_root.string());
    }
    for (const auto& entry : std::filesystem::directory_iterator(sysfs_root, ec)) {
        const std::string stem = entry.path().filename().string();
        // Top-level packages only (intel-rapl:<n>), not subzones (intel-rapl:<n>:<m>).
        if (stem.rfind("intel-rapl:", 0) != 0 || std::count(stem.begin(), stem.end(), ':') != 1) continue;
        const auto energy_path = entry.path() / "energy_uj";
        const auto range_path = entry.path() / "max_energy_range_uj";
        if (!std::filesystem::exists(energy_path, ec)) continue;
        double max_range = 0.0;
        try {
            max_range = static_cast<double>(read_u64_file(range_path));
        } catch (const std::exception&) {
            max_range = static_cast<double>(UINT64_MAX);
        }
        counters_.push_back(
            {[energy_path] { return read_u64_file(energy_path); }, max_range, false, 0});
    }
    if (counters_.empty()) {
        throw PlatformError("no intel-rapl packages under " + sysfs_root.string());
    }
}

CpuCounterSource::CpuCounterSource(std::function<std::uint64_t()> read_energy_uj, double max_range_uj,
                                   std::string label)
    : label_(std::move(label)) {
    counters_.push_back({std::move(read_energy_uj), max_range_uj, false, 0});
}

std::vector<PowerReading> CpuCounterSource::poll(double elapsed_s) {
    const double dt = elapsed_s - last_elapsed_s_;
    double delta_uj = 0.0;
    bool have_delta = primed_;
    for (Counter& c : counters_) {
        const std::uint64_t now = c.read_uj();
        if (c.primed) {
            double d = static_cast<double>(now) - static_cast<double>(c.last_uj);
            if (d < 0.0) d += c.max_range_uj;  // counter wrapped
            delta_uj += d;
        } else {
            have_delta = false;
        }
        c.last_uj = now;
        c.primed = true;
    }
    last_elapsed_s_ = elapsed_s;
    primed_ = true;
    if (!have_delta || dt <= 0.0) return {};
    const double watts = std::max(0.0, delta_uj * 1e-6 / dt);
    return {{Component::Cpu, watts}};
}

// ---- GpuPollerSource ----

GpuPollerSource::GpuPollerSource() {
    lib_ = dlopen("libnvidia-ml.so.1", RTLD_LAZY);
    if (!lib_) lib_ = dlopen("libnvidia-ml.so", RTLD_LAZY);
    if (!lib_) throw PlatformError("NVML library not available on this platform");

    auto init = reinterpret_cast<int (*)()>(dlsym(lib_, "nvmlInit_v2"));
    auto get_handle = reinterpret_cast<int (*)(unsigned int, void**)>(dlsym(lib_, "nvmlDeviceGetHandleByIndex_v2"));
    get_power_mw_ = reinterpret_cast<int (*)(void*, unsigned int*)>(dlsym(lib_, "nvmlDeviceGetPowerUsage"));
    shutdown_ = reinterpret_cast<int (*)()>(dlsym(lib_, "nvmlShutdown"));
    if (!init || !get_handle || !get_power_mw_) {
        dlclose(lib_);
        lib_ = nullptr;
        throw PlatformError("NVML symbols missing");
    }
    if (init() != 0 || get_handle(0, &device_) != 0) {
        dlclose(lib_);
        lib_ = nullptr;
        throw PlatformError("no NVML device available");
    }
}

GpuPollerSource::~GpuPollerSource() {
    if (lib_) {
        if (shutdown_) shutdown_();
        dlclose(lib_);
    }
}

std::vector<PowerReading> GpuPollerSource::poll(double) {
    unsigned int mw = 0;
    if (get_power_mw_(device_, &mw) != 0) throw std::runtime_error("NVML power query failed");
    return {{Component::Gpu, mw / 1000.0}};
}

// ---- MemoryEstimatorSource ----

namespace {

double process_resident_gb() {
    std::ifstream in("/proc/self/status");
    std::string key;
    while (in >> key) {
        if (key == "VmRSS:") {
            double kb = 0.0;
            in >> kb;
            return kb * 1024.0 / 1e9;
        }
        in.ignore(std::numeric_limits<std::streamsize>::max(), '\n');
    }
    throw PlatformError("VmRSS not found in /proc/self/status");
}

}  // namespace

MemoryEstimatorSource::MemoryEstimatorSource() : resident_gb_(process_resident_gb), label_("mem-rss") {}

MemoryEstimatorSource::MemoryEstimatorSource(std::function<double()> resident_gb, std::string label)
    : resident_gb_(std::move(resident_gb)), label_(std::move(label)) {}

std::vector<PowerReading> MemoryEstimatorSource::poll(double) {
    return {{Component::Ram, memory_watts(resident_gb_())}};
}

// ---- source spec parsing ----

std::unique_ptr<PowerSource> make_source(const std::string& spec) {
    std::vector<std::string> parts;
    std::size_t start = 0;
    while (true) {
        const auto pos = spec.find(':', start);
        if (pos == std::string::npos) {
            parts.push_back(spec.substr(start));
            break;
        }
        parts.push_back(spec.substr(start, pos - start));
        start = pos + 1;
    }
    const std::string& kind = parts[0];
    if (kind == "synthetic") {
        if (parts.size() != 3) throw std::invalid_argument("expected synthetic:<cpu|gpu|ram>:<watts>");
        return std::make_unique<SyntheticSource>(component_from_name(parts[1]), std::stod(parts[2]));
    }
    if (kind == "trace") {
        if (parts.size() < 2) throw std::invalid_argument("expected trace:<path>");
        // Re-join in case the path itself contains ':'.
        return std::make_unique<TraceReplaySource>(std::filesystem::path(spec.substr(6)));
    }
    if (kind == "rapl" && parts.size() == 1) return std::make_unique<CpuCounterSource>();
    if (kind == "nvml" && parts.size() == 1) return std::make_unique<GpuPollerSource>();
    if (kind == "mem") {
        if (parts.size() == 1) return std::make_unique<MemoryEstimatorSource>();
        if (parts.size() == 2) {
            const double gb = std::stod(parts[1]);
            if (gb < 0.0) throw std::invalid_argument("mem:<gb> must be >= 0");
            return std::make_unique<MemoryEstimatorSource>([gb] { return gb; },
                                                           "mem-fixed:" + parts[1]);
        }
    }
    throw std::invalid_argument("unknown source spec: " + spec);
}

// ---- MeterSession ----

MeterSession::MeterSession(std::vector<std::unique_ptr<PowerSource>> sources, double interval_s,
                           std::string run_id)
    : interval_s_(interval_s), run_id_(std::move(run_id)) {
    if (sources.empty()) throw std::invalid_argument("at least one power source required");
    if (!(interval_s > 0.0)) throw std::invalid_argument("interval_s must be positive");
    entries_.reserve(sources.size());
    for (auto& s : sources) entries_.push_back({std::move(s), false});
}

void MeterSession::poll_round(double now_s, double effective_dt_s) {
    for (Entry& e : entries_) {
        if (e.degraded || e.source->done()) continue;
        std::vector<PowerReading> readings;
        try {
            readings = e.source->poll(now_s);
        } catch (const std::exception&) {
            // Keep the partial energy, stop polling the source, carry on.
            e.degraded = true;
            degraded_.push_back(e.source->name());
            continue;
        }
        for (const PowerReading& r : readings) {
            if (r.watts < 0.0) {
                e.degraded = true;
                degraded_.push_back(e.source->name());
                break;
            }
            samples_.push_back({now_s, r.component, r.watts});
            joules_[static_cast<int>(r.component)] += r.watts * effective_dt_s;
            ++counts_[static_cast<int>(r.component)];
        }
    }
}

void MeterSession::tick() {
    const double now = static_cast<double>(ticks_) * interval_s_;
    poll_round(now, interval_s_);
    ++ticks_;
    wall_time_s_ = static_cast<double>(ticks_) * interval_s_;
}

std::size_t MeterSession::run_ticks(std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) tick();
    return n;
}

std::size_t MeterSession::drain(std::size_t max_ticks) {
    std::size_t n = 0;
    while (!all_done() && n < max_ticks) {
        tick();
        ++n;
    }
    return n;
}

bool MeterSession::all_done() const {
    for (const Entry& e : entries_) {
        if (!e.degraded && !e.source->done()) return false;
    }
    return true;
}

void MeterSession::run_realtime(const std::atomic<bool>& stop) {
    using clock = std::chrono::steady_clock;
    const auto t0 = clock::now();
    double last = 0.0;
    while (!stop.load(std::memory_order_relaxed)) {
        const double now = std::chrono::duration<double>(clock::now() - t0).count();
        double dt = ticks_ == 0 ? interval_s_ : now - last;
        // Integrate with the measured delta only when a poll missed its
        // deadline by more than 10%; otherwise the nominal interval applies.
        if (std::abs(dt - interval_s_) <= 0.1 * interval_s_) dt = interval_s_;
        poll_round(now, dt);
        last = now;
        ++ticks_;
        wall_time_s_ = std::chrono::duration<double>(clock::now() - t0).count();
        if (all_done()) break;
        std::this_thread::sleep_for(std::chrono::duration<double>(interval_s_));
    }
    wall_time_s_ = std::chrono::duration<double>(clock::now() - t0).count();
}

EnergyLedger MeterSession::ledger() const {
    EnergyLedger l;
    l.run_id = run_id_;
    l.interval_s = interval_s_;
    l.wall_time_s = wall_time_s_;
    l.joules = joules_;
    l.sample_count = counts_;
    l.degraded = degraded_;
    return l;
}

EnergyLedger record_session(std::vector<std::unique_ptr<PowerSource>> sources, double interval_s,
                            const std::atomic<bool>& stop, std::string run_id) {
    MeterSession session(std::move(sources), interval_s, std::move(run_id));
    session.run_realtime(stop);
    return session.ledger();
}

}  // namespace joulebench::power
