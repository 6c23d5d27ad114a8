// joulebench: energy accounting for contrastive representation learning.
// Subcommands: meter, label-cost, analyze, experiment, reference-table,
// loss-debug. All reports are machine-readable (JSON or CSV).

#include <atomic>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"
#include "joulebench/contrastive.hpp"
#include "joulebench/cost_model.hpp"
#include "joulebench/harness.hpp"
#include "joulebench/power_meter.hpp"

namespace power = joulebench::power;
namespace cost = joulebench::cost;
namespace contr = joulebench::contrastive;
namespace harness = joulebench::harness;

namespace {

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

int cmd_meter(const std::vector<std::string>& specs, double interval_s, std::int64_t ticks,
              double duration_s, const std::string& run_id) {
    std::vector<std::unique_ptr<power::PowerSource>> sources;
    for (const auto& spec : specs) sources.push_back(power::make_source(spec));
    power::MeterSession session(std::move(sources), interval_s, run_id);

    if (ticks >= 0) {
        session.run_ticks(static_cast<std::size_t>(ticks));
    } else if (duration_s > 0.0) {
        std::atomic<bool> stop{false};
        std::thread timer([&stop, duration_s] {
            std::this_thread::sleep_for(std::chrono::duration<double>(duration_s));
            stop.store(true);
        });
        session.run_realtime(stop);
        timer.join();
    } else {
        // No tick/duration bound: play sources to exhaustion (traces).
        session.drain();
    }
    std::cout << session.ledger().to_json().dump(2) << "\n";
    return 0;
}

int cmd_label_cost(double watts, double seconds, std::int64_t count) {
    const cost::LabelingCostModel model(watts, seconds);
    nlohmann::json j;
    j["joules"] = cost::labeling_energy_joules(model, count);
    j["kwh"] = cost::labeling_energy_kwh(model, count);
    std::cout << j.dump(2) << "\n";
    return 0;
}

struct RecordSelector {
    cost::Method method;
    std::string dataset;  // empty = any
    std::optional<double> data_fraction;
};

RecordSelector parse_selector(const std::string& text) {
    std::vector<std::string> parts;
    std::stringstream ss(text);
    std::string part;
    while (std::getline(ss, part, ':')) parts.push_back(part);
    if (parts.empty() || parts.size() > 3)
        throw std::invalid_argument("selector must be method[:dataset[:data_fraction]]");
    RecordSelector sel{cost::method_from_name(parts[0]), "", std::nullopt};
    if (parts.size() >= 2) sel.dataset = parts[1];
    if (parts.size() == 3 && !parts[2].empty()) sel.data_fraction = std::stod(parts[2]);
    return sel;
}

const cost::RegimeRecord& select_record(const std::vector<cost::RegimeRecord>& records,
                                        const RecordSelector& sel, const std::string& which) {
    const cost::RegimeRecord* found = nullptr;
    for (const auto& r : records) {
        if (r.method != sel.method) continue;
        if (!sel.dataset.empty() && r.dataset != sel.dataset) continue;
        if (sel.data_fraction && r.data_fraction != *sel.data_fraction) continue;
        if (found) throw std::invalid_argument("--" + which + " selector matches more than one record");
        found = &r;
    }
    if (!found) throw std::invalid_argument("--" + which + " selector matches no record");
    return *found;
}

void print_totals_csv(std::vector<cost::RegimeRecord> records, const cost::LabelingCostModel& model) {
    std::cout << "method,dataset,data_fraction,label_fraction,accuracy_pct,train_kwh,label_kwh,total_kwh\n";
    for (auto& r : records) {
        const double total = cost::total_energy_kwh(r, model);
        std::cout << cost::method_name(r.method) << ',' << r.dataset << ','
                  << fmt_double(r.data_fraction) << ',' << fmt_double(r.label_fraction) << ','
                  << fmt_double(r.accuracy_pct) << ',' << fmt_double(r.train_energy_kwh) << ','
                  << fmt_double(r.labeling_energy_kwh) << ',' << fmt_double(total) << '\n';
    }
}

int cmd_analyze(const std::string& records_path, bool use_reference, const std::string& mode,
                double watts, double seconds, const std::string& labeled_sel,
                const std::string& unlabeled_sel) {
    const cost::LabelingCostModel model(watts, seconds);
    std::vector<cost::RegimeRecord> records =
        use_reference ? cost::reference_table() : cost::read_records_jsonl_file(records_path);
    if (records.empty()) throw std::invalid_argument("no records to analyze");

    if (mode == "totals") {
        print_totals_csv(std::move(records), model);
        return 0;
    }
    if (mode == "pareto") {
        print_totals_csv(cost::pareto_frontier(records, model), model);
        return 0;
    }
    if (mode == "breakeven") {
        if (labeled_sel.empty() || unlabeled_sel.empty())
            throw std::invalid_argument("breakeven mode needs --labeled and --unlabeled selectors");
        const auto& labeled = select_record(records, parse_selector(labeled_sel), "labeled");
        const auto& unlabeled = select_record(records, parse_selector(unlabeled_sel), "unlabeled");
        const auto t = cost::breakeven_label_seconds(labeled, unlabeled, watts);
        nlohmann::json j;
        j["labeled_method"] = cost::method_name(labeled.method);
        j["unlabeled_method"] = cost::method_name(unlabeled.method);
        j["power_watts"] = watts;
        j["labeled_count"] = cost::labeled_count(labeled);
        if (t) {
            j["breakeven_seconds_per_label"] = *t;
        } else {
            j["breakeven_seconds_per_label"] = nullptr;
            j["note"] = "labeled training energy already exceeds the unlabeled total";
        }
        std::cout << j.dump(2) << "\n";
        return 0;
    }
    if (mode == "breakdown") {
        std::cout << "method,dataset,data_fraction,cpu_joules,gpu_joules,ram_joules,labeling_joules\n";
        for (auto& r : records) {
            if (!r.train_joules_by_component) {
                throw std::invalid_argument(
                    "record lacks per-component energy; breakdown needs experiment output "
                    "(method " + std::string(cost::method_name(r.method)) + ")");
            }
            const auto& c = *r.train_joules_by_component;
            const double label_j = cost::labeling_energy_joules(model, cost::labeled_count(r));
            std::cout << cost::method_name(r.method) << ',' << r.dataset << ','
                      << fmt_double(r.data_fraction) << ',' << fmt_double(c[0]) << ','
                      << fmt_double(c[1]) << ',' << fmt_double(c[2]) << ',' << fmt_double(label_j)
                      << '\n';
        }
        return 0;
    }
    throw std::invalid_argument("unknown mode: " + mode);
}

int cmd_experiment(const std::string& config_path, const std::string& out_dir) {
    harness::ExperimentConfig config;
    if (config_path.empty()) {
        config = harness::ExperimentConfig::defaults();
    } else {
        std::ifstream in(config_path);
        if (!in) throw std::invalid_argument("cannot open config file: " + config_path);
        config = harness::ExperimentConfig::from_json(nlohmann::json::parse(in));
    }
    const harness::GridResult result = harness::run_grid(config);

    std::filesystem::create_directories(out_dir);
    const auto records_path = std::filesystem::path(out_dir) / "records.jsonl";
    const auto csv_path = std::filesystem::path(out_dir) / "aggregate.csv";
    {
        std::ofstream out(records_path);
        harness::write_records_jsonl(out, result);
    }
    {
        std::ofstream out(csv_path);
        out << harness::aggregate_csv(result);
    }
    std::cout << "records: " << records_path.string() << " (" << result.records.size() << " rows)\n";
    std::cout << "aggregate: " << csv_path.string() << " (" << result.aggregates.size() << " rows)\n";
    for (const auto& f : result.failures) {
        std::cerr << "cell failed: " << cost::method_name(f.method) << " df=" << f.data_fraction
                  << " seed=" << f.seed << ": " << f.message << "\n";
    }
    return result.failures.empty() ? 0 : 1;
}

int cmd_reference_table(const std::string& format) {
    if (format == "csv") {
        std::cout << cost::reference_table_csv();
    } else if (format == "jsonl") {
        cost::write_records_jsonl(std::cout, cost::reference_table());
    } else {
        throw std::invalid_argument("unknown format: " + format);
    }
    return 0;
}

int cmd_loss_debug(const std::string& batch_path, const std::string& loss, double threshold) {
    nlohmann::json j;
    if (batch_path == "-") {
        std::cin >> j;
    } else {
        std::ifstream in(batch_path);
        if (!in) throw std::invalid_argument("cannot open batch file: " + batch_path);
        in >> j;
    }
    const auto batch = contr::normalize(contr::MultiviewBatch::from_json(j));
    contr::LossResult result;
    if (loss == "infonce") {
        result = contr::info_nce_loss(batch);
    } else if (loss == "supcon") {
        result = contr::supcon_loss(batch);
    } else if (loss == "semi") {
        result = contr::semi_supervised_loss(batch, threshold);
    } else {
        throw std::invalid_argument("unknown loss: " + loss);
    }
    std::cout << result.to_json().dump(2) << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Energy accounting for contrastive representation learning"};
    app.require_subcommand(1);

    // meter
    auto* meter = app.add_subcommand("meter", "Sample power sources and print an energy ledger");
    std::vector<std::string> meter_sources;
    double meter_interval = 15.0;
    std::int64_t meter_ticks = -1;
    double meter_duration = 0.0;
    std::string meter_run_id = "meter";
    meter->add_option("--source", meter_sources,
                      "Source spec: synthetic:<cpu|gpu|ram>:<watts>, trace:<path>, rapl, nvml, mem[:gb]")
        ->required();
    meter->add_option("--interval", meter_interval, "Sampling interval in seconds")
        ->capture_default_str();
    meter->add_option("--ticks", meter_ticks, "Poll N times on a virtual clock (deterministic)");
    meter->add_option("--duration", meter_duration, "Sample in real time for this many seconds");
    meter->add_option("--run-id", meter_run_id, "Ledger run id")->capture_default_str();

    // label-cost
    auto* label_cost = app.add_subcommand("label-cost", "Annotation energy for a labeled sample count");
    double lc_watts = 30.0, lc_seconds = 10.0;
    std::int64_t lc_count = 0;
    label_cost->add_option("--watts", lc_watts, "Annotation desk power draw (W)")->capture_default_str();
    label_cost->add_option("--seconds", lc_seconds, "Seconds to annotate one sample")->capture_default_str();
    label_cost->add_option("--count", lc_count, "Number of labeled samples")->required();

    // analyze
    auto* analyze = app.add_subcommand("analyze", "Totals, Pareto frontier, break-even or breakdown reports");
    std::string an_records, an_mode = "totals", an_labeled, an_unlabeled;
    bool an_reference = false;
    double an_watts = 30.0, an_seconds = 10.0;
    analyze->add_option("--records", an_records, "RegimeRecord JSONL file");
    analyze->add_flag("--reference", an_reference, "Use the embedded reference table");
    analyze->add_option("--mode", an_mode, "totals | pareto | breakeven | breakdown")->capture_default_str();
    analyze->add_option("--watts", an_watts, "Labeling power draw (W)")->capture_default_str();
    analyze->add_option("--seconds", an_seconds, "Seconds per label")->capture_default_str();
    analyze->add_option("--labeled", an_labeled, "Break-even labeled record: method[:dataset[:fraction]]");
    analyze->add_option("--unlabeled", an_unlabeled, "Break-even unlabeled record: method[:dataset[:fraction]]");

    // experiment
    auto* experiment = app.add_subcommand("experiment", "Run the desk-scale training grid");
    std::string ex_config, ex_out = "out";
    bool ex_print_default = false;
    experiment->add_option("--config", ex_config, "Experiment config JSON (defaults when omitted)");
    experiment->add_option("--out", ex_out, "Output directory")->capture_default_str();
    experiment->add_flag("--print-default-config", ex_print_default,
                         "Print the default config JSON and exit");

    // reference-table
    auto* reference = app.add_subcommand("reference-table", "Export the embedded reference results");
    std::string ref_format = "csv";
    reference->add_option("--format", ref_format, "csv | jsonl")->capture_default_str();

    // loss-debug
    auto* loss_debug = app.add_subcommand("loss-debug", "Evaluate a loss on a JSON batch (oracle cross-checks)");
    std::string ld_batch, ld_loss = "infonce";
    double ld_threshold = 0.9;
    loss_debug->add_option("--batch", ld_batch, "Batch JSON file, or - for stdin")->required();
    loss_debug->add_option("--loss", ld_loss, "infonce | supcon | semi")->capture_default_str();
    loss_debug->add_option("--threshold", ld_threshold, "Pseudo-label confidence threshold")
        ->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (meter->parsed())
            return cmd_meter(meter_sources, meter_interval, meter_ticks, meter_duration, meter_run_id);
        if (label_cost->parsed()) return cmd_label_cost(lc_watts, lc_seconds, lc_count);
        if (analyze->parsed()) {
            if (!an_reference && an_records.empty())
                throw std::invalid_argument("analyze needs --records <file> or --reference");
            return cmd_analyze(an_records, an_reference, an_mode, an_watts, an_seconds, an_labeled,
                               an_unlabeled);
        }
        if (experiment->parsed()) {
            if (ex_print_default) {
                std::cout << harness::ExperimentConfig::defaults().to_json().dump(2) << "\n";
                return 0;
            }
            return cmd_experiment(ex_config, ex_out);
        }
        if (reference->parsed()) return cmd_reference_table(ref_format);
        if (loss_debug->parsed()) return cmd_loss_debug(ld_batch, ld_loss, ld_threshold);
    } catch (const joulebench::PlatformError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
