#include "joulebench/cost_model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace joulebench::cost {

LabelingCostModel::LabelingCostModel(double power_watts, double seconds_per_label)
    : power_watts(power_watts), seconds_per_label(seconds_per_label) {
    if (!(power_watts > 0.0)) throw std::invalid_argument("power_watts must be > 0");
    if (!(seconds_per_label > 0.0)) throw std::invalid_argument("seconds_per_label must be > 0");
}

std::string_view method_name(Method m) {
    switch (m) {
        case Method::Baseline: return "baseline";
        case Method::SimCLR: return "simclr";
        case Method::SupCon: return "supcon";
        case Method::SemiSupervised: return "semi_supervised";
    }
    return "baseline";
}

Method method_from_name(std::string_view name) {
    if (name == "baseline") return Method::Baseline;
    if (name == "simclr") return Method::SimCLR;
    if (name == "supcon") return Method::SupCon;
    if (name == "semi_supervised") return Method::SemiSupervised;
    throw std::invalid_argument("unknown method: " + std::string(name));
}

void RegimeRecord::validate() const {
    if (dataset_size_k < 0) throw std::invalid_argument("dataset_size_k must be >= 0");
    if (data_fraction < 0.0 || data_fraction > 1.0) throw std::invalid_argument("data_fraction out of [0,1]");
    if (label_fraction < 0.0 || label_fraction > 1.0) throw std::invalid_argument("label_fraction out of [0,1]");
    if (accuracy_pct < 0.0 || accuracy_pct > 100.0) throw std::invalid_argument("accuracy_pct out of [0,100]");
    if (train_energy_kwh < 0.0 || labeling_energy_kwh < 0.0) throw std::invalid_argument("energies must be >= 0");
    if (method == Method::SimCLR && label_fraction != 0.0)
        throw std::invalid_argument("simclr records must have label_fraction 0");
    if ((method == Method::Baseline || method == Method::SupCon) && label_fraction != 1.0)
        throw std::invalid_argument("baseline/supcon records must have label_fraction 1");
}

nlohmann::json RegimeRecord::to_json() const {
    nlohmann::json j;
    j["method"] = std::string(method_name(method));
    j["dataset"] = dataset;
    j["dataset_size_k"] = dataset_size_k;
    j["data_fraction"] = data_fraction;
    j["label_fraction"] = label_fraction;
    j["accuracy_pct"] = accuracy_pct;
    j["train_energy_kwh"] = train_energy_kwh;
    j["labeling_energy_kwh"] = labeling_energy_kwh;
    if (seed) j["seed"] = *seed;
    if (train_joules_by_component) {
        j["train_joules_by_component"] = {{"cpu", (*train_joules_by_component)[0]},
                                          {"gpu", (*train_joules_by_component)[1]},
                                          {"ram", (*train_joules_by_component)[2]}};
    }
    return j;
}

RegimeRecord RegimeRecord::from_json(const nlohmann::json& j) {
    RegimeRecord r;
    r.method = method_from_name(j.at("method").get<std::string>());
    r.dataset = j.value("dataset", std::string());
    r.dataset_size_k = j.at("dataset_size_k").get<std::int64_t>();
    r.data_fraction = j.at("data_fraction").get<double>();
    r.label_fraction = j.at("label_fraction").get<double>();
    r.accuracy_pct = j.at("accuracy_pct").get<double>();
    r.train_energy_kwh = j.at("train_energy_kwh").get<double>();
    r.labeling_energy_kwh = j.value("labeling_energy_kwh", 0.0);
    if (j.contains("seed")) r.seed = j.at("seed").get<std::int64_t>();
    if (j.contains("train_joules_by_component")) {
        const auto& c = j.at("train_joules_by_component");
        r.train_joules_by_component = power::ComponentEnergy{
            c.at("cpu").get<double>(), c.at("gpu").get<double>(), c.at("ram").get<double>()};
    }
    r.validate();
    return r;
}

std::int64_t labeled_count(const RegimeRecord& record) {
    // Round-to-nearest; fractional samples are not otherwise meaningful.
    return std::llround(static_cast<double>(record.dataset_size_k) * record.data_fraction *
                        record.label_fraction);
}

double labeling_energy_joules(const LabelingCostModel& model, std::int64_t count) {
    if (count < 0) throw std::invalid_argument("labeled count must be >= 0");
    return model.power_watts * static_cast<double>(count) * model.seconds_per_label;
}

double labeling_energy_kwh(const LabelingCostModel& model, std::int64_t count) {
    return labeling_energy_joules(model, count) / kJoulesPerKwh;
}

double total_energy_kwh(RegimeRecord& record, const LabelingCostModel& model) {
    record.labeling_energy_kwh = labeling_energy_kwh(model, labeled_count(record));
    return record.train_energy_kwh + record.labeling_energy_kwh;
}

double total_energy_kwh(const RegimeRecord& record, const LabelingCostModel& model) {
    return record.train_energy_kwh + labeling_energy_kwh(model, labeled_count(record));
}

std::optional<double> breakeven_label_seconds(const RegimeRecord& labeled_rec,
                                              const RegimeRecord& unlabeled_rec, double power_watts) {
    if (!(power_watts > 0.0)) throw std::invalid_argument("power_watts must be > 0");
    const std::int64_t count = labeled_count(labeled_rec);
    if (count == 0) throw std::invalid_argument("labeled record has zero labeled samples");
    if (labeled_count(unlabeled_rec) != 0)
        throw std::invalid_argument("unlabeled record must carry no labeling energy");
    const double delta_joules =
        (unlabeled_rec.train_energy_kwh - labeled_rec.train_energy_kwh) * kJoulesPerKwh;
    if (delta_joules < 0.0) return std::nullopt;
    return delta_joules / (power_watts * static_cast<double>(count));
}

std::vector<RegimeRecord> pareto_frontier(const std::vector<RegimeRecord>& records,
                                          const LabelingCostModel& model) {
    if (records.empty()) throw std::invalid_argument("pareto_frontier requires a nonempty record list");

    struct Scored {
        std::size_t index;
        double total;
        double acc;
    };
    std::vector<Scored> scored;
    scored.reserve(records.size());
    for (std::size_t i = 0; i < records.size(); ++i) {
        scored.push_back({i, total_energy_kwh(records[i], model), records[i].accuracy_pct});
    }
    std::sort(scored.begin(), scored.end(), [](const Scored& a, const Scored& b) {
        if (a.total != b.total) return a.total < b.total;
        return a.index < b.index;
    });

    // Sweep in order of ascending total energy. A record survives iff no
    // cheaper record reaches its accuracy and nothing at equal cost beats it.
    std::vector<RegimeRecord> frontier;
    double best_cheaper_acc = -std::numeric_limits<double>::infinity();
    std::size_t i = 0;
    while (i < scored.size()) {
        std::size_t j = i;
        double group_max_acc = -std::numeric_limits<double>::infinity();
        while (j < scored.size() && scored[j].total == scored[i].total) {
            group_max_acc = std::max(group_max_acc, scored[j].acc);
            ++j;
        }
        for (std::size_t k = i; k < j; ++k) {
            if (scored[k].acc >= group_max_acc && scored[k].acc > best_cheaper_acc) {
                frontier.push_back(records[scored[k].index]);
            }
        }
        best_cheaper_acc = std::max(best_cheaper_acc, group_max_acc);
        i = j;
    }
    return frontier;
}

namespace {

RegimeRecord ref_row(Method m, std::string dataset, std::int64_t k, double data_fraction,
                     double label_fraction, double acc, double kwh) {
    RegimeRecord r;
    r.method = m;
    r.dataset = std::move(dataset);
    r.dataset_size_k = k;
    r.data_fraction = data_fraction;
    r.label_fraction = label_fraction;
    r.accuracy_pct = acc;
    r.train_energy_kwh = kwh;
    r.validate();
    return r;
}

std::vector<RegimeRecord> build_reference_table() {
    constexpr std::int64_t kCifar = 50'000;
    constexpr std::int64_t kEurosat = 22'000;
    std::vector<RegimeRecord> t;
    t.reserve(24);
    // CIFAR-10 block.
    t.push_back(ref_row(Method::Baseline, "cifar10", kCifar, 0.2, 1.0, 84.00, 0.26));
    t.push_back(ref_row(Method::Baseline, "cifar10", kCifar, 0.5, 1.0, 90.08, 0.63));
    t.push_back(ref_row(Method::Baseline, "cifar10", kCifar, 1.0, 1.0, 93.40, 1.26));
    t.push_back(ref_row(Method::SimCLR, "cifar10", kCifar, 0.2, 0.0, 78.24, 0.56));
    t.push_back(ref_row(Method::SimCLR, "cifar10", kCifar, 0.5, 0.0, 82.36, 1.26));
    t.push_back(ref_row(Method::SimCLR, "cifar10", kCifar, 1.0, 0.0, 90.36, 2.67));
    t.push_back(ref_row(Method::SupCon, "cifar10", kCifar, 0.2, 1.0, 85.54, 0.53));
    t.push_back(ref_row(Method::SupCon, "cifar10", kCifar, 0.5, 1.0, 92.15, 1.25));
    t.push_back(ref_row(Method::SupCon, "cifar10", kCifar, 1.0, 1.0, 94.37, 2.51));
    t.push_back(ref_row(Method::SemiSupervised, "cifar10", kCifar, 0.2, 0.5, 85.48, 0.45));
    t.push_back(ref_row(Method::SemiSupervised, "cifar10", kCifar, 0.5, 0.5, 91.41, 1.08));
    t.push_back(ref_row(Method::SemiSupervised, "cifar10", kCifar, 1.0, 0.5, 94.36, 2.14));
    // EuroSAT block.
    t.push_back(ref_row(Method::Baseline, "eurosat", kEurosat, 0.2, 1.0, 73.24, 0.41));
    t.push_back(ref_row(Method::Baseline, "eurosat", kEurosat, 0.5, 1.0, 93.40, 1.03));
    t.push_back(ref_row(Method::Baseline, "eurosat", kEurosat, 1.0, 1.0, 94.59, 2.05));
    t.push_back(ref_row(Method::SimCLR, "eurosat", kEurosat, 0.2, 0.0, 91.26, 0.25));
    t.push_back(ref_row(Method::SimCLR, "eurosat", kEurosat, 0.5, 0.0, 94.84, 0.61));
    t.push_back(ref_row(Method::SimCLR, "eurosat", kEurosat, 1.0, 0.0, 97.06, 1.14));
    t.push_back(ref_row(Method::SupCon, "eurosat", kEurosat, 0.2, 1.0, 93.69, 0.24));
    t.push_back(ref_row(Method::SupCon, "eurosat", kEurosat, 0.5, 1.0, 96.71, 0.61));
    t.push_back(ref_row(Method::SupCon, "eurosat", kEurosat, 1.0, 1.0, 97.92, 1.14));
    t.push_back(ref_row(Method::SemiSupervised, "eurosat", kEurosat, 0.2, 0.5, 94.37, 0.46));
    t.push_back(ref_row(Method::SemiSupervised, "eurosat", kEurosat, 0.5, 0.5, 96.50, 1.10));
    t.push_back(ref_row(Method::SemiSupervised, "eurosat", kEurosat, 1.0, 0.5, 97.85, 2.18));
    return t;
}

}  // namespace

const std::vector<RegimeRecord>& reference_table() {
    static const std::vector<RegimeRecord> table = build_reference_table();
    return table;
}

std::vector<RegimeRecord> read_records_jsonl(std::istream& in) {
    std::vector<RegimeRecord> records;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            records.push_back(RegimeRecord::from_json(nlohmann::json::parse(line)));
        } catch (const std::exception& e) {
            throw ParseError(std::string("bad regime record: ") + e.what(), lineno);
        }
    }
    return records;
}

std::vector<RegimeRecord> read_records_jsonl_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("cannot open records file: " + path);
    return read_records_jsonl(in);
}

void write_records_jsonl(std::ostream& out, const std::vector<RegimeRecord>& records) {
    for (const RegimeRecord& r : records) out << r.to_json().dump() << '\n';
}

std::string reference_table_csv() {
    const auto& table = reference_table();
    std::ostringstream out;
    out << "model,pct_data,cifar10_accuracy_pct,cifar10_energy_kwh,eurosat_accuracy_pct,eurosat_energy_kwh\n";
    const Method methods[] = {Method::Baseline, Method::SimCLR, Method::SupCon, Method::SemiSupervised};
    const double fractions[] = {0.2, 0.5, 1.0};
    auto find = [&table](Method m, const std::string& ds, double f) -> const RegimeRecord& {
        for (const auto& r : table) {
            if (r.method == m && r.dataset == ds && r.data_fraction == f) return r;
        }
        throw std::logic_error("reference table row missing");
    };
    for (Method m : methods) {
        for (double f : fractions) {
            const auto& c = find(m, "cifar10", f);
            const auto& e = find(m, "eurosat", f);
            std::string label(method_name(m));
            if (m == Method::SemiSupervised) label += "(50)";
            out << label << ',' << static_cast<int>(f * 100) << ',' << c.accuracy_pct << ','
                << c.train_energy_kwh << ',' << e.accuracy_pct << ',' << e.train_energy_kwh << '\n';
        }
    }
    return out.str();
}

}  // namespace joulebench::cost
