#pragma once

// Labeling-energy model, per-regime total cost, break-even and Pareto
// analysis over regime records. Energy is carried in joules internally;
// kWh appears only at I/O boundaries (3.6e6 J per kWh).

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "joulebench/power_meter.hpp"

namespace joulebench::cost {

using power::kJoulesPerKwh;

// Annotation cost parameters: desk power draw and seconds per label.
struct LabelingCostModel {
    LabelingCostModel(double power_watts, double seconds_per_label);

    double power_watts;
    double seconds_per_label;
};

enum class Method { Baseline, SimCLR, SupCon, SemiSupervised };

std::string_view method_name(Method m);
Method method_from_name(std::string_view name);

// One (method, data fraction, label fraction) result: accuracy plus energy
// breakdown. label_fraction is the labeled share of the *used* subset.
struct RegimeRecord {
    Method method = Method::Baseline;
    std::string dataset;  // tag only; not used by the math
    std::int64_t dataset_size_k = 0;  // full training-set size K
    double data_fraction = 1.0;
    double label_fraction = 1.0;
    double accuracy_pct = 0.0;
    double train_energy_kwh = 0.0;
    double labeling_energy_kwh = 0.0;
    std::optional<std::int64_t> seed;
    std::optional<power::ComponentEnergy> train_joules_by_component;

    void validate() const;  // throws std::invalid_argument

    nlohmann::json to_json() const;
    static RegimeRecord from_json(const nlohmann::json& j);
};

// Number of labeled samples: round(K * data_fraction * label_fraction).
std::int64_t labeled_count(const RegimeRecord& record);

// Eq.-style labeling energy: watts * count * seconds per label.
double labeling_energy_joules(const LabelingCostModel& model, std::int64_t labeled_count);
double labeling_energy_kwh(const LabelingCostModel& model, std::int64_t labeled_count);

// Train + labeling energy in kWh; also writes the labeling term back into
// record.labeling_energy_kwh.
double total_energy_kwh(RegimeRecord& record, const LabelingCostModel& model);
double total_energy_kwh(const RegimeRecord& record, const LabelingCostModel& model);

// Per-label seconds at which the labeled method's total energy equals the
// unlabeled method's. nullopt when the labeled method's training energy
// alone already exceeds the unlabeled total.
std::optional<double> breakeven_label_seconds(const RegimeRecord& labeled_rec,
                                              const RegimeRecord& unlabeled_rec, double power_watts);

// All records not weakly dominated in (accuracy up, total energy down),
// ordered by ascending total energy.
std::vector<RegimeRecord> pareto_frontier(const std::vector<RegimeRecord>& records,
                                          const LabelingCostModel& model);

// Published reference results the analyzer ships with: 4 methods x 3 data
// fractions x 2 datasets. Semi-supervised rows use a 50% label fraction.
const std::vector<RegimeRecord>& reference_table();

// JSON Lines I/O, one RegimeRecord per line.
std::vector<RegimeRecord> read_records_jsonl(std::istream& in);
std::vector<RegimeRecord> read_records_jsonl_file(const std::string& path);
void write_records_jsonl(std::ostream& out, const std::vector<RegimeRecord>& records);

// Reference table as CSV in published column order (per-dataset blocks
// side by side).
std::string reference_table_csv();

}  // namespace joulebench::cost
