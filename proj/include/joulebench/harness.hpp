#pragma once

// Desk-scale instrumented training: synthetic Gaussian-blob datasets, a
// small MLP encoder trained with the contrastive objectives (or a softmax
// head for the cross-entropy baseline), per-epoch energy metering, and a
// grid runner that sweeps methods x data fractions x seeds.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "joulebench/cost_model.hpp"
#include "joulebench/knn.hpp"
#include "joulebench/matrix.hpp"
#include "joulebench/power_meter.hpp"
#include "joulebench/rng.hpp"

namespace joulebench::harness {

// Deterministic sub-stream derivation (splitmix64 step over seed ^ tag).
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag);

struct DatasetParams {
    int classes = 10;
    int per_class = 100;
    int dim = 16;
    double separation = 4.0;  // radius of the sphere the class centers sit on
    double noise = 0.8;       // per-coordinate sigma around the center
    int test_per_class = 20;
    std::uint64_t seed = 1;
};

struct SyntheticDataset {
    Matrix points;
    std::vector<std::int32_t> labels;
    int classes = 0;
};

// Gaussian blobs: class centers drawn deterministically from the seed on a
// sphere of radius `separation`, points = center + N(0, noise^2 I).
SyntheticDataset make_dataset(const DatasetParams& params);
// Held-out points from the same centers with independent noise draws.
SyntheticDataset make_eval_dataset(const DatasetParams& params);

// Two jittered views of one point: each view = point + N(0, sigma^2 I).
std::pair<std::vector<double>, std::vector<double>> augment(std::span<const double> point,
                                                            double sigma, Rng& rng);

struct Subsample {
    std::vector<std::int32_t> indices;  // into the dataset, order permuted by seed
    std::vector<std::uint8_t> labeled;  // parallel to indices
};

// Class-stratified subset (within +-1 per class of exact proportionality)
// and a likewise-stratified labeled mask inside it.
Subsample subsample_regime(const SyntheticDataset& dataset, double data_fraction,
                           double label_fraction, std::uint64_t seed);

// Two-layer perceptron d_in -> hidden (tanh) -> d_emb with unit-norm output.
// Backprop is manual and composes the loss kernels' gradients (taken with
// respect to the normalized embeddings) with the normalization Jacobian.
class MlpEncoder {
public:
    MlpEncoder(std::size_t input_dim, std::size_t hidden_dim, std::size_t embed_dim, Rng& rng);

    struct Cache {
        Matrix input;
        Matrix hidden;      // tanh activations
        Matrix raw_embed;   // pre-normalization embeddings
        std::vector<double> embed_norm;
    };
    struct Gradients {
        Matrix w1, w2;
        std::vector<double> b1, b2;
    };

    // Returns unit-norm embeddings, one row per input row.
    Matrix forward(const Matrix& input, Cache* cache = nullptr) const;
    Gradients backward(const Cache& cache, const Matrix& d_embedding) const;
    void apply_gradients(const Gradients& g, double learning_rate);

    std::size_t input_dim() const { return w1_.cols(); }
    std::size_t embed_dim() const { return w2_.rows(); }

    Matrix& w1() { return w1_; }
    Matrix& w2() { return w2_; }
    std::vector<double>& b1() { return b1_; }
    std::vector<double>& b2() { return b2_; }

private:
    Matrix w1_;  // hidden x input
    std::vector<double> b1_;
    Matrix w2_;  // embed x hidden
    std::vector<double> b2_;
};

// Linear softmax classifier head for the cross-entropy baseline.
class SoftmaxHead {
public:
    SoftmaxHead(std::size_t embed_dim, std::size_t classes, Rng& rng);

    // Mean cross-entropy over rows. Fills d_embedding (dL/dz) and the
    // parameter gradients.
    double loss_and_grad(const Matrix& embeddings, const std::vector<std::int32_t>& targets,
                         Matrix& d_embedding, Matrix& d_weights, std::vector<double>& d_bias) const;
    void apply_gradients(const Matrix& d_weights, const std::vector<double>& d_bias,
                         double learning_rate);

    const Matrix& weights() const { return weights_; }
    Matrix& weights() { return weights_; }

private:
    Matrix weights_;  // classes x embed
    std::vector<double> bias_;
};

struct MethodSpec {
    cost::Method method = cost::Method::SimCLR;
    double label_fraction = 0.0;
    double tau = 0.1;
    double pseudo_threshold = 0.9;  // semi-supervised only
};

struct TrainParams {
    int epochs = 200;
    int batch_size = 32;
    double learning_rate = 0.3;
    std::vector<double> decay_milestones{0.7, 0.8, 0.9};  // fractions of total epochs
    double decay_factor = 0.1;
    double augment_noise = 0.3;
};

struct MeterParams {
    std::vector<std::string> sources{"synthetic:cpu:35", "synthetic:gpu:80", "mem:2"};
    double interval_s = 0.1;
};

struct KnnParams {
    int k = 15;
    double tau = 0.1;
};

struct ExperimentConfig {
    DatasetParams dataset;
    int encoder_hidden = 32;
    int encoder_embed = 8;
    TrainParams train;
    std::vector<MethodSpec> methods;
    std::vector<double> data_fractions{0.2, 0.5, 1.0};
    std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
    MeterParams meter;
    cost::LabelingCostModel labeling{30.0, 10.0};
    KnnParams knn;

    void validate() const;
    nlohmann::json to_json() const;
    static ExperimentConfig from_json(const nlohmann::json& j);
    static ExperimentConfig defaults();  // the full 4-method desk grid
};

struct TrainOutcome {
    MlpEncoder encoder;
    cost::RegimeRecord record;
    power::EnergyLedger ledger;
    double initial_epoch_loss = 0.0;
    double final_epoch_loss = 0.0;
};

// Trains one (method, data fraction, seed) cell, ticking the meter session
// once per epoch, and fills a RegimeRecord with the kNN accuracy and the
// ledger converted to kWh. Throws DivergenceError on a non-finite loss.
TrainOutcome train_encoder(const ExperimentConfig& config, const MethodSpec& method,
                           double data_fraction, std::uint64_t seed,
                           const SyntheticDataset& train_data, const SyntheticDataset& eval_data,
                           power::MeterSession& meter);

struct AggregateRow {
    cost::Method method;
    double data_fraction = 0.0;
    double label_fraction = 0.0;
    double acc_mean = 0.0;
    double acc_std = 0.0;
    double train_kwh_mean = 0.0;
    double label_kwh = 0.0;
    double total_kwh = 0.0;
};

struct CellFailure {
    cost::Method method;
    double data_fraction = 0.0;
    std::uint64_t seed = 0;
    std::string message;
};

struct GridResult {
    std::vector<cost::RegimeRecord> records;     // one per successful (config, seed) cell
    std::vector<AggregateRow> aggregates;        // one per (method, data fraction)
    std::vector<CellFailure> failures;
};

// Executes every (method, data fraction, seed) cell; a diverging cell is
// recorded and skipped, the grid continues.
GridResult run_grid(const ExperimentConfig& config);

void write_records_jsonl(std::ostream& out, const GridResult& result);
std::string aggregate_csv(const GridResult& result);

}  // namespace joulebench::harness
