#include <cmath>
#include <numbers>
#include <set>
#include <sstream>

#include "doctest.h"
#include "joulebench/harness.hpp"
#include "joulebench/knn.hpp"
#include "oracles.hpp"

using namespace joulebench;
using namespace joulebench::harness;

namespace {

DatasetParams tiny_params() {
    DatasetParams p;
    p.classes = 3;
    p.per_class = 30;
    p.dim = 8;
    p.separation = 5.0;
    p.noise = 0.3;
    p.test_per_class = 10;
    p.seed = 7;
    return p;
}

ExperimentConfig smoke_config() {
    ExperimentConfig c = ExperimentConfig::defaults();
    c.dataset = tiny_params();
    c.train.epochs = 15;
    c.train.batch_size = 16;
    c.seeds = {1};
    return c;
}

double raw_knn_accuracy(const SyntheticDataset& train, const SyntheticDataset& test, int k, double tau) {
    knn::LabeledEmbeddingSet tr{train.points, train.labels};
    knn::LabeledEmbeddingSet te{test.points, test.labels};
    normalize_rows(tr.vectors);
    normalize_rows(te.vectors);
    return knn::knn_accuracy(tr, te, k, tau);
}

}  // namespace

TEST_CASE("make_dataset: zero noise puts points on the class centers") {
    auto p = tiny_params();
    p.noise = 0.0;
    p.per_class = 4;
    const auto d = make_dataset(p);
    REQUIRE(d.points.rows() == 12);
    for (int c = 0; c < p.classes; ++c) {
        const auto first = d.points.row(4 * c);
        CHECK(std::abs(norm(first) - p.separation) < 1e-9);  // centers sit on the sphere
        for (int i = 1; i < 4; ++i) {
            for (int k = 0; k < p.dim; ++k) CHECK(d.points(4 * c + i, k) == first[k]);
        }
    }
}

TEST_CASE("make_dataset: same seed reproduces bit-identical data") {
    const auto a = make_dataset(tiny_params());
    const auto b = make_dataset(tiny_params());
    CHECK(a.points == b.points);
    CHECK(a.labels == b.labels);
    auto different = tiny_params();
    different.seed = 8;
    CHECK(make_dataset(different).points.data() != a.points.data());
}

TEST_CASE("make_dataset: separable blobs classify near-perfectly on raw inputs") {
    auto p = tiny_params();
    p.classes = 10;
    p.per_class = 100;
    p.dim = 16;
    p.separation = 5.0;
    p.noise = 0.1;
    const auto train = make_dataset(p);
    const auto test = make_eval_dataset(p);
    CHECK(raw_knn_accuracy(train, test, 15, 0.1) >= 99.0);
    CHECK_THROWS_AS(make_dataset(DatasetParams{.classes = 1}), std::invalid_argument);
    CHECK_THROWS_AS(make_dataset(DatasetParams{.per_class = 0}), std::invalid_argument);
}

TEST_CASE("augment: zero sigma copies the point, same seed repeats") {
    const std::vector<double> point{1.0, -2.0, 3.0};
    Rng rng(5);
    const auto [a, b] = augment(point, 0.0, rng);
    CHECK(a == point);
    CHECK(b == point);

    Rng r1(9), r2(9);
    const auto v1 = augment(point, 0.05, r1);
    const auto v2 = augment(point, 0.05, r2);
    CHECK(v1.first == v2.first);
    CHECK(v1.second == v2.second);
    CHECK(v1.first != v1.second);  // independent draws
}

TEST_CASE("augment: mean absolute jitter matches the half-normal mean") {
    const double sigma = 0.05;
    const std::vector<double> point{0.0};
    Rng rng(13);
    double sum = 0.0;
    const int draws = 10'000;
    for (int i = 0; i < draws; ++i) {
        const auto [a, b] = augment(point, sigma, rng);
        sum += std::abs(a[0]) + std::abs(b[0]);
    }
    const double mean = sum / (2 * draws);
    const double expected = sigma * std::sqrt(2.0 / std::numbers::pi);  // ~0.0399
    CHECK(mean == doctest::Approx(expected).epsilon(0.03));
}

TEST_CASE("subsample_regime: full fraction permutes the whole dataset") {
    const auto d = make_dataset(tiny_params());
    const auto sub = subsample_regime(d, 1.0, 1.0, 3);
    REQUIRE(sub.indices.size() == d.points.rows());
    std::set<std::int32_t> unique(sub.indices.begin(), sub.indices.end());
    CHECK(unique.size() == d.points.rows());
    bool moved = false;
    for (std::size_t i = 0; i < sub.indices.size(); ++i) moved |= sub.indices[i] != static_cast<std::int32_t>(i);
    CHECK(moved);
    for (auto l : sub.labeled) CHECK(l == 1);
}

TEST_CASE("subsample_regime: stratified counts") {
    auto p = tiny_params();
    p.classes = 10;
    p.per_class = 100;
    const auto d = make_dataset(p);

    SUBCASE("divisible case: 20 per class") {
        const auto sub = subsample_regime(d, 0.2, 0.0, 11);
        std::vector<int> per_class(10, 0);
        for (auto i : sub.indices) ++per_class[d.labels[i]];
        for (int c : per_class) CHECK(c == 20);
        for (auto l : sub.labeled) CHECK(l == 0);
    }
    SUBCASE("50% data, 20% labels: 50 used and 10 labeled per class") {
        const auto sub = subsample_regime(d, 0.5, 0.2, 11);
        std::vector<int> used(10, 0), labeled(10, 0);
        for (std::size_t i = 0; i < sub.indices.size(); ++i) {
            ++used[d.labels[sub.indices[i]]];
            labeled[d.labels[sub.indices[i]]] += sub.labeled[i];
        }
        for (int c : used) CHECK(c == 50);
        for (int c : labeled) CHECK(c == 10);
    }
    SUBCASE("stratification within one of exact proportionality") {
        Rng rng(17);
        for (int trial = 0; trial < 50; ++trial) {
            const double df = 0.05 + 0.95 * rng.uniform01();
            const auto sub = subsample_regime(d, df, 0.0, rng.next_u64());
            std::vector<int> used(10, 0);
            for (auto i : sub.indices) ++used[d.labels[i]];
            for (int c : used) CHECK(std::abs(c - 100.0 * df) <= 1.0);
        }
    }
    SUBCASE("zero-sample fraction is an error") {
        CHECK_THROWS_AS(subsample_regime(d, 0.001, 0.0, 1), std::invalid_argument);
        CHECK_THROWS_AS(subsample_regime(d, 0.5, 0.001, 1), std::invalid_argument);
        CHECK_THROWS_AS(subsample_regime(d, 0.0, 0.0, 1), std::invalid_argument);
    }
}

TEST_CASE("encoder: parameter gradients match finite differences through the stack") {
    Rng rng(19);
    MlpEncoder encoder(4, 6, 3, rng);
    Matrix input(5, 4);
    for (double& v : input.data()) v = rng.normal();

    MlpEncoder::Cache cache;
    const Matrix z = encoder.forward(input, &cache);
    for (std::size_t r = 0; r < z.rows(); ++r) CHECK(std::abs(norm(z.row(r)) - 1.0) < 1e-12);

    // Scalar probe L = sum(c .* z), so dL/dz = c; backward() must push that
    // through the normalization and both layers.
    Matrix dz(z.rows(), z.cols());
    for (double& v : dz.data()) v = rng.normal();
    const auto grads = encoder.backward(cache, dz);

    auto probe = [&input, &dz](MlpEncoder& enc) {
        const Matrix out = enc.forward(input);
        double s = 0.0;
        for (std::size_t i = 0; i < out.data().size(); ++i) s += dz.data()[i] * out.data()[i];
        return s;
    };
    const double h = 1e-6;
    auto check_param = [&](double& param, double analytic) {
        const double saved = param;
        param = saved + h;
        const double up = probe(encoder);
        param = saved - h;
        const double down = probe(encoder);
        param = saved;
        const double fd = (up - down) / (2 * h);
        CHECK(std::abs(analytic - fd) <= 1e-4 * std::max({std::abs(analytic), std::abs(fd), 1e-6}));
    };
    for (std::size_t i = 0; i < encoder.w1().data().size(); ++i)
        check_param(encoder.w1().data()[i], grads.w1.data()[i]);
    for (std::size_t i = 0; i < encoder.w2().data().size(); ++i)
        check_param(encoder.w2().data()[i], grads.w2.data()[i]);
    for (std::size_t i = 0; i < encoder.b1().size(); ++i) check_param(encoder.b1()[i], grads.b1[i]);
    for (std::size_t i = 0; i < encoder.b2().size(); ++i) check_param(encoder.b2()[i], grads.b2[i]);
}

TEST_CASE("softmax head: loss and gradients match finite differences") {
    Rng rng(23);
    SoftmaxHead head(4, 3, rng);
    Matrix z(6, 4);
    for (double& v : z.data()) v = rng.normal();
    normalize_rows(z);
    std::vector<std::int32_t> targets{0, 1, 2, 0, 1, 2};

    Matrix dz, dw;
    std::vector<double> db;
    const double loss = head.loss_and_grad(z, targets, dz, dw, db);
    CHECK(loss > 0.0);

    const double h = 1e-6;
    Matrix dz_unused, dw_unused;
    std::vector<double> db_unused;
    for (std::size_t i = 0; i < z.rows(); ++i) {
        for (std::size_t c = 0; c < z.cols(); ++c) {
            const double saved = z(i, c);
            z(i, c) = saved + h;
            const double up = head.loss_and_grad(z, targets, dz_unused, dw_unused, db_unused);
            z(i, c) = saved - h;
            const double down = head.loss_and_grad(z, targets, dz_unused, dw_unused, db_unused);
            z(i, c) = saved;
            CHECK(dz(i, c) == doctest::Approx((up - down) / (2 * h)).epsilon(1e-4));
        }
    }
    for (std::size_t i = 0; i < head.weights().rows(); ++i) {
        for (std::size_t c = 0; c < head.weights().cols(); ++c) {
            const double saved = head.weights()(i, c);
            head.weights()(i, c) = saved + h;
            const double up = head.loss_and_grad(z, targets, dz_unused, dw_unused, db_unused);
            head.weights()(i, c) = saved - h;
            const double down = head.loss_and_grad(z, targets, dz_unused, dw_unused, db_unused);
            head.weights()(i, c) = saved;
            CHECK(dw(i, c) == doctest::Approx((up - down) / (2 * h)).epsilon(1e-4));
        }
    }
}

TEST_CASE("train_encoder: zero epochs reports untrained accuracy and zero energy") {
    auto cfg = smoke_config();
    cfg.train.epochs = 0;
    const auto train_data = make_dataset(cfg.dataset);
    const auto eval_data = make_eval_dataset(cfg.dataset);
    std::vector<std::unique_ptr<power::PowerSource>> sources;
    sources.push_back(power::make_source("synthetic:cpu:10"));
    power::MeterSession meter(std::move(sources), 0.1, "zero-epochs");
    const auto out = train_encoder(cfg, cfg.methods[2], 1.0, 1, train_data, eval_data, meter);
    CHECK(out.record.train_energy_kwh == 0.0);
    CHECK(out.record.accuracy_pct >= 0.0);
    CHECK(out.ledger.sample_count[0] == 0);
}

TEST_CASE("train_encoder: supcon improves the loss and keeps knn quality") {
    auto cfg = smoke_config();
    cfg.train.epochs = 60;
    const auto train_data = make_dataset(cfg.dataset);
    const auto eval_data = make_eval_dataset(cfg.dataset);
    const double raw_acc = raw_knn_accuracy(train_data, eval_data, cfg.knn.k, cfg.knn.tau);

    std::vector<std::unique_ptr<power::PowerSource>> sources;
    sources.push_back(power::make_source("synthetic:cpu:10"));
    power::MeterSession meter(std::move(sources), 0.1, "supcon-smoke");
    const auto out = train_encoder(cfg, cfg.methods[2], 1.0, 1, train_data, eval_data, meter);
    CHECK(out.final_epoch_loss < out.initial_epoch_loss);
    CHECK(out.record.accuracy_pct >= raw_acc - 5.0);
}

TEST_CASE("train_encoder: deterministic given identical config and seed") {
    const auto cfg = smoke_config();
    const auto train_data = make_dataset(cfg.dataset);
    const auto eval_data = make_eval_dataset(cfg.dataset);
    auto run = [&] {
        std::vector<std::unique_ptr<power::PowerSource>> sources;
        sources.push_back(power::make_source("synthetic:cpu:10"));
        power::MeterSession meter(std::move(sources), 0.1, "det");
        const auto out = train_encoder(cfg, cfg.methods[3], 0.5, 2, train_data, eval_data, meter);
        return out.record.to_json().dump();
    };
    CHECK(run() == run());
}

TEST_CASE("train_encoder: divergence carries the epoch") {
    auto cfg = smoke_config();
    cfg.train.epochs = 20;
    cfg.train.learning_rate = 1e280;  // guaranteed parameter blow-up
    const auto train_data = make_dataset(cfg.dataset);
    const auto eval_data = make_eval_dataset(cfg.dataset);
    std::vector<std::unique_ptr<power::PowerSource>> sources;
    sources.push_back(power::make_source("synthetic:cpu:10"));
    power::MeterSession meter(std::move(sources), 0.1, "diverge");
    try {
        train_encoder(cfg, cfg.methods[0], 1.0, 1, train_data, eval_data, meter);
        FAIL("expected DivergenceError");
    } catch (const DivergenceError& e) {
        CHECK(e.epoch >= 0);
        CHECK(e.epoch < 20);
    }
}

TEST_CASE("energy scales with epochs under a constant-power meter") {
    auto cfg = smoke_config();
    cfg.train.epochs = 10;
    const auto train_data = make_dataset(cfg.dataset);
    const auto eval_data = make_eval_dataset(cfg.dataset);
    auto energy_for = [&](int epochs) {
        auto c = cfg;
        c.train.epochs = epochs;
        std::vector<std::unique_ptr<power::PowerSource>> sources;
        sources.push_back(power::make_source("synthetic:cpu:25"));
        power::MeterSession meter(std::move(sources), 0.1, "scale");
        return train_encoder(c, c.methods[1], 1.0, 1, train_data, eval_data, meter)
            .record.train_energy_kwh;
    };
    const double e1 = energy_for(10);
    const double e2 = energy_for(20);
    CHECK(e2 == doctest::Approx(2.0 * e1).epsilon(0.1));
}

TEST_CASE("run_grid: counting, aggregates, and near-zero energy variance") {
    auto cfg = smoke_config();
    cfg.methods = {{cost::Method::SupCon, 1.0, 0.5, 0.9}};
    cfg.data_fractions = {0.5};
    cfg.seeds = {1, 2, 3, 4, 5};
    cfg.train.epochs = 8;
    const auto result = run_grid(cfg);
    CHECK(result.records.size() == 5);
    REQUIRE(result.aggregates.size() == 1);
    CHECK(result.failures.empty());
    const auto& agg = result.aggregates[0];
    CHECK(agg.label_kwh > 0.0);
    CHECK(agg.total_kwh == doctest::Approx(agg.train_kwh_mean + agg.label_kwh));

    // Constant-power meter: train energy identical across seeds.
    double mean = 0.0;
    for (const auto& r : result.records) mean += r.train_energy_kwh;
    mean /= 5.0;
    for (const auto& r : result.records) {
        CHECK(std::abs(r.train_energy_kwh - mean) <= 0.01 * mean);
    }
}

TEST_CASE("run_grid: twelve aggregate rows for the 4x3 grid") {
    auto cfg = smoke_config();
    cfg.train.epochs = 3;
    cfg.dataset.per_class = 20;
    cfg.seeds = {1};
    const auto result = run_grid(cfg);
    CHECK(result.aggregates.size() == 12);
    CHECK(result.records.size() == 12);

    std::ostringstream jsonl;
    write_records_jsonl(jsonl, result);
    std::size_t lines = 0;
    for (char ch : jsonl.str()) lines += ch == '\n';
    CHECK(lines == 12);
    const std::string csv = aggregate_csv(result);
    CHECK(csv.rfind("method,data_fraction,label_fraction,acc_mean,acc_std,train_kwh_mean,label_kwh,total_kwh\n", 0) == 0);
}

TEST_CASE("config json round trip") {
    const auto cfg = ExperimentConfig::defaults();
    const auto back = ExperimentConfig::from_json(cfg.to_json());
    CHECK(back.to_json() == cfg.to_json());
    CHECK_THROWS_AS(ExperimentConfig::from_json(nlohmann::json{{"methods", nlohmann::json::array()}}),
                    std::invalid_argument);
    auto bad = cfg.to_json();
    bad["train"]["decay_milestones"] = {0.9, 0.7};
    CHECK_THROWS_AS(ExperimentConfig::from_json(bad), std::invalid_argument);
}
