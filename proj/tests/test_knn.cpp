#include <cmath>

#include "doctest.h"
#include "joulebench/knn.hpp"
#include "joulebench/rng.hpp"
#include "oracles.hpp"

using namespace joulebench;
using namespace joulebench::knn;

namespace {

LabeledEmbeddingSet unit_set(Matrix m, std::vector<std::int32_t> labels) {
    normalize_rows(m);
    return {std::move(m), std::move(labels)};
}

LabeledEmbeddingSet random_set(Rng& rng, std::size_t n, std::size_t d, std::int32_t classes) {
    Matrix m(n, d);
    std::vector<std::int32_t> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto v = rng.unit_vector(d);
        std::copy(v.begin(), v.end(), m.row(i).begin());
        labels[i] = static_cast<std::int32_t>(rng.uniform_index(classes));
    }
    return {std::move(m), std::move(labels)};
}

}  // namespace

TEST_CASE("knn: self-match at k=1 is 100%") {
    Rng rng(71);
    const auto set = random_set(rng, 20, 5, 4);
    CHECK(knn_accuracy(set, set, 1, 0.1) == 100.0);
}

TEST_CASE("knn: single-class train set predicts that class everywhere") {
    Rng rng(73);
    auto train = random_set(rng, 10, 4, 3);
    std::fill(train.labels.begin(), train.labels.end(), 2);
    const auto test = random_set(rng, 40, 4, 3);
    std::size_t with_class = 0;
    for (auto l : test.labels) with_class += l == 2;
    const double expected = 100.0 * static_cast<double>(with_class) / 40.0;
    CHECK(knn_accuracy(train, test, 3, 0.1) == doctest::Approx(expected));
}

TEST_CASE("knn: two noisy clusters, means classified by k=3 vote") {
    Rng rng(79);
    Matrix train(10, 2);
    std::vector<std::int32_t> labels(10);
    for (int i = 0; i < 5; ++i) {
        train(i, 0) = 1.0 + 0.1 * rng.normal();
        train(i, 1) = 0.1 * rng.normal();
        labels[i] = 0;
        train(5 + i, 0) = -1.0 + 0.1 * rng.normal();
        train(5 + i, 1) = 0.1 * rng.normal();
        labels[5 + i] = 1;
    }
    auto train_set = unit_set(std::move(train), labels);
    auto test_set = unit_set(Matrix(2, 2, {1, 0, -1, 0}), {0, 1});
    CHECK(knn_accuracy(train_set, test_set, 3, 0.1) == 100.0);

    // Every prediction agrees with the exhaustive-enumeration oracle.
    const auto predictions = knn_predict(train_set, test_set.vectors, 3, 0.1);
    for (std::size_t q = 0; q < predictions.size(); ++q) {
        const std::vector<double> query(test_set.vectors.row(q).begin(), test_set.vectors.row(q).end());
        CHECK(predictions[q] ==
              oracles::knn_vote_brute_force(train_set.vectors, train_set.labels, query, 3, 0.1));
    }
}

TEST_CASE("knn: random sets agree with the brute-force oracle") {
    Rng rng(83);
    for (int trial = 0; trial < 30; ++trial) {
        const auto train = random_set(rng, 3 + rng.uniform_index(20), 4, 3);
        const auto test = random_set(rng, 10, 4, 3);
        const std::size_t k = 1 + rng.uniform_index(train.vectors.rows());
        const double tau = 0.05 + rng.uniform01();
        const auto predictions = knn_predict(train, test.vectors, k, tau);
        for (std::size_t q = 0; q < predictions.size(); ++q) {
            const std::vector<double> query(test.vectors.row(q).begin(), test.vectors.row(q).end());
            CHECK(predictions[q] ==
                  oracles::knn_vote_brute_force(train.vectors, train.labels, query, k, tau));
        }
    }
}

TEST_CASE("knn: invariant to a common orthogonal transform") {
    Rng rng(89);
    const std::size_t d = 4;
    auto train = random_set(rng, 25, d, 3);
    auto test = random_set(rng, 15, d, 3);
    const auto before = knn_predict(train, test.vectors, 5, 0.1);

    // Householder reflection: Q = I - 2 v v^T.
    const auto v = rng.unit_vector(d);
    auto reflect = [&v, d](Matrix& m) {
        for (std::size_t i = 0; i < m.rows(); ++i) {
            const double proj = dot(m.row(i), std::span<const double>(v));
            for (std::size_t c = 0; c < d; ++c) m(i, c) -= 2.0 * proj * v[c];
        }
    };
    reflect(train.vectors);
    reflect(test.vectors);
    CHECK(knn_predict(train, test.vectors, 5, 0.1) == before);
}

TEST_CASE("knn: huge tau with k = M approaches majority vote") {
    Rng rng(97);
    auto train = random_set(rng, 30, 4, 3);
    // Force a clear majority class.
    for (std::size_t i = 0; i < 20; ++i) train.labels[i] = 1;
    const auto test = random_set(rng, 10, 4, 3);
    const auto predictions = knn_predict(train, test.vectors, train.vectors.rows(), 1e6);
    for (auto p : predictions) CHECK(p == 1);
}

TEST_CASE("knn: deterministic tie-breaking to the lowest class id") {
    // Two train points at the same similarity to the query, different classes.
    auto train = unit_set(Matrix(2, 2, {1, 1, 1, -1}), {5, 2});
    const Matrix query(1, 2, {1, 0});
    CHECK(knn_predict(train, query, 2, 0.7)[0] == 2);
}

TEST_CASE("knn: accuracy bounds and error cases") {
    Rng rng(101);
    const auto train = random_set(rng, 12, 3, 4);
    const auto test = random_set(rng, 9, 3, 4);
    const double acc = knn_accuracy(train, test, 4, 0.2);
    CHECK(acc >= 0.0);
    CHECK(acc <= 100.0);
    CHECK(knn_accuracy(train, test, 4, 0.2) == acc);  // deterministic

    CHECK_THROWS_AS(knn_accuracy(train, test, 0, 0.2), std::invalid_argument);
    CHECK_THROWS_AS(knn_accuracy(train, test, 13, 0.2), std::invalid_argument);
    CHECK_THROWS_AS(knn_accuracy(train, test, 4, 0.0), std::invalid_argument);
    LabeledEmbeddingSet empty;
    CHECK_THROWS_AS(knn_accuracy(empty, test, 1, 0.2), std::invalid_argument);
    CHECK_THROWS_AS(knn_accuracy(train, empty, 1, 0.2), std::invalid_argument);

    auto bad = train;
    bad.vectors(0, 0) *= 2.0;
    CHECK_THROWS_AS(knn_accuracy(bad, test, 1, 0.2), std::invalid_argument);
}
