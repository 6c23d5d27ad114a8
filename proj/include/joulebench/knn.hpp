#pragma once

// Non-parametric representation quality: similarity-weighted k-nearest
// neighbour voting in embedding space.

#include <cstdint>
#include <vector>

#include "joulebench/matrix.hpp"

namespace joulebench::knn {

struct LabeledEmbeddingSet {
    Matrix vectors;                     // M x d, unit-norm rows
    std::vector<std::int32_t> labels;   // M class ids

    void validate() const;
};

// For each test vector: take the k most cosine-similar train vectors, score
// each class by sum of exp(sim/tau) over its neighbours, predict the argmax
// (ties to the lowest class id). Returns 100 * correct / M_test.
double knn_accuracy(const LabeledEmbeddingSet& train, const LabeledEmbeddingSet& test,
                    std::size_t k, double tau);

// The per-query predictions behind knn_accuracy, for diagnostics.
std::vector<std::int32_t> knn_predict(const LabeledEmbeddingSet& train, const Matrix& queries,
                                      std::size_t k, double tau);

}  // namespace joulebench::knn
