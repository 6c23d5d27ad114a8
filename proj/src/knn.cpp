#include "joulebench/knn.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>

namespace joulebench::knn {

void LabeledEmbeddingSet::validate() const {
    if (vectors.rows() == 0) throw std::invalid_argument("embedding set must be nonempty");
    if (labels.size() != vectors.rows()) throw std::invalid_argument("one label per vector required");
    for (std::size_t i = 0; i < vectors.rows(); ++i) {
        if (std::abs(norm(vectors.row(i)) - 1.0) > 1e-6)
            throw std::invalid_argument("embedding vectors must be unit-norm");
    }
}

std::vector<std::int32_t> knn_predict(const LabeledEmbeddingSet& train, const Matrix& queries,
                                      std::size_t k, double tau) {
    train.validate();
    if (queries.rows() == 0) throw std::invalid_argument("query set must be nonempty");
    if (queries.cols() != train.vectors.cols()) throw std::invalid_argument("dimension mismatch");
    if (k < 1 || k > train.vectors.rows()) throw std::invalid_argument("k must be in [1, train size]");
    if (!(tau > 0.0)) throw std::invalid_argument("tau must be > 0");

    std::vector<std::int32_t> predictions(queries.rows());
    std::vector<std::size_t> order(train.vectors.rows());
    std::vector<double> sims(train.vectors.rows());
    for (std::size_t q = 0; q < queries.rows(); ++q) {
        for (std::size_t t = 0; t < train.vectors.rows(); ++t)
            sims[t] = dot(queries.row(q), train.vectors.row(t));
        std::iota(order.begin(), order.end(), 0);
        // Similarity ties resolve to the lower train index, so the neighbour
        // choice (and hence the prediction) is deterministic.
        std::partial_sort(order.begin(), order.begin() + k, order.end(),
                          [&sims](std::size_t a, std::size_t b) {
                              if (sims[a] != sims[b]) return sims[a] > sims[b];
                              return a < b;
                          });
        // exp((sim - max)/tau) leaves the per-class score ratios unchanged
        // and keeps tiny tau from overflowing.
        const double max_sim = sims[order[0]];
        std::map<std::int32_t, double> score;
        for (std::size_t n = 0; n < k; ++n) {
            const std::size_t t = order[n];
            score[train.labels[t]] += std::exp((sims[t] - max_sim) / tau);
        }
        auto best = score.begin();
        for (auto it = std::next(score.begin()); it != score.end(); ++it) {
            if (it->second > best->second) best = it;  // ties keep the lowest class id
        }
        predictions[q] = best->first;
    }
    return predictions;
}

double knn_accuracy(const LabeledEmbeddingSet& train, const LabeledEmbeddingSet& test,
                    std::size_t k, double tau) {
    test.validate();
    const auto predictions = knn_predict(train, test.vectors, k, tau);
    std::size_t correct = 0;
    for (std::size_t q = 0; q < predictions.size(); ++q) {
        if (predictions[q] == test.labels[q]) ++correct;
    }
    return 100.0 * static_cast<double>(correct) / static_cast<double>(test.labels.size());
}

}  // namespace joulebench::knn
