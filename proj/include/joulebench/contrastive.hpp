#pragma once

// Contrastive objectives over a batch of paired views: the self-supervised
// log-ratio loss (anchor vs. its augmented view), its supervised variant
// with label-defined positive sets, analytic gradients for both, and a
// confidence-threshold pseudo-labeling mode that bridges the two.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "joulebench/errors.hpp"
#include "joulebench/matrix.hpp"

namespace joulebench::contrastive {

inline constexpr std::int32_t kUnlabeled = -1;

// 2N embeddings (two augmented views per sample) with the view-pairing map,
// per-view sample origin, optional per-sample labels, and temperature.
struct MultiviewBatch {
    Matrix embeddings;                  // 2N x d
    std::vector<std::int32_t> pairing;  // j(i): the other view of the same sample
    std::vector<std::int32_t> origin;   // view index -> sample index in [0, N)
    std::vector<std::int32_t> labels;   // per sample; kUnlabeled entries allowed; empty = none
    double temperature = 0.1;

    std::size_t view_count() const { return embeddings.rows(); }
    std::size_t sample_count() const { return embeddings.rows() / 2; }
    std::size_t dim() const { return embeddings.cols(); }
    bool has_labels() const { return !labels.empty(); }
    bool fully_labeled() const;

    // Checks the structural invariants: pairing is an involution without
    // fixed points, both views of a pair share their origin, every sample
    // has exactly two views, temperature > 0.
    void validate() const;

    // Views 2k and 2k+1 are the two views of sample k.
    static MultiviewBatch from_paired_views(Matrix views, double temperature,
                                            std::vector<std::int32_t> labels = {});

    nlohmann::json to_json() const;
    static MultiviewBatch from_json(const nlohmann::json& j);
};

struct LossResult {
    double value = 0.0;
    Matrix gradient;  // dL/dz, same shape as embeddings (z = normalized embeddings)

    nlohmann::json to_json() const;
};

// Candidate and positive sets per anchor. others[i] is every view except i;
// positives[i] is {j(i)} in self-supervised mode, or every other view whose
// sample shares the anchor's label in supervised mode (always includes j(i)).
struct AnchorSets {
    std::vector<std::vector<std::int32_t>> others;
    std::vector<std::vector<std::int32_t>> positives;
};

enum class PositiveMode { SelfSupervised, Supervised };

// Returns the batch with every embedding scaled to unit L2 norm.
MultiviewBatch normalize(MultiviewBatch batch);

AnchorSets build_sets(const MultiviewBatch& batch, PositiveMode mode);

// Self-supervised objective, summed over all 2N anchors (no averaging).
LossResult info_nce_loss(const MultiviewBatch& batch);

// Supervised objective with the 1/|P(i)| average outside the log. Requires
// labels for every sample. Equals info_nce_loss when all labels differ.
LossResult supcon_loss(const MultiviewBatch& batch);

struct PseudoLabel {
    std::int32_t label = kUnlabeled;
    double confidence = 0.0;
    bool assigned = false;
};

// Assigns each unlabeled embedding the argmax class of a softmax over
// per-class mean cosine similarities (scaled by 1/tau), if that confidence
// reaches the threshold. Ties go to the lowest class id.
std::vector<PseudoLabel> pseudo_label(const Matrix& unlabeled, const Matrix& labeled,
                                      const std::vector<std::int32_t>& labels, double threshold,
                                      double tau);

// Pseudo-labels the unlabeled samples against the labeled ones, then applies
// the supervised loss to the sub-batch of (true or pseudo) labeled samples
// and the self-supervised loss to the rest; the two terms are summed with
// weight 1 each and the gradients scattered back to the full batch.
LossResult semi_supervised_loss(const MultiviewBatch& batch, double threshold);

}  // namespace joulebench::contrastive
