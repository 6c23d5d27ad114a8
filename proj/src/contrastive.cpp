#include "joulebench/contrastive.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

namespace joulebench::contrastive {

bool MultiviewBatch::fully_labeled() const {
    if (labels.size() != sample_count()) return false;
    return std::none_of(labels.begin(), labels.end(), [](std::int32_t l) { return l == kUnlabeled; });
}

void MultiviewBatch::validate() const {
    const std::size_t n_views = view_count();
    if (n_views < 2 || n_views % 2 != 0) throw std::invalid_argument("batch needs an even number (>= 2) of views");
    if (dim() == 0) throw std::invalid_argument("embeddings must have dimension >= 1");
    if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be > 0");
    if (pairing.size() != n_views || origin.size() != n_views)
        throw std::invalid_argument("pairing/origin size must match view count");

    const auto n = static_cast<std::int32_t>(n_views);
    std::vector<int> views_per_sample(sample_count(), 0);
    for (std::int32_t i = 0; i < n; ++i) {
        const std::int32_t j = pairing[i];
        if (j < 0 || j >= n) throw std::invalid_argument("pairing index out of range");
        if (j == i) throw std::invalid_argument("pairing must have no fixed points");
        if (pairing[j] != i) throw std::invalid_argument("pairing must be an involution");
        if (origin[i] < 0 || origin[i] >= static_cast<std::int32_t>(sample_count()))
            throw std::invalid_argument("origin index out of range");
        if (origin[i] != origin[j]) throw std::invalid_argument("paired views must share their origin");
        ++views_per_sample[origin[i]];
    }
    for (int c : views_per_sample) {
        if (c != 2) throw std::invalid_argument("every sample needs exactly two views");
    }
    if (!labels.empty() && labels.size() != sample_count())
        throw std::invalid_argument("labels must have one entry per sample");
}

MultiviewBatch MultiviewBatch::from_paired_views(Matrix views, double temperature,
                                                 std::vector<std::int32_t> labels) {
    MultiviewBatch b;
    b.embeddings = std::move(views);
    b.temperature = temperature;
    b.labels = std::move(labels);
    const std::size_t n = b.embeddings.rows();
    b.pairing.resize(n);
    b.origin.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        b.pairing[i] = static_cast<std::int32_t>(i % 2 == 0 ? i + 1 : i - 1);
        b.origin[i] = static_cast<std::int32_t>(i / 2);
    }
    b.validate();
    return b;
}

nlohmann::json MultiviewBatch::to_json() const {
    nlohmann::json j;
    auto emb = nlohmann::json::array();
    for (std::size_t i = 0; i < embeddings.rows(); ++i) {
        emb.push_back(std::vector<double>(embeddings.row(i).begin(), embeddings.row(i).end()));
    }
    j["embeddings"] = std::move(emb);
    j["pairing"] = pairing;
    j["origin"] = origin;
    if (!labels.empty()) j["labels"] = labels;
    j["tau"] = temperature;
    return j;
}

MultiviewBatch MultiviewBatch::from_json(const nlohmann::json& j) {
    const auto& emb = j.at("embeddings");
    if (!emb.is_array() || emb.empty()) throw std::invalid_argument("embeddings must be a nonempty array");
    const std::size_t rows = emb.size();
    const std::size_t cols = emb.at(0).size();
    Matrix m(rows, cols);
    for (std::size_t i = 0; i < rows; ++i) {
        const auto& row = emb.at(i);
        if (row.size() != cols) throw std::invalid_argument("ragged embeddings array");
        for (std::size_t c = 0; c < cols; ++c) m(i, c) = row.at(c).get<double>();
    }

    MultiviewBatch b;
    b.embeddings = std::move(m);
    b.temperature = j.value("tau", 0.1);
    if (j.contains("pairing")) {
        b.pairing = j.at("pairing").get<std::vector<std::int32_t>>();
        if (j.contains("origin")) {
            b.origin = j.at("origin").get<std::vector<std::int32_t>>();
        } else {
            // Assign sample ids by first appearance of each pair.
            b.origin.assign(rows, -1);
            std::int32_t next = 0;
            for (std::size_t i = 0; i < rows; ++i) {
                if (b.origin[i] >= 0) continue;
                const auto p = b.pairing.at(i);
                if (p < 0 || static_cast<std::size_t>(p) >= rows)
                    throw std::invalid_argument("pairing index out of range");
                b.origin[i] = next;
                b.origin[p] = next;
                ++next;
            }
        }
        if (j.contains("labels")) b.labels = j.at("labels").get<std::vector<std::int32_t>>();
        b.validate();
        return b;
    }
    std::vector<std::int32_t> labels;
    if (j.contains("labels")) labels = j.at("labels").get<std::vector<std::int32_t>>();
    return from_paired_views(std::move(b.embeddings), b.temperature, std::move(labels));
}

nlohmann::json LossResult::to_json() const {
    nlohmann::json j;
    j["value"] = value;
    auto g = nlohmann::json::array();
    for (std::size_t i = 0; i < gradient.rows(); ++i) {
        g.push_back(std::vector<double>(gradient.row(i).begin(), gradient.row(i).end()));
    }
    j["gradient"] = std::move(g);
    return j;
}

MultiviewBatch normalize(MultiviewBatch batch) {
    batch.validate();
    normalize_rows(batch.embeddings);
    return batch;
}

namespace {

// Loose unit-norm check; tolerant enough for finite-difference probes.
void require_normalized(const MultiviewBatch& batch) {
    for (std::size_t i = 0; i < batch.view_count(); ++i) {
        const double n = norm(batch.embeddings.row(i));
        if (std::abs(n - 1.0) > 1e-3)
            throw std::invalid_argument("batch embeddings must be unit-norm; call normalize() first");
    }
}

}  // namespace

AnchorSets build_sets(const MultiviewBatch& batch, PositiveMode mode) {
    batch.validate();
    if (mode == PositiveMode::Supervised && !batch.fully_labeled())
        throw MissingLabelError("supervised positive sets need a label for every sample");

    const auto n = static_cast<std::int32_t>(batch.view_count());
    AnchorSets sets;
    sets.others.resize(n);
    sets.positives.resize(n);
    for (std::int32_t i = 0; i < n; ++i) {
        sets.others[i].reserve(n - 1);
        for (std::int32_t a = 0; a < n; ++a) {
            if (a != i) sets.others[i].push_back(a);
        }
        if (mode == PositiveMode::SelfSupervised) {
            sets.positives[i] = {batch.pairing[i]};
        } else {
            const std::int32_t label = batch.labels[batch.origin[i]];
            for (std::int32_t a : sets.others[i]) {
                if (batch.labels[batch.origin[a]] == label) sets.positives[i].push_back(a);
            }
        }
    }
    return sets;
}

namespace {

// Shared kernel for both objectives:
//   L = sum_i [ logsumexp_{a != i}(z_i.z_a / tau) - (1/|P_i|) sum_{p in P_i} z_i.z_p / tau ]
// The log-sum-exp subtracts the max logit before exponentiating; tau = 0.1
// would otherwise overflow at similarity 1.
LossResult loss_with_positives(const MultiviewBatch& batch,
                               const std::vector<std::vector<std::int32_t>>& positives) {
    const std::size_t n = batch.view_count();
    const std::size_t d = batch.dim();
    const double tau = batch.temperature;
    const Matrix& z = batch.embeddings;

    LossResult result;
    result.gradient = Matrix(n, d);
    std::vector<double> logits(n);
    std::vector<double> softmax(n);

    for (std::size_t i = 0; i < n; ++i) {
        const auto zi = z.row(i);
        double max_logit = -std::numeric_limits<double>::infinity();
        for (std::size_t a = 0; a < n; ++a) {
            if (a == i) continue;
            logits[a] = dot(zi, z.row(a)) / tau;
            max_logit = std::max(max_logit, logits[a]);
        }
        double denom = 0.0;
        for (std::size_t a = 0; a < n; ++a) {
            if (a == i) continue;
            softmax[a] = std::exp(logits[a] - max_logit);
            denom += softmax[a];
        }
        const double lse = max_logit + std::log(denom);

        const auto& pos = positives[i];
        const double inv_p = 1.0 / static_cast<double>(pos.size());
        double mean_pos_logit = 0.0;
        for (std::int32_t p : pos) mean_pos_logit += logits[p];
        mean_pos_logit *= inv_p;
        result.value += lse - mean_pos_logit;

        for (std::size_t a = 0; a < n; ++a) {
            if (a == i) continue;
            softmax[a] /= denom;
            // dL_i/dz_i gets sigma_a * z_a / tau; dL_i/dz_a gets sigma_a * z_i / tau.
            axpy(softmax[a] / tau, z.row(a), result.gradient.row(i));
            axpy(softmax[a] / tau, zi, result.gradient.row(a));
        }
        for (std::int32_t p : pos) {
            axpy(-inv_p / tau, z.row(p), result.gradient.row(i));
            axpy(-inv_p / tau, zi, result.gradient.row(p));
        }
    }
    return result;
}

}  // namespace

LossResult info_nce_loss(const MultiviewBatch& batch) {
    batch.validate();
    require_normalized(batch);
    return loss_with_positives(batch, build_sets(batch, PositiveMode::SelfSupervised).positives);
}

LossResult supcon_loss(const MultiviewBatch& batch) {
    batch.validate();
    if (!batch.fully_labeled()) throw MissingLabelError("supcon_loss needs a label for every sample");
    require_normalized(batch);
    return loss_with_positives(batch, build_sets(batch, PositiveMode::Supervised).positives);
}

std::vector<PseudoLabel> pseudo_label(const Matrix& unlabeled, const Matrix& labeled,
                                      const std::vector<std::int32_t>& labels, double threshold,
                                      double tau) {
    if (labeled.rows() == 0) throw std::invalid_argument("pseudo_label needs a nonempty labeled set");
    if (labels.size() != labeled.rows()) throw std::invalid_argument("one label per labeled embedding required");
    if (unlabeled.rows() > 0 && unlabeled.cols() != labeled.cols())
        throw std::invalid_argument("embedding dimensions must match");
    if (threshold < 0.0 || threshold > 1.0) throw std::invalid_argument("threshold out of [0,1]");
    if (!(tau > 0.0)) throw std::invalid_argument("tau must be > 0");

    // Class ids in ascending order so argmax ties resolve to the lowest id.
    std::set<std::int32_t> class_set(labels.begin(), labels.end());
    const std::vector<std::int32_t> classes(class_set.begin(), class_set.end());

    std::vector<PseudoLabel> out(unlabeled.rows());
    std::vector<double> mean_sim(classes.size());
    std::vector<double> weight(classes.size());
    for (std::size_t u = 0; u < unlabeled.rows(); ++u) {
        std::fill(mean_sim.begin(), mean_sim.end(), 0.0);
        std::vector<int> count(classes.size(), 0);
        for (std::size_t l = 0; l < labeled.rows(); ++l) {
            const auto c = static_cast<std::size_t>(
                std::lower_bound(classes.begin(), classes.end(), labels[l]) - classes.begin());
            mean_sim[c] += dot(unlabeled.row(u), labeled.row(l));
            ++count[c];
        }
        double max_logit = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < classes.size(); ++c) {
            mean_sim[c] = mean_sim[c] / count[c] / tau;
            max_logit = std::max(max_logit, mean_sim[c]);
        }
        double denom = 0.0;
        for (std::size_t c = 0; c < classes.size(); ++c) {
            weight[c] = std::exp(mean_sim[c] - max_logit);
            denom += weight[c];
        }
        std::size_t best = 0;
        for (std::size_t c = 1; c < classes.size(); ++c) {
            if (weight[c] > weight[best]) best = c;
        }
        out[u].label = classes[best];
        out[u].confidence = weight[best] / denom;
        out[u].assigned = out[u].confidence >= threshold;
        if (!out[u].assigned) out[u].label = kUnlabeled;
    }
    return out;
}

namespace {

// Extracts the samples in `sample_ids` into a canonical-pairing sub-batch
// and records, per sub-view, the original view index for gradient scatter.
MultiviewBatch extract_subbatch(const MultiviewBatch& batch,
                                const std::vector<std::int32_t>& sample_ids,
                                const std::vector<std::array<std::int32_t, 2>>& views_of,
                                const std::vector<std::int32_t>& sub_labels,
                                std::vector<std::int32_t>& view_map) {
    Matrix views(sample_ids.size() * 2, batch.dim());
    view_map.clear();
    view_map.reserve(sample_ids.size() * 2);
    for (std::size_t t = 0; t < sample_ids.size(); ++t) {
        for (int v = 0; v < 2; ++v) {
            const std::int32_t orig = views_of[sample_ids[t]][v];
            std::copy(batch.embeddings.row(orig).begin(), batch.embeddings.row(orig).end(),
                      views.row(2 * t + v).begin());
            view_map.push_back(orig);
        }
    }
    return MultiviewBatch::from_paired_views(std::move(views), batch.temperature, sub_labels);
}

}  // namespace

LossResult semi_supervised_loss(const MultiviewBatch& batch, double threshold) {
    batch.validate();
    require_normalized(batch);
    if (!batch.has_labels()) throw std::invalid_argument("semi-supervised loss needs at least one labeled sample");
    const std::size_t n_samples = batch.sample_count();

    std::vector<std::array<std::int32_t, 2>> views_of(n_samples, {-1, -1});
    for (std::size_t i = 0; i < batch.view_count(); ++i) {
        auto& pair = views_of[batch.origin[i]];
        (pair[0] < 0 ? pair[0] : pair[1]) = static_cast<std::int32_t>(i);
    }

    std::vector<std::int32_t> labeled_samples, unlabeled_samples;
    for (std::size_t s = 0; s < n_samples; ++s) {
        (batch.labels[s] == kUnlabeled ? unlabeled_samples : labeled_samples)
            .push_back(static_cast<std::int32_t>(s));
    }
    if (labeled_samples.empty())
        throw std::invalid_argument("semi-supervised loss needs at least one labeled sample");

    std::vector<std::int32_t> effective_labels = batch.labels;
    if (!unlabeled_samples.empty()) {
        // Labeled side: every view of every labeled sample, carrying its
        // sample's label. Query side: one representative per unlabeled
        // sample, the normalized mean of its two views.
        Matrix labeled_views(labeled_samples.size() * 2, batch.dim());
        std::vector<std::int32_t> view_labels(labeled_samples.size() * 2);
        for (std::size_t t = 0; t < labeled_samples.size(); ++t) {
            for (int v = 0; v < 2; ++v) {
                const std::int32_t orig = views_of[labeled_samples[t]][v];
                std::copy(batch.embeddings.row(orig).begin(), batch.embeddings.row(orig).end(),
                          labeled_views.row(2 * t + v).begin());
                view_labels[2 * t + v] = batch.labels[labeled_samples[t]];
            }
        }
        Matrix queries(unlabeled_samples.size(), batch.dim());
        for (std::size_t t = 0; t < unlabeled_samples.size(); ++t) {
            const auto va = batch.embeddings.row(views_of[unlabeled_samples[t]][0]);
            const auto vb = batch.embeddings.row(views_of[unlabeled_samples[t]][1]);
            auto q = queries.row(t);
            for (std::size_t c = 0; c < batch.dim(); ++c) q[c] = va[c] + vb[c];
            const double qn = norm(q);
            if (qn > 1e-12) {
                for (double& x : q) x /= qn;
            } else {
                std::copy(va.begin(), va.end(), q.begin());  // antipodal views; fall back to one
            }
        }
        const auto assignments =
            pseudo_label(queries, labeled_views, view_labels, threshold, batch.temperature);
        for (std::size_t t = 0; t < unlabeled_samples.size(); ++t) {
            if (assignments[t].assigned) effective_labels[unlabeled_samples[t]] = assignments[t].label;
        }
    }

    std::vector<std::int32_t> supervised_samples;
    std::vector<std::int32_t> plain_samples;
    for (std::size_t s = 0; s < n_samples; ++s) {
        (effective_labels[s] == kUnlabeled ? plain_samples : supervised_samples)
            .push_back(static_cast<std::int32_t>(s));
    }

    LossResult total;
    total.gradient = Matrix(batch.view_count(), batch.dim());
    std::vector<std::int32_t> view_map;

    {
        std::vector<std::int32_t> sub_labels(supervised_samples.size());
        for (std::size_t t = 0; t < supervised_samples.size(); ++t)
            sub_labels[t] = effective_labels[supervised_samples[t]];
        const MultiviewBatch sub = extract_subbatch(batch, supervised_samples, views_of, sub_labels, view_map);
        const LossResult part = supcon_loss(sub);
        total.value += part.value;
        for (std::size_t i = 0; i < view_map.size(); ++i)
            axpy(1.0, part.gradient.row(i), total.gradient.row(view_map[i]));
    }
    if (!plain_samples.empty()) {
        const MultiviewBatch sub = extract_subbatch(batch, plain_samples, views_of, {}, view_map);
        const LossResult part = info_nce_loss(sub);
        total.value += part.value;
        for (std::size_t i = 0; i < view_map.size(); ++i)
            axpy(1.0, part.gradient.row(i), total.gradient.row(view_map[i]));
    }
    return total;
}

}  // namespace joulebench::contrastive
