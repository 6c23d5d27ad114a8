#include "joulebench/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "joulebench/contrastive.hpp"

namespace joulebench::harness {

namespace contr = joulebench::contrastive;

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag) {
    std::uint64_t z = seed ^ (tag * 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

namespace {

Matrix draw_centers(const DatasetParams& p, Rng& rng) {
    Matrix centers(p.classes, p.dim);
    for (int c = 0; c < p.classes; ++c) {
        const auto dir = rng.unit_vector(p.dim);
        for (int k = 0; k < p.dim; ++k) centers(c, k) = p.separation * dir[k];
    }
    return centers;
}

SyntheticDataset make_blobs(const DatasetParams& p, int per_class, Rng& noise_rng) {
    Rng center_rng(p.seed);
    const Matrix centers = draw_centers(p, center_rng);
    SyntheticDataset d;
    d.classes = p.classes;
    d.points = Matrix(static_cast<std::size_t>(p.classes) * per_class, p.dim);
    d.labels.resize(d.points.rows());
    std::size_t row = 0;
    for (int c = 0; c < p.classes; ++c) {
        for (int i = 0; i < per_class; ++i, ++row) {
            for (int k = 0; k < p.dim; ++k) d.points(row, k) = centers(c, k) + p.noise * noise_rng.normal();
            d.labels[row] = c;
        }
    }
    return d;
}

}  // namespace

SyntheticDataset make_dataset(const DatasetParams& p) {
    if (p.classes < 2) throw std::invalid_argument("need at least 2 classes");
    if (p.per_class <= 0) throw std::invalid_argument("per_class must be positive");
    if (p.noise < 0.0) throw std::invalid_argument("noise must be >= 0");
    Rng noise_rng(mix_seed(p.seed, 0x7261776e6f697365ULL));
    return make_blobs(p, p.per_class, noise_rng);
}

SyntheticDataset make_eval_dataset(const DatasetParams& p) {
    if (p.classes < 2) throw std::invalid_argument("need at least 2 classes");
    if (p.test_per_class <= 0) throw std::invalid_argument("test_per_class must be positive");
    Rng noise_rng(mix_seed(p.seed, 0x6576616c6e6f6973ULL));
    return make_blobs(p, p.test_per_class, noise_rng);
}

std::pair<std::vector<double>, std::vector<double>> augment(std::span<const double> point,
                                                            double sigma, Rng& rng) {
    std::vector<double> a(point.begin(), point.end());
    std::vector<double> b(point.begin(), point.end());
    for (double& x : a) x += sigma * rng.normal();
    for (double& x : b) x += sigma * rng.normal();
    return {std::move(a), std::move(b)};
}

Subsample subsample_regime(const SyntheticDataset& dataset, double data_fraction,
                           double label_fraction, std::uint64_t seed) {
    if (!(data_fraction > 0.0) || data_fraction > 1.0)
        throw std::invalid_argument("data_fraction must be in (0,1]");
    if (label_fraction < 0.0 || label_fraction > 1.0)
        throw std::invalid_argument("label_fraction must be in [0,1]");

    std::vector<std::vector<std::int32_t>> by_class(dataset.classes);
    for (std::size_t i = 0; i < dataset.labels.size(); ++i)
        by_class[dataset.labels[i]].push_back(static_cast<std::int32_t>(i));

    Rng rng(mix_seed(seed, 0x73756273616d706cULL));
    std::vector<std::pair<std::int32_t, std::uint8_t>> picked;
    for (auto& members : by_class) {
        const auto take = static_cast<std::size_t>(
            std::llround(static_cast<double>(members.size()) * data_fraction));
        if (take == 0) throw std::invalid_argument("data_fraction yields zero samples in a class");
        rng.shuffle(members);
        std::size_t labeled = static_cast<std::size_t>(
            std::llround(static_cast<double>(take) * label_fraction));
        if (label_fraction > 0.0 && labeled == 0)
            throw std::invalid_argument("label_fraction yields zero labeled samples in a class");
        for (std::size_t i = 0; i < take; ++i) picked.emplace_back(members[i], i < labeled ? 1 : 0);
    }
    rng.shuffle(picked);

    Subsample out;
    out.indices.reserve(picked.size());
    out.labeled.reserve(picked.size());
    for (auto& [idx, lab] : picked) {
        out.indices.push_back(idx);
        out.labeled.push_back(lab);
    }
    return out;
}

// ---- MlpEncoder ----

MlpEncoder::MlpEncoder(std::size_t input_dim, std::size_t hidden_dim, std::size_t embed_dim, Rng& rng)
    : w1_(hidden_dim, input_dim), b1_(hidden_dim, 0.0), w2_(embed_dim, hidden_dim), b2_(embed_dim, 0.0) {
    const double s1 = 1.0 / std::sqrt(static_cast<double>(input_dim));
    for (double& w : w1_.data()) w = s1 * rng.normal();
    const double s2 = 1.0 / std::sqrt(static_cast<double>(hidden_dim));
    for (double& w : w2_.data()) w = s2 * rng.normal();
}

Matrix MlpEncoder::forward(const Matrix& input, Cache* cache) const {
    const std::size_t rows = input.rows();
    const std::size_t hidden_dim = w1_.rows();
    const std::size_t embed = w2_.rows();
    Matrix h(rows, hidden_dim);
    Matrix e(rows, embed);
    Matrix z(rows, embed);
    std::vector<double> norms(rows);

    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < hidden_dim; ++j) {
            h(r, j) = std::tanh(dot(w1_.row(j), input.row(r)) + b1_[j]);
        }
        for (std::size_t j = 0; j < embed; ++j) {
            e(r, j) = dot(w2_.row(j), h.row(r)) + b2_[j];
        }
        const double n = norm(e.row(r));
        norms[r] = n;
        if (!std::isfinite(n) || !(n > 1e-300))
            throw DegenerateEmbeddingError("encoder produced a zero or non-finite embedding");
        for (std::size_t j = 0; j < embed; ++j) z(r, j) = e(r, j) / n;
    }
    if (cache) {
        cache->input = input;
        cache->hidden = std::move(h);
        cache->raw_embed = std::move(e);
        cache->embed_norm = std::move(norms);
    }
    return z;
}

MlpEncoder::Gradients MlpEncoder::backward(const Cache& cache, const Matrix& d_embedding) const {
    const std::size_t rows = cache.input.rows();
    const std::size_t hidden_dim = w1_.rows();
    const std::size_t embed = w2_.rows();

    Gradients g{Matrix(w1_.rows(), w1_.cols()), Matrix(w2_.rows(), w2_.cols()),
                std::vector<double>(b1_.size(), 0.0), std::vector<double>(b2_.size(), 0.0)};
    std::vector<double> de(embed);
    std::vector<double> dh(hidden_dim);

    for (std::size_t r = 0; r < rows; ++r) {
        // Through z = e / |e|:  de = (dz - (dz.z) z) / |e|.
        const double n = cache.embed_norm[r];
        const auto dz = d_embedding.row(r);
        double dz_dot_z = 0.0;
        for (std::size_t j = 0; j < embed; ++j) dz_dot_z += dz[j] * cache.raw_embed(r, j) / n;
        for (std::size_t j = 0; j < embed; ++j) {
            de[j] = (dz[j] - dz_dot_z * cache.raw_embed(r, j) / n) / n;
        }
        // e = W2 h + b2
        for (std::size_t j = 0; j < embed; ++j) {
            axpy(de[j], cache.hidden.row(r), g.w2.row(j));
            g.b2[j] += de[j];
        }
        for (std::size_t j = 0; j < hidden_dim; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < embed; ++k) s += w2_(k, j) * de[k];
            dh[j] = s * (1.0 - cache.hidden(r, j) * cache.hidden(r, j));  // tanh'
        }
        // h = tanh(W1 x + b1)
        for (std::size_t j = 0; j < hidden_dim; ++j) {
            axpy(dh[j], cache.input.row(r), g.w1.row(j));
            g.b1[j] += dh[j];
        }
    }
    return g;
}

void MlpEncoder::apply_gradients(const Gradients& g, double learning_rate) {
    for (std::size_t i = 0; i < w1_.data().size(); ++i) w1_.data()[i] -= learning_rate * g.w1.data()[i];
    for (std::size_t i = 0; i < b1_.size(); ++i) b1_[i] -= learning_rate * g.b1[i];
    for (std::size_t i = 0; i < w2_.data().size(); ++i) w2_.data()[i] -= learning_rate * g.w2.data()[i];
    for (std::size_t i = 0; i < b2_.size(); ++i) b2_[i] -= learning_rate * g.b2[i];
}

// ---- SoftmaxHead ----

SoftmaxHead::SoftmaxHead(std::size_t embed_dim, std::size_t classes, Rng& rng)
    : weights_(classes, embed_dim), bias_(classes, 0.0) {
    const double s = 1.0 / std::sqrt(static_cast<double>(embed_dim));
    for (double& w : weights_.data()) w = s * rng.normal();
}

double SoftmaxHead::loss_and_grad(const Matrix& embeddings, const std::vector<std::int32_t>& targets,
                                  Matrix& d_embedding, Matrix& d_weights,
                                  std::vector<double>& d_bias) const {
    const std::size_t rows = embeddings.rows();
    const std::size_t classes = weights_.rows();
    if (targets.size() != rows) throw std::invalid_argument("one target per row required");

    d_embedding = Matrix(rows, embeddings.cols());
    d_weights = Matrix(classes, weights_.cols());
    d_bias.assign(classes, 0.0);

    const double inv_rows = 1.0 / static_cast<double>(rows);
    double loss = 0.0;
    std::vector<double> logits(classes);
    for (std::size_t r = 0; r < rows; ++r) {
        const auto t = targets[r];
        if (t < 0 || static_cast<std::size_t>(t) >= classes)
            throw std::invalid_argument("target class out of range");
        double max_logit = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < classes; ++c) {
            logits[c] = dot(weights_.row(c), embeddings.row(r)) + bias_[c];
            max_logit = std::max(max_logit, logits[c]);
        }
        double denom = 0.0;
        for (std::size_t c = 0; c < classes; ++c) denom += std::exp(logits[c] - max_logit);
        loss += (max_logit + std::log(denom) - logits[t]) * inv_rows;
        for (std::size_t c = 0; c < classes; ++c) {
            const double p = std::exp(logits[c] - max_logit) / denom;
            const double dlogit = (p - (static_cast<std::int32_t>(c) == t ? 1.0 : 0.0)) * inv_rows;
            axpy(dlogit, weights_.row(c), d_embedding.row(r));
            axpy(dlogit, embeddings.row(r), d_weights.row(c));
            d_bias[c] += dlogit;
        }
    }
    return loss;
}

void SoftmaxHead::apply_gradients(const Matrix& d_weights, const std::vector<double>& d_bias,
                                  double learning_rate) {
    for (std::size_t i = 0; i < weights_.data().size(); ++i)
        weights_.data()[i] -= learning_rate * d_weights.data()[i];
    for (std::size_t i = 0; i < bias_.size(); ++i) bias_[i] -= learning_rate * d_bias[i];
}

// ---- config ----

void ExperimentConfig::validate() const {
    if (methods.empty()) throw std::invalid_argument("config needs at least one method");
    if (data_fractions.empty() || seeds.empty()) throw std::invalid_argument("config needs fractions and seeds");
    for (double f : data_fractions) {
        if (!(f > 0.0) || f > 1.0) throw std::invalid_argument("data fractions must be in (0,1]");
    }
    if (train.epochs < 0 || train.batch_size < 1) throw std::invalid_argument("bad train params");
    if (!(train.learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be > 0");
    double prev = 0.0;
    for (double m : train.decay_milestones) {
        if (!(m > 0.0) || !(m < 1.0) || m < prev)
            throw std::invalid_argument("decay milestones must be sorted within (0,1)");
        prev = m;
    }
    for (const MethodSpec& m : methods) {
        if (!(m.tau > 0.0)) throw std::invalid_argument("tau must be > 0");
        switch (m.method) {
            case cost::Method::SimCLR:
                if (m.label_fraction != 0.0) throw std::invalid_argument("simclr needs label_fraction 0");
                break;
            case cost::Method::Baseline:
            case cost::Method::SupCon:
                if (m.label_fraction != 1.0)
                    throw std::invalid_argument("baseline/supcon need label_fraction 1");
                break;
            case cost::Method::SemiSupervised:
                if (!(m.label_fraction > 0.0) || m.label_fraction >= 1.0)
                    throw std::invalid_argument("semi-supervised needs label_fraction in (0,1)");
                break;
        }
    }
    if (meter.sources.empty()) throw std::invalid_argument("config needs at least one meter source");
    if (!(meter.interval_s > 0.0)) throw std::invalid_argument("meter interval must be > 0");
    if (knn.k < 1 || !(knn.tau > 0.0)) throw std::invalid_argument("bad knn params");
}

nlohmann::json ExperimentConfig::to_json() const {
    nlohmann::json j;
    j["dataset"] = {{"classes", dataset.classes},         {"per_class", dataset.per_class},
                    {"dim", dataset.dim},                 {"separation", dataset.separation},
                    {"noise", dataset.noise},             {"test_per_class", dataset.test_per_class},
                    {"seed", dataset.seed}};
    j["encoder"] = {{"hidden", encoder_hidden}, {"embed", encoder_embed}};
    j["train"] = {{"epochs", train.epochs},
                  {"batch_size", train.batch_size},
                  {"learning_rate", train.learning_rate},
                  {"decay_milestones", train.decay_milestones},
                  {"decay_factor", train.decay_factor},
                  {"augment_noise", train.augment_noise}};
    auto methods_json = nlohmann::json::array();
    for (const MethodSpec& m : methods) {
        nlohmann::json mj;
        mj["method"] = std::string(cost::method_name(m.method));
        mj["label_fraction"] = m.label_fraction;
        mj["tau"] = m.tau;
        if (m.method == cost::Method::SemiSupervised) mj["pseudo_threshold"] = m.pseudo_threshold;
        methods_json.push_back(std::move(mj));
    }
    j["methods"] = std::move(methods_json);
    j["data_fractions"] = data_fractions;
    j["seeds"] = seeds;
    j["meter"] = {{"sources", meter.sources}, {"interval_s", meter.interval_s}};
    j["labeling"] = {{"power_watts", labeling.power_watts},
                     {"seconds_per_label", labeling.seconds_per_label}};
    j["knn"] = {{"k", knn.k}, {"tau", knn.tau}};
    return j;
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
    ExperimentConfig c = defaults();
    if (j.contains("dataset")) {
        const auto& d = j.at("dataset");
        c.dataset.classes = d.value("classes", c.dataset.classes);
        c.dataset.per_class = d.value("per_class", c.dataset.per_class);
        c.dataset.dim = d.value("dim", c.dataset.dim);
        c.dataset.separation = d.value("separation", c.dataset.separation);
        c.dataset.noise = d.value("noise", c.dataset.noise);
        c.dataset.test_per_class = d.value("test_per_class", c.dataset.test_per_class);
        c.dataset.seed = d.value("seed", c.dataset.seed);
    }
    if (j.contains("encoder")) {
        c.encoder_hidden = j.at("encoder").value("hidden", c.encoder_hidden);
        c.encoder_embed = j.at("encoder").value("embed", c.encoder_embed);
    }
    if (j.contains("train")) {
        const auto& t = j.at("train");
        c.train.epochs = t.value("epochs", c.train.epochs);
        c.train.batch_size = t.value("batch_size", c.train.batch_size);
        c.train.learning_rate = t.value("learning_rate", c.train.learning_rate);
        c.train.decay_milestones = t.value("decay_milestones", c.train.decay_milestones);
        c.train.decay_factor = t.value("decay_factor", c.train.decay_factor);
        c.train.augment_noise = t.value("augment_noise", c.train.augment_noise);
    }
    if (j.contains("methods")) {
        c.methods.clear();
        for (const auto& mj : j.at("methods")) {
            MethodSpec m;
            m.method = cost::method_from_name(mj.at("method").get<std::string>());
            switch (m.method) {
                case cost::Method::SimCLR: m.label_fraction = 0.0; m.tau = 0.1; break;
                case cost::Method::SupCon: m.label_fraction = 1.0; m.tau = 0.5; break;
                case cost::Method::Baseline: m.label_fraction = 1.0; m.tau = 0.1; break;
                case cost::Method::SemiSupervised: m.label_fraction = 0.5; m.tau = 0.1; break;
            }
            m.label_fraction = mj.value("label_fraction", m.label_fraction);
            m.tau = mj.value("tau", m.tau);
            m.pseudo_threshold = mj.value("pseudo_threshold", m.pseudo_threshold);
            c.methods.push_back(m);
        }
    }
    if (j.contains("data_fractions")) c.data_fractions = j.at("data_fractions").get<std::vector<double>>();
    if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    if (j.contains("meter")) {
        c.meter.sources = j.at("meter").value("sources", c.meter.sources);
        c.meter.interval_s = j.at("meter").value("interval_s", c.meter.interval_s);
    }
    if (j.contains("labeling")) {
        c.labeling = cost::LabelingCostModel(
            j.at("labeling").value("power_watts", c.labeling.power_watts),
            j.at("labeling").value("seconds_per_label", c.labeling.seconds_per_label));
    }
    if (j.contains("knn")) {
        c.knn.k = j.at("knn").value("k", c.knn.k);
        c.knn.tau = j.at("knn").value("tau", c.knn.tau);
    }
    c.validate();
    return c;
}

ExperimentConfig ExperimentConfig::defaults() {
    ExperimentConfig c;
    c.methods = {
        {cost::Method::Baseline, 1.0, 0.1, 0.9},
        {cost::Method::SimCLR, 0.0, 0.1, 0.9},
        {cost::Method::SupCon, 1.0, 0.5, 0.9},
        {cost::Method::SemiSupervised, 0.5, 0.1, 0.9},
    };
    return c;
}

// ---- training ----

namespace {

struct BatchViews {
    Matrix views;  // 2n rows, canonical pairing
    std::vector<std::int32_t> sample_labels;        // per sample, kUnlabeled where hidden
    std::vector<std::int32_t> true_labels_per_view; // for the cross-entropy baseline
};

BatchViews build_batch(const SyntheticDataset& data, const Subsample& sub,
                       std::span<const std::int32_t> batch_positions, double augment_sigma,
                       Rng& rng, bool expose_labels_only_when_masked) {
    BatchViews out;
    out.views = Matrix(batch_positions.size() * 2, data.points.cols());
    out.sample_labels.reserve(batch_positions.size());
    out.true_labels_per_view.reserve(batch_positions.size() * 2);
    for (std::size_t s = 0; s < batch_positions.size(); ++s) {
        const std::int32_t pos = batch_positions[s];
        const std::int32_t idx = sub.indices[pos];
        auto [a, b] = augment(data.points.row(idx), augment_sigma, rng);
        std::copy(a.begin(), a.end(), out.views.row(2 * s).begin());
        std::copy(b.begin(), b.end(), out.views.row(2 * s + 1).begin());
        const std::int32_t label = data.labels[idx];
        const bool labeled = !expose_labels_only_when_masked || sub.labeled[pos] != 0;
        out.sample_labels.push_back(labeled ? label : contr::kUnlabeled);
        out.true_labels_per_view.push_back(label);
        out.true_labels_per_view.push_back(label);
    }
    return out;
}

knn::LabeledEmbeddingSet embed_set(const MlpEncoder& encoder, const Matrix& points,
                                   const std::vector<std::int32_t>& labels) {
    knn::LabeledEmbeddingSet set;
    set.vectors = encoder.forward(points);
    set.labels = labels;
    return set;
}

}  // namespace

TrainOutcome train_encoder(const ExperimentConfig& config, const MethodSpec& method,
                           double data_fraction, std::uint64_t seed,
                           const SyntheticDataset& train_data, const SyntheticDataset& eval_data,
                           power::MeterSession& meter) {
    config.validate();
    const Subsample sub = subsample_regime(train_data, data_fraction, method.label_fraction,
                                           mix_seed(seed, 0x7375627365740aULL));

    Rng init_rng(mix_seed(seed, 0x696e6974ULL));
    MlpEncoder encoder(train_data.points.cols(), config.encoder_hidden, config.encoder_embed, init_rng);
    SoftmaxHead head(config.encoder_embed, train_data.classes, init_rng);
    Rng train_rng(mix_seed(seed, 0x747261696eULL));

    std::vector<std::int32_t> positions(sub.indices.size());
    std::iota(positions.begin(), positions.end(), 0);

    std::vector<std::size_t> milestone_epochs;
    for (double m : config.train.decay_milestones)
        milestone_epochs.push_back(static_cast<std::size_t>(m * config.train.epochs));

    double initial_epoch_loss = 0.0;
    double final_epoch_loss = 0.0;
    double lr = config.train.learning_rate;

    for (int epoch = 0; epoch < config.train.epochs; ++epoch) {
        lr = config.train.learning_rate;
        for (std::size_t m : milestone_epochs) {
            if (static_cast<std::size_t>(epoch) >= m) lr *= config.train.decay_factor;
        }
        train_rng.shuffle(positions);
        double epoch_loss = 0.0;
        std::size_t batches = 0;

        for (std::size_t start = 0; start < positions.size(); start += config.train.batch_size) {
            const std::size_t count = std::min<std::size_t>(config.train.batch_size,
                                                            positions.size() - start);
            const std::span<const std::int32_t> batch_positions(positions.data() + start, count);
            const bool mask_labels = method.method == cost::Method::SemiSupervised;
            BatchViews bv = build_batch(train_data, sub, batch_positions, config.train.augment_noise,
                                        train_rng, mask_labels);

            MlpEncoder::Cache cache;
            Matrix z;
            try {
                z = encoder.forward(bv.views, &cache);
            } catch (const DegenerateEmbeddingError&) {
                // Exploded parameters produce zero or non-finite embeddings.
                throw DivergenceError("encoder state degenerated", epoch);
            }
            double loss = 0.0;
            Matrix dz;
            switch (method.method) {
                case cost::Method::SimCLR: {
                    const auto batch = contr::MultiviewBatch::from_paired_views(z, method.tau);
                    auto res = contr::info_nce_loss(batch);
                    loss = res.value;
                    dz = std::move(res.gradient);
                    break;
                }
                case cost::Method::SupCon: {
                    const auto batch = contr::MultiviewBatch::from_paired_views(z, method.tau, bv.sample_labels);
                    auto res = contr::supcon_loss(batch);
                    loss = res.value;
                    dz = std::move(res.gradient);
                    break;
                }
                case cost::Method::SemiSupervised: {
                    const auto batch = contr::MultiviewBatch::from_paired_views(z, method.tau, bv.sample_labels);
                    const bool any_labeled =
                        std::any_of(bv.sample_labels.begin(), bv.sample_labels.end(),
                                    [](std::int32_t l) { return l != contr::kUnlabeled; });
                    // Batches that drew no labeled sample train self-supervised.
                    auto res = any_labeled ? contr::semi_supervised_loss(batch, method.pseudo_threshold)
                                           : contr::info_nce_loss(batch);
                    loss = res.value;
                    dz = std::move(res.gradient);
                    break;
                }
                case cost::Method::Baseline: {
                    Matrix d_weights;
                    std::vector<double> d_bias;
                    loss = head.loss_and_grad(z, bv.true_labels_per_view, dz, d_weights, d_bias);
                    head.apply_gradients(d_weights, d_bias, lr);
                    break;
                }
            }
            if (!std::isfinite(loss)) throw DivergenceError("training loss became non-finite", epoch);
            // Contrastive losses are sums over anchors; step on the per-view mean.
            if (method.method != cost::Method::Baseline) {
                const double scale = 1.0 / static_cast<double>(z.rows());
                for (double& g : dz.data()) g *= scale;
                loss *= scale;
            }
            const MlpEncoder::Gradients grads = encoder.backward(cache, dz);
            encoder.apply_gradients(grads, lr);
            epoch_loss += loss;
            ++batches;
        }
        epoch_loss /= static_cast<double>(std::max<std::size_t>(batches, 1));
        if (epoch == 0) initial_epoch_loss = epoch_loss;
        final_epoch_loss = epoch_loss;
        meter.tick();
    }

    // kNN evaluation on the encoder output, ground-truth labels throughout.
    Matrix used_points(sub.indices.size(), train_data.points.cols());
    std::vector<std::int32_t> used_labels(sub.indices.size());
    for (std::size_t i = 0; i < sub.indices.size(); ++i) {
        std::copy(train_data.points.row(sub.indices[i]).begin(),
                  train_data.points.row(sub.indices[i]).end(), used_points.row(i).begin());
        used_labels[i] = train_data.labels[sub.indices[i]];
    }
    const auto train_set = embed_set(encoder, used_points, used_labels);
    const auto test_set = embed_set(encoder, eval_data.points, eval_data.labels);
    const std::size_t k = std::min<std::size_t>(config.knn.k, train_set.vectors.rows());
    const double accuracy = knn::knn_accuracy(train_set, test_set, k, config.knn.tau);

    TrainOutcome out{std::move(encoder), {}, meter.ledger(), initial_epoch_loss, final_epoch_loss};
    cost::RegimeRecord& rec = out.record;
    rec.method = method.method;
    rec.dataset = "blobs";
    rec.dataset_size_k = static_cast<std::int64_t>(train_data.points.rows());
    rec.data_fraction = data_fraction;
    rec.label_fraction = method.label_fraction;
    rec.accuracy_pct = accuracy;
    rec.train_energy_kwh = out.ledger.total_kwh();
    rec.labeling_energy_kwh = cost::labeling_energy_kwh(config.labeling, cost::labeled_count(rec));
    rec.seed = static_cast<std::int64_t>(seed);
    rec.train_joules_by_component = out.ledger.joules;
    rec.validate();
    return out;
}

GridResult run_grid(const ExperimentConfig& config) {
    config.validate();
    const SyntheticDataset train_data = make_dataset(config.dataset);
    const SyntheticDataset eval_data = make_eval_dataset(config.dataset);

    GridResult result;
    for (const MethodSpec& method : config.methods) {
        for (double fraction : config.data_fractions) {
            std::vector<double> accs;
            std::vector<double> train_kwhs;
            double label_kwh = 0.0;
            for (std::uint64_t seed : config.seeds) {
                std::vector<std::unique_ptr<power::PowerSource>> sources;
                for (const std::string& spec : config.meter.sources)
                    sources.push_back(power::make_source(spec));
                std::ostringstream run_id;
                run_id << cost::method_name(method.method) << "-df" << fraction << "-seed" << seed;
                power::MeterSession meter(std::move(sources), config.meter.interval_s, run_id.str());
                try {
                    TrainOutcome cell = train_encoder(config, method, fraction, seed, train_data,
                                                      eval_data, meter);
                    accs.push_back(cell.record.accuracy_pct);
                    train_kwhs.push_back(cell.record.train_energy_kwh);
                    label_kwh = cell.record.labeling_energy_kwh;
                    result.records.push_back(std::move(cell.record));
                } catch (const DivergenceError& e) {
                    result.failures.push_back({method.method, fraction, seed, e.what()});
                }
            }
            if (accs.empty()) continue;
            AggregateRow row;
            row.method = method.method;
            row.data_fraction = fraction;
            row.label_fraction = method.label_fraction;
            const double n = static_cast<double>(accs.size());
            row.acc_mean = std::accumulate(accs.begin(), accs.end(), 0.0) / n;
            double var = 0.0;
            for (double a : accs) var += (a - row.acc_mean) * (a - row.acc_mean);
            row.acc_std = accs.size() > 1 ? std::sqrt(var / (n - 1.0)) : 0.0;
            row.train_kwh_mean = std::accumulate(train_kwhs.begin(), train_kwhs.end(), 0.0) / n;
            row.label_kwh = label_kwh;
            row.total_kwh = row.train_kwh_mean + row.label_kwh;
            result.aggregates.push_back(row);
        }
    }
    return result;
}

void write_records_jsonl(std::ostream& out, const GridResult& result) {
    cost::write_records_jsonl(out, result.records);
}

std::string aggregate_csv(const GridResult& result) {
    std::ostringstream out;
    out << "method,data_fraction,label_fraction,acc_mean,acc_std,train_kwh_mean,label_kwh,total_kwh\n";
    char buf[64];
    auto fmt = [&buf](double v) {
        std::snprintf(buf, sizeof(buf), "%.10g", v);
        return std::string(buf);
    };
    for (const AggregateRow& r : result.aggregates) {
        out << cost::method_name(r.method) << ',' << fmt(r.data_fraction) << ','
            << fmt(r.label_fraction) << ',' << fmt(r.acc_mean) << ',' << fmt(r.acc_std) << ','
            << fmt(r.train_kwh_mean) << ',' << fmt(r.label_kwh) << ',' << fmt(r.total_kwh) << '\n';
    }
    return out.str();
}

}  // namespace joulebench::harness
