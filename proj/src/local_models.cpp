#include "productnet/local_models.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "productnet/adam.hpp"
#include "productnet/error.hpp"
#include "productnet/rng.hpp"

namespace productnet {

std::string_view to_string(ModelKind k) noexcept {
    switch (k) {
        case ModelKind::lr: return "lr";
        case ModelKind::nb: return "nb";
        case ModelKind::mlp: return "mlp";
    }
    return "lr";
}

LabelSource source_of(ModelKind k) noexcept {
    switch (k) {
        case ModelKind::lr: return LabelSource::active_lr;
        case ModelKind::nb: return LabelSource::active_nb;
        case ModelKind::mlp: return LabelSource::active_mlp;
    }
    return LabelSource::active_lr;
}

std::string_view to_string(SampleTag t) noexcept {
    switch (t) {
        case SampleTag::ambiguous: return "ambiguous";
        case SampleTag::positive: return "positive";
        case SampleTag::knn: return "knn";
        case SampleTag::random: return "random";
    }
    return "random";
}

std::size_t BinaryModel::input_dim() const {
    if (const auto* lr = std::get_if<LogisticParams>(&params)) {
        return lr->weights.size();
    }
    if (const auto* mlp = std::get_if<MlpParams>(&params)) {
        return mlp->inputs;
    }
    return 0;
}

namespace {

double sigmoid(double z) {
    if (z >= 0) {
        return 1.0 / (1.0 + std::exp(-z));
    }
    const double e = std::exp(z);
    return e / (1.0 + e);
}

/// -log sigmoid(z) computed without overflow.
double softplus_neg(double z) { return z >= 0 ? std::log1p(std::exp(-z)) : -z + std::log1p(std::exp(z)); }

double logistic_loss(double z, bool positive) { return positive ? softplus_neg(z) : softplus_neg(-z); }

std::vector<double> class_weights(std::span<const Polarity> labels, bool balance) {
    const double n = static_cast<double>(labels.size());
    const auto n_pos = static_cast<double>(std::count(labels.begin(), labels.end(), Polarity::positive));
    const double n_neg = n - n_pos;
    std::vector<double> w(labels.size(), 1.0);
    if (balance) {
        for (std::size_t i = 0; i < labels.size(); ++i) {
            w[i] = labels[i] == Polarity::positive ? n / (2.0 * n_pos) : n / (2.0 * n_neg);
        }
    }
    return w;
}

std::size_t dense_dim(std::span<const ProductFeatures> features) {
    const std::size_t d = features.front().dense.size();
    for (const auto& f : features) {
        if (f.dense.size() != d) {
            throw ShapeError("training features have inconsistent dimensions");
        }
    }
    return d;
}

BinaryModel train_lr(std::span<const ProductFeatures> xs, std::span<const Polarity> ys, std::uint64_t seed,
                     const LocalTrainConfig& cfg) {
    const std::size_t d = dense_dim(xs);
    const std::size_t n = xs.size();
    const auto cw = class_weights(ys, cfg.balance_classes);

    // parameter layout: [w_0 .. w_{d-1}, bias]
    std::vector<double> theta(d + 1, 0.0), grad(d + 1), m(d + 1, 0.0), v(d + 1, 0.0);
    BinaryModel model;
    model.kind = ModelKind::lr;
    model.seed = seed;
    const AdamConfig adam{.step = cfg.step};

    auto evaluate = [&](bool want_grad) {
        double loss = 0.0;
        if (want_grad) {
            std::fill(grad.begin(), grad.end(), 0.0);
        }
        for (std::size_t i = 0; i < n; ++i) {
            double z = theta[d];
            for (std::size_t j = 0; j < d; ++j) {
                z += theta[j] * xs[i].dense[j];
            }
            const bool pos = ys[i] == Polarity::positive;
            loss += cw[i] * logistic_loss(z, pos);
            if (want_grad) {
                const double r = cw[i] * (sigmoid(z) - (pos ? 1.0 : 0.0)) / static_cast<double>(n);
                for (std::size_t j = 0; j < d; ++j) {
                    grad[j] += r * xs[i].dense[j];
                }
                grad[d] += r;
            }
        }
        loss /= static_cast<double>(n);
        double reg = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            reg += theta[j] * theta[j];
            if (want_grad) {
                grad[j] += cfg.l2 * theta[j];
            }
        }
        return loss + 0.5 * cfg.l2 * reg;
    };

    std::size_t it = 0;
    for (; it < cfg.lr_max_iterations; ++it) {
        model.loss_history.push_back(evaluate(true));
        double gmax = 0.0;
        for (double g : grad) {
            gmax = std::max(gmax, std::abs(g));
        }
        if (gmax < cfg.grad_tolerance) {
            break;
        }
        adam_update(theta, grad, m, v, it + 1, adam);
    }
    model.iterations = it;
    LogisticParams p;
    p.weights.assign(theta.begin(), theta.begin() + static_cast<std::ptrdiff_t>(d));
    p.bias = theta[d];
    model.params = std::move(p);
    return model;
}

BinaryModel train_mlp(std::span<const ProductFeatures> xs, std::span<const Polarity> ys, std::uint64_t seed,
                      const LocalTrainConfig& cfg) {
    const std::size_t d = dense_dim(xs);
    const std::size_t h = cfg.mlp_hidden;
    const std::size_t n = xs.size();
    const auto cw = class_weights(ys, cfg.balance_classes);

    // parameter layout: [w1 (h*d), b1 (h), w2 (h), b2]
    const std::size_t off_b1 = h * d, off_w2 = off_b1 + h, off_b2 = off_w2 + h, total = off_b2 + 1;
    std::vector<double> theta(total, 0.0), grad(total), m(total, 0.0), v(total, 0.0);
    Rng rng(seed);
    const double a1 = std::sqrt(6.0 / static_cast<double>(d + h));
    for (std::size_t i = 0; i < h * d; ++i) {
        theta[i] = rng.uniform(-a1, a1);
    }
    const double a2 = std::sqrt(6.0 / static_cast<double>(h + 1));
    for (std::size_t i = 0; i < h; ++i) {
        theta[off_w2 + i] = rng.uniform(-a2, a2);
    }

    BinaryModel model;
    model.kind = ModelKind::mlp;
    model.seed = seed;
    const AdamConfig adam{.step = cfg.step};
    std::vector<double> hidden(h);

    auto evaluate = [&](bool want_grad) {
        double loss = 0.0;
        if (want_grad) {
            std::fill(grad.begin(), grad.end(), 0.0);
        }
        for (std::size_t i = 0; i < n; ++i) {
            const auto x = xs[i].dense;
            double z = theta[off_b2];
            for (std::size_t u = 0; u < h; ++u) {
                double a = theta[off_b1 + u];
                const double* row = &theta[u * d];
                for (std::size_t j = 0; j < d; ++j) {
                    a += row[j] * x[j];
                }
                hidden[u] = a > 0.0 ? a : 0.0;
                z += theta[off_w2 + u] * hidden[u];
            }
            const bool pos = ys[i] == Polarity::positive;
            loss += cw[i] * logistic_loss(z, pos);
            if (!want_grad) {
                continue;
            }
            const double r = cw[i] * (sigmoid(z) - (pos ? 1.0 : 0.0)) / static_cast<double>(n);
            grad[off_b2] += r;
            for (std::size_t u = 0; u < h; ++u) {
                grad[off_w2 + u] += r * hidden[u];
                if (hidden[u] > 0.0) {
                    const double du = r * theta[off_w2 + u];
                    grad[off_b1 + u] += du;
                    double* grow = &grad[u * d];
                    for (std::size_t j = 0; j < d; ++j) {
                        grow[j] += du * x[j];
                    }
                }
            }
        }
        loss /= static_cast<double>(n);
        double reg = 0.0;
        for (std::size_t i = 0; i < h * d; ++i) {
            reg += theta[i] * theta[i];
            if (want_grad) {
                grad[i] += cfg.l2 * theta[i];
            }
        }
        for (std::size_t i = 0; i < h; ++i) {
            reg += theta[off_w2 + i] * theta[off_w2 + i];
            if (want_grad) {
                grad[off_w2 + i] += cfg.l2 * theta[off_w2 + i];
            }
        }
        return loss + 0.5 * cfg.l2 * reg;
    };

    std::size_t it = 0;
    for (; it < cfg.mlp_max_epochs; ++it) {
        model.loss_history.push_back(evaluate(true));
        double gmax = 0.0;
        for (double g : grad) {
            gmax = std::max(gmax, std::abs(g));
        }
        if (gmax < cfg.grad_tolerance) {
            break;
        }
        adam_update(theta, grad, m, v, it + 1, adam);
    }
    model.iterations = it;
    MlpParams p;
    p.inputs = d;
    p.hidden = h;
    p.w1.assign(theta.begin(), theta.begin() + static_cast<std::ptrdiff_t>(off_b1));
    p.b1.assign(theta.begin() + static_cast<std::ptrdiff_t>(off_b1), theta.begin() + static_cast<std::ptrdiff_t>(off_w2));
    p.w2.assign(theta.begin() + static_cast<std::ptrdiff_t>(off_w2), theta.begin() + static_cast<std::ptrdiff_t>(off_b2));
    p.b2 = theta[off_b2];
    model.params = std::move(p);
    return model;
}

BinaryModel train_nb(std::span<const ProductFeatures> xs, std::span<const Polarity> ys, std::uint64_t seed,
                     const LocalTrainConfig& cfg) {
    std::array<double, 2> docs{0.0, 0.0};
    std::array<double, 2> totals{0.0, 0.0};
    std::unordered_map<std::uint32_t, std::array<double, 2>> counts;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        if (xs[i].counts == nullptr) {
            throw InvalidArgument("naive Bayes needs token counts for every training product");
        }
        const int c = ys[i] == Polarity::positive ? 1 : 0;
        docs[c] += 1.0;
        for (const auto& [idx, w] : xs[i].counts->entries) {
            counts[idx][c] += w;
            totals[c] += w;
        }
    }
    NaiveBayesParams p;
    const double n = docs[0] + docs[1];
    p.log_prior = {std::log(docs[0] / n), std::log(docs[1] / n)};
    const double vocab = static_cast<double>(counts.size());
    for (const auto& [idx, cnt] : counts) {
        std::array<double, 2> ll{};
        for (int c = 0; c < 2; ++c) {
            ll[c] = std::log((cnt[c] + cfg.nb_alpha) / (totals[c] + cfg.nb_alpha * vocab));
        }
        p.log_likelihood.emplace(idx, ll);
    }
    BinaryModel model;
    model.kind = ModelKind::nb;
    model.seed = seed;
    model.params = std::move(p);
    return model;
}

}  // namespace

BinaryModel train_local(ModelKind kind, std::span<const ProductFeatures> features, std::span<const Polarity> labels,
                        std::uint64_t seed, const LocalTrainConfig& config) {
    if (features.size() != labels.size()) {
        throw InvalidArgument("features and labels differ in length");
    }
    const bool has_pos = std::find(labels.begin(), labels.end(), Polarity::positive) != labels.end();
    const bool has_neg = std::find(labels.begin(), labels.end(), Polarity::negative) != labels.end();
    if (!has_pos || !has_neg) {
        throw PreconditionError("local model needs at least one positive and one negative label");
    }
    switch (kind) {
        case ModelKind::lr: return train_lr(features, labels, seed, config);
        case ModelKind::nb: return train_nb(features, labels, seed, config);
        case ModelKind::mlp: return train_mlp(features, labels, seed, config);
    }
    throw InvalidArgument("unknown model kind");
}

double predict_proba(const BinaryModel& model, const ProductFeatures& x) {
    if (const auto* lr = std::get_if<LogisticParams>(&model.params)) {
        if (x.dense.size() != lr->weights.size()) {
            throw ShapeError("feature dim " + std::to_string(x.dense.size()) + " does not match model dim " +
                             std::to_string(lr->weights.size()));
        }
        double z = lr->bias;
        for (std::size_t j = 0; j < x.dense.size(); ++j) {
            z += lr->weights[j] * x.dense[j];
        }
        return sigmoid(z);
    }
    if (const auto* mlp = std::get_if<MlpParams>(&model.params)) {
        if (x.dense.size() != mlp->inputs) {
            throw ShapeError("feature dim " + std::to_string(x.dense.size()) + " does not match model dim " +
                             std::to_string(mlp->inputs));
        }
        double z = mlp->b2;
        for (std::size_t u = 0; u < mlp->hidden; ++u) {
            double a = mlp->b1[u];
            const double* row = &mlp->w1[u * mlp->inputs];
            for (std::size_t j = 0; j < mlp->inputs; ++j) {
                a += row[j] * x.dense[j];
            }
            if (a > 0.0) {
                z += mlp->w2[u] * a;
            }
        }
        return sigmoid(z);
    }
    const auto& nb = std::get<NaiveBayesParams>(model.params);
    if (x.counts == nullptr) {
        throw InvalidArgument("naive Bayes prediction needs token counts");
    }
    std::array<double, 2> score = nb.log_prior;
    for (const auto& [idx, w] : x.counts->entries) {
        auto it = nb.log_likelihood.find(idx);
        if (it == nb.log_likelihood.end()) {
            continue;
        }
        score[0] += w * it->second[0];
        score[1] += w * it->second[1];
    }
    // posterior of the positive class via a stable two-way softmax
    return sigmoid(score[1] - score[0]);
}

std::vector<std::string> rank_candidates(std::span<const ScoredId> probabilities, SuggestMode mode, std::size_t k,
                                         const IdSet& exclude) {
    std::vector<const ScoredId*> pool;
    pool.reserve(probabilities.size());
    for (const auto& s : probabilities) {
        if (!exclude.contains(s.id)) {
            pool.push_back(&s);
        }
    }
    auto key = [mode](const ScoredId& s) {
        switch (mode) {
            case SuggestMode::positive: return -s.score;
            case SuggestMode::negative: return s.score;
            case SuggestMode::ambiguous: return std::abs(s.score - 0.5);
        }
        return s.score;
    };
    const std::size_t keep = std::min(k, pool.size());
    std::partial_sort(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(keep), pool.end(),
                      [&](const ScoredId* a, const ScoredId* b) {
                          const double ka = key(*a), kb = key(*b);
                          if (ka != kb) {
                              return ka < kb;
                          }
                          return a->id < b->id;
                      });
    std::vector<std::string> out;
    out.reserve(keep);
    for (std::size_t i = 0; i < keep; ++i) {
        out.push_back(pool[i]->id);
    }
    return out;
}

// ---------------------------------------------------------------------------
// FeatureTable

namespace {

EmbeddingMatrix checked(const EmbeddingMatrix& m, std::size_t count_rows) {
    m.validate();
    if (m.rows() != count_rows) {
        throw ShapeError("dense features have " + std::to_string(m.rows()) + " rows but counts have " +
                         std::to_string(count_rows));
    }
    return m;
}

}  // namespace

FeatureTable::FeatureTable(const EmbeddingMatrix& dense, std::vector<HashedVector> counts)
    : dim_(dense.dim),
      ids_(dense.ids),
      dense_(dense.values.begin(), dense.values.end()),
      counts_(std::move(counts)),
      knn_(checked(dense, counts_.size())) {
    for (std::size_t i = 0; i < ids_.size(); ++i) {
        rows_.emplace(ids_[i], i);
    }
}

std::optional<std::size_t> FeatureTable::row_of(std::string_view id) const {
    auto it = rows_.find(std::string(id));
    if (it == rows_.end()) {
        return std::nullopt;
    }
    return it->second;
}

std::optional<std::vector<double>> FeatureTable::centroid(std::span<const std::string> ids) const {
    std::vector<double> c(dim_, 0.0);
    std::size_t n = 0;
    for (const auto& id : ids) {
        auto row = row_of(id);
        if (!row) {
            continue;
        }
        const auto d = dense(*row);
        for (std::size_t j = 0; j < dim_; ++j) {
            c[j] += d[j];
        }
        ++n;
    }
    if (n == 0) {
        return std::nullopt;
    }
    for (double& x : c) {
        x /= static_cast<double>(n);
    }
    return c;
}

std::vector<HashedVector> pool_counts(const Pool& pool, std::uint32_t dim) {
    std::vector<HashedVector> out;
    out.reserve(pool.size());
    for (const auto& p : pool.products()) {
        out.push_back(hashed_counts(all_tokens(p), dim));
    }
    return out;
}

std::vector<std::string> suggest(const BinaryModel& model, const FeatureTable& table,
                                 std::span<const std::string> candidates, SuggestMode mode, std::size_t k,
                                 const IdSet& labeled) {
    std::vector<ScoredId> probs;
    probs.reserve(candidates.size());
    for (const auto& id : candidates) {
        if (labeled.contains(id)) {
            continue;
        }
        auto row = table.row_of(id);
        if (!row) {
            throw NotFoundError("no features for product '" + id + "'");
        }
        probs.push_back({id, predict_proba(model, table.features(*row))});
    }
    return rank_candidates(probs, mode, k);
}

std::vector<std::size_t> largest_remainder(std::span<const double> weights, std::size_t total) {
    const double sum = std::accumulate(weights.begin(), weights.end(), 0.0);
    std::vector<std::size_t> out(weights.size(), 0);
    if (sum <= 0.0 || total == 0) {
        return out;
    }
    std::vector<double> frac(weights.size());
    std::size_t assigned = 0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        const double exact = weights[i] * static_cast<double>(total) / sum;
        out[i] = static_cast<std::size_t>(std::floor(exact + 1e-9));
        frac[i] = exact - static_cast<double>(out[i]);
        assigned += out[i];
    }
    std::vector<std::size_t> order(weights.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return frac[a] > frac[b] + 1e-12; });
    for (std::size_t i = 0; assigned < total; ++i) {
        ++out[order[i % order.size()]];
        ++assigned;
    }
    return out;
}

// ---------------------------------------------------------------------------
// AnnotationSession

AnnotationSession::AnnotationSession(std::string leaf_id, std::uint64_t seed, MixWeights mix)
    : leaf_id_(std::move(leaf_id)), seed_(seed), mix_(mix) {}

void AnnotationSession::set_label(const std::string& product_id, Polarity polarity) {
    if (polarity == Polarity::positive) {
        negatives_.erase(product_id);
        positives_.insert(product_id);
    } else {
        positives_.erase(product_id);
        negatives_.insert(product_id);
    }
    if (!bootstrapped()) {
        drop_models();
    } else {
        mark_stale();
    }
}

IdSet AnnotationSession::labeled() const {
    IdSet out(positives_.begin(), positives_.end());
    out.insert(negatives_.begin(), negatives_.end());
    return out;
}

void AnnotationSession::record_served(const std::string& product_id, LabelSource source) {
    served_[product_id] = source;
}

std::optional<LabelSource> AnnotationSession::served_source(const std::string& product_id) const {
    auto it = served_.find(product_id);
    if (it == served_.end()) {
        return std::nullopt;
    }
    return it->second;
}

IdSet AnnotationSession::served_unlabeled() const {
    IdSet out;
    for (const auto& [id, src] : served_) {
        if (!positives_.contains(id) && !negatives_.contains(id)) {
            out.insert(id);
        }
    }
    return out;
}

const BinaryModel* AnnotationSession::model(ModelKind kind) const {
    auto it = models_.find(kind);
    return it == models_.end() ? nullptr : &it->second;
}

bool AnnotationSession::stale(ModelKind kind) const { return stale_.contains(kind); }

void AnnotationSession::mark_stale() {
    for (const auto& [kind, m] : models_) {
        stale_.insert(kind);
    }
}

void AnnotationSession::drop_models() {
    models_.clear();
    stale_.clear();
}

const BinaryModel& AnnotationSession::retrain(ModelKind kind, const FeatureTable& table,
                                              const LocalTrainConfig& config) {
    if (!bootstrapped()) {
        throw PreconditionError("leaf '" + leaf_id_ +
                                "' needs at least one positive and one negative label before training");
    }
    std::vector<ProductFeatures> xs;
    std::vector<Polarity> ys;
    auto collect = [&](const std::set<std::string>& ids, Polarity pol) {
        for (const auto& id : ids) {
            auto row = table.row_of(id);
            if (!row) {
                throw NotFoundError("no features for labeled product '" + id + "'");
            }
            xs.push_back(table.features(*row));
            ys.push_back(pol);
        }
    };
    collect(positives_, Polarity::positive);
    collect(negatives_, Polarity::negative);
    auto model = train_local(kind, xs, ys, splitmix64(seed_ ^ static_cast<std::uint64_t>(kind)), config);
    stale_.erase(kind);
    last_trained_ms_ = now_ms();
    return models_.insert_or_assign(kind, std::move(model)).first->second;
}

void AnnotationSession::retrain_existing(const FeatureTable& table, const LocalTrainConfig& config) {
    std::vector<ModelKind> kinds;
    for (const auto& [kind, m] : models_) {
        kinds.push_back(kind);
    }
    for (ModelKind kind : kinds) {
        retrain(kind, table, config);
    }
}

// ---------------------------------------------------------------------------
// Mixed sampling

std::vector<TaggedId> mixed_sample(const AnnotationSession& session, ModelKind kind, const FeatureTable& table,
                                   std::size_t budget, std::uint64_t batch_seed, const IdSet& exclude) {
    IdSet taken = session.labeled();
    taken.insert(exclude.begin(), exclude.end());
    std::vector<TaggedId> out;
    if (budget == 0) {
        return out;
    }
    const std::vector<std::string> positives(session.positives().begin(), session.positives().end());

    auto take = [&](const std::vector<std::string>& ids, SampleTag tag, std::size_t quota) {
        for (const auto& id : ids) {
            if (quota == 0) {
                break;
            }
            if (taken.insert(id).second) {
                out.push_back({id, tag});
                --quota;
            }
        }
    };
    auto take_knn = [&](std::size_t quota) {
        if (quota == 0) {
            return;
        }
        auto centroid = table.centroid(positives);
        if (!centroid) {
            return;
        }
        std::vector<std::string> ids;
        for (auto& s : knn_search(table.knn(), *centroid, quota, taken)) {
            ids.push_back(std::move(s.id));
        }
        take(ids, SampleTag::knn, quota);
    };

    const BinaryModel* model = session.bootstrapped() ? session.model(kind) : nullptr;
    if (model != nullptr) {
        const MixWeights& w = session.mix();
        const std::array<double, 4> weights{w.ambiguous, w.positive, w.knn, w.random};
        const auto quota = largest_remainder(weights, budget);
        std::vector<ScoredId> probs;
        probs.reserve(table.rows());
        for (std::size_t r = 0; r < table.rows(); ++r) {
            if (!taken.contains(table.ids()[r])) {
                probs.push_back({table.ids()[r], predict_proba(*model, table.features(r))});
            }
        }
        take(rank_candidates(probs, SuggestMode::ambiguous, quota[0], taken), SampleTag::ambiguous, quota[0]);
        take(rank_candidates(probs, SuggestMode::positive, quota[1], taken), SampleTag::positive, quota[1]);
        take_knn(quota[2]);
    } else if (!positives.empty()) {
        const std::array<double, 2> weights{0.5, 0.5};
        take_knn(largest_remainder(weights, budget)[0]);
    }
    if (out.size() < budget) {
        take(random_sample(table.ids(), budget - out.size(), batch_seed, taken), SampleTag::random,
             budget - out.size());
    }
    return out;
}

}  // namespace productnet
