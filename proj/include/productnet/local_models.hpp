#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include "productnet/corpus.hpp"
#include "productnet/featurize.hpp"
#include "productnet/retrieval.hpp"

namespace productnet {

enum class ModelKind { lr, nb, mlp };

std::string_view to_string(ModelKind k) noexcept;
LabelSource source_of(ModelKind k) noexcept;

/// Non-owning view of one product's local-model inputs: the dense embedding
/// (LR, MLP) and hashed token counts (NB).
struct ProductFeatures {
    std::span<const double> dense;
    const HashedVector* counts = nullptr;
};

struct LocalTrainConfig {
    double l2 = 1e-4;
    double step = 0.05;
    std::size_t lr_max_iterations = 500;
    std::size_t mlp_max_epochs = 300;
    std::size_t mlp_hidden = 64;
    double grad_tolerance = 1e-6;
    double nb_alpha = 1.0;
    /// Weight each class by N / (2 * N_class) in the LR/MLP loss.
    bool balance_classes = true;
};

struct LogisticParams {
    std::vector<double> weights;
    double bias = 0.0;
};

/// Two-class multinomial naive Bayes over hashed counts. Buckets never seen
/// in training are ignored at prediction time.
struct NaiveBayesParams {
    std::array<double, 2> log_prior{};  // [negative, positive]
    std::unordered_map<std::uint32_t, std::array<double, 2>> log_likelihood;
};

/// One ReLU hidden layer, sigmoid output.
struct MlpParams {
    std::size_t inputs = 0;
    std::size_t hidden = 0;
    std::vector<double> w1;  // hidden x inputs, row-major
    std::vector<double> b1;
    std::vector<double> w2;  // hidden
    double b2 = 0.0;
};

struct BinaryModel {
    ModelKind kind = ModelKind::lr;
    std::variant<LogisticParams, NaiveBayesParams, MlpParams> params;
    std::uint64_t seed = 0;
    std::size_t iterations = 0;
    /// Weighted training loss before each optimizer step (LR/MLP).
    std::vector<double> loss_history;

    std::size_t input_dim() const;
};

/// Throws PreconditionError unless both classes are present.
BinaryModel train_local(ModelKind kind, std::span<const ProductFeatures> features, std::span<const Polarity> labels,
                        std::uint64_t seed, const LocalTrainConfig& config = {});

/// Throws ShapeError when the dense input does not match the model.
double predict_proba(const BinaryModel& model, const ProductFeatures& x);

enum class SuggestMode { positive, negative, ambiguous };

/// Ranks scored candidates: positive by p descending, negative by p
/// ascending, ambiguous by |p - 0.5| ascending; ties by id. Excluded ids are
/// skipped.
std::vector<std::string> rank_candidates(std::span<const ScoredId> probabilities, SuggestMode mode, std::size_t k,
                                         const IdSet& exclude = {});

/// Dense + count features for every product of a pool snapshot, with an
/// exact KNN index over the dense part.
class FeatureTable {
public:
    FeatureTable(const EmbeddingMatrix& dense, std::vector<HashedVector> counts);

    std::size_t rows() const noexcept { return ids_.size(); }
    std::uint32_t dim() const noexcept { return dim_; }
    const std::vector<std::string>& ids() const noexcept { return ids_; }
    std::optional<std::size_t> row_of(std::string_view id) const;
    std::span<const double> dense(std::size_t row) const { return {dense_.data() + row * dim_, dim_}; }
    ProductFeatures features(std::size_t row) const { return {dense(row), &counts_[row]}; }
    const KnnIndex& knn() const noexcept { return knn_; }

    /// Mean dense vector of the listed ids (unknown ids skipped), or nullopt
    /// when none are known.
    std::optional<std::vector<double>> centroid(std::span<const std::string> ids) const;

private:
    std::uint32_t dim_;
    std::vector<std::string> ids_;
    std::vector<double> dense_;
    std::vector<HashedVector> counts_;
    std::unordered_map<std::string, std::size_t> rows_;
    KnnIndex knn_;
};

/// Builds NB count features for a pool, in pool order.
std::vector<HashedVector> pool_counts(const Pool& pool, std::uint32_t dim = kDefaultHashDim);

std::vector<std::string> suggest(const BinaryModel& model, const FeatureTable& table,
                                 std::span<const std::string> candidates, SuggestMode mode, std::size_t k,
                                 const IdSet& labeled);

struct MixWeights {
    double ambiguous = 0.40;
    double positive = 0.30;
    double knn = 0.15;
    double random = 0.15;
};

enum class SampleTag { ambiguous, positive, knn, random };

std::string_view to_string(SampleTag t) noexcept;

struct TaggedId {
    std::string id;
    SampleTag tag;
    bool operator==(const TaggedId&) const = default;
};

/// Splits `total` across `weights` by the largest-remainder method; ties in
/// the remainder go to the earlier bucket.
std::vector<std::size_t> largest_remainder(std::span<const double> weights, std::size_t total);

/// Per-leaf annotation state. Positives and negatives are disjoint; models
/// exist only while both sets are nonempty.
class AnnotationSession {
public:
    AnnotationSession(std::string leaf_id, std::uint64_t seed, MixWeights mix = {});

    const std::string& leaf_id() const noexcept { return leaf_id_; }
    std::uint64_t seed() const noexcept { return seed_; }
    const MixWeights& mix() const noexcept { return mix_; }

    /// Applies a label, superseding any earlier polarity for the product.
    void set_label(const std::string& product_id, Polarity polarity);
    const std::set<std::string>& positives() const noexcept { return positives_; }
    const std::set<std::string>& negatives() const noexcept { return negatives_; }
    IdSet labeled() const;
    bool bootstrapped() const noexcept { return !positives_.empty() && !negatives_.empty(); }

    void record_served(const std::string& product_id, LabelSource source);
    std::optional<LabelSource> served_source(const std::string& product_id) const;
    /// Served ids that have not been labeled yet.
    IdSet served_unlabeled() const;

    const BinaryModel* model(ModelKind kind) const;
    bool stale(ModelKind kind) const;
    void mark_stale();
    std::optional<std::int64_t> last_trained_ms() const noexcept { return last_trained_ms_; }

    /// Trains `kind` on the current labels. Throws PreconditionError before
    /// the first positive/negative pair.
    const BinaryModel& retrain(ModelKind kind, const FeatureTable& table, const LocalTrainConfig& config = {});
    /// Retrains every model that has been trained before.
    void retrain_existing(const FeatureTable& table, const LocalTrainConfig& config = {});
    void drop_models();

    /// Monotone counter feeding per-batch sampling seeds.
    std::uint64_t next_batch() noexcept { return batches_++; }

private:
    std::string leaf_id_;
    std::uint64_t seed_;
    MixWeights mix_;
    std::set<std::string> positives_;
    std::set<std::string> negatives_;
    std::map<std::string, LabelSource> served_;
    std::map<ModelKind, BinaryModel> models_;
    std::set<ModelKind> stale_;
    std::optional<std::int64_t> last_trained_ms_;
    std::uint64_t batches_ = 0;
};

/// Mixed active-learning batch for one session. With a trained `kind` model:
/// ambiguous, positive-suggestion, KNN-from-positive-centroid and random
/// buckets by the session's mix weights, shortfalls refilled from random.
/// Without a model: half KNN (when a positive exists) and the rest random.
/// Never returns labeled or `exclude`d ids, never duplicates.
std::vector<TaggedId> mixed_sample(const AnnotationSession& session, ModelKind kind, const FeatureTable& table,
                                   std::size_t budget, std::uint64_t batch_seed, const IdSet& exclude = {});

}  // namespace productnet
