#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "productnet/corpus.hpp"
#include "productnet/featurize.hpp"
#include "productnet/local_models.hpp"
#include "productnet/master_model.hpp"

namespace productnet {

/// Fraction of items whose gold class is among the first k entries of its
/// ranked prediction list. Throws InvalidArgument on a length mismatch or k = 0.
double topk_accuracy(std::span<const std::vector<std::size_t>> ranked, std::span<const std::size_t> gold,
                     std::size_t k);

// ---------------------------------------------------------------------------
// Synthetic pools

struct SimPoolConfig {
    std::size_t leaves = 20;
    std::size_t per_leaf = 40;
    /// Per-leaf prevalence. When per_leaf / prevalence exceeds
    /// leaves * per_leaf the difference is filled with decoy products that
    /// belong to a background leaf. 0 means no decoys.
    double prevalence = 0.0;
    /// Probability that an emitted signature token is replaced by a
    /// background token.
    double token_noise = 0.1;
    /// Leaves are grouped in runs of this size; a group shares a second
    /// signature token set.
    std::size_t group_size = 1;
    /// Probability that a positive uses its leaf's private signature tokens
    /// (otherwise only its group's tokens).
    double private_rate = 1.0;
    /// Fraction of products carrying an image vector.
    double image_rate = 1.0;
    std::uint32_t image_dim = 16;
    /// Standard deviation of image vectors around their leaf centroid; the
    /// centroids themselves are standard normal.
    double image_noise = 0.3;
    std::size_t signature_tokens = 6;
    std::size_t background_vocab = 2000;
    std::uint64_t seed = 1;
};

/// Generated products (gold_leaf set on each), taxonomy and image vectors.
struct SimPool {
    Pool pool;
    Taxonomy taxonomy;
    ImageStore images;
    /// Target leaves in generation order (excludes the background leaf).
    std::vector<std::string> leaves;
    std::optional<std::string> background_leaf;
    SimPoolConfig config;

    std::size_t positives_of(std::string_view leaf) const;
    double prevalence(std::string_view leaf) const;
    /// Gold positives of every target leaf, as effective labels.
    EffectiveLabels gold_labels() const;
};

SimPool generate_simpool(const SimPoolConfig& config);

/// 20 leaves x 40 products where text and image each carry part of the
/// signal: text always identifies a group of four leaves and usually the
/// leaf itself, images are noisy draws around a per-leaf centroid.
SimPoolConfig complementary_simpool(std::uint64_t seed);

// ---------------------------------------------------------------------------
// Ablation

struct AblationRow {
    std::string variant;
    double top1 = 0.0;
    double top3 = 0.0;
    double top5 = 0.0;
};

struct AblationReport {
    std::vector<AblationRow> rows;  // image-only, bag-of-words, master-T, master-IT
    std::size_t runs = 1;

    const AblationRow& row(std::string_view variant) const;
    /// Plain-text table with a footer describing the baselines.
    std::string table() const;
    /// "name,value" lines, one metric per line.
    std::string metric_lines() const;
};

/// Trains the four variants on one shared 80/20 split of the pool's gold
/// positives and reports their test top-1/3/5 accuracy.
AblationReport run_ablation(const SimPool& pool, const TrainConfig& config);

/// Element-wise mean of several reports with identical row order.
AblationReport average_reports(std::span<const AblationReport> reports);

/// Plain multinomial logistic regression over pooled hashed word counts.
struct BowModel {
    std::uint32_t hash_dim = 0;
    std::size_t classes = 0;
    std::vector<double> weights;  // hash_dim x classes, row per bucket
    std::vector<double> bias;

    std::vector<double> logits(const HashedVector& counts) const;
};

BowModel train_bow(std::span<const HashedVector> inputs, std::span<const std::size_t> labels, std::size_t classes,
                   const TrainConfig& config);

// ---------------------------------------------------------------------------
// Annotation simulation

enum class Strategy { random, keyword, knn, active_lr, active_nb, active_mlp, master };

std::string_view to_string(Strategy s) noexcept;
/// Throws InvalidArgument for an unknown name.
Strategy parse_strategy(std::string_view name);

/// What a strategy may look at: products with gold_leaf removed, the
/// session, and round-0 features.
struct SimulationView {
    const Pool& pool;
    const AnnotationSession& session;
    const FeatureTable& features;
    /// Everything served so far, labeled or not.
    const IdSet& served;
    std::uint64_t batch_seed;
};

using CustomStrategy = std::function<std::vector<std::string>(const SimulationView& view, std::size_t count)>;

struct SimulationOptions {
    std::size_t batch_size = 10;
    LocalTrainConfig local{};
    /// Master strategy: gold positives per leaf used to train the master,
    /// and its training configuration.
    std::size_t master_labels_per_leaf = 10;
    TrainConfig master{.epochs = 20, .embed_dim = 64};
};

struct SimulationResult {
    std::string strategy;
    std::size_t budget = 0;
    double prevalence = 0.0;
    std::vector<std::size_t> positives_per_round;
    double mean_positives = 0.0;
    /// positives found / (budget * prevalence), averaged over rounds.
    double acceleration = 0.0;
};

/// Runs `rounds` independent annotation sessions on `leaf`. Each starts from
/// one known positive and one known negative; the oracle annotator answers
/// from gold_leaf; local models retrain after every batch.
SimulationResult simulate_annotation(const SimPool& pool, const std::string& leaf, Strategy strategy,
                                     std::size_t budget, std::size_t rounds, const SimulationOptions& options = {});
SimulationResult simulate_annotation(const SimPool& pool, const std::string& leaf, const std::string& name,
                                     const CustomStrategy& strategy, std::size_t budget, std::size_t rounds,
                                     const SimulationOptions& options = {});

/// Text lines describing simulation results, including the note that the
/// factor measures query efficiency rather than human time.
std::string simulation_table(std::span<const SimulationResult> results);
std::string simulation_metric_lines(std::span<const SimulationResult> results);

/// Mean over products with a gold leaf in `leaves` of the fraction of their
/// k nearest neighbours (cosine, self excluded, restricted to those same
/// products) sharing that gold leaf.
double knn_precision_at_k(const EmbeddingMatrix& embeddings, const Pool& pool, std::span<const std::string> leaves,
                          std::size_t k);

/// Writes `path` (table) and `path`.metrics ("name,value" lines).
void write_report(const std::filesystem::path& path, const std::string& table, const std::string& metrics);

}  // namespace productnet
