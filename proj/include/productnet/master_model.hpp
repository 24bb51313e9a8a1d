#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "productnet/adam.hpp"
#include "productnet/corpus.hpp"
#include "productnet/featurize.hpp"

namespace productnet {

/// Output width of each per-field encoder.
inline constexpr std::size_t kFieldWidth = 64;
/// Seven text blocks plus the image block.
inline constexpr std::size_t kFusionInputs = (kTextFieldCount + 1) * kFieldWidth;
/// Hash dimension used by the master model's text encoders.
inline constexpr std::uint32_t kMasterHashDim = 1u << 14;

struct TrainConfig {
    std::size_t epochs = 50;
    std::size_t batch_size = 32;
    AdamConfig adam{};
    std::uint64_t seed = 1;
    std::size_t embed_dim = 256;
    double train_fraction = 0.8;
    std::uint32_t hash_dim = kMasterHashDim;

    /// Throws InvalidArgument on out-of-range values.
    void validate() const;
};

/// Parameters of the multi-modal fusion classifier:
///   h0 = [P_1 t_1, ..., P_7 t_7, P_img image]        (512)
///   h1 = relu(W1 h0 + b1), h2 = relu(W2 h1 + b2)     (E each)
///   logits = V h2 + b,  p(c|x) = softmax(logits)_c
/// Text projections are stored one 64-wide row per hash bucket so a sparse
/// input touches only its active rows.
class FusionNet {
public:
    FusionNet() = default;
    /// All-zero parameters.
    FusionNet(std::vector<std::string> classes, std::uint32_t hash_dim, std::uint32_t image_dim,
              std::size_t embed_dim);

    /// Glorot-uniform weights, zero biases.
    static FusionNet initialized(std::vector<std::string> classes, std::uint32_t hash_dim, std::uint32_t image_dim,
                                 std::size_t embed_dim, std::uint64_t seed);

    std::size_t class_count() const noexcept { return classes_.size(); }
    std::size_t embed_dim() const noexcept { return embed_dim_; }
    std::uint32_t hash_dim() const noexcept { return hash_dim_; }
    std::uint32_t image_dim() const noexcept { return image_dim_; }
    const std::vector<std::string>& classes() const noexcept { return classes_; }

    /// hash_dim x 64, row per bucket.
    std::span<double> text_proj(std::size_t field) { return text_proj_[field]; }
    std::span<const double> text_proj(std::size_t field) const { return text_proj_[field]; }
    /// 64 x image_dim.
    std::vector<double> image_proj;
    /// E x 512.
    std::vector<double> w1;
    std::vector<double> b1;
    /// E x E.
    std::vector<double> w2;
    std::vector<double> b2;
    /// C x E.
    std::vector<double> out_w;
    std::vector<double> out_b;

    struct Block {
        std::string name;
        std::span<double> values;
    };
    /// Every parameter block in checkpoint order.
    std::vector<Block> blocks();
    std::vector<std::pair<std::string, std::span<const double>>> blocks() const;

    /// Rounds every parameter to the nearest float32, making checkpoint
    /// save/load an exact round trip.
    void round_to_float();

    bool operator==(const FusionNet&) const = default;

private:
    std::vector<std::string> classes_;
    std::uint32_t hash_dim_ = 0;
    std::uint32_t image_dim_ = 0;
    std::size_t embed_dim_ = 0;
    std::array<std::vector<double>, kTextFieldCount> text_proj_;
};

struct ForwardResult {
    std::vector<double> logits;
    std::vector<double> hidden;
};

/// Throws ShapeError when the input does not match the net.
ForwardResult forward(const FusionNet& net, const FieldVectorSet& x);

/// Max-subtracted softmax.
std::vector<double> softmax(std::span<const double> logits);

std::vector<double> predict(const FusionNet& net, const FieldVectorSet& x);

/// (leaf id, probability) for the k most probable classes; ties go to the
/// lower class index. Requires 1 <= k <= C.
std::vector<std::pair<std::string, double>> predict_topk(const FusionNet& net, const FieldVectorSet& x,
                                                         std::size_t k);

/// Class indices ordered by descending probability, ties by index.
std::vector<std::size_t> rank_classes(std::span<const double> probabilities);

struct LabeledExample {
    FieldVectorSet x;
    std::size_t label = 0;  // 0-based class index
};

/// Sparse rows of a text-projection gradient, in first-touch order.
struct SparseRows {
    std::vector<std::uint32_t> rows;
    std::vector<double> values;  // rows.size() x 64
    std::unordered_map<std::uint32_t, std::size_t> slot;

    std::span<double> row(std::uint32_t bucket);
    void clear();
};

struct Gradient {
    std::array<SparseRows, kTextFieldCount> text_proj;
    std::vector<double> image_proj, w1, b1, w2, b2, out_w, out_b;

    explicit Gradient(const FusionNet& net);
    void clear();
};

/// Mean cross-entropy over the batch and its gradient by backpropagation.
/// Throws InvalidArgument on an empty batch or an out-of-range label.
double loss_and_grad(const FusionNet& net, std::span<const LabeledExample> batch, Gradient& grad);

/// Adam state with lazily allocated moments for text-projection rows: a row's
/// moments are created, and the row updated, only on steps whose batch
/// touches it.
class FusionOptimizer {
public:
    FusionOptimizer(const FusionNet& net, AdamConfig config);
    void step(FusionNet& net, const Gradient& grad);
    std::size_t steps() const noexcept { return t_; }

private:
    struct Moments {
        std::vector<double> m, v;
    };
    AdamConfig config_;
    std::size_t t_ = 0;
    std::array<std::unordered_map<std::uint32_t, std::size_t>, kTextFieldCount> row_slot_;
    std::array<Moments, kTextFieldCount> text_;
    std::vector<Moments> dense_;
};

struct EpochLog {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double test_top1 = 0.0;
    bool operator==(const EpochLog&) const = default;
};

struct TrainingLog {
    std::vector<EpochLog> epochs;
    std::size_t train_examples = 0;
    std::size_t test_examples = 0;
};

using EpochCallback = std::function<void(const EpochLog&)>;

/// Mini-batch Adam over `train`, evaluating top-1 on `test` after each
/// epoch. The returned net is the final epoch's, rounded to float32.
std::pair<FusionNet, TrainingLog> train_fusion(std::vector<std::string> classes, std::uint32_t image_dim,
                                               std::span<const LabeledExample> train,
                                               std::span<const LabeledExample> test, const TrainConfig& config,
                                               const EpochCallback& on_epoch = {});

/// Which modalities reach the network; a disabled one is fed as zeros.
struct InputMask {
    bool text = true;
    bool image = true;
};

FieldVectorSet featurize_for(const Product& p, const ImageStore& images, std::uint32_t hash_dim,
                             InputMask mask = {});

struct GoldSplit {
    std::vector<std::string> classes;
    /// (product id, class index)
    std::vector<std::pair<std::string, std::size_t>> train;
    std::vector<std::pair<std::string, std::size_t>> test;
};

/// Classes are leaves with at least two positives. Each class's positives
/// are shuffled with `seed` and split by `train_fraction`, keeping at least
/// one product on each side. Throws PreconditionError with fewer than two
/// such leaves.
GoldSplit split_gold(const EffectiveLabels& labels, double train_fraction, std::uint64_t seed);

struct MasterTrainResult {
    FusionNet net;
    TrainingLog log;
    GoldSplit split;
};

/// Trains the master model on the positives of a gold snapshot.
MasterTrainResult train_master(const EffectiveLabels& labels, const Pool& pool, const ImageStore& images,
                               const TrainConfig& config, const EpochCallback& on_epoch = {},
                               InputMask mask = {});

std::vector<double> embed(const FusionNet& net, const Product& p, const ImageStore& images);

/// Last-hidden-layer embedding of every pool product, in pool order.
EmbeddingMatrix embed_pool(const FusionNet& net, const Pool& pool, const ImageStore& images);

/// "PNM1", version byte, u32 shape table, float32 LE parameter blocks; class
/// ids in `<path>.classes`.
void save_checkpoint(const std::filesystem::path& path, const FusionNet& net);
FusionNet load_checkpoint(const std::filesystem::path& path);

}  // namespace productnet
