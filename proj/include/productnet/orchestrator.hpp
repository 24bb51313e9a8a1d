#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "productnet/corpus.hpp"
#include "productnet/featurize.hpp"
#include "productnet/local_models.hpp"
#include "productnet/master_model.hpp"
#include "productnet/retrieval.hpp"

namespace productnet {

/// One completed round, as written to the event log.
struct LoopEvent {
    std::size_t round = 0;
    std::int64_t started_ms = 0;
    std::int64_t finished_ms = 0;
    std::size_t label_records = 0;
    std::size_t positives = 0;
    std::size_t negatives = 0;
    std::size_t classes = 0;
    std::size_t train_examples = 0;
    std::size_t test_examples = 0;
    double test_top1 = 0.0;
    std::uint32_t embed_dim = 0;
    std::string embedding_id;
    std::string checkpoint_id;

    bool operator==(const LoopEvent&) const = default;
};

nlohmann::json event_to_json(const LoopEvent& e);
/// Throws ParseError on a malformed object.
LoopEvent event_from_json(const nlohmann::json& j);
/// Throws ParseError with the offending line number.
std::vector<LoopEvent> read_events(const std::filesystem::path& path);

struct LoopState {
    std::size_t round = 0;
    std::string embedding_id = "round-000";
    std::optional<std::string> checkpoint_id;
    std::vector<LoopEvent> events;

    bool operator==(const LoopState&) const = default;
};

/// Rebuilds LoopState metadata from its event log.
LoopState replay_events(std::span<const LoopEvent> events);

std::string round_id(std::size_t round);

/// A trained master plus its cached predictions over the pool.
struct MasterSnapshot {
    std::shared_ptr<const FusionNet> net;
    TrainingLog log;
    GoldSplit split;
    /// Class probabilities per pool product, pool order.
    std::vector<std::vector<double>> probabilities;
    std::string checkpoint_id;

    /// Index into the net's classes, or nullopt when the leaf is not a class.
    std::optional<std::size_t> class_of(std::string_view leaf) const;
};

/// Everything a round computes before it is swapped in.
struct RoundArtifacts {
    std::size_t round = 0;
    MasterSnapshot master;
    EmbeddingMatrix embeddings;
    std::shared_ptr<const FeatureTable> features;
    LoopEvent event;
};

struct LoopOptions {
    std::uint64_t seed = 1;
    LocalTrainConfig local{};
    MixWeights mix{};
    /// When set, embeddings, checkpoints and events.jsonl live here and a
    /// loop constructed over an existing directory resumes its last round.
    std::optional<std::filesystem::path> state_dir;
};

/// The annotate / train / re-embed loop over one pool and taxonomy.
///
/// Not internally synchronized beyond the label store. prepare_round and
/// build_master only read shared state and may run while labels are being
/// submitted; everything else needs external serialization (the service
/// serializes per leaf and makes commit_round exclusive).
class Loop {
public:
    /// Bootstraps round 0 from initial embeddings, or resumes from
    /// `options.state_dir`. Replays the label store into per-leaf sessions.
    /// Throws PreconditionError on an empty pool and BrokenReferenceError for
    /// an image reference missing from the store.
    Loop(std::shared_ptr<const Pool> pool, std::shared_ptr<const Taxonomy> taxonomy,
         std::shared_ptr<const ImageStore> images, std::shared_ptr<LabelStore> store, LoopOptions options = {});

    const Pool& pool() const noexcept { return *pool_; }
    const Taxonomy& taxonomy() const noexcept { return *taxonomy_; }
    const ImageStore& images() const noexcept { return *images_; }
    LabelStore& store() const noexcept { return *store_; }
    const LoopOptions& options() const noexcept { return options_; }

    const LoopState& state() const noexcept { return state_; }
    const EmbeddingMatrix& embeddings() const noexcept { return embeddings_; }
    const FeatureTable& features() const noexcept { return *features_; }
    const InvertedIndex& keyword_index() const noexcept { return keyword_; }
    /// nullptr before any master has been trained.
    const MasterSnapshot* master() const noexcept { return master_ ? &*master_ : nullptr; }

    /// Throws NotFoundError for an id that is not a leaf.
    AnnotationSession& session(const std::string& leaf);
    const AnnotationSession& session(const std::string& leaf) const;
    const std::map<std::string, AnnotationSession>& sessions() const noexcept { return sessions_; }

    /// Records a label for `leaf`. The source is whatever the product was
    /// served under (adhoc when never served); a negative for a product
    /// served by the master goes through record_master_rejection.
    LabelRecord submit_label(const std::string& leaf, const std::string& product, Polarity polarity,
                             const std::string& annotator, std::optional<std::string> auditor = std::nullopt);

    /// Stores a negative with source master and marks the leaf's local models
    /// stale. Throws PreconditionError unless the product was served to this
    /// leaf by the master.
    LabelRecord record_master_rejection(const std::string& leaf, const std::string& product,
                                        const std::string& annotator);

    /// Trains the logistic model on a freshly bootstrapped leaf and retrains
    /// stale ones. Returns true when any model was trained.
    bool refresh_models(const std::string& leaf);

    /// The leaf's model of `kind`, trained first if missing or stale. Throws
    /// PreconditionError before the first positive/negative pair.
    const BinaryModel& ensure_model(const std::string& leaf, ModelKind kind);

    /// Trains a master on the current label snapshot without touching loop
    /// state. Throws PreconditionError naming the shortfall when fewer than
    /// two leaves have two positives.
    MasterSnapshot build_master(const TrainConfig& config, const EpochCallback& on_epoch = {}) const;
    /// Makes `master` current (saving its checkpoint under the state dir).
    void install_master(MasterSnapshot master);

    /// Master training, full-pool re-embedding and a new feature table.
    RoundArtifacts prepare_round(const TrainConfig& config, const EpochCallback& on_epoch = {}) const;
    /// Swaps the artifacts in, retrains existing local models on the new
    /// features and appends the round's event.
    const LoopEvent& commit_round(RoundArtifacts artifacts);
    const LoopEvent& advance_round(const TrainConfig& config, const EpochCallback& on_epoch = {});

    std::filesystem::path embedding_path(const std::string& id) const;
    std::filesystem::path checkpoint_path(const std::string& id) const;
    std::filesystem::path events_path() const;

private:
    void resume();
    void append_event(const LoopEvent& e);
    MasterSnapshot snapshot_of(FusionNet net, TrainingLog log, GoldSplit split, std::string checkpoint_id) const;

    std::shared_ptr<const Pool> pool_;
    std::shared_ptr<const Taxonomy> taxonomy_;
    std::shared_ptr<const ImageStore> images_;
    std::shared_ptr<LabelStore> store_;
    LoopOptions options_;
    LoopState state_;
    std::vector<HashedVector> counts_;
    EmbeddingMatrix embeddings_;
    std::shared_ptr<const FeatureTable> features_;
    InvertedIndex keyword_;
    std::optional<MasterSnapshot> master_;
    std::map<std::string, AnnotationSession> sessions_;
    std::size_t adhoc_masters_ = 0;
};

/// Initial embeddings of every pool product, pool order.
EmbeddingMatrix initial_embeddings(const Pool& pool, const ImageStore& images);

}  // namespace productnet
