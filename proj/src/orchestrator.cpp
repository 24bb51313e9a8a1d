#include "productnet/orchestrator.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "productnet/error.hpp"
#include "productnet/rng.hpp"

namespace productnet {

namespace fs = std::filesystem;

nlohmann::json event_to_json(const LoopEvent& e) {
    return {{"round", e.round},
            {"started", e.started_ms},
            {"finished", e.finished_ms},
            {"label_records", e.label_records},
            {"positives", e.positives},
            {"negatives", e.negatives},
            {"classes", e.classes},
            {"train_examples", e.train_examples},
            {"test_examples", e.test_examples},
            {"test_top1", e.test_top1},
            {"embed_dim", e.embed_dim},
            {"embedding_id", e.embedding_id},
            {"checkpoint_id", e.checkpoint_id}};
}

LoopEvent event_from_json(const nlohmann::json& j) {
    try {
        LoopEvent e;
        e.round = j.at("round").get<std::size_t>();
        e.started_ms = j.at("started").get<std::int64_t>();
        e.finished_ms = j.at("finished").get<std::int64_t>();
        e.label_records = j.at("label_records").get<std::size_t>();
        e.positives = j.at("positives").get<std::size_t>();
        e.negatives = j.at("negatives").get<std::size_t>();
        e.classes = j.at("classes").get<std::size_t>();
        e.train_examples = j.at("train_examples").get<std::size_t>();
        e.test_examples = j.at("test_examples").get<std::size_t>();
        e.test_top1 = j.at("test_top1").get<double>();
        e.embed_dim = j.at("embed_dim").get<std::uint32_t>();
        e.embedding_id = j.at("embedding_id").get<std::string>();
        e.checkpoint_id = j.at("checkpoint_id").get<std::string>();
        return e;
    } catch (const nlohmann::json::exception& ex) {
        throw ParseError(std::string("bad event record: ") + ex.what(), 0);
    }
}

std::vector<LoopEvent> read_events(const fs::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw StorageError("cannot open event log " + path.string());
    }
    std::vector<LoopEvent> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        try {
            out.push_back(event_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& ex) {
            throw ParseError(ex.what(), line_no);
        } catch (const ParseError& ex) {
            throw ParseError(ex.what(), line_no);
        }
    }
    return out;
}

LoopState replay_events(std::span<const LoopEvent> events) {
    LoopState s;
    for (const auto& e : events) {
        if (e.round != s.round + 1) {
            throw FormatError("event log jumps from round " + std::to_string(s.round) + " to " +
                              std::to_string(e.round));
        }
        s.round = e.round;
        s.embedding_id = e.embedding_id;
        s.checkpoint_id = e.checkpoint_id;
        s.events.push_back(e);
    }
    return s;
}

std::string round_id(std::size_t round) {
    std::ostringstream ss;
    ss << "round-" << std::setw(3) << std::setfill('0') << round;
    return ss.str();
}

std::optional<std::size_t> MasterSnapshot::class_of(std::string_view leaf) const {
    const auto& classes = net->classes();
    auto it = std::find(classes.begin(), classes.end(), leaf);
    if (it == classes.end()) {
        return std::nullopt;
    }
    return static_cast<std::size_t>(it - classes.begin());
}

EmbeddingMatrix initial_embeddings(const Pool& pool, const ImageStore& images) {
    EmbeddingMatrix m;
    m.dim = static_cast<std::uint32_t>(initial_embedding_dim(images.dim()));
    m.ids.reserve(pool.size());
    m.values.reserve(pool.size() * m.dim);
    for (const auto& p : pool.products()) {
        m.ids.push_back(p.id);
        for (double v : initial_embedding(p, images)) {
            m.values.push_back(static_cast<float>(v));
        }
    }
    return m;
}

Loop::Loop(std::shared_ptr<const Pool> pool, std::shared_ptr<const Taxonomy> taxonomy,
           std::shared_ptr<const ImageStore> images, std::shared_ptr<LabelStore> store, LoopOptions options)
    : pool_(std::move(pool)),
      taxonomy_(std::move(taxonomy)),
      images_(std::move(images)),
      store_(std::move(store)),
      options_(std::move(options)) {
    if (!pool_ || pool_->empty()) {
        throw PreconditionError("cannot bootstrap on an empty pool");
    }
    if (!taxonomy_ || !images_ || !store_) {
        throw InvalidArgument("loop needs a taxonomy, an image store and a label store");
    }
    counts_ = pool_counts(*pool_);
    keyword_ = build_keyword_index(*pool_);
    for (const auto& leaf : taxonomy_->leaf_ids()) {
        sessions_.emplace(leaf, AnnotationSession(leaf, splitmix64(options_.seed ^ fnv1a64(leaf)), options_.mix));
    }
    for (const auto& r : store_->records()) {
        session(r.leaf_id).set_label(r.product_id, r.polarity);
    }
    if (options_.state_dir) {
        fs::create_directories(*options_.state_dir / "embeddings");
        fs::create_directories(*options_.state_dir / "checkpoints");
        if (fs::exists(events_path()) && fs::file_size(events_path()) > 0) {
            resume();
            return;
        }
    }
    embeddings_ = initial_embeddings(*pool_, *images_);
    features_ = std::make_shared<FeatureTable>(embeddings_, counts_);
    if (options_.state_dir) {
        write_embeddings(embedding_path(state_.embedding_id), embeddings_);
    }
}

void Loop::resume() {
    state_ = replay_events(read_events(events_path()));
    embeddings_ = read_embeddings(embedding_path(state_.embedding_id));
    if (embeddings_.rows() != pool_->size()) {
        throw FormatError("embedding file " + state_.embedding_id + " does not match the pool");
    }
    for (std::size_t i = 0; i < pool_->size(); ++i) {
        if (embeddings_.ids[i] != (*pool_)[i].id) {
            throw FormatError("embedding file " + state_.embedding_id + " does not match the pool order");
        }
    }
    features_ = std::make_shared<FeatureTable>(embeddings_, counts_);
    if (state_.checkpoint_id) {
        TrainingLog log;
        const auto& last = state_.events.back();
        log.epochs.push_back({0, 0.0, last.test_top1});
        log.train_examples = last.train_examples;
        log.test_examples = last.test_examples;
        master_ = snapshot_of(load_checkpoint(checkpoint_path(*state_.checkpoint_id)), std::move(log), {},
                              *state_.checkpoint_id);
    }
}

fs::path Loop::embedding_path(const std::string& id) const {
    if (!options_.state_dir) {
        throw PreconditionError("loop has no state directory");
    }
    return *options_.state_dir / "embeddings" / (id + ".pne");
}

fs::path Loop::checkpoint_path(const std::string& id) const {
    if (!options_.state_dir) {
        throw PreconditionError("loop has no state directory");
    }
    return *options_.state_dir / "checkpoints" / (id + ".pnm");
}

fs::path Loop::events_path() const {
    if (!options_.state_dir) {
        throw PreconditionError("loop has no state directory");
    }
    return *options_.state_dir / "events.jsonl";
}

AnnotationSession& Loop::session(const std::string& leaf) {
    auto it = sessions_.find(leaf);
    if (it == sessions_.end()) {
        throw NotFoundError("unknown leaf '" + leaf + "'");
    }
    return it->second;
}

const AnnotationSession& Loop::session(const std::string& leaf) const {
    return const_cast<Loop*>(this)->session(leaf);
}

LabelRecord Loop::submit_label(const std::string& leaf, const std::string& product, Polarity polarity,
                               const std::string& annotator, std::optional<std::string> auditor) {
    AnnotationSession& s = session(leaf);
    const LabelSource source = s.served_source(product).value_or(LabelSource::adhoc);
    if (source == LabelSource::master && polarity == Polarity::negative) {
        return record_master_rejection(leaf, product, annotator);
    }
    LabelRecord r{product, leaf, polarity, annotator, std::move(auditor), source, now_ms()};
    store_->append(r);
    s.set_label(product, polarity);
    return r;
}

LabelRecord Loop::record_master_rejection(const std::string& leaf, const std::string& product,
                                          const std::string& annotator) {
    AnnotationSession& s = session(leaf);
    if (s.served_source(product) != LabelSource::master) {
        throw PreconditionError("product '" + product + "' was not suggested by the master model for leaf '" + leaf +
                                "'");
    }
    LabelRecord r{product, leaf, Polarity::negative, annotator, std::nullopt, LabelSource::master, now_ms()};
    store_->append(r);
    s.set_label(product, Polarity::negative);
    s.mark_stale();
    return r;
}

bool Loop::refresh_models(const std::string& leaf) {
    AnnotationSession& s = session(leaf);
    if (!s.bootstrapped()) {
        return false;
    }
    bool trained = false;
    for (ModelKind kind : {ModelKind::lr, ModelKind::nb, ModelKind::mlp}) {
        const bool missing = s.model(kind) == nullptr;
        if ((kind == ModelKind::lr && missing) || (!missing && s.stale(kind))) {
            s.retrain(kind, *features_, options_.local);
            trained = true;
        }
    }
    return trained;
}

const BinaryModel& Loop::ensure_model(const std::string& leaf, ModelKind kind) {
    AnnotationSession& s = session(leaf);
    if (!s.bootstrapped()) {
        throw PreconditionError("leaf '" + leaf +
                                "' needs at least one positive and one negative label before active learning");
    }
    if (const BinaryModel* m = s.model(kind); m != nullptr && !s.stale(kind)) {
        return *m;
    }
    return s.retrain(kind, *features_, options_.local);
}

MasterSnapshot Loop::snapshot_of(FusionNet net, TrainingLog log, GoldSplit split, std::string checkpoint_id) const {
    MasterSnapshot m;
    m.probabilities.reserve(pool_->size());
    for (const auto& p : pool_->products()) {
        m.probabilities.push_back(predict(net, featurize(p, *images_, net.hash_dim())));
    }
    m.net = std::make_shared<const FusionNet>(std::move(net));
    m.log = std::move(log);
    m.split = std::move(split);
    m.checkpoint_id = std::move(checkpoint_id);
    return m;
}

MasterSnapshot Loop::build_master(const TrainConfig& config, const EpochCallback& on_epoch) const {
    auto trained = train_master(store_->snapshot(), *pool_, *images_, config, on_epoch);
    return snapshot_of(std::move(trained.net), std::move(trained.log), std::move(trained.split), "");
}

void Loop::install_master(MasterSnapshot master) {
    if (!master.net) {
        throw InvalidArgument("no master network to install");
    }
    if (master.checkpoint_id.empty()) {
        std::ostringstream ss;
        ss << "adhoc-" << std::setw(3) << std::setfill('0') << ++adhoc_masters_;
        master.checkpoint_id = ss.str();
    }
    if (options_.state_dir) {
        save_checkpoint(checkpoint_path(master.checkpoint_id), *master.net);
    }
    master_ = std::move(master);
}

RoundArtifacts Loop::prepare_round(const TrainConfig& config, const EpochCallback& on_epoch) const {
    RoundArtifacts a;
    a.round = state_.round + 1;
    a.event.round = a.round;
    a.event.started_ms = now_ms();
    a.event.label_records = store_->size();
    const EffectiveLabels labels = store_->snapshot();
    for (const auto& [leaf, ll] : labels) {
        a.event.positives += ll.positives.size();
        a.event.negatives += ll.negatives.size();
    }
    auto trained = train_master(labels, *pool_, *images_, config, on_epoch);
    a.embeddings = embed_pool(trained.net, *pool_, *images_);
    a.features = std::make_shared<const FeatureTable>(a.embeddings, counts_);
    a.event.classes = trained.split.classes.size();
    a.event.train_examples = trained.log.train_examples;
    a.event.test_examples = trained.log.test_examples;
    a.event.test_top1 = trained.log.epochs.empty() ? 0.0 : trained.log.epochs.back().test_top1;
    a.event.embed_dim = a.embeddings.dim;
    a.event.embedding_id = round_id(a.round);
    a.event.checkpoint_id = round_id(a.round);
    a.master = snapshot_of(std::move(trained.net), std::move(trained.log), std::move(trained.split),
                           a.event.checkpoint_id);
    return a;
}

const LoopEvent& Loop::commit_round(RoundArtifacts a) {
    if (a.round != state_.round + 1) {
        throw PreconditionError("round artifacts are for round " + std::to_string(a.round) + " but the loop is at " +
                                std::to_string(state_.round));
    }
    if (options_.state_dir) {
        save_checkpoint(checkpoint_path(a.event.checkpoint_id), *a.master.net);
        write_embeddings(embedding_path(a.event.embedding_id), a.embeddings);
    }
    embeddings_ = std::move(a.embeddings);
    features_ = std::move(a.features);
    master_ = std::move(a.master);
    for (auto& [leaf, s] : sessions_) {
        if (s.bootstrapped()) {
            s.retrain_existing(*features_, options_.local);
        } else {
            s.drop_models();
        }
    }
    a.event.finished_ms = now_ms();
    if (options_.state_dir) {
        append_event(a.event);
    }
    state_.round = a.round;
    state_.embedding_id = a.event.embedding_id;
    state_.checkpoint_id = a.event.checkpoint_id;
    state_.events.push_back(std::move(a.event));
    return state_.events.back();
}

const LoopEvent& Loop::advance_round(const TrainConfig& config, const EpochCallback& on_epoch) {
    return commit_round(prepare_round(config, on_epoch));
}

void Loop::append_event(const LoopEvent& e) {
    std::ofstream out(events_path(), std::ios::app);
    out << event_to_json(e).dump() << '\n';
    out.flush();
    if (!out) {
        throw StorageError("cannot append to event log " + events_path().string());
    }
}

}  // namespace productnet
