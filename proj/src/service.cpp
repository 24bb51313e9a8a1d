#include "productnet/service.hpp"

#include <charconv>
#include <regex>

#include <httplib.h>

#include "productnet/error.hpp"
#include "productnet/rng.hpp"
#include "productnet/text.hpp"

namespace productnet {

using json = nlohmann::json;
using Params = std::multimap<std::string, std::string>;

namespace {

Response error(int status, const std::string& message) {
    return {status, {{"error", message}}};
}

std::optional<std::string> param(const Params& params, const std::string& name) {
    auto it = params.find(name);
    if (it == params.end()) {
        return std::nullopt;
    }
    return it->second;
}

std::size_t parse_count(const std::string& s, const std::string& name) {
    std::size_t v = 0;
    auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || end != s.data() + s.size()) {
        throw InvalidArgument(name + " must be a non-negative integer, got '" + s + "'");
    }
    return v;
}

std::vector<std::string> split_ids(const std::string& s) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (start <= s.size()) {
        const auto end = std::min(s.find(',', start), s.size());
        auto id = text::trim(std::string_view(s).substr(start, end - start));
        if (!id.empty()) {
            out.emplace_back(id);
        }
        start = end + 1;
    }
    return out;
}

json labels_summary(const AnnotationSession& s) {
    return {{"positives", s.positives().size()}, {"negatives", s.negatives().size()}};
}

json optional_ms(std::optional<std::int64_t> ms) {
    return ms ? json(*ms) : json(nullptr);
}

std::string_view job_name(int s) {
    static constexpr std::string_view names[] = {"idle", "queued", "running", "done", "failed"};
    return names[s];
}

}  // namespace

Service::Service(std::unique_ptr<Loop> loop, ServiceOptions options)
    : loop_(std::move(loop)), options_(std::move(options)) {
    if (!loop_) {
        throw InvalidArgument("service needs a loop");
    }
    for (const auto& [leaf, s] : loop_->sessions()) {
        leaf_mu_.emplace(leaf, std::make_unique<std::mutex>());
    }
}

Service::~Service() {
    if (worker_.joinable()) {
        worker_.join();
    }
}

std::mutex& Service::leaf_mutex(const std::string& leaf) {
    auto it = leaf_mu_.find(leaf);
    if (it == leaf_mu_.end()) {
        throw NotFoundError("unknown leaf '" + leaf + "'");
    }
    return *it->second;
}

Response Service::handle(const std::string& method, const std::string& path, const Params& params,
                         const std::string& body) {
    static const std::regex candidates_re("^/leaves/(.+)/candidates$");
    static const std::regex labels_re("^/leaves/(.+)/labels$");
    static const std::regex stats_re("^/leaves/(.+)/stats$");
    static const std::regex predict_re("^/master/predict/(.+)$");
    static const std::regex product_re("^/products/(.+)$");
    try {
        std::smatch m;
        const bool get = method == "GET";
        const bool post = method == "POST";
        auto only = [&](bool ok) {
            if (!ok) {
                throw std::invalid_argument("method");
            }
        };
        try {
            if (path == "/taxonomy") {
                only(get);
                return taxonomy();
            }
            if (path == "/master/train") {
                only(post);
                return train_master(body);
            }
            if (path == "/master/status") {
                only(get);
                return master_status();
            }
            if (path == "/rounds/advance") {
                only(post);
                return advance_round(body);
            }
            if (std::regex_match(path, m, candidates_re)) {
                only(get);
                return candidates(m[1], params);
            }
            if (std::regex_match(path, m, labels_re)) {
                only(post);
                return submit_labels(m[1], body);
            }
            if (std::regex_match(path, m, stats_re)) {
                only(get);
                return stats(m[1]);
            }
            if (std::regex_match(path, m, predict_re)) {
                only(get);
                return predict(m[1], params);
            }
            if (std::regex_match(path, m, product_re)) {
                only(get);
                return product(m[1]);
            }
        } catch (const std::invalid_argument&) {
            return error(405, method + " is not allowed on " + path);
        }
        return error(404, "no route for " + path);
    } catch (const NotFoundError& e) {
        return error(404, e.what());
    } catch (const InvalidArgument& e) {
        return error(400, e.what());
    } catch (const ParseError& e) {
        return error(400, e.what());
    } catch (const PreconditionError& e) {
        return error(409, e.what());
    } catch (const std::exception& e) {
        return error(500, e.what());
    }
}

Response Service::taxonomy() {
    const Taxonomy& tax = loop_->taxonomy();
    json nodes = json::array();
    for (const auto& n : tax.nodes()) {
        json children = json::array();
        for (auto c : n.children) {
            children.push_back(tax.nodes()[c].id);
        }
        nodes.push_back({{"id", n.id},
                         {"name", n.name},
                         {"parent", n.parent ? json(tax.nodes()[*n.parent].id) : json(nullptr)},
                         {"children", children},
                         {"leaf", n.children.empty()}});
    }
    return {200, {{"nodes", nodes}, {"leaves", tax.leaf_ids()}}};
}

json Service::card(const Product& p, LabelSource source, std::optional<double> probability) const {
    json c = {{"id", p.id},
              {"title", p.title},
              {"brand", p.brand},
              {"description", text::truncate(p.description, options_.description_chars)},
              {"source", to_string(source)}};
    if (p.image_url) {
        c["image_url"] = *p.image_url;
    }
    if (probability) {
        c["probability"] = *probability;
    }
    if (const MasterSnapshot* master = loop_->master()) {
        const auto row = loop_->pool().index_of(p.id);
        const auto& probs = master->probabilities[*row];
        const auto top = rank_classes(probs).front();
        c["master"] = {{"leaf", master->net->classes()[top]}, {"probability", probs[top]}};
    }
    return c;
}

Response Service::candidates(const std::string& leaf, const Params& params) {
    std::shared_lock state_lock(state_mu_);
    std::lock_guard leaf_lock(leaf_mutex(leaf));
    AnnotationSession& session = loop_->session(leaf);

    const std::string method = param(params, "method").value_or("random");
    const std::size_t k = parse_count(param(params, "k").value_or("10"), "k");
    if (k < 1 || k > options_.max_k) {
        throw InvalidArgument("k must lie in [1, " + std::to_string(options_.max_k) + "]");
    }
    const IdSet labeled = session.labeled();
    const std::uint64_t batch_seed = splitmix64(session.seed() ^ (session.next_batch() + 1));
    const Pool& pool = loop_->pool();
    const FeatureTable& features = loop_->features();

    struct Pick {
        std::string id;
        std::optional<double> probability;
        std::optional<std::string> sample;
    };
    std::vector<Pick> picks;
    LabelSource source = LabelSource::random;

    if (method == "random") {
        for (auto& id : random_sample(pool, k, batch_seed, labeled)) {
            picks.push_back({std::move(id), std::nullopt, std::nullopt});
        }
    } else if (method == "keyword") {
        source = LabelSource::keyword;
        const auto query = param(params, "query").value_or("");
        if (tokenize(query).empty()) {
            throw InvalidArgument("method=keyword needs a nonempty query");
        }
        for (auto& s : keyword_search(loop_->keyword_index(), query, k, labeled)) {
            picks.push_back({std::move(s.id), s.score, std::nullopt});
        }
    } else if (method == "knn") {
        source = LabelSource::knn;
        const std::vector<std::string> positives(session.positives().begin(), session.positives().end());
        const auto centroid = features.centroid(positives);
        if (!centroid) {
            throw PreconditionError("method=knn needs at least one positive label on leaf '" + leaf + "'");
        }
        for (auto& s : knn_search(features.knn(), *centroid, k, labeled)) {
            picks.push_back({std::move(s.id), s.score, std::nullopt});
        }
    } else if (method == "active_lr" || method == "active_nb" || method == "active_mlp") {
        const ModelKind kind = method == "active_lr"   ? ModelKind::lr
                               : method == "active_nb" ? ModelKind::nb
                                                       : ModelKind::mlp;
        source = source_of(kind);
        const BinaryModel& model = loop_->ensure_model(leaf, kind);
        for (auto& t : mixed_sample(session, kind, features, k, batch_seed, labeled)) {
            const double prob = predict_proba(model, features.features(*features.row_of(t.id)));
            picks.push_back({std::move(t.id), prob, std::string(to_string(t.tag))});
        }
    } else if (method == "master") {
        source = LabelSource::master;
        const MasterSnapshot* master = loop_->master();
        if (master == nullptr) {
            throw PreconditionError("method=master needs a trained master model");
        }
        if (const auto cls = master->class_of(leaf)) {
            std::vector<ScoredId> ranked;
            for (std::size_t i = 0; i < pool.size(); ++i) {
                const auto& probs = master->probabilities[i];
                if (!labeled.contains(pool[i].id) && rank_classes(probs).front() == *cls) {
                    ranked.push_back({pool[i].id, probs[*cls]});
                }
            }
            std::sort(ranked.begin(), ranked.end(), [](const ScoredId& a, const ScoredId& b) {
                return a.score != b.score ? a.score > b.score : a.id < b.id;
            });
            ranked.resize(std::min(ranked.size(), k));
            for (auto& s : ranked) {
                picks.push_back({std::move(s.id), s.score, std::nullopt});
            }
        }
    } else if (method == "adhoc") {
        source = LabelSource::adhoc;
        const auto ids = split_ids(param(params, "ids").value_or(""));
        if (ids.empty()) {
            throw InvalidArgument("method=adhoc needs a comma-separated ids parameter");
        }
        for (const auto& id : ids) {
            if (pool.find(id) == nullptr) {
                throw NotFoundError("unknown product '" + id + "'");
            }
        }
        for (std::size_t i = 0; i < ids.size() && picks.size() < k; ++i) {
            picks.push_back({ids[i], std::nullopt, std::nullopt});
        }
    } else {
        throw InvalidArgument("unknown method '" + method + "'");
    }

    json cards = json::array();
    for (const auto& pick : picks) {
        session.record_served(pick.id, source);
        json c = card(*pool.find(pick.id), source, pick.probability);
        if (pick.sample) {
            c["sample"] = *pick.sample;
        }
        cards.push_back(std::move(c));
    }
    return {200, {{"leaf", leaf}, {"method", method}, {"round", loop_->state().round}, {"candidates", cards}}};
}

Response Service::submit_labels(const std::string& leaf, const std::string& body) {
    std::shared_lock state_lock(state_mu_);
    std::lock_guard leaf_lock(leaf_mutex(leaf));
    json req;
    try {
        req = json::parse(body);
    } catch (const json::exception& e) {
        throw InvalidArgument(std::string("request body is not JSON: ") + e.what());
    }
    if (!req.is_object() || !req.contains("labels") || !req["labels"].is_array() || req["labels"].empty()) {
        throw InvalidArgument("request needs a nonempty 'labels' array");
    }
    const std::string annotator = req.value("annotator", std::string("anonymous"));
    std::optional<std::string> auditor;
    if (req.contains("auditor") && req["auditor"].is_string()) {
        auditor = req["auditor"].get<std::string>();
    }
    AnnotationSession& session = loop_->session(leaf);
    const bool was_bootstrapped = session.bootstrapped();

    json applied = json::array();
    json errors = json::array();
    for (const auto& item : req["labels"]) {
        std::string pid;
        try {
            if (!item.is_object()) {
                throw InvalidArgument("label item must be an object");
            }
            pid = item.value("product_id", std::string());
            if (pid.empty()) {
                throw InvalidArgument("label item needs a product_id");
            }
            const Polarity polarity = parse_polarity(item.value("polarity", std::string()));
            const LabelRecord r = loop_->submit_label(leaf, pid, polarity, annotator, auditor);
            applied.push_back(
                {{"product_id", pid}, {"polarity", to_string(r.polarity)}, {"source", to_string(r.source)}});
        } catch (const std::exception& e) {
            errors.push_back({{"product_id", pid}, {"error", e.what()}});
        }
    }
    const bool trained = loop_->refresh_models(leaf);
    json out = labels_summary(session);
    out["leaf"] = leaf;
    out["applied"] = applied;
    out["errors"] = errors;
    out["bootstrapped"] = session.bootstrapped();
    out["model_trained"] = trained;
    if (!was_bootstrapped && session.bootstrapped()) {
        out["message"] = "local model trained; active learning methods are now available";
    }
    return {200, out};
}

TrainConfig Service::parse_overrides(const std::string& body) const {
    TrainConfig cfg = options_.master;
    if (text::trim(body).empty()) {
        return cfg;
    }
    json req;
    try {
        req = json::parse(body);
    } catch (const json::exception& e) {
        throw InvalidArgument(std::string("request body is not JSON: ") + e.what());
    }
    if (!req.is_object()) {
        throw InvalidArgument("training overrides must be a JSON object");
    }
    try {
        for (const auto& [key, value] : req.items()) {
            if (key == "epochs") {
                cfg.epochs = value.get<std::size_t>();
            } else if (key == "embed_dim") {
                cfg.embed_dim = value.get<std::size_t>();
            } else if (key == "seed") {
                cfg.seed = value.get<std::uint64_t>();
            } else if (key == "batch_size") {
                cfg.batch_size = value.get<std::size_t>();
            } else if (key == "step") {
                cfg.adam.step = value.get<double>();
            } else if (key == "train_fraction") {
                cfg.train_fraction = value.get<double>();
            } else {
                throw InvalidArgument("unknown training option '" + key + "'");
            }
        }
    } catch (const json::exception& e) {
        throw InvalidArgument(std::string("bad training option: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

bool Service::begin_job(const std::string& kind) {
    std::lock_guard lock(job_mu_);
    if (job_.state == JobState::queued || job_.state == JobState::running) {
        return false;
    }
    job_ = Job{};
    job_.state = JobState::queued;
    job_.kind = kind;
    return true;
}

Response Service::train_master(const std::string& body) {
    const TrainConfig cfg = parse_overrides(body);
    {
        // fail fast on a label shortfall instead of through the status endpoint
        std::shared_lock state_lock(state_mu_);
        split_gold(loop_->store().snapshot(), cfg.train_fraction, cfg.seed);
    }
    if (!begin_job("master")) {
        return error(409, "a training run is already active");
    }
    if (worker_.joinable()) {
        worker_.join();
    }
    worker_ = std::thread([this, cfg] {
        {
            std::lock_guard lock(job_mu_);
            job_.state = JobState::running;
        }
        try {
            MasterSnapshot snap;
            {
                std::shared_lock state_lock(state_mu_);
                snap = loop_->build_master(cfg, [this](const EpochLog& e) {
                    std::lock_guard lock(job_mu_);
                    job_.epochs.push_back(e);
                });
            }
            json result;
            {
                std::unique_lock state_lock(state_mu_);
                loop_->install_master(std::move(snap));
                const MasterSnapshot& m = *loop_->master();
                result = {{"checkpoint_id", m.checkpoint_id},
                          {"classes", m.net->classes()},
                          {"train_examples", m.log.train_examples},
                          {"test_examples", m.log.test_examples},
                          {"test_top1", m.log.epochs.empty() ? 0.0 : m.log.epochs.back().test_top1}};
            }
            std::lock_guard lock(job_mu_);
            job_.result = std::move(result);
            job_.state = JobState::done;
        } catch (const std::exception& e) {
            std::lock_guard lock(job_mu_);
            job_.error = e.what();
            job_.state = JobState::failed;
        }
        job_cv_.notify_all();
    });
    return {202, {{"state", "queued"}}};
}

Response Service::master_status() {
    std::lock_guard lock(job_mu_);
    json epochs = json::array();
    for (const auto& e : job_.epochs) {
        epochs.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"test_top1", e.test_top1}});
    }
    json out = {{"state", job_name(static_cast<int>(job_.state))}, {"kind", job_.kind}, {"log", epochs}};
    if (job_.error) {
        out["error"] = *job_.error;
    }
    if (!job_.result.is_null()) {
        out["result"] = job_.result;
    }
    return {200, out};
}

void Service::wait_for_training() {
    std::unique_lock lock(job_mu_);
    job_cv_.wait(lock, [this] { return job_.state != JobState::queued && job_.state != JobState::running; });
}

Response Service::predict(const std::string& product, const Params& params) {
    std::shared_lock state_lock(state_mu_);
    const auto row = loop_->pool().index_of(product);
    if (!row) {
        throw NotFoundError("unknown product '" + product + "'");
    }
    const MasterSnapshot* master = loop_->master();
    if (master == nullptr) {
        throw PreconditionError("no master model has been trained");
    }
    const std::size_t classes = master->net->class_count();
    const std::size_t k = parse_count(param(params, "k").value_or(std::to_string(std::min<std::size_t>(5, classes))),
                                      "k");
    if (k < 1 || k > classes) {
        throw InvalidArgument("k must lie in [1, " + std::to_string(classes) + "]");
    }
    const auto& probs = master->probabilities[*row];
    const auto order = rank_classes(probs);
    json preds = json::array();
    for (std::size_t i = 0; i < k; ++i) {
        preds.push_back({{"leaf", master->net->classes()[order[i]]}, {"probability", probs[order[i]]}});
    }
    return {200, {{"product_id", product}, {"checkpoint_id", master->checkpoint_id}, {"predictions", preds}}};
}

Response Service::stats(const std::string& leaf) {
    std::shared_lock state_lock(state_mu_);
    std::lock_guard leaf_lock(leaf_mutex(leaf));
    const AnnotationSession& session = loop_->session(leaf);
    std::map<std::string, LabelSource> latest;
    for (const auto& r : loop_->store().records()) {
        if (r.leaf_id == leaf) {
            latest[r.product_id] = r.source;
        }
    }
    json sources = json::object();
    for (LabelSource s : all_label_sources()) {
        sources[std::string(to_string(s))] = 0;
    }
    for (const auto& [pid, src] : latest) {
        sources[std::string(to_string(src))] = sources[std::string(to_string(src))].get<std::size_t>() + 1;
    }
    json models = json::object();
    for (ModelKind kind : {ModelKind::lr, ModelKind::nb, ModelKind::mlp}) {
        models[std::string(to_string(kind))] = {{"trained", session.model(kind) != nullptr},
                                                {"stale", session.stale(kind)}};
    }
    json out = labels_summary(session);
    out["leaf"] = leaf;
    out["sources"] = sources;
    out["models"] = models;
    out["last_trained"] = optional_ms(session.last_trained_ms());
    out["bootstrapped"] = session.bootstrapped();
    out["round"] = loop_->state().round;
    return {200, out};
}

Response Service::product(const std::string& id) {
    const Product* p = loop_->pool().find(id);
    if (p == nullptr) {
        throw NotFoundError("unknown product '" + id + "'");
    }
    return {200, product_to_json(*p, false)};
}

Response Service::advance_round(const std::string& body) {
    const TrainConfig cfg = parse_overrides(body);
    if (!begin_job("round")) {
        return error(409, "a training run is already active");
    }
    auto finish = [this](JobState state, json result, std::optional<std::string> err) {
        {
            std::lock_guard lock(job_mu_);
            job_.state = state;
            job_.result = std::move(result);
            job_.error = std::move(err);
        }
        job_cv_.notify_all();
    };
    {
        std::lock_guard lock(job_mu_);
        job_.state = JobState::running;
    }
    try {
        RoundArtifacts artifacts;
        {
            // labels keep flowing while the master trains; they are folded
            // into the retrained local models at commit
            std::shared_lock state_lock(state_mu_);
            artifacts = loop_->prepare_round(cfg, [this](const EpochLog& e) {
                std::lock_guard lock(job_mu_);
                job_.epochs.push_back(e);
            });
        }
        json event;
        {
            std::unique_lock state_lock(state_mu_);
            event = event_to_json(loop_->commit_round(std::move(artifacts)));
        }
        finish(JobState::done, event, std::nullopt);
        return {200, event};
    } catch (const PreconditionError& e) {
        finish(JobState::failed, nullptr, e.what());
        return error(409, e.what());
    } catch (const std::exception& e) {
        finish(JobState::failed, nullptr, e.what());
        throw;
    }
}

void Service::bind(httplib::Server& server) {
    auto forward = [this](const httplib::Request& req, httplib::Response& res) {
        const Params params(req.params.begin(), req.params.end());
        const Response r = handle(req.method, req.path, params, req.body);
        res.status = r.status;
        res.set_content(r.body.dump(-1, ' ', false, json::error_handler_t::replace), "application/json");
    };
    server.Get(".*", forward);
    server.Post(".*", forward);
}

}  // namespace productnet
