#include "productnet/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>

#include "productnet/error.hpp"
#include "productnet/retrieval.hpp"
#include "productnet/rng.hpp"
#include "productnet/text.hpp"

namespace productnet {

double topk_accuracy(std::span<const std::vector<std::size_t>> ranked, std::span<const std::size_t> gold,
                     std::size_t k) {
    if (ranked.size() != gold.size()) {
        throw InvalidArgument("prediction and gold lists differ in length (" + std::to_string(ranked.size()) +
                              " vs " + std::to_string(gold.size()) + ")");
    }
    if (k == 0) {
        throw InvalidArgument("k must be at least 1");
    }
    if (gold.empty()) {
        return 0.0;
    }
    std::size_t hits = 0;
    for (std::size_t i = 0; i < gold.size(); ++i) {
        const auto& r = ranked[i];
        const auto end = r.begin() + static_cast<std::ptrdiff_t>(std::min(k, r.size()));
        hits += std::find(r.begin(), end, gold[i]) != end ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(gold.size());
}

// ---------------------------------------------------------------------------
// SimPool

namespace {

std::string random_word(Rng& rng) {
    const std::size_t len = 5 + rng.below(4);
    std::string w;
    for (std::size_t i = 0; i < len; ++i) {
        w.push_back(static_cast<char>('a' + rng.below(26)));
    }
    return w;
}

std::vector<std::string> unique_words(Rng& rng, std::size_t n, std::set<std::string>& used) {
    std::vector<std::string> out;
    while (out.size() < n) {
        auto w = random_word(rng);
        if (used.insert(w).second) {
            out.push_back(std::move(w));
        }
    }
    return out;
}

std::string join(const std::vector<std::string>& words) {
    std::string out;
    for (const auto& w : words) {
        if (!out.empty()) {
            out += ' ';
        }
        out += w;
    }
    return out;
}

std::string pad_number(std::size_t n, int width) {
    std::ostringstream ss;
    ss << std::setw(width) << std::setfill('0') << n;
    return ss.str();
}

}  // namespace

SimPool generate_simpool(const SimPoolConfig& cfg) {
    if (cfg.leaves == 0 || cfg.per_leaf == 0 || cfg.signature_tokens == 0 || cfg.background_vocab == 0 ||
        cfg.group_size == 0) {
        throw InvalidArgument("SimPool parameters must be positive");
    }
    if (cfg.prevalence < 0.0 || cfg.prevalence >= 1.0) {
        throw InvalidArgument("prevalence must lie in [0, 1)");
    }
    Rng rng(cfg.seed);
    std::set<std::string> used;
    const auto background = unique_words(rng, cfg.background_vocab, used);
    const auto brands = unique_words(rng, 50, used);
    std::vector<std::vector<std::string>> private_sig(cfg.leaves);
    for (auto& sig : private_sig) {
        sig = unique_words(rng, cfg.signature_tokens, used);
    }
    const std::size_t groups = (cfg.leaves + cfg.group_size - 1) / cfg.group_size;
    std::vector<std::vector<std::string>> group_sig(groups);
    for (auto& sig : group_sig) {
        sig = unique_words(rng, cfg.signature_tokens, used);
    }

    const std::size_t target = cfg.leaves * cfg.per_leaf;
    std::size_t decoys = 0;
    if (cfg.prevalence > 0.0) {
        const auto total = static_cast<std::size_t>(std::llround(static_cast<double>(cfg.per_leaf) / cfg.prevalence));
        decoys = total > target ? total - target : 0;
    }

    std::string tax_text;
    std::vector<std::string> leaf_ids;
    for (std::size_t l = 0; l < cfg.leaves; ++l) {
        const std::string name = "Leaf" + pad_number(l, 3);
        tax_text += "Sim > " + name + "\n";
        leaf_ids.push_back("sim/" + text::lower(name));
    }
    std::optional<std::string> background_leaf;
    if (decoys > 0) {
        tax_text += "Sim > Background\n";
        background_leaf = "sim/background";
    }
    const std::size_t centroid_count = cfg.leaves + (decoys > 0 ? 1 : 0);
    std::vector<std::vector<double>> centroids(centroid_count, std::vector<double>(cfg.image_dim));
    for (auto& c : centroids) {
        for (double& x : c) {
            x = rng.normal();
        }
    }

    struct Draft {
        Product product;
        std::optional<std::vector<double>> image;
    };
    std::vector<Draft> drafts;
    drafts.reserve(target + decoys);

    auto bg = [&] { return background[rng.below(background.size())]; };
    auto make = [&](std::optional<std::size_t> leaf) {
        const std::vector<std::string>* sig = nullptr;
        std::vector<std::string> merged;
        if (leaf) {
            const auto& grp = group_sig[*leaf / cfg.group_size];
            if (rng.bernoulli(cfg.private_rate)) {
                merged = private_sig[*leaf];
                merged.insert(merged.end(), grp.begin(), grp.end());
            } else {
                merged = grp;
            }
            sig = &merged;
        }
        auto sig_token = [&] {
            if (sig == nullptr || rng.bernoulli(cfg.token_noise)) {
                return bg();
            }
            return (*sig)[rng.below(sig->size())];
        };
        auto words = [&](std::size_t n_sig, std::size_t n_bg) {
            std::vector<std::string> w;
            for (std::size_t i = 0; i < n_sig; ++i) {
                w.push_back(sig_token());
            }
            for (std::size_t i = 0; i < n_bg; ++i) {
                w.push_back(bg());
            }
            rng.shuffle(w);
            return w;
        };
        Draft d;
        Product& p = d.product;
        p.title = join(words(3, 2));
        p.description = join(words(4, 8));
        p.bullets = {join(words(1, 3)), join(words(1, 3))};
        p.brand = brands[rng.below(brands.size())];
        p.keywords[0] = words(2, 0);
        p.keywords[1] = words(0, 2);
        if (rng.bernoulli(0.5)) {
            p.keywords[2] = words(1, 0);
        }
        const std::size_t centroid = leaf ? *leaf : cfg.leaves;
        p.gold_leaf = leaf ? leaf_ids[*leaf] : *background_leaf;
        if (cfg.image_dim > 0 && rng.bernoulli(cfg.image_rate)) {
            std::vector<double> img(cfg.image_dim);
            for (std::size_t j = 0; j < img.size(); ++j) {
                img[j] = centroids[centroid][j] + cfg.image_noise * rng.normal();
            }
            d.image = std::move(img);
        }
        drafts.push_back(std::move(d));
    };
    for (std::size_t l = 0; l < cfg.leaves; ++l) {
        for (std::size_t i = 0; i < cfg.per_leaf; ++i) {
            make(l);
        }
    }
    for (std::size_t i = 0; i < decoys; ++i) {
        make(std::nullopt);
    }
    rng.shuffle(drafts);

    SimPool sim;
    sim.config = cfg;
    sim.leaves = leaf_ids;
    sim.background_leaf = background_leaf;
    sim.taxonomy = Taxonomy::parse(tax_text);
    EmbeddingMatrix images;
    images.dim = cfg.image_dim;
    const int width = static_cast<int>(std::to_string(drafts.size()).size());
    std::vector<Product> products;
    products.reserve(drafts.size());
    for (std::size_t i = 0; i < drafts.size(); ++i) {
        Product p = std::move(drafts[i].product);
        p.id = "p" + pad_number(i, width);
        if (drafts[i].image) {
            p.image_embedding_id = p.id + "-img";
            p.image_url = "https://img.example/" + p.id + ".jpg";
            images.ids.push_back(*p.image_embedding_id);
            for (double v : *drafts[i].image) {
                images.values.push_back(static_cast<float>(v));
            }
        }
        products.push_back(std::move(p));
    }
    sim.images = cfg.image_dim == 0 ? ImageStore() : ImageStore(std::move(images));
    sim.pool = Pool(std::move(products));
    return sim;
}

SimPoolConfig complementary_simpool(std::uint64_t seed) {
    SimPoolConfig c;
    c.leaves = 20;
    c.per_leaf = 40;
    c.group_size = 4;
    c.private_rate = 0.75;
    c.image_noise = 1.75;
    c.seed = seed;
    return c;
}

std::size_t SimPool::positives_of(std::string_view leaf) const {
    std::size_t n = 0;
    for (const auto& p : pool.products()) {
        n += (p.gold_leaf && *p.gold_leaf == leaf) ? 1 : 0;
    }
    return n;
}

double SimPool::prevalence(std::string_view leaf) const {
    return pool.empty() ? 0.0 : static_cast<double>(positives_of(leaf)) / static_cast<double>(pool.size());
}

EffectiveLabels SimPool::gold_labels() const {
    EffectiveLabels out;
    const std::set<std::string> targets(leaves.begin(), leaves.end());
    for (const auto& p : pool.products()) {
        if (p.gold_leaf && targets.contains(*p.gold_leaf)) {
            out[*p.gold_leaf].positives.push_back(p.id);
        }
    }
    for (auto& [leaf, ll] : out) {
        std::sort(ll.positives.begin(), ll.positives.end());
    }
    return out;
}

// ---------------------------------------------------------------------------
// Bag-of-words baseline

std::vector<double> BowModel::logits(const HashedVector& counts) const {
    std::vector<double> out(bias);
    for (const auto& [idx, w] : counts.entries) {
        const double* row = weights.data() + static_cast<std::size_t>(idx) * classes;
        for (std::size_t c = 0; c < classes; ++c) {
            out[c] += w * row[c];
        }
    }
    return out;
}

BowModel train_bow(std::span<const HashedVector> inputs, std::span<const std::size_t> labels, std::size_t classes,
                   const TrainConfig& config) {
    config.validate();
    if (inputs.size() != labels.size() || inputs.empty()) {
        throw InvalidArgument("bag-of-words training needs matching, nonempty inputs and labels");
    }
    BowModel model;
    model.hash_dim = config.hash_dim;
    model.classes = classes;
    model.weights.assign(static_cast<std::size_t>(config.hash_dim) * classes, 0.0);
    model.bias.assign(classes, 0.0);
    std::vector<double> gw(model.weights.size(), 0.0), gb(classes, 0.0);
    std::vector<double> mw(gw.size(), 0.0), vw(gw.size(), 0.0), mb(classes, 0.0), vb(classes, 0.0);
    Rng rng(splitmix64(config.seed ^ 0xB0AULL));
    std::vector<std::size_t> order(inputs.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::size_t t = 0;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        rng.shuffle(order);
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t end = std::min(order.size(), start + config.batch_size);
            const double inv = 1.0 / static_cast<double>(end - start);
            std::fill(gw.begin(), gw.end(), 0.0);
            std::fill(gb.begin(), gb.end(), 0.0);
            for (std::size_t i = start; i < end; ++i) {
                const auto& x = inputs[order[i]];
                const auto probs = softmax(model.logits(x));
                for (std::size_t c = 0; c < classes; ++c) {
                    const double d = (probs[c] - (c == labels[order[i]] ? 1.0 : 0.0)) * inv;
                    gb[c] += d;
                    for (const auto& [idx, w] : x.entries) {
                        gw[static_cast<std::size_t>(idx) * classes + c] += d * w;
                    }
                }
            }
            ++t;
            adam_update(model.weights, gw, mw, vw, t, config.adam);
            adam_update(model.bias, gb, mb, vb, t, config.adam);
        }
    }
    return model;
}

// ---------------------------------------------------------------------------
// Ablation

const AblationRow& AblationReport::row(std::string_view variant) const {
    for (const auto& r : rows) {
        if (r.variant == variant) {
            return r;
        }
    }
    throw NotFoundError("no ablation row '" + std::string(variant) + "'");
}

std::string AblationReport::table() const {
    std::ostringstream out;
    out << std::fixed << std::setprecision(1);
    out << "Classification accuracy (%), mean over " << runs << " run(s)\n";
    out << std::left << std::setw(8) << "" << std::right;
    for (const auto& r : rows) {
        out << std::setw(14) << r.variant;
    }
    out << '\n';
    auto line = [&](const char* name, auto field) {
        out << std::left << std::setw(8) << name << std::right;
        for (const auto& r : rows) {
            out << std::setw(14) << 100.0 * field(r);
        }
        out << '\n';
    };
    line("top-1", [](const AblationRow& r) { return r.top1; });
    line("top-3", [](const AblationRow& r) { return r.top3; });
    line("top-5", [](const AblationRow& r) { return r.top5; });
    out << "\nimage-only: fusion net with all text inputs zeroed\n"
           "bag-of-words: linear softmax on pooled hashed word counts (no image, no hidden layers)\n"
           "master-T: fusion net with the image input zeroed\n"
           "master-IT: full fusion net\n"
           "reference (178k-product catalog, deep encoders), master-IT: top-1 94.7 / top-3 98.2 / top-5 99.1\n";
    return out.str();
}

std::string AblationReport::metric_lines() const {
    std::ostringstream out;
    out << std::setprecision(10);
    for (const auto& r : rows) {
        out << "ablation." << r.variant << ".top1," << r.top1 << '\n';
        out << "ablation." << r.variant << ".top3," << r.top3 << '\n';
        out << "ablation." << r.variant << ".top5," << r.top5 << '\n';
    }
    return out.str();
}

namespace {

AblationRow score_rankings(std::string variant, const std::vector<std::vector<std::size_t>>& ranked,
                           const std::vector<std::size_t>& gold) {
    return {std::move(variant), topk_accuracy(ranked, gold, 1), topk_accuracy(ranked, gold, 3),
            topk_accuracy(ranked, gold, 5)};
}

}  // namespace

AblationReport run_ablation(const SimPool& sim, const TrainConfig& config) {
    config.validate();
    if (sim.leaves.size() < 2) {
        throw PreconditionError("ablation needs a pool with at least 2 leaves");
    }
    const GoldSplit split = split_gold(sim.gold_labels(), config.train_fraction, config.seed);
    std::vector<std::size_t> gold;
    for (const auto& item : split.test) {
        gold.push_back(item.second);
    }
    auto product = [&](const std::string& id) -> const Product& { return *sim.pool.find(id); };

    AblationReport report;
    auto fusion_variant = [&](const std::string& name, InputMask mask) {
        auto build = [&](const std::vector<std::pair<std::string, std::size_t>>& items) {
            std::vector<LabeledExample> out;
            for (const auto& [id, cls] : items) {
                out.push_back({featurize_for(product(id), sim.images, config.hash_dim, mask), cls});
            }
            return out;
        };
        const auto train = build(split.train);
        const auto test = build(split.test);
        const auto [net, log] = train_fusion(split.classes, sim.images.dim(), train, test, config);
        std::vector<std::vector<std::size_t>> ranked;
        for (const auto& ex : test) {
            ranked.push_back(rank_classes(predict(net, ex.x)));
        }
        report.rows.push_back(score_rankings(name, ranked, gold));
    };

    fusion_variant("image-only", {.text = false, .image = true});
    {
        std::vector<HashedVector> train_x;
        std::vector<std::size_t> train_y;
        for (const auto& [id, cls] : split.train) {
            train_x.push_back(hashed_counts(all_tokens(product(id)), config.hash_dim));
            train_y.push_back(cls);
        }
        const BowModel bow = train_bow(train_x, train_y, split.classes.size(), config);
        std::vector<std::vector<std::size_t>> ranked;
        for (const auto& [id, cls] : split.test) {
            ranked.push_back(rank_classes(softmax(bow.logits(hashed_counts(all_tokens(product(id)), config.hash_dim)))));
        }
        report.rows.push_back(score_rankings("bag-of-words", ranked, gold));
    }
    fusion_variant("master-T", {.text = true, .image = false});
    fusion_variant("master-IT", {.text = true, .image = true});
    return report;
}

AblationReport average_reports(std::span<const AblationReport> reports) {
    if (reports.empty()) {
        throw InvalidArgument("no reports to average");
    }
    AblationReport out = reports.front();
    out.runs = 0;
    for (auto& r : out.rows) {
        r.top1 = r.top3 = r.top5 = 0.0;
    }
    for (const auto& rep : reports) {
        if (rep.rows.size() != out.rows.size()) {
            throw InvalidArgument("reports have different rows");
        }
        for (std::size_t i = 0; i < rep.rows.size(); ++i) {
            out.rows[i].top1 += rep.rows[i].top1;
            out.rows[i].top3 += rep.rows[i].top3;
            out.rows[i].top5 += rep.rows[i].top5;
        }
        out.runs += rep.runs;
    }
    const auto n = static_cast<double>(reports.size());
    for (auto& r : out.rows) {
        r.top1 /= n;
        r.top3 /= n;
        r.top5 /= n;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Annotation simulation

std::string_view to_string(Strategy s) noexcept {
    switch (s) {
        case Strategy::random: return "random";
        case Strategy::keyword: return "keyword";
        case Strategy::knn: return "knn";
        case Strategy::active_lr: return "active_lr";
        case Strategy::active_nb: return "active_nb";
        case Strategy::active_mlp: return "active_mlp";
        case Strategy::master: return "master";
    }
    return "random";
}

Strategy parse_strategy(std::string_view name) {
    for (Strategy s : {Strategy::random, Strategy::keyword, Strategy::knn, Strategy::active_lr, Strategy::active_nb,
                       Strategy::active_mlp, Strategy::master}) {
        if (to_string(s) == name) {
            return s;
        }
    }
    throw InvalidArgument("unknown strategy '" + std::string(name) + "'");
}

namespace {

struct SimContext {
    Pool stripped;
    std::unique_ptr<FeatureTable> features;
};

SimContext make_context(const SimPool& sim) {
    SimContext ctx;
    std::vector<Product> products = sim.pool.products();
    for (auto& p : products) {
        p.gold_leaf.reset();
    }
    ctx.stripped = Pool(std::move(products));
    EmbeddingMatrix m;
    m.dim = static_cast<std::uint32_t>(initial_embedding_dim(sim.images.dim()));
    for (const auto& p : ctx.stripped.products()) {
        m.ids.push_back(p.id);
        for (double v : initial_embedding(p, sim.images)) {
            m.values.push_back(static_cast<float>(v));
        }
    }
    ctx.features = std::make_unique<FeatureTable>(m, pool_counts(ctx.stripped));
    return ctx;
}

std::vector<std::string> ids_of(const std::vector<ScoredId>& scored) {
    std::vector<std::string> out;
    for (const auto& s : scored) {
        out.push_back(s.id);
    }
    return out;
}

SimulationResult run_simulation(const SimPool& sim, const SimContext& ctx, const std::string& leaf,
                                const std::string& name, const CustomStrategy& strategy,
                                const std::function<void(AnnotationSession&)>& after_batch, std::size_t budget,
                                std::size_t rounds, const SimulationOptions& options) {
    if (budget == 0) {
        throw InvalidArgument("budget must be at least 1");
    }
    if (rounds == 0) {
        throw InvalidArgument("at least one seed round is required");
    }
    if (!sim.taxonomy.is_leaf(leaf)) {
        throw NotFoundError("unknown leaf '" + leaf + "'");
    }
    std::vector<std::string> gold_pos, gold_neg;
    for (const auto& p : sim.pool.products()) {
        ((p.gold_leaf && *p.gold_leaf == leaf) ? gold_pos : gold_neg).push_back(p.id);
    }
    if (gold_pos.empty() || gold_neg.empty()) {
        throw PreconditionError("simulation leaf needs both positives and negatives in the pool");
    }
    const std::set<std::string> positive_set(gold_pos.begin(), gold_pos.end());

    SimulationResult result;
    result.strategy = name;
    result.budget = budget;
    result.prevalence = sim.prevalence(leaf);
    for (std::size_t round = 0; round < rounds; ++round) {
        const std::uint64_t seed = splitmix64(sim.config.seed * 1000003ULL + round);
        Rng rng(seed);
        AnnotationSession session(leaf, seed);
        IdSet served;
        const auto& first_pos = gold_pos[rng.below(gold_pos.size())];
        const auto& first_neg = gold_neg[rng.below(gold_neg.size())];
        session.set_label(first_pos, Polarity::positive);
        session.set_label(first_neg, Polarity::negative);
        served.insert(first_pos);
        served.insert(first_neg);
        if (after_batch) {
            after_batch(session);
        }
        std::size_t spent = 0;
        std::size_t found = 0;
        while (spent < budget) {
            const std::size_t want = std::min(options.batch_size, budget - spent);
            SimulationView view{ctx.stripped, session, *ctx.features, served, splitmix64(seed ^ session.next_batch())};
            auto batch = strategy(view, want);
            std::size_t used = 0;
            for (const auto& id : batch) {
                if (used == want) {
                    break;
                }
                if (!served.insert(id).second || ctx.stripped.find(id) == nullptr) {
                    continue;  // never serve a product twice
                }
                ++used;
                const bool pos = positive_set.contains(id);
                found += pos ? 1 : 0;
                session.set_label(id, pos ? Polarity::positive : Polarity::negative);
            }
            if (used == 0) {
                break;
            }
            spent += used;
            if (after_batch) {
                after_batch(session);
            }
        }
        result.positives_per_round.push_back(found);
    }
    const double total = std::accumulate(result.positives_per_round.begin(), result.positives_per_round.end(), 0.0);
    result.mean_positives = total / static_cast<double>(rounds);
    result.acceleration = result.mean_positives / (static_cast<double>(budget) * result.prevalence);
    return result;
}

}  // namespace

SimulationResult simulate_annotation(const SimPool& sim, const std::string& leaf, const std::string& name,
                                     const CustomStrategy& strategy, std::size_t budget, std::size_t rounds,
                                     const SimulationOptions& options) {
    const SimContext ctx = make_context(sim);
    return run_simulation(sim, ctx, leaf, name, strategy, {}, budget, rounds, options);
}

SimulationResult simulate_annotation(const SimPool& sim, const std::string& leaf, Strategy strategy,
                                     std::size_t budget, std::size_t rounds, const SimulationOptions& options) {
    const SimContext ctx = make_context(sim);
    const std::string name(to_string(strategy));
    switch (strategy) {
        case Strategy::random:
            return run_simulation(
                sim, ctx, leaf, name,
                [](const SimulationView& v, std::size_t n) {
                    return random_sample(v.features.ids(), n, v.batch_seed, v.served);
                },
                {}, budget, rounds, options);
        case Strategy::keyword: {
            const InvertedIndex index = build_keyword_index(ctx.stripped);
            return run_simulation(
                sim, ctx, leaf, name,
                [&index](const SimulationView& v, std::size_t n) {
                    std::string query;
                    for (const auto& id : v.session.positives()) {
                        query += v.pool.find(id)->title + " ";
                    }
                    auto ids = ids_of(keyword_search(index, query, n, v.served));
                    if (ids.size() < n) {
                        IdSet taken = v.served;
                        taken.insert(ids.begin(), ids.end());
                        auto extra = random_sample(v.features.ids(), n - ids.size(), v.batch_seed, taken);
                        ids.insert(ids.end(), extra.begin(), extra.end());
                    }
                    return ids;
                },
                {}, budget, rounds, options);
        }
        case Strategy::knn:
            return run_simulation(
                sim, ctx, leaf, name,
                [](const SimulationView& v, std::size_t n) {
                    const std::vector<std::string> pos(v.session.positives().begin(), v.session.positives().end());
                    std::vector<std::string> ids;
                    if (auto c = v.features.centroid(pos)) {
                        ids = ids_of(knn_search(v.features.knn(), *c, n, v.served));
                    }
                    if (ids.size() < n) {
                        IdSet taken = v.served;
                        taken.insert(ids.begin(), ids.end());
                        auto extra = random_sample(v.features.ids(), n - ids.size(), v.batch_seed, taken);
                        ids.insert(ids.end(), extra.begin(), extra.end());
                    }
                    return ids;
                },
                {}, budget, rounds, options);
        case Strategy::active_lr:
        case Strategy::active_nb:
        case Strategy::active_mlp: {
            const ModelKind kind = strategy == Strategy::active_lr   ? ModelKind::lr
                                   : strategy == Strategy::active_nb ? ModelKind::nb
                                                                     : ModelKind::mlp;
            return run_simulation(
                sim, ctx, leaf, name,
                [kind](const SimulationView& v, std::size_t n) {
                    std::vector<std::string> ids;
                    for (auto& t : mixed_sample(v.session, kind, v.features, n, v.batch_seed, v.served)) {
                        ids.push_back(std::move(t.id));
                    }
                    return ids;
                },
                [&](AnnotationSession& s) {
                    if (s.bootstrapped()) {
                        s.retrain(kind, *ctx.features, options.local);
                    }
                },
                budget, rounds, options);
        }
        case Strategy::master: {
            // Train one master on a few gold positives per leaf (standing in
            // for earlier annotation rounds), then rank the pool by the
            // probability of `leaf` among products whose top-1 is `leaf`.
            EffectiveLabels labels;
            Rng rng(splitmix64(sim.config.seed ^ 0x3A57E8ULL));
            IdSet known;
            for (auto& [l, ll] : sim.gold_labels()) {
                rng.shuffle(ll.positives);
                ll.positives.resize(std::min(ll.positives.size(), options.master_labels_per_leaf));
                known.insert(ll.positives.begin(), ll.positives.end());
                labels[l] = std::move(ll);
            }
            if (sim.background_leaf) {
                std::vector<std::string> bg;
                for (const auto& p : sim.pool.products()) {
                    if (p.gold_leaf == sim.background_leaf) {
                        bg.push_back(p.id);
                    }
                }
                rng.shuffle(bg);
                bg.resize(std::min(bg.size(), options.master_labels_per_leaf));
                known.insert(bg.begin(), bg.end());
                labels[*sim.background_leaf].positives = bg;
            }
            const auto trained = train_master(labels, ctx.stripped, sim.images, options.master);
            const auto& classes = trained.net.classes();
            const auto cls_it = std::find(classes.begin(), classes.end(), leaf);
            if (cls_it == classes.end()) {
                throw PreconditionError("master model has no class for leaf '" + leaf + "'");
            }
            const auto cls = static_cast<std::size_t>(cls_it - classes.begin());
            std::vector<ScoredId> ranked;
            for (const auto& p : ctx.stripped.products()) {
                if (known.contains(p.id)) {
                    continue;
                }
                const auto probs = predict(trained.net, featurize(p, sim.images, trained.net.hash_dim()));
                if (rank_classes(probs).front() == cls) {
                    ranked.push_back({p.id, probs[cls]});
                }
            }
            std::sort(ranked.begin(), ranked.end(), [](const ScoredId& a, const ScoredId& b) {
                return a.score != b.score ? a.score > b.score : a.id < b.id;
            });
            return run_simulation(
                sim, ctx, leaf, name,
                [&ranked, &known](const SimulationView& v, std::size_t n) {
                    std::vector<std::string> ids;
                    for (const auto& s : ranked) {
                        if (ids.size() == n) {
                            break;
                        }
                        if (!v.served.contains(s.id)) {
                            ids.push_back(s.id);
                        }
                    }
                    if (ids.size() < n) {
                        IdSet taken = v.served;
                        taken.insert(ids.begin(), ids.end());
                        taken.insert(known.begin(), known.end());
                        auto extra = random_sample(v.features.ids(), n - ids.size(), v.batch_seed, taken);
                        ids.insert(ids.end(), extra.begin(), extra.end());
                    }
                    return ids;
                },
                {}, budget, rounds, options);
        }
    }
    throw InvalidArgument("unknown strategy");
}

std::string simulation_table(std::span<const SimulationResult> results) {
    std::ostringstream out;
    out << std::fixed << std::setprecision(2);
    out << std::left << std::setw(12) << "strategy" << std::right << std::setw(8) << "budget" << std::setw(12)
        << "prevalence" << std::setw(12) << "positives" << std::setw(14) << "acceleration" << '\n';
    for (const auto& r : results) {
        out << std::left << std::setw(12) << r.strategy << std::right << std::setw(8) << r.budget << std::setw(12)
            << std::setprecision(4) << r.prevalence << std::setprecision(2) << std::setw(12) << r.mean_positives
            << std::setw(14) << r.acceleration << '\n';
    }
    out << "\nacceleration = positives found / (budget x prevalence): query efficiency against the expected\n"
           "yield of random sampling, not a measurement of human labeling time.\n";
    return out.str();
}

std::string simulation_metric_lines(std::span<const SimulationResult> results) {
    std::ostringstream out;
    out << std::setprecision(10);
    for (const auto& r : results) {
        out << "simulate." << r.strategy << ".positives," << r.mean_positives << '\n';
        out << "simulate." << r.strategy << ".acceleration," << r.acceleration << '\n';
    }
    return out.str();
}

double knn_precision_at_k(const EmbeddingMatrix& embeddings, const Pool& pool, std::span<const std::string> leaves,
                          std::size_t k) {
    const std::set<std::string> wanted(leaves.begin(), leaves.end());
    EmbeddingMatrix subset;
    subset.dim = embeddings.dim;
    std::unordered_map<std::string, std::string> gold;
    for (std::size_t i = 0; i < embeddings.rows(); ++i) {
        const Product* p = pool.find(embeddings.ids[i]);
        if (p == nullptr || !p->gold_leaf || !wanted.contains(*p->gold_leaf)) {
            continue;
        }
        subset.ids.push_back(p->id);
        gold.emplace(p->id, *p->gold_leaf);
        const auto row = embeddings.row(i);
        subset.values.insert(subset.values.end(), row.begin(), row.end());
    }
    if (subset.rows() == 0) {
        return 0.0;
    }
    const KnnIndex index(subset);
    double total = 0.0;
    for (std::size_t i = 0; i < subset.rows(); ++i) {
        const auto row = subset.row(i);
        const std::vector<double> q(row.begin(), row.end());
        const auto hits = knn_search(index, q, k, IdSet{subset.ids[i]});
        std::size_t same = 0;
        for (const auto& h : hits) {
            same += gold.at(h.id) == gold.at(subset.ids[i]) ? 1 : 0;
        }
        total += static_cast<double>(same) / static_cast<double>(k);
    }
    return total / static_cast<double>(subset.rows());
}

void write_report(const std::filesystem::path& path, const std::string& table, const std::string& metrics) {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::ofstream(path, std::ios::trunc) << table;
    auto mpath = path;
    mpath += ".metrics";
    std::ofstream out(mpath, std::ios::trunc);
    out << metrics;
    if (!out) {
        throw StorageError("cannot write report " + path.string());
    }
}

}  // namespace productnet
