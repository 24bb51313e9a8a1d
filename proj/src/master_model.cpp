#include "productnet/master_model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "binary_io.hpp"
#include "productnet/error.hpp"
#include "productnet/rng.hpp"

namespace productnet {

void TrainConfig::validate() const {
    if (epochs < 1) {
        throw InvalidArgument("epochs must be at least 1");
    }
    if (batch_size < 1) {
        throw InvalidArgument("batch size must be at least 1");
    }
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
        throw InvalidArgument("train fraction must lie strictly between 0 and 1");
    }
    if (embed_dim < 1) {
        throw InvalidArgument("embedding dimension must be positive");
    }
    if (hash_dim == 0 || (hash_dim & (hash_dim - 1)) != 0) {
        throw InvalidArgument("hash dim must be a power of two");
    }
    if (!(adam.step > 0.0)) {
        throw InvalidArgument("Adam step must be positive");
    }
}

// ---------------------------------------------------------------------------
// FusionNet

FusionNet::FusionNet(std::vector<std::string> classes, std::uint32_t hash_dim, std::uint32_t image_dim,
                     std::size_t embed_dim)
    : image_proj(kFieldWidth * image_dim, 0.0),
      w1(embed_dim * kFusionInputs, 0.0),
      b1(embed_dim, 0.0),
      w2(embed_dim * embed_dim, 0.0),
      b2(embed_dim, 0.0),
      out_w(classes.size() * embed_dim, 0.0),
      out_b(classes.size(), 0.0),
      classes_(std::move(classes)),
      hash_dim_(hash_dim),
      image_dim_(image_dim),
      embed_dim_(embed_dim) {
    if (classes_.empty()) {
        throw InvalidArgument("fusion net needs at least one class");
    }
    if (embed_dim == 0) {
        throw InvalidArgument("embedding dimension must be positive");
    }
    for (auto& p : text_proj_) {
        p.assign(static_cast<std::size_t>(hash_dim) * kFieldWidth, 0.0);
    }
}

FusionNet FusionNet::initialized(std::vector<std::string> classes, std::uint32_t hash_dim, std::uint32_t image_dim,
                                 std::size_t embed_dim, std::uint64_t seed) {
    FusionNet net(std::move(classes), hash_dim, image_dim, embed_dim);
    Rng rng(seed);
    auto glorot = [&](std::span<double> w, std::size_t fan_in, std::size_t fan_out) {
        const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        for (double& x : w) {
            x = rng.uniform(-a, a);
        }
    };
    for (std::size_t f = 0; f < kTextFieldCount; ++f) {
        glorot(net.text_proj_[f], hash_dim, kFieldWidth);
    }
    if (image_dim > 0) {
        glorot(net.image_proj, image_dim, kFieldWidth);
    }
    glorot(net.w1, kFusionInputs, embed_dim);
    glorot(net.w2, embed_dim, embed_dim);
    glorot(net.out_w, embed_dim, net.class_count());
    return net;
}

std::vector<FusionNet::Block> FusionNet::blocks() {
    std::vector<Block> out;
    for (std::size_t f = 0; f < kTextFieldCount; ++f) {
        out.push_back({"text_proj_" + std::string(to_string(static_cast<TextField>(f))), text_proj_[f]});
    }
    out.push_back({"image_proj", image_proj});
    out.push_back({"w1", w1});
    out.push_back({"b1", b1});
    out.push_back({"w2", w2});
    out.push_back({"b2", b2});
    out.push_back({"out_w", out_w});
    out.push_back({"out_b", out_b});
    return out;
}

std::vector<std::pair<std::string, std::span<const double>>> FusionNet::blocks() const {
    std::vector<std::pair<std::string, std::span<const double>>> out;
    for (auto& b : const_cast<FusionNet*>(this)->blocks()) {
        out.emplace_back(std::move(b.name), b.values);
    }
    return out;
}

void FusionNet::round_to_float() {
    for (auto& b : blocks()) {
        for (double& x : b.values) {
            x = static_cast<double>(static_cast<float>(x));
        }
    }
}

// ---------------------------------------------------------------------------
// Forward / backward

namespace {

struct Activations {
    std::vector<double> h0, a1, h1, a2, h2, logits;
};

void check_input(const FusionNet& net, const FieldVectorSet& x) {
    for (std::size_t f = 0; f < kTextFieldCount; ++f) {
        if (x.text[f].dim != net.hash_dim()) {
            throw ShapeError("text field " + std::string(to_string(static_cast<TextField>(f))) + " has hash dim " +
                             std::to_string(x.text[f].dim) + ", net expects " + std::to_string(net.hash_dim()));
        }
    }
    if (x.image.size() != net.image_dim()) {
        throw ShapeError("image vector has length " + std::to_string(x.image.size()) + ", net expects " +
                         std::to_string(net.image_dim()));
    }
}

/// out = W x + b, W is rows x cols row-major.
void affine(std::span<const double> w, std::span<const double> b, std::span<const double> x, std::span<double> out) {
    const std::size_t cols = x.size();
    for (std::size_t r = 0; r < out.size(); ++r) {
        const double* row = w.data() + r * cols;
        double s = b[r];
        for (std::size_t c = 0; c < cols; ++c) {
            s += row[c] * x[c];
        }
        out[r] = s;
    }
}

void forward_into(const FusionNet& net, const FieldVectorSet& x, Activations& act) {
    check_input(net, x);
    const std::size_t e = net.embed_dim();
    act.h0.assign(kFusionInputs, 0.0);
    for (std::size_t f = 0; f < kTextFieldCount; ++f) {
        const auto proj = net.text_proj(f);
        double* block = act.h0.data() + f * kFieldWidth;
        for (const auto& [idx, weight] : x.text[f].entries) {
            const double* row = proj.data() + static_cast<std::size_t>(idx) * kFieldWidth;
            for (std::size_t j = 0; j < kFieldWidth; ++j) {
                block[j] += weight * row[j];
            }
        }
    }
    if (net.image_dim() > 0) {
        double* block = act.h0.data() + kTextFieldCount * kFieldWidth;
        for (std::size_t j = 0; j < kFieldWidth; ++j) {
            const double* row = net.image_proj.data() + j * net.image_dim();
            double s = 0.0;
            for (std::size_t k = 0; k < net.image_dim(); ++k) {
                s += row[k] * x.image[k];
            }
            block[j] = s;
        }
    }
    act.a1.resize(e);
    act.h1.resize(e);
    affine(net.w1, net.b1, act.h0, act.a1);
    for (std::size_t i = 0; i < e; ++i) {
        act.h1[i] = act.a1[i] > 0.0 ? act.a1[i] : 0.0;
    }
    act.a2.resize(e);
    act.h2.resize(e);
    affine(net.w2, net.b2, act.h1, act.a2);
    for (std::size_t i = 0; i < e; ++i) {
        act.h2[i] = act.a2[i] > 0.0 ? act.a2[i] : 0.0;
    }
    act.logits.resize(net.class_count());
    affine(net.out_w, net.out_b, act.h2, act.logits);
}

double loss_and_grad_impl(const FusionNet& net, std::span<const LabeledExample* const> batch, Gradient& grad) {
    if (batch.empty()) {
        throw InvalidArgument("loss_and_grad needs a nonempty batch");
    }
    const std::size_t c_count = net.class_count();
    for (const auto* ex : batch) {
        if (ex->label >= c_count) {
            throw InvalidArgument("label " + std::to_string(ex->label) + " out of range for " +
                                  std::to_string(c_count) + " classes");
        }
    }
    grad.clear();
    const std::size_t e = net.embed_dim();
    const double inv_n = 1.0 / static_cast<double>(batch.size());
    Activations act;
    std::vector<double> dlogits(c_count), dh2(e), da2(e), dh1(e), da1(e), dh0(kFusionInputs);
    double loss = 0.0;

    for (const auto* ex : batch) {
        forward_into(net, ex->x, act);
        const auto probs = softmax(act.logits);
        // log p computed from logits to stay finite when p underflows
        const double mx = *std::max_element(act.logits.begin(), act.logits.end());
        double z = 0.0;
        for (double l : act.logits) {
            z += std::exp(l - mx);
        }
        loss -= (act.logits[ex->label] - mx - std::log(z)) * inv_n;

        for (std::size_t c = 0; c < c_count; ++c) {
            dlogits[c] = (probs[c] - (c == ex->label ? 1.0 : 0.0)) * inv_n;
        }
        std::fill(dh2.begin(), dh2.end(), 0.0);
        for (std::size_t c = 0; c < c_count; ++c) {
            const double g = dlogits[c];
            grad.out_b[c] += g;
            double* gw = grad.out_w.data() + c * e;
            const double* w = net.out_w.data() + c * e;
            for (std::size_t i = 0; i < e; ++i) {
                gw[i] += g * act.h2[i];
                dh2[i] += g * w[i];
            }
        }
        for (std::size_t i = 0; i < e; ++i) {
            da2[i] = act.a2[i] > 0.0 ? dh2[i] : 0.0;
        }
        std::fill(dh1.begin(), dh1.end(), 0.0);
        for (std::size_t r = 0; r < e; ++r) {
            const double g = da2[r];
            if (g == 0.0) {
                continue;
            }
            grad.b2[r] += g;
            double* gw = grad.w2.data() + r * e;
            const double* w = net.w2.data() + r * e;
            for (std::size_t c = 0; c < e; ++c) {
                gw[c] += g * act.h1[c];
                dh1[c] += g * w[c];
            }
        }
        for (std::size_t i = 0; i < e; ++i) {
            da1[i] = act.a1[i] > 0.0 ? dh1[i] : 0.0;
        }
        std::fill(dh0.begin(), dh0.end(), 0.0);
        for (std::size_t r = 0; r < e; ++r) {
            const double g = da1[r];
            if (g == 0.0) {
                continue;
            }
            grad.b1[r] += g;
            double* gw = grad.w1.data() + r * kFusionInputs;
            const double* w = net.w1.data() + r * kFusionInputs;
            for (std::size_t c = 0; c < kFusionInputs; ++c) {
                gw[c] += g * act.h0[c];
                dh0[c] += g * w[c];
            }
        }
        for (std::size_t f = 0; f < kTextFieldCount; ++f) {
            const double* d = dh0.data() + f * kFieldWidth;
            for (const auto& [idx, weight] : ex->x.text[f].entries) {
                auto row = grad.text_proj[f].row(idx);
                for (std::size_t j = 0; j < kFieldWidth; ++j) {
                    row[j] += weight * d[j];
                }
            }
        }
        if (net.image_dim() > 0) {
            const double* d = dh0.data() + kTextFieldCount * kFieldWidth;
            for (std::size_t j = 0; j < kFieldWidth; ++j) {
                double* gw = grad.image_proj.data() + j * net.image_dim();
                for (std::size_t k = 0; k < net.image_dim(); ++k) {
                    gw[k] += d[j] * ex->x.image[k];
                }
            }
        }
    }
    return loss;
}

}  // namespace

ForwardResult forward(const FusionNet& net, const FieldVectorSet& x) {
    Activations act;
    forward_into(net, x, act);
    return {std::move(act.logits), std::move(act.h2)};
}

std::vector<double> softmax(std::span<const double> logits) {
    std::vector<double> out(logits.size());
    if (logits.empty()) {
        return out;
    }
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(logits[i] - mx);
        z += out[i];
    }
    for (double& p : out) {
        p /= z;
    }
    return out;
}

std::vector<double> predict(const FusionNet& net, const FieldVectorSet& x) { return softmax(forward(net, x).logits); }

std::vector<std::size_t> rank_classes(std::span<const double> probabilities) {
    std::vector<std::size_t> order(probabilities.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return probabilities[a] > probabilities[b]; });
    return order;
}

std::vector<std::pair<std::string, double>> predict_topk(const FusionNet& net, const FieldVectorSet& x,
                                                         std::size_t k) {
    if (k < 1 || k > net.class_count()) {
        throw InvalidArgument("k must lie in [1, " + std::to_string(net.class_count()) + "]");
    }
    const auto probs = predict(net, x);
    const auto order = rank_classes(probs);
    std::vector<std::pair<std::string, double>> out;
    for (std::size_t i = 0; i < k; ++i) {
        out.emplace_back(net.classes()[order[i]], probs[order[i]]);
    }
    return out;
}

std::span<double> SparseRows::row(std::uint32_t bucket) {
    auto [it, inserted] = slot.emplace(bucket, rows.size());
    if (inserted) {
        rows.push_back(bucket);
        values.resize(values.size() + kFieldWidth, 0.0);
    }
    return {values.data() + it->second * kFieldWidth, kFieldWidth};
}

void SparseRows::clear() {
    rows.clear();
    values.clear();
    slot.clear();
}

Gradient::Gradient(const FusionNet& net)
    : image_proj(net.image_proj.size()),
      w1(net.w1.size()),
      b1(net.b1.size()),
      w2(net.w2.size()),
      b2(net.b2.size()),
      out_w(net.out_w.size()),
      out_b(net.out_b.size()) {}

void Gradient::clear() {
    for (auto& t : text_proj) {
        t.clear();
    }
    for (auto* v : {&image_proj, &w1, &b1, &w2, &b2, &out_w, &out_b}) {
        std::fill(v->begin(), v->end(), 0.0);
    }
}

double loss_and_grad(const FusionNet& net, std::span<const LabeledExample> batch, Gradient& grad) {
    std::vector<const LabeledExample*> ptrs;
    ptrs.reserve(batch.size());
    for (const auto& ex : batch) {
        ptrs.push_back(&ex);
    }
    return loss_and_grad_impl(net, ptrs, grad);
}

// ---------------------------------------------------------------------------
// Optimizer

FusionOptimizer::FusionOptimizer(const FusionNet& net, AdamConfig config) : config_(config) {
    for (const auto* v : {&net.image_proj, &net.w1, &net.b1, &net.w2, &net.b2, &net.out_w, &net.out_b}) {
        dense_.push_back({std::vector<double>(v->size(), 0.0), std::vector<double>(v->size(), 0.0)});
    }
}

void FusionOptimizer::step(FusionNet& net, const Gradient& grad) {
    ++t_;
    for (std::size_t f = 0; f < kTextFieldCount; ++f) {
        auto& slots = row_slot_[f];
        auto& mom = text_[f];
        const auto& g = grad.text_proj[f];
        auto params = net.text_proj(f);
        for (std::size_t i = 0; i < g.rows.size(); ++i) {
            const std::uint32_t bucket = g.rows[i];
            auto [it, inserted] = slots.emplace(bucket, mom.m.size() / kFieldWidth);
            if (inserted) {
                mom.m.resize(mom.m.size() + kFieldWidth, 0.0);
                mom.v.resize(mom.v.size() + kFieldWidth, 0.0);
            }
            const std::size_t off = it->second * kFieldWidth;
            adam_update(params.subspan(static_cast<std::size_t>(bucket) * kFieldWidth, kFieldWidth),
                        std::span<const double>(g.values).subspan(i * kFieldWidth, kFieldWidth),
                        std::span<double>(mom.m).subspan(off, kFieldWidth),
                        std::span<double>(mom.v).subspan(off, kFieldWidth), t_, config_);
        }
    }
    const std::array<std::pair<std::vector<double>*, const std::vector<double>*>, 7> dense = {{
        {&net.image_proj, &grad.image_proj},
        {&net.w1, &grad.w1},
        {&net.b1, &grad.b1},
        {&net.w2, &grad.w2},
        {&net.b2, &grad.b2},
        {&net.out_w, &grad.out_w},
        {&net.out_b, &grad.out_b},
    }};
    for (std::size_t i = 0; i < dense.size(); ++i) {
        adam_update(*dense[i].first, *dense[i].second, dense_[i].m, dense_[i].v, t_, config_);
    }
}

// ---------------------------------------------------------------------------
// Training

namespace {

double top1_accuracy(const FusionNet& net, std::span<const LabeledExample> examples) {
    if (examples.empty()) {
        return 0.0;
    }
    std::size_t hits = 0;
    for (const auto& ex : examples) {
        const auto logits = forward(net, ex.x).logits;
        const auto best = static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
        hits += best == ex.label ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(examples.size());
}

}  // namespace

std::pair<FusionNet, TrainingLog> train_fusion(std::vector<std::string> classes, std::uint32_t image_dim,
                                               std::span<const LabeledExample> train,
                                               std::span<const LabeledExample> test, const TrainConfig& config,
                                               const EpochCallback& on_epoch) {
    config.validate();
    if (train.empty()) {
        throw PreconditionError("no training examples");
    }
    FusionNet net = FusionNet::initialized(std::move(classes), config.hash_dim, image_dim, config.embed_dim,
                                           splitmix64(config.seed));
    FusionOptimizer opt(net, config.adam);
    Gradient grad(net);
    Rng rng(splitmix64(config.seed ^ 0xBA7C4ULL));
    TrainingLog log;
    log.train_examples = train.size();
    log.test_examples = test.size();

    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::vector<const LabeledExample*> batch;
    for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
        rng.shuffle(order);
        double loss_sum = 0.0;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t end = std::min(order.size(), start + config.batch_size);
            batch.clear();
            for (std::size_t i = start; i < end; ++i) {
                batch.push_back(&train[order[i]]);
            }
            loss_sum += loss_and_grad_impl(net, batch, grad) * static_cast<double>(batch.size());
            opt.step(net, grad);
        }
        EpochLog entry{epoch, loss_sum / static_cast<double>(train.size()), top1_accuracy(net, test)};
        log.epochs.push_back(entry);
        if (on_epoch) {
            on_epoch(entry);
        }
    }
    net.round_to_float();
    if (!log.epochs.empty()) {
        log.epochs.back().test_top1 = top1_accuracy(net, test);
    }
    return {std::move(net), std::move(log)};
}

FieldVectorSet featurize_for(const Product& p, const ImageStore& images, std::uint32_t hash_dim, InputMask mask) {
    FieldVectorSet fv;
    if (mask.text) {
        fv = featurize(p, images, hash_dim);
    } else {
        for (auto& t : fv.text) {
            t.dim = hash_dim;
        }
        fv.image = image_vector(p, images);
    }
    if (!mask.image) {
        std::fill(fv.image.begin(), fv.image.end(), 0.0);
    }
    return fv;
}

GoldSplit split_gold(const EffectiveLabels& labels, double train_fraction, std::uint64_t seed) {
    GoldSplit split;
    Rng rng(splitmix64(seed ^ 0x5B117ULL));
    for (const auto& [leaf, ll] : labels) {
        if (ll.positives.size() < 2) {
            continue;
        }
        const std::size_t cls = split.classes.size();
        split.classes.push_back(leaf);
        auto ids = ll.positives;
        rng.shuffle(ids);
        const auto n = static_cast<double>(ids.size());
        const auto n_train = std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(n * train_fraction)), 1,
                                                     ids.size() - 1);
        for (std::size_t i = 0; i < ids.size(); ++i) {
            (i < n_train ? split.train : split.test).emplace_back(ids[i], cls);
        }
    }
    if (split.classes.size() < 2) {
        std::size_t with_one = 0;
        for (const auto& [leaf, ll] : labels) {
            with_one += ll.positives.size() == 1 ? 1 : 0;
        }
        throw PreconditionError("master training needs at least 2 leaves with at least 2 positives each; found " +
                                std::to_string(split.classes.size()) + " (plus " + std::to_string(with_one) +
                                " leaves with a single positive)");
    }
    return split;
}

MasterTrainResult train_master(const EffectiveLabels& labels, const Pool& pool, const ImageStore& images,
                               const TrainConfig& config, const EpochCallback& on_epoch, InputMask mask) {
    config.validate();
    GoldSplit split = split_gold(labels, config.train_fraction, config.seed);
    auto build = [&](const std::vector<std::pair<std::string, std::size_t>>& items) {
        std::vector<LabeledExample> out;
        out.reserve(items.size());
        for (const auto& [id, cls] : items) {
            const Product* p = pool.find(id);
            if (p == nullptr) {
                throw NotFoundError("labeled product '" + id + "' is not in the pool");
            }
            out.push_back({featurize_for(*p, images, config.hash_dim, mask), cls});
        }
        return out;
    };
    const auto train = build(split.train);
    const auto test = build(split.test);
    auto [net, log] = train_fusion(split.classes, images.dim(), train, test, config, on_epoch);
    return {std::move(net), std::move(log), std::move(split)};
}

std::vector<double> embed(const FusionNet& net, const Product& p, const ImageStore& images) {
    return forward(net, featurize(p, images, net.hash_dim())).hidden;
}

EmbeddingMatrix embed_pool(const FusionNet& net, const Pool& pool, const ImageStore& images) {
    EmbeddingMatrix m;
    m.dim = static_cast<std::uint32_t>(net.embed_dim());
    m.ids.reserve(pool.size());
    m.values.reserve(pool.size() * net.embed_dim());
    for (const auto& p : pool.products()) {
        m.ids.push_back(p.id);
        for (double v : embed(net, p, images)) {
            m.values.push_back(static_cast<float>(v));
        }
    }
    return m;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr std::uint8_t kCheckpointVersion = 1;

std::filesystem::path classes_sidecar(const std::filesystem::path& path) {
    auto p = path;
    p += ".classes";
    return p;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const FusionNet& net) {
    {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out.write("PNM1", 4);
        out.put(static_cast<char>(kCheckpointVersion));
        for (std::uint32_t v : {static_cast<std::uint32_t>(kTextFieldCount), net.hash_dim(),
                                static_cast<std::uint32_t>(kFieldWidth), net.image_dim(),
                                static_cast<std::uint32_t>(kFusionInputs), static_cast<std::uint32_t>(net.embed_dim()),
                                static_cast<std::uint32_t>(net.class_count())}) {
            detail::put_u32(out, v);
        }
        std::vector<float> buf;
        for (const auto& [name, values] : net.blocks()) {
            buf.resize(values.size());
            for (std::size_t i = 0; i < values.size(); ++i) {
                buf[i] = static_cast<float>(values[i]);
                if (!std::isfinite(buf[i])) {
                    throw InvalidArgument("non-finite parameter in block " + name);
                }
            }
            detail::put_f32s(out, buf);
        }
        if (!out) {
            throw StorageError("cannot write checkpoint " + path.string());
        }
    }
    std::ofstream classes(classes_sidecar(path), std::ios::trunc);
    for (const auto& c : net.classes()) {
        classes << c << '\n';
    }
    if (!classes) {
        throw StorageError("cannot write class sidecar for " + path.string());
    }
}

FusionNet load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw StorageError("cannot open checkpoint " + path.string());
    }
    detail::expect_magic(in, "PNM1");
    const int version = in.get();
    if (version != kCheckpointVersion) {
        throw FormatError("unsupported checkpoint version " + std::to_string(version));
    }
    const auto fields = detail::get_u32(in, "field count");
    const auto hash_dim = detail::get_u32(in, "hash dim");
    const auto width = detail::get_u32(in, "field width");
    const auto image_dim = detail::get_u32(in, "image dim");
    const auto fusion = detail::get_u32(in, "fusion width");
    const auto embed_dim = detail::get_u32(in, "embedding dim");
    const auto class_count = detail::get_u32(in, "class count");
    if (fields != kTextFieldCount || width != kFieldWidth || fusion != kFusionInputs) {
        throw FormatError("checkpoint shape table does not match this build");
    }
    if (hash_dim == 0 || (hash_dim & (hash_dim - 1)) != 0 || embed_dim == 0 || class_count == 0) {
        throw FormatError("checkpoint shape table is invalid");
    }
    std::ifstream cls(classes_sidecar(path));
    if (!cls) {
        throw FormatError("missing class sidecar " + classes_sidecar(path).string());
    }
    std::vector<std::string> classes;
    std::string line;
    while (std::getline(cls, line)) {
        classes.push_back(line);
    }
    if (classes.size() != class_count) {
        throw FormatError("class sidecar lists " + std::to_string(classes.size()) + " classes, header says " +
                          std::to_string(class_count));
    }
    FusionNet net(std::move(classes), hash_dim, image_dim, embed_dim);
    std::vector<float> buf;
    for (auto& block : net.blocks()) {
        buf.resize(block.values.size());
        detail::get_f32s(in, buf, block.name.c_str());
        for (std::size_t i = 0; i < buf.size(); ++i) {
            block.values[i] = buf[i];
        }
    }
    if (in.peek() != std::char_traits<char>::eof()) {
        throw FormatError("trailing bytes after checkpoint parameters");
    }
    return net;
}

}  // namespace productnet
