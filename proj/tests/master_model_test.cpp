#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <numeric>

#include "net_oracle.hpp"
#include "productnet/error.hpp"
#include "productnet/master_model.hpp"
#include "support.hpp"

using namespace productnet;
using testing_support::oracle_forward;
using testing_support::random_input;
using testing_support::random_net;

namespace {

std::vector<LabeledExample> batch_of(std::size_t n, std::size_t classes, std::uint32_t hash_dim,
                                     std::uint32_t image_dim, std::uint64_t seed) {
    std::vector<LabeledExample> out;
    for (std::size_t i = 0; i < n; ++i) {
        out.push_back({random_input(hash_dim, image_dim, seed * 100 + i), i % classes});
    }
    return out;
}

// Each class c lights bucket c of the title field and nothing else.
std::vector<LabeledExample> separable(std::size_t classes, std::size_t per_class, std::uint32_t hash_dim) {
    std::vector<LabeledExample> out;
    for (std::size_t c = 0; c < classes; ++c) {
        for (std::size_t i = 0; i < per_class; ++i) {
            FieldVectorSet x;
            for (auto& t : x.text) {
                t.dim = hash_dim;
            }
            x.text[0].entries = {{static_cast<std::uint32_t>(c), 1.0},
                                 {static_cast<std::uint32_t>(classes + i % 3), 0.5}};
            out.push_back({x, c});
        }
    }
    return out;
}

std::vector<std::string> names(std::size_t n) {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < n; ++i) {
        out.push_back("leaf" + std::to_string(i));
    }
    return out;
}

}  // namespace

TEST(Forward, ZeroNetGivesZeroLogits) {
    FusionNet net(names(3), 8, 2, 4);
    const auto x = random_input(8, 2, 1);
    const auto r = forward(net, x);
    EXPECT_EQ(r.logits, std::vector<double>(3, 0.0));
    EXPECT_EQ(r.hidden, std::vector<double>(4, 0.0));
    const auto p = predict(net, x);
    for (double v : p) {
        EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
    }
}

TEST(Forward, MatchesDenseRecompute) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const auto net = random_net(3, 4, 8, 2, seed);
        const auto x = random_input(8, 2, seed + 50);
        const auto got = forward(net, x);
        const auto want = oracle_forward(net, x);
        ASSERT_EQ(got.logits.size(), 3u);
        for (std::size_t c = 0; c < 3; ++c) {
            EXPECT_NEAR(got.logits[c], want.logits[c], 1e-10);
        }
        for (std::size_t i = 0; i < 4; ++i) {
            EXPECT_NEAR(got.hidden[i], want.h2[i], 1e-10);
        }
    }
}

TEST(Forward, ShapeChecks) {
    const auto net = random_net(3, 4, 8, 2, 1);
    auto x = random_input(8, 2, 1);
    x.text[3].dim = 16;
    EXPECT_THROW(forward(net, x), ShapeError);
    auto y = random_input(8, 3, 1);
    EXPECT_THROW(forward(net, y), ShapeError);
}

TEST(Softmax, HandValues) {
    const std::vector<double> z{1, 2, 3};
    const double s = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
    const auto p = softmax(z);
    EXPECT_NEAR(p[0], std::exp(1.0) / s, 1e-15);
    EXPECT_NEAR(p[1], std::exp(2.0) / s, 1e-15);
    EXPECT_NEAR(p[2], std::exp(3.0) / s, 1e-15);
}

TEST(Softmax, LargeLogitsStayFinite) {
    const std::vector<double> z{1000, 0};
    const auto p = softmax(z);
    EXPECT_DOUBLE_EQ(p[0], 1.0);
    EXPECT_GE(p[1], 0.0);
    EXPECT_LT(p[1], 1e-300);
    const std::vector<double> neg{-1000, -1000};
    EXPECT_DOUBLE_EQ(softmax(neg)[0], 0.5);
}

TEST(Softmax, PropertyNormalizedAndShiftInvariant) {
    Rng rng(8);
    for (int trial = 0; trial < 500; ++trial) {
        std::vector<double> z(1 + rng.below(12));
        const double scale = trial % 5 == 0 ? 1000.0 : 10.0;
        for (double& v : z) {
            v = rng.uniform(-scale, scale);
        }
        const auto p = softmax(z);
        EXPECT_NEAR(std::accumulate(p.begin(), p.end(), 0.0), 1.0, 1e-9);
        auto shifted = z;
        const double c = rng.uniform(-50, 50);
        for (double& v : shifted) {
            v += c;
        }
        const auto q = softmax(shifted);
        for (std::size_t i = 0; i < p.size(); ++i) {
            EXPECT_NEAR(p[i], q[i], 1e-12);
        }
    }
}

TEST(Loss, UniformPredictionIsLogC) {
    FusionNet net(names(4), 8, 0, 4);
    Gradient g(net);
    const auto batch = batch_of(6, 4, 8, 0, 1);
    EXPECT_NEAR(loss_and_grad(net, batch, g), std::log(4.0), 1e-15);
}

TEST(Loss, InvalidBatches) {
    FusionNet net(names(2), 8, 0, 4);
    Gradient g(net);
    EXPECT_THROW(loss_and_grad(net, {}, g), InvalidArgument);
    auto batch = batch_of(2, 2, 8, 0, 1);
    batch[1].label = 2;
    EXPECT_THROW(loss_and_grad(net, batch, g), InvalidArgument);
}

TEST(Loss, MatchesOracleLoss) {
    const auto net = random_net(3, 5, 8, 3, 4);
    const auto batch = batch_of(5, 3, 8, 3, 4);
    Gradient g(net);
    EXPECT_NEAR(loss_and_grad(net, batch, g), testing_support::oracle_loss(net, batch), 1e-12);
}

TEST(Loss, GradientMatchesFiniteDifferences) {
    const auto net = random_net(3, 4, 4, 2, 12);
    const auto batch = batch_of(3, 3, 4, 2, 12);
    const auto r = testing_support::check_gradient(net, batch, 1e-4, 1e-4);
    EXPECT_GT(r.checked, 2000u);
    EXPECT_EQ(r.failed, 0u) << "worst relative error " << r.worst;
}

TEST(Optimizer, TwentyStepsReduceLoss) {
    auto net = FusionNet::initialized(names(3), 16, 2, 8, 5);
    const auto batch = batch_of(9, 3, 16, 2, 5);
    FusionOptimizer opt(net, AdamConfig{.step = 0.01});
    Gradient g(net);
    const double first = loss_and_grad(net, batch, g);
    double last = first;
    for (int i = 0; i < 20; ++i) {
        last = loss_and_grad(net, batch, g);
        opt.step(net, g);
    }
    EXPECT_LT(last, first);
    EXPECT_EQ(opt.steps(), 20u);
}

TEST(Optimizer, UntouchedTextRowsStayPut) {
    auto net = FusionNet::initialized(names(2), 16, 0, 4, 5);
    const auto before = net;
    std::vector<LabeledExample> batch(1);
    for (auto& t : batch[0].x.text) {
        t.dim = 16;
    }
    batch[0].x.text[0].entries = {{3, 1.0}};
    FusionOptimizer opt(net, {});
    Gradient g(net);
    loss_and_grad(net, batch, g);
    opt.step(net, g);
    for (std::size_t r = 0; r < 16; ++r) {
        for (std::size_t j = 0; j < kFieldWidth; ++j) {
            if (r != 3) {
                EXPECT_EQ(net.text_proj(0)[r * kFieldWidth + j], before.text_proj(0)[r * kFieldWidth + j]);
            }
            EXPECT_EQ(net.text_proj(1)[r * kFieldWidth + j], before.text_proj(1)[r * kFieldWidth + j]);
        }
    }
}

TEST(PredictTopk, TiesGoToLowerIndex) {
    FusionNet net(names(5), 8, 0, 4);
    FieldVectorSet x;
    for (auto& t : x.text) {
        t.dim = 8;
    }
    const auto top = predict_topk(net, x, 3);
    ASSERT_EQ(top.size(), 3u);
    EXPECT_EQ(top[0].first, "leaf0");
    EXPECT_EQ(top[1].first, "leaf1");
    EXPECT_EQ(top[2].first, "leaf2");
    EXPECT_DOUBLE_EQ(top[0].second, 0.2);
    EXPECT_THROW(predict_topk(net, x, 0), InvalidArgument);
    EXPECT_THROW(predict_topk(net, x, 6), InvalidArgument);
}

TEST(PredictTopk, FullSortIsDescending) {
    const auto net = random_net(6, 4, 8, 0, 3);
    const auto x = random_input(8, 0, 3);
    const auto top = predict_topk(net, x, 6);
    double sum = 0;
    for (std::size_t i = 0; i < top.size(); ++i) {
        sum += top[i].second;
        if (i > 0) {
            EXPECT_GE(top[i - 1].second, top[i].second);
        }
    }
    EXPECT_NEAR(sum, 1.0, 1e-12);
}

TEST(RankClasses, StableOnTies) {
    const std::vector<double> p{0.1, 0.4, 0.1, 0.4};
    EXPECT_EQ(rank_classes(p), (std::vector<std::size_t>{1, 3, 0, 2}));
}

TEST(Checkpoint, RoundTripIsBitExact) {
    testing_support::TempDir dir;
    auto net = random_net(4, 6, 8, 3, 21);
    net.round_to_float();
    save_checkpoint(dir / "m.pnm", net);
    const auto back = load_checkpoint(dir / "m.pnm");
    EXPECT_EQ(back, net);
    EXPECT_EQ(back.classes(), net.classes());
    EXPECT_TRUE(std::filesystem::exists(dir / "m.pnm.classes"));
}

TEST(Checkpoint, CorruptFilesAreRejected) {
    testing_support::TempDir dir;
    auto net = random_net(2, 4, 8, 0, 2);
    save_checkpoint(dir / "m.pnm", net);
    const auto size = std::filesystem::file_size(dir / "m.pnm");
    std::filesystem::resize_file(dir / "m.pnm", size - 3);
    EXPECT_THROW(load_checkpoint(dir / "m.pnm"), FormatError);
    {
        std::ofstream(dir / "bad.pnm", std::ios::binary) << "XXXX";
    }
    EXPECT_THROW(load_checkpoint(dir / "bad.pnm"), FormatError);
    EXPECT_THROW(load_checkpoint(dir / "missing.pnm"), StorageError);
    net.w1[0] = std::nan("");
    EXPECT_THROW(save_checkpoint(dir / "nan.pnm", net), InvalidArgument);
}

TEST(TrainFusion, SeparableReachesPerfectTop1) {
    const auto train = separable(4, 6, 16);
    const auto test = separable(4, 3, 16);
    TrainConfig cfg;
    cfg.epochs = 50;
    cfg.embed_dim = 16;
    cfg.hash_dim = 16;
    cfg.batch_size = 8;
    auto [net, log] = train_fusion(names(4), 0, train, test, cfg);
    ASSERT_EQ(log.epochs.size(), 50u);
    EXPECT_DOUBLE_EQ(log.epochs.back().test_top1, 1.0);
    EXPECT_LT(log.epochs.back().train_loss, log.epochs.front().train_loss);
    EXPECT_EQ(log.train_examples, 24u);
    EXPECT_EQ(log.test_examples, 12u);
}

TEST(TrainFusion, EmbeddingWidths) {
    const auto train = separable(3, 4, 16);
    for (std::size_t e : {16u, 64u, 256u}) {
        TrainConfig cfg;
        cfg.epochs = 3;
        cfg.embed_dim = e;
        cfg.hash_dim = 16;
        std::size_t calls = 0;
        auto [net, log] = train_fusion(names(3), 0, train, train, cfg, [&](const EpochLog&) { ++calls; });
        EXPECT_EQ(calls, 3u);
        EXPECT_EQ(net.embed_dim(), e);
        EXPECT_EQ(forward(net, train[0].x).hidden.size(), e);
        for (const auto& ep : log.epochs) {
            EXPECT_TRUE(std::isfinite(ep.train_loss));
        }
    }
}

TEST(TrainFusion, DeterministicAndFloatRounded) {
    const auto train = batch_of(12, 3, 16, 2, 7);
    TrainConfig cfg;
    cfg.epochs = 4;
    cfg.embed_dim = 8;
    cfg.hash_dim = 16;
    cfg.seed = 33;
    auto a = train_fusion(names(3), 2, train, train, cfg);
    auto b = train_fusion(names(3), 2, train, train, cfg);
    EXPECT_EQ(a.first, b.first);
    EXPECT_EQ(a.second.epochs, b.second.epochs);
    auto rounded = a.first;
    rounded.round_to_float();
    EXPECT_EQ(rounded, a.first);
    cfg.seed = 34;
    EXPECT_NE(train_fusion(names(3), 2, train, train, cfg).first, a.first);
}

TEST(TrainConfig, Validation) {
    TrainConfig cfg;
    EXPECT_NO_THROW(cfg.validate());
    cfg.epochs = 0;
    EXPECT_THROW(cfg.validate(), InvalidArgument);
    cfg = {};
    cfg.train_fraction = 1.0;
    EXPECT_THROW(cfg.validate(), InvalidArgument);
    cfg = {};
    cfg.hash_dim = 100;
    EXPECT_THROW(cfg.validate(), InvalidArgument);
}

TEST(SplitGold, ClassesNeedTwoPositives) {
    EffectiveLabels labels;
    labels["a"].positives = {"p1", "p2", "p3", "p4", "p5"};
    labels["b"].positives = {"q1", "q2"};
    labels["c"].positives = {"r1"};
    labels["d"].negatives = {"s1", "s2"};
    const auto split = split_gold(labels, 0.8, 1);
    EXPECT_EQ(split.classes, (std::vector<std::string>{"a", "b"}));
    std::map<std::size_t, std::pair<int, int>> sides;
    for (const auto& [id, c] : split.train) {
        ++sides[c].first;
    }
    for (const auto& [id, c] : split.test) {
        ++sides[c].second;
    }
    EXPECT_EQ(sides[0], std::make_pair(4, 1));
    EXPECT_EQ(sides[1], std::make_pair(1, 1));
    EXPECT_EQ(split_gold(labels, 0.8, 1).train, split.train);
}

TEST(SplitGold, TooFewClasses) {
    EffectiveLabels labels;
    labels["a"].positives = {"p1", "p2"};
    labels["b"].positives = {"q1"};
    EXPECT_THROW(split_gold(labels, 0.8, 1), PreconditionError);
    EXPECT_THROW(split_gold({}, 0.8, 1), PreconditionError);
}

TEST(TrainMaster, EndToEndOnTinyPool) {
    std::vector<Product> products;
    EffectiveLabels labels;
    for (int i = 0; i < 8; ++i) {
        products.push_back(testing_support::product("g" + std::to_string(i), "gas grill burner " + std::to_string(i)));
        products.push_back(testing_support::product("f" + std::to_string(i), "fireplace mantel log " + std::to_string(i)));
        labels["home/grills"].positives.push_back("g" + std::to_string(i));
        labels["home/fireplaces"].positives.push_back("f" + std::to_string(i));
    }
    const Pool pool(products);
    TrainConfig cfg;
    cfg.epochs = 15;
    cfg.embed_dim = 16;
    cfg.hash_dim = 256;
    const auto r = train_master(labels, pool, ImageStore(), cfg);
    EXPECT_EQ(r.net.classes(), (std::vector<std::string>{"home/fireplaces", "home/grills"}));
    EXPECT_DOUBLE_EQ(r.log.epochs.back().test_top1, 1.0);
    const auto m = embed_pool(r.net, pool, ImageStore());
    EXPECT_EQ(m.dim, 16u);
    EXPECT_EQ(m.rows(), pool.size());
    EXPECT_EQ(m.ids.front(), "g0");

    labels["home/grills"].positives.push_back("nope");
    EXPECT_THROW(train_master(labels, pool, ImageStore(), cfg), NotFoundError);
}
