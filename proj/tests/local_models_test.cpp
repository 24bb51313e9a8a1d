#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "productnet/error.hpp"
#include "productnet/local_models.hpp"
#include "productnet/rng.hpp"

using namespace productnet;

namespace {

struct Dataset {
    std::vector<std::vector<double>> dense;
    std::vector<HashedVector> counts;
    std::vector<Polarity> labels;

    std::vector<ProductFeatures> features() const {
        std::vector<ProductFeatures> out;
        for (std::size_t i = 0; i < dense.size(); ++i) {
            out.push_back({dense[i], &counts[i]});
        }
        return out;
    }
};

HashedVector counts_of(std::vector<std::pair<std::uint32_t, double>> entries) {
    HashedVector v;
    v.dim = 16;
    v.entries = std::move(entries);
    return v;
}

Dataset line_data() {
    Dataset d;
    for (double x : {-2.0, -1.0, 1.0, 2.0}) {
        d.dense.push_back({x});
        d.counts.emplace_back();
        d.labels.push_back(x > 0 ? Polarity::positive : Polarity::negative);
    }
    return d;
}

// Two overlapping Gaussian blobs in 3 dims.
Dataset blobs(std::uint64_t seed, std::size_t n) {
    Rng rng(seed);
    Dataset d;
    for (std::size_t i = 0; i < n; ++i) {
        const bool pos = i % 2 == 0;
        std::vector<double> x(3);
        for (double& v : x) {
            v = rng.normal() + (pos ? 0.8 : -0.8);
        }
        d.dense.push_back(x);
        d.counts.emplace_back();
        d.labels.push_back(pos ? Polarity::positive : Polarity::negative);
    }
    return d;
}

// n rows of 2-d points; row i lies at angle i degrees.
FeatureTable arc_table(std::size_t n) {
    EmbeddingMatrix m;
    m.dim = 2;
    for (std::size_t i = 0; i < n; ++i) {
        m.ids.push_back("p" + std::to_string(100 + i));
        const double a = static_cast<double>(i) * 3.14159265358979 / 180.0;
        m.values.push_back(static_cast<float>(std::cos(a)));
        m.values.push_back(static_cast<float>(std::sin(a)));
    }
    return FeatureTable(m, std::vector<HashedVector>(n));
}

}  // namespace

TEST(LogisticRegression, SeparatesALine) {
    const auto d = line_data();
    const auto xs = d.features();
    const auto m = train_local(ModelKind::lr, xs, d.labels, 1);
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const double p = predict_proba(m, xs[i]);
        if (d.labels[i] == Polarity::positive) {
            EXPECT_GT(p, 0.5);
        } else {
            EXPECT_LT(p, 0.5);
        }
    }
    EXPECT_EQ(m.input_dim(), 1u);
}

TEST(LogisticRegression, ZeroModelIsHalf) {
    BinaryModel m;
    m.params = LogisticParams{{0.0, 0.0}, 0.0};
    const std::vector<double> x{3.0, -7.0};
    EXPECT_DOUBLE_EQ(predict_proba(m, {x, nullptr}), 0.5);
}

TEST(LogisticRegression, SigmoidOfAffineScore) {
    BinaryModel m;
    m.params = LogisticParams{{1.0, -2.0}, 0.5};
    const std::vector<double> x{1.0, 0.25};
    EXPECT_NEAR(predict_proba(m, {x, nullptr}), 1.0 / (1.0 + std::exp(-1.0)), 1e-15);
    const std::vector<double> far{-1000.0, 0.0};
    EXPECT_EQ(predict_proba(m, {far, nullptr}), 0.0);
}

TEST(LogisticRegression, LossSettlesAfterWarmup) {
    const auto d = blobs(3, 60);
    const auto xs = d.features();
    const auto m = train_local(ModelKind::lr, xs, d.labels, 1);
    ASSERT_GT(m.loss_history.size(), 20u);
    for (std::size_t i = 11; i < m.loss_history.size(); ++i) {
        EXPECT_LE(m.loss_history[i], m.loss_history[i - 1] + 1e-9) << "iteration " << i;
    }
    EXPECT_LT(m.loss_history.back(), m.loss_history.front());
}

TEST(LogisticRegression, Deterministic) {
    const auto d = blobs(5, 40);
    const auto xs = d.features();
    const auto a = train_local(ModelKind::lr, xs, d.labels, 9);
    const auto b = train_local(ModelKind::lr, xs, d.labels, 9);
    EXPECT_EQ(std::get<LogisticParams>(a.params).weights, std::get<LogisticParams>(b.params).weights);
    EXPECT_EQ(a.loss_history, b.loss_history);
}

TEST(LocalModels, SingleClassIsRejected) {
    auto d = line_data();
    std::fill(d.labels.begin(), d.labels.end(), Polarity::positive);
    const auto xs = d.features();
    for (auto kind : {ModelKind::lr, ModelKind::nb, ModelKind::mlp}) {
        EXPECT_THROW(train_local(kind, xs, d.labels, 1), PreconditionError) << to_string(kind);
    }
}

TEST(LocalModels, DimensionMismatch) {
    const auto d = line_data();
    const auto xs = d.features();
    const std::vector<double> wide{1.0, 2.0};
    for (auto kind : {ModelKind::lr, ModelKind::mlp}) {
        const auto m = train_local(kind, xs, d.labels, 1);
        EXPECT_THROW(predict_proba(m, {wide, nullptr}), ShapeError);
    }
    auto ragged = xs;
    ragged[2].dense = wide;
    EXPECT_THROW(train_local(ModelKind::lr, ragged, d.labels, 1), ShapeError);
    EXPECT_THROW(train_local(ModelKind::lr, xs, std::span(d.labels).first(3), 1), InvalidArgument);
}

TEST(NaiveBayes, SymmetricDataGivesHalf) {
    Dataset d;
    d.counts = {counts_of({{1, 1.0}}), counts_of({{2, 1.0}})};
    d.dense = {{}, {}};
    d.labels = {Polarity::positive, Polarity::negative};
    const auto m = train_local(ModelKind::nb, d.features(), d.labels, 1);
    const auto both = counts_of({{1, 1.0}, {2, 1.0}});
    EXPECT_NEAR(predict_proba(m, {{}, &both}), 0.5, 1e-15);
    const auto unseen = counts_of({{7, 4.0}});
    EXPECT_NEAR(predict_proba(m, {{}, &unseen}), 0.5, 1e-15);
}

TEST(NaiveBayes, HandComputedPosterior) {
    // positives {1:2, 2:1} {1:1, 3:1}, negatives {2:2, 4:1} {3:1, 4:2}
    // vocab 4, alpha 1: P(1|+) = 4/9, P(4|+) = 1/9, P(1|-) = 1/10, P(4|-) = 4/10
    // query {1, 4} -> (4/81) / (4/81 + 4/100) = 100/181
    Dataset d;
    d.counts = {counts_of({{1, 2.0}, {2, 1.0}}), counts_of({{1, 1.0}, {3, 1.0}}), counts_of({{2, 2.0}, {4, 1.0}}),
                counts_of({{3, 1.0}, {4, 2.0}})};
    d.dense.assign(4, {});
    d.labels = {Polarity::positive, Polarity::positive, Polarity::negative, Polarity::negative};
    const auto m = train_local(ModelKind::nb, d.features(), d.labels, 1);
    const auto q = counts_of({{1, 1.0}, {4, 1.0}, {9, 5.0}});
    EXPECT_NEAR(predict_proba(m, {{}, &q}), 100.0 / 181.0, 1e-12);
}

TEST(NaiveBayes, NeedsCounts) {
    const auto d = line_data();
    std::vector<ProductFeatures> xs = d.features();
    xs[0].counts = nullptr;
    EXPECT_THROW(train_local(ModelKind::nb, xs, d.labels, 1), InvalidArgument);
}

TEST(Mlp, ZeroModelIsHalf) {
    BinaryModel m;
    m.kind = ModelKind::mlp;
    m.params = MlpParams{2, 3, std::vector<double>(6, 0.0), std::vector<double>(3, 0.0), std::vector<double>(3, 0.0), 0.0};
    const std::vector<double> x{5.0, -1.0};
    EXPECT_DOUBLE_EQ(predict_proba(m, {x, nullptr}), 0.5);
}

TEST(Mlp, FitsBlobsAndIsDeterministic) {
    const auto d = blobs(11, 80);
    const auto xs = d.features();
    LocalTrainConfig cfg;
    cfg.mlp_hidden = 8;
    const auto a = train_local(ModelKind::mlp, xs, d.labels, 4, cfg);
    const auto b = train_local(ModelKind::mlp, xs, d.labels, 4, cfg);
    EXPECT_EQ(std::get<MlpParams>(a.params).w1, std::get<MlpParams>(b.params).w1);
    std::size_t right = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        right += (predict_proba(a, xs[i]) > 0.5) == (d.labels[i] == Polarity::positive);
    }
    EXPECT_GE(right, 64u);
    EXPECT_LT(a.loss_history.back(), a.loss_history.front());
}

TEST(RankCandidates, Modes) {
    const std::vector<ScoredId> probs{{"a", 0.9}, {"b", 0.5}, {"c", 0.1}};
    EXPECT_EQ(rank_candidates(probs, SuggestMode::positive, 3), (std::vector<std::string>{"a", "b", "c"}));
    EXPECT_EQ(rank_candidates(probs, SuggestMode::negative, 3), (std::vector<std::string>{"c", "b", "a"}));
    EXPECT_EQ(rank_candidates(probs, SuggestMode::ambiguous, 1), (std::vector<std::string>{"b"}));
    EXPECT_EQ(rank_candidates(probs, SuggestMode::positive, 5, {"a"}), (std::vector<std::string>{"b", "c"}));
    EXPECT_TRUE(rank_candidates(probs, SuggestMode::positive, 0).empty());
}

TEST(RankCandidates, TiesByID) {
    const std::vector<ScoredId> probs{{"z", 0.7}, {"m", 0.7}, {"a", 0.7}};
    EXPECT_EQ(rank_candidates(probs, SuggestMode::positive, 2), (std::vector<std::string>{"a", "m"}));
}

TEST(LargestRemainder, Quotas) {
    const std::vector<double> w{0.40, 0.30, 0.15, 0.15};
    EXPECT_EQ(largest_remainder(w, 20), (std::vector<std::size_t>{8, 6, 3, 3}));
    EXPECT_EQ(largest_remainder(w, 10), (std::vector<std::size_t>{4, 3, 2, 1}));
    EXPECT_EQ(largest_remainder(w, 0), (std::vector<std::size_t>{0, 0, 0, 0}));
    for (std::size_t total = 1; total < 60; ++total) {
        const auto q = largest_remainder(w, total);
        std::size_t sum = 0;
        for (std::size_t i = 0; i < q.size(); ++i) {
            sum += q[i];
            EXPECT_LE(std::abs(static_cast<double>(q[i]) - w[i] * static_cast<double>(total)), 1.0);
        }
        EXPECT_EQ(sum, total);
    }
}

TEST(AnnotationSession, LabelsSupersedeAndGateModels) {
    const auto table = arc_table(30);
    AnnotationSession s("leaf", 1);
    EXPECT_FALSE(s.bootstrapped());
    EXPECT_THROW(s.retrain(ModelKind::lr, table), PreconditionError);
    s.set_label("p100", Polarity::positive);
    s.set_label("p129", Polarity::negative);
    ASSERT_TRUE(s.bootstrapped());
    s.retrain(ModelKind::lr, table);
    ASSERT_NE(s.model(ModelKind::lr), nullptr);
    EXPECT_FALSE(s.stale(ModelKind::lr));
    EXPECT_TRUE(s.last_trained_ms().has_value());

    s.set_label("p101", Polarity::positive);
    EXPECT_TRUE(s.stale(ModelKind::lr));
    s.retrain_existing(table);
    EXPECT_FALSE(s.stale(ModelKind::lr));
    EXPECT_EQ(s.model(ModelKind::nb), nullptr);

    // flipping the only negative drops back below bootstrap
    s.set_label("p129", Polarity::positive);
    EXPECT_FALSE(s.bootstrapped());
    EXPECT_EQ(s.model(ModelKind::lr), nullptr);
    EXPECT_EQ(s.positives().size(), 3u);
    EXPECT_TRUE(s.negatives().empty());
}

TEST(AnnotationSession, ServedTracking) {
    AnnotationSession s("leaf", 1);
    s.record_served("a", LabelSource::knn);
    s.record_served("b", LabelSource::master);
    s.set_label("a", Polarity::negative);
    EXPECT_EQ(s.served_source("b"), LabelSource::master);
    EXPECT_FALSE(s.served_source("c").has_value());
    EXPECT_EQ(s.served_unlabeled(), IdSet{"b"});
}

TEST(MixedSample, ColdStartIsRandom) {
    const auto table = arc_table(50);
    AnnotationSession s("leaf", 1);
    const auto batch = mixed_sample(s, ModelKind::lr, table, 10, 3);
    ASSERT_EQ(batch.size(), 10u);
    for (const auto& t : batch) {
        EXPECT_EQ(t.tag, SampleTag::random);
    }
}

TEST(MixedSample, PositiveOnlyIsHalfNeighbours) {
    const auto table = arc_table(50);
    AnnotationSession s("leaf", 1);
    s.set_label("p100", Polarity::positive);
    const auto batch = mixed_sample(s, ModelKind::lr, table, 10, 3);
    ASSERT_EQ(batch.size(), 10u);
    for (std::size_t i = 0; i < 5; ++i) {
        EXPECT_EQ(batch[i].tag, SampleTag::knn);
        EXPECT_EQ(batch[i].id, "p" + std::to_string(101 + i));
    }
}

TEST(MixedSample, BucketQuotasWithModel) {
    const auto table = arc_table(90);
    AnnotationSession s("leaf", 7);
    for (int i = 0; i < 5; ++i) {
        s.set_label("p" + std::to_string(100 + i), Polarity::positive);
        s.set_label("p" + std::to_string(185 + i), Polarity::negative);
    }
    s.retrain(ModelKind::lr, table);
    const auto batch = mixed_sample(s, ModelKind::lr, table, 20, 5);
    ASSERT_EQ(batch.size(), 20u);
    std::map<SampleTag, std::size_t> per;
    std::set<std::string> seen;
    for (const auto& t : batch) {
        ++per[t.tag];
        EXPECT_TRUE(seen.insert(t.id).second) << t.id;
        EXPECT_FALSE(s.labeled().contains(t.id)) << t.id;
    }
    EXPECT_EQ(per[SampleTag::ambiguous], 8u);
    EXPECT_EQ(per[SampleTag::positive], 6u);
    EXPECT_EQ(per[SampleTag::knn], 3u);
    EXPECT_EQ(per[SampleTag::random], 3u);
}

TEST(MixedSample, ExhaustionAndExclusion) {
    const auto table = arc_table(12);
    AnnotationSession s("leaf", 1);
    s.set_label("p100", Polarity::positive);
    s.set_label("p111", Polarity::negative);
    s.retrain(ModelKind::nb, table);
    const IdSet exclude{"p105", "p106"};
    const auto batch = mixed_sample(s, ModelKind::nb, table, 50, 1, exclude);
    EXPECT_EQ(batch.size(), 8u);
    std::set<std::string> ids;
    for (const auto& t : batch) {
        ids.insert(t.id);
        EXPECT_FALSE(exclude.contains(t.id));
    }
    EXPECT_EQ(ids.size(), 8u);
    EXPECT_FALSE(ids.contains("p100"));
    EXPECT_FALSE(ids.contains("p111"));
}

TEST(MixedSample, PropertyNoLabeledNoDuplicates) {
    const auto table = arc_table(120);
    for (std::uint64_t seed = 1; seed <= 25; ++seed) {
        Rng rng(seed);
        AnnotationSession s("leaf", seed);
        const std::size_t n_labels = rng.below(30);
        for (std::size_t i = 0; i < n_labels; ++i) {
            s.set_label(table.ids()[rng.below(table.rows())],
                        rng.bernoulli(0.5) ? Polarity::positive : Polarity::negative);
        }
        const auto kind = static_cast<ModelKind>(rng.below(3));
        if (s.bootstrapped()) {
            s.retrain(kind, table);
        }
        const std::size_t budget = 1 + rng.below(40);
        const auto batch = mixed_sample(s, kind, table, budget, seed);
        EXPECT_EQ(batch.size(), std::min(budget, table.rows() - s.labeled().size())) << "seed " << seed;
        std::set<std::string> ids;
        for (const auto& t : batch) {
            EXPECT_TRUE(ids.insert(t.id).second);
            EXPECT_FALSE(s.labeled().contains(t.id));
        }
    }
}

TEST(FeatureTable, CentroidAndLookup) {
    const auto table = arc_table(3);
    EXPECT_EQ(table.row_of("p101"), 1u);
    EXPECT_FALSE(table.row_of("zz").has_value());
    const std::vector<std::string> none{"zz"};
    EXPECT_FALSE(table.centroid(none).has_value());
    const std::vector<std::string> two{"p100", "p102", "zz"};
    const auto c = table.centroid(two);
    ASSERT_TRUE(c.has_value());
    EXPECT_NEAR((*c)[0], (1.0 + static_cast<float>(std::cos(2 * 3.14159265358979 / 180.0))) / 2, 1e-7);
    EXPECT_THROW(FeatureTable(table.knn().matrix(), std::vector<HashedVector>(2)), ShapeError);
}
