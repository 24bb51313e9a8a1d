#include <gtest/gtest.h>

#include <chrono>
#include <set>
#include <thread>

#include <httplib.h>

#include "productnet/error.hpp"
#include "productnet/evaluation.hpp"
#include "productnet/service.hpp"
#include "support.hpp"

using namespace productnet;
using nlohmann::json;

namespace {

struct Fixture {
    SimPool sim;
    std::shared_ptr<const Pool> pool;
    std::shared_ptr<const Taxonomy> taxonomy;
    std::shared_ptr<const ImageStore> images;
    std::shared_ptr<LabelStore> store;
};

Fixture make_fixture(std::uint64_t seed = 1) {
    SimPoolConfig cfg;
    cfg.leaves = 3;
    cfg.per_leaf = 15;
    cfg.image_dim = 4;
    cfg.seed = seed;
    Fixture f{generate_simpool(cfg), {}, {}, {}, {}};
    f.pool = std::make_shared<Pool>(f.sim.pool);
    f.taxonomy = std::make_shared<Taxonomy>(f.sim.taxonomy);
    f.images = std::make_shared<ImageStore>(f.sim.images);
    f.store = std::make_shared<LabelStore>(f.pool, f.taxonomy);
    return f;
}

ServiceOptions quick() {
    ServiceOptions o;
    o.master.epochs = 4;
    o.master.embed_dim = 16;
    o.master.hash_dim = 256;
    return o;
}

std::unique_ptr<Service> make_service(const Fixture& f, std::optional<std::filesystem::path> dir = std::nullopt) {
    LoopOptions lo;
    lo.state_dir = std::move(dir);
    return std::make_unique<Service>(std::make_unique<Loop>(f.pool, f.taxonomy, f.images, f.store, lo), quick());
}

std::vector<std::string> gold_of(const Fixture& f, const std::string& leaf) {
    std::vector<std::string> out;
    for (const auto& p : f.pool->products()) {
        if (p.gold_leaf == leaf) {
            out.push_back(p.id);
        }
    }
    return out;
}

std::string labels_body(std::initializer_list<std::pair<std::string, std::string>> items) {
    json labels = json::array();
    for (const auto& [id, pol] : items) {
        labels.push_back({{"product_id", id}, {"polarity", pol}});
    }
    return json{{"annotator", "ann"}, {"labels", labels}}.dump();
}

using Params = std::multimap<std::string, std::string>;

// Labels n gold positives on every leaf, plus one negative each.
void label_all(Service& s, const Fixture& f, std::size_t n) {
    for (std::size_t l = 0; l < f.sim.leaves.size(); ++l) {
        const auto& leaf = f.sim.leaves[l];
        const auto pos = gold_of(f, leaf);
        json labels = json::array();
        for (std::size_t i = 0; i < n; ++i) {
            labels.push_back({{"product_id", pos[i]}, {"polarity", "positive"}});
        }
        labels.push_back(
            {{"product_id", gold_of(f, f.sim.leaves[(l + 1) % f.sim.leaves.size()]).back()}, {"polarity", "negative"}});
        ASSERT_EQ(s.handle("POST", "/leaves/" + leaf + "/labels", {}, json{{"labels", labels}}.dump()).status, 200);
    }
}

void expect_no_gold(const json& j) {
    if (j.is_object()) {
        for (const auto& [k, v] : j.items()) {
            EXPECT_NE(k, "gold_leaf");
            expect_no_gold(v);
        }
    } else if (j.is_array()) {
        for (const auto& v : j) {
            expect_no_gold(v);
        }
    }
}

}  // namespace

TEST(Service, Taxonomy) {
    auto f = make_fixture();
    auto s = make_service(f);
    const auto r = s->handle("GET", "/taxonomy");
    ASSERT_EQ(r.status, 200);
    EXPECT_EQ(r.body["leaves"].size(), 3u);
    bool root_seen = false;
    for (const auto& n : r.body["nodes"]) {
        if (n["parent"].is_null()) {
            root_seen = true;
            EXPECT_FALSE(n["leaf"].get<bool>());
            EXPECT_EQ(n["children"].size(), 3u);
        }
    }
    EXPECT_TRUE(root_seen);
}

TEST(Service, RoutingErrors) {
    auto f = make_fixture();
    auto s = make_service(f);
    EXPECT_EQ(s->handle("GET", "/nowhere").status, 404);
    EXPECT_EQ(s->handle("POST", "/taxonomy").status, 405);
    EXPECT_EQ(s->handle("GET", "/leaves/sim/ghost/candidates").status, 404);
    EXPECT_EQ(s->handle("GET", "/products/ghost").status, 404);
    const auto leaf = f.sim.leaves[0];
    EXPECT_EQ(s->handle("GET", "/leaves/" + leaf + "/candidates", {{"k", "0"}}).status, 400);
    EXPECT_EQ(s->handle("GET", "/leaves/" + leaf + "/candidates", {{"k", "201"}}).status, 400);
    EXPECT_EQ(s->handle("GET", "/leaves/" + leaf + "/candidates", {{"k", "x"}}).status, 400);
    EXPECT_EQ(s->handle("GET", "/leaves/" + leaf + "/candidates", {{"method", "tarot"}}).status, 400);
    EXPECT_EQ(s->handle("POST", "/leaves/" + leaf + "/labels", {}, "{not json").status, 400);
    EXPECT_EQ(s->handle("POST", "/leaves/" + leaf + "/labels", {}, "{}").status, 400);
}

TEST(Service, RandomCandidates) {
    auto f = make_fixture();
    auto s = make_service(f);
    const auto leaf = f.sim.leaves[0];
    const auto r = s->handle("GET", "/leaves/" + leaf + "/candidates", {{"method", "random"}, {"k", "5"}});
    ASSERT_EQ(r.status, 200);
    ASSERT_EQ(r.body["candidates"].size(), 5u);
    std::set<std::string> ids;
    for (const auto& c : r.body["candidates"]) {
        ids.insert(c["id"].get<std::string>());
        EXPECT_EQ(c["source"], "random");
        EXPECT_TRUE(c.contains("title"));
        EXPECT_TRUE(c.contains("image_url"));
        EXPECT_LE(c["description"].get<std::string>().size(), 200u);
    }
    EXPECT_EQ(ids.size(), 5u);
    EXPECT_EQ(s->loop().session(leaf).served_source(*ids.begin()), LabelSource::random);
    expect_no_gold(r.body);
}

TEST(Service, ActiveBeforeBootstrapIsConflict) {
    auto f = make_fixture();
    auto s = make_service(f);
    const auto r = s->handle("GET", "/leaves/" + f.sim.leaves[0] + "/candidates", {{"method", "active_lr"}});
    EXPECT_EQ(r.status, 409);
    EXPECT_NE(r.body["error"].get<std::string>().find("positive"), std::string::npos);
    EXPECT_EQ(s->handle("GET", "/leaves/" + f.sim.leaves[0] + "/candidates", {{"method", "knn"}}).status, 409);
    EXPECT_EQ(s->handle("GET", "/leaves/" + f.sim.leaves[0] + "/candidates", {{"method", "master"}}).status, 409);
}

TEST(Service, KeywordMatchesDirectSearch) {
    auto f = make_fixture();
    auto s = make_service(f);
    const auto leaf = f.sim.leaves[1];
    const std::string query = f.pool->find(gold_of(f, leaf)[0])->title;
    const auto r = s->handle("GET", "/leaves/" + leaf + "/candidates",
                             {{"method", "keyword"}, {"query", query}, {"k", "7"}});
    ASSERT_EQ(r.status, 200);
    const auto direct = keyword_search(s->loop().keyword_index(), query, 7);
    ASSERT_EQ(r.body["candidates"].size(), direct.size());
    for (std::size_t i = 0; i < direct.size(); ++i) {
        EXPECT_EQ(r.body["candidates"][i]["id"], direct[i].id);
        EXPECT_DOUBLE_EQ(r.body["candidates"][i]["probability"].get<double>(), direct[i].score);
    }
    EXPECT_EQ(s->handle("GET", "/leaves/" + leaf + "/candidates", {{"method", "keyword"}, {"query", " ,"}}).status,
              400);
}

TEST(Service, LabelsBootstrapActiveLearning) {
    auto f = make_fixture();
    auto s = make_service(f);
    const auto leaf = f.sim.leaves[0];
    const auto pos = gold_of(f, leaf);
    const auto neg = gold_of(f, f.sim.leaves[1]);
    const auto r = s->handle("POST", "/leaves/" + leaf + "/labels", {},
                             labels_body({{pos[0], "positive"}, {neg[0], "negative"}}));
    ASSERT_EQ(r.status, 200);
    EXPECT_EQ(r.body["positives"], 1);
    EXPECT_EQ(r.body["negatives"], 1);
    EXPECT_TRUE(r.body["bootstrapped"].get<bool>());
    EXPECT_TRUE(r.body["model_trained"].get<bool>());
    EXPECT_TRUE(r.body.contains("message"));
    EXPECT_EQ(r.body["errors"].size(), 0u);

    const auto c = s->handle("GET", "/leaves/" + leaf + "/candidates", {{"method", "active_lr"}, {"k", "20"}});
    ASSERT_EQ(c.status, 200);
    ASSERT_EQ(c.body["candidates"].size(), 20u);
    std::map<std::string, int> tags;
    for (const auto& card : c.body["candidates"]) {
        ++tags[card["sample"].get<std::string>()];
        EXPECT_EQ(card["source"], "active_lr");
        const double p = card["probability"].get<double>();
        EXPECT_GE(p, 0.0);
        EXPECT_LE(p, 1.0);
        EXPECT_NE(card["id"], pos[0]);
        EXPECT_NE(card["id"], neg[0]);
    }
    EXPECT_EQ(tags["ambiguous"], 8);
    EXPECT_EQ(tags["positive"], 6);
    EXPECT_EQ(tags["knn"], 3);
    EXPECT_EQ(tags["random"], 3);

    // labels on an actively served product carry its source
    const std::string served = c.body["candidates"][0]["id"];
    const auto again = s->handle("POST", "/leaves/" + leaf + "/labels", {}, labels_body({{served, "negative"}}));
    EXPECT_EQ(again.body["applied"][0]["source"], "active_lr");
    EXPECT_FALSE(again.body.contains("message"));
}

TEST(Service, PartialFailureIsItemized) {
    auto f = make_fixture();
    auto s = make_service(f);
    const auto leaf = f.sim.leaves[2];
    const auto pos = gold_of(f, leaf);
    json labels = json::array();
    for (std::size_t i = 0; i < 9; ++i) {
        labels.push_back({{"product_id", pos[i]}, {"polarity", "positive"}});
    }
    labels.push_back({{"product_id", "ghost"}, {"polarity", "positive"}});
    const auto r = s->handle("POST", "/leaves/" + leaf + "/labels", {}, json{{"labels", labels}}.dump());
    ASSERT_EQ(r.status, 200);
    EXPECT_EQ(r.body["applied"].size(), 9u);
    ASSERT_EQ(r.body["errors"].size(), 1u);
    EXPECT_EQ(r.body["errors"][0]["product_id"], "ghost");
    EXPECT_EQ(r.body["positives"], 9);
    EXPECT_FALSE(r.body["bootstrapped"].get<bool>());
    EXPECT_EQ(f.store->size(), 9u);

    json bad = json::array({{{"product_id", pos[10]}, {"polarity", "maybe"}}});
    const auto r2 = s->handle("POST", "/leaves/" + leaf + "/labels", {}, json{{"labels", bad}}.dump());
    EXPECT_EQ(r2.body["errors"].size(), 1u);
}

TEST(Service, SupersessionAndStats) {
    auto f = make_fixture();
    auto s = make_service(f);
    const auto leaf = f.sim.leaves[0];
    auto st = s->handle("GET", "/leaves/" + leaf + "/stats");
    ASSERT_EQ(st.status, 200);
    EXPECT_EQ(st.body["positives"], 0);
    EXPECT_EQ(st.body["negatives"], 0);
    EXPECT_TRUE(st.body["last_trained"].is_null());
    EXPECT_EQ(st.body["sources"].size(), 8u);
    for (const auto& [k, v] : st.body["sources"].items()) {
        EXPECT_EQ(v, 0) << k;
    }
    EXPECT_FALSE(st.body["models"]["lr"]["trained"].get<bool>());

    const auto pos = gold_of(f, leaf);
    s->handle("POST", "/leaves/" + leaf + "/labels", {}, labels_body({{pos[0], "positive"}, {pos[1], "positive"}}));
    s->handle("POST", "/leaves/" + leaf + "/labels", {}, labels_body({{pos[1], "negative"}}));
    st = s->handle("GET", "/leaves/" + leaf + "/stats");
    EXPECT_EQ(st.body["positives"], 1);
    EXPECT_EQ(st.body["negatives"], 1);
    EXPECT_EQ(st.body["sources"]["adhoc"], 2);
    EXPECT_TRUE(st.body["models"]["lr"]["trained"].get<bool>());
    EXPECT_FALSE(st.body["models"]["lr"]["stale"].get<bool>());
    EXPECT_TRUE(st.body["bootstrapped"].get<bool>());
    EXPECT_FALSE(st.body["last_trained"].is_null());
    EXPECT_EQ(f.store->size(), 3u);
}

TEST(Service, AdhocCandidatesAndProduct) {
    auto f = make_fixture();
    auto s = make_service(f);
    const auto leaf = f.sim.leaves[0];
    const auto ids = gold_of(f, leaf);
    const auto r = s->handle("GET", "/leaves/" + leaf + "/candidates",
                             {{"method", "adhoc"}, {"ids", ids[0] + "," + ids[1]}});
    ASSERT_EQ(r.status, 200);
    EXPECT_EQ(r.body["candidates"].size(), 2u);
    EXPECT_EQ(r.body["candidates"][1]["source"], "adhoc");
    EXPECT_EQ(s->handle("GET", "/leaves/" + leaf + "/candidates", {{"method", "adhoc"}, {"ids", "ghost"}}).status,
              404);
    const auto p = s->handle("GET", "/products/" + ids[0]);
    ASSERT_EQ(p.status, 200);
    EXPECT_EQ(p.body["id"], ids[0]);
    EXPECT_FALSE(p.body.contains("gold_leaf"));
}

TEST(Service, MasterTrainingLifecycle) {
    testing_support::TempDir dir;
    auto f = make_fixture();
    auto s = make_service(f, dir.path());
    EXPECT_EQ(s->handle("POST", "/master/train", {}, "{}").status, 409);
    EXPECT_EQ(s->handle("GET", "/master/status").body["state"], "idle");
    EXPECT_EQ(s->handle("GET", "/master/predict/" + f.pool->products()[0].id).status, 409);
    label_all(*s, f, 6);

    EXPECT_EQ(s->handle("POST", "/master/train", {}, R"({"epochs": 0})").status, 400);
    EXPECT_EQ(s->handle("POST", "/master/train", {}, R"({"bogus": 1})").status, 400);
    const auto started = s->handle("POST", "/master/train", {}, R"({"epochs": 40})");
    ASSERT_EQ(started.status, 202);
    EXPECT_EQ(s->handle("POST", "/master/train", {}, "{}").status, 409);
    s->wait_for_training();

    const auto status = s->handle("GET", "/master/status");
    ASSERT_EQ(status.body["state"], "done") << status.body.dump();
    EXPECT_EQ(status.body["log"].size(), 40u);
    const auto& result = status.body["result"];
    const std::string ckpt = result["checkpoint_id"];
    EXPECT_EQ(ckpt, "adhoc-001");

    // recompute the reported test top-1 from the saved checkpoint
    const auto net = load_checkpoint(s->loop().checkpoint_path(ckpt));
    const TrainConfig cfg = quick().master;
    const auto split = split_gold(f.store->snapshot(), cfg.train_fraction, cfg.seed);
    EXPECT_EQ(net.classes(), split.classes);
    std::size_t right = 0;
    for (const auto& [id, cls] : split.test) {
        const auto probs = predict(net, featurize_for(*f.pool->find(id), *f.images, net.hash_dim()));
        right += rank_classes(probs).front() == cls ? 1 : 0;
    }
    EXPECT_DOUBLE_EQ(result["test_top1"].get<double>(),
                     static_cast<double>(right) / static_cast<double>(split.test.size()));
    EXPECT_EQ(result["test_examples"], split.test.size());

    const auto pid = gold_of(f, f.sim.leaves[1])[12];
    const auto pred = s->handle("GET", "/master/predict/" + pid, {{"k", "2"}});
    ASSERT_EQ(pred.status, 200);
    EXPECT_EQ(pred.body["predictions"].size(), 2u);
    EXPECT_EQ(pred.body["checkpoint_id"], ckpt);
    EXPECT_GE(pred.body["predictions"][0]["probability"].get<double>(),
              pred.body["predictions"][1]["probability"].get<double>());
    EXPECT_EQ(s->handle("GET", "/master/predict/" + pid, {{"k", "4"}}).status, 400);
    EXPECT_EQ(s->handle("GET", "/master/predict/ghost").status, 404);

    // master candidates are unlabeled products whose top class is the leaf
    const auto& leaf = f.sim.leaves[1];
    const auto c = s->handle("GET", "/leaves/" + leaf + "/candidates", {{"method", "master"}, {"k", "50"}});
    ASSERT_EQ(c.status, 200);
    const auto labeled = s->loop().session(leaf).labeled();
    double prev = 2.0;
    for (const auto& card : c.body["candidates"]) {
        EXPECT_EQ(card["source"], "master");
        EXPECT_EQ(card["master"]["leaf"], leaf);
        EXPECT_FALSE(labeled.contains(card["id"].get<std::string>()));
        EXPECT_LE(card["probability"].get<double>(), prev);
        prev = card["probability"].get<double>();
    }
    ASSERT_FALSE(c.body["candidates"].empty());
    const std::string rejected = c.body["candidates"][0]["id"];
    const auto rej = s->handle("POST", "/leaves/" + leaf + "/labels", {}, labels_body({{rejected, "negative"}}));
    EXPECT_EQ(rej.body["applied"][0]["source"], "master");
    EXPECT_EQ(s->handle("GET", "/leaves/" + leaf + "/stats").body["sources"]["master"], 1);
}

TEST(Service, AdvanceRound) {
    auto f = make_fixture();
    auto s = make_service(f);
    EXPECT_EQ(s->handle("POST", "/rounds/advance", {}, "{}").status, 409);
    EXPECT_EQ(s->handle("GET", "/master/status").body["state"], "failed");
    label_all(*s, f, 5);
    const auto r = s->handle("POST", "/rounds/advance", {}, R"({"epochs": 2})");
    ASSERT_EQ(r.status, 200) << r.body.dump();
    EXPECT_EQ(r.body["round"], 1);
    EXPECT_EQ(r.body["embed_dim"], 16);
    EXPECT_EQ(s->handle("GET", "/master/status").body["kind"], "round");
    EXPECT_EQ(s->handle("GET", "/leaves/" + f.sim.leaves[0] + "/stats").body["round"], 1);
    EXPECT_EQ(s->loop().features().dim(), 16u);
    const auto c = s->handle("GET", "/leaves/" + f.sim.leaves[0] + "/candidates", {{"method", "knn"}, {"k", "3"}});
    EXPECT_EQ(c.status, 200);
    EXPECT_EQ(c.body["round"], 1);
}

TEST(Service, ConcurrentLabelsWhileTraining) {
    auto f = make_fixture();
    auto s = make_service(f);
    label_all(*s, f, 5);
    ASSERT_EQ(s->handle("POST", "/master/train", {}, R"({"epochs": 30})").status, 202);
    const auto leaf = f.sim.leaves[2];
    const auto pos = gold_of(f, leaf);
    for (std::size_t i = 5; i < 10; ++i) {
        EXPECT_EQ(s->handle("POST", "/leaves/" + leaf + "/labels", {}, labels_body({{pos[i], "positive"}})).status,
                  200);
        EXPECT_EQ(s->handle("GET", "/leaves/" + leaf + "/candidates", {{"k", "3"}}).status, 200);
    }
    s->wait_for_training();
    EXPECT_EQ(s->handle("GET", "/master/status").body["state"], "done");
    EXPECT_EQ(s->handle("GET", "/leaves/" + leaf + "/stats").body["positives"], 10);
}

TEST(Service, OverHttp) {
    auto f = make_fixture();
    auto s = make_service(f);
    httplib::Server server;
    s->bind(server);
    const int port = server.bind_to_any_port("127.0.0.1");
    ASSERT_GT(port, 0);
    std::thread t([&] { server.listen_after_bind(); });
    server.wait_until_ready();

    httplib::Client client("127.0.0.1", port);
    const auto leaf = f.sim.leaves[0];
    auto tax = client.Get("/taxonomy");
    ASSERT_TRUE(tax);
    EXPECT_EQ(tax->status, 200);
    EXPECT_EQ(json::parse(tax->body)["leaves"].size(), 3u);

    auto cand = client.Get("/leaves/" + leaf + "/candidates?method=random&k=4");
    ASSERT_TRUE(cand);
    ASSERT_EQ(cand->status, 200);
    const auto cj = json::parse(cand->body);
    EXPECT_EQ(cj["candidates"].size(), 4u);
    expect_no_gold(cj);

    const auto pos = gold_of(f, leaf);
    auto posted = client.Post("/leaves/" + leaf + "/labels", labels_body({{pos[0], "positive"}}), "application/json");
    ASSERT_TRUE(posted);
    EXPECT_EQ(posted->status, 200);
    auto wrong = client.Post("/taxonomy", "{}", "application/json");
    ASSERT_TRUE(wrong);
    EXPECT_EQ(wrong->status, 405);
    auto missing = client.Get("/products/ghost");
    ASSERT_TRUE(missing);
    EXPECT_EQ(missing->status, 404);
    EXPECT_NE(json::parse(missing->body)["error"].get<std::string>().find("ghost"), std::string::npos);

    server.stop();
    t.join();
}
