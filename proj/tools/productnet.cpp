#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>

#include <CLI11.hpp>
#include <httplib.h>

#include "productnet/corpus.hpp"
#include "productnet/error.hpp"
#include "productnet/evaluation.hpp"
#include "productnet/orchestrator.hpp"
#include "productnet/service.hpp"

namespace fs = std::filesystem;
using namespace productnet;

namespace {

struct State {
    fs::path dir;
    std::shared_ptr<const Pool> pool;
    std::shared_ptr<const Taxonomy> taxonomy;
    std::shared_ptr<const ImageStore> images;
    std::shared_ptr<LabelStore> store;
};

fs::path state_dir(const std::string& flag) {
    if (!flag.empty()) {
        return flag;
    }
    if (const char* env = std::getenv("PRODUCTNET_STATE"); env != nullptr && *env != '\0') {
        return env;
    }
    return "productnet-state";
}

void check_images(const Pool& pool, const ImageStore& images) {
    for (const auto& p : pool.products()) {
        image_vector(p, images);  // throws on a dangling reference
    }
}

State open_state(const fs::path& dir) {
    if (!fs::exists(dir / "pool.jsonl")) {
        throw NotFoundError("no ingested pool in " + dir.string() + " (run `productnet ingest` first)");
    }
    State s;
    s.dir = dir;
    auto taxonomy = std::make_shared<Taxonomy>(Taxonomy::load(dir / "taxonomy.txt"));
    auto pool = std::make_shared<Pool>(Pool::load(dir / "pool.jsonl"));
    pool->validate_against(*taxonomy);
    auto images = fs::exists(dir / "images.pne") ? std::make_shared<ImageStore>(read_embeddings(dir / "images.pne"))
                                                 : std::make_shared<ImageStore>();
    s.taxonomy = taxonomy;
    s.pool = pool;
    s.images = images;
    s.store = LabelStore::open(dir / "labels.jsonl", s.pool, s.taxonomy);
    return s;
}

std::unique_ptr<Loop> open_loop(const State& s, std::uint64_t seed) {
    LoopOptions opts;
    opts.seed = seed;
    opts.state_dir = s.dir;
    return std::make_unique<Loop>(s.pool, s.taxonomy, s.images, s.store, opts);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Product categorization annotation backend"};
    app.require_subcommand(1);
    app.fallthrough();
    std::string state_flag;
    app.add_option("--state", state_flag, "State directory (default: $PRODUCTNET_STATE or ./productnet-state)");

    auto* ingest = app.add_subcommand("ingest", "Validate a pool, taxonomy and image store and copy them into the state");
    std::string pool_file, taxonomy_file, images_file;
    ingest->add_option("--pool", pool_file, "Products, one JSON object per line")->required();
    ingest->add_option("--taxonomy", taxonomy_file, "One 'A > B > C' path per line")->required();
    ingest->add_option("--images", images_file, "Image embedding matrix (.pne)");

    auto* serve = app.add_subcommand("serve", "Run the HTTP API");
    int port = 8080;
    std::string host = "127.0.0.1";
    std::uint64_t loop_seed = 1;
    serve->add_option("--port", port, "Port")->check(CLI::Range(1, 65535));
    serve->add_option("--host", host, "Bind address");
    serve->add_option("--seed", loop_seed, "Session seed");

    auto* train = app.add_subcommand("train-master", "Train the master model on current labels and re-embed the pool");
    TrainConfig train_cfg;
    train->add_option("--epochs", train_cfg.epochs, "Training epochs");
    train->add_option("--embed-dim", train_cfg.embed_dim, "Hidden/embedding width");
    train->add_option("--seed", train_cfg.seed, "Training seed");

    auto* eval = app.add_subcommand("eval", "Run the classification ablation on synthetic pools");
    std::string report;
    std::size_t eval_seeds = 5;
    TrainConfig eval_cfg;
    eval->add_option("--report", report, "Report file (metrics go to <file>.metrics)")->required();
    eval->add_option("--seeds", eval_seeds, "Number of pools to average over")->check(CLI::PositiveNumber);
    eval->add_option("--epochs", eval_cfg.epochs, "Training epochs");
    eval->add_option("--embed-dim", eval_cfg.embed_dim, "Hidden width");

    auto* simulate = app.add_subcommand("simulate", "Simulate annotation sessions against a gold oracle");
    std::string strategy = "all";
    std::size_t budget = 200, sim_seeds = 10;
    double prevalence = 0.01;
    std::string sim_report;
    simulate->add_option("--strategy", strategy, "random|keyword|knn|active_lr|active_nb|active_mlp|master|all");
    simulate->add_option("--budget", budget, "Products served per session")->check(CLI::PositiveNumber);
    simulate->add_option("--seeds", sim_seeds, "Sessions to average over")->check(CLI::PositiveNumber);
    simulate->add_option("--prevalence", prevalence, "Target leaf prevalence")->check(CLI::Range(0.0001, 0.5));
    simulate->add_option("--report", sim_report, "Optional report file");

    auto* exp = app.add_subcommand("export", "Write the gold snapshot");
    std::string out_dir;
    exp->add_option("--out", out_dir, "Output directory")->required();

    auto* gen = app.add_subcommand("gen-simpool", "Write a synthetic pool, taxonomy and image store");
    std::string gen_out;
    std::uint64_t gen_seed = 1;
    bool complementary = false;
    SimPoolConfig gen_cfg;
    gen->add_option("--out", gen_out, "Output directory")->required();
    gen->add_option("--leaves", gen_cfg.leaves, "Leaf count");
    gen->add_option("--per-leaf", gen_cfg.per_leaf, "Products per leaf");
    gen->add_option("--prevalence", gen_cfg.prevalence, "Per-leaf prevalence (adds decoys)");
    gen->add_option("--seed", gen_seed, "Seed");
    gen->add_flag("--complementary", complementary, "Use the split text/image signal preset");

    CLI11_PARSE(app, argc, argv);

    try {
        const fs::path dir = state_dir(state_flag);
        if (ingest->parsed()) {
            const auto tax = Taxonomy::load(taxonomy_file);
            const auto pool = Pool::load(pool_file);
            pool.validate_against(tax);
            ImageStore images;
            if (!images_file.empty()) {
                images = ImageStore(read_embeddings(images_file));
            }
            check_images(pool, images);
            fs::create_directories(dir);
            pool.save(dir / "pool.jsonl");
            std::ofstream(dir / "taxonomy.txt") << tax.serialize();
            if (!images_file.empty()) {
                write_embeddings(dir / "images.pne", images.matrix());
            }
            std::cout << "ingested " << pool.size() << " products, " << tax.leaf_ids().size() << " leaves, "
                      << images.size() << " image vectors into " << dir << "\n";
        } else if (serve->parsed()) {
            const State s = open_state(dir);
            Service service(open_loop(s, loop_seed));
            httplib::Server server;
            service.bind(server);
            std::cout << "listening on http://" << host << ":" << port << " (state " << dir << ")" << std::endl;
            if (!server.listen(host, port)) {
                std::cerr << "error: cannot listen on " << host << ":" << port << "\n";
                return 1;
            }
        } else if (train->parsed()) {
            const State s = open_state(dir);
            auto loop = open_loop(s, 1);
            const auto& event = loop->advance_round(train_cfg, [](const EpochLog& e) {
                std::cout << "epoch " << e.epoch << " loss " << e.train_loss << " test top-1 " << e.test_top1
                          << "\n";
            });
            std::cout << event_to_json(event).dump(2) << "\n";
        } else if (eval->parsed()) {
            std::vector<AblationReport> reports;
            for (std::size_t seed = 1; seed <= eval_seeds; ++seed) {
                TrainConfig cfg = eval_cfg;
                cfg.seed = seed;
                reports.push_back(run_ablation(generate_simpool(complementary_simpool(seed)), cfg));
                std::cerr << "pool " << seed << "/" << eval_seeds << " done\n";
            }
            const auto avg = average_reports(reports);
            write_report(report, avg.table(), avg.metric_lines());
            std::cout << avg.table();
        } else if (simulate->parsed()) {
            SimPoolConfig cfg;
            cfg.prevalence = prevalence;
            const SimPool sim = generate_simpool(cfg);
            std::vector<Strategy> strategies;
            if (strategy == "all") {
                strategies = {Strategy::random,    Strategy::keyword,   Strategy::knn,   Strategy::active_lr,
                              Strategy::active_nb, Strategy::active_mlp, Strategy::master};
            } else {
                strategies = {parse_strategy(strategy)};
            }
            std::vector<SimulationResult> results;
            for (Strategy st : strategies) {
                results.push_back(simulate_annotation(sim, sim.leaves.front(), st, budget, sim_seeds));
            }
            std::cout << simulation_table(results);
            if (!sim_report.empty()) {
                write_report(sim_report, simulation_table(results), simulation_metric_lines(results));
            }
        } else if (exp->parsed()) {
            const State s = open_state(dir);
            const auto snapshot = export_gold(*s.store, *s.taxonomy);
            write_gold(snapshot, *s.pool, out_dir);
            std::size_t pos = 0, neg = 0;
            for (const auto& [leaf, c] : snapshot.counts()) {
                pos += c.positives;
                neg += c.negatives;
            }
            std::cout << "exported " << snapshot.leaves.size() << " leaves (" << pos << " positives, " << neg
                      << " negatives) to " << out_dir << "\n";
        } else if (gen->parsed()) {
            SimPoolConfig cfg = complementary ? complementary_simpool(gen_seed) : gen_cfg;
            if (complementary) {
                cfg.prevalence = gen_cfg.prevalence;
            }
            cfg.seed = gen_seed;
            const SimPool sim = generate_simpool(cfg);
            fs::create_directories(gen_out);
            sim.pool.save(fs::path(gen_out) / "pool.jsonl");
            std::ofstream(fs::path(gen_out) / "taxonomy.txt") << sim.taxonomy.serialize();
            if (sim.images.dim() > 0) {
                write_embeddings(fs::path(gen_out) / "images.pne", sim.images.matrix());
            }
            std::cout << "wrote " << sim.pool.size() << " products over " << sim.leaves.size() << " leaves to "
                      << gen_out << "\n";
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
