#pragma once

#include <condition_variable>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "productnet/orchestrator.hpp"

namespace httplib {
class Server;
}

namespace productnet {

struct Response {
    int status = 200;
    nlohmann::json body;
};

struct ServiceOptions {
    /// Defaults for POST /master/train and POST /rounds/advance; request
    /// bodies may override epochs, embed_dim, seed, batch_size, step and
    /// train_fraction.
    TrainConfig master{};
    std::size_t max_k = 200;
    std::size_t description_chars = 200;
};

/// JSON API over a Loop. Every route goes through handle(), which the HTTP
/// binding calls with the decoded path and query parameters.
///
/// Requests run concurrently; label and candidate requests serialize per
/// leaf. Round commits and master installs take an exclusive lock so a
/// request sees either the old or the new embeddings/model, never a mix.
class Service {
public:
    explicit Service(std::unique_ptr<Loop> loop, ServiceOptions options = {});
    ~Service();
    Service(const Service&) = delete;
    Service& operator=(const Service&) = delete;

    Response handle(const std::string& method, const std::string& path,
                    const std::multimap<std::string, std::string>& params = {}, const std::string& body = "");

    Response taxonomy();
    Response candidates(const std::string& leaf, const std::multimap<std::string, std::string>& params);
    Response submit_labels(const std::string& leaf, const std::string& body);
    Response train_master(const std::string& body);
    Response master_status();
    Response predict(const std::string& product, const std::multimap<std::string, std::string>& params);
    Response stats(const std::string& leaf);
    Response product(const std::string& id);
    Response advance_round(const std::string& body);

    /// Blocks until no master training is queued or running.
    void wait_for_training();

    /// Registers a catch-all GET/POST handler forwarding to handle().
    void bind(httplib::Server& server);

    /// Direct access for tests and the CLI; not synchronized.
    Loop& loop() noexcept { return *loop_; }

private:
    enum class JobState { idle, queued, running, done, failed };

    struct Job {
        JobState state = JobState::idle;
        std::string kind;
        std::vector<EpochLog> epochs;
        std::optional<std::string> error;
        nlohmann::json result;
    };

    TrainConfig parse_overrides(const std::string& body) const;
    std::mutex& leaf_mutex(const std::string& leaf);
    nlohmann::json card(const Product& p, LabelSource source, std::optional<double> probability) const;
    /// Marks a job as started; false when one is already active.
    bool begin_job(const std::string& kind);

    std::unique_ptr<Loop> loop_;
    ServiceOptions options_;
    std::shared_mutex state_mu_;
    std::map<std::string, std::unique_ptr<std::mutex>> leaf_mu_;
    std::mutex job_mu_;
    std::condition_variable job_cv_;
    Job job_;
    std::thread worker_;
};

}  // namespace productnet
