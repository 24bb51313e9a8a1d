#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

namespace productnet {

// ---------------------------------------------------------------------------
// Products

/// One catalog record. The seven text fields are title, description,
/// bullets, brand and the three keyword lists; any of them may be empty.
struct Product {
    std::string id;
    std::string title;
    std::string description;
    std::vector<std::string> bullets;
    std::string brand;
    std::array<std::vector<std::string>, 3> keywords;
    std::optional<std::string> image_embedding_id;
    std::optional<std::string> image_url;
    /// Simulation only. Never exposed to annotators.
    std::optional<std::string> gold_leaf;

    bool operator==(const Product&) const = default;
};

/// Parses one pool-file record. Missing text fields default to empty and
/// unknown keys are ignored. Throws ParseError carrying `line_no`.
Product parse_product_record(std::string_view line, std::size_t line_no = 0);

nlohmann::json product_to_json(const Product& p, bool include_gold);

/// Pool-file line for `p` (no trailing newline).
std::string serialize_product(const Product& p, bool include_gold = true);

class Taxonomy;

/// Immutable-after-load product collection, in file order.
class Pool {
public:
    Pool() = default;
    explicit Pool(std::vector<Product> products);

    static Pool parse(std::istream& in);
    static Pool load(const std::filesystem::path& path);
    void save(const std::filesystem::path& path, bool include_gold = true) const;

    /// Throws IngestError on a duplicate or empty id.
    void add(Product p);

    /// Throws IngestError when a gold_leaf does not name a taxonomy leaf.
    void validate_against(const Taxonomy& taxonomy) const;

    const Product* find(std::string_view id) const;
    std::optional<std::size_t> index_of(std::string_view id) const;
    std::size_t size() const noexcept { return products_.size(); }
    bool empty() const noexcept { return products_.empty(); }
    const Product& operator[](std::size_t i) const { return products_[i]; }
    const std::vector<Product>& products() const noexcept { return products_; }

private:
    std::vector<Product> products_;
    std::unordered_map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Taxonomy

/// Category tree parsed from full-path lines ("Home > Fireplaces"). Leaf ids
/// are the lowercased path joined by "/", e.g. "home/fireplaces".
class Taxonomy {
public:
    struct Node {
        std::string name;
        std::string id;
        std::optional<std::size_t> parent;
        std::vector<std::size_t> children;
    };

    static Taxonomy parse(std::string_view text);
    static Taxonomy load(const std::filesystem::path& path);

    /// One full-path line per node, parents before children.
    std::string serialize() const;

    const std::vector<Node>& nodes() const noexcept { return nodes_; }
    /// Top-level nodes (the single root for a conventional taxonomy).
    std::vector<std::size_t> roots() const;
    std::vector<std::string> leaf_ids() const;
    std::vector<std::string> paths() const;

    bool contains(std::string_view id) const;
    bool is_leaf(std::string_view id) const;
    const Node* find(std::string_view id) const;
    /// Display path ("Home > Fireplaces") for a node id.
    std::string path_of(std::string_view id) const;

    static std::string normalize_id(std::span<const std::string> parts);

private:
    std::size_t ensure_child(std::optional<std::size_t> parent, const std::string& name);

    std::vector<Node> nodes_;
    std::unordered_map<std::string, std::size_t> by_id_;
};

// ---------------------------------------------------------------------------
// Labels

enum class Polarity { positive, negative };

enum class LabelSource { random, keyword, knn, active_lr, active_nb, active_mlp, master, adhoc };

std::string_view to_string(Polarity p) noexcept;
std::string_view to_string(LabelSource s) noexcept;
Polarity parse_polarity(std::string_view s);
LabelSource parse_label_source(std::string_view s);
std::span<const LabelSource> all_label_sources() noexcept;

struct LabelRecord {
    std::string product_id;
    std::string leaf_id;
    Polarity polarity = Polarity::positive;
    std::string annotator;
    std::optional<std::string> auditor;
    LabelSource source = LabelSource::adhoc;
    std::int64_t timestamp_ms = 0;

    bool operator==(const LabelRecord&) const = default;
};

nlohmann::json label_to_json(const LabelRecord& r);
LabelRecord label_from_json(const nlohmann::json& j);

std::int64_t now_ms();

struct LeafLabels {
    std::vector<std::string> positives;  // sorted
    std::vector<std::string> negatives;  // sorted
};

/// Effective (last-write-wins) labels per leaf id.
using EffectiveLabels = std::map<std::string, LeafLabels>;

/// Replays a label log in order, applying supersession per (product, leaf).
EffectiveLabels replay_labels(std::span<const LabelRecord> log);

/// Append-only label log with an in-memory effective-label map. Appends are
/// serialized; when backed by a file each record is flushed and fsync'ed
/// before append() returns.
class LabelStore {
public:
    LabelStore(std::shared_ptr<const Pool> pool, std::shared_ptr<const Taxonomy> taxonomy);
    /// Opens (creating if needed) a log file and replays it.
    static std::unique_ptr<LabelStore> open(const std::filesystem::path& log_path,
                                            std::shared_ptr<const Pool> pool,
                                            std::shared_ptr<const Taxonomy> taxonomy);
    ~LabelStore();
    LabelStore(const LabelStore&) = delete;
    LabelStore& operator=(const LabelStore&) = delete;

    /// Throws NotFoundError for an unknown product or leaf, StorageError when
    /// the write fails (the log is truncated back to its previous length).
    void append(const LabelRecord& record);

    std::optional<Polarity> effective(std::string_view product_id, std::string_view leaf_id) const;
    EffectiveLabels snapshot() const;
    std::vector<LabelRecord> records() const;
    std::size_t size() const;

private:
    void apply_locked(const LabelRecord& r);

    std::shared_ptr<const Pool> pool_;
    std::shared_ptr<const Taxonomy> taxonomy_;
    mutable std::mutex mu_;
    std::vector<LabelRecord> log_;
    std::map<std::pair<std::string, std::string>, Polarity> effective_;
    std::filesystem::path path_;
    std::FILE* file_ = nullptr;
};

// ---------------------------------------------------------------------------
// Gold export

struct LeafCounts {
    std::size_t positives = 0;
    std::size_t negatives = 0;
    bool operator==(const LeafCounts&) const = default;
};

struct GoldSnapshot {
    EffectiveLabels leaves;
    std::map<std::string, LeafCounts> counts() const;
};

GoldSnapshot export_gold(const LabelStore& store, const Taxonomy& taxonomy);

/// Writes products.jsonl (pool format, gold_leaf stripped), labels.jsonl
/// (leaf_id, product_id, polarity per line) and counts.json into `dir`.
void write_gold(const GoldSnapshot& snapshot, const Pool& pool, const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// Embedding matrices

/// Row-major float matrix with one row per product id.
struct EmbeddingMatrix {
    std::uint32_t dim = 0;
    std::vector<std::string> ids;
    std::vector<float> values;

    std::size_t rows() const noexcept { return ids.size(); }
    std::span<const float> row(std::size_t i) const {
        return {values.data() + i * dim, dim};
    }
    std::span<float> row(std::size_t i) { return {values.data() + i * dim, dim}; }

    /// Throws ShapeError / InvalidArgument when the invariants are violated.
    void validate() const;

    bool operator==(const EmbeddingMatrix&) const = default;
};

/// Layout: "PNE1", u32 count, u32 dim (little-endian), count*dim LE float32;
/// ids in the sidecar `<path>.ids`, one per line.
void write_embeddings(const std::filesystem::path& path, const EmbeddingMatrix& m);
EmbeddingMatrix read_embeddings(const std::filesystem::path& path);

std::filesystem::path ids_sidecar(const std::filesystem::path& path);

}  // namespace productnet
