#include "productnet/corpus.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <fcntl.h>
#include <unistd.h>

#include "binary_io.hpp"
#include "productnet/error.hpp"
#include "productnet/text.hpp"

namespace productnet {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Products

namespace {

std::string get_string(const json& obj, const char* key, std::size_t line_no) {
    auto it = obj.find(key);
    if (it == obj.end() || it->is_null()) {
        return {};
    }
    if (!it->is_string()) {
        throw ParseError(std::string("field '") + key + "' must be a string", line_no);
    }
    return it->get<std::string>();
}

std::optional<std::string> get_optional_string(const json& obj, const char* key, std::size_t line_no) {
    auto it = obj.find(key);
    if (it == obj.end() || it->is_null()) {
        return std::nullopt;
    }
    if (!it->is_string()) {
        throw ParseError(std::string("field '") + key + "' must be a string", line_no);
    }
    auto s = it->get<std::string>();
    if (s.empty()) {
        return std::nullopt;
    }
    return s;
}

std::vector<std::string> get_string_list(const json& value, const char* key, std::size_t line_no) {
    if (value.is_null()) {
        return {};
    }
    if (!value.is_array()) {
        throw ParseError(std::string("field '") + key + "' must be an array of strings", line_no);
    }
    std::vector<std::string> out;
    out.reserve(value.size());
    for (const auto& v : value) {
        if (!v.is_string()) {
            throw ParseError(std::string("field '") + key + "' must be an array of strings", line_no);
        }
        out.push_back(v.get<std::string>());
    }
    return out;
}

}  // namespace

Product parse_product_record(std::string_view line, std::size_t line_no) {
    json obj;
    try {
        obj = json::parse(line);
    } catch (const json::parse_error& e) {
        throw ParseError(std::string("malformed record: ") + e.what(), line_no);
    }
    if (!obj.is_object()) {
        throw ParseError("record must be a JSON object", line_no);
    }
    Product p;
    p.id = get_string(obj, "id", line_no);
    if (p.id.empty()) {
        throw ParseError("record has no id", line_no);
    }
    p.title = get_string(obj, "title", line_no);
    p.description = get_string(obj, "description", line_no);
    p.brand = get_string(obj, "brand", line_no);
    if (auto it = obj.find("bullets"); it != obj.end()) {
        p.bullets = get_string_list(*it, "bullets", line_no);
    }
    if (auto it = obj.find("keywords"); it != obj.end() && !it->is_null()) {
        if (!it->is_array() || it->size() > 3) {
            throw ParseError("field 'keywords' must be an array of at most 3 string arrays", line_no);
        }
        for (std::size_t i = 0; i < it->size(); ++i) {
            p.keywords[i] = get_string_list((*it)[i], "keywords", line_no);
        }
    }
    p.image_embedding_id = get_optional_string(obj, "image_embedding_id", line_no);
    p.image_url = get_optional_string(obj, "image_url", line_no);
    p.gold_leaf = get_optional_string(obj, "gold_leaf", line_no);
    return p;
}

json product_to_json(const Product& p, bool include_gold) {
    json j = {
        {"id", p.id},
        {"title", p.title},
        {"description", p.description},
        {"bullets", p.bullets},
        {"brand", p.brand},
        {"keywords", json::array({p.keywords[0], p.keywords[1], p.keywords[2]})},
    };
    if (p.image_embedding_id) {
        j["image_embedding_id"] = *p.image_embedding_id;
    }
    if (p.image_url) {
        j["image_url"] = *p.image_url;
    }
    if (include_gold && p.gold_leaf) {
        j["gold_leaf"] = *p.gold_leaf;
    }
    return j;
}

std::string serialize_product(const Product& p, bool include_gold) {
    return product_to_json(p, include_gold).dump();
}

Pool::Pool(std::vector<Product> products) {
    products_.reserve(products.size());
    for (auto& p : products) {
        add(std::move(p));
    }
}

void Pool::add(Product p) {
    if (p.id.empty()) {
        throw IngestError("product with empty id");
    }
    auto [it, inserted] = index_.emplace(p.id, products_.size());
    if (!inserted) {
        throw IngestError("duplicate product id '" + p.id + "'");
    }
    products_.push_back(std::move(p));
}

Pool Pool::parse(std::istream& in) {
    Pool pool;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (text::trim(line).empty()) {
            continue;
        }
        Product p = parse_product_record(line, line_no);
        try {
            pool.add(std::move(p));
        } catch (const IngestError& e) {
            throw IngestError("line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return pool;
}

Pool Pool::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw StorageError("cannot open pool file " + path.string());
    }
    return parse(in);
}

void Pool::save(const std::filesystem::path& path, bool include_gold) const {
    std::ofstream out(path, std::ios::trunc);
    for (const auto& p : products_) {
        out << serialize_product(p, include_gold) << '\n';
    }
    if (!out) {
        throw StorageError("cannot write pool file " + path.string());
    }
}

void Pool::validate_against(const Taxonomy& taxonomy) const {
    for (const auto& p : products_) {
        if (p.gold_leaf && !taxonomy.is_leaf(*p.gold_leaf)) {
            throw IngestError("product '" + p.id + "' has gold_leaf '" + *p.gold_leaf +
                              "' which is not a taxonomy leaf");
        }
    }
}

const Product* Pool::find(std::string_view id) const {
    auto it = index_.find(std::string(id));
    return it == index_.end() ? nullptr : &products_[it->second];
}

std::optional<std::size_t> Pool::index_of(std::string_view id) const {
    auto it = index_.find(std::string(id));
    if (it == index_.end()) {
        return std::nullopt;
    }
    return it->second;
}

// ---------------------------------------------------------------------------
// Taxonomy

std::string Taxonomy::normalize_id(std::span<const std::string> parts) {
    std::string id;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (i > 0) {
            id += '/';
        }
        id += text::lower(text::trim(parts[i]));
    }
    return id;
}

std::size_t Taxonomy::ensure_child(std::optional<std::size_t> parent, const std::string& name) {
    if (parent) {
        for (std::size_t c : nodes_[*parent].children) {
            if (nodes_[c].name == name) {
                return c;
            }
        }
    } else {
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            if (!nodes_[i].parent && nodes_[i].name == name) {
                return i;
            }
        }
    }
    const std::string own = normalize_id(std::span<const std::string>(&name, 1));
    std::string id = parent ? nodes_[*parent].id + "/" + own : own;
    if (by_id_.contains(id)) {
        throw ParseError("path collides with an existing category after normalization: " + id, 0);
    }
    Node node{name, id, parent, {}};
    nodes_.push_back(std::move(node));
    const std::size_t idx = nodes_.size() - 1;
    by_id_.emplace(id, idx);
    if (parent) {
        nodes_[*parent].children.push_back(idx);
    }
    return idx;
}

Taxonomy Taxonomy::parse(std::string_view text_in) {
    Taxonomy tax;
    std::unordered_map<std::string, std::size_t> seen_lines;
    std::size_t line_no = 0;
    std::size_t start = 0;
    while (start <= text_in.size()) {
        auto end = text_in.find('\n', start);
        if (end == std::string_view::npos) {
            end = text_in.size();
        }
        std::string_view raw = text_in.substr(start, end - start);
        start = end + 1;
        ++line_no;
        std::string line = text::trim(raw);
        if (line.empty()) {
            if (end == text_in.size()) {
                break;
            }
            continue;
        }
        std::vector<std::string> parts;
        std::size_t p = 0;
        while (true) {
            auto sep = line.find(" > ", p);
            parts.push_back(text::trim(line.substr(p, sep == std::string::npos ? std::string::npos : sep - p)));
            if (sep == std::string::npos) {
                break;
            }
            p = sep + 3;
        }
        for (const auto& part : parts) {
            if (part.empty()) {
                throw ParseError("empty category name", line_no);
            }
        }
        const std::string id = normalize_id(parts);
        if (auto [it, inserted] = seen_lines.emplace(id, line_no); !inserted) {
            throw ParseError("duplicate path '" + line + "' (first on line " + std::to_string(it->second) + ")",
                             line_no);
        }
        std::optional<std::size_t> parent;
        try {
            for (const auto& part : parts) {
                parent = tax.ensure_child(parent, part);
            }
        } catch (const ParseError& e) {
            throw ParseError(e.what(), line_no);
        }
        if (end == text_in.size()) {
            break;
        }
    }
    if (tax.nodes_.empty()) {
        throw ParseError("taxonomy is empty", 0);
    }
    return tax;
}

Taxonomy Taxonomy::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw StorageError("cannot open taxonomy file " + path.string());
    }
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
}

std::string Taxonomy::serialize() const {
    std::string out;
    for (const auto& n : nodes_) {
        out += path_of(n.id);
        out += '\n';
    }
    return out;
}

std::vector<std::size_t> Taxonomy::roots() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        if (!nodes_[i].parent) {
            out.push_back(i);
        }
    }
    return out;
}

std::vector<std::string> Taxonomy::leaf_ids() const {
    std::vector<std::string> out;
    for (const auto& n : nodes_) {
        if (n.children.empty()) {
            out.push_back(n.id);
        }
    }
    return out;
}

std::vector<std::string> Taxonomy::paths() const {
    std::vector<std::string> out;
    out.reserve(nodes_.size());
    for (const auto& n : nodes_) {
        out.push_back(path_of(n.id));
    }
    return out;
}

bool Taxonomy::contains(std::string_view id) const { return by_id_.contains(std::string(id)); }

bool Taxonomy::is_leaf(std::string_view id) const {
    const Node* n = find(id);
    return n != nullptr && n->children.empty();
}

const Taxonomy::Node* Taxonomy::find(std::string_view id) const {
    auto it = by_id_.find(std::string(id));
    return it == by_id_.end() ? nullptr : &nodes_[it->second];
}

std::string Taxonomy::path_of(std::string_view id) const {
    auto it = by_id_.find(std::string(id));
    if (it == by_id_.end()) {
        throw NotFoundError("unknown category '" + std::string(id) + "'");
    }
    std::vector<std::string_view> names;
    std::optional<std::size_t> cur = it->second;
    while (cur) {
        names.push_back(nodes_[*cur].name);
        cur = nodes_[*cur].parent;
    }
    std::string out;
    for (auto r = names.rbegin(); r != names.rend(); ++r) {
        if (!out.empty()) {
            out += " > ";
        }
        out += *r;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Labels

namespace {

constexpr std::array<LabelSource, 8> kSources = {
    LabelSource::random,    LabelSource::keyword,    LabelSource::knn,    LabelSource::active_lr,
    LabelSource::active_nb, LabelSource::active_mlp, LabelSource::master, LabelSource::adhoc};

}  // namespace

std::string_view to_string(Polarity p) noexcept {
    return p == Polarity::positive ? "positive" : "negative";
}

std::string_view to_string(LabelSource s) noexcept {
    switch (s) {
        case LabelSource::random: return "random";
        case LabelSource::keyword: return "keyword";
        case LabelSource::knn: return "knn";
        case LabelSource::active_lr: return "active_lr";
        case LabelSource::active_nb: return "active_nb";
        case LabelSource::active_mlp: return "active_mlp";
        case LabelSource::master: return "master";
        case LabelSource::adhoc: return "adhoc";
    }
    return "adhoc";
}

Polarity parse_polarity(std::string_view s) {
    if (s == "positive") {
        return Polarity::positive;
    }
    if (s == "negative") {
        return Polarity::negative;
    }
    throw InvalidArgument("invalid polarity '" + std::string(s) + "'");
}

LabelSource parse_label_source(std::string_view s) {
    for (LabelSource src : kSources) {
        if (to_string(src) == s) {
            return src;
        }
    }
    throw InvalidArgument("invalid label source '" + std::string(s) + "'");
}

std::span<const LabelSource> all_label_sources() noexcept { return kSources; }

json label_to_json(const LabelRecord& r) {
    json j = {
        {"product_id", r.product_id},
        {"leaf_id", r.leaf_id},
        {"polarity", to_string(r.polarity)},
        {"annotator", r.annotator},
        {"source", to_string(r.source)},
        {"timestamp", r.timestamp_ms},
    };
    if (r.auditor) {
        j["auditor"] = *r.auditor;
    }
    return j;
}

LabelRecord label_from_json(const json& j) {
    try {
        LabelRecord r;
        r.product_id = j.at("product_id").get<std::string>();
        r.leaf_id = j.at("leaf_id").get<std::string>();
        r.polarity = parse_polarity(j.at("polarity").get<std::string>());
        r.annotator = j.value("annotator", std::string{});
        if (auto it = j.find("auditor"); it != j.end() && it->is_string()) {
            r.auditor = it->get<std::string>();
        }
        r.source = parse_label_source(j.at("source").get<std::string>());
        r.timestamp_ms = j.at("timestamp").get<std::int64_t>();
        return r;
    } catch (const json::exception& e) {
        throw ParseError(std::string("malformed label record: ") + e.what(), 0);
    } catch (const InvalidArgument& e) {
        throw ParseError(e.what(), 0);
    }
}

std::int64_t now_ms() {
    using namespace std::chrono;
    return duration_cast<milliseconds>(system_clock::now().time_since_epoch()).count();
}

EffectiveLabels replay_labels(std::span<const LabelRecord> log) {
    std::map<std::pair<std::string, std::string>, Polarity> eff;
    for (const auto& r : log) {
        eff[{r.leaf_id, r.product_id}] = r.polarity;
    }
    EffectiveLabels out;
    for (const auto& [key, pol] : eff) {
        auto& leaf = out[key.first];
        (pol == Polarity::positive ? leaf.positives : leaf.negatives).push_back(key.second);
    }
    return out;
}

LabelStore::LabelStore(std::shared_ptr<const Pool> pool, std::shared_ptr<const Taxonomy> taxonomy)
    : pool_(std::move(pool)), taxonomy_(std::move(taxonomy)) {}

std::unique_ptr<LabelStore> LabelStore::open(const std::filesystem::path& log_path,
                                             std::shared_ptr<const Pool> pool,
                                             std::shared_ptr<const Taxonomy> taxonomy) {
    auto store = std::make_unique<LabelStore>(std::move(pool), std::move(taxonomy));
    if (std::filesystem::exists(log_path)) {
        std::ifstream in(log_path);
        std::string line;
        std::size_t line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            if (text::trim(line).empty()) {
                continue;
            }
            json j;
            try {
                j = json::parse(line);
            } catch (const json::parse_error& e) {
                throw ParseError(std::string("malformed label log: ") + e.what(), line_no);
            }
            LabelRecord r;
            try {
                r = label_from_json(j);
            } catch (const ParseError& e) {
                throw ParseError(e.what(), line_no);
            }
            store->log_.push_back(r);
            store->apply_locked(r);
        }
    }
    store->path_ = log_path;
    store->file_ = std::fopen(log_path.c_str(), "ab");
    if (store->file_ == nullptr) {
        throw StorageError("cannot open label log " + log_path.string());
    }
    return store;
}

LabelStore::~LabelStore() {
    if (file_ != nullptr) {
        std::fclose(file_);
    }
}

void LabelStore::apply_locked(const LabelRecord& r) {
    effective_[{r.leaf_id, r.product_id}] = r.polarity;
}

void LabelStore::append(const LabelRecord& record) {
    if (pool_->find(record.product_id) == nullptr) {
        throw NotFoundError("unknown product '" + record.product_id + "'");
    }
    if (!taxonomy_->is_leaf(record.leaf_id)) {
        throw NotFoundError("unknown leaf '" + record.leaf_id + "'");
    }
    std::lock_guard lock(mu_);
    if (file_ != nullptr) {
        const std::string line = label_to_json(record).dump() + "\n";
        const int fd = fileno(file_);
        const off_t before = ::lseek(fd, 0, SEEK_END);
        const bool ok = std::fwrite(line.data(), 1, line.size(), file_) == line.size() &&
                        std::fflush(file_) == 0 && ::fsync(fd) == 0;
        if (!ok) {
            std::clearerr(file_);
            if (before >= 0) {
                [[maybe_unused]] int rc = ::ftruncate(fd, before);
            }
            throw StorageError("failed to append label record to " + path_.string());
        }
    }
    log_.push_back(record);
    apply_locked(record);
}

std::optional<Polarity> LabelStore::effective(std::string_view product_id, std::string_view leaf_id) const {
    std::lock_guard lock(mu_);
    auto it = effective_.find({std::string(leaf_id), std::string(product_id)});
    if (it == effective_.end()) {
        return std::nullopt;
    }
    return it->second;
}

EffectiveLabels LabelStore::snapshot() const {
    std::lock_guard lock(mu_);
    EffectiveLabels out;
    for (const auto& [key, pol] : effective_) {
        auto& leaf = out[key.first];
        (pol == Polarity::positive ? leaf.positives : leaf.negatives).push_back(key.second);
    }
    return out;
}

std::vector<LabelRecord> LabelStore::records() const {
    std::lock_guard lock(mu_);
    return log_;
}

std::size_t LabelStore::size() const {
    std::lock_guard lock(mu_);
    return log_.size();
}

// ---------------------------------------------------------------------------
// Gold export

std::map<std::string, LeafCounts> GoldSnapshot::counts() const {
    std::map<std::string, LeafCounts> out;
    for (const auto& [leaf, labels] : leaves) {
        out[leaf] = {labels.positives.size(), labels.negatives.size()};
    }
    return out;
}

GoldSnapshot export_gold(const LabelStore& store, const Taxonomy& taxonomy) {
    GoldSnapshot snap;
    for (auto& [leaf, labels] : store.snapshot()) {
        if (taxonomy.is_leaf(leaf)) {
            snap.leaves.emplace(leaf, std::move(labels));
        }
    }
    return snap;
}

void write_gold(const GoldSnapshot& snapshot, const Pool& pool, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::ofstream products(dir / "products.jsonl", std::ios::trunc);
    std::ofstream labels(dir / "labels.jsonl", std::ios::trunc);
    std::map<std::string, bool> written;
    json counts = json::object();
    for (const auto& [leaf, ll] : snapshot.leaves) {
        counts[leaf] = {{"positives", ll.positives.size()}, {"negatives", ll.negatives.size()}};
        auto emit = [&](const std::vector<std::string>& ids, Polarity pol) {
            for (const auto& id : ids) {
                labels << json{{"leaf_id", leaf}, {"product_id", id}, {"polarity", to_string(pol)}}.dump()
                       << '\n';
                if (!written[id]) {
                    written[id] = true;
                    if (const Product* p = pool.find(id)) {
                        products << serialize_product(*p, false) << '\n';
                    }
                }
            }
        };
        emit(ll.positives, Polarity::positive);
        emit(ll.negatives, Polarity::negative);
    }
    std::ofstream(dir / "counts.json", std::ios::trunc) << counts.dump(2) << '\n';
    if (!products || !labels) {
        throw StorageError("failed to write gold snapshot to " + dir.string());
    }
}

// ---------------------------------------------------------------------------
// Embedding matrices

void EmbeddingMatrix::validate() const {
    if (dim == 0) {
        throw ShapeError("embedding dim must be positive");
    }
    if (values.size() != ids.size() * static_cast<std::size_t>(dim)) {
        throw ShapeError("embedding matrix has " + std::to_string(values.size()) + " values for " +
                         std::to_string(ids.size()) + " rows of dim " + std::to_string(dim));
    }
    for (float v : values) {
        if (!std::isfinite(v)) {
            throw InvalidArgument("embedding matrix contains a non-finite value");
        }
    }
}

std::filesystem::path ids_sidecar(const std::filesystem::path& path) {
    auto p = path;
    p += ".ids";
    return p;
}

void write_embeddings(const std::filesystem::path& path, const EmbeddingMatrix& m) {
    m.validate();
    for (const auto& id : m.ids) {
        if (id.find('\n') != std::string::npos) {
            throw InvalidArgument("embedding id contains a newline");
        }
    }
    {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out.write("PNE1", 4);
        detail::put_u32(out, static_cast<std::uint32_t>(m.rows()));
        detail::put_u32(out, m.dim);
        detail::put_f32s(out, m.values);
        if (!out) {
            throw StorageError("cannot write embedding file " + path.string());
        }
    }
    std::ofstream ids(ids_sidecar(path), std::ios::trunc);
    for (const auto& id : m.ids) {
        ids << id << '\n';
    }
    if (!ids) {
        throw StorageError("cannot write embedding id sidecar for " + path.string());
    }
}

EmbeddingMatrix read_embeddings(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw StorageError("cannot open embedding file " + path.string());
    }
    detail::expect_magic(in, "PNE1");
    EmbeddingMatrix m;
    const std::uint32_t count = detail::get_u32(in, "row count");
    m.dim = detail::get_u32(in, "dim");
    if (m.dim == 0) {
        throw FormatError("embedding file has zero dim");
    }
    const auto expected = 12 + static_cast<std::uintmax_t>(count) * m.dim * 4;
    if (std::filesystem::file_size(path) != expected) {
        throw FormatError("embedding file size " + std::to_string(std::filesystem::file_size(path)) +
                          " does not match header (expected " + std::to_string(expected) + ")");
    }
    m.values.resize(static_cast<std::size_t>(count) * m.dim);
    detail::get_f32s(in, m.values, "embedding values");

    std::ifstream ids(ids_sidecar(path));
    if (!ids) {
        throw FormatError("missing id sidecar " + ids_sidecar(path).string());
    }
    std::string line;
    while (std::getline(ids, line)) {
        m.ids.push_back(line);
    }
    if (m.ids.size() != count) {
        throw FormatError("id sidecar has " + std::to_string(m.ids.size()) + " ids, header says " +
                          std::to_string(count));
    }
    return m;
}

}  // namespace productnet
