#include "productnet/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "productnet/error.hpp"
#include "productnet/featurize.hpp"
#include "productnet/rng.hpp"

namespace productnet {

namespace {

void sort_ranked(std::vector<ScoredId>& v) {
    std::sort(v.begin(), v.end(), [](const ScoredId& a, const ScoredId& b) {
        if (a.score != b.score) {
            return a.score > b.score;
        }
        return a.id < b.id;
    });
}

}  // namespace

InvertedIndex InvertedIndex::build(const Pool& pool) {
    InvertedIndex index;
    std::vector<std::size_t> order(pool.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return pool[a].id < pool[b].id; });

    std::uint64_t total_len = 0;
    for (std::size_t doc = 0; doc < order.size(); ++doc) {
        const Product& p = pool[order[doc]];
        const auto tokens = all_tokens(p);
        std::unordered_map<std::string, std::uint32_t> tf;
        for (const auto& t : tokens) {
            ++tf[t];
        }
        for (auto& [tok, n] : tf) {
            index.postings_[tok].push_back({static_cast<std::uint32_t>(doc), n});
        }
        index.doc_ids_.push_back(p.id);
        index.doc_len_.push_back(static_cast<std::uint32_t>(tokens.size()));
        total_len += tokens.size();
    }
    index.avg_len_ = order.empty() ? 0.0 : static_cast<double>(total_len) / static_cast<double>(order.size());
    return index;
}

std::size_t InvertedIndex::document_frequency(std::string_view token) const {
    auto it = postings_.find(std::string(token));
    return it == postings_.end() ? 0 : it->second.size();
}

std::span<const InvertedIndex::Posting> InvertedIndex::postings(std::string_view token) const {
    auto it = postings_.find(std::string(token));
    if (it == postings_.end()) {
        return {};
    }
    return it->second;
}

double InvertedIndex::idf(std::size_t df) const {
    const double n = static_cast<double>(doc_count());
    const double d = static_cast<double>(df);
    return std::log(1.0 + (n - d + 0.5) / (d + 0.5));
}

InvertedIndex build_keyword_index(const Pool& pool) { return InvertedIndex::build(pool); }

std::vector<ScoredId> keyword_search(const InvertedIndex& index, std::string_view query, std::size_t k,
                                     const IdSet& exclude, Bm25Params params) {
    if (k == 0 || index.doc_count() == 0) {
        return {};
    }
    auto terms = tokenize(query);
    std::sort(terms.begin(), terms.end());
    terms.erase(std::unique(terms.begin(), terms.end()), terms.end());

    std::vector<double> scores(index.doc_count(), 0.0);
    const double avg = index.avg_doc_length();
    for (const auto& term : terms) {
        const auto postings = index.postings(term);
        if (postings.empty()) {
            continue;
        }
        const double idf = index.idf(postings.size());
        for (const auto& post : postings) {
            const double tf = post.tf;
            const double len_norm = 1.0 - params.b + params.b * index.doc_length(post.doc) / avg;
            scores[post.doc] += idf * tf * (params.k1 + 1.0) / (tf + params.k1 * len_norm);
        }
    }
    std::vector<ScoredId> out;
    for (std::size_t doc = 0; doc < scores.size(); ++doc) {
        if (scores[doc] > 0.0 && !exclude.contains(index.doc_id(doc))) {
            out.push_back({index.doc_id(doc), scores[doc]});
        }
    }
    sort_ranked(out);
    if (out.size() > k) {
        out.resize(k);
    }
    return out;
}

KnnIndex::KnnIndex(EmbeddingMatrix matrix) : matrix_(std::move(matrix)) {
    matrix_.validate();
    norms_.resize(matrix_.rows());
    for (std::size_t i = 0; i < matrix_.rows(); ++i) {
        double s = 0.0;
        for (float v : matrix_.row(i)) {
            s += static_cast<double>(v) * v;
        }
        norms_[i] = std::sqrt(s);
        rows_.emplace(matrix_.ids[i], i);
    }
}

std::optional<std::size_t> KnnIndex::row_of(std::string_view id) const {
    auto it = rows_.find(std::string(id));
    if (it == rows_.end()) {
        return std::nullopt;
    }
    return it->second;
}

std::vector<ScoredId> knn_search(const KnnIndex& index, std::span<const double> query, std::size_t k,
                                 const IdSet& exclude) {
    if (query.size() != index.dim()) {
        throw ShapeError("query has dim " + std::to_string(query.size()) + ", index has dim " +
                         std::to_string(index.dim()));
    }
    double qn = 0.0;
    for (double v : query) {
        qn += v * v;
    }
    qn = std::sqrt(qn);
    if (k == 0 || qn == 0.0) {
        return {};
    }
    const auto& m = index.matrix();
    std::vector<ScoredId> out;
    out.reserve(index.rows());
    for (std::size_t i = 0; i < index.rows(); ++i) {
        if (index.zero_norm(i) || exclude.contains(m.ids[i])) {
            continue;
        }
        const auto row = m.row(i);
        double dot = 0.0;
        for (std::size_t j = 0; j < row.size(); ++j) {
            dot += query[j] * static_cast<double>(row[j]);
        }
        out.push_back({m.ids[i], dot / (qn * index.norm(i))});
    }
    const std::size_t keep = std::min(k, out.size());
    auto better = [](const ScoredId& a, const ScoredId& b) {
        if (a.score != b.score) {
            return a.score > b.score;
        }
        return a.id < b.id;
    };
    std::partial_sort(out.begin(), out.begin() + static_cast<std::ptrdiff_t>(keep), out.end(), better);
    out.resize(keep);
    return out;
}

std::vector<std::string> random_sample(std::span<const std::string> ids, std::size_t k, std::uint64_t seed,
                                       const IdSet& exclude) {
    std::vector<std::string> avail;
    avail.reserve(ids.size());
    for (const auto& id : ids) {
        if (!exclude.contains(id)) {
            avail.push_back(id);
        }
    }
    const std::size_t n = std::min(k, avail.size());
    Rng rng(seed);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t j = i + rng.below(avail.size() - i);
        std::swap(avail[i], avail[j]);
    }
    avail.resize(n);
    return avail;
}

std::vector<std::string> random_sample(const Pool& pool, std::size_t k, std::uint64_t seed, const IdSet& exclude) {
    std::vector<std::string> ids;
    ids.reserve(pool.size());
    for (const auto& p : pool.products()) {
        ids.push_back(p.id);
    }
    return random_sample(ids, k, seed, exclude);
}

}  // namespace productnet
