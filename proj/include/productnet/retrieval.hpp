#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "productnet/corpus.hpp"

namespace productnet {

using IdSet = std::unordered_set<std::string>;

struct ScoredId {
    std::string id;
    double score = 0.0;
    bool operator==(const ScoredId&) const = default;
};

struct Bm25Params {
    double k1 = 1.2;
    double b = 0.75;
};

/// Token -> postings over a product pool. Documents are numbered in
/// ascending product-id order, so postings sorted by document number are
/// also sorted by product id.
class InvertedIndex {
public:
    struct Posting {
        std::uint32_t doc;
        std::uint32_t tf;
    };

    static InvertedIndex build(const Pool& pool);

    std::size_t doc_count() const noexcept { return doc_ids_.size(); }
    double avg_doc_length() const noexcept { return avg_len_; }
    std::uint32_t doc_length(std::size_t doc) const { return doc_len_[doc]; }
    const std::string& doc_id(std::size_t doc) const { return doc_ids_[doc]; }
    std::size_t document_frequency(std::string_view token) const;
    std::span<const Posting> postings(std::string_view token) const;
    std::size_t vocabulary_size() const noexcept { return postings_.size(); }

    /// Lucene-style non-negative idf: ln(1 + (N - df + 0.5) / (df + 0.5)).
    double idf(std::size_t df) const;

private:
    std::vector<std::string> doc_ids_;
    std::vector<std::uint32_t> doc_len_;
    double avg_len_ = 0.0;
    std::unordered_map<std::string, std::vector<Posting>> postings_;
};

InvertedIndex build_keyword_index(const Pool& pool);

/// BM25 ranking of documents against the distinct query tokens. Zero-score
/// documents are dropped; ties go to the smaller product id.
std::vector<ScoredId> keyword_search(const InvertedIndex& index, std::string_view query, std::size_t k,
                                     const IdSet& exclude = {}, Bm25Params params = {});

/// Exact cosine-similarity search over an embedding matrix.
class KnnIndex {
public:
    explicit KnnIndex(EmbeddingMatrix matrix);

    std::uint32_t dim() const noexcept { return matrix_.dim; }
    std::size_t rows() const noexcept { return matrix_.rows(); }
    double norm(std::size_t row) const { return norms_[row]; }
    bool zero_norm(std::size_t row) const { return norms_[row] == 0.0; }
    const EmbeddingMatrix& matrix() const noexcept { return matrix_; }
    std::optional<std::size_t> row_of(std::string_view id) const;

private:
    EmbeddingMatrix matrix_;
    std::vector<double> norms_;
    std::unordered_map<std::string, std::size_t> rows_;
};

/// Top-k rows by cosine similarity to `query`, skipping excluded ids and
/// zero-norm rows; ties go to the smaller id. A zero query returns nothing.
/// Throws ShapeError on a dimension mismatch.
std::vector<ScoredId> knn_search(const KnnIndex& index, std::span<const double> query, std::size_t k,
                                 const IdSet& exclude = {});

/// Uniform sample without replacement of min(k, available) ids, in draw order.
std::vector<std::string> random_sample(std::span<const std::string> ids, std::size_t k, std::uint64_t seed,
                                       const IdSet& exclude = {});
std::vector<std::string> random_sample(const Pool& pool, std::size_t k, std::uint64_t seed,
                                       const IdSet& exclude = {});

}  // namespace productnet
