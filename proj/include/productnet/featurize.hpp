#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "productnet/corpus.hpp"

namespace productnet {

inline constexpr std::size_t kTextFieldCount = 7;
inline constexpr std::uint32_t kDefaultHashDim = 1u << 18;
inline constexpr std::size_t kInitialBlockDim = 32;
inline constexpr std::uint64_t kProjectionSeed = 0x5EED;

enum class TextField { title, description, bullets, brand, keywords_1, keywords_2, keywords_3 };

std::string_view to_string(TextField f) noexcept;

/// Sparse vector over `dim` hash buckets; entries sorted by index, no zeros.
struct HashedVector {
    std::uint32_t dim = kDefaultHashDim;
    std::vector<std::pair<std::uint32_t, double>> entries;

    bool empty() const noexcept { return entries.empty(); }
    double norm() const noexcept;
    bool operator==(const HashedVector&) const = default;
};

/// One hashed vector per text field, plus a dense image vector (zeros when the
/// product has no image).
struct FieldVectorSet {
    std::array<HashedVector, kTextFieldCount> text;
    std::vector<double> image;
};

/// Lowercases and splits on every non-alphanumeric code point.
std::vector<std::string> tokenize(std::string_view text);

std::uint64_t fnv1a64(std::string_view bytes) noexcept;

/// Bag of word unigrams and boundary-marked character 3-5 grams, each
/// counted into bucket fnv1a64(feature) % dim, then mean-pooled.
/// `dim` must be a power of two.
HashedVector hash_embed(std::span<const std::string> tokens, std::uint32_t dim = kDefaultHashDim);

/// Raw hashed word-unigram counts (no n-grams, no pooling).
HashedVector hashed_counts(std::span<const std::string> tokens, std::uint32_t dim = kDefaultHashDim);

std::array<std::vector<std::string>, kTextFieldCount> field_tokens(const Product& p);

/// Tokens of all seven fields concatenated.
std::vector<std::string> all_tokens(const Product& p);

/// Read-only lookup of precomputed image vectors by embedding id.
class ImageStore {
public:
    explicit ImageStore(std::uint32_t dim = 0) : matrix_{dim, {}, {}} {}
    explicit ImageStore(EmbeddingMatrix matrix);

    std::uint32_t dim() const noexcept { return matrix_.dim; }
    std::size_t size() const noexcept { return matrix_.rows(); }
    std::optional<std::span<const float>> find(std::string_view id) const;
    const EmbeddingMatrix& matrix() const noexcept { return matrix_; }

private:
    EmbeddingMatrix matrix_;
    std::unordered_map<std::string, std::size_t> index_;
};

/// Stored row for the product's image id, or zeros when it has none. Throws
/// BrokenReferenceError when the id is set but missing from the store.
std::vector<double> image_vector(const Product& p, const ImageStore& store);

FieldVectorSet featurize(const Product& p, const ImageStore& store, std::uint32_t hash_dim = kDefaultHashDim);

/// Fixed ±1 random projection of a hashed vector into `out_dim` (<= 64) dims.
std::vector<double> sign_project(const HashedVector& v, std::size_t out_dim = kInitialBlockDim,
                                 std::uint64_t seed = kProjectionSeed);

/// Round-0 product embedding: each text field projected to 32 dims, then the
/// image vector. Length 7 * 32 + store.dim().
std::vector<double> initial_embedding(const Product& p, const ImageStore& store);

inline std::size_t initial_embedding_dim(std::uint32_t image_dim) {
    return kTextFieldCount * kInitialBlockDim + image_dim;
}

}  // namespace productnet
