#include "productnet/featurize.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "productnet/error.hpp"
#include "productnet/rng.hpp"
#include "productnet/text.hpp"

namespace productnet {

std::string_view to_string(TextField f) noexcept {
    switch (f) {
        case TextField::title: return "title";
        case TextField::description: return "description";
        case TextField::bullets: return "bullets";
        case TextField::brand: return "brand";
        case TextField::keywords_1: return "keywords_1";
        case TextField::keywords_2: return "keywords_2";
        case TextField::keywords_3: return "keywords_3";
    }
    return "title";
}

double HashedVector::norm() const noexcept {
    double s = 0.0;
    for (const auto& [i, w] : entries) {
        s += w * w;
    }
    return std::sqrt(s);
}

std::vector<std::string> tokenize(std::string_view input) {
    std::vector<std::string> tokens;
    std::string cur;
    std::size_t pos = 0;
    while (pos < input.size()) {
        const char32_t cp = text::decode_utf8(input, pos);
        if (text::is_alnum(cp)) {
            text::append_utf8(cur, text::to_lower(cp));
        } else if (!cur.empty()) {
            tokens.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) {
        tokens.push_back(std::move(cur));
    }
    return tokens;
}

std::uint64_t fnv1a64(std::string_view bytes) noexcept {
    std::uint64_t h = 14695981039346656037ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

namespace {

void check_dim(std::uint32_t dim) {
    if (dim == 0 || (dim & (dim - 1)) != 0) {
        throw InvalidArgument("hash dim must be a power of two, got " + std::to_string(dim));
    }
}

HashedVector from_counts(std::uint32_t dim, const std::map<std::uint32_t, std::uint32_t>& counts, double scale) {
    HashedVector v;
    v.dim = dim;
    v.entries.reserve(counts.size());
    for (const auto& [idx, c] : counts) {
        v.entries.emplace_back(idx, static_cast<double>(c) * scale);
    }
    return v;
}

}  // namespace

HashedVector hash_embed(std::span<const std::string> tokens, std::uint32_t dim) {
    check_dim(dim);
    const std::uint32_t mask = dim - 1;
    std::map<std::uint32_t, std::uint32_t> counts;
    std::size_t features = 0;
    auto add = [&](std::string_view f) {
        ++counts[static_cast<std::uint32_t>(fnv1a64(f) & mask)];
        ++features;
    };
    std::vector<std::size_t> offsets;
    for (const auto& tok : tokens) {
        add(tok);
        const std::string marked = "<" + tok + ">";
        offsets.clear();
        for (std::size_t pos = 0; pos < marked.size();) {
            offsets.push_back(pos);
            text::decode_utf8(marked, pos);
        }
        const std::size_t n_chars = offsets.size();
        offsets.push_back(marked.size());
        for (std::size_t n = 3; n <= 5; ++n) {
            for (std::size_t s = 0; s + n <= n_chars; ++s) {
                add(std::string_view(marked).substr(offsets[s], offsets[s + n] - offsets[s]));
            }
        }
    }
    return from_counts(dim, counts, 1.0 / static_cast<double>(std::max<std::size_t>(1, features)));
}

HashedVector hashed_counts(std::span<const std::string> tokens, std::uint32_t dim) {
    check_dim(dim);
    std::map<std::uint32_t, std::uint32_t> counts;
    for (const auto& tok : tokens) {
        ++counts[static_cast<std::uint32_t>(fnv1a64(tok) & (dim - 1))];
    }
    return from_counts(dim, counts, 1.0);
}

std::array<std::vector<std::string>, kTextFieldCount> field_tokens(const Product& p) {
    std::array<std::vector<std::string>, kTextFieldCount> out;
    auto append_all = [](std::vector<std::string>& dst, const std::vector<std::string>& parts) {
        for (const auto& part : parts) {
            auto t = tokenize(part);
            dst.insert(dst.end(), std::make_move_iterator(t.begin()), std::make_move_iterator(t.end()));
        }
    };
    out[0] = tokenize(p.title);
    out[1] = tokenize(p.description);
    append_all(out[2], p.bullets);
    out[3] = tokenize(p.brand);
    for (std::size_t k = 0; k < 3; ++k) {
        append_all(out[4 + k], p.keywords[k]);
    }
    return out;
}

std::vector<std::string> all_tokens(const Product& p) {
    std::vector<std::string> out;
    for (auto& field : field_tokens(p)) {
        out.insert(out.end(), std::make_move_iterator(field.begin()), std::make_move_iterator(field.end()));
    }
    return out;
}

ImageStore::ImageStore(EmbeddingMatrix matrix) : matrix_(std::move(matrix)) {
    matrix_.validate();
    for (std::size_t i = 0; i < matrix_.rows(); ++i) {
        if (!index_.emplace(matrix_.ids[i], i).second) {
            throw IngestError("duplicate image embedding id '" + matrix_.ids[i] + "'");
        }
    }
}

std::optional<std::span<const float>> ImageStore::find(std::string_view id) const {
    auto it = index_.find(std::string(id));
    if (it == index_.end()) {
        return std::nullopt;
    }
    return matrix_.row(it->second);
}

std::vector<double> image_vector(const Product& p, const ImageStore& store) {
    std::vector<double> out(store.dim(), 0.0);
    if (!p.image_embedding_id) {
        return out;
    }
    auto row = store.find(*p.image_embedding_id);
    if (!row) {
        throw BrokenReferenceError("product '" + p.id + "' references image embedding '" +
                                   *p.image_embedding_id + "' which is not in the store");
    }
    std::copy(row->begin(), row->end(), out.begin());
    return out;
}

FieldVectorSet featurize(const Product& p, const ImageStore& store, std::uint32_t hash_dim) {
    FieldVectorSet fv;
    auto tokens = field_tokens(p);
    for (std::size_t f = 0; f < kTextFieldCount; ++f) {
        fv.text[f] = hash_embed(tokens[f], hash_dim);
    }
    fv.image = image_vector(p, store);
    return fv;
}

std::vector<double> sign_project(const HashedVector& v, std::size_t out_dim, std::uint64_t seed) {
    if (out_dim > 64) {
        throw InvalidArgument("sign projection supports at most 64 output dims");
    }
    std::vector<double> out(out_dim, 0.0);
    const std::uint64_t key = splitmix64(seed);
    for (const auto& [idx, w] : v.entries) {
        const std::uint64_t bits = splitmix64(key ^ idx);
        for (std::size_t r = 0; r < out_dim; ++r) {
            out[r] += ((bits >> r) & 1U) ? w : -w;
        }
    }
    return out;
}

std::vector<double> initial_embedding(const Product& p, const ImageStore& store) {
    std::vector<double> out;
    out.reserve(initial_embedding_dim(store.dim()));
    auto tokens = field_tokens(p);
    for (std::size_t f = 0; f < kTextFieldCount; ++f) {
        auto block = sign_project(hash_embed(tokens[f], kDefaultHashDim));
        out.insert(out.end(), block.begin(), block.end());
    }
    auto img = image_vector(p, store);
    out.insert(out.end(), img.begin(), img.end());
    return out;
}

}  // namespace productnet
