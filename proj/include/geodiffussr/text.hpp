#pragma once

// Text-embedding providers. The hash provider maps tokens to fixed
// pseudo-random vectors via seeded integer hashing, which keeps the whole
// pipeline hermetic; an embedding cache directory serves pretrained
// embeddings (e.g. exported language-model hidden states) by caption hash.

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "geodiffussr/container.hpp"
#include "geodiffussr/rng.hpp"
#include "geodiffussr/tensor.hpp"

namespace gdr {

template <typename S>
struct TextEmbedding {
    Tensor<S> tokens;  // (L, D)
    std::string provider_id;

    int length() const { return tokens.dim(0); }
    int dim() const { return tokens.dim(1); }
};

// Fixed all-zero sequence standing in for "no prompt"; the unconditional
// branch of classifier-free guidance.
template <typename S>
TextEmbedding<S> null_embedding(int dim, int len = 1) {
    check(dim >= 1 && len >= 1, "null_embedding: dim and len must be positive");
    return {Tensor<S>::zeros({len, dim}), "null"};
}

template <typename S>
class TextProvider {
public:
    virtual ~TextProvider() = default;
    virtual TextEmbedding<S> embed(const std::string& caption) const = 0;
    virtual std::string id() const = 0;
    virtual int dim() const = 0;
};

inline std::vector<std::string> tokenize_lowercase(const std::string& caption) {
    std::string lowered = caption;
    std::transform(lowered.begin(), lowered.end(), lowered.begin(),
                   [](unsigned char c) { return char(std::tolower(c)); });
    std::istringstream ss(lowered);
    std::vector<std::string> tokens;
    std::string tok;
    while (ss >> tok) tokens.push_back(tok);
    return tokens;
}

template <typename S>
class HashTextProvider : public TextProvider<S> {
public:
    HashTextProvider(int dim, uint64_t seed = 0, int max_len = 64)
        : dim_(dim), seed_(seed), max_len_(max_len) {}

    TextEmbedding<S> embed(const std::string& caption) const override {
        check(!caption.empty(), "embed: caption must be non-empty (use null_embedding for the "
                                "unconditional branch)");
        auto tokens = tokenize_lowercase(caption);
        check(!tokens.empty(), "embed: caption has no tokens");
        if (int(tokens.size()) > max_len_) {
            std::cerr << "[geodiffussr] warning: caption truncated to " << max_len_
                      << " tokens\n";
            tokens.resize(size_t(max_len_));
        }
        Tensor<S> out({int(tokens.size()), dim_});
        for (size_t i = 0; i < tokens.size(); ++i) {
            Rng rng = substream(seed_, "hash-token." + tokens[i]);
            for (int d = 0; d < dim_; ++d) out[int64_t(i) * dim_ + d] = S(rng.gaussian());
        }
        return {std::move(out), id()};
    }

    std::string id() const override { return "hash"; }
    int dim() const override { return dim_; }

private:
    int dim_;
    uint64_t seed_;
    int max_len_;
};

inline std::string caption_cache_key(const std::string& caption) {
    std::ostringstream os;
    os << std::hex << fnv1a64(caption);
    return os.str();
}

// Serves embeddings from a directory of containers keyed by caption hash, so
// training runs need no live language model.
template <typename S>
class CachedTextProvider : public TextProvider<S> {
public:
    CachedTextProvider(std::filesystem::path dir, int dim, std::string provider_id = "cache")
        : dir_(std::move(dir)), dim_(dim), provider_id_(std::move(provider_id)) {}

    TextEmbedding<S> embed(const std::string& caption) const override {
        check(!caption.empty(), "embed: caption must be non-empty");
        auto path = dir_ / (caption_cache_key(caption) + ".gdrc");
        if (!std::filesystem::exists(path))
            fail("text provider '" + provider_id_ + "' has no cached embedding for this caption (" +
                 path.string() + "); fall back to the hash provider (text_provider=hash)");
        NamedTensors<S> tensors = load_container<S>(path);
        check(tensors.size() == 1 && tensors[0].first == "tokens",
              "embedding cache entry malformed: " + path.string());
        check(tensors[0].second.rank() == 2 && tensors[0].second.dim(1) == dim_,
              "embedding cache entry has wrong dim: " + path.string());
        return {std::move(tensors[0].second), provider_id_};
    }

    // export helper so tests and offline tools can fill the cache
    void store(const std::string& caption, const Tensor<S>& tokens) const {
        std::filesystem::create_directories(dir_);
        save_container<S>(dir_ / (caption_cache_key(caption) + ".gdrc"),
                          {{"tokens", tokens}});
    }

    std::string id() const override { return provider_id_; }
    int dim() const override { return dim_; }

private:
    std::filesystem::path dir_;
    int dim_;
    std::string provider_id_;
};

template <typename S>
std::unique_ptr<TextProvider<S>> make_text_provider(const std::string& key, int dim,
                                                    uint64_t seed,
                                                    const std::filesystem::path& cache_dir = {}) {
    if (key == "hash") return std::make_unique<HashTextProvider<S>>(dim, seed);
    if (key == "cache") return std::make_unique<CachedTextProvider<S>>(cache_dir, dim);
    fail("unknown text provider: " + key + " (expected 'hash' or 'cache')");
}

// Classifier-free-guidance conditioning dropout: with probability p the
// caption embedding is replaced by the null sequence.
template <typename S>
TextEmbedding<S> cfg_dropout(const TextEmbedding<S>& emb, double p, Rng& rng) {
    check(p >= 0.0 && p <= 1.0, "cfg_dropout: p must be in [0,1]");
    if (rng.bernoulli(p)) return null_embedding<S>(emb.dim(), 1);
    return emb;
}

}  // namespace gdr
