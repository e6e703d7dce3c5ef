#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace gdr {

// 64-bit FNV-1a. Used for substream derivation and caption hashing; must stay
// byte-identical across platforms, so no std::hash anywhere.
inline uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t mix64(uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

// SplitMix64. The standard library distributions are implementation-defined,
// so every random draw in the project goes through this generator with
// explicit mappings (uniform / Box-Muller below).
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : state_(seed) {}

    uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ull;
        return mix64(state_);
    }

    // uniform in [0, 1)
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // unbiased enough for shuffles; Lemire-style multiply-shift
    uint64_t below(uint64_t n) {
        return uint64_t((__uint128_t(next_u64()) * n) >> 64);
    }

    // standard normal via Box-Muller; consumes exactly two draws per call
    double gaussian() {
        double u1 = double((next_u64() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
        double u2 = double(next_u64() >> 11) * 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    bool bernoulli(double p) { return uniform() < p; }

    uint64_t state() const { return state_; }
    void set_state(uint64_t s) { state_ = s; }

private:
    uint64_t state_;
};

// Named substream derivation: every component draws from
// substream(seed, "name"[, index]) so adding a consumer never perturbs
// another component's stream.
inline Rng substream(uint64_t seed, std::string_view name, uint64_t index = 0) {
    uint64_t h = mix64(seed ^ mix64(fnv1a64(name)));
    return Rng(mix64(h ^ (0x9e3779b97f4a7c15ull * (index + 1))));
}

template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
    for (size_t i = v.size(); i > 1; --i) {
        size_t j = size_t(rng.below(i));
        std::swap(v[i - 1], v[j]);
    }
}

}  // namespace gdr
