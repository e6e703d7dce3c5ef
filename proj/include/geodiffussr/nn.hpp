#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "geodiffussr/autograd.hpp"
#include "geodiffussr/rng.hpp"
#include "geodiffussr/tensor.hpp"

namespace gdr {

enum class Init { ZEROS, ONES, FAN_IN };

// Ordered, name-addressed parameter registry. Initialization is derived from
// (seed, parameter name), so construction order never changes the weights.
template <typename S>
class ParamStore {
public:
    explicit ParamStore(uint64_t seed = 0) : seed_(seed) {}

    Var<S> create(const std::string& name, Shape shape, Init init, int fan_in = 0) {
        check(!index_.count(name), "duplicate parameter: " + name);
        Tensor<S> t(shape);
        switch (init) {
            case Init::ZEROS: break;
            case Init::ONES: t.fill(S(1)); break;
            case Init::FAN_IN: {
                Rng rng = substream(seed_, "init." + name);
                S std = S(std::sqrt(2.0 / double(fan_in > 0 ? fan_in : 1)));
                for (int64_t i = 0; i < t.size(); ++i) t[i] = S(rng.gaussian()) * std;
                break;
            }
        }
        Var<S> v = Var<S>::leaf(std::move(t), true);
        index_[name] = items_.size();
        items_.push_back({name, v});
        return v;
    }

    bool has(const std::string& name) const { return index_.count(name) > 0; }
    Var<S>& get(const std::string& name) {
        auto it = index_.find(name);
        check(it != index_.end(), "unknown parameter: " + name);
        return items_[it->second].second;
    }

    std::vector<std::pair<std::string, Var<S>>>& items() { return items_; }
    const std::vector<std::pair<std::string, Var<S>>>& items() const { return items_; }
    size_t count() const { return items_.size(); }

    int64_t total_size() const {
        int64_t n = 0;
        for (auto& [name, v] : items_) n += v.value().size();
        return n;
    }

    void zero_grads() {
        for (auto& [name, v] : items_) v.zero_grad();
    }

    uint64_t checksum() const {
        uint64_t h = 0xcbf29ce484222325ull;
        for (auto& [name, v] : items_) {
            h ^= fnv1a64(name);
            h *= 0x100000001b3ull;
            h ^= tensor_checksum(v.value());
            h *= 0x100000001b3ull;
        }
        return h;
    }

    uint64_t seed() const { return seed_; }

private:
    uint64_t seed_;
    std::vector<std::pair<std::string, Var<S>>> items_;
    std::unordered_map<std::string, size_t> index_;
};

// largest divisor of c that is <= cap; small channel counts at desk scale
inline int norm_groups(int c, int cap = 8) {
    for (int g = std::min(cap, c); g >= 1; --g)
        if (c % g == 0) return g;
    return 1;
}

template <typename S>
struct Linear {
    Var<S> w, b;
    Linear() = default;
    Linear(ParamStore<S>& ps, const std::string& name, int cin, int cout,
           Init winit = Init::FAN_IN)
        : w(ps.create(name + ".w", {cin, cout}, winit, cin)),
          b(ps.create(name + ".b", {cout}, Init::ZEROS)) {}
    Var<S> forward(const Var<S>& x) const { return affine(x, w, b); }
};

template <typename S>
struct Conv2d {
    Var<S> w, b;
    int stride = 1;
    Conv2d() = default;
    Conv2d(ParamStore<S>& ps, const std::string& name, int cin, int cout, int ksize = 3,
           int stride_ = 1, Init winit = Init::FAN_IN)
        : w(ps.create(name + ".w", {ksize, ksize, cin, cout}, winit, ksize * ksize * cin)),
          b(ps.create(name + ".b", {cout}, Init::ZEROS)),
          stride(stride_) {}
    Var<S> forward(const Var<S>& x) const { return conv2d(x, w, b, stride); }
};

template <typename S>
struct GroupNorm {
    Var<S> gamma, beta;
    int groups = 1;
    GroupNorm() = default;
    GroupNorm(ParamStore<S>& ps, const std::string& name, int c)
        : gamma(ps.create(name + ".gamma", {c}, Init::ONES)),
          beta(ps.create(name + ".beta", {c}, Init::ZEROS)),
          groups(norm_groups(c)) {}
    Var<S> forward(const Var<S>& x) const { return group_norm(x, gamma, beta, groups); }
};

// Sinusoidal embedding of flow time t in [0,1]; used by the UNet residual
// blocks after an MLP. dim must be even.
template <typename S>
Tensor<S> time_embedding(const std::vector<S>& t, int dim) {
    check(dim % 2 == 0, "time_embedding: dim must be even");
    check(dim >= 2, "time_embedding: dim must be >= 2");
    const int half = dim / 2;
    const int n = int(t.size());
    Tensor<S> out({n, dim});
    for (int i = 0; i < n; ++i) {
        double tt = double(t[size_t(i)]) * 1000.0;
        for (int k = 0; k < half; ++k) {
            double freq = std::exp(-std::log(10000.0) * double(k) / double(std::max(1, half - 1)));
            out[int64_t(i) * dim + k] = S(std::sin(tt * freq));
            out[int64_t(i) * dim + half + k] = S(std::cos(tt * freq));
        }
    }
    return out;
}

template <typename S>
Tensor<S> time_embedding(S t, int dim) {
    return time_embedding(std::vector<S>{t}, dim);
}

namespace detail {

// split channels into `heads` contiguous blocks, attend, concat back
template <typename S>
Var<S> multihead_attend(const Var<S>& q, const Var<S>& k, const Var<S>& v, int heads,
                        const Tensor<S>* mask_bias) {
    const int c = q.value().shape().back();
    check(c % heads == 0, "attention: channels not divisible by heads");
    const int dh = c / heads;
    Var<S> out;
    for (int h = 0; h < heads; ++h) {
        auto qh = heads == 1 ? q : slice_lastdim(q, h * dh, dh);
        auto kh = heads == 1 ? k : slice_lastdim(k, h * dh, dh);
        auto vh = heads == 1 ? v : slice_lastdim(v, h * dh, dh);
        auto scores = scale(bmm(qh, kh, true), S(1.0 / std::sqrt(double(dh))));
        if (mask_bias) scores = add(scores, Var<S>::constant(*mask_bias));
        auto probs = softmax_lastdim(scores);
        auto oh = bmm(probs, vh);
        out = h == 0 ? oh : concat_lastdim(out, oh);
    }
    return out;
}

}  // namespace detail

// Pixel-wise self-attention over the h*w token grid. Residual; preserves shape.
template <typename S>
struct SelfAttention2d {
    GroupNorm<S> norm;
    Linear<S> qkv, proj;
    int heads = 1;
    SelfAttention2d() = default;
    SelfAttention2d(ParamStore<S>& ps, const std::string& name, int c, int heads_)
        : norm(ps, name + ".norm", c),
          qkv(ps, name + ".qkv", c, 3 * c),
          proj(ps, name + ".proj", c, c),
          heads(heads_) {}

    Var<S> forward(const Var<S>& x) const {
        const auto& sh = x.value().shape();
        const int n = sh[0], hh = sh[1], ww = sh[2], c = sh[3];
        auto h = norm.forward(x);
        auto qkv3 = qkv.forward(h);
        auto q = reshape(slice_lastdim(qkv3, 0, c), {n, hh * ww, c});
        auto k = reshape(slice_lastdim(qkv3, c, c), {n, hh * ww, c});
        auto v = reshape(slice_lastdim(qkv3, 2 * c, c), {n, hh * ww, c});
        auto att = detail::multihead_attend(q, k, v, heads, static_cast<const Tensor<S>*>(nullptr));
        auto o = proj.forward(reshape(att, {n, hh, ww, c}));
        return add(x, o);
    }
};

// Pixel-wise cross attention: queries from pixels, keys/values from the text
// embedding sequence. mask is (N, L) with 1 for valid tokens.
template <typename S>
struct CrossAttention2d {
    GroupNorm<S> norm;
    Linear<S> to_q, to_k, to_v, proj;
    int heads = 1;
    CrossAttention2d() = default;
    CrossAttention2d(ParamStore<S>& ps, const std::string& name, int c, int text_dim, int heads_)
        : norm(ps, name + ".norm", c),
          to_q(ps, name + ".q", c, c),
          to_k(ps, name + ".k", text_dim, c),
          to_v(ps, name + ".v", text_dim, c),
          proj(ps, name + ".proj", c, c),
          heads(heads_) {}

    Var<S> forward(const Var<S>& x, const Var<S>& text, const Tensor<S>& mask) const {
        const auto& sh = x.value().shape();
        const int n = sh[0], hh = sh[1], ww = sh[2], c = sh[3];
        const int tokens = hh * ww;
        const int L = text.value().dim(1);
        check(mask.shape() == Shape({n, L}), "cross attention: mask must be (N,L)");
        auto q = reshape(to_q.forward(norm.forward(x)), {n, tokens, c});
        auto k = to_k.forward(text);
        auto v = to_v.forward(text);
        bool any_pad = false;
        for (int64_t i = 0; i < mask.size(); ++i)
            if (mask[i] <= S(0.5)) {
                any_pad = true;
                break;
            }
        // additive bias: 0 on valid tokens, -1e9 on padding
        Tensor<S> bias;
        if (any_pad) {
            bias = Tensor<S>({n, tokens, L});
            for (int i = 0; i < n; ++i)
                for (int t = 0; t < tokens; ++t)
                    for (int l = 0; l < L; ++l)
                        bias[(int64_t(i) * tokens + t) * L + l] =
                            mask[int64_t(i) * L + l] > S(0.5) ? S(0) : S(-1e9);
        }
        auto att = detail::multihead_attend(q, k, v, heads, any_pad ? &bias : nullptr);
        auto o = proj.forward(reshape(att, {n, hh, ww, c}));
        return add(x, o);
    }
};

// Residual conv block with time-embedding bias.
template <typename S>
struct ResBlock {
    GroupNorm<S> norm1, norm2;
    Conv2d<S> conv1, conv2;
    Linear<S> time_proj;
    Conv2d<S> skip;  // 1x1, only when cin != cout
    bool has_skip = false;
    ResBlock() = default;
    ResBlock(ParamStore<S>& ps, const std::string& name, int cin, int cout, int time_dim)
        : norm1(ps, name + ".norm1", cin),
          norm2(ps, name + ".norm2", cout),
          conv1(ps, name + ".conv1", cin, cout),
          conv2(ps, name + ".conv2", cout, cout),
          time_proj(ps, name + ".time", time_dim, cout) {
        if (cin != cout) {
            skip = Conv2d<S>(ps, name + ".skip", cin, cout, 1);
            has_skip = true;
        }
    }

    Var<S> forward(const Var<S>& x, const Var<S>& temb) const {
        auto h = conv1.forward(silu(norm1.forward(x)));
        h = add_channels(h, time_proj.forward(silu(temb)));
        h = conv2.forward(silu(norm2.forward(h)));
        auto sk = has_skip ? skip.forward(x) : x;
        return add(sk, h);
    }
};

// Squeeze-and-excitation fusion of a UNet feature map with a DEM pyramid
// level at the same resolution: concat -> squeeze -> two-layer excitation ->
// sigmoid gates -> gate-scale -> 1x1 projection back to the UNet width.
// Never resizes; spatial mismatch is a hard error.
template <typename S>
struct SEFuse {
    Linear<S> fc1, fc2;
    Conv2d<S> proj;
    int cu = 0, cd = 0;
    bool gate_bypass = false;  // test hook: forces all gates to 1

    SEFuse() = default;
    SEFuse(ParamStore<S>& ps, const std::string& name, int cu_, int cd_, int reduction)
        : fc1(ps, name + ".fc1", cu_ + cd_, std::max(1, (cu_ + cd_) / reduction)),
          fc2(ps, name + ".fc2", std::max(1, (cu_ + cd_) / reduction), cu_ + cd_),
          proj(ps, name + ".proj", cu_ + cd_, cu_, 1),
          cu(cu_),
          cd(cd_) {}

    Var<S> forward(const Var<S>& unet_feat, const Var<S>& dem_feat) const {
        const auto& su = unet_feat.value().shape();
        const auto& sd = dem_feat.value().shape();
        check(su.size() == 4 && sd.size() == 4, "se_fuse: expects NHWC");
        check(su[0] == sd[0] && su[1] == sd[1] && su[2] == sd[2],
              "se_fuse: spatial mismatch " + shape_str(su) + " vs " + shape_str(sd) +
                  " (MCA never resizes)");
        check(su[3] == cu && sd[3] == cd, "se_fuse: channel mismatch");
        auto cat = concat_lastdim(unet_feat, dem_feat);
        if (!gate_bypass) {
            auto s = global_avg_pool(cat);
            auto gates = sigmoid(fc2.forward(relu(fc1.forward(s))));
            cat = mul_channels(cat, gates);
        }
        return proj.forward(cat);
    }
};

}  // namespace gdr
