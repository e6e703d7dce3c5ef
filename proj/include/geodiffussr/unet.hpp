#pragma once

// Velocity-prediction UNet. Three resolution levels (32/16/8 for the base
// pipeline) with residual blocks, pixel-wise self-attention, text
// cross-attention, and MCA injection of the frozen DEM feature pyramid via
// SE fusion on the encoder path. Modes: FULL (inject at 32/16/8), SINGLE_16
// (16 only), NONE (raw DEM concatenated to the input instead).

#include <json.hpp>

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "geodiffussr/autograd.hpp"
#include "geodiffussr/dem_encoder.hpp"
#include "geodiffussr/nn.hpp"
#include "geodiffussr/tensor.hpp"
#include "geodiffussr/text.hpp"

namespace gdr {

enum class MCAMode { FULL, SINGLE_16, NONE };
enum class SizePreset { S, M, L };

inline std::string to_string(MCAMode m) {
    switch (m) {
        case MCAMode::FULL: return "full";
        case MCAMode::SINGLE_16: return "single16";
        case MCAMode::NONE: return "none";
    }
    return "?";
}

inline MCAMode parse_mca_mode(const std::string& s) {
    if (s == "full") return MCAMode::FULL;
    if (s == "single16" || s == "single") return MCAMode::SINGLE_16;
    if (s == "none") return MCAMode::NONE;
    fail("unknown MCA mode: " + s + " (expected full|single16|none)");
}

inline std::string to_string(SizePreset p) {
    switch (p) {
        case SizePreset::S: return "S";
        case SizePreset::M: return "M";
        case SizePreset::L: return "L";
    }
    return "?";
}

inline SizePreset parse_size_preset(const std::string& s) {
    if (s == "S" || s == "s") return SizePreset::S;
    if (s == "M" || s == "m") return SizePreset::M;
    if (s == "L" || s == "l") return SizePreset::L;
    fail("unknown size preset: " + s + " (expected S|M|L)");
}

struct UNetConfig {
    int base_channels = 16;
    std::vector<int> channel_mults = {1, 2, 3};
    std::vector<int> attention_levels = {1, 2};
    int se_reduction = 4;
    MCAMode mca_mode = MCAMode::FULL;
    int text_dim = 32;
    int heads = 1;
    int res_blocks = 1;
    int input_size = 32;
    std::array<int, 3> pyramid_channels = {16, 32, 64};

    void validate() const {
        check(channel_mults.size() == 3,
              "UNetConfig: exactly 3 levels (32->16->8 downsampling)");
        check(base_channels % 2 == 0, "UNetConfig: base_channels must be even");
        check(input_size % 4 == 0, "UNetConfig: input_size must be divisible by 4");
        for (int l : attention_levels) check(l >= 0 && l < 3, "UNetConfig: bad attention level");
        for (int l = 0; l < 3; ++l)
            check((base_channels * channel_mults[size_t(l)]) % heads == 0,
                  "UNetConfig: channels not divisible by heads");
        check(se_reduction >= 1, "UNetConfig: se_reduction must be >= 1");
        check(res_blocks >= 1, "UNetConfig: res_blocks must be >= 1");
    }

    int channels(int level) const { return base_channels * channel_mults[size_t(level)]; }
    int time_dim() const { return 4 * base_channels; }
    bool attention_at(int level) const {
        for (int l : attention_levels)
            if (l == level) return true;
        return false;
    }
    bool injected(int level) const {
        switch (mca_mode) {
            case MCAMode::FULL: return true;
            case MCAMode::SINGLE_16: return level == 1;
            case MCAMode::NONE: return false;
        }
        return false;
    }

    // Desk-scale mirrors of the paper-scale small/medium/large models: the
    // absolute counts are not meaningful, only the strict S < M < L ordering.
    static UNetConfig preset(SizePreset p, MCAMode mode = MCAMode::FULL) {
        UNetConfig cfg;
        cfg.mca_mode = mode;
        switch (p) {
            case SizePreset::S:
                cfg.base_channels = 16;
                cfg.channel_mults = {1, 2, 3};
                cfg.heads = 1;
                cfg.res_blocks = 1;
                break;
            case SizePreset::M:
                cfg.base_channels = 24;
                cfg.channel_mults = {1, 2, 3};
                cfg.heads = 4;
                cfg.res_blocks = 1;
                break;
            case SizePreset::L:
                cfg.base_channels = 32;
                cfg.channel_mults = {1, 2, 4};
                cfg.heads = 4;
                cfg.res_blocks = 2;
                break;
        }
        return cfg;
    }

    json to_json() const {
        json j;
        j["base_channels"] = base_channels;
        j["channel_mults"] = channel_mults;
        j["attention_levels"] = attention_levels;
        j["se_reduction"] = se_reduction;
        j["mca_mode"] = to_string(mca_mode);
        j["text_dim"] = text_dim;
        j["heads"] = heads;
        j["res_blocks"] = res_blocks;
        j["input_size"] = input_size;
        j["pyramid_channels"] = pyramid_channels;
        return j;
    }

    static UNetConfig from_json(const json& j) {
        UNetConfig cfg;
        cfg.base_channels = j.value("base_channels", cfg.base_channels);
        cfg.channel_mults = j.value("channel_mults", cfg.channel_mults);
        cfg.attention_levels = j.value("attention_levels", cfg.attention_levels);
        cfg.se_reduction = j.value("se_reduction", cfg.se_reduction);
        cfg.mca_mode = parse_mca_mode(j.value("mca_mode", "full"));
        cfg.text_dim = j.value("text_dim", cfg.text_dim);
        cfg.heads = j.value("heads", cfg.heads);
        cfg.res_blocks = j.value("res_blocks", cfg.res_blocks);
        cfg.input_size = j.value("input_size", cfg.input_size);
        cfg.pyramid_channels = j.value("pyramid_channels", cfg.pyramid_channels);
        cfg.validate();
        return cfg;
    }
};

template <typename S>
struct BatchedPyramid {
    Tensor<S> f32, f16, f8;  // (N, s, s, C) per level

    const Tensor<S>& level(int i) const {
        check(i >= 0 && i < 3, "pyramid level out of range");
        return i == 0 ? f32 : i == 1 ? f16 : f8;
    }
};

template <typename S>
BatchedPyramid<S> stack_pyramids(const std::vector<FeaturePyramid<S>>& pyrs) {
    check(!pyrs.empty(), "stack_pyramids: empty batch");
    const int n = int(pyrs.size());
    BatchedPyramid<S> out;
    for (int lvl = 0; lvl < 3; ++lvl) {
        const Tensor<S>& first = pyrs[0].level(lvl);
        Shape s = first.shape();
        Tensor<S> stacked({n, s[0], s[1], s[2]});
        for (int i = 0; i < n; ++i) {
            const Tensor<S>& t = pyrs[size_t(i)].level(lvl);
            check(t.shape() == s, "stack_pyramids: inconsistent shapes");
            std::copy(t.data(), t.data() + t.size(), stacked.data() + int64_t(i) * t.size());
        }
        (lvl == 0 ? out.f32 : lvl == 1 ? out.f16 : out.f8) = std::move(stacked);
    }
    return out;
}

// Everything the velocity model is conditioned on, batched.
template <typename S>
struct Conditioning {
    Tensor<S> text;       // (N, L, D)
    Tensor<S> text_mask;  // (N, L), 1 = valid token
    std::optional<BatchedPyramid<S>> pyramid;  // FULL / SINGLE_16
    std::optional<Tensor<S>> dem;              // (N, H, W, 1) for NONE concat
};

// Pad a batch of per-sample embeddings to the longest sequence.
template <typename S>
void set_text_batch(Conditioning<S>& cond, const std::vector<TextEmbedding<S>>& embs) {
    check(!embs.empty(), "set_text_batch: empty batch");
    const int n = int(embs.size());
    const int d = embs[0].dim();
    int max_len = 1;
    for (const auto& e : embs) {
        check(e.dim() == d, "set_text_batch: inconsistent embedding dim");
        max_len = std::max(max_len, e.length());
    }
    cond.text = Tensor<S>::zeros({n, max_len, d});
    cond.text_mask = Tensor<S>::zeros({n, max_len});
    for (int i = 0; i < n; ++i) {
        const auto& e = embs[size_t(i)];
        for (int l = 0; l < e.length(); ++l) {
            cond.text_mask[int64_t(i) * max_len + l] = S(1);
            for (int k = 0; k < d; ++k)
                cond.text[(int64_t(i) * max_len + l) * d + k] = e.tokens[int64_t(l) * d + k];
        }
    }
}

template <typename S>
class UNetMCA {
public:
    UNetMCA(const UNetConfig& cfg, uint64_t seed) : cfg_(cfg), params_(seed) {
        cfg_.validate();
        const int in_ch = cfg_.mca_mode == MCAMode::NONE ? 4 : 3;
        const int tdim = cfg_.time_dim();
        stem_ = Conv2d<S>(params_, "stem", in_ch, cfg_.channels(0));
        time_fc1_ = Linear<S>(params_, "time.fc1", cfg_.base_channels, tdim);
        time_fc2_ = Linear<S>(params_, "time.fc2", tdim, tdim);

        for (int l = 0; l < 3; ++l) {
            const int ch = cfg_.channels(l);
            std::vector<ResBlock<S>> blocks;
            for (int b = 0; b < cfg_.res_blocks; ++b)
                blocks.emplace_back(params_, "enc" + std::to_string(l) + ".res" + std::to_string(b),
                                    ch, ch, tdim);
            enc_res_[l] = std::move(blocks);
            if (cfg_.attention_at(l))
                enc_attn_[l] = SelfAttention2d<S>(params_, "enc" + std::to_string(l) + ".attn", ch,
                                                  cfg_.heads);
            enc_cross_[l] = CrossAttention2d<S>(params_, "enc" + std::to_string(l) + ".cross", ch,
                                                cfg_.text_dim, cfg_.heads);
            if (cfg_.injected(l))
                enc_fuse_[l] = SEFuse<S>(params_, "enc" + std::to_string(l) + ".fuse", ch,
                                         cfg_.pyramid_channels[size_t(l)], cfg_.se_reduction);
            if (l < 2)
                down_[l] = Conv2d<S>(params_, "down" + std::to_string(l), ch, cfg_.channels(l + 1),
                                     3, 2);
        }

        const int ch2 = cfg_.channels(2);
        mid_res1_ = ResBlock<S>(params_, "mid.res1", ch2, ch2, tdim);
        mid_attn_ = SelfAttention2d<S>(params_, "mid.attn", ch2, cfg_.heads);
        mid_cross_ = CrossAttention2d<S>(params_, "mid.cross", ch2, cfg_.text_dim, cfg_.heads);
        mid_res2_ = ResBlock<S>(params_, "mid.res2", ch2, ch2, tdim);

        for (int l = 2; l >= 0; --l) {
            const int ch = cfg_.channels(l);
            std::vector<ResBlock<S>> blocks;
            for (int b = 0; b < cfg_.res_blocks; ++b)
                blocks.emplace_back(params_, "dec" + std::to_string(l) + ".res" + std::to_string(b),
                                    b == 0 ? 2 * ch : ch, ch, tdim);
            dec_res_[l] = std::move(blocks);
            if (cfg_.attention_at(l))
                dec_attn_[l] = SelfAttention2d<S>(params_, "dec" + std::to_string(l) + ".attn", ch,
                                                  cfg_.heads);
            dec_cross_[l] = CrossAttention2d<S>(params_, "dec" + std::to_string(l) + ".cross", ch,
                                                cfg_.text_dim, cfg_.heads);
            if (l > 0)
                up_[size_t(l) - 1] = Conv2d<S>(params_, "up" + std::to_string(l), ch,
                                               cfg_.channels(l - 1));
        }

        head_norm_ = GroupNorm<S>(params_, "head.norm", cfg_.channels(0));
        head_conv_ = Conv2d<S>(params_, "head.conv", cfg_.channels(0), 3, 3, 1, Init::ZEROS);
    }

    // x_t: (N, H, W, 3); t: per-sample flow time in [0,1]
    Var<S> forward(const Var<S>& x_t, const std::vector<S>& t, const Conditioning<S>& cond) {
        const auto& xs = x_t.value().shape();
        check(xs.size() == 4 && xs[3] == 3,
              "forward: expects (N,H,W,3) input, got " + shape_str(xs));
        const int n = xs[0];
        check(xs[1] == cfg_.input_size && xs[2] == cfg_.input_size,
              "forward: expected " + std::to_string(cfg_.input_size) + "x" +
                  std::to_string(cfg_.input_size) + " tiles");
        check(int(t.size()) == n, "forward: t must have one entry per sample");
        for (S ti : t) check(ti >= S(0) && ti <= S(1), "forward: t outside [0,1]");
        check(!cond.text.empty() && !cond.text_mask.empty(),
              "forward: missing text embedding (pass null_embedding for the unconditional "
              "branch)");
        check(cond.text.dim(0) == n && cond.text.dim(2) == cfg_.text_dim,
              "forward: text batch must be (N,L,text_dim)");
        if (cfg_.mca_mode != MCAMode::NONE)
            check(cond.pyramid.has_value(),
                  "forward: MCA mode " + to_string(cfg_.mca_mode) + " requires a DEM pyramid");

        Var<S> h;
        if (cfg_.mca_mode == MCAMode::NONE) {
            check(cond.dem.has_value(), "forward: NONE mode requires the raw DEM channel");
            check(cond.dem->shape() == Shape({n, xs[1], xs[2], 1}),
                  "forward: DEM channel must be (N,H,W,1)");
            h = stem_.forward(concat_lastdim(x_t, Var<S>::constant(*cond.dem)));
        } else {
            h = stem_.forward(x_t);
        }

        Var<S> text = Var<S>::constant(cond.text);
        Tensor<S> temb_sin = time_embedding(t, cfg_.base_channels);
        Var<S> temb = time_fc2_.forward(silu(time_fc1_.forward(Var<S>::constant(temb_sin))));

        std::array<Var<S>, 3> skips;
        for (int l = 0; l < 3; ++l) {
            for (const auto& blk : enc_res_[l]) h = blk.forward(h, temb);
            if (enc_attn_[l]) h = enc_attn_[l]->forward(h);
            h = enc_cross_[l].forward(h, text, cond.text_mask);
            if (enc_fuse_[l]) {
                Var<S> dem_feat = Var<S>::constant(cond.pyramid->level(l));
                h = add(h, enc_fuse_[l]->forward(h, dem_feat));
            }
            skips[size_t(l)] = h;
            if (l < 2) h = down_[l].forward(h);
        }

        h = mid_res1_.forward(h, temb);
        h = mid_attn_.forward(h);
        h = mid_cross_.forward(h, text, cond.text_mask);
        h = mid_res2_.forward(h, temb);

        for (int l = 2; l >= 0; --l) {
            h = concat_lastdim(h, skips[size_t(l)]);
            for (const auto& blk : dec_res_[l]) h = blk.forward(h, temb);
            if (dec_attn_[l]) h = dec_attn_[l]->forward(h);
            h = dec_cross_[l].forward(h, text, cond.text_mask);
            if (l > 0) h = up_[size_t(l) - 1].forward(upsample_nearest2x(h));
        }

        auto v = head_conv_.forward(silu(head_norm_.forward(h)));
        return v;
    }

    // Inference: no tape, activations free eagerly.
    Tensor<S> forward_infer(const Tensor<S>& x_t, const std::vector<S>& t,
                            const Conditioning<S>& cond) {
        NoGradGuard guard;
        return forward(Var<S>::constant(x_t), t, cond).value();
    }

    ParamStore<S>& params() { return params_; }
    const ParamStore<S>& params() const { return params_; }
    const UNetConfig& config() const { return cfg_; }

    SEFuse<S>* fuse_at(int level) {
        return enc_fuse_[level] ? &*enc_fuse_[level] : nullptr;
    }

    NamedTensors<S> state() const {
        NamedTensors<S> out;
        for (const auto& [name, v] : params_.items()) out.push_back({name, v.value()});
        return out;
    }

    void load_state(const NamedTensors<S>& tensors) {
        check(tensors.size() == params_.count(), "load_state: parameter count mismatch");
        for (size_t i = 0; i < tensors.size(); ++i) {
            auto& [name, t] = tensors[i];
            auto& [pname, v] = params_.items()[i];
            check(name == pname, "load_state: parameter name mismatch: " + name + " vs " + pname);
            check(t.shape() == v.value().shape(), "load_state: shape mismatch at " + name);
            v.value() = t;
        }
    }

    static int64_t count_parameters(const UNetConfig& cfg) {
        UNetMCA net(cfg, 0);
        return net.params_.total_size();
    }

private:
    UNetConfig cfg_;
    ParamStore<S> params_;
    Conv2d<S> stem_;
    Linear<S> time_fc1_, time_fc2_;
    std::array<std::vector<ResBlock<S>>, 3> enc_res_;
    std::array<std::optional<SelfAttention2d<S>>, 3> enc_attn_;
    std::array<CrossAttention2d<S>, 3> enc_cross_;
    std::array<std::optional<SEFuse<S>>, 3> enc_fuse_;
    std::array<Conv2d<S>, 2> down_;
    ResBlock<S> mid_res1_, mid_res2_;
    SelfAttention2d<S> mid_attn_;
    CrossAttention2d<S> mid_cross_;
    std::array<std::vector<ResBlock<S>>, 3> dec_res_;
    std::array<std::optional<SelfAttention2d<S>>, 3> dec_attn_;
    std::array<CrossAttention2d<S>, 3> dec_cross_;
    std::array<Conv2d<S>, 2> up_;
    GroupNorm<S> head_norm_;
    Conv2d<S> head_conv_;
};

}  // namespace gdr
