#pragma once

// Frozen multi-scale DEM feature extractor. A VGG-style stack of 3x3 conv +
// ReLU blocks with 2x2 max pooling between them; the pyramid taps the output
// of each block before its pooling step, giving native 32/16/8 feature maps
// for a 32x32 input. The encoder lives outside the autograd tape and is never
// touched by training gradients.

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "geodiffussr/autograd.hpp"
#include "geodiffussr/container.hpp"
#include "geodiffussr/rng.hpp"
#include "geodiffussr/tensor.hpp"
#include "geodiffussr/tile.hpp"

namespace gdr {

template <typename S>
struct FeaturePyramid {
    Tensor<S> f32;  // (H,   W,   C1)
    Tensor<S> f16;  // (H/2, W/2, C2)
    Tensor<S> f8;   // (H/4, W/4, C3)

    const Tensor<S>& level(int i) const {
        check(i >= 0 && i < 3, "pyramid level out of range");
        return i == 0 ? f32 : i == 1 ? f16 : f8;
    }
};

namespace detail {

template <typename S>
Tensor<S> conv_plain(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
    const int N = x.dim(0), H = x.dim(1), W = x.dim(2);
    const int k = w.dim(0), cin = w.dim(2), cout = w.dim(3);
    const int pad = k / 2;
    const int patch = k * k * cin;
    const int64_t rows = int64_t(N) * H * W;
    Tensor<S> cols({int(rows), patch});
    im2col(x, k, 1, pad, cols, H, W);
    Tensor<S> y({N, H, W, cout});
    auto ym = y.mat(rows, cout);
    ym.noalias() = cols.mat(rows, patch) * w.mat(patch, cout);
    ym.rowwise() += b.mat(1, cout).row(0);
    return y;
}

template <typename S>
Tensor<S> maxpool2x2(const Tensor<S>& x) {
    const int N = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
    Tensor<S> y({N, H / 2, W / 2, C});
    for (int n = 0; n < N; ++n)
        for (int i = 0; i < H / 2; ++i)
            for (int j = 0; j < W / 2; ++j)
                for (int c = 0; c < C; ++c) {
                    auto at = [&](int ii, int jj) {
                        return x[((int64_t(n) * H + ii) * W + jj) * C + c];
                    };
                    S m = std::max(std::max(at(2 * i, 2 * j), at(2 * i, 2 * j + 1)),
                                   std::max(at(2 * i + 1, 2 * j), at(2 * i + 1, 2 * j + 1)));
                    y[((int64_t(n) * (H / 2) + i) * (W / 2) + j) * C + c] = m;
                }
    return y;
}

}  // namespace detail

struct EncoderLayout {
    std::string preset;
    std::array<int, 3> channels;         // per block
    std::array<int, 3> convs_per_block;
    std::array<double, 3> norm_mean;
    std::array<double, 3> norm_std;
};

inline EncoderLayout tiny_seeded_layout() {
    return {"tiny-seeded", {16, 32, 64}, {2, 2, 2}, {0.5, 0.5, 0.5}, {0.5, 0.5, 0.5}};
}

inline EncoderLayout vgg16_layout() {
    return {"vgg16",
            {64, 128, 256},
            {2, 2, 3},
            {0.485, 0.456, 0.406},
            {0.229, 0.224, 0.225}};
}

inline EncoderLayout layout_for(const std::string& preset) {
    if (preset == "tiny-seeded") return tiny_seeded_layout();
    if (preset == "vgg16") return vgg16_layout();
    fail("unknown encoder preset: " + preset);
}

constexpr uint64_t kTinySeededSeed = 0x67656f746572ull;

template <typename S>
class DemEncoder {
public:
    struct ConvLayer {
        Tensor<S> w, b;
    };

    static DemEncoder tiny_seeded(int input_size = 32, uint64_t seed = kTinySeededSeed) {
        DemEncoder enc;
        enc.layout_ = tiny_seeded_layout();
        enc.input_size_ = input_size;
        int cin = 3;
        for (int blk = 0; blk < 3; ++blk) {
            std::vector<ConvLayer> layers;
            for (int i = 0; i < enc.layout_.convs_per_block[blk]; ++i) {
                int cout = enc.layout_.channels[blk];
                Rng rng = substream(seed, "enc.b" + std::to_string(blk) + ".c" + std::to_string(i));
                S std = S(std::sqrt(2.0 / (9.0 * cin)));
                layers.push_back({Tensor<S>::randn({3, 3, cin, cout}, rng, std),
                                  Tensor<S>::zeros({cout})});
                cin = cout;
            }
            enc.blocks_.push_back(std::move(layers));
        }
        return enc;
    }

    // Pyramid over a single normalized DEM. 1 channel is replicated to 3,
    // passed through the preset's per-channel affine normalization, then the
    // conv stack. Wrong spatial size is a hard error; there is no resize.
    FeaturePyramid<S> encode(const Tensor<S>& dem) const {
        check(dem.rank() == 2, "encode_dem: expects (H,W)");
        check(dem.dim(0) == input_size_ && dem.dim(1) == input_size_,
              "encode_dem: expected " + std::to_string(input_size_) + "x" +
                  std::to_string(input_size_) + " input, got " + shape_str(dem.shape()));
        Tensor<S> rgb({input_size_, input_size_, 3});
        for (int64_t i = 0; i < dem.size(); ++i)
            for (int c = 0; c < 3; ++c) rgb[i * 3 + c] = dem[i];
        return encode_channels(rgb);
    }

    // Shared trunk over an explicit (H,W,3) input (used by the desk feature
    // extractor on textures).
    FeaturePyramid<S> encode_channels(const Tensor<S>& rgb) const {
        check(rgb.rank() == 3 && rgb.dim(2) == 3, "encode_channels: expects (H,W,3)");
        check(rgb.dim(0) == input_size_ && rgb.dim(1) == input_size_,
              "encode_channels: expected " + std::to_string(input_size_) + "x" +
                  std::to_string(input_size_) + " input, got " + shape_str(rgb.shape()));
        Tensor<S> x({1, input_size_, input_size_, 3});
        for (int64_t i = 0; i < rgb.size() / 3; ++i)
            for (int c = 0; c < 3; ++c)
                x[i * 3 + c] =
                    (rgb[i * 3 + c] - S(layout_.norm_mean[c])) / S(layout_.norm_std[c]);

        FeaturePyramid<S> pyr;
        for (int blk = 0; blk < 3; ++blk) {
            for (const auto& layer : blocks_[blk]) {
                x = detail::conv_plain(x, layer.w, layer.b);
                x.vec().array() = x.vec().array().max(S(0));
            }
            Tensor<S> tap = x.reshaped({x.dim(1), x.dim(2), x.dim(3)});
            (blk == 0 ? pyr.f32 : blk == 1 ? pyr.f16 : pyr.f8) = std::move(tap);
            if (blk < 2) x = detail::maxpool2x2(x);
        }
        return pyr;
    }

    FeaturePyramid<S> encode(const TerrainTile& tile) const {
        return encode(tile.elevation.template cast<S>());
    }

    const EncoderLayout& layout() const { return layout_; }
    int input_size() const { return input_size_; }
    std::array<int, 3> tap_channels() const { return layout_.channels; }

    NamedTensors<S> named_tensors() const {
        NamedTensors<S> out;
        for (int blk = 0; blk < 3; ++blk)
            for (size_t i = 0; i < blocks_[blk].size(); ++i) {
                std::string base =
                    "block" + std::to_string(blk + 1) + ".conv" + std::to_string(i + 1);
                out.push_back({base + ".w", blocks_[blk][i].w});
                out.push_back({base + ".b", blocks_[blk][i].b});
            }
        return out;
    }

    uint64_t checksum() const {
        uint64_t h = 0xcbf29ce484222325ull;
        for (const auto& [name, t] : named_tensors()) {
            h ^= fnv1a64(name);
            h *= 0x100000001b3ull;
            h ^= tensor_checksum(t);
            h *= 0x100000001b3ull;
        }
        return h;
    }

    void save(const std::filesystem::path& path) const {
        json meta;
        meta["preset"] = layout_.preset;
        meta["input_size"] = input_size_;
        meta["norm_mean"] = layout_.norm_mean;
        meta["norm_std"] = layout_.norm_std;
        meta["param_checksum"] = checksum();
        save_container<S>(path, named_tensors(), meta);
    }

    static DemEncoder load(const std::filesystem::path& path) {
        json meta;
        NamedTensors<S> tensors = load_container<S>(path, &meta);
        std::string preset = meta.value("preset", "");
        EncoderLayout layout = layout_for(preset);
        DemEncoder enc;
        enc.layout_ = layout;
        enc.input_size_ = meta.value("input_size", 32);
        if (meta.contains("norm_mean")) {
            enc.layout_.norm_mean = meta["norm_mean"].get<std::array<double, 3>>();
            enc.layout_.norm_std = meta["norm_std"].get<std::array<double, 3>>();
        }
        size_t idx = 0;
        int cin = 3;
        for (int blk = 0; blk < 3; ++blk) {
            std::vector<ConvLayer> layers;
            for (int i = 0; i < layout.convs_per_block[blk]; ++i) {
                int cout = layout.channels[blk];
                std::string base =
                    "block" + std::to_string(blk + 1) + ".conv" + std::to_string(i + 1);
                check(idx < tensors.size() && tensors[idx].first == base + ".w",
                      "encoder weights: missing layer " + base + ".w in " + path.string());
                Tensor<S>& w = tensors[idx].second;
                check(w.shape() == Shape({3, 3, cin, cout}),
                      "encoder weights: shape mismatch at layer " + base + ".w: expected " +
                          shape_str({3, 3, cin, cout}) + ", got " + shape_str(w.shape()));
                ++idx;
                check(idx < tensors.size() && tensors[idx].first == base + ".b",
                      "encoder weights: missing layer " + base + ".b in " + path.string());
                Tensor<S>& b = tensors[idx].second;
                check(b.shape() == Shape({cout}),
                      "encoder weights: shape mismatch at layer " + base + ".b");
                ++idx;
                layers.push_back({std::move(w), std::move(b)});
                cin = cout;
            }
            enc.blocks_.push_back(std::move(layers));
        }
        if (meta.contains("param_checksum")) {
            uint64_t want = meta["param_checksum"];
            check(enc.checksum() == want, "encoder weights: parameter checksum mismatch in " +
                                              path.string());
        }
        return enc;
    }

private:
    EncoderLayout layout_;
    int input_size_ = 32;
    std::vector<std::vector<ConvLayer>> blocks_;
};

// Weight loading entry point. A missing file is an error unless the caller
// allows the deterministic tiny-seeded fallback.
template <typename S>
DemEncoder<S> load_encoder_weights(const std::filesystem::path& path,
                                   const std::string& fallback_preset = "") {
    if (!std::filesystem::exists(path)) {
        if (fallback_preset == "tiny-seeded") return DemEncoder<S>::tiny_seeded();
        fail("encoder weight file not found: " + path.string() +
             (fallback_preset.empty() ? "" : " (unknown fallback '" + fallback_preset + "')"));
    }
    return DemEncoder<S>::load(path);
}

}  // namespace gdr
