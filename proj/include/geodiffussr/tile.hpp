#pragma once

#include <optional>

#include "geodiffussr/tensor.hpp"

namespace gdr {

// Elevation range of the raw DEM before normalization, kept so tiles can be
// de-normalized for rendering.
struct ElevationMeta {
    float min_elev_m = 0.0f;
    float max_elev_m = 0.0f;
};

// Single-channel elevation grid, normalized to [0,1].
struct TerrainTile {
    Tensor<float> elevation;  // (H, W)
    std::optional<ElevationMeta> meta;

    int height() const { return elevation.dim(0); }
    int width() const { return elevation.dim(1); }
};

// H x W x 3 color grid in [0,1].
struct TextureTile {
    Tensor<float> rgb;  // (H, W, 3)

    int height() const { return rgb.dim(0); }
    int width() const { return rgb.dim(1); }
};

// Textures are stored in [0,1] but trained in [-1,1] to center the noise prior.
template <typename S>
Tensor<S> to_internal_range(const Tensor<S>& stored) {
    Tensor<S> out = stored;
    out.vec().array() = out.vec().array() * S(2) - S(1);
    return out;
}

template <typename S>
Tensor<S> to_storage_range(const Tensor<S>& internal) {
    Tensor<S> out = internal;
    out.vec().array() = ((out.vec().array() + S(1)) * S(0.5)).cwiseMax(S(0)).cwiseMin(S(1));
    return out;
}

}  // namespace gdr
