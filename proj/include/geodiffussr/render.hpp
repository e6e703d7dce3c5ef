#pragma once

// 2.5D preview composition: DEM subdivision upscaling, pluggable texture
// super-resolution (bicubic default), Lambertian hillshading, and textured
// heightfield mesh export (OBJ + MTL + texture).

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>

#include "geodiffussr/png_io.hpp"
#include "geodiffussr/tensor.hpp"
#include "geodiffussr/tile.hpp"

namespace gdr {

inline void check_upscale_factor(int factor) {
    check(factor == 2 || factor == 4 || factor == 8,
          "upscale factor must be 2, 4, or 8, got " + std::to_string(factor));
}

// Bilinear subdivision to (factor*H) x (factor*W). Output sample (i,j) reads
// input coordinate (i/factor, j/factor) with edge clamping, so original grid
// values are preserved exactly at the lattice points out[i*f, j*f] = in[i,j].
inline Tensor<float> subdivide_grid(const Tensor<float>& in, int factor) {
    check_upscale_factor(factor);
    check(in.rank() == 2, "subdivide_dem: expects (H,W)");
    const int h = in.dim(0), w = in.dim(1);
    Tensor<float> out({h * factor, w * factor});
    for (int y = 0; y < h * factor; ++y) {
        float fy = float(y) / float(factor);
        int y0 = std::min(int(fy), h - 1);
        int y1 = std::min(y0 + 1, h - 1);
        float ty = fy - float(y0);
        for (int x = 0; x < w * factor; ++x) {
            float fx = float(x) / float(factor);
            int x0 = std::min(int(fx), w - 1);
            int x1 = std::min(x0 + 1, w - 1);
            float tx = fx - float(x0);
            float v = (1 - ty) * ((1 - tx) * in[int64_t(y0) * w + x0] +
                                  tx * in[int64_t(y0) * w + x1]) +
                      ty * ((1 - tx) * in[int64_t(y1) * w + x0] +
                            tx * in[int64_t(y1) * w + x1]);
            out[int64_t(y) * w * factor + x] = v;
        }
    }
    return out;
}

inline TerrainTile subdivide_dem(const TerrainTile& dem, int factor) {
    TerrainTile out;
    out.elevation = subdivide_grid(dem.elevation, factor);
    out.meta = dem.meta;
    return out;
}

namespace detail {

inline float catmull_rom(float t) {
    t = std::abs(t);
    if (t <= 1.0f) return 1.5f * t * t * t - 2.5f * t * t + 1.0f;
    if (t < 2.0f) return -0.5f * t * t * t + 2.5f * t * t - 4.0f * t + 2.0f;
    return 0.0f;
}

}  // namespace detail

// Separable Catmull-Rom bicubic with edge clamping; same alignment as
// subdivide_grid (input coordinate = output / factor).
inline Tensor<float> bicubic_upscale(const Tensor<float>& rgb, int factor) {
    check_upscale_factor(factor);
    check(rgb.rank() == 3 && rgb.dim(2) == 3, "bicubic_upscale: expects (H,W,3)");
    const int h = rgb.dim(0), w = rgb.dim(1);
    const int oh = h * factor, ow = w * factor;

    // horizontal pass
    Tensor<float> tmp({h, ow, 3});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < ow; ++x) {
            float fx = float(x) / float(factor);
            int x0 = int(std::floor(fx));
            float tx = fx - float(x0);
            for (int c = 0; c < 3; ++c) {
                float acc = 0;
                for (int k = -1; k <= 2; ++k) {
                    int xi = std::clamp(x0 + k, 0, w - 1);
                    acc += detail::catmull_rom(float(k) - tx) *
                           rgb[(int64_t(y) * w + xi) * 3 + c];
                }
                tmp[(int64_t(y) * ow + x) * 3 + c] = acc;
            }
        }
    // vertical pass
    Tensor<float> out({oh, ow, 3});
    for (int y = 0; y < oh; ++y) {
        float fy = float(y) / float(factor);
        int y0 = int(std::floor(fy));
        float ty = fy - float(y0);
        for (int x = 0; x < ow; ++x)
            for (int c = 0; c < 3; ++c) {
                float acc = 0;
                for (int k = -1; k <= 2; ++k) {
                    int yi = std::clamp(y0 + k, 0, h - 1);
                    acc += detail::catmull_rom(float(k) - ty) *
                           tmp[(int64_t(yi) * ow + x) * 3 + c];
                }
                out[(int64_t(y) * ow + x) * 3 + c] = std::clamp(acc, 0.0f, 1.0f);
            }
    }
    return out;
}

using UpsamplerFn = std::function<Tensor<float>(const Tensor<float>&, int)>;

// Plug-in slot for learned super-resolution; any plug-in failure falls back
// to bicubic with a warning.
inline TextureTile upscale_texture(const TextureTile& texture, int factor,
                                   const UpsamplerFn& plugin = nullptr) {
    check_upscale_factor(factor);
    TextureTile out;
    if (plugin) {
        try {
            out.rgb = plugin(texture.rgb, factor);
            check(out.rgb.shape() ==
                      Shape({texture.height() * factor, texture.width() * factor, 3}),
                  "upsampler plug-in returned wrong shape");
            return out;
        } catch (const std::exception& e) {
            std::cerr << "[geodiffussr] warning: upsampler plug-in failed (" << e.what()
                      << "), falling back to bicubic\n";
        }
    }
    out.rgb = bicubic_upscale(texture.rgb, factor);
    return out;
}

// Lambertian hillshade from central-difference surface normals, multiplied
// onto the texture. Output is quantized to 8-bit RGB levels.
inline TextureTile hillshade_render(const TerrainTile& dem, const TextureTile& texture,
                                    const std::array<float, 3>& light_dir, float z_scale) {
    const int h = dem.height(), w = dem.width();
    check(texture.height() == h && texture.width() == w,
          "hillshade_render: DEM and texture grids differ (upscale first)");
    float norm = std::sqrt(light_dir[0] * light_dir[0] + light_dir[1] * light_dir[1] +
                           light_dir[2] * light_dir[2]);
    check(norm > 0.0f, "hillshade_render: light_dir must be non-zero");
    const float lx = light_dir[0] / norm, ly = light_dir[1] / norm, lz = light_dir[2] / norm;

    TextureTile out;
    out.rgb = Tensor<float>({h, w, 3});
    auto z = [&](int y, int x) {
        y = std::clamp(y, 0, h - 1);
        x = std::clamp(x, 0, w - 1);
        return dem.elevation[int64_t(y) * w + x] * z_scale;
    };
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            float dzdx = (z(y, x + 1) - z(y, x - 1)) * 0.5f;
            float dzdy = (z(y + 1, x) - z(y - 1, x)) * 0.5f;
            float nx = -dzdx, ny = -dzdy, nz = 1.0f;
            float nn = std::sqrt(nx * nx + ny * ny + nz * nz);
            float shade = std::max(0.0f, (nx * lx + ny * ly + nz * lz) / nn);
            for (int c = 0; c < 3; ++c) {
                float v = texture.rgb[(int64_t(y) * w + x) * 3 + c] * shade;
                out.rgb[(int64_t(y) * w + x) * 3 + c] =
                    float(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)) / 255.0f;
            }
        }
    return out;
}

struct MeshStats {
    int64_t vertices = 0;
    int64_t faces = 0;
};

// Textured heightfield mesh: OBJ with per-vertex UVs, an MTL referencing the
// texture image, and the texture PNG alongside. Vertices are (x=col, y=row,
// z=elevation*z_scale); H*W vertices, 2(H-1)(W-1) triangles.
inline MeshStats export_mesh(const TerrainTile& dem, const TextureTile& texture, float z_scale,
                             const std::filesystem::path& obj_path) {
    const int h = dem.height(), w = dem.width();
    check(h >= 2 && w >= 2, "export_mesh: grid must be at least 2x2");

    auto mtl_path = obj_path;
    mtl_path.replace_extension(".mtl");
    auto tex_path = obj_path;
    tex_path.replace_extension(".png");
    write_png_rgb8(tex_path, texture.rgb);

    {
        std::ofstream mtl(mtl_path);
        check(mtl.good(), "cannot open for write: " + mtl_path.string());
        mtl << "newmtl terrain\n";
        mtl << "Ka 1 1 1\nKd 1 1 1\nKs 0 0 0\n";
        mtl << "map_Kd " << tex_path.filename().string() << "\n";
    }

    std::ofstream obj(obj_path);
    check(obj.good(), "cannot open for write: " + obj_path.string());
    obj.precision(9);
    obj << "mtllib " << mtl_path.filename().string() << "\n";
    obj << "usemtl terrain\n";
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            obj << "v " << x << " " << y << " " << dem.elevation[int64_t(y) * w + x] * z_scale
                << "\n";
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            obj << "vt " << (w > 1 ? float(x) / float(w - 1) : 0.0f) << " "
                << (h > 1 ? 1.0f - float(y) / float(h - 1) : 0.0f) << "\n";
    auto vid = [w](int y, int x) { return int64_t(y) * w + x + 1; };  // 1-indexed
    for (int y = 0; y + 1 < h; ++y)
        for (int x = 0; x + 1 < w; ++x) {
            int64_t a = vid(y, x), b = vid(y, x + 1), c = vid(y + 1, x), d = vid(y + 1, x + 1);
            obj << "f " << a << "/" << a << " " << b << "/" << b << " " << d << "/" << d << "\n";
            obj << "f " << a << "/" << a << " " << d << "/" << d << " " << c << "/" << c << "\n";
        }
    check(obj.good(), "write failed: " + obj_path.string());
    return {int64_t(h) * w, 2 * int64_t(h - 1) * (w - 1)};
}

}  // namespace gdr
