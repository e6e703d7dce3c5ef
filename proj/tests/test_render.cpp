#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "geodiffussr/render.hpp"

using namespace gdr;
namespace fs = std::filesystem;

TEST_CASE("subdivide_dem bilinear by hand on a 2x2 tile") {
    Tensor<float> in({2, 2}, {0.0f, 1.0f, 0.0f, 1.0f});
    auto out = subdivide_grid(in, 2);
    REQUIRE(out.shape() == Shape({4, 4}));
    // columns ramp 0 -> 0.5 -> 1 and clamp at the edge
    for (int y = 0; y < 4; ++y) {
        CHECK(out[y * 4 + 0] == 0.0f);
        CHECK(out[y * 4 + 1] == 0.5f);
        CHECK(out[y * 4 + 2] == 1.0f);
        CHECK(out[y * 4 + 3] == 1.0f);
    }
}

TEST_CASE("subdivide_dem preserves lattice points exactly") {
    Rng rng(5);
    Tensor<float> in = Tensor<float>::rand_uniform({7, 9}, rng);
    for (int f : {2, 4, 8}) {
        auto out = subdivide_grid(in, f);
        REQUIRE(out.shape() == Shape({7 * f, 9 * f}));
        for (int i = 0; i < 7; ++i)
            for (int j = 0; j < 9; ++j)
                REQUIRE(out[int64_t(i) * f * 9 * f + int64_t(j) * f] == in[i * 9 + j]);
    }
}

TEST_CASE("subdivide_dem constant and bilinear exactness") {
    auto constant = Tensor<float>::full({4, 4}, 0.37f);
    auto out = subdivide_grid(constant, 2);
    for (int64_t i = 0; i < out.size(); ++i) CHECK(out[i] == 0.37f);

    // exact on bilinear functions of (i,j) over the non-clamped interior
    const int h = 5, w = 6, f = 4;
    Tensor<float> bil({h, w});
    auto fval = [](float i, float j) { return 0.2f + 0.1f * i - 0.05f * j + 0.02f * i * j; };
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) bil[i * w + j] = fval(float(i), float(j));
    auto up = subdivide_grid(bil, f);
    for (int y = 0; y <= (h - 1) * f; ++y)
        for (int x = 0; x <= (w - 1) * f; ++x)
            REQUIRE_THAT(up[int64_t(y) * w * f + x],
                         Catch::Matchers::WithinAbs(fval(float(y) / f, float(x) / f), 1e-5));

    CHECK_THROWS(subdivide_grid(constant, 3));
    CHECK_THROWS(subdivide_grid(constant, 16));
}

TEST_CASE("bicubic upscale matches a direct convolution oracle") {
    Rng rng(9);
    Tensor<float> img = Tensor<float>::rand_uniform({6, 5, 3}, rng);
    const int f = 4;
    auto got = bicubic_upscale(img, f);
    REQUIRE(got.shape() == Shape({24, 20, 3}));

    // non-separated direct evaluation of the same Catmull-Rom kernel
    const int h = 6, w = 5;
    for (int y = 0; y < 24; ++y)
        for (int x = 0; x < 20; ++x) {
            float fy = float(y) / f, fx = float(x) / f;
            int y0 = int(std::floor(fy)), x0 = int(std::floor(fx));
            float ty = fy - y0, tx = fx - x0;
            for (int c = 0; c < 3; ++c) {
                float acc = 0;
                for (int ky = -1; ky <= 2; ++ky)
                    for (int kx = -1; kx <= 2; ++kx) {
                        int yi = std::clamp(y0 + ky, 0, h - 1);
                        int xi = std::clamp(x0 + kx, 0, w - 1);
                        acc += detail::catmull_rom(float(ky) - ty) *
                               detail::catmull_rom(float(kx) - tx) *
                               img[(int64_t(yi) * w + xi) * 3 + c];
                    }
                acc = std::clamp(acc, 0.0f, 1.0f);
                REQUIRE_THAT(got[(int64_t(y) * 20 + x) * 3 + c],
                             Catch::Matchers::WithinAbs(acc, 1e-6));
            }
        }
}

TEST_CASE("bicubic constant image stays constant and output is in range") {
    TextureTile tex{Tensor<float>::full({8, 8, 3}, 0.42f)};
    auto up = upscale_texture(tex, 4);
    REQUIRE(up.rgb.shape() == Shape({32, 32, 3}));
    for (int64_t i = 0; i < up.rgb.size(); ++i)
        REQUIRE_THAT(up.rgb[i], Catch::Matchers::WithinAbs(0.42f, 1e-6));

    Rng rng(3);
    TextureTile noisy{Tensor<float>::rand_uniform({16, 16, 3}, rng)};
    auto up2 = upscale_texture(noisy, 2);
    for (int64_t i = 0; i < up2.rgb.size(); ++i) {
        REQUIRE(up2.rgb[i] >= 0.0f);
        REQUIRE(up2.rgb[i] <= 1.0f);
    }
}

TEST_CASE("upsampler plug-in is used and falls back on failure") {
    TextureTile tex{Tensor<float>::full({4, 4, 3}, 0.5f)};

    bool called = false;
    UpsamplerFn ok = [&](const Tensor<float>& rgb, int factor) {
        called = true;
        return Tensor<float>::full({rgb.dim(0) * factor, rgb.dim(1) * factor, 3}, 0.9f);
    };
    auto up = upscale_texture(tex, 2, ok);
    CHECK(called);
    CHECK(up.rgb[0] == 0.9f);

    UpsamplerFn broken = [](const Tensor<float>&, int) -> Tensor<float> {
        throw std::runtime_error("plug-in exploded");
    };
    auto fallback = upscale_texture(tex, 2, broken);
    REQUIRE(fallback.rgb.shape() == Shape({8, 8, 3}));
    CHECK_THAT(fallback.rgb[0], Catch::Matchers::WithinAbs(0.5f, 1e-6));
}

TEST_CASE("hillshade of a flat DEM under zenith light is the identity") {
    Rng rng(7);
    TerrainTile flat{Tensor<float>::full({16, 16}, 0.4f), {}};
    TextureTile tex{Tensor<float>::rand_uniform({16, 16, 3}, rng)};
    auto shaded = hillshade_render(flat, tex, {0.0f, 0.0f, 1.0f}, 8.0f);
    for (int64_t i = 0; i < tex.rgb.size(); ++i)
        REQUIRE_THAT(shaded.rgb[i], Catch::Matchers::WithinAbs(tex.rgb[i], 1.0 / 255.0));
}

TEST_CASE("hillshade grazing light darkens uniformly by the cosine law") {
    TerrainTile flat{Tensor<float>::full({8, 8}, 0.5f), {}};
    TextureTile tex{Tensor<float>::full({8, 8, 3}, 1.0f)};
    // light at 60 degrees from zenith: cos = 0.5
    float s = std::sqrt(3.0f) / 2.0f;
    auto shaded = hillshade_render(flat, tex, {s, 0.0f, 0.5f}, 8.0f);
    for (int64_t i = 0; i < shaded.rgb.size(); ++i)
        REQUIRE_THAT(shaded.rgb[i], Catch::Matchers::WithinAbs(0.5f, 1.0 / 255.0));
}

TEST_CASE("east-facing slopes are brighter under east light than west light") {
    // elevation decreases eastward (+x), so the surface faces east
    const int n = 16;
    TerrainTile slope{Tensor<float>({n, n}), {}};
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x)
            slope.elevation[int64_t(y) * n + x] = 1.0f - float(x) / float(n - 1);
    TextureTile tex{Tensor<float>::full({n, n, 3}, 1.0f)};

    auto east_lit = hillshade_render(slope, tex, {1.0f, 0.0f, 0.6f}, 8.0f);
    auto west_lit = hillshade_render(slope, tex, {-1.0f, 0.0f, 0.6f}, 8.0f);
    double east_mean = 0, west_mean = 0;
    for (int64_t i = 0; i < east_lit.rgb.size(); ++i) {
        east_mean += east_lit.rgb[i];
        west_mean += west_lit.rgb[i];
    }
    CHECK(east_mean > west_mean);

    CHECK_THROWS(hillshade_render(slope, tex, {0.0f, 0.0f, 0.0f}, 8.0f));
}

TEST_CASE("export_mesh counts and exact vertex elevations") {
    auto dir = fs::temp_directory_path() / "gdr_test_mesh";
    fs::create_directories(dir);
    Rng rng(11);

    SECTION("2x2 grid") {
        TerrainTile dem{Tensor<float>::rand_uniform({2, 2}, rng), {}};
        TextureTile tex{Tensor<float>::rand_uniform({2, 2, 3}, rng)};
        auto stats = export_mesh(dem, tex, 5.0f, dir / "tiny.obj");
        CHECK(stats.vertices == 4);
        CHECK(stats.faces == 2);
    }

    SECTION("larger grid round-trips elevations exactly") {
        const int h = 5, w = 7;
        const float z_scale = 12.5f;
        TerrainTile dem{Tensor<float>::rand_uniform({h, w}, rng), {}};
        TextureTile tex{Tensor<float>::rand_uniform({h, w, 3}, rng)};
        auto stats = export_mesh(dem, tex, z_scale, dir / "grid.obj");
        CHECK(stats.vertices == h * w);
        CHECK(stats.faces == 2 * (h - 1) * (w - 1));

        std::ifstream in(dir / "grid.obj");
        std::string line;
        int vi = 0, fi = 0;
        while (std::getline(in, line)) {
            std::istringstream ss(line);
            std::string tag;
            ss >> tag;
            if (tag == "v") {
                float x, y, z;
                ss >> x >> y >> z;
                int row = vi / w, col = vi % w;
                CHECK(x == float(col));
                CHECK(y == float(row));
                REQUIRE(z == dem.elevation[int64_t(row) * w + col] * z_scale);
                ++vi;
            } else if (tag == "vt") {
                float u, v;
                ss >> u >> v;
                REQUIRE(u >= 0.0f);
                REQUIRE(u <= 1.0f);
                REQUIRE(v >= 0.0f);
                REQUIRE(v <= 1.0f);
            } else if (tag == "f") {
                ++fi;
            }
        }
        CHECK(vi == h * w);
        CHECK(fi == 2 * (h - 1) * (w - 1));
        CHECK(fs::exists(dir / "grid.mtl"));
        CHECK(fs::exists(dir / "grid.png"));
    }

    SECTION("topology depends only on grid size") {
        TerrainTile a{Tensor<float>::rand_uniform({4, 6}, rng), {}};
        TerrainTile b{Tensor<float>::rand_uniform({4, 6}, rng), {}};
        TextureTile tex{Tensor<float>::rand_uniform({4, 6, 3}, rng)};
        auto sa = export_mesh(a, tex, 1.0f, dir / "a.obj");
        auto sb = export_mesh(b, tex, 2.0f, dir / "b.obj");
        CHECK(sa.vertices == sb.vertices);
        CHECK(sa.faces == sb.faces);
    }
}
