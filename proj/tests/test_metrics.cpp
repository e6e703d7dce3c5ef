#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "geodiffussr/metrics.hpp"

using namespace gdr;

namespace {

// Naive O(n^2) double-centering oracle, independent of the implementation:
// plain vectors, explicit row/column means, no Eigen.
double naive_dcor(const std::vector<std::vector<double>>& X,
                  const std::vector<std::vector<double>>& Y) {
    const size_t n = X.size();
    auto dist_matrix = [n](const std::vector<std::vector<double>>& M) {
        std::vector<std::vector<double>> a(n, std::vector<double>(n, 0.0));
        for (size_t i = 0; i < n; ++i)
            for (size_t j = 0; j < n; ++j) {
                double s = 0;
                for (size_t k = 0; k < M[i].size(); ++k) {
                    double d = M[i][k] - M[j][k];
                    s += d * d;
                }
                a[i][j] = std::sqrt(s);
            }
        return a;
    };
    auto center = [n](std::vector<std::vector<double>> a) {
        std::vector<double> row(n, 0.0), col(n, 0.0);
        double grand = 0;
        for (size_t i = 0; i < n; ++i)
            for (size_t j = 0; j < n; ++j) {
                row[i] += a[i][j];
                col[j] += a[i][j];
                grand += a[i][j];
            }
        for (auto& r : row) r /= double(n);
        for (auto& c : col) c /= double(n);
        grand /= double(n) * double(n);
        for (size_t i = 0; i < n; ++i)
            for (size_t j = 0; j < n; ++j) a[i][j] = a[i][j] - row[i] - col[j] + grand;
        return a;
    };
    auto A = center(dist_matrix(X));
    auto B = center(dist_matrix(Y));
    double num = 0, dvx = 0, dvy = 0;
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < n; ++j) {
            num += A[i][j] * B[i][j];
            dvx += A[i][j] * A[i][j];
            dvy += B[i][j] * B[i][j];
        }
    num /= double(n) * double(n);
    dvx /= double(n) * double(n);
    dvy /= double(n) * double(n);
    return std::sqrt(std::max(0.0, num / std::sqrt(dvx * dvy)));
}

Tensor<double> to_tensor(const std::vector<std::vector<double>>& M) {
    Tensor<double> t({int(M.size()), int(M[0].size())});
    for (size_t i = 0; i < M.size(); ++i)
        for (size_t j = 0; j < M[i].size(); ++j) t[int64_t(i) * int64_t(M[0].size()) + int64_t(j)] = M[i][j];
    return t;
}

std::vector<std::vector<double>> random_samples(int n, int dim, Rng& rng) {
    std::vector<std::vector<double>> out(static_cast<size_t>(n),
                                         std::vector<double>(static_cast<size_t>(dim)));
    for (auto& row : out)
        for (auto& v : row) v = rng.gaussian();
    return out;
}

}  // namespace

TEST_CASE("rgb_to_hsv fixtures") {
    Tensor<float> px({1, 1, 3});
    px[0] = 1.0f; px[1] = 0.0f; px[2] = 0.0f;  // pure red
    auto hsv = rgb_to_hsv(px);
    CHECK_THAT(hsv[0], Catch::Matchers::WithinAbs(0.0, 1e-6));
    CHECK_THAT(hsv[1], Catch::Matchers::WithinAbs(1.0, 1e-6));
    CHECK_THAT(hsv[2], Catch::Matchers::WithinAbs(1.0, 1e-6));

    px[0] = 0.5f; px[1] = 0.5f; px[2] = 0.5f;  // gray
    hsv = rgb_to_hsv(px);
    CHECK_THAT(hsv[0], Catch::Matchers::WithinAbs(0.0, 1e-6));
    CHECK_THAT(hsv[1], Catch::Matchers::WithinAbs(0.0, 1e-6));
    CHECK_THAT(hsv[2], Catch::Matchers::WithinAbs(0.5, 1e-6));
}

TEST_CASE("rgb/hsv round-trip within 1/255") {
    Rng rng(17);
    Tensor<float> img = Tensor<float>::rand_uniform({100, 100, 3}, rng);  // 1e4 pixels
    auto back = hsv_to_rgb(rgb_to_hsv(img));
    for (int64_t i = 0; i < img.size(); ++i)
        REQUIRE_THAT(back[i], Catch::Matchers::WithinAbs(img[i], 1.0 / 255.0));
}

TEST_CASE("distance correlation n=2 hand fixture") {
    // a = b = [[0,1],[1,0]]; double-centering gives A=B=[[-.5,.5],[.5,-.5]],
    // dCov^2 = 0.25, dVar^2 = 0.25 each, so dCor = 1
    Tensor<double> X({2, 1}); X[0] = 0; X[1] = 1;
    Tensor<double> Y({2, 1}); Y[0] = 0; Y[1] = 1;
    CHECK_THAT(distance_correlation(X, Y), Catch::Matchers::WithinAbs(1.0, 1e-12));
}

TEST_CASE("distance correlation is 1 under exact affine dependence") {
    Rng rng(21);
    for (int n : {2, 7, 64}) {
        Tensor<double> X({n, 1}), Y({n, 1});
        for (int i = 0; i < n; ++i) {
            X[i] = rng.gaussian();
            Y[i] = 3.0 * X[i] + 7.0;
        }
        CHECK_THAT(distance_correlation(X, Y), Catch::Matchers::WithinAbs(1.0, 1e-8));
    }
}

TEST_CASE("distance correlation of independent samples stays small") {
    double acc = 0;
    for (uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(seed + 100);
        auto X = to_tensor(random_samples(512, 1, rng));
        auto Y = to_tensor(random_samples(512, 1, rng));
        acc += distance_correlation(X, Y);
    }
    CHECK(acc / 10.0 < 0.2);
}

TEST_CASE("distance correlation matches the naive oracle") {
    Rng rng(55);
    for (int inst = 0; inst < 50; ++inst) {
        int n = 2 + int(rng.below(63));
        int p = 1 + int(rng.below(3));
        int q = 1 + int(rng.below(3));
        auto X = random_samples(n, p, rng);
        auto Y = random_samples(n, q, rng);
        double got = distance_correlation(to_tensor(X), to_tensor(Y));
        double want = naive_dcor(X, Y);
        REQUIRE_THAT(got, Catch::Matchers::WithinAbs(want, 1e-10));
        REQUIRE(got >= 0.0);
        REQUIRE(got <= 1.0 + 1e-12);
    }
}

TEST_CASE("distance correlation invariances") {
    Rng rng(77);
    auto Xv = random_samples(48, 3, rng);
    auto Yv = random_samples(48, 2, rng);
    auto X = to_tensor(Xv);
    auto Y = to_tensor(Yv);
    double base = distance_correlation(X, Y);

    SECTION("symmetry") {
        CHECK_THAT(distance_correlation(Y, X), Catch::Matchers::WithinAbs(base, 1e-12));
    }
    SECTION("translation") {
        auto Xt = X;
        for (int i = 0; i < 48; ++i) {
            Xt[i * 3 + 0] += 11.0;
            Xt[i * 3 + 1] -= 4.0;
            Xt[i * 3 + 2] += 0.5;
        }
        CHECK_THAT(distance_correlation(Xt, Y), Catch::Matchers::WithinAbs(base, 1e-8));
    }
    SECTION("positive scaling") {
        auto Xs = X;
        Xs.vec() *= 3.7;
        auto Ys = Y;
        Ys.vec() *= 0.02;
        CHECK_THAT(distance_correlation(Xs, Ys), Catch::Matchers::WithinAbs(base, 1e-8));
    }
    SECTION("orthogonal rotation") {
        // compose Givens rotations around the three axes
        double a = 0.6, b = -1.1, c = 2.3;
        double R1[3][3] = {{1, 0, 0}, {0, cos(a), -sin(a)}, {0, sin(a), cos(a)}};
        double R2[3][3] = {{cos(b), 0, sin(b)}, {0, 1, 0}, {-sin(b), 0, cos(b)}};
        double R3[3][3] = {{cos(c), -sin(c), 0}, {sin(c), cos(c), 0}, {0, 0, 1}};
        auto matmul3 = [](const double A[3][3], const double B[3][3], double out[3][3]) {
            for (int i = 0; i < 3; ++i)
                for (int j = 0; j < 3; ++j) {
                    out[i][j] = 0;
                    for (int k = 0; k < 3; ++k) out[i][j] += A[i][k] * B[k][j];
                }
        };
        double T[3][3], R[3][3];
        matmul3(R1, R2, T);
        matmul3(T, R3, R);
        Tensor<double> Xr({48, 3});
        for (int i = 0; i < 48; ++i)
            for (int r = 0; r < 3; ++r) {
                double acc = 0;
                for (int k = 0; k < 3; ++k) acc += R[r][k] * X[i * 3 + k];
                Xr[i * 3 + r] = acc;
            }
        CHECK_THAT(distance_correlation(Xr, Y), Catch::Matchers::WithinAbs(base, 1e-8));
    }
}

TEST_CASE("distance correlation rejects degenerate samples") {
    Tensor<double> X({4, 1});
    X.fill(2.0);
    Rng rng(5);
    Tensor<double> Y = Tensor<double>::randn({4, 1}, rng);
    CHECK_THROWS_WITH(distance_correlation(X, Y),
                      Catch::Matchers::ContainsSubstring("degenerate"));
    CHECK_THROWS(distance_correlation(Y, X));
    Tensor<double> single({1, 1});
    CHECK_THROWS(distance_correlation(single, single));
}

TEST_CASE("dcor_image_pair is 1 when value channel equals elevation") {
    Rng rng(31);
    TerrainTile dem{Tensor<float>::rand_uniform({32, 32}, rng), {}};
    TextureTile tex{Tensor<float>({32, 32, 3})};
    // constant hue/saturation channels cancel in the distance computation
    for (int64_t i = 0; i < 32 * 32; ++i) {
        tex.rgb[i * 3 + 0] = dem.elevation[i];  // value == elevation (r=g=b gray)
        tex.rgb[i * 3 + 1] = dem.elevation[i];
        tex.rgb[i * 3 + 2] = dem.elevation[i];
    }
    double d = dcor_image_pair(tex, dem);
    CHECK_THAT(d, Catch::Matchers::WithinAbs(1.0, 1e-8));

    // cross-check against the naive oracle on the same sample set
    auto hsv = rgb_to_hsv(tex);
    std::vector<std::vector<double>> X, Y;
    for (int64_t i = 0; i < 32 * 32; ++i) {
        X.push_back({hsv[i * 3], hsv[i * 3 + 1], hsv[i * 3 + 2]});
        Y.push_back({double(dem.elevation[i])});
    }
    CHECK_THAT(d, Catch::Matchers::WithinAbs(naive_dcor(X, Y), 1e-10));
}

TEST_CASE("dcor_image_pair of independent noise is small and deterministic") {
    Rng rng(41);
    TerrainTile dem{Tensor<float>::rand_uniform({32, 32}, rng), {}};
    TextureTile tex{Tensor<float>::rand_uniform({32, 32, 3}, rng)};
    double a = dcor_image_pair(tex, dem, 1024, 7);
    double b = dcor_image_pair(tex, dem, 1024, 7);
    CHECK(a == b);
    CHECK(a < 0.25);

    TerrainTile flat{Tensor<float>::full({32, 32}, 0.5f), {}};
    CHECK_THROWS(dcor_image_pair(tex, flat));
}

TEST_CASE("dcor_image_pair subsampling is seeded") {
    Rng rng(43);
    TerrainTile dem{Tensor<float>::rand_uniform({64, 64}, rng), {}};
    TextureTile tex{Tensor<float>::rand_uniform({64, 64, 3}, rng)};
    double a = dcor_image_pair(tex, dem, 512, 3);
    double b = dcor_image_pair(tex, dem, 512, 3);
    double c = dcor_image_pair(tex, dem, 512, 4);
    CHECK(a == b);
    CHECK(a != c);  // different subsample
}

TEST_CASE("delta_dcor reproduces the definition exactly") {
    Rng rng(51);
    MetricsConfig cfg;

    std::vector<std::pair<TextureTile, TerrainTile>> pairs;
    for (int k = 0; k < 4; ++k) {
        TerrainTile dem{Tensor<float>::rand_uniform({32, 32}, rng), {}};
        TextureTile tex{Tensor<float>::rand_uniform({32, 32, 3}, rng)};
        pairs.push_back({tex, dem});
    }
    double mean = 0;
    for (auto& [tex, dem] : pairs)
        mean += dcor_image_pair(tex, dem, cfg.dcor_subsample_cap, cfg.subsample_seed);
    mean /= double(pairs.size());

    double got = delta_dcor(pairs, cfg);
    CHECK_THAT(got, Catch::Matchers::WithinAbs(std::abs(mean - 0.3816), 1e-12));

    // a pair set whose mean dCor equals dcor_gt has a vanishing gap
    MetricsConfig tuned = cfg;
    tuned.dcor_gt = mean;
    CHECK_THAT(delta_dcor(pairs, tuned), Catch::Matchers::WithinAbs(0.0, 1e-12));

    // the Table-1 non-MCA realization of the gap
    CHECK_THAT(std::abs(0.4572 - 0.3816), Catch::Matchers::WithinAbs(0.0756, 1e-12));
}

TEST_CASE("delta_dcor skips degenerate pairs and fails when all are") {
    Rng rng(61);
    MetricsConfig cfg;
    TerrainTile flat{Tensor<float>::full({32, 32}, 0.5f), {}};
    TerrainTile good{Tensor<float>::rand_uniform({32, 32}, rng), {}};
    TextureTile tex{Tensor<float>::rand_uniform({32, 32, 3}, rng)};

    std::vector<std::pair<TextureTile, TerrainTile>> mixed = {{tex, flat}, {tex, good}};
    double expect = std::abs(dcor_image_pair(tex, good) - cfg.dcor_gt);
    CHECK_THAT(delta_dcor(mixed, cfg), Catch::Matchers::WithinAbs(expect, 1e-12));

    std::vector<std::pair<TextureTile, TerrainTile>> all_bad = {{tex, flat}};
    CHECK_THROWS(delta_dcor(all_bad, cfg));
    std::vector<std::pair<TextureTile, TerrainTile>> empty;
    CHECK_THROWS(delta_dcor(empty, cfg));
}

TEST_CASE("mse basics and oracle") {
    TextureTile a{Tensor<float>::zeros({8, 8, 3})};
    TextureTile b{Tensor<float>::full({8, 8, 3}, 0.1f)};
    CHECK(mse(a, a) == 0.0);
    CHECK_THAT(mse(a, b), Catch::Matchers::WithinAbs(0.01, 1e-9));

    Rng rng(71);
    Tensor<float> x = Tensor<float>::rand_uniform({16, 16, 3}, rng);
    Tensor<float> y = Tensor<float>::rand_uniform({16, 16, 3}, rng);
    double naive = 0;
    for (int64_t i = 0; i < x.size(); ++i) {
        double d = double(x[i]) - double(y[i]);
        naive += d * d;
    }
    naive /= double(x.size());
    CHECK_THAT(mse(x, y), Catch::Matchers::WithinAbs(naive, 1e-12));

    Tensor<float> wrong({8, 8, 3});
    CHECK_THROWS(mse(x, wrong));
}

TEST_CASE("frechet distance identities") {
    Rng rng(81);
    Tensor<double> f = Tensor<double>::randn({256, 4}, rng);
    CHECK_THAT(frechet_distance(f, f), Catch::Matchers::WithinAbs(0.0, 1e-6));

    Tensor<double> g = Tensor<double>::randn({200, 4}, rng);
    double ab = frechet_distance(f, g);
    double ba = frechet_distance(g, f);
    CHECK(ab >= 0.0);
    CHECK_THAT(ab, Catch::Matchers::WithinAbs(ba, 1e-8));

    Tensor<double> bad = f;
    bad[3] = std::numeric_limits<double>::infinity();
    CHECK_THROWS(frechet_distance(bad, g));
}

TEST_CASE("frechet distance between shifted gaussians approximates the mean gap") {
    const int n = 10000, d = 4;
    Rng rng(91);
    Tensor<double> a = Tensor<double>::randn({n, d}, rng);
    Tensor<double> b = Tensor<double>::randn({n, d}, rng);
    std::vector<double> mu = {0.8, -0.3, 0.5, 1.1};
    double mu_sq = 0;
    for (int i = 0; i < n; ++i)
        for (int k = 0; k < d; ++k) b[int64_t(i) * d + k] += mu[size_t(k)];
    for (double m : mu) mu_sq += m * m;

    double fd = frechet_distance(a, b);
    CHECK_THAT(fd, Catch::Matchers::WithinAbs(mu_sq, 0.05 * mu_sq));
}

TEST_CASE("desk feature extractor is deterministic and separates sets") {
    DeskFeatureExtractor desk;
    Rng rng(101);
    std::vector<TextureTile> real, fake;
    for (int i = 0; i < 16; ++i) {
        real.push_back({Tensor<float>::rand_uniform({32, 32, 3}, rng, 0.4f, 0.9f)});
        fake.push_back({Tensor<float>::rand_uniform({32, 32, 3}, rng, 0.0f, 0.3f)});
    }
    CHECK(fid_between(real, real, desk) < 1e-6);
    double gap = fid_between(real, fake, desk);
    CHECK(gap > 0.0);
    double again = fid_between(real, fake, desk);
    CHECK(gap == again);
}

TEST_CASE("metrics report serializes with the labeled fid") {
    MetricsConfig cfg;
    MetricsReport rep;
    rep.mse = 0.01;
    rep.dcor = 0.38;
    rep.delta_dcor = 0.0016;
    rep.fid = 10.29;
    rep.n_tiles = 64;
    auto j = rep.to_json(cfg);
    CHECK(j.contains("fid(desk)"));
    CHECK_FALSE(j.contains("lpips"));
    CHECK(j["n_tiles"] == 64);
    CHECK(j["config"]["dcor_gt"] == 0.3816);
}

TEST_CASE("metrics config validation") {
    MetricsConfig cfg;
    cfg.dcor_gt = 1.5;
    CHECK_THROWS(cfg.validate());
}
