#pragma once

// Evaluation suite: per-pixel MSE, distance correlation between texture HSV
// and DEM elevation (with the dataset ground-truth gap delta-dCor), and
// Fréchet distance over pluggable feature embeddings. The default "desk"
// feature extractor is the frozen tiny-seeded encoder trunk applied to RGB,
// giving a hermetic FID-like score reported as fid(desk); it is not
// comparable to FID values computed with pretrained Inception features.

#include <Eigen/Dense>
#include <json.hpp>

#include <cmath>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "geodiffussr/dem_encoder.hpp"
#include "geodiffussr/rng.hpp"
#include "geodiffussr/tensor.hpp"
#include "geodiffussr/tile.hpp"

namespace gdr {

struct MetricsConfig {
    double dcor_gt = 0.3816;
    std::string feature_extractor = "desk";  // FID feature plug-in id, or "none"
    std::string perceptual_model = "none";   // LPIPS-style plug-in id, or "none"
    int dcor_subsample_cap = 1024;
    uint64_t subsample_seed = 0;

    void validate() const {
        check(dcor_gt > 0.0 && dcor_gt < 1.0, "MetricsConfig: dcor_gt must be in (0,1)");
        check(dcor_subsample_cap >= 2, "MetricsConfig: subsample cap must be >= 2");
    }

    json to_json() const {
        return json{{"dcor_gt", dcor_gt},
                    {"feature_extractor", feature_extractor},
                    {"perceptual_model", perceptual_model},
                    {"dcor_subsample_cap", dcor_subsample_cap},
                    {"subsample_seed", subsample_seed}};
    }
    static MetricsConfig from_json(const json& j) {
        MetricsConfig c;
        c.dcor_gt = j.value("dcor_gt", c.dcor_gt);
        c.feature_extractor = j.value("feature_extractor", c.feature_extractor);
        c.perceptual_model = j.value("perceptual_model", c.perceptual_model);
        c.dcor_subsample_cap = j.value("dcor_subsample_cap", c.dcor_subsample_cap);
        c.subsample_seed = j.value("subsample_seed", c.subsample_seed);
        c.validate();
        return c;
    }
};

struct MetricsReport {
    double mse = 0.0;
    double dcor = 0.0;
    double delta_dcor = 0.0;
    std::optional<double> fid;
    std::optional<double> lpips;
    int n_tiles = 0;

    json to_json(const MetricsConfig& cfg) const {
        json j;
        j["mse"] = mse;
        j["dcor"] = dcor;
        j["delta_dcor"] = delta_dcor;
        if (fid) j["fid(" + cfg.feature_extractor + ")"] = *fid;
        if (lpips) j["lpips"] = *lpips;
        j["n_tiles"] = n_tiles;
        j["config"] = cfg.to_json();
        return j;
    }
};

// ---------------------------------------------------------------------------
// color space
// ---------------------------------------------------------------------------

// RGB -> HSV with all three channels scaled to [0,1]. Out-of-range inputs are
// clamped with a warning.
inline Tensor<float> rgb_to_hsv(const Tensor<float>& rgb) {
    check(rgb.rank() == 3 && rgb.dim(2) == 3, "rgb_to_hsv: expects (H,W,3)");
    Tensor<float> out(rgb.shape());
    bool warned = false;
    for (int64_t i = 0; i < rgb.size(); i += 3) {
        float r = rgb[i], g = rgb[i + 1], b = rgb[i + 2];
        if ((r < 0 || r > 1 || g < 0 || g > 1 || b < 0 || b > 1) && !warned) {
            std::cerr << "[geodiffussr] warning: rgb_to_hsv clamping out-of-range input\n";
            warned = true;
        }
        r = std::clamp(r, 0.0f, 1.0f);
        g = std::clamp(g, 0.0f, 1.0f);
        b = std::clamp(b, 0.0f, 1.0f);
        float maxc = std::max({r, g, b});
        float minc = std::min({r, g, b});
        float d = maxc - minc;
        float h = 0.0f;
        if (d > 0) {
            if (maxc == r)
                h = std::fmod((g - b) / d, 6.0f);
            else if (maxc == g)
                h = (b - r) / d + 2.0f;
            else
                h = (r - g) / d + 4.0f;
            h /= 6.0f;
            if (h < 0) h += 1.0f;
        }
        float s = maxc > 0 ? d / maxc : 0.0f;
        out[i] = h;
        out[i + 1] = s;
        out[i + 2] = maxc;
    }
    return out;
}

inline Tensor<float> hsv_to_rgb(const Tensor<float>& hsv) {
    check(hsv.rank() == 3 && hsv.dim(2) == 3, "hsv_to_rgb: expects (H,W,3)");
    Tensor<float> out(hsv.shape());
    for (int64_t i = 0; i < hsv.size(); i += 3) {
        float h = std::clamp(hsv[i], 0.0f, 1.0f) * 6.0f;
        float s = std::clamp(hsv[i + 1], 0.0f, 1.0f);
        float v = std::clamp(hsv[i + 2], 0.0f, 1.0f);
        int sector = std::min(5, int(h));
        float f = h - float(sector);
        float p = v * (1 - s);
        float q = v * (1 - s * f);
        float t = v * (1 - s * (1 - f));
        float r, g, b;
        switch (sector) {
            case 0: r = v; g = t; b = p; break;
            case 1: r = q; g = v; b = p; break;
            case 2: r = p; g = v; b = t; break;
            case 3: r = p; g = q; b = v; break;
            case 4: r = t; g = p; b = v; break;
            default: r = v; g = p; b = q; break;
        }
        out[i] = r;
        out[i + 1] = g;
        out[i + 2] = b;
    }
    return out;
}

inline Tensor<float> rgb_to_hsv(const TextureTile& tile) { return rgb_to_hsv(tile.rgb); }

// ---------------------------------------------------------------------------
// distance correlation
// ---------------------------------------------------------------------------

// Székely V-statistic: pairwise Euclidean distance matrices, double-centered;
// dCor^2 = mean(A.B) / sqrt(mean(A.A) * mean(B.B)). X: (n,p), Y: (n,q).
inline double distance_correlation(const Tensor<double>& X, const Tensor<double>& Y) {
    check(X.rank() == 2 && Y.rank() == 2, "distance_correlation: expects (n,p) samples");
    const int n = X.dim(0);
    check(Y.dim(0) == n, "distance_correlation: sample count mismatch");
    check(n >= 2, "distance_correlation: need n >= 2");
    const int p = X.dim(1), q = Y.dim(1);

    auto centered = [n](const Tensor<double>& M, int dim) {
        Eigen::MatrixXd a(n, n);
        for (int i = 0; i < n; ++i) {
            a(i, i) = 0.0;
            for (int j = i + 1; j < n; ++j) {
                double s = 0;
                for (int k = 0; k < dim; ++k) {
                    double d = M[int64_t(i) * dim + k] - M[int64_t(j) * dim + k];
                    s += d * d;
                }
                double dist = std::sqrt(s);
                a(i, j) = dist;
                a(j, i) = dist;
            }
        }
        Eigen::VectorXd row_mean = a.rowwise().mean();
        double grand = row_mean.mean();
        a.colwise() -= row_mean;
        a.rowwise() -= row_mean.transpose();
        a.array() += grand;
        return a;
    };

    Eigen::MatrixXd A = centered(X, p);
    Eigen::MatrixXd B = centered(Y, q);
    double num = (A.array() * B.array()).mean();
    double dvar_x = (A.array() * A.array()).mean();
    double dvar_y = (B.array() * B.array()).mean();
    check(dvar_x > 1e-24 && dvar_y > 1e-24, "distance_correlation: degenerate sample");
    double r2 = num / std::sqrt(dvar_x * dvar_y);
    return std::sqrt(std::max(0.0, r2));
}

// Per-tile geometry/appearance coupling: X_i = HSV pixel (3-vector),
// Y_i = elevation scalar, over all pixels (seeded subsample above the cap).
inline double dcor_image_pair(const TextureTile& texture, const TerrainTile& dem,
                              int subsample_cap = 1024, uint64_t seed = 0) {
    check(texture.height() == dem.height() && texture.width() == dem.width(),
          "dcor_image_pair: texture and DEM sizes differ");
    const int64_t total = int64_t(dem.height()) * dem.width();
    std::vector<int64_t> idx(static_cast<size_t>(total));
    for (int64_t i = 0; i < total; ++i) idx[size_t(i)] = i;
    int64_t n = total;
    if (total > subsample_cap) {
        Rng rng = substream(seed, "dcor-subsample");
        shuffle(idx, rng);
        n = subsample_cap;
    }
    Tensor<float> hsv = rgb_to_hsv(texture);
    Tensor<double> X({int(n), 3});
    Tensor<double> Y({int(n), 1});
    for (int64_t i = 0; i < n; ++i) {
        int64_t s = idx[size_t(i)];
        for (int c = 0; c < 3; ++c) X[i * 3 + c] = double(hsv[s * 3 + c]);
        Y[i] = double(dem.elevation[s]);
    }
    return distance_correlation(X, Y);
}

// Mean per-pair dCor, then the absolute gap to the dataset ground truth.
// Degenerate pairs are skipped with a warning; all-degenerate is an error.
inline double delta_dcor(const std::vector<std::pair<TextureTile, TerrainTile>>& pairs,
                         const MetricsConfig& cfg, double* mean_dcor_out = nullptr) {
    check(!pairs.empty(), "delta_dcor: empty pair list");
    double sum = 0;
    int used = 0;
    for (size_t i = 0; i < pairs.size(); ++i) {
        try {
            sum += dcor_image_pair(pairs[i].first, pairs[i].second, cfg.dcor_subsample_cap,
                                   cfg.subsample_seed);
            ++used;
        } catch (const std::exception& e) {
            std::cerr << "[geodiffussr] warning: skipping degenerate pair " << i << ": "
                      << e.what() << "\n";
        }
    }
    check(used > 0, "delta_dcor: every pair was degenerate");
    double mean = sum / used;
    if (mean_dcor_out) *mean_dcor_out = mean;
    return std::abs(mean - cfg.dcor_gt);
}

// ---------------------------------------------------------------------------
// MSE
// ---------------------------------------------------------------------------

inline double mse(const Tensor<float>& a, const Tensor<float>& b) {
    require_same_shape(a, b, "mse");
    double acc = 0;
    for (int64_t i = 0; i < a.size(); ++i) {
        double d = double(a[i]) - double(b[i]);
        acc += d * d;
    }
    return acc / double(a.size());
}

inline double mse(const TextureTile& a, const TextureTile& b) { return mse(a.rgb, b.rgb); }

// ---------------------------------------------------------------------------
// Fréchet distance over feature embeddings
// ---------------------------------------------------------------------------

// ||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^{1/2}); the matrix square root
// comes from the symmetric eigendecomposition of Sa^{1/2} Sb Sa^{1/2}.
inline double frechet_distance(const Tensor<double>& feats_a, const Tensor<double>& feats_b) {
    check(feats_a.rank() == 2 && feats_b.rank() == 2, "frechet_distance: expects (n,d)");
    const int d = feats_a.dim(1);
    check(feats_b.dim(1) == d, "frechet_distance: feature dims differ");
    const int n = feats_a.dim(0), m = feats_b.dim(0);
    check(n >= 2 && m >= 2, "frechet_distance: need at least 2 samples per set");
    check(feats_a.all_finite() && feats_b.all_finite(), "frechet_distance: non-finite features");

    auto stats = [](const Tensor<double>& f) {
        const int n = f.dim(0), d = f.dim(1);
        Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>
            M(f.data(), n, d);
        Eigen::VectorXd mu = M.colwise().mean();
        Eigen::MatrixXd centered = M.rowwise() - mu.transpose();
        Eigen::MatrixXd cov = centered.transpose() * centered / double(n - 1);
        return std::make_pair(mu, cov);
    };
    auto [mu_a, cov_a] = stats(feats_a);
    auto [mu_b, cov_b] = stats(feats_b);

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es_a(cov_a);
    Eigen::VectorXd eva = es_a.eigenvalues().cwiseMax(0.0);
    Eigen::MatrixXd sqrt_a =
        es_a.eigenvectors() * eva.cwiseSqrt().asDiagonal() * es_a.eigenvectors().transpose();

    Eigen::MatrixXd inner = sqrt_a * cov_b * sqrt_a;
    inner = 0.5 * (inner + inner.transpose());  // symmetrize numerical noise
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es_m(inner);
    double trace_sqrt = 0;
    for (int i = 0; i < d; ++i) {
        double ev = es_m.eigenvalues()[i];
        check(ev > -1e-8, "frechet_distance: covariance square root failed (eigenvalue " +
                              std::to_string(ev) + ")");
        trace_sqrt += std::sqrt(std::max(0.0, ev));
    }
    double mean_term = (mu_a - mu_b).squaredNorm();
    return mean_term + cov_a.trace() + cov_b.trace() - 2.0 * trace_sqrt;
}

// ---------------------------------------------------------------------------
// feature / perceptual plug-ins
// ---------------------------------------------------------------------------

template <typename S = float>
class FeatureExtractor {
public:
    virtual ~FeatureExtractor() = default;
    virtual Tensor<double> features(const std::vector<TextureTile>& tiles) const = 0;
    virtual std::string id() const = 0;
};

// Frozen tiny-seeded encoder trunk on RGB; features are the global average
// pool of the deepest tap (64-d).
class DeskFeatureExtractor : public FeatureExtractor<float> {
public:
    explicit DeskFeatureExtractor(int input_size = 32)
        : encoder_(DemEncoder<float>::tiny_seeded(input_size)) {}

    Tensor<double> features(const std::vector<TextureTile>& tiles) const override {
        check(!tiles.empty(), "desk features: empty tile list");
        const int d = encoder_.tap_channels()[2];
        Tensor<double> out({int(tiles.size()), d});
        for (size_t i = 0; i < tiles.size(); ++i) {
            auto pyr = encode_rgb(tiles[i]);
            const auto& f8 = pyr.f8;
            const int64_t hw = int64_t(f8.dim(0)) * f8.dim(1);
            for (int c = 0; c < d; ++c) {
                double acc = 0;
                for (int64_t j = 0; j < hw; ++j) acc += double(f8[j * d + c]);
                out[int64_t(i) * d + c] = acc / double(hw);
            }
        }
        return out;
    }

    std::string id() const override { return "desk"; }

private:
    FeaturePyramid<float> encode_rgb(const TextureTile& tile) const {
        return encoder_.encode_channels(tile.rgb);
    }

    DemEncoder<float> encoder_;
};

class PerceptualModel {
public:
    virtual ~PerceptualModel() = default;
    virtual double distance(const TextureTile& a, const TextureTile& b) const = 0;
    virtual std::string id() const = 0;
};

inline std::unique_ptr<FeatureExtractor<float>> make_feature_extractor(const std::string& id) {
    if (id == "desk") return std::make_unique<DeskFeatureExtractor>();
    if (id == "none") return nullptr;
    fail("unknown feature extractor: " + id + " (expected 'desk' or 'none')");
}

inline double fid_between(const std::vector<TextureTile>& real,
                          const std::vector<TextureTile>& generated,
                          const FeatureExtractor<float>& extractor) {
    return frechet_distance(extractor.features(real), extractor.features(generated));
}

}  // namespace gdr
