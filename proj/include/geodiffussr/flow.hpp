#pragma once

// Conditional flow matching with the linear interpolation path
// x_t = (1-t) x0 + t x1 and its constant velocity target u = x1 - x0.
// Sampling integrates the learned velocity field from t=0 (noise) to t=1
// with fixed-step Euler and classifier-free guidance.

#include <string>
#include <vector>

#include "geodiffussr/autograd.hpp"
#include "geodiffussr/rng.hpp"
#include "geodiffussr/tensor.hpp"
#include "geodiffussr/tile.hpp"
#include "geodiffussr/unet.hpp"

namespace gdr {

struct SamplerConfig {
    int steps = 50;
    double cfg_scale = 8.0;  // guidance weight w
    uint64_t seed = 0;

    void validate() const {
        check(steps >= 1, "SamplerConfig: steps must be >= 1");
        check(cfg_scale >= 0.0, "SamplerConfig: cfg_scale must be >= 0");
    }

    json to_json() const {
        return json{{"steps", steps}, {"cfg_scale", cfg_scale}, {"seed", seed}};
    }
    static SamplerConfig from_json(const json& j) {
        SamplerConfig c;
        c.steps = j.value("steps", c.steps);
        c.cfg_scale = j.value("cfg_scale", c.cfg_scale);
        c.seed = j.value("seed", c.seed);
        c.validate();
        return c;
    }
};

template <typename S>
Tensor<S> interpolate_path(const Tensor<S>& x0, const Tensor<S>& x1, S t) {
    require_same_shape(x0, x1, "interpolate_path");
    check(t >= S(0) && t <= S(1), "interpolate_path: t outside [0,1]");
    Tensor<S> out(x0.shape());
    out.vec() = (S(1) - t) * x0.vec() + t * x1.vec();
    return out;
}

template <typename S>
Tensor<S> velocity_target(const Tensor<S>& x0, const Tensor<S>& x1) {
    require_same_shape(x0, x1, "velocity_target");
    Tensor<S> out(x0.shape());
    out.vec() = x1.vec() - x0.vec();
    return out;
}

template <typename S>
Tensor<S> cfg_combine(const Tensor<S>& v_uncond, const Tensor<S>& v_cond, S w) {
    require_same_shape(v_uncond, v_cond, "cfg_combine");
    if (w == S(0)) return v_uncond;
    if (w == S(1)) return v_cond;
    Tensor<S> out(v_uncond.shape());
    out.vec() = v_uncond.vec() + w * (v_cond.vec() - v_uncond.vec());
    return out;
}

// model: (Var x_t, std::vector<S> t, const Conditioning<S>&) -> Var velocity.
// x1 is a batch (N,H,W,3) already in the internal [-1,1] training range.
// Draw order: all of x0 first (row-major), then one t per sample.
template <typename S, typename ModelFn>
Var<S> cfm_loss(ModelFn&& model, const Tensor<S>& x1, const Conditioning<S>& cond, Rng& rng) {
    check(x1.rank() == 4, "cfm_loss: x1 must be (N,H,W,C)");
    const int n = x1.dim(0);
    Tensor<S> x0 = Tensor<S>::randn(x1.shape(), rng);
    std::vector<S> t(static_cast<size_t>(n));
    for (auto& ti : t) ti = S(rng.uniform());

    Tensor<S> x_t(x1.shape());
    const int64_t per = x1.size() / n;
    for (int i = 0; i < n; ++i) {
        S ti = t[size_t(i)];
        for (int64_t j = 0; j < per; ++j) {
            int64_t idx = int64_t(i) * per + j;
            x_t[idx] = (S(1) - ti) * x0[idx] + ti * x1[idx];
        }
    }
    Tensor<S> target = velocity_target(x0, x1);

    Var<S> v = model(Var<S>::constant(std::move(x_t)), t, cond);
    check(v.value().all_finite(), "cfm_loss: non-finite model output");
    return mse_to(v, std::move(target));
}

// model: (const Tensor<S>& x, S t, const Conditioning<S>&) -> Tensor<S>.
// Integrates in the internal range and returns the raw final state; noise is
// drawn from substream(cfg.seed, "sample-noise").
template <typename S, typename InferFn>
Tensor<S> euler_sample_raw(InferFn&& model, const Conditioning<S>& cond,
                           const Conditioning<S>& uncond, const SamplerConfig& cfg,
                           const Shape& shape, Tensor<S>* x0_out = nullptr) {
    cfg.validate();
    Rng noise_rng = substream(cfg.seed, "sample-noise");
    Tensor<S> x = Tensor<S>::randn(shape, noise_rng);
    if (x0_out) *x0_out = x;
    const S w = S(cfg.cfg_scale);
    const S dt = S(1) / S(cfg.steps);
    for (int k = 0; k < cfg.steps; ++k) {
        S t = S(k) / S(cfg.steps);
        Tensor<S> v;
        if (w == S(1)) {
            v = model(x, t, cond);
        } else {
            Tensor<S> vu = model(x, t, uncond);
            Tensor<S> vc = model(x, t, cond);
            v = cfg_combine(vu, vc, w);
        }
        require_same_shape(v, x, "euler_sample");
        x.vec() += dt * v.vec();
        if (!x.all_finite())
            fail("euler_sample: non-finite state at step " + std::to_string(k));
    }
    return x;
}

// Storage-range entry point: result mapped back to [0,1] and clamped.
template <typename S, typename InferFn>
Tensor<S> euler_sample(InferFn&& model, const Conditioning<S>& cond,
                       const Conditioning<S>& uncond, const SamplerConfig& cfg,
                       const Shape& shape) {
    return to_storage_range(euler_sample_raw(model, cond, uncond, cfg, shape));
}

}  // namespace gdr
