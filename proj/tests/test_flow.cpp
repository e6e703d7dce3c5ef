#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>

#include "geodiffussr/flow.hpp"

using namespace gdr;

namespace {

template <typename S>
Conditioning<S> dummy_cond() {
    Conditioning<S> c;
    c.text = Tensor<S>::zeros({1, 1, 4});
    c.text_mask = Tensor<S>::full({1, 1}, S(1));
    return c;
}

}  // namespace

TEST_CASE("interpolate_path endpoints and midpoint") {
    Rng rng(3);
    auto x0 = Tensor<double>::randn({4, 4, 3}, rng);
    auto x1 = Tensor<double>::randn({4, 4, 3}, rng);

    auto at0 = interpolate_path(x0, x1, 0.0);
    auto at1 = interpolate_path(x0, x1, 1.0);
    CHECK(std::memcmp(at0.data(), x0.data(), sizeof(double) * size_t(x0.size())) == 0);
    CHECK(std::memcmp(at1.data(), x1.data(), sizeof(double) * size_t(x1.size())) == 0);

    auto a = Tensor<double>::zeros({2, 2});
    auto b = Tensor<double>::full({2, 2}, 2.0);
    auto mid = interpolate_path(a, b, 0.5);
    for (int64_t i = 0; i < mid.size(); ++i) CHECK(mid[i] == 1.0);
}

TEST_CASE("interpolate_path rejects bad input") {
    auto a = Tensor<double>::zeros({2, 2});
    auto b = Tensor<double>::zeros({2, 3});
    CHECK_THROWS(interpolate_path(a, b, 0.5));
    auto c = Tensor<double>::zeros({2, 2});
    CHECK_THROWS(interpolate_path(a, c, 1.5));
    CHECK_THROWS(interpolate_path(a, c, -0.1));
}

TEST_CASE("interpolate_path is affine in t") {
    Rng rng(4);
    auto x0 = Tensor<double>::randn({8, 8, 3}, rng);
    auto x1 = Tensor<double>::randn({8, 8, 3}, rng);
    auto p0 = interpolate_path(x0, x1, 0.0);
    auto p1 = interpolate_path(x0, x1, 1.0);
    for (double t : {0.1, 0.25, 0.5, 0.77, 0.9}) {
        auto pt = interpolate_path(x0, x1, t);
        for (int64_t i = 0; i < pt.size(); ++i)
            REQUIRE_THAT(pt[i], Catch::Matchers::WithinAbs(p0[i] + t * (p1[i] - p0[i]), 1e-12));
    }
}

TEST_CASE("velocity_target basics and path identity") {
    Rng rng(5);
    auto z = Tensor<double>::zeros({3, 3});
    auto vt = velocity_target(z, z);
    for (int64_t i = 0; i < vt.size(); ++i) CHECK(vt[i] == 0.0);

    auto ones = Tensor<double>::full({3, 3}, 1.0);
    auto threes = Tensor<double>::full({3, 3}, 3.0);
    auto v2 = velocity_target(ones, threes);
    for (int64_t i = 0; i < v2.size(); ++i) CHECK(v2[i] == 2.0);

    auto x0 = Tensor<double>::randn({5, 5, 3}, rng);
    auto x1 = Tensor<double>::randn({5, 5, 3}, rng);
    auto u = velocity_target(x0, x1);
    for (double t : {0.0, 0.3, 0.5, 0.99}) {
        auto xt = interpolate_path(x0, x1, t);
        for (int64_t i = 0; i < xt.size(); ++i)
            REQUIRE_THAT(xt[i] + (1.0 - t) * u[i], Catch::Matchers::WithinAbs(x1[i], 1e-12));
    }
}

TEST_CASE("cfm_loss with a cheating predictor is zero") {
    Rng rng(6);
    Tensor<double> x1 = Tensor<double>::randn({2, 4, 4, 3}, rng);
    auto cond = dummy_cond<double>();
    Rng loss_rng(77);
    Rng clone = loss_rng;  // replays the internal x0 draw
    Tensor<double> x0 = Tensor<double>::randn(x1.shape(), clone);
    Tensor<double> target = velocity_target(x0, x1);

    auto cheat = [&](const Var<double>&, const std::vector<double>&,
                     const Conditioning<double>&) { return Var<double>::constant(target); };
    auto loss = cfm_loss(cheat, x1, cond, loss_rng);
    CHECK(loss.value()[0] == 0.0);
}

TEST_CASE("cfm_loss is zero when data equals noise and model is zero") {
    auto cond = dummy_cond<double>();
    Rng loss_rng(123);
    Rng clone = loss_rng;
    Tensor<double> x0 = Tensor<double>::randn({1, 4, 4, 3}, clone);

    auto zero_model = [&](const Var<double>& x, const std::vector<double>&,
                          const Conditioning<double>&) {
        return Var<double>::constant(Tensor<double>::zeros(x.value().shape()));
    };
    auto loss = cfm_loss(zero_model, x0, cond, loss_rng);
    CHECK(loss.value()[0] == 0.0);
}

TEST_CASE("cfm_loss of the zero model on zero data estimates unit variance") {
    // target = -x0, prediction = 0, so the loss is the mean of x0^2 over
    // >= 1e4 standard normal draws
    auto cond = dummy_cond<double>();
    Rng loss_rng(2024);
    Tensor<double> x1 = Tensor<double>::zeros({4, 32, 32, 3});  // 12288 elements
    auto zero_model = [&](const Var<double>& x, const std::vector<double>&,
                          const Conditioning<double>&) {
        return Var<double>::constant(Tensor<double>::zeros(x.value().shape()));
    };
    auto loss = cfm_loss(zero_model, x1, cond, loss_rng);
    CHECK_THAT(loss.value()[0], Catch::Matchers::WithinAbs(1.0, 0.05));
}

TEST_CASE("cfm_loss rejects non-finite model output") {
    auto cond = dummy_cond<double>();
    Rng loss_rng(9);
    Tensor<double> x1 = Tensor<double>::zeros({1, 2, 2, 3});
    auto bad_model = [&](const Var<double>& x, const std::vector<double>&,
                         const Conditioning<double>&) {
        Tensor<double> v(x.value().shape());
        v[0] = std::numeric_limits<double>::quiet_NaN();
        return Var<double>::constant(v);
    };
    CHECK_THROWS_WITH(cfm_loss(bad_model, x1, cond, loss_rng),
                      Catch::Matchers::ContainsSubstring("non-finite"));
}

TEST_CASE("cfg_combine identities") {
    Rng rng(7);
    auto vu = Tensor<double>::randn({4, 4, 3}, rng);
    auto vc = Tensor<double>::randn({4, 4, 3}, rng);

    auto w0 = cfg_combine(vu, vc, 0.0);
    CHECK(std::memcmp(w0.data(), vu.data(), sizeof(double) * size_t(vu.size())) == 0);
    auto w1 = cfg_combine(vu, vc, 1.0);
    CHECK(std::memcmp(w1.data(), vc.data(), sizeof(double) * size_t(vc.size())) == 0);

    auto zero = Tensor<double>::zeros({2, 2});
    auto one = Tensor<double>::full({2, 2}, 1.0);
    auto w8 = cfg_combine(zero, one, 8.0);
    for (int64_t i = 0; i < w8.size(); ++i) CHECK(w8[i] == 8.0);

    for (double w : {0.5, 2.0, 8.0}) {
        auto out = cfg_combine(vu, vc, w);
        for (int64_t i = 0; i < out.size(); ++i)
            REQUIRE_THAT(out[i],
                         Catch::Matchers::WithinAbs(vu[i] + w * (vc[i] - vu[i]), 1e-12));
    }

    auto bad = Tensor<double>::zeros({3, 3});
    CHECK_THROWS(cfg_combine(vu, bad, 1.0));
}

TEST_CASE("euler sampler integrates a constant field exactly") {
    auto cond = dummy_cond<double>();
    const double c = 0.37;
    auto model = [&](const Tensor<double>& x, double, const Conditioning<double>&) {
        return Tensor<double>::full(x.shape(), c);
    };
    for (int steps : {1, 7, 50, 128}) {
        SamplerConfig cfg{steps, 1.0, 99};
        Tensor<double> x0;
        auto out = euler_sample_raw(model, cond, cond, cfg, {1, 8, 8, 3}, &x0);
        for (int64_t i = 0; i < out.size(); ++i)
            REQUIRE_THAT(out[i], Catch::Matchers::WithinAbs(x0[i] + c, 1e-6));
    }
}

TEST_CASE("euler sampler shows first-order convergence on the linear field") {
    auto cond = dummy_cond<double>();
    auto model = [&](const Tensor<double>& x, double, const Conditioning<double>&) {
        Tensor<double> v = x;
        v.vec() *= -1.0;
        return v;
    };
    // closed form: x(1) = x0 * exp(-1)
    auto global_err = [&](int steps) {
        SamplerConfig cfg{steps, 1.0, 7};
        Tensor<double> x0;
        auto out = euler_sample_raw(model, cond, cond, cfg, {1, 4, 4, 3}, &x0);
        double err = 0;
        for (int64_t i = 0; i < out.size(); ++i)
            err = std::max(err, std::abs(out[i] - x0[i] * std::exp(-1.0)));
        return err;
    };
    double e50 = global_err(50), e100 = global_err(100), e200 = global_err(200);
    CHECK(e50 / e100 > 1.7);
    CHECK(e50 / e100 < 2.3);
    CHECK(e100 / e200 > 1.7);
    CHECK(e100 / e200 < 2.3);
}

TEST_CASE("euler sampler is deterministic and single-branch at w=1") {
    auto cond = dummy_cond<double>();
    Rng wrng(31);
    Tensor<double> wmat = Tensor<double>::randn({3, 3}, wrng);
    auto model = [&](const Tensor<double>& x, double t, const Conditioning<double>&) {
        Tensor<double> v(x.shape());
        int64_t rows = x.size() / 3;
        v.mat(rows, 3).noalias() = x.mat(rows, 3) * wmat.mat(3, 3);
        v.vec().array() += t;
        return v;
    };
    SamplerConfig cfg{20, 1.0, 555};
    auto a = euler_sample_raw(model, cond, cond, cfg, {1, 8, 8, 3});
    auto b = euler_sample_raw(model, cond, cond, cfg, {1, 8, 8, 3});
    CHECK(std::memcmp(a.data(), b.data(), sizeof(double) * size_t(a.size())) == 0);

    // manual single-branch loop must match bitwise at w=1
    Rng noise = substream(cfg.seed, "sample-noise");
    Tensor<double> x = Tensor<double>::randn({1, 8, 8, 3}, noise);
    for (int k = 0; k < cfg.steps; ++k) {
        double t = double(k) / cfg.steps;
        auto v = model(x, t, cond);
        x.vec() += (1.0 / cfg.steps) * v.vec();
    }
    CHECK(std::memcmp(a.data(), x.data(), sizeof(double) * size_t(a.size())) == 0);
}

TEST_CASE("euler sampler reports the offending step on divergence") {
    auto cond = dummy_cond<double>();
    auto model = [&](const Tensor<double>& x, double t, const Conditioning<double>&) {
        Tensor<double> v = Tensor<double>::zeros(x.shape());
        if (t >= 0.5) v[0] = std::numeric_limits<double>::infinity();
        return v;
    };
    SamplerConfig cfg{10, 1.0, 1};
    CHECK_THROWS_WITH(euler_sample_raw(model, cond, cond, cfg, {1, 2, 2, 3}),
                      Catch::Matchers::ContainsSubstring("step 5"));
}

TEST_CASE("sampler config validation") {
    SamplerConfig cfg{0, 8.0, 1};
    CHECK_THROWS(cfg.validate());
    SamplerConfig neg{10, -1.0, 1};
    CHECK_THROWS(neg.validate());
}

TEST_CASE("storage range euler output is clamped to [0,1]") {
    auto cond = dummy_cond<double>();
    auto model = [&](const Tensor<double>& x, double, const Conditioning<double>&) {
        return Tensor<double>::full(x.shape(), 5.0);  // drives far past the data range
    };
    SamplerConfig cfg{4, 1.0, 3};
    auto out = euler_sample(model, cond, cond, cfg, {1, 4, 4, 3});
    for (int64_t i = 0; i < out.size(); ++i) {
        CHECK(out[i] >= 0.0);
        CHECK(out[i] <= 1.0);
    }
}
