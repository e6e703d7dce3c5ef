#include <catch2/catch_amalgamated.hpp>

#include "geodiffussr/autograd.hpp"
#include "gradcheck.hpp"

using namespace gdr;
using gdrtest::check_gradients;

namespace {

Var<double> leaf_randn(Shape shape, Rng& rng) {
    return Var<double>::leaf(Tensor<double>::randn(std::move(shape), rng), true);
}

}  // namespace

TEST_CASE("elementwise ops match finite differences") {
    Rng rng(11);
    auto a = leaf_randn({2, 3, 4}, rng);
    auto b = leaf_randn({2, 3, 4}, rng);
    Tensor<double> target = Tensor<double>::randn({2, 3, 4}, rng);
    auto build = [&]() {
        auto y = mul(add(a, b), sub(a, scale(b, 0.7)));
        y = silu(y);
        return mse_to(y, target);
    };
    auto res = check_gradients(build, {a, b}, 12, rng);
    CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("activations match finite differences") {
    Rng rng(12);
    auto a = leaf_randn({40}, rng);
    Tensor<double> target = Tensor<double>::randn({40}, rng);
    for (int which = 0; which < 3; ++which) {
        auto build = [&]() {
            auto y = which == 0 ? relu(a) : which == 1 ? sigmoid(a) : silu(a);
            return mse_to(y, target);
        };
        auto res = check_gradients(build, {a}, 15, rng);
        CHECK(res.max_rel_err < 1e-5);
    }
}

TEST_CASE("affine matches finite differences") {
    Rng rng(13);
    auto x = leaf_randn({5, 7}, rng);
    auto w = leaf_randn({7, 4}, rng);
    auto b = leaf_randn({4}, rng);
    Tensor<double> target = Tensor<double>::randn({5, 4}, rng);
    auto build = [&]() { return mse_to(affine(x, w, b), target); };
    auto res = check_gradients(build, {x, w, b}, 15, rng);
    CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("bmm matches finite differences") {
    Rng rng(14);
    auto a = leaf_randn({3, 4, 5}, rng);
    Tensor<double> target = Tensor<double>::randn({3, 4, 6}, rng);
    SECTION("plain") {
        auto b = leaf_randn({3, 5, 6}, rng);
        auto build = [&]() { return mse_to(bmm(a, b), target); };
        auto res = check_gradients(build, {a, b}, 15, rng);
        CHECK(res.max_rel_err < 1e-6);
    }
    SECTION("transposed rhs") {
        auto b = leaf_randn({3, 6, 5}, rng);
        auto build = [&]() { return mse_to(bmm(a, b, true), target); };
        auto res = check_gradients(build, {a, b}, 15, rng);
        CHECK(res.max_rel_err < 1e-6);
    }
}

TEST_CASE("conv2d values match a direct convolution oracle") {
    Rng rng(15);
    const int N = 2, H = 5, W = 6, CIN = 3, COUT = 4, K = 3;
    Tensor<double> x = Tensor<double>::randn({N, H, W, CIN}, rng);
    Tensor<double> w = Tensor<double>::randn({K, K, CIN, COUT}, rng);
    Tensor<double> b = Tensor<double>::randn({COUT}, rng);

    for (int stride : {1, 2}) {
        auto y = conv2d(Var<double>::constant(x), Var<double>::constant(w),
                        Var<double>::constant(b), stride)
                     .value();
        int pad = K / 2;
        int oh = (H + 2 * pad - K) / stride + 1;
        int ow = (W + 2 * pad - K) / stride + 1;
        REQUIRE(y.shape() == Shape({N, oh, ow, COUT}));
        for (int n = 0; n < N; ++n)
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox)
                    for (int co = 0; co < COUT; ++co) {
                        double acc = b[co];
                        for (int ky = 0; ky < K; ++ky)
                            for (int kx = 0; kx < K; ++kx)
                                for (int ci = 0; ci < CIN; ++ci) {
                                    int iy = oy * stride - pad + ky;
                                    int ix = ox * stride - pad + kx;
                                    if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                                    acc += x[((int64_t(n) * H + iy) * W + ix) * CIN + ci] *
                                           w[((int64_t(ky) * K + kx) * CIN + ci) * COUT + co];
                                }
                        double got = y[((int64_t(n) * oh + oy) * ow + ox) * COUT + co];
                        REQUIRE_THAT(got, Catch::Matchers::WithinAbs(acc, 1e-10));
                    }
    }
}

TEST_CASE("conv2d matches finite differences") {
    Rng rng(16);
    auto x = leaf_randn({2, 6, 6, 3}, rng);
    auto w = leaf_randn({3, 3, 3, 4}, rng);
    auto b = leaf_randn({4}, rng);
    for (int stride : {1, 2}) {
        int osz = stride == 1 ? 6 : 3;
        Tensor<double> target = Tensor<double>::randn({2, osz, osz, 4}, rng);
        auto build = [&]() { return mse_to(conv2d(x, w, b, stride), target); };
        auto res = check_gradients(build, {x, w, b}, 20, rng);
        INFO(res.worst);
        CHECK(res.max_rel_err < 1e-5);
    }
}

TEST_CASE("group_norm matches finite differences") {
    Rng rng(17);
    auto x = leaf_randn({2, 3, 3, 8}, rng);
    auto gamma = Var<double>::leaf(Tensor<double>::rand_uniform({8}, rng, 0.5, 1.5), true);
    auto beta = leaf_randn({8}, rng);
    Tensor<double> target = Tensor<double>::randn({2, 3, 3, 8}, rng);
    for (int groups : {1, 2, 4}) {
        auto build = [&]() { return mse_to(group_norm(x, gamma, beta, groups), target); };
        auto res = check_gradients(build, {x, gamma, beta}, 20, rng);
        INFO("groups=" << groups << " " << res.worst);
        CHECK(res.max_rel_err < 1e-4);
    }
}

TEST_CASE("softmax rows sum to one and gradients check out") {
    Rng rng(18);
    auto x = leaf_randn({4, 6, 5}, rng);
    auto y = softmax_lastdim(x);
    auto m = y.value().mat(24, 5);
    for (int r = 0; r < 24; ++r) REQUIRE_THAT(m.row(r).sum(), Catch::Matchers::WithinAbs(1.0, 1e-12));

    Tensor<double> target = Tensor<double>::randn({4, 6, 5}, rng);
    auto build = [&]() { return mse_to(softmax_lastdim(x), target); };
    auto res = check_gradients(build, {x}, 20, rng);
    CHECK(res.max_rel_err < 1e-5);
}

TEST_CASE("shape ops match finite differences") {
    Rng rng(19);
    auto a = leaf_randn({2, 3, 4}, rng);
    auto b = leaf_randn({2, 3, 2}, rng);
    Tensor<double> target = Tensor<double>::randn({2, 3, 3}, rng);
    auto build = [&]() {
        auto cat = concat_lastdim(a, b);          // (2,3,6)
        auto sl = slice_lastdim(cat, 1, 3);       // (2,3,3)
        return mse_to(reshape(sl, {2, 3, 3}), target);
    };
    auto res = check_gradients(build, {a, b}, 15, rng);
    CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("spatial broadcast ops match finite differences") {
    Rng rng(20);
    auto x = leaf_randn({2, 4, 4, 3}, rng);
    auto s = leaf_randn({2, 3}, rng);
    SECTION("upsample_nearest2x") {
        Tensor<double> target = Tensor<double>::randn({2, 8, 8, 3}, rng);
        auto build = [&]() { return mse_to(upsample_nearest2x(x), target); };
        auto res = check_gradients(build, {x}, 20, rng);
        CHECK(res.max_rel_err < 1e-6);
    }
    SECTION("global_avg_pool") {
        Tensor<double> target = Tensor<double>::randn({2, 3}, rng);
        auto build = [&]() { return mse_to(global_avg_pool(x), target); };
        auto res = check_gradients(build, {x}, 20, rng);
        CHECK(res.max_rel_err < 1e-6);
    }
    SECTION("mul_channels") {
        Tensor<double> target = Tensor<double>::randn({2, 4, 4, 3}, rng);
        auto build = [&]() { return mse_to(mul_channels(x, s), target); };
        auto res = check_gradients(build, {x, s}, 20, rng);
        CHECK(res.max_rel_err < 1e-6);
    }
    SECTION("add_channels") {
        Tensor<double> target = Tensor<double>::randn({2, 4, 4, 3}, rng);
        auto build = [&]() { return mse_to(add_channels(x, s), target); };
        auto res = check_gradients(build, {x, s}, 20, rng);
        CHECK(res.max_rel_err < 1e-6);
    }
}

TEST_CASE("upsample_nearest2x repeats pixels") {
    Tensor<double> x({1, 2, 2, 1}, {1.0, 2.0, 3.0, 4.0});
    auto y = upsample_nearest2x(Var<double>::constant(x)).value();
    REQUIRE(y.shape() == Shape({1, 4, 4, 1}));
    CHECK(y[0] == 1.0);
    CHECK(y[1] == 1.0);
    CHECK(y[2] == 2.0);
    CHECK(y[5] == 1.0);
    CHECK(y[15] == 4.0);
}

TEST_CASE("gradients accumulate across shared subexpressions") {
    Rng rng(21);
    auto a = leaf_randn({6}, rng);
    // y = a*a: dy/da = 2a through double accumulation
    auto loss = mean_all(mul(a, a));
    loss.backward();
    for (int i = 0; i < 6; ++i)
        REQUIRE_THAT(a.grad()[i], Catch::Matchers::WithinAbs(2.0 * a.value()[i] / 6.0, 1e-12));
}

TEST_CASE("constant inputs receive no gradient") {
    Rng rng(22);
    auto a = leaf_randn({4}, rng);
    auto c = Var<double>::constant(Tensor<double>::randn({4}, rng));
    auto loss = mean_all(mul(a, c));
    loss.backward();
    CHECK(a.has_grad());
    CHECK_FALSE(c.has_grad());
}
