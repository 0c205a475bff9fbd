#include <catch_amalgamated.hpp>

#include <cmath>
#include <numbers>

#include "mergeq/optim.hpp"

using namespace mergeq;
using Catch::Approx;

TEST_CASE("adam with zero gradient leaves parameters untouched") {
    ParamSet p{Tensor::vector({1.0, -2.0, 3.0})};
    const ParamSet g{Tensor::vector({0.0, 0.0, 0.0})};
    auto st = OptimState::for_params(p);
    for (int i = 0; i < 50; ++i) adam_step(p, g, st, 1e-2);
    CHECK(p[0] == Tensor::vector({1.0, -2.0, 3.0}));
    CHECK(st.step == 50);
}

TEST_CASE("first adam step moves by lr against the gradient sign") {
    ParamSet p{Tensor::vector({0.0, 0.0, 0.0})};
    const ParamSet g{Tensor::vector({0.5, -3.0, 1e-3})};
    auto st = OptimState::for_params(p);
    const double lr = 1e-3;
    adam_step(p, g, st, lr);
    // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
    for (std::size_t i = 0; i < 3; ++i) {
        const double gi = g[0][i];
        CHECK(p[0][i] == Approx(-lr * gi / (std::abs(gi) + 1e-8)).epsilon(1e-12));
    }
}

TEST_CASE("adam is bit-identical from identical state") {
    ParamSet p1{Tensor::vector({0.1, 0.2})}, p2 = p1;
    const ParamSet g{Tensor::vector({0.3, -0.4})};
    auto s1 = OptimState::for_params(p1), s2 = OptimState::for_params(p2);
    for (int i = 0; i < 5; ++i) {
        adam_step(p1, g, s1, 1e-2);
        adam_step(p2, g, s2, 1e-2);
    }
    CHECK(p1[0] == p2[0]);
}

TEST_CASE("adam rejects shape mismatches") {
    ParamSet p{Tensor::vector({0.0, 0.0})};
    auto st = OptimState::for_params(p);
    CHECK_THROWS_AS(adam_step(p, ParamSet{Tensor::vector({1.0})}, st, 1e-3), DimensionError);
}

TEST_CASE("warmup-cosine schedule") {
    const double lr0 = 1e-3;
    CHECK(lr_schedule(100, 1000, 100, lr0) == Approx(lr0));
    CHECK(lr_schedule(50, 1000, 100, lr0) == Approx(lr0 / 2));
    CHECK(lr_schedule(0, 1000, 0, lr0) == Approx(lr0));
    const int total = 20000;
    const double expected = lr0 * (1.0 - std::cos(std::numbers::pi / total)) / 2.0;
    CHECK(lr_schedule(total - 1, total, 0, lr0) == Approx(expected).epsilon(1e-9));
    CHECK(lr_schedule(total - 1, total, 0, lr0) < 1e-10);
    CHECK_THROWS_AS(lr_schedule(1000, 1000, 100, lr0), RangeError);
    CHECK_THROWS_AS(lr_schedule(-1, 1000, 100, lr0), RangeError);
}

TEST_CASE("schedule is non-increasing after warmup") {
    double prev = lr_schedule(10, 500, 10, 1.0);
    for (int t = 11; t < 500; ++t) {
        const double cur = lr_schedule(t, 500, 10, 1.0);
        CHECK(cur <= prev);
        prev = cur;
    }
}
