#include <catch_amalgamated.hpp>

#include <cmath>
#include <sstream>

#include "mergeq/analysis.hpp"
#include "mergeq/merge.hpp"

using namespace mergeq;
using Catch::Approx;

namespace {

using Vec = std::vector<double>;

double sq(std::span<const double> p) { return p[0] * p[0]; }
double double_well(std::span<const double> p) { return (p[0] * p[0] - 1) * (p[0] * p[0] - 1); }

Network scalar_net(double w) {
    Network n;
    n.layers.push_back({Tensor::matrix(1, 1, {w}), Tensor::vector({0.0}), Activation::identity});
    return n;
}

Batch random_batch(std::size_t n, Rng& rng) {
    Batch b{Tensor({n, 2}), std::vector<int>(n)};
    for (double& x : b.inputs.data()) x = rng.normal();
    for (std::size_t i = 0; i < n; ++i) b.labels[i] = static_cast<int>(i % 2);
    return b;
}

} // namespace

TEST_CASE("interpolation endpoints and midpoint") {
    CHECK(interpolate(scalar_net(0), scalar_net(10), 0.3).layers[0].weight[0] == Approx(3.0));
    Rng rng(1);
    const auto a = init_network({2, 5, 2}, rng), b = init_network({2, 5, 2}, rng);
    CHECK(flatten(interpolate(a, b, 0.0)) == flatten(a));
    CHECK(flatten(interpolate(a, b, 1.0)) == flatten(b));
    for (double lam : {0.1, 0.3, 0.7}) CHECK(flatten(interpolate(a, a, lam)) == flatten(a));
    CHECK(flatten(interpolate(a, b, 0.5)) == flatten(merge_fp_midpoint(a, b)));
    CHECK_THROWS_AS(interpolate(a, b, 1.01), RangeError);
    CHECK_THROWS_AS(interpolate(a, b, -0.1), RangeError);
}

TEST_CASE("convex pair has zero barrier") {
    const Vec a{-1.0}, b{1.0};
    const auto r = error_barrier(std::span<const double>(a), std::span<const double>(b), sq, 21);
    CHECK(r.barrier == Approx(0.0).margin(1e-9));
}

TEST_CASE("double well has unit barrier") {
    const Vec a{-1.0}, b{1.0};
    const auto r = error_barrier(std::span<const double>(a), std::span<const double>(b), double_well, 21);
    CHECK(r.barrier == Approx(1.0).margin(1e-6));
    CHECK(r.lambdas.front() == 0.0);
    CHECK(r.lambdas.back() == 1.0);
    for (std::size_t i = 1; i < r.lambdas.size(); ++i) CHECK(r.lambdas[i] > r.lambdas[i - 1]);
    CHECK(r.recompute_barrier() == r.barrier);
    CHECK_THROWS_AS(error_barrier(std::span<const double>(a), std::span<const double>(b), double_well, 2),
                    ValidationError);
}

TEST_CASE("identical endpoints have zero barrier") {
    Rng rng(3);
    const auto net = init_network({2, 4, 2}, rng);
    const auto r = error_barrier(net, net, random_batch(20, rng), 11);
    CHECK(r.barrier == 0.0);
    for (double l : r.losses) CHECK(l == r.losses.front());
}

TEST_CASE("refining the grid never lowers the barrier") {
    Rng rng(5);
    for (int t = 0; t < 20; ++t) {
        const auto a = init_network({2, 6, 2}, rng), b = init_network({2, 6, 2}, rng);
        const auto batch = random_batch(32, rng);
        for (int k : {2, 5, 10}) {
            const auto coarse = error_barrier(a, b, batch, k + 1);
            const auto fine = error_barrier(a, b, batch, 2 * k + 1);
            CHECK(fine.barrier >= coarse.barrier);
        }
    }
}

TEST_CASE("cross-domain barrier on shifted quadratics") {
    const Vec a{1.0}, b{-1.0};
    auto l1 = [](std::span<const double> p) { return (p[0] - 1) * (p[0] - 1); };
    auto l2 = [](std::span<const double> p) { return (p[0] + 1) * (p[0] + 1); };
    const auto r = cross_domain_barrier(std::span<const double>(a), std::span<const double>(b), l1, l2, 21);
    CHECK(r.shifted_floor == Approx(2.0));
    CHECK(r.shifted_floor_d2 == Approx(2.0));
    // L1 along the path is 4 * lam^2, endpoint mean 2, so the maximum excess is 2 at lam = 1.
    CHECK(r.d1.barrier == Approx(2.0));
    for (std::size_t i = 0; i < r.d1.lambdas.size(); ++i)
        CHECK(r.d1.losses[i] == Approx(4 * r.d1.lambdas[i] * r.d1.lambdas[i]).margin(1e-12));
}

TEST_CASE("cross-domain barrier degenerates to the single-domain barrier") {
    Rng rng(8);
    const auto a = init_network({2, 4, 2}, rng), b = init_network({2, 4, 2}, rng);
    const auto batch = random_batch(40, rng);
    const auto r = cross_domain_barrier(a, b, batch, batch, 11);
    const auto plain = error_barrier(a, b, batch, 11);
    CHECK(r.d1.barrier == plain.barrier);
    CHECK(r.d2.barrier == plain.barrier);
    CHECK(r.shifted_floor == Approx(0.5 * std::abs(plain.endpoint_losses.first - plain.endpoint_losses.second)));
}

TEST_CASE("domain barrier never drops below the shifted floor") {
    Rng rng(13);
    for (int t = 0; t < 100; ++t) {
        const auto a = init_network({2, 5, 2}, rng), b = init_network({2, 5, 2}, rng);
        const auto r = cross_domain_barrier(a, b, random_batch(16, rng), random_batch(16, rng), 11);
        CHECK(r.d1.barrier >= -r.shifted_floor - 1e-12);
        CHECK(r.d2.barrier >= -r.shifted_floor_d2 - 1e-12);
    }
}

TEST_CASE("surface grid basis and reference points") {
    const Vec o{0.5, -0.2, 0.1}, t1{1.5, 0.3, 0.1}, t2{0.2, 1.0, -0.7};
    const Vec h{1.0, 2.0, 5.0};
    auto loss = [&](std::span<const double> p) {
        double s = 0.0;
        for (std::size_t i = 0; i < 3; ++i) s += 0.5 * h[i] * p[i] * p[i];
        return s;
    };
    const auto g = surface_grid(std::span<const double>(o), std::span<const double>(t1), std::span<const double>(t2),
                                loss, {11, 9}, {{-1.0, 1.0}, {-2.0, 2.0}});
    double n1 = 0, n2 = 0, d = 0;
    for (std::size_t i = 0; i < 3; ++i) {
        n1 += g.e1[i] * g.e1[i];
        n2 += g.e2[i] * g.e2[i];
        d += g.e1[i] * g.e2[i];
    }
    CHECK(std::abs(n1 - 1) < 1e-10);
    CHECK(std::abs(n2 - 1) < 1e-10);
    CHECK(std::abs(d) < 1e-10);
    CHECK(g.grid.size() == 99);
    CHECK(g.at(5, 4) == loss(o));

    // t1 and t2 lie in the plane; their coordinates map back onto them.
    for (const Vec* t : {&t1, &t2}) {
        const auto [u, v] = g.coordinates(*t);
        const auto p = g.point(u, v);
        CHECK(loss(p) == Approx(loss(*t)).margin(1e-12));
    }

    // On a quadratic the grid is a paraboloid: second differences are constant.
    const double du = g.u(1) - g.u(0);
    const double ref = g.at(2, 0) - 2 * g.at(1, 0) + g.at(0, 0);
    for (std::size_t j = 0; j < g.nv; ++j)
        for (std::size_t i = 1; i + 1 < g.nu; ++i)
            CHECK(g.at(i + 1, j) - 2 * g.at(i, j) + g.at(i - 1, j) == Approx(ref).margin(1e-10));
    double curv = 0.0;
    for (std::size_t i = 0; i < 3; ++i) curv += h[i] * g.e1[i] * g.e1[i];
    CHECK(ref == Approx(curv * du * du).margin(1e-10));
}

TEST_CASE("surface grid rejects degenerate planes") {
    const Vec o{0.0, 0.0}, a{1.0, 1.0}, b{2.0, 2.0};
    CHECK_THROWS_AS(surface_grid(std::span<const double>(o), std::span<const double>(a), std::span<const double>(b),
                                 sq, {3, 3}, {{-1, 1}, {-1, 1}}),
                    ValidationError);
    CHECK_THROWS_AS(surface_grid(std::span<const double>(o), std::span<const double>(o), std::span<const double>(b),
                                 sq, {3, 3}, {{-1, 1}, {-1, 1}}),
                    ValidationError);
}

TEST_CASE("hessian quadratic form on a diagonal quadratic") {
    auto grad_fn = [](std::span<const double> p) { return Vec{2.0 * p[0], 6.0 * p[1]}; };
    const Vec theta{0.3, -0.4};
    const Vec e0{1.0, 0.0}, zero{0.0, 0.0};
    CHECK(hessian_quadform(std::span<const double>(theta), grad_fn, std::span<const double>(e0), 1e-4) ==
          Approx(2.0).margin(1e-6));
    CHECK(hessian_quadform(std::span<const double>(theta), grad_fn, std::span<const double>(zero), 1e-4) == 0.0);
    CHECK_THROWS_AS(hessian_quadform(std::span<const double>(theta), grad_fn, std::span<const double>(e0), 0.0),
                    ValidationError);
}

TEST_CASE("hessian quadratic form is even in the probe") {
    Rng rng(17);
    const auto net = init_network({2, 6, 2}, rng);
    const auto batch = random_batch(30, rng);
    for (int t = 0; t < 10; ++t) {
        Tensor v({net.num_params()});
        for (double& x : v.data()) x = rng.normal();
        Tensor neg = v;
        for (double& x : neg.data()) x = -x;
        CHECK(hessian_quadform(net, batch, v, 1e-5) == Approx(hessian_quadform(net, batch, neg, 1e-5)).margin(1e-8));
    }
}

TEST_CASE("midpoint hessian gap") {
    auto quad_grad = [](std::span<const double> p) { return Vec{2.0 * p[0], 6.0 * p[1]}; };
    const Vec a{1.0, 2.0}, b{-3.0, 0.5}, v{0.6, 0.8};
    CHECK(midpoint_hessian_gap(std::span<const double>(a), std::span<const double>(b), quad_grad,
                               std::span<const double>(v), 1e-4) == Approx(0.0).margin(1e-8));
    CHECK(midpoint_hessian_gap(std::span<const double>(a), std::span<const double>(a), quad_grad,
                               std::span<const double>(v), 1e-4) == 0.0);

    // L = sum p^4: along e0 the gap is 3 * (b0 - a0)^2.
    auto quartic_grad = [](std::span<const double> p) { return Vec{4 * p[0] * p[0] * p[0], 4 * p[1] * p[1] * p[1]}; };
    const Vec e0{1.0, 0.0};
    double prev = -1.0;
    for (double s : {0.1, 0.2, 0.4, 0.8, 1.6}) {
        const Vec lo{-s, 0.3}, hi{2 * s, 0.3};
        const double gap = midpoint_hessian_gap(std::span<const double>(lo), std::span<const double>(hi), quartic_grad,
                                                std::span<const double>(e0), 1e-4);
        CHECK(gap == Approx(3 * 9 * s * s).epsilon(1e-5));
        CHECK(gap > prev);
        prev = gap;
    }
}

TEST_CASE("csv exports") {
    const Vec a{-1.0}, b{1.0};
    const auto r = error_barrier(std::span<const double>(a), std::span<const double>(b), double_well, 3);
    std::ostringstream os;
    write_barrier_csv(os, r);
    CHECK(os.str() == "lambda,loss\n0,0\n0.5,1\n1,0\n");

    const Vec o{0.0, 0.0}, t1{1.0, 0.0}, t2{0.0, 1.0};
    const auto g = surface_grid(std::span<const double>(o), std::span<const double>(t1), std::span<const double>(t2),
                                sq, {2, 3}, {{0, 1}, {0, 1}});
    std::ostringstream gs;
    write_surface_csv(gs, g);
    const std::string s = gs.str();
    CHECK(std::count(s.begin(), s.end(), '\n') == 7);
    CHECK(s.rfind("u,v,loss\n0,0,0\n0,0.5,0\n", 0) == 0);
}
