#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "errors.hpp"
#include "nnet.hpp"
#include "rng.hpp"

namespace mergeq {

using ParamVector = std::vector<double>;

// (1 - lam) * a + lam * b; coordinates where a == b are copied exactly.
inline ParamVector interpolate(std::span<const double> a, std::span<const double> b, double lam) {
    if (!(lam >= 0.0 && lam <= 1.0)) throw RangeError("interpolate: lambda " + std::to_string(lam) + " outside [0,1]");
    if (a.size() != b.size()) throw DimensionError("interpolate: parameter vector lengths differ");
    ParamVector out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] == b[i] ? a[i] : (1.0 - lam) * a[i] + lam * b[i];
    return out;
}

inline Network interpolate(const Network& a, const Network& b, double lam) {
    require_same_architecture(a, b, "interpolate");
    const auto fa = flatten(a), fb = flatten(b);
    return unflatten(a, interpolate(fa, fb, lam));
}

struct BarrierReport {
    std::vector<double> lambdas;
    std::vector<double> losses;
    std::pair<double, double> endpoint_losses{0.0, 0.0};
    double barrier = 0.0;
    std::string loss_fn_domain;

    // max_i losses[i] - (L(t1) + L(t2)) / 2, from the stored arrays.
    double recompute_barrier() const {
        const double mid = 0.5 * (endpoint_losses.first + endpoint_losses.second);
        double b = -std::numeric_limits<double>::infinity();
        for (double l : losses) b = std::max(b, l - mid);
        return b;
    }
};

inline std::vector<double> barrier_grid(int grid_n) {
    if (grid_n < 3) throw ValidationError("error_barrier: grid_n must be at least 3");
    std::vector<double> lams(static_cast<std::size_t>(grid_n));
    for (int i = 0; i < grid_n; ++i) lams[static_cast<std::size_t>(i)] = static_cast<double>(i) / (grid_n - 1);
    lams.back() = 1.0;
    return lams;
}

template <class LossFn>
BarrierReport error_barrier(std::span<const double> t1, std::span<const double> t2, LossFn&& loss, int grid_n,
                            std::string domain = {}) {
    BarrierReport r;
    r.lambdas = barrier_grid(grid_n);
    r.loss_fn_domain = std::move(domain);
    for (double lam : r.lambdas) {
        const auto p = interpolate(t1, t2, lam);
        r.losses.push_back(loss(std::span<const double>(p)));
    }
    r.endpoint_losses = {r.losses.front(), r.losses.back()};
    r.barrier = r.recompute_barrier();
    return r;
}

inline BarrierReport error_barrier(const Network& t1, const Network& t2, const Batch& eval_batch, int grid_n,
                                   std::string domain = {}, const ActQuantPlan& plan = {}) {
    require_same_architecture(t1, t2, "error_barrier");
    const auto a = flatten(t1), b = flatten(t2);
    return error_barrier(
        std::span<const double>(a), std::span<const double>(b),
        [&](std::span<const double> p) { return batch_loss(unflatten(t1, p), eval_batch, plan); }, grid_n,
        std::move(domain));
}

struct CrossDomainBarrier {
    BarrierReport d1;
    BarrierReport d2;
    double shifted_floor = 0.0;    // 0.5 * |L1(t1) - L1(t2)|
    double shifted_floor_d2 = 0.0; // 0.5 * |L2(t1) - L2(t2)|
};

template <class Loss1, class Loss2>
CrossDomainBarrier cross_domain_barrier(std::span<const double> t1, std::span<const double> t2, Loss1&& loss1,
                                        Loss2&& loss2, int grid_n) {
    CrossDomainBarrier out;
    out.d1 = error_barrier(t1, t2, loss1, grid_n, "d1");
    out.d2 = error_barrier(t1, t2, loss2, grid_n, "d2");
    out.shifted_floor = 0.5 * std::abs(out.d1.endpoint_losses.first - out.d1.endpoint_losses.second);
    out.shifted_floor_d2 = 0.5 * std::abs(out.d2.endpoint_losses.first - out.d2.endpoint_losses.second);
    return out;
}

inline CrossDomainBarrier cross_domain_barrier(const Network& t1, const Network& t2, const Batch& batch_d1,
                                               const Batch& batch_d2, int grid_n) {
    require_same_architecture(t1, t2, "cross_domain_barrier");
    const auto a = flatten(t1), b = flatten(t2);
    return cross_domain_barrier(
        std::span<const double>(a), std::span<const double>(b),
        [&](std::span<const double> p) { return batch_loss(unflatten(t1, p), batch_d1); },
        [&](std::span<const double> p) { return batch_loss(unflatten(t1, p), batch_d2); }, grid_n);
}

// Loss on the plane origin + u * e1 + v * e2, where (e1, e2) is the Gram-Schmidt
// basis of (t1 - origin, t2 - origin). grid[i * nv + j] is the loss at (u_i, v_j).
struct SurfaceGrid {
    ParamVector origin;
    ParamVector e1;
    ParamVector e2;
    std::pair<double, double> u_range{-1.0, 1.0};
    std::pair<double, double> v_range{-1.0, 1.0};
    std::size_t nu = 0;
    std::size_t nv = 0;
    std::vector<double> grid;

    double u(std::size_t i) const { return axis(u_range, nu, i); }
    double v(std::size_t j) const { return axis(v_range, nv, j); }
    double at(std::size_t i, std::size_t j) const { return grid[i * nv + j]; }

    ParamVector point(double uu, double vv) const {
        ParamVector p(origin.size());
        for (std::size_t k = 0; k < p.size(); ++k) p[k] = origin[k] + uu * e1[k] + vv * e2[k];
        return p;
    }

    // Plane coordinates of `p` (its orthogonal projection onto the plane).
    std::pair<double, double> coordinates(std::span<const double> p) const {
        double a = 0.0, b = 0.0;
        for (std::size_t k = 0; k < p.size(); ++k) {
            a += (p[k] - origin[k]) * e1[k];
            b += (p[k] - origin[k]) * e2[k];
        }
        return {a, b};
    }

private:
    static double axis(std::pair<double, double> r, std::size_t n, std::size_t i) {
        if (n == 1) return r.first;
        if (i + 1 == n) return r.second;
        return r.first + (r.second - r.first) * static_cast<double>(i) / static_cast<double>(n - 1);
    }
};

template <class LossFn>
SurfaceGrid surface_grid(std::span<const double> origin, std::span<const double> t1, std::span<const double> t2,
                         LossFn&& loss, std::pair<std::size_t, std::size_t> resolution,
                         std::pair<std::pair<double, double>, std::pair<double, double>> extent) {
    if (t1.size() != origin.size() || t2.size() != origin.size())
        throw DimensionError("surface_grid: parameter vector lengths differ");
    if (resolution.first == 0 || resolution.second == 0) throw ValidationError("surface_grid: empty resolution");
    SurfaceGrid g;
    g.origin.assign(origin.begin(), origin.end());
    g.e1.resize(origin.size());
    g.e2.resize(origin.size());
    for (std::size_t k = 0; k < origin.size(); ++k) {
        g.e1[k] = t1[k] - origin[k];
        g.e2[k] = t2[k] - origin[k];
    }
    auto dot = [](const ParamVector& a, const ParamVector& b) {
        double s = 0.0;
        for (std::size_t k = 0; k < a.size(); ++k) s += a[k] * b[k];
        return s;
    };
    const double n1 = std::sqrt(dot(g.e1, g.e1));
    const double n2_raw = std::sqrt(dot(g.e2, g.e2));
    if (n1 == 0.0 || n2_raw == 0.0) throw ValidationError("surface_grid: degenerate basis (endpoint equals origin)");
    for (double& x : g.e1) x /= n1;
    // Two Gram-Schmidt passes keep the basis orthonormal to ~1e-16.
    for (int pass = 0; pass < 2; ++pass) {
        const double c = dot(g.e2, g.e1);
        for (std::size_t k = 0; k < g.e2.size(); ++k) g.e2[k] -= c * g.e1[k];
    }
    const double n2 = std::sqrt(dot(g.e2, g.e2));
    if (n2 <= 1e-10 * n2_raw) throw ValidationError("surface_grid: degenerate basis (directions are collinear)");
    for (double& x : g.e2) x /= n2;

    g.nu = resolution.first;
    g.nv = resolution.second;
    g.u_range = extent.first;
    g.v_range = extent.second;
    g.grid.resize(g.nu * g.nv);
    for (std::size_t i = 0; i < g.nu; ++i)
        for (std::size_t j = 0; j < g.nv; ++j) {
            const auto p = g.point(g.u(i), g.v(j));
            g.grid[i * g.nv + j] = loss(std::span<const double>(p));
        }
    return g;
}

inline SurfaceGrid surface_grid(const Network& origin, const Network& t1, const Network& t2, const Batch& eval_batch,
                                std::pair<std::size_t, std::size_t> resolution,
                                std::pair<std::pair<double, double>, std::pair<double, double>> extent) {
    require_same_architecture(origin, t1, "surface_grid");
    require_same_architecture(origin, t2, "surface_grid");
    const auto o = flatten(origin), a = flatten(t1), b = flatten(t2);
    return surface_grid(
        std::span<const double>(o), std::span<const double>(a), std::span<const double>(b),
        [&](std::span<const double> p) { return batch_loss(unflatten(origin, p), eval_batch); }, resolution, extent);
}

// v^T H v from central differences of the gradient along v.
template <class GradFn>
double hessian_quadform(std::span<const double> theta, GradFn&& grad_fn, std::span<const double> v, double h) {
    if (!(h > 0.0)) throw ValidationError("hessian_quadform: h must be positive");
    if (v.size() != theta.size()) throw DimensionError("hessian_quadform: probe length differs from parameter count");
    ParamVector plus(theta.size()), minus(theta.size());
    for (std::size_t i = 0; i < theta.size(); ++i) {
        plus[i] = theta[i] + h * v[i];
        minus[i] = theta[i] - h * v[i];
    }
    const auto gp = grad_fn(std::span<const double>(plus));
    const auto gm = grad_fn(std::span<const double>(minus));
    double acc = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) acc += v[i] * (gp[i] - gm[i]);
    return acc / (2.0 * h);
}

// Gradient of the batch cross-entropy as a function of the flat parameter vector.
inline auto network_grad_fn(const Network& like, const Batch& batch) {
    return [&like, &batch](std::span<const double> p) { return flatten(grad(unflatten(like, p), batch)); };
}

inline double hessian_quadform(const Network& net, const Batch& batch, const Tensor& v, double h) {
    if (v.size() != net.num_params()) throw DimensionError("hessian_quadform: probe length differs from parameter count");
    const auto theta = flatten(net);
    return hessian_quadform(std::span<const double>(theta), network_grad_fn(net, batch), v.data(), h);
}

// |q(midpoint) - (q(t1) + q(t2)) / 2| for the quadratic form q(x) = v^T H(x) v.
template <class GradFn>
double midpoint_hessian_gap(std::span<const double> t1, std::span<const double> t2, GradFn&& grad_fn,
                            std::span<const double> v, double h) {
    const auto mid = interpolate(t1, t2, 0.5);
    const double qm = hessian_quadform(std::span<const double>(mid), grad_fn, v, h);
    const double q1 = hessian_quadform(t1, grad_fn, v, h);
    const double q2 = hessian_quadform(t2, grad_fn, v, h);
    return std::abs(qm - 0.5 * (q1 + q2));
}

inline double midpoint_hessian_gap(const Network& t1, const Network& t2, const Batch& batch, const Tensor& v,
                                   double h) {
    require_same_architecture(t1, t2, "midpoint_hessian_gap");
    if (v.size() != t1.num_params()) throw DimensionError("midpoint_hessian_gap: probe length differs from parameter count");
    const auto a = flatten(t1), b = flatten(t2);
    return midpoint_hessian_gap(std::span<const double>(a), std::span<const double>(b), network_grad_fn(t1, batch),
                                v.data(), h);
}

// Mean of v^T H v over `n_probes` random unit directions.
template <class GradFn>
double mean_probe_curvature(std::span<const double> theta, GradFn&& grad_fn, int n_probes, Rng& rng, double h = 1e-4) {
    double acc = 0.0;
    ParamVector v(theta.size());
    for (int p = 0; p < n_probes; ++p) {
        double nrm = 0.0;
        for (double& x : v) {
            x = rng.normal();
            nrm += x * x;
        }
        nrm = std::sqrt(nrm);
        for (double& x : v) x /= nrm;
        acc += hessian_quadform(theta, grad_fn, std::span<const double>(v), h);
    }
    return acc / n_probes;
}

inline void write_barrier_csv(std::ostream& os, const BarrierReport& r) {
    os << "lambda,loss\n";
    char buf[96];
    for (std::size_t i = 0; i < r.lambdas.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%.17g,%.17g\n", r.lambdas[i], r.losses[i]);
        os << buf;
    }
}

inline void write_surface_csv(std::ostream& os, const SurfaceGrid& g) {
    os << "u,v,loss\n";
    char buf[128];
    for (std::size_t i = 0; i < g.nu; ++i)
        for (std::size_t j = 0; j < g.nv; ++j) {
            std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g\n", g.u(i), g.v(j), g.at(i, j));
            os << buf;
        }
}

} // namespace mergeq
