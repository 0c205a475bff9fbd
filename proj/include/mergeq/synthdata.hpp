#pragma once

#include <cmath>
#include <cstdio>
#include <cstdint>
#include <numbers>
#include <ostream>
#include <string>
#include <string_view>
#include <utility>

#include "errors.hpp"
#include "nnet.hpp"
#include "rng.hpp"

namespace mergeq {

enum class BaseTask : std::uint8_t { two_gaussians, two_moons };

inline std::string_view to_string(BaseTask t) { return t == BaseTask::two_gaussians ? "two-gaussians" : "two-moons"; }

inline BaseTask parse_base_task(std::string_view s) {
    if (s == "two-gaussians") return BaseTask::two_gaussians;
    if (s == "two-moons") return BaseTask::two_moons;
    throw ValidationError("unknown base task '" + std::string(s) + "'");
}

struct DomainSpec {
    BaseTask base_task = BaseTask::two_gaussians;
    double rotation_deg = 0.0;
    double noise_std = 0.1;
    std::size_t n_train = 256;
    std::size_t n_test = 256;
    std::uint64_t seed = 0;

    void validate() const {
        if (n_train < 8 || n_test < 8) throw ValidationError("domain needs at least 8 train and 8 test samples");
        if (!(noise_std >= 0.0) || !(noise_std < 2.0)) throw ValidationError("noise_std must be in [0, 2)");
        if (!std::isfinite(rotation_deg)) throw ValidationError("rotation_deg must be finite");
    }
};

struct Dataset {
    Batch train;
    Batch test;
    DomainSpec spec;
};

// (cos, sin) of an angle in degrees; quarter turns are exact.
inline std::pair<double, double> rotation_cos_sin(double deg) {
    double r = std::fmod(deg, 360.0);
    if (r < 0.0) r += 360.0;
    if (r == 0.0) return {1.0, 0.0};
    if (r == 90.0) return {0.0, 1.0};
    if (r == 180.0) return {-1.0, 0.0};
    if (r == 270.0) return {0.0, -1.0};
    const double a = r * std::numbers::pi / 180.0;
    return {std::cos(a), std::sin(a)};
}

// Rotates every 2-D row of `points` counter-clockwise about the origin.
inline Tensor rotate_points(const Tensor& points, double deg) {
    if (points.rank() != 2 || points.dim(1) != 2) throw DimensionError("rotate_points expects [n x 2]");
    const auto [c, s] = rotation_cos_sin(deg);
    Tensor out = points;
    for (std::size_t r = 0; r < points.dim(0); ++r) {
        const double x = points.at(r, 0), y = points.at(r, 1);
        out.at(r, 0) = c * x - s * y;
        out.at(r, 1) = s * x + c * y;
    }
    return out;
}

namespace detail {

// Labels alternate 0,1,0,1,... so classes are balanced to within one sample.
inline Batch sample_base(BaseTask task, std::size_t n, double noise_std, Rng& rng) {
    Tensor x({n, 2});
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
        const int label = static_cast<int>(i % 2);
        double px = 0.0, py = 0.0;
        if (task == BaseTask::two_gaussians) {
            px = label == 0 ? -1.0 : 1.0;
        } else {
            // Interleaved half circles, centred so the mixture mean is near the origin.
            const double t = std::numbers::pi * rng.uniform01();
            if (label == 0) {
                px = std::cos(t) - 0.5;
                py = std::sin(t) - 0.25;
            } else {
                px = 0.5 - std::cos(t);
                py = 0.25 - std::sin(t);
            }
        }
        x.at(i, 0) = px + noise_std * rng.normal();
        x.at(i, 1) = py + noise_std * rng.normal();
        y[i] = label;
    }
    return {std::move(x), std::move(y)};
}

} // namespace detail

inline Dataset make_domain(const DomainSpec& spec) {
    spec.validate();
    Rng train_rng(derive_seed(spec.seed, "synthdata.train"));
    Rng test_rng(derive_seed(spec.seed, "synthdata.test"));
    Batch train = detail::sample_base(spec.base_task, spec.n_train, spec.noise_std, train_rng);
    Batch test = detail::sample_base(spec.base_task, spec.n_test, spec.noise_std, test_rng);
    train.inputs = rotate_points(train.inputs, spec.rotation_deg);
    test.inputs = rotate_points(test.inputs, spec.rotation_deg);
    return {std::move(train), std::move(test), spec};
}

// CSV with header `x0,x1,label`.
inline void write_batch_csv(std::ostream& os, const Batch& b) {
    os << "x0,x1,label\n";
    char buf[96];
    for (std::size_t r = 0; r < b.size(); ++r) {
        std::snprintf(buf, sizeof buf, "%.17g,%.17g,%d\n", b.inputs.at(r, 0), b.inputs.at(r, 1), b.labels[r]);
        os << buf;
    }
}

} // namespace mergeq
