#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "errors.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace mergeq {

enum class QuantTarget : std::uint8_t { weight = 0, activation = 1 };

// Symmetric signed uniform quantizer: value = int * step, int in [-2^(b-1), 2^(b-1)-1].
struct QuantScheme {
    int bits = 8;
    double step = 1.0;
    QuantTarget target = QuantTarget::weight;

    std::int32_t qmin() const { return -(std::int32_t{1} << (bits - 1)); }
    std::int32_t qmax() const { return (std::int32_t{1} << (bits - 1)) - 1; }

    void validate() const {
        if (bits < 2 || bits > 8) throw ValidationError("quantizer bit width must be in [2,8], got " + std::to_string(bits));
        if (!(step > 0.0) || !std::isfinite(step)) throw ValidationError("quantizer step must be positive and finite");
    }

    friend bool operator==(const QuantScheme&, const QuantScheme&) = default;
};

struct QuantizedTensor {
    Shape shape;
    std::vector<std::int32_t> ints;
    QuantScheme scheme;

    friend bool operator==(const QuantizedTensor&, const QuantizedTensor&) = default;
};

// Round-half-away-from-zero, then clamp.
inline std::int32_t quantize_scalar(double w, const QuantScheme& s) {
    const double r = std::round(w / s.step);
    const double c = std::clamp(r, static_cast<double>(s.qmin()), static_cast<double>(s.qmax()));
    return static_cast<std::int32_t>(c);
}

inline double fake_quant_scalar(double w, const QuantScheme& s) {
    return static_cast<double>(quantize_scalar(w, s)) * s.step;
}

// True where the straight-through estimator passes gradient (inside the clamp range).
inline bool ste_passes(double w, const QuantScheme& s) {
    const double x = w / s.step;
    return x >= static_cast<double>(s.qmin()) && x <= static_cast<double>(s.qmax());
}

inline QuantizedTensor quantize_uniform(const Tensor& w, const QuantScheme& scheme) {
    scheme.validate();
    if (!w.all_finite()) throw ValidationError("quantize_uniform: non-finite input");
    QuantizedTensor q{w.shape(), std::vector<std::int32_t>(w.size()), scheme};
    for (std::size_t i = 0; i < w.size(); ++i) q.ints[i] = quantize_scalar(w[i], scheme);
    return q;
}

inline Tensor dequantize(const QuantizedTensor& q) {
    std::vector<double> out(q.ints.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<double>(q.ints[i]) * q.scheme.step;
    return Tensor(q.shape, std::move(out));
}

inline Tensor fake_quant(const Tensor& w, const QuantScheme& scheme) {
    return dequantize(quantize_uniform(w, scheme));
}

inline double quantization_mse(std::span<const double> w, const QuantScheme& s) {
    double acc = 0.0;
    for (double v : w) {
        const double e = v - fake_quant_scalar(v, s);
        acc += e * e;
    }
    return acc / static_cast<double>(w.size());
}

struct StepCalibration {
    QuantScheme scheme;
    // Set when the input was all zeros and the step fell back to 1.0.
    bool fallback = false;
};

inline constexpr int kCalibrationGridSize = 100;
inline constexpr double kCalibrationGridLo = 0.5;
inline constexpr double kCalibrationGridHi = 1.2;

// MSE-optimal step over 100 evenly spaced candidates in [0.5, 1.2] * max|w| / qmax.
// Candidates are scanned in ascending order and only strict improvements are
// taken, so ties resolve to the smallest step.
inline StepCalibration calibrate_step(std::span<const double> w, int bits,
                                      QuantTarget target = QuantTarget::weight) {
    QuantScheme probe{bits, 1.0, target};
    probe.validate();
    double max_abs = 0.0;
    for (double v : w) {
        if (!std::isfinite(v)) throw ValidationError("calibrate_step: non-finite input");
        max_abs = std::max(max_abs, std::abs(v));
    }
    if (max_abs == 0.0) return {probe, true};

    const double base = max_abs / static_cast<double>(probe.qmax());
    QuantScheme best = probe;
    double best_mse = std::numeric_limits<double>::infinity();
    for (int k = 0; k < kCalibrationGridSize; ++k) {
        const double factor = kCalibrationGridLo + (kCalibrationGridHi - kCalibrationGridLo) * k / (kCalibrationGridSize - 1);
        QuantScheme cand{bits, base * factor, target};
        const double mse = quantization_mse(w, cand);
        if (mse < best_mse) {
            best_mse = mse;
            best = cand;
        }
    }
    return {best, false};
}

inline StepCalibration calibrate_step(const Tensor& w, int bits, QuantTarget target = QuantTarget::weight) {
    return calibrate_step(w.data(), bits, target);
}

// i.i.d. U[-step/2, step/2).
inline Tensor sample_noise(const QuantScheme& scheme, const Shape& shape, Rng& rng) {
    Tensor out(shape);
    for (double& v : out.data()) v = (rng.uniform01() - 0.5) * scheme.step;
    return out;
}

inline Tensor fake_quant_act(const Tensor& a, const QuantScheme& scheme) {
    if (scheme.target != QuantTarget::activation) throw ValidationError("fake_quant_act: scheme is not an activation scheme");
    return fake_quant(a, scheme);
}

// Straight-through backward: upstream gradient passes unchanged inside the clamp range.
inline Tensor fake_quant_act_backward(const Tensor& a, const QuantScheme& scheme, const Tensor& grad_out) {
    require_same_shape(a, grad_out, "fake_quant_act_backward");
    Tensor g = grad_out;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (!ste_passes(a[i], scheme)) g[i] = 0.0;
    return g;
}

// Activation step from the largest magnitude seen over calibration data.
inline QuantScheme calibrate_activation_max(double max_abs, int bits) {
    QuantScheme s{bits, 1.0, QuantTarget::activation};
    s.validate();
    if (max_abs > 0.0 && std::isfinite(max_abs)) s.step = max_abs / static_cast<double>(s.qmax());
    return s;
}

} // namespace mergeq
