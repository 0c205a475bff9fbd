#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>

#include "errors.hpp"
#include "nnet.hpp"

namespace mergeq {

struct OptimState {
    static constexpr double beta1 = 0.9;
    static constexpr double beta2 = 0.999;
    static constexpr double eps = 1e-8;

    std::int64_t step = 0;
    ParamSet m;
    ParamSet v;

    static OptimState for_params(const ParamSet& params) {
        OptimState s;
        for (const auto& p : params) {
            s.m.emplace_back(p.shape());
            s.v.emplace_back(p.shape());
        }
        return s;
    }
};

// One bias-corrected Adam update, in place.
inline void adam_step(ParamSet& params, const ParamSet& grads, OptimState& state, double lr) {
    if (params.size() != grads.size() || params.size() != state.m.size() || params.size() != state.v.size())
        throw DimensionError("adam_step: parameter, gradient and state counts differ");
    for (std::size_t i = 0; i < params.size(); ++i) {
        require_same_shape(params[i], grads[i], "adam_step");
        require_same_shape(params[i], state.m[i], "adam_step state");
        require_same_shape(params[i], state.v[i], "adam_step state");
    }
    ++state.step;
    const double c1 = 1.0 - std::pow(OptimState::beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(OptimState::beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto p = params[i].data();
        auto g = grads[i].data();
        auto m = state.m[i].data();
        auto v = state.v[i].data();
        for (std::size_t j = 0; j < p.size(); ++j) {
            m[j] = OptimState::beta1 * m[j] + (1.0 - OptimState::beta1) * g[j];
            v[j] = OptimState::beta2 * v[j] + (1.0 - OptimState::beta2) * g[j] * g[j];
            const double mhat = m[j] / c1;
            const double vhat = v[j] / c2;
            p[j] -= lr * mhat / (std::sqrt(vhat) + OptimState::eps);
        }
    }
}

// Linear warmup from 0 to lr0 over `warmup` steps, then cosine decay reaching 0 at t == total.
inline double lr_schedule(std::int64_t t, std::int64_t total, std::int64_t warmup, double lr0) {
    if (total <= 0 || warmup < 0 || warmup >= total)
        throw RangeError("lr_schedule: need 0 <= warmup < total, got warmup=" + std::to_string(warmup) +
                         " total=" + std::to_string(total));
    if (t < 0 || t >= total)
        throw RangeError("lr_schedule: step " + std::to_string(t) + " outside [0," + std::to_string(total) + ")");
    if (t < warmup) return lr0 * static_cast<double>(t) / static_cast<double>(warmup);
    const double progress = static_cast<double>(t - warmup) / static_cast<double>(total - warmup);
    return 0.5 * lr0 * (1.0 + std::cos(std::numbers::pi * progress));
}

} // namespace mergeq
