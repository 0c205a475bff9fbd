#pragma once

#include <cmath>
#include <cstdio>
#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "errors.hpp"
#include "nnet.hpp"
#include "optim.hpp"
#include "qmodel.hpp"
#include "quant.hpp"
#include "rng.hpp"

namespace mergeq {

enum class PtqMethod : std::uint8_t {
    hdrq,       // noise-phase then fake-quant tail, activation drop, source-distance penalty
    recon_only, // fake-quant reconstruction, activations always quantized, no penalty
    recon_drop, // recon_only plus activation drop
};

inline std::string_view to_string(PtqMethod m) {
    switch (m) {
    case PtqMethod::hdrq: return "hdrq";
    case PtqMethod::recon_only: return "recon_only";
    case PtqMethod::recon_drop: return "recon_drop";
    }
    return "?";
}

inline PtqMethod parse_ptq_method(std::string_view s) {
    if (s == "hdrq") return PtqMethod::hdrq;
    if (s == "recon_only") return PtqMethod::recon_only;
    if (s == "recon_drop") return PtqMethod::recon_drop;
    throw ValidationError("unknown ptq method '" + std::string(s) + "'");
}

// squared: lambda * ||w - w_src||^2 (smooth, default); l2: lambda * ||w - w_src||.
enum class DistanceNorm : std::uint8_t { squared, l2 };

inline constexpr int kFullIterations = 20000;
inline constexpr int kFullFakeQuantTail = 3500;

// Activation bit widths above this disable activation quantization.
inline constexpr int kMaxActBits = 8;

struct PtqConfig {
    int weight_bits = 4;
    int act_bits = 8;
    int iterations = 1000;
    int fake_quant_tail = 175;
    double lambda_dist = 5e-2;
    double lr0 = 1e-3;
    int warmup = 50;
    double drop_prob = 0.5;
    int calib_batches = 4;
    std::size_t calib_batch_size = 64;
    int recalibration_interval = 500;
    DistanceNorm distance_norm = DistanceNorm::squared;
    std::uint64_t seed = 0;
    PtqMethod method = PtqMethod::hdrq;

    // Iteration budget as a fraction of the full 20000/3500 schedule; warmup is 5%.
    static PtqConfig scaled(double scale) {
        PtqConfig c;
        c.iterations = static_cast<int>(std::lround(kFullIterations * scale));
        c.fake_quant_tail = static_cast<int>(std::lround(kFullFakeQuantTail * scale));
        c.warmup = c.iterations / 20;
        return c;
    }

    bool quantize_activations() const { return act_bits <= kMaxActBits; }

    void validate() const {
        QuantScheme{weight_bits, 1.0, QuantTarget::weight}.validate();
        if (quantize_activations()) QuantScheme{act_bits, 1.0, QuantTarget::activation}.validate();
        if (iterations <= 0) throw ValidationError("ptq: iterations must be positive");
        if (!(fake_quant_tail > 0 && fake_quant_tail < iterations))
            throw ValidationError("ptq: need 0 < fake_quant_tail < iterations");
        if (!(drop_prob >= 0.0 && drop_prob <= 1.0)) throw ValidationError("ptq: drop_prob must be in [0,1]");
        if (!(lambda_dist >= 0.0)) throw ValidationError("ptq: lambda_dist must be non-negative");
        if (!(lr0 > 0.0)) throw ValidationError("ptq: lr0 must be positive");
        if (warmup < 0 || warmup >= iterations) throw ValidationError("ptq: need 0 <= warmup < iterations");
        if (calib_batches <= 0 || calib_batch_size == 0) throw ValidationError("ptq: empty calibration stream");
        if (recalibration_interval <= 0) throw ValidationError("ptq: recalibration_interval must be positive");
    }

    // Knobs that the method actually uses.
    double effective_lambda() const { return method == PtqMethod::hdrq ? lambda_dist : 0.0; }
    double effective_drop() const { return method == PtqMethod::recon_only ? 0.0 : drop_prob; }
    int noise_iterations() const { return method == PtqMethod::hdrq ? iterations - fake_quant_tail : 0; }
};

enum class PtqPhase : std::uint8_t { noise, fake_quant };

inline std::string_view to_string(PtqPhase p) { return p == PtqPhase::noise ? "noise" : "fake_quant"; }

struct TracePoint {
    double loss = 0.0; // task loss of the perturbed net plus distance penalty
    double lr = 0.0;
    PtqPhase phase = PtqPhase::noise;
};

struct PtqResult {
    QuantizedCheckpoint quantized;
    std::vector<TracePoint> loss_trace;
    double distance_to_source = 0.0; // l2 norm over all parameters, dequantized vs source
    double final_loss = 0.0;         // quantized model on the concatenated calibration data
};

// Squared l2 distance summed over every weight and bias tensor.
inline double distance_penalty(const Network& net, const Network& source) {
    require_same_architecture(net, source, "distance_penalty");
    double acc = 0.0;
    for (std::size_t k = 0; k < net.layers.size(); ++k) {
        const auto& a = net.layers[k];
        const auto& b = source.layers[k];
        for (std::size_t i = 0; i < a.weight.size(); ++i) acc += (a.weight[i] - b.weight[i]) * (a.weight[i] - b.weight[i]);
        for (std::size_t i = 0; i < a.bias.size(); ++i) acc += (a.bias[i] - b.bias[i]) * (a.bias[i] - b.bias[i]);
    }
    return acc;
}

inline Batch concat_batches(std::span<const Batch> batches) {
    if (batches.empty()) throw ValidationError("concat_batches: no batches");
    const std::size_t d = batches.front().inputs.dim(1);
    std::vector<double> x;
    std::vector<int> y;
    for (const auto& b : batches) {
        if (b.inputs.dim(1) != d) throw DimensionError("concat_batches: feature dims differ");
        x.insert(x.end(), b.inputs.data().begin(), b.inputs.data().end());
        y.insert(y.end(), b.labels.begin(), b.labels.end());
    }
    const std::size_t n = y.size();
    return {Tensor({n, d}, std::move(x)), std::move(y)};
}

// Draws `count` batches of `batch_size` rows (with replacement) from `pool`.
inline std::vector<Batch> make_calibration_batches(const Batch& pool, int count, std::size_t batch_size, Rng& rng) {
    if (count <= 0 || batch_size == 0) throw ValidationError("make_calibration_batches: empty request");
    const std::size_t d = pool.inputs.dim(1);
    std::vector<Batch> out;
    for (int b = 0; b < count; ++b) {
        Tensor x({batch_size, d});
        std::vector<int> y(batch_size);
        for (std::size_t r = 0; r < batch_size; ++r) {
            const auto src = static_cast<std::size_t>(rng.below(pool.size()));
            for (std::size_t j = 0; j < d; ++j) x.at(r, j) = pool.inputs.at(src, j);
            y[r] = pool.labels[src];
        }
        out.push_back({std::move(x), std::move(y)});
    }
    return out;
}

// Max-|value| activation schemes for every hidden layer input; the data input stays
// in full precision.
inline ActQuantPlan calibrate_activations(const Network& net, std::span<const Batch> calib, int bits) {
    std::vector<double> max_abs(net.layers.size(), 0.0);
    for (const auto& b : calib) {
        Tensor x = b.inputs;
        for (std::size_t k = 0; k < net.layers.size(); ++k) {
            if (k > 0)
                for (double v : x.data()) max_abs[k] = std::max(max_abs[k], std::abs(v));
            x = detail::affine(x, net.layers[k]);
            detail::apply_activation(x, net.layers[k].activation);
        }
    }
    ActQuantPlan plan(net.layers.size());
    for (std::size_t k = 1; k < net.layers.size(); ++k) plan[k] = calibrate_activation_max(max_abs[k], bits);
    return plan;
}

namespace detail {

inline std::vector<QuantScheme> calibrate_weight_schemes(const Network& net, int bits) {
    std::vector<QuantScheme> s;
    for (const auto& l : net.layers) s.push_back(calibrate_step(l.weight, bits).scheme);
    return s;
}

} // namespace detail

// Layer-wise post-training reconstruction of `net` (adapted weights) towards a
// quantized model, regularised towards `source`.
//
// Every iteration updates all layers jointly on the task loss of the perturbed
// net. During the noise phase each weight is replaced by w + U[-step/2, step/2];
// during the last `fake_quant_tail` iterations (all iterations for the baselines)
// by its fake-quantized value with straight-through gradients. Each hidden
// activation is quantized unless a per-layer coin with probability `drop_prob`
// keeps it in full precision. Weight steps are re-calibrated from the current
// weights every `recalibration_interval` iterations.
inline PtqResult reconstruct(const Network& net, const Network& source, std::span<const Batch> calib,
                             const PtqConfig& cfg) {
    cfg.validate();
    net.validate();
    require_same_architecture(net, source, "reconstruct");
    if (calib.empty()) throw ValidationError("reconstruct: empty calibration stream");
    for (const auto& b : calib) b.validate(net.out_dim());

    Rng rng(derive_seed(cfg.seed, "hdrq.reconstruct"));
    const std::size_t L = net.layers.size();
    const ActQuantPlan act_schemes =
        cfg.quantize_activations() ? calibrate_activations(net, calib, cfg.act_bits) : ActQuantPlan{};
    const double lambda = cfg.effective_lambda();
    const double drop = cfg.effective_drop();
    const int noise_iters = cfg.noise_iterations();

    Network master = net;
    ParamSet params = params_of(master);
    const ParamSet source_params = params_of(source);
    OptimState opt = OptimState::for_params(params);
    std::vector<QuantScheme> schemes;

    PtqResult result;
    result.loss_trace.reserve(static_cast<std::size_t>(cfg.iterations));

    for (int t = 0; t < cfg.iterations; ++t) {
        if (t % cfg.recalibration_interval == 0) schemes = detail::calibrate_weight_schemes(master, cfg.weight_bits);
        const PtqPhase phase = t < noise_iters ? PtqPhase::noise : PtqPhase::fake_quant;

        Network eff = master;
        for (std::size_t k = 0; k < L; ++k) {
            auto w = eff.layers[k].weight.data();
            if (phase == PtqPhase::noise) {
                for (double& v : w) v += (rng.uniform01() - 0.5) * schemes[k].step;
            } else {
                for (double& v : w) v = fake_quant_scalar(v, schemes[k]);
            }
        }

        ActQuantPlan plan;
        if (!act_schemes.empty()) {
            plan = act_schemes;
            for (std::size_t k = 1; k < L; ++k)
                if (drop > 0.0 && rng.uniform01() < drop) plan[k].reset();
        }

        const Batch& batch = calib[static_cast<std::size_t>(t) % calib.size()];
        LossAndGrad lg = loss_and_grad(eff, batch, plan);

        if (phase == PtqPhase::fake_quant) {
            for (std::size_t k = 0; k < L; ++k) {
                auto g = lg.grads[2 * k].data();
                auto w = master.layers[k].weight.data();
                for (std::size_t i = 0; i < g.size(); ++i)
                    if (!ste_passes(w[i], schemes[k])) g[i] = 0.0;
            }
        }

        double penalty = 0.0;
        if (lambda > 0.0) {
            double sq = 0.0;
            for (std::size_t p = 0; p < params.size(); ++p)
                for (std::size_t i = 0; i < params[p].size(); ++i) {
                    const double d = params[p][i] - source_params[p][i];
                    sq += d * d;
                }
            const double norm = std::sqrt(sq);
            penalty = cfg.distance_norm == DistanceNorm::squared ? lambda * sq : lambda * norm;
            const double coeff = cfg.distance_norm == DistanceNorm::squared ? 2.0 * lambda
                                 : norm > 0.0                                ? lambda / norm
                                                                             : 0.0;
            for (std::size_t p = 0; p < params.size(); ++p)
                for (std::size_t i = 0; i < params[p].size(); ++i)
                    lg.grads[p][i] += coeff * (params[p][i] - source_params[p][i]);
        }

        const double lr = lr_schedule(t, cfg.iterations, cfg.warmup, cfg.lr0);
        result.loss_trace.push_back({lg.loss + penalty, lr, phase});
        adam_step(params, lg.grads, opt, lr);
        assign_params(master, params);
    }

    for (std::size_t k = 0; k < L; ++k) {
        const auto& l = master.layers[k];
        std::optional<QuantScheme> act;
        if (!act_schemes.empty()) act = act_schemes[k];
        result.quantized.layers.push_back({quantize_uniform(l.weight, schemes[k]), l.bias, l.activation, act});
    }
    const Network deq = dequantize(result.quantized);
    result.distance_to_source = std::sqrt(distance_penalty(deq, source));
    result.final_loss = quantized_loss(result.quantized, concat_batches(calib));
    return result;
}

inline void write_trace_csv(std::ostream& os, const std::vector<TracePoint>& trace) {
    os << "iter,loss,lr,phase\n";
    char buf[128];
    for (std::size_t t = 0; t < trace.size(); ++t) {
        std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,", t, trace[t].loss, trace[t].lr);
        os << buf << to_string(trace[t].phase) << '\n';
    }
}

struct NoiseGap {
    double gap = 0.0;
    double std_error = 0.0;
};

// Monte-Carlo estimate of E[L(w + eps)] - L(w), eps_i ~ U[-step_i/2, step_i/2].
// With `antithetic`, each draw is paired with -eps, which leaves the expectation
// unchanged and removes the first-order term from every sample.
template <class LossFn>
NoiseGap noise_loss_gap(std::span<const double> w, std::span<const double> steps, LossFn&& loss, int n_samples,
                        Rng& rng, bool antithetic = false) {
    if (steps.size() != w.size()) throw DimensionError("noise_loss_gap: one step per coordinate required");
    if (n_samples < 100) throw ValidationError("noise_loss_gap: need at least 100 samples");
    const double base = loss(w);
    std::vector<double> plus(w.size()), minus(w.size());
    double mean = 0.0, m2 = 0.0;
    for (int s = 0; s < n_samples; ++s) {
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double e = (rng.uniform01() - 0.5) * steps[i];
            plus[i] = w[i] + e;
            minus[i] = w[i] - e;
        }
        double d = loss(std::span<const double>(plus)) - base;
        if (antithetic) d = 0.5 * (d + loss(std::span<const double>(minus)) - base);
        const double delta = d - mean;
        mean += delta / (s + 1);
        m2 += delta * (d - mean);
    }
    const double var = n_samples > 1 ? m2 / (n_samples - 1) : 0.0;
    return {mean, std::sqrt(var / n_samples)};
}

// Weight-noise gap on a network: layer k's weights get noise at schemes[k].step;
// biases are left untouched.
inline NoiseGap noise_loss_gap(const Network& net, std::span<const QuantScheme> schemes, const Batch& batch,
                               int n_samples, Rng& rng, bool antithetic = false) {
    if (schemes.size() != net.layers.size()) throw DimensionError("noise_loss_gap: one scheme per layer required");
    std::vector<double> steps;
    for (std::size_t k = 0; k < net.layers.size(); ++k) {
        steps.insert(steps.end(), net.layers[k].weight.size(), schemes[k].step);
        steps.insert(steps.end(), net.layers[k].bias.size(), 0.0);
    }
    const auto flat = flatten(net);
    return noise_loss_gap(
        std::span<const double>(flat), std::span<const double>(steps),
        [&](std::span<const double> p) { return batch_loss(unflatten(net, p), batch); }, n_samples, rng, antithetic);
}

} // namespace mergeq
