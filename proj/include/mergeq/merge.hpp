#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <tuple>
#include <vector>

#include "errors.hpp"
#include "nnet.hpp"
#include "qmodel.hpp"
#include "quant.hpp"
#include "rng.hpp"

namespace mergeq {

enum class MergeStrategy : std::uint8_t { fp_midpoint, int_naive, noise_sampled };

inline std::string_view to_string(MergeStrategy s) {
    switch (s) {
    case MergeStrategy::fp_midpoint: return "fp_midpoint";
    case MergeStrategy::int_naive: return "int_naive";
    case MergeStrategy::noise_sampled: return "noise_sampled";
    }
    return "?";
}

inline MergeStrategy parse_merge_strategy(std::string_view s) {
    if (s == "fp_midpoint") return MergeStrategy::fp_midpoint;
    if (s == "int_naive") return MergeStrategy::int_naive;
    if (s == "noise_sampled") return MergeStrategy::noise_sampled;
    throw ValidationError("unknown merge strategy '" + std::string(s) + "'");
}

// symmetric: average of the cosines seen from each target; one_sided: first target only.
enum class CosineMode : std::uint8_t { symmetric, one_sided };

struct MergeCandidate {
    Network weights;          // dequantized merged model
    QuantizedCheckpoint ints; // merged integers under the merged schemes
    double score = 0.0;
    std::size_t index = 0;   // 0 is the deterministic (noise-free) merge
    std::uint64_t seed = 0;  // noise stream seed; 0 for index 0
};

struct MergeReport {
    MergeStrategy strategy = MergeStrategy::noise_sampled;
    MergeCandidate chosen;
    std::vector<double> all_scores;
    std::map<std::string, double> per_domain_metric;
    double harmonic_mean = 0.0;
};

// Round to nearest, ties to even.
inline double round_half_even(double x) {
    if (std::abs(x - std::trunc(x)) == 0.5) return 2.0 * std::round(x / 2.0);
    return std::round(x);
}

inline double harmonic_mean(std::span<const double> values) {
    if (values.empty()) throw ValidationError("harmonic_mean: no values");
    double inv = 0.0;
    for (double v : values) {
        if (!(v > 0.0)) throw RangeError("harmonic_mean: values must be positive, got " + std::to_string(v));
        inv += 1.0 / v;
    }
    return static_cast<double>(values.size()) / inv;
}

inline Network merge_fp_mean(std::span<const Network> nets) {
    if (nets.empty()) throw ValidationError("merge: no models");
    for (const auto& n : nets) require_same_architecture(nets.front(), n, "merge");
    Network out = nets.front();
    const double k = static_cast<double>(nets.size());
    for (std::size_t l = 0; l < out.layers.size(); ++l) {
        for (std::size_t i = 0; i < out.layers[l].weight.size(); ++i) {
            double s = 0.0;
            for (const auto& n : nets) s += n.layers[l].weight[i];
            out.layers[l].weight[i] = s / k;
        }
        for (std::size_t i = 0; i < out.layers[l].bias.size(); ++i) {
            double s = 0.0;
            for (const auto& n : nets) s += n.layers[l].bias[i];
            out.layers[l].bias[i] = s / k;
        }
    }
    return out;
}

inline Network merge_fp_midpoint(const Network& a, const Network& b) {
    require_same_architecture(a, b, "merge_fp_midpoint");
    Network out = a;
    for (std::size_t l = 0; l < out.layers.size(); ++l) {
        for (std::size_t i = 0; i < out.layers[l].weight.size(); ++i)
            out.layers[l].weight[i] = 0.5 * (a.layers[l].weight[i] + b.layers[l].weight[i]);
        for (std::size_t i = 0; i < out.layers[l].bias.size(); ++i)
            out.layers[l].bias[i] = 0.5 * (a.layers[l].bias[i] + b.layers[l].bias[i]);
    }
    return out;
}

namespace detail {

inline double norm(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

// cos between (from - m) and (from - to); 0 when either vector vanishes.
inline double cosine_towards(std::span<const double> m, std::span<const double> from, std::span<const double> to) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < m.size(); ++i) {
        const double a = from[i] - m[i];
        const double b = from[i] - to[i];
        dot += a * b;
        na += a * a;
        nb += b * b;
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

inline void require_compatible(std::span<const QuantizedCheckpoint> qs) {
    if (qs.size() < 2) throw ValidationError("merge: need at least two checkpoints");
    for (const auto& q : qs) {
        q.validate();
        if (q.layers.size() != qs.front().layers.size()) throw DimensionError("merge: layer counts differ");
        for (std::size_t l = 0; l < q.layers.size(); ++l) {
            const auto& a = q.layers[l];
            const auto& b = qs.front().layers[l];
            if (a.weight.shape != b.weight.shape || a.bias.shape() != b.bias.shape() || a.activation != b.activation)
                throw DimensionError("merge: shapes differ at layer " + std::to_string(l));
            if (a.weight.scheme.bits != b.weight.scheme.bits)
                throw DimensionError("merge: weight bit widths differ at layer " + std::to_string(l));
            if (a.act_in.has_value() != b.act_in.has_value() || (a.act_in && a.act_in->bits != b.act_in->bits))
                throw DimensionError("merge: activation quantizers differ at layer " + std::to_string(l));
        }
    }
}

} // namespace detail

// Cosine criterion over flattened parameters. For two targets the symmetric score is
// 0.5 * [cos(t1 - m, t1 - t2) + cos(t2 - m, t2 - t1)]; with K targets each target is
// compared against the centroid of the others.
inline double cosine_score(std::span<const double> m, std::span<const std::vector<double>> targets,
                           CosineMode mode = CosineMode::symmetric) {
    if (targets.size() < 2) throw ValidationError("cosine_score: need at least two targets");
    for (const auto& t : targets)
        if (t.size() != m.size()) throw DimensionError("cosine_score: parameter vector lengths differ");
    const std::size_t K = targets.size();
    const std::size_t terms = mode == CosineMode::symmetric ? K : 1;
    double acc = 0.0;
    std::vector<double> others(m.size());
    for (std::size_t i = 0; i < terms; ++i) {
        if (K == 2) {
            acc += detail::cosine_towards(m, targets[i], targets[1 - i]);
            continue;
        }
        std::fill(others.begin(), others.end(), 0.0);
        for (std::size_t j = 0; j < K; ++j)
            if (j != i)
                for (std::size_t p = 0; p < m.size(); ++p) others[p] += targets[j][p];
        for (double& v : others) v /= static_cast<double>(K - 1);
        acc += detail::cosine_towards(m, targets[i], others);
    }
    return acc / static_cast<double>(terms);
}

inline double cosine_score(const Network& candidate, const Network& t1, const Network& t2,
                           CosineMode mode = CosineMode::symmetric) {
    require_same_architecture(candidate, t1, "cosine_score");
    require_same_architecture(candidate, t2, "cosine_score");
    const std::vector<std::vector<double>> targets{flatten(t1), flatten(t2)};
    const auto m = flatten(candidate);
    return cosine_score(std::span<const double>(m), std::span<const std::vector<double>>(targets), mode);
}

// Integer-domain merge of K checkpoints:
//   I = round((sum_i I_i * step_i + eps_i) / sum_i step_i), merged step = mean step_i.
// Without `rng` the noise is zero and ties round half-to-even. Biases and activation
// steps are averaged in floating point.
inline QuantizedCheckpoint merge_quantized(std::span<const QuantizedCheckpoint> qs, Rng* rng = nullptr) {
    detail::require_compatible(qs);
    const std::size_t K = qs.size();
    QuantizedCheckpoint out;
    out.source_hash = qs.front().source_hash;
    for (std::size_t l = 0; l < qs.front().layers.size(); ++l) {
        const auto& first = qs.front().layers[l];
        double step_sum = 0.0;
        for (const auto& q : qs) step_sum += q.layers[l].weight.scheme.step;
        QuantScheme merged{first.weight.scheme.bits, step_sum / static_cast<double>(K), QuantTarget::weight};

        // Per-model weights step_i / sum(step); equal steps give exactly 1/2 for two models.
        std::vector<std::pair<double, std::size_t>> order; // (weight, model), sorted so the sum is order independent
        for (std::size_t i = 0; i < K; ++i) order.emplace_back(qs[i].layers[l].weight.scheme.step / step_sum, i);

        QuantizedTensor ints{first.weight.shape, std::vector<std::int32_t>(first.weight.ints.size()), merged};
        std::vector<std::tuple<double, std::int32_t>> terms(K);
        for (std::size_t e = 0; e < ints.ints.size(); ++e) {
            double noise = 0.0;
            if (rng) {
                for (std::size_t i = 0; i < K; ++i)
                    noise += (rng->uniform01() - 0.5) * qs[i].layers[l].weight.scheme.step;
            }
            for (std::size_t i = 0; i < K; ++i) terms[i] = {order[i].first, qs[order[i].second].layers[l].weight.ints[e]};
            std::sort(terms.begin(), terms.end());
            double x = 0.0;
            for (const auto& [w, v] : terms) x += w * static_cast<double>(v);
            x += noise / step_sum;
            const double r = std::clamp(round_half_even(x), static_cast<double>(merged.qmin()),
                                        static_cast<double>(merged.qmax()));
            ints.ints[e] = static_cast<std::int32_t>(r);
        }

        Tensor bias = first.bias;
        for (std::size_t i = 0; i < bias.size(); ++i) {
            double s = 0.0;
            for (const auto& q : qs) s += q.layers[l].bias[i];
            bias[i] = s / static_cast<double>(K);
        }

        std::optional<QuantScheme> act;
        if (first.act_in) {
            double s = 0.0;
            for (const auto& q : qs) s += q.layers[l].act_in->step;
            act = QuantScheme{first.act_in->bits, s / static_cast<double>(K), QuantTarget::activation};
        }
        out.layers.push_back({std::move(ints), std::move(bias), first.activation, act});
    }
    return out;
}

namespace detail {

inline std::vector<std::vector<double>> flat_targets(std::span<const QuantizedCheckpoint> qs) {
    std::vector<std::vector<double>> t;
    for (const auto& q : qs) t.push_back(flatten(dequantize(q)));
    return t;
}

inline MergeCandidate make_candidate(QuantizedCheckpoint ints, const std::vector<std::vector<double>>& targets,
                                     CosineMode mode, std::size_t index, std::uint64_t seed) {
    MergeCandidate c;
    c.weights = dequantize(ints);
    c.ints = std::move(ints);
    const auto m = flatten(c.weights);
    c.score = cosine_score(std::span<const double>(m), std::span<const std::vector<double>>(targets), mode);
    c.index = index;
    c.seed = seed;
    return c;
}

} // namespace detail

// Noise stream seed of candidate `index` (>= 1) for a merge seeded with `seed`.
inline std::uint64_t candidate_seed(std::uint64_t seed, std::size_t index) {
    return derive_seed(seed, "merge.candidate", index);
}

inline MergeCandidate merge_int_naive(std::span<const QuantizedCheckpoint> qs,
                                      CosineMode mode = CosineMode::symmetric) {
    return detail::make_candidate(merge_quantized(qs), detail::flat_targets(qs), mode, 0, 0);
}

inline MergeCandidate merge_int_naive(const QuantizedCheckpoint& qa, const QuantizedCheckpoint& qb,
                                      CosineMode mode = CosineMode::symmetric) {
    const QuantizedCheckpoint qs[] = {qa, qb};
    return merge_int_naive(std::span<const QuantizedCheckpoint>(qs), mode);
}

// One noise-sampled candidate; index 0 is the noise-free merge.
inline MergeCandidate noise_candidate(std::span<const QuantizedCheckpoint> qs, std::uint64_t seed, std::size_t index,
                                      CosineMode mode = CosineMode::symmetric) {
    if (index == 0) return merge_int_naive(qs, mode);
    const std::uint64_t s = candidate_seed(seed, index);
    Rng rng(s);
    return detail::make_candidate(merge_quantized(qs, &rng), detail::flat_targets(qs), mode, index, s);
}

struct NoiseMergeOptions {
    std::size_t n_candidates = 30;
    std::uint64_t seed = 0;
    CosineMode mode = CosineMode::symmetric;
    unsigned jobs = 1;
};

// Scores the noise-free merge (candidate 0) and `n_candidates` noise-sampled merges,
// then keeps the best score. Ties go to the lowest index, so the result does not
// depend on `jobs`.
inline MergeReport merge_noise_sampled(std::span<const QuantizedCheckpoint> qs, const NoiseMergeOptions& opt) {
    if (opt.n_candidates < 1) throw ValidationError("merge_noise_sampled: need at least one candidate");
    detail::require_compatible(qs);
    const auto targets = detail::flat_targets(qs);
    const std::size_t total = opt.n_candidates + 1;
    std::vector<double> scores(total);

    auto work = [&](std::size_t begin, std::size_t stride) {
        for (std::size_t i = begin; i < total; i += stride) {
            if (i == 0) {
                scores[i] = detail::make_candidate(merge_quantized(qs), targets, opt.mode, 0, 0).score;
            } else {
                Rng rng(candidate_seed(opt.seed, i));
                scores[i] = detail::make_candidate(merge_quantized(qs, &rng), targets, opt.mode, i, 0).score;
            }
        }
    };
    const unsigned jobs = std::max(1u, std::min<unsigned>(opt.jobs, static_cast<unsigned>(total)));
    if (jobs == 1) {
        work(0, 1);
    } else {
        std::vector<std::jthread> pool;
        for (unsigned j = 0; j < jobs; ++j) pool.emplace_back(work, j, jobs);
    }

    std::size_t best = 0;
    for (std::size_t i = 1; i < total; ++i)
        if (scores[i] > scores[best]) best = i;

    MergeReport rep;
    rep.strategy = MergeStrategy::noise_sampled;
    rep.chosen = noise_candidate(qs, opt.seed, best, opt.mode);
    rep.all_scores = std::move(scores);
    return rep;
}

inline MergeReport merge_noise_sampled(const QuantizedCheckpoint& qa, const QuantizedCheckpoint& qb,
                                       const NoiseMergeOptions& opt) {
    const QuantizedCheckpoint qs[] = {qa, qb};
    return merge_noise_sampled(std::span<const QuantizedCheckpoint>(qs), opt);
}

} // namespace mergeq
