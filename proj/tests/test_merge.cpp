#include <catch_amalgamated.hpp>

#include <cmath>

#include "mergeq/merge.hpp"

using namespace mergeq;
using Catch::Approx;

namespace {

// One-layer checkpoint holding the given integers under `step`.
QuantizedCheckpoint scalar_ckpt(std::vector<std::int32_t> ints, double step, int bits = 4) {
    const std::size_t n = ints.size();
    QuantizedCheckpoint q;
    q.layers.push_back({QuantizedTensor{{1, n}, std::move(ints), QuantScheme{bits, step, QuantTarget::weight}},
                        Tensor({1}), Activation::identity, std::nullopt});
    return q;
}

QuantizedCheckpoint random_ckpt(Rng& rng, double step, int bits = 4) {
    QuantizedCheckpoint q;
    const QuantScheme s{bits, step, QuantTarget::weight};
    for (auto [o, i] : {std::pair<std::size_t, std::size_t>{6, 2}, {2, 6}}) {
        QuantizedTensor t{{o, i}, std::vector<std::int32_t>(o * i), s};
        for (auto& v : t.ints) v = s.qmin() + static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(s.qmax() - s.qmin() + 1)));
        Tensor b({o});
        for (double& x : b.data()) x = rng.normal();
        q.layers.push_back({std::move(t), std::move(b), o == 6 ? Activation::relu : Activation::identity,
                            o == 6 ? std::nullopt : std::optional<QuantScheme>(QuantScheme{8, 0.05, QuantTarget::activation})});
    }
    return q;
}

Network scalar_net(double w) {
    Network n;
    n.layers.push_back({Tensor::matrix(1, 1, {w}), Tensor::vector({0.0}), Activation::identity});
    return n;
}

} // namespace

TEST_CASE("fp midpoint") {
    CHECK(merge_fp_midpoint(scalar_net(1), scalar_net(3)).layers[0].weight[0] == 2.0);
    Rng rng(1);
    const auto a = init_network({2, 4, 2}, rng), b = init_network({2, 4, 2}, rng);
    CHECK(flatten(merge_fp_midpoint(a, a)) == flatten(a));
    CHECK(flatten(merge_fp_midpoint(a, b)) == flatten(merge_fp_midpoint(b, a)));
    CHECK_THROWS_AS(merge_fp_midpoint(a, init_network({2, 3, 2}, rng)), DimensionError);
}

TEST_CASE("round half to even") {
    CHECK(round_half_even(3.5) == 4.0);
    CHECK(round_half_even(2.5) == 2.0);
    CHECK(round_half_even(-2.5) == -2.0);
    CHECK(round_half_even(3.333) == 3.0);
    CHECK(round_half_even(-0.6) == -1.0);
}

TEST_CASE("naive integer merge reference cases") {
    auto merged = [](std::int32_t i1, double d1, std::int32_t i2, double d2) {
        return merge_int_naive(scalar_ckpt({i1}, d1), scalar_ckpt({i2}, d2)).ints.layers[0].weight;
    };
    for (std::int32_t k = -8; k <= 7; ++k) CHECK(merged(k, 0.1, k, 0.1).ints[0] == k);
    CHECK(merged(3, 0.1, 4, 0.1).ints[0] == 4);
    CHECK(merged(2, 0.1, 4, 0.2).ints[0] == 3);
    CHECK(merged(2, 0.1, 4, 0.2).scheme.step == Approx(0.15));
    // (0.2 + 1.2) / 0.4 lands on 3.5 up to floating-point error.
    const auto q = merged(2, 0.1, 4, 0.3).ints[0];
    CHECK((q == 3 || q == 4));
}

TEST_CASE("naive merge is symmetric and stays in range") {
    Rng rng(4);
    for (int t = 0; t < 50; ++t) {
        const auto a = random_ckpt(rng, 0.1 + rng.uniform01()), b = random_ckpt(rng, 0.1 + rng.uniform01());
        const auto ab = merge_int_naive(a, b).ints, ba = merge_int_naive(b, a).ints;
        CHECK(ab == ba);
        CHECK_NOTHROW(ab.validate());
    }
}

TEST_CASE("merging rejects incompatible checkpoints") {
    CHECK_THROWS_AS(merge_int_naive(scalar_ckpt({1, 2}, 0.1), scalar_ckpt({1}, 0.1)), DimensionError);
    CHECK_THROWS_AS(merge_int_naive(scalar_ckpt({1}, 0.1, 4), scalar_ckpt({1}, 0.1, 3)), DimensionError);
}

TEST_CASE("noise breaks ties evenly") {
    const auto a = scalar_ckpt({3}, 0.1), b = scalar_ckpt({4}, 0.1);
    const std::vector<QuantizedCheckpoint> qs{a, b};
    int threes = 0;
    const int n = 10000;
    for (int i = 1; i <= n; ++i) {
        const auto v = noise_candidate(qs, 12345, static_cast<std::size_t>(i)).ints.layers[0].weight.ints[0];
        CHECK((v == 3 || v == 4));
        threes += v == 3;
    }
    CHECK(std::abs(threes / static_cast<double>(n) - 0.5) < 0.05);
}

TEST_CASE("tiny steps reproduce the quantized fp midpoint") {
    Rng rng(6);
    const double tiny = 1e-9;
    const auto a = random_ckpt(rng, tiny, 8), b = random_ckpt(rng, tiny, 8);
    const std::vector<QuantizedCheckpoint> qs{a, b};
    const auto mid = merge_fp_midpoint(dequantize(a), dequantize(b));
    for (std::size_t i = 1; i <= 20; ++i) {
        const auto c = noise_candidate(qs, 1, i);
        for (std::size_t l = 0; l < mid.layers.size(); ++l) {
            const auto ref = quantize_uniform(mid.layers[l].weight, c.ints.layers[l].weight.scheme);
            // Ties (odd sums) may go either way; everything else matches exactly.
            for (std::size_t e = 0; e < ref.ints.size(); ++e) {
                const auto s = a.layers[l].weight.ints[e] + b.layers[l].weight.ints[e];
                if (s % 2 == 0) CHECK(c.ints.layers[l].weight.ints[e] == ref.ints[e]);
                else CHECK(std::abs(c.ints.layers[l].weight.ints[e] * 2 - s) == 1);
            }
        }
    }
}

TEST_CASE("cosine score geometry") {
    const std::vector<std::vector<double>> t{{0.0, 0.0}, {2.0, 0.0}};
    auto score = [&](std::vector<double> m) {
        return cosine_score(std::span<const double>(m), std::span<const std::vector<double>>(t));
    };
    CHECK(score({1.0, 0.0}) == Approx(1.0));
    double prev = 1.0;
    for (double d : {0.1, 0.3, 0.7, 1.5, 4.0}) {
        // Independent evaluation: both cosines equal 1 / sqrt(1 + d^2).
        const double s = score({1.0, d});
        CHECK(s == Approx(1.0 / std::sqrt(1.0 + d * d)));
        CHECK(s < prev);
        prev = s;
    }
    const std::vector<std::vector<double>> same{{1.0, 1.0}, {1.0, 1.0}};
    const std::vector<double> m{0.5, 0.5};
    CHECK(cosine_score(std::span<const double>(m), std::span<const std::vector<double>>(same)) == 0.0);
    CHECK(cosine_score(scalar_net(1), scalar_net(0), scalar_net(2)) == Approx(1.0));
    CHECK(cosine_score(scalar_net(1), scalar_net(0), scalar_net(2), CosineMode::one_sided) == Approx(1.0));
}

TEST_CASE("noise-sampled merge picks the best score and includes the naive merge") {
    Rng rng(10);
    const auto a = random_ckpt(rng, 0.2), b = random_ckpt(rng, 0.25);
    NoiseMergeOptions opt;
    opt.seed = 77;
    const auto rep = merge_noise_sampled(a, b, opt);
    CHECK(rep.all_scores.size() == opt.n_candidates + 1);
    CHECK(rep.all_scores[0] == merge_int_naive(a, b).score);
    for (double s : rep.all_scores) {
        CHECK(rep.chosen.score >= s);
        CHECK(s >= -1.0);
        CHECK(s <= 1.0);
    }
    CHECK(rep.chosen.score == rep.all_scores[rep.chosen.index]);
    CHECK_NOTHROW(rep.chosen.ints.validate());

    opt.jobs = 4;
    const auto par = merge_noise_sampled(a, b, opt);
    CHECK(par.all_scores == rep.all_scores);
    CHECK(par.chosen.ints == rep.chosen.ints);
}

TEST_CASE("merging a checkpoint with itself returns it") {
    Rng rng(2);
    const auto a = random_ckpt(rng, 0.3);
    CHECK(merge_int_naive(a, a).ints == a);
    NoiseMergeOptions opt;
    const auto rep = merge_noise_sampled(a, a, opt);
    CHECK(dequantize(rep.chosen.ints).layers[0].weight == dequantize(a).layers[0].weight);
}

TEST_CASE("three-way merge uses the pooled formula") {
    const auto a = scalar_ckpt({1}, 0.1), b = scalar_ckpt({2}, 0.2), c = scalar_ckpt({6}, 0.3);
    const std::vector<QuantizedCheckpoint> qs{a, b, c};
    const auto m = merge_int_naive(std::span<const QuantizedCheckpoint>(qs));
    // (0.1 + 0.4 + 1.8) / 0.6 = 3.83
    CHECK(m.ints.layers[0].weight.ints[0] == 4);
    CHECK(m.ints.layers[0].weight.scheme.step == Approx(0.2));
    NoiseMergeOptions opt;
    opt.n_candidates = 5;
    CHECK(merge_noise_sampled(std::span<const QuantizedCheckpoint>(qs), opt).all_scores.size() == 6);
}

TEST_CASE("harmonic mean") {
    const std::vector<double> same{0.7, 0.7}, pair{1.0, 3.0}, three{60.0, 40.0, 80.0};
    CHECK(harmonic_mean(same) == Approx(0.7));
    CHECK(harmonic_mean(pair) == Approx(1.5));
    CHECK(harmonic_mean(three) == Approx(3.0 / (1.0 / 60 + 1.0 / 40 + 1.0 / 80)));
    CHECK(harmonic_mean(three) == Approx(55.3846).margin(1e-4));
    CHECK(harmonic_mean(three) <= 60.0);
    const std::vector<double> bad{1.0, 0.0};
    CHECK_THROWS_AS(harmonic_mean(bad), RangeError);
}

TEST_CASE("strategy names round trip") {
    for (auto s : {MergeStrategy::fp_midpoint, MergeStrategy::int_naive, MergeStrategy::noise_sampled})
        CHECK(parse_merge_strategy(to_string(s)) == s);
    CHECK_THROWS_AS(parse_merge_strategy("ties"), ValidationError);
}
