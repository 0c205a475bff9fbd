#include <catch_amalgamated.hpp>

#include <cmath>

#include "mergeq/pipeline.hpp"

using namespace mergeq;

namespace {

ExperimentConfig default_config(std::uint64_t seed = 1) {
    auto c = parse_config("[data]\n");
    c.data.master_seed = seed;
    return c;
}

} // namespace

TEST_CASE("source training reaches the separable-task accuracy") {
    const auto c = default_config();
    const auto src = train_source(c);
    const auto data = load_domain(c.data, 0);
    CHECK(accuracy(src.net, data.test) > 0.95);
    CHECK(src.epochs_run <= c.train.epochs);
    const auto again = train_source(c);
    CHECK(serialize(to_checkpoint_file(src.net)) == serialize(to_checkpoint_file(again.net)));
}

TEST_CASE("adaptation to a rotated target") {
    const auto c = default_config();
    const auto src = train_source(c);
    const auto tgt = load_domain(c.data, 1);
    const auto ad = adapt_to_target(src.net, c, 1);
    CHECK(accuracy(ad.net, tgt.test) > 0.90);
    CHECK(accuracy(ad.net, tgt.test) > accuracy(src.net, tgt.test));

    const auto other = adapt_to_target(src.net, c, 1, 999);
    CHECK(flatten(other.net) != flatten(ad.net));
    CHECK_NOTHROW(to_network(deserialize(serialize(to_checkpoint_file(other.net)))));
}

TEST_CASE("adapting to an unshifted target stays near the source") {
    auto c = default_config();
    c.data.target_rotations = {0.0, 40.0};
    const auto src = train_source(c);
    const auto same = adapt_to_target(src.net, c, 1);
    const auto shifted = adapt_to_target(src.net, c, 2);
    const auto tgt = load_domain(c.data, 1);
    double norm = 0.0;
    for (double x : flatten(src.net)) norm += x * x;
    norm = std::sqrt(norm);
    const double d_same = std::sqrt(distance_penalty(same.net, src.net));
    CHECK(d_same < std::sqrt(distance_penalty(shifted.net, src.net)));
    CHECK(d_same < 0.1 * norm);
    CHECK(std::abs(accuracy(same.net, tgt.test) - accuracy(src.net, tgt.test)) < 0.02);
}

TEST_CASE("8-bit quantization is nearly lossless") {
    const auto c = default_config();
    const auto src = train_source(c);
    for (std::size_t id : {1u, 2u}) {
        const auto ad = adapt_to_target(src.net, c, id);
        auto p = c.ptq.ptq;
        p.weight_bits = 8;
        const auto q = quantize_for_target(ad.net, src.net, c, p, id);
        const auto tgt = load_domain(c.data, id);
        CHECK(std::abs(quantized_accuracy(q.quantized, tgt.test) - accuracy(ad.net, tgt.test)) <= 0.01);
    }
}

TEST_CASE("merge strategies on pipeline checkpoints") {
    auto c = default_config(4);
    c.ptq.ptq = PtqConfig::scaled(0.02);
    const auto run = run_pipeline(c);
    REQUIRE(run.quantized.size() == 2);
    CHECK(run.merge.per_domain_metric.size() == 2);
    CHECK(run.merge.harmonic_mean > 0.5);
    CHECK(run.merge.harmonic_mean <= 0.5 * (run.merge.per_domain_metric.at("target1") +
                                            run.merge.per_domain_metric.at("target2")) + 1e-15);

    const std::vector<QuantizedCheckpoint> qs{run.quantized[0].quantized, run.quantized[1].quantized};
    for (auto s : {MergeStrategy::fp_midpoint, MergeStrategy::int_naive, MergeStrategy::noise_sampled}) {
        MergeConfig mc;
        mc.strategy = s;
        mc.n_candidates = 5;
        auto rep = merge_checkpoints(qs, mc, 11);
        fill_metrics(rep, run.targets, run.target_ids);
        CHECK(rep.strategy == s);
        CHECK(rep.harmonic_mean > 0.5);
        CHECK_NOTHROW(deserialize(serialize(merged_checkpoint_file(rep))));
    }

    // Merging a model with itself keeps its accuracy.
    const std::vector<QuantizedCheckpoint> twice{qs[0], qs[0]};
    for (auto s : {MergeStrategy::fp_midpoint, MergeStrategy::int_naive, MergeStrategy::noise_sampled}) {
        MergeConfig mc;
        mc.strategy = s;
        auto rep = merge_checkpoints(twice, mc, 5);
        fill_metrics(rep, run.targets, run.target_ids);
        CHECK(rep.per_domain_metric.at("target1") == quantized_accuracy(qs[0], run.targets[0].test));
        CHECK(rep.per_domain_metric.at("target2") == quantized_accuracy(qs[0], run.targets[1].test));
    }
}

TEST_CASE("three targets merge into one model with three metrics") {
    auto c = default_config(2);
    c.data.target_rotations = {30.0, -30.0, 60.0};
    c.ptq.ptq = PtqConfig::scaled(0.01);
    const auto run = run_pipeline(c);
    CHECK(run.merge.per_domain_metric.size() == 3);
    CHECK(run.merge.all_scores.size() == c.merge.n_candidates + 1);
}

TEST_CASE("pipeline is bit-reproducible") {
    auto c = default_config(9);
    c.ptq.ptq = PtqConfig::scaled(0.01);
    const auto a = run_pipeline(c, 1), b = run_pipeline(c, 3);
    CHECK(a.source_hash == b.source_hash);
    for (std::size_t i = 0; i < a.quantized.size(); ++i)
        CHECK(serialize(to_checkpoint_file(a.quantized[i].quantized)) ==
              serialize(to_checkpoint_file(b.quantized[i].quantized)));
    CHECK(a.merge.all_scores == b.merge.all_scores);
    CHECK(a.merge.chosen.ints == b.merge.chosen.ints);
}

TEST_CASE("domain lookups") {
    const auto c = default_config();
    CHECK(domain_spec(c.data, 0).rotation_deg == 0.0);
    CHECK(domain_spec(c.data, 2).rotation_deg == -40.0);
    CHECK_THROWS_AS(domain_spec(c.data, 3), RangeError);
    CHECK(domain_name(0) == "source");
    CHECK(domain_name(2) == "target2");
    CHECK(domain_spec(c.data, 1).seed != domain_spec(c.data, 2).seed);
}
