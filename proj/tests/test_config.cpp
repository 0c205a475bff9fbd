#include <catch_amalgamated.hpp>

#include <sstream>

#include "mergeq/config.hpp"

using namespace mergeq;

TEST_CASE("minimal config takes defaults and logs notices") {
    std::ostringstream notes;
    const auto c = parse_config("[data]\nmaster_seed = 7\n", &notes);
    CHECK(c.data.master_seed == 7);
    CHECK(c.data.target_rotations == std::vector<double>{40.0, -40.0});
    CHECK(c.ptq.ptq.iterations == 1000);
    CHECK(c.ptq.ptq.fake_quant_tail == 175);
    CHECK(c.ptq.ptq.lambda_dist == 5e-2);
    CHECK(c.merge.n_candidates == 30);
    CHECK(notes.str().find("[ptq] absent") != std::string::npos);
    CHECK(notes.str().find("defaults for:") != std::string::npos);
}

TEST_CASE("full config is parsed") {
    const auto c = parse_config(R"(
# experiment
[data]
base_task = two-moons
noise_std = 0.2          # per-coordinate
target_rotations = 30, -30, 90
master_seed = 3
[train]
hidden = 32, 16
epochs = 10
[ptq]
method = recon_only
weight_bits = 3
act_bits = 32
scale = 0.1
distance_norm = l2
[merge]
strategy = int_naive
cosine = one_sided
[analysis]
grid_n = 11
)");
    CHECK(c.data.base_task == BaseTask::two_moons);
    CHECK(c.data.noise_std == 0.2);
    CHECK(c.data.target_rotations.size() == 3);
    CHECK(c.train.hidden == std::vector<std::size_t>{32, 16});
    CHECK(c.ptq.ptq.method == PtqMethod::recon_only);
    CHECK(c.ptq.ptq.weight_bits == 3);
    CHECK_FALSE(c.ptq.ptq.quantize_activations());
    CHECK(c.ptq.ptq.iterations == 2000);
    CHECK(c.ptq.ptq.fake_quant_tail == 350);
    CHECK(c.ptq.ptq.warmup == 100);
    CHECK(c.ptq.ptq.distance_norm == DistanceNorm::l2);
    CHECK(c.merge.strategy == MergeStrategy::int_naive);
    CHECK(c.merge.cosine == CosineMode::one_sided);
    CHECK(c.analysis.grid_n == 11);
}

TEST_CASE("explicit iteration counts override the scale") {
    const auto c = parse_config("[data]\n[ptq]\nscale = 1\niterations = 400\nfake_quant_tail = 70\n");
    CHECK(c.ptq.ptq.iterations == 400);
    CHECK(c.ptq.ptq.fake_quant_tail == 70);
    CHECK(c.ptq.ptq.warmup == 20);
}

TEST_CASE("config errors name the problem") {
    using Catch::Matchers::ContainsSubstring;
    CHECK_THROWS_WITH(parse_config("[train]\nepochs = 3\n"), ContainsSubstring("[data]"));
    CHECK_THROWS_WITH(parse_config("[data]\nbogus = 1\n"), ContainsSubstring("unknown key 'bogus'"));
    CHECK_THROWS_WITH(parse_config("[data]\n[model]\n"), ContainsSubstring("unknown section [model]"));
    CHECK_THROWS_WITH(parse_config("[data]\nnoise_std = abc\n"), ContainsSubstring("cannot parse"));
    CHECK_THROWS_WITH(parse_config("[data]\nnoise_std = 0.1\nnoise_std = 0.2\n"), ContainsSubstring("duplicate"));
    CHECK_THROWS_WITH(parse_config("noise_std = 0.1\n"), ContainsSubstring("outside of any section"));
    CHECK_THROWS_AS(parse_config("[data]\nnoise_std = 3\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("[data]\n[ptq]\nweight_bits = 12\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("[data]\n[ptq]\nmethod = brecq\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("[data]\n[merge]\nstrategy = ties\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("[data]\n[ptq]\niterations = 100\nfake_quant_tail = 100\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("[data]\nkey without equals\n"), ConfigError);
}
