// Noise-sampled merging on one seeded two-target run: every candidate's cosine
// score next to the harmonic mean it would have achieved.
//
//   demo_merge_noise [master_seed]

#include <cstdio>
#include <cstdlib>

#include "mergeq/pipeline.hpp"

using namespace mergeq;

int main(int argc, char** argv) {
    auto c = parse_config("[data]\n");
    if (argc > 1) c.data.master_seed = std::strtoull(argv[1], nullptr, 10);

    const auto run = run_pipeline(c);
    std::vector<QuantizedCheckpoint> qs;
    for (const auto& r : run.quantized) qs.push_back(r.quantized);
    const std::span<const QuantizedCheckpoint> sq(qs);
    const auto seed = derive_seed(c.data.master_seed, "merge");

    std::printf("index  score        hmean\n");
    for (std::size_t i = 0; i < run.merge.all_scores.size(); ++i) {
        const auto cand = noise_candidate(sq, seed, i);
        std::printf("%5zu  %.9f  %.4f%s\n", i, cand.score, evaluate_targets(cand.ints, run.targets).harmonic_mean,
                    i == run.merge.chosen.index ? "  <- chosen" : "");
    }
    std::printf("merged: harmonic mean %.4f", run.merge.harmonic_mean);
    for (const auto& [k, v] : run.merge.per_domain_metric) std::printf(", %s %.4f", k.c_str(), v);
    std::printf("\n");
}
