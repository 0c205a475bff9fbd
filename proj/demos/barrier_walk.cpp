// Loss along the straight line between two quantized target models, for the
// distance-regularized method and for plain reconstruction.
//
//   demo_barrier [master_seed] [weight_bits]

#include <cstdio>
#include <cstdlib>

#include "mergeq/pipeline.hpp"

using namespace mergeq;

int main(int argc, char** argv) {
    auto c = parse_config("[data]\n");
    if (argc > 1) c.data.master_seed = std::strtoull(argv[1], nullptr, 10);
    const int bits = argc > 2 ? std::atoi(argv[2]) : 4;

    const auto src = train_source(c);
    const std::vector<Dataset> tg{load_domain(c.data, 1), load_domain(c.data, 2)};
    const Batch joint = joint_test_batch(tg);
    const Network a1 = adapt_to_target(src.net, c, 1).net, a2 = adapt_to_target(src.net, c, 2).net;

    for (auto method : {PtqMethod::hdrq, PtqMethod::recon_only}) {
        PtqConfig p = c.ptq.ptq;
        p.method = method;
        p.weight_bits = bits;
        const auto q1 = quantize_for_target(a1, src.net, c, p, 1).quantized;
        const auto q2 = quantize_for_target(a2, src.net, c, p, 2).quantized;
        const auto r = error_barrier(dequantize(q1), dequantize(q2), joint, 11);
        std::printf("%s W%d: barrier %.4f\n  lambda", std::string(to_string(method)).c_str(), bits, r.barrier);
        for (double l : r.lambdas) std::printf(" %6.2f", l);
        std::printf("\n  loss  ");
        for (double l : r.losses) std::printf(" %6.3f", l);
        std::printf("\n");
    }
}
