#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "errors.hpp"
#include "nnet.hpp"
#include "quant.hpp"

namespace mergeq {

struct QuantizedLayer {
    QuantizedTensor weight;
    Tensor bias; // kept in full precision
    Activation activation = Activation::identity;
    std::optional<QuantScheme> act_in; // quantizer for this layer's input, if any

    friend bool operator==(const QuantizedLayer&, const QuantizedLayer&) = default;
};

// Integer weights with per-tensor schemes, tagged with the hash of the source
// checkpoint the model was adapted from.
struct QuantizedCheckpoint {
    std::vector<QuantizedLayer> layers;
    std::uint64_t source_hash = 0;

    int weight_bits() const { return layers.front().weight.scheme.bits; }

    void validate() const {
        if (layers.empty()) throw DimensionError("quantized checkpoint has no layers");
        for (const auto& l : layers) {
            l.weight.scheme.validate();
            if (l.weight.ints.size() != shape_numel(l.weight.shape))
                throw DimensionError("quantized tensor payload does not match its shape");
            for (auto v : l.weight.ints)
                if (v < l.weight.scheme.qmin() || v > l.weight.scheme.qmax())
                    throw RangeError("quantized value " + std::to_string(v) + " outside " +
                                     std::to_string(l.weight.scheme.bits) + "-bit range");
            if (l.act_in) l.act_in->validate();
        }
    }

    friend bool operator==(const QuantizedCheckpoint&, const QuantizedCheckpoint&) = default;
};

inline Network dequantize(const QuantizedCheckpoint& q) {
    Network net;
    for (const auto& l : q.layers) net.layers.push_back({dequantize(l.weight), l.bias, l.activation});
    net.validate();
    return net;
}

inline ActQuantPlan act_plan(const QuantizedCheckpoint& q) {
    ActQuantPlan plan;
    bool any = false;
    for (const auto& l : q.layers) {
        plan.push_back(l.act_in);
        any = any || l.act_in.has_value();
    }
    if (!any) plan.clear();
    return plan;
}

// Accuracy of the deployed model: integer weights, fake-quantized activations.
inline double quantized_accuracy(const QuantizedCheckpoint& q, const Batch& batch) {
    return accuracy(dequantize(q), batch, act_plan(q));
}

inline double quantized_loss(const QuantizedCheckpoint& q, const Batch& batch) {
    return batch_loss(dequantize(q), batch, act_plan(q));
}

} // namespace mergeq
