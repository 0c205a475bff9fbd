#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "errors.hpp"
#include "quant.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace mergeq {

enum class Activation : std::uint8_t { relu = 0, identity = 1 };

struct Layer {
    Tensor weight; // [out x in]
    Tensor bias;   // [out]
    Activation activation = Activation::identity;

    std::size_t in_dim() const { return weight.dim(1); }
    std::size_t out_dim() const { return weight.dim(0); }

    friend bool operator==(const Layer&, const Layer&) = default;
};

// Fully-connected feed-forward net. The last layer produces logits.
struct Network {
    std::vector<Layer> layers;

    std::size_t in_dim() const { return layers.front().in_dim(); }
    std::size_t out_dim() const { return layers.back().out_dim(); }

    std::size_t num_params() const {
        std::size_t n = 0;
        for (const auto& l : layers) n += l.weight.size() + l.bias.size();
        return n;
    }

    void validate() const {
        if (layers.empty()) throw DimensionError("network has no layers");
        for (std::size_t k = 0; k < layers.size(); ++k) {
            const auto& l = layers[k];
            if (l.weight.rank() != 2) throw DimensionError("layer " + std::to_string(k) + ": weight must be 2-D");
            if (l.bias.shape() != Shape{l.out_dim()})
                throw DimensionError("layer " + std::to_string(k) + ": bias shape " + shape_string(l.bias.shape()));
            if (k > 0 && layers[k - 1].out_dim() != l.in_dim())
                throw DimensionError("layer " + std::to_string(k) + ": input dim " + std::to_string(l.in_dim()) +
                                     " does not chain with previous output " + std::to_string(layers[k - 1].out_dim()));
        }
    }

    friend bool operator==(const Network&, const Network&) = default;
};

struct Batch {
    Tensor inputs; // [n x d]
    std::vector<int> labels;

    std::size_t size() const { return labels.size(); }

    void validate(std::size_t num_classes) const {
        if (inputs.rank() != 2) throw DimensionError("batch inputs must be 2-D");
        if (labels.empty() || labels.size() != inputs.dim(0))
            throw DimensionError("batch has " + std::to_string(labels.size()) + " labels for " +
                                 std::to_string(inputs.dim(0)) + " rows");
        for (int y : labels)
            if (y < 0 || static_cast<std::size_t>(y) >= num_classes)
                throw RangeError("label " + std::to_string(y) + " outside [0," + std::to_string(num_classes) + ")");
    }
};

// One optional activation quantizer per layer, applied to that layer's input.
// An empty plan means full precision everywhere.
using ActQuantPlan = std::vector<std::optional<QuantScheme>>;

// Parameter tensors in order weight0, bias0, weight1, bias1, ...
using ParamSet = std::vector<Tensor>;

inline void require_same_architecture(const Network& a, const Network& b, const char* what) {
    if (a.layers.size() != b.layers.size())
        throw DimensionError(std::string(what) + ": layer count " + std::to_string(a.layers.size()) + " vs " +
                             std::to_string(b.layers.size()));
    for (std::size_t k = 0; k < a.layers.size(); ++k) {
        if (a.layers[k].weight.shape() != b.layers[k].weight.shape() ||
            a.layers[k].bias.shape() != b.layers[k].bias.shape() ||
            a.layers[k].activation != b.layers[k].activation)
            throw DimensionError(std::string(what) + ": architecture differs at layer " + std::to_string(k));
    }
}

inline ParamSet params_of(const Network& net) {
    ParamSet p;
    p.reserve(2 * net.layers.size());
    for (const auto& l : net.layers) {
        p.push_back(l.weight);
        p.push_back(l.bias);
    }
    return p;
}

inline void assign_params(Network& net, const ParamSet& p) {
    if (p.size() != 2 * net.layers.size()) throw DimensionError("parameter set size does not match network");
    for (std::size_t k = 0; k < net.layers.size(); ++k) {
        require_same_shape(net.layers[k].weight, p[2 * k], "assign_params");
        require_same_shape(net.layers[k].bias, p[2 * k + 1], "assign_params");
        net.layers[k].weight = p[2 * k];
        net.layers[k].bias = p[2 * k + 1];
    }
}

inline std::vector<double> flatten(const Network& net) {
    std::vector<double> out;
    out.reserve(net.num_params());
    for (const auto& l : net.layers) {
        out.insert(out.end(), l.weight.data().begin(), l.weight.data().end());
        out.insert(out.end(), l.bias.data().begin(), l.bias.data().end());
    }
    return out;
}

inline std::vector<double> flatten(const ParamSet& p) {
    std::vector<double> out;
    for (const auto& t : p) out.insert(out.end(), t.data().begin(), t.data().end());
    return out;
}

// Copy of `like` with parameters replaced by `flat`.
inline Network unflatten(const Network& like, std::span<const double> flat) {
    if (flat.size() != like.num_params())
        throw DimensionError("flat parameter vector has " + std::to_string(flat.size()) + " entries, network has " +
                             std::to_string(like.num_params()));
    Network out = like;
    std::size_t pos = 0;
    for (auto& l : out.layers) {
        for (double& v : l.weight.data()) v = flat[pos++];
        for (double& v : l.bias.data()) v = flat[pos++];
    }
    return out;
}

// He-uniform weights, zero biases. Hidden layers use relu; the output layer is identity.
inline Network init_network(const std::vector<std::size_t>& dims, Rng& rng) {
    if (dims.size() < 2) throw DimensionError("init_network: need at least input and output dims");
    Network net;
    for (std::size_t k = 0; k + 1 < dims.size(); ++k) {
        const std::size_t in = dims[k], out = dims[k + 1];
        Layer l{Tensor({out, in}), Tensor({out}), k + 2 == dims.size() ? Activation::identity : Activation::relu};
        const double bound = std::sqrt(6.0 / static_cast<double>(in));
        for (double& v : l.weight.data()) v = rng.uniform(-bound, bound);
        net.layers.push_back(std::move(l));
    }
    return net;
}

namespace detail {

// y[n x out] = x[n x in] * W^T + b
inline Tensor affine(const Tensor& x, const Layer& l) {
    const std::size_t n = x.dim(0), in = l.in_dim(), out = l.out_dim();
    Tensor y({n, out});
    const double* w = l.weight.data().data();
    for (std::size_t r = 0; r < n; ++r) {
        const double* xr = x.data().data() + r * in;
        for (std::size_t o = 0; o < out; ++o) {
            double acc = l.bias[o];
            const double* wo = w + o * in;
            for (std::size_t i = 0; i < in; ++i) acc += wo[i] * xr[i];
            y.at(r, o) = acc;
        }
    }
    return y;
}

inline void apply_activation(Tensor& z, Activation a) {
    if (a == Activation::relu)
        for (double& v : z.data()) v = v > 0.0 ? v : 0.0;
}

inline const std::optional<QuantScheme>* plan_entry(const ActQuantPlan& plan, std::size_t k) {
    if (plan.empty()) return nullptr;
    if (k >= plan.size()) throw DimensionError("activation plan shorter than network");
    return plan[k].has_value() ? &plan[k] : nullptr;
}

inline void check_inputs(const Network& net, const Tensor& inputs) {
    net.validate();
    if (inputs.rank() != 2 || inputs.dim(1) != net.in_dim())
        throw DimensionError("forward: inputs " + shape_string(inputs.shape()) + " do not match network input dim " +
                             std::to_string(net.in_dim()));
}

} // namespace detail

inline Tensor forward(const Network& net, const Tensor& inputs, const ActQuantPlan& plan = {}) {
    detail::check_inputs(net, inputs);
    Tensor x = inputs;
    for (std::size_t k = 0; k < net.layers.size(); ++k) {
        if (const auto* q = detail::plan_entry(plan, k)) x = fake_quant(x, **q);
        Tensor z = detail::affine(x, net.layers[k]);
        detail::apply_activation(z, net.layers[k].activation);
        x = std::move(z);
    }
    return x;
}

// Mean softmax cross-entropy, log-sum-exp stabilised.
inline double cross_entropy(const Tensor& logits, std::span<const int> labels) {
    if (logits.rank() != 2 || logits.dim(0) != labels.size())
        throw DimensionError("cross_entropy: logits " + shape_string(logits.shape()) + " vs " +
                             std::to_string(labels.size()) + " labels");
    const std::size_t n = logits.dim(0), c = logits.dim(1);
    double total = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
        const int y = labels[r];
        if (y < 0 || static_cast<std::size_t>(y) >= c)
            throw RangeError("cross_entropy: label " + std::to_string(y) + " outside [0," + std::to_string(c) + ")");
        double m = logits.at(r, 0);
        for (std::size_t j = 1; j < c; ++j) m = std::max(m, logits.at(r, j));
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) s += std::exp(logits.at(r, j) - m);
        total += m + std::log(s) - logits.at(r, static_cast<std::size_t>(y));
    }
    return total / static_cast<double>(n);
}

inline double batch_loss(const Network& net, const Batch& batch, const ActQuantPlan& plan = {}) {
    return cross_entropy(forward(net, batch.inputs, plan), batch.labels);
}

inline double accuracy(const Network& net, const Batch& batch, const ActQuantPlan& plan = {}) {
    const Tensor logits = forward(net, batch.inputs, plan);
    const std::size_t n = logits.dim(0), c = logits.dim(1);
    std::size_t correct = 0;
    for (std::size_t r = 0; r < n; ++r) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < c; ++j)
            if (logits.at(r, j) > logits.at(r, best)) best = j;
        if (static_cast<int>(best) == batch.labels[r]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(n);
}

struct LossAndGrad {
    double loss = 0.0;
    ParamSet grads;
};

// Reverse-mode gradient of the mean cross-entropy. Quantized activations use the
// straight-through rule.
inline LossAndGrad loss_and_grad(const Network& net, const Batch& batch, const ActQuantPlan& plan = {}) {
    detail::check_inputs(net, batch.inputs);
    batch.validate(net.out_dim());
    const std::size_t L = net.layers.size();
    const std::size_t n = batch.size();

    // raw[k]: layer-k input before quantization; xs[k]: what the affine map sees.
    std::vector<Tensor> raw(L), xs(L), zs(L);
    Tensor x = batch.inputs;
    for (std::size_t k = 0; k < L; ++k) {
        raw[k] = x;
        if (const auto* q = detail::plan_entry(plan, k)) x = fake_quant(x, **q);
        xs[k] = x;
        zs[k] = detail::affine(x, net.layers[k]);
        x = zs[k];
        detail::apply_activation(x, net.layers[k].activation);
    }

    LossAndGrad out;
    out.loss = cross_entropy(x, batch.labels);

    const std::size_t c = x.dim(1);
    Tensor dz({n, c});
    for (std::size_t r = 0; r < n; ++r) {
        double m = x.at(r, 0);
        for (std::size_t j = 1; j < c; ++j) m = std::max(m, x.at(r, j));
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) s += std::exp(x.at(r, j) - m);
        for (std::size_t j = 0; j < c; ++j) {
            const double p = std::exp(x.at(r, j) - m) / s;
            dz.at(r, j) = (p - (static_cast<int>(j) == batch.labels[r] ? 1.0 : 0.0)) / static_cast<double>(n);
        }
    }

    out.grads.resize(2 * L);
    for (std::size_t kk = L; kk-- > 0;) {
        const Layer& l = net.layers[kk];
        const std::size_t in = l.in_dim(), o = l.out_dim();
        if (l.activation == Activation::relu)
            for (std::size_t i = 0; i < dz.size(); ++i)
                if (zs[kk][i] <= 0.0) dz[i] = 0.0;

        Tensor dw({o, in}), db({o});
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t j = 0; j < o; ++j) {
                const double g = dz.at(r, j);
                if (g == 0.0) continue;
                db[j] += g;
                for (std::size_t i = 0; i < in; ++i) dw.at(j, i) += g * xs[kk].at(r, i);
            }
        out.grads[2 * kk] = std::move(dw);
        out.grads[2 * kk + 1] = std::move(db);
        if (kk == 0) break;

        Tensor dx({n, in});
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t j = 0; j < o; ++j) {
                const double g = dz.at(r, j);
                if (g == 0.0) continue;
                for (std::size_t i = 0; i < in; ++i) dx.at(r, i) += g * l.weight.at(j, i);
            }
        if (const auto* q = detail::plan_entry(plan, kk)) dx = fake_quant_act_backward(raw[kk], **q, dx);
        dz = std::move(dx);
    }
    return out;
}

inline ParamSet grad(const Network& net, const Batch& batch, const ActQuantPlan& plan = {}) {
    return loss_and_grad(net, batch, plan).grads;
}

// Central differences of an arbitrary scalar function of a flat parameter vector.
template <class F>
std::vector<double> finite_diff_grad(std::span<const double> w, F&& f, double h) {
    if (!(h > 0.0)) throw ValidationError("finite_diff_grad: step h must be positive");
    std::vector<double> x(w.begin(), w.end()), g(w.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = x[i];
        x[i] = orig + h;
        const double fp = f(std::span<const double>(x));
        x[i] = orig - h;
        const double fm = f(std::span<const double>(x));
        x[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

inline ParamSet finite_diff_grad(const Network& net, const Batch& batch, double h, const ActQuantPlan& plan = {}) {
    const auto flat = flatten(net);
    const auto g = finite_diff_grad(std::span<const double>(flat),
                                    [&](std::span<const double> p) { return batch_loss(unflatten(net, p), batch, plan); }, h);
    return params_of(unflatten(net, g));
}

// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)
inline double max_relative_error(std::span<const double> a, std::span<const double> b, double floor = 1e-6) {
    if (a.size() != b.size()) throw DimensionError("max_relative_error: length mismatch");
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double denom = std::max({std::abs(a[i]), std::abs(b[i]), floor});
        worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
    }
    return worst;
}

} // namespace mergeq
