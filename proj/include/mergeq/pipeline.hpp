#pragma once

// End-to-end stages shared by the command-line tool and the experiment suites:
// source training, per-target adaptation, post-training quantization and merging.
// Every stage draws its randomness from derive_seed(master_seed, stage, domain).

#include <algorithm>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "analysis.hpp"
#include "checkpoint.hpp"
#include "config.hpp"
#include "hdrq.hpp"
#include "merge.hpp"
#include "nnet.hpp"
#include "optim.hpp"
#include "qmodel.hpp"
#include "rng.hpp"
#include "synthdata.hpp"

namespace mergeq {

// Domain 0 is the source; domain k >= 1 is target_rotations[k - 1].
inline DomainSpec domain_spec(const DataConfig& d, std::size_t domain_id) {
    if (domain_id > d.target_rotations.size())
        throw RangeError("domain " + std::to_string(domain_id) + " not configured (have " +
                         std::to_string(d.target_rotations.size()) + " targets)");
    DomainSpec s;
    s.base_task = d.base_task;
    s.rotation_deg = domain_id == 0 ? d.source_rotation : d.target_rotations[domain_id - 1];
    s.noise_std = d.noise_std;
    s.n_train = d.n_train;
    s.n_test = d.n_test;
    s.seed = derive_seed(d.master_seed, "data", domain_id);
    return s;
}

inline Dataset load_domain(const DataConfig& d, std::size_t domain_id) { return make_domain(domain_spec(d, domain_id)); }

inline std::string domain_name(std::size_t domain_id) {
    return domain_id == 0 ? "source" : "target" + std::to_string(domain_id);
}

struct FitOptions {
    int epochs = 100;
    double lr = 1e-2;
    std::size_t batch_size = 64;
    int patience = 0; // 0 disables early stopping
    double min_delta = 1e-5;
};

struct FitResult {
    Network net;
    int epochs_run = 0;
    double final_train_loss = 0.0;
};

// Minibatch Adam at constant learning rate; stops once the epoch-mean train loss
// has not improved by min_delta for `patience` epochs.
inline FitResult fit(Network net, const Batch& train, const FitOptions& opt, Rng& rng) {
    train.validate(net.out_dim());
    ParamSet params = params_of(net);
    OptimState state = OptimState::for_params(params);
    const std::size_t n = train.size(), d = train.inputs.dim(1);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    double best = std::numeric_limits<double>::infinity();
    int stale = 0;
    FitResult out;
    for (int epoch = 0; epoch < opt.epochs; ++epoch) {
        for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
        double total = 0.0;
        for (std::size_t start = 0; start < n; start += opt.batch_size) {
            const std::size_t m = std::min(opt.batch_size, n - start);
            Batch b{Tensor({m, d}), std::vector<int>(m)};
            for (std::size_t r = 0; r < m; ++r) {
                const std::size_t src = order[start + r];
                for (std::size_t j = 0; j < d; ++j) b.inputs.at(r, j) = train.inputs.at(src, j);
                b.labels[r] = train.labels[src];
            }
            const auto lg = loss_and_grad(net, b);
            total += lg.loss * static_cast<double>(m);
            adam_step(params, lg.grads, state, opt.lr);
            assign_params(net, params);
        }
        out.epochs_run = epoch + 1;
        out.final_train_loss = total / static_cast<double>(n);
        if (opt.patience > 0) {
            if (out.final_train_loss < best - opt.min_delta) {
                best = out.final_train_loss;
                stale = 0;
            } else if (++stale >= opt.patience) {
                break;
            }
        }
    }
    out.net = std::move(net);
    return out;
}

inline std::vector<std::size_t> layer_dims(const ExperimentConfig& c) {
    std::vector<std::size_t> dims{2};
    dims.insert(dims.end(), c.train.hidden.begin(), c.train.hidden.end());
    dims.push_back(2);
    return dims;
}

inline FitResult train_source(const ExperimentConfig& c) {
    const Dataset src = load_domain(c.data, 0);
    Rng init_rng(derive_seed(c.data.master_seed, "init"));
    Rng rng(derive_seed(c.data.master_seed, "train"));
    return fit(init_network(layer_dims(c), init_rng), src.train,
               {c.train.epochs, c.train.lr, c.train.batch_size, c.train.patience, c.train.min_delta}, rng);
}

// Supervised fine-tuning of the source model on one target domain.
inline FitResult adapt_to_target(const Network& source, const ExperimentConfig& c, std::size_t target_id,
                                 std::uint64_t adapt_seed) {
    const Dataset tgt = load_domain(c.data, target_id);
    Rng rng(derive_seed(adapt_seed, "adapt", target_id));
    return fit(source, tgt.train, {c.train.adapt_epochs, c.train.adapt_lr, c.train.batch_size, 0, 0.0}, rng);
}

inline FitResult adapt_to_target(const Network& source, const ExperimentConfig& c, std::size_t target_id) {
    return adapt_to_target(source, c, target_id, c.data.master_seed);
}

inline std::vector<Batch> calibration_stream(const ExperimentConfig& c, const PtqConfig& p, std::size_t target_id) {
    const Dataset tgt = load_domain(c.data, target_id);
    Rng rng(derive_seed(c.data.master_seed, "calib", target_id));
    return make_calibration_batches(tgt.train, p.calib_batches, p.calib_batch_size, rng);
}

inline PtqResult quantize_for_target(const Network& adapted, const Network& source, const ExperimentConfig& c,
                                     PtqConfig p, std::size_t target_id) {
    p.seed = derive_seed(c.data.master_seed, "ptq", target_id);
    const auto calib = calibration_stream(c, p, target_id);
    return reconstruct(adapted, source, calib, p);
}

// Per-target test accuracy of a quantized model, plus their harmonic mean.
struct DomainMetrics {
    std::vector<double> accuracy;
    double harmonic_mean = 0.0;
};

inline DomainMetrics evaluate_targets(const QuantizedCheckpoint& q, const std::vector<Dataset>& targets) {
    DomainMetrics m;
    for (const auto& t : targets) m.accuracy.push_back(quantized_accuracy(q, t.test));
    // Accuracy is floored at one test sample so the harmonic mean stays defined.
    std::vector<double> clipped;
    for (std::size_t i = 0; i < targets.size(); ++i)
        clipped.push_back(std::max(m.accuracy[i], 1.0 / static_cast<double>(targets[i].test.size())));
    m.harmonic_mean = harmonic_mean(clipped);
    return m;
}

inline DomainMetrics evaluate_targets(const Network& net, const ActQuantPlan& plan,
                                      const std::vector<Dataset>& targets) {
    DomainMetrics m;
    std::vector<double> clipped;
    for (const auto& t : targets) {
        m.accuracy.push_back(accuracy(net, t.test, plan));
        clipped.push_back(std::max(m.accuracy.back(), 1.0 / static_cast<double>(t.test.size())));
    }
    m.harmonic_mean = harmonic_mean(clipped);
    return m;
}

// Metrics of the chosen candidate: its float weights under the merged activation quantizers.
inline void fill_metrics(MergeReport& rep, const std::vector<Dataset>& targets,
                         const std::vector<std::size_t>& target_ids) {
    const auto m = evaluate_targets(rep.chosen.weights, act_plan(rep.chosen.ints), targets);
    rep.per_domain_metric.clear();
    for (std::size_t i = 0; i < targets.size(); ++i) rep.per_domain_metric[domain_name(target_ids[i])] = m.accuracy[i];
    rep.harmonic_mean = m.harmonic_mean;
}

// Joint evaluation batch over several domains (test splits).
inline Batch joint_test_batch(const std::vector<Dataset>& domains) {
    std::vector<Batch> parts;
    for (const auto& d : domains) parts.push_back(d.test);
    return concat_batches(parts);
}

// fp_midpoint keeps the float mean of the dequantized models as `weights` and carries the
// naive integer merge in `ints` only for its activation quantizers.
inline MergeReport merge_checkpoints(std::span<const QuantizedCheckpoint> qs, const MergeConfig& mc,
                                     std::uint64_t seed, unsigned jobs = 1) {
    MergeReport rep;
    rep.strategy = mc.strategy;
    switch (mc.strategy) {
    case MergeStrategy::noise_sampled: {
        NoiseMergeOptions opt;
        opt.n_candidates = mc.n_candidates;
        opt.seed = seed;
        opt.mode = mc.cosine;
        opt.jobs = jobs;
        rep = merge_noise_sampled(qs, opt);
        break;
    }
    case MergeStrategy::int_naive:
        rep.chosen = merge_int_naive(qs, mc.cosine);
        rep.all_scores = {rep.chosen.score};
        break;
    case MergeStrategy::fp_midpoint: {
        std::vector<Network> nets;
        for (const auto& q : qs) nets.push_back(dequantize(q));
        rep.chosen = merge_int_naive(qs, mc.cosine);
        rep.chosen.weights = merge_fp_mean(nets);
        std::vector<std::vector<double>> targets;
        for (const auto& n : nets) targets.push_back(flatten(n));
        const auto m = flatten(rep.chosen.weights);
        rep.chosen.score = cosine_score(std::span<const double>(m), std::span<const std::vector<double>>(targets), mc.cosine);
        rep.all_scores = {rep.chosen.score};
        break;
    }
    }
    return rep;
}

inline CheckpointFile merged_checkpoint_file(const MergeReport& rep) {
    if (rep.strategy == MergeStrategy::fp_midpoint)
        return to_checkpoint_file(rep.chosen.weights, rep.chosen.ints.source_hash);
    return to_checkpoint_file(rep.chosen.ints);
}

inline std::vector<std::size_t> all_target_ids(const DataConfig& d) {
    std::vector<std::size_t> ids(d.target_rotations.size());
    std::iota(ids.begin(), ids.end(), std::size_t{1});
    return ids;
}

// Every artifact of one train -> adapt -> quantize -> merge run.
struct PipelineRun {
    FitResult source;
    std::uint64_t source_hash = 0;
    std::vector<std::size_t> target_ids;
    std::vector<Dataset> targets;
    std::vector<FitResult> adapted;
    std::vector<PtqResult> quantized;
    MergeReport merge;
};

inline PipelineRun run_pipeline(const ExperimentConfig& c, unsigned jobs = 1) {
    PipelineRun run;
    run.source = train_source(c);
    run.source_hash = content_hash(serialize(to_checkpoint_file(run.source.net)));
    run.target_ids = all_target_ids(c.data);
    std::vector<QuantizedCheckpoint> qs;
    for (std::size_t id : run.target_ids) {
        run.targets.push_back(load_domain(c.data, id));
        run.adapted.push_back(adapt_to_target(run.source.net, c, id));
        run.quantized.push_back(quantize_for_target(run.adapted.back().net, run.source.net, c, c.ptq.ptq, id));
        run.quantized.back().quantized.source_hash = run.source_hash;
        qs.push_back(run.quantized.back().quantized);
    }
    if (qs.size() >= 2) {
        run.merge = merge_checkpoints(qs, c.merge, derive_seed(c.data.master_seed, "merge"), jobs);
        fill_metrics(run.merge, run.targets, run.target_ids);
    }
    return run;
}

} // namespace mergeq
