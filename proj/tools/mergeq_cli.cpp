// mergeq-cli: data generation, training, adaptation, quantization, merging and
// barrier/surface analysis over checkpoint files.
//
// Exit codes: 0 ok, 1 unexpected failure, 2 configuration or usage error,
// 3 data/shape/format error, 4 I/O error.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "mergeq/pipeline.hpp"

using namespace mergeq;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

enum Exit : int { kOk = 0, kFailure = 1, kConfig = 2, kData = 3, kIo = 4 };

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    unsigned jobs = 1;
};

void add_common(CLI::App* cmd, Common& c, bool out_required = true) {
    cmd->add_option("--config", c.config, "experiment config file")->required();
    cmd->add_option("--seed", c.seed, "override [data] master_seed");
    auto* o = cmd->add_option("--out", c.out, "output path");
    if (out_required) o->required();
    cmd->add_option("--jobs", c.jobs, "worker threads")->check(CLI::Range(1u, 256u));
}

ExperimentConfig load_config(const Common& c) {
    auto cfg = parse_config(read_file_bytes(c.config), &std::cerr);
    if (c.seed) cfg.data.master_seed = *c.seed;
    return cfg;
}

std::string hex(std::uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::string sidecar(const std::string& path, const char* suffix = ".json") { return path + suffix; }

void write_text(const fs::path& path, const std::string& text) { write_file_atomic(path, text); }

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

std::size_t parse_domain_id(const std::string& s, const DataConfig& d) {
    if (s == "source") return 0;
    std::size_t id = 0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), id);
    if (ec != std::errc{} || p != s.data() + s.size()) throw ConfigError("domain must be 'source', 'joint' or an index, got '" + s + "'");
    domain_spec(d, id); // range check
    return id;
}

// Evaluation batch for `domain`: a single domain's test split, or all targets joined.
Batch eval_batch(const std::string& domain, const DataConfig& d) {
    if (domain == "joint") {
        std::vector<Dataset> ds;
        for (auto id : all_target_ids(d)) ds.push_back(load_domain(d, id));
        return joint_test_batch(ds);
    }
    return load_domain(d, parse_domain_id(domain, d)).test;
}

struct Loaded {
    CheckpointFile file;
    std::uint64_t hash = 0; // content hash of the file bytes
};

Loaded load(const std::string& path) {
    const auto bytes = read_file_bytes(path);
    return {deserialize(bytes), content_hash(bytes)};
}

std::string trace_csv(const std::vector<TracePoint>& t) {
    std::ostringstream os;
    write_trace_csv(os, t);
    return os.str();
}

json metrics_json(const MergeReport& rep) {
    json j;
    j["strategy"] = std::string(to_string(rep.strategy));
    j["chosen_index"] = rep.chosen.index;
    j["chosen_score"] = rep.chosen.score;
    j["candidate_scores"] = rep.all_scores;
    j["per_domain_accuracy"] = rep.per_domain_metric;
    j["harmonic_mean"] = rep.harmonic_mean;
    j["source_hash"] = hex(rep.chosen.ints.source_hash);
    return j;
}

// `seed,score,hmean` per candidate; seed is the candidate's noise stream (0 = noise-free).
std::string scores_csv(std::span<const QuantizedCheckpoint> qs, const MergeReport& rep, std::uint64_t merge_seed,
                       CosineMode mode, const std::vector<Dataset>& targets) {
    std::string out = "seed,score,hmean\n";
    char buf[96];
    if (rep.strategy != MergeStrategy::noise_sampled) {
        std::snprintf(buf, sizeof buf, "0,%.17g,%.17g\n", rep.chosen.score, rep.harmonic_mean);
        return out + buf;
    }
    for (std::size_t i = 0; i < rep.all_scores.size(); ++i) {
        const auto c = noise_candidate(qs, merge_seed, i, mode);
        const double h = evaluate_targets(c.weights, act_plan(c.ints), targets).harmonic_mean;
        std::snprintf(buf, sizeof buf, "%llu,%.17g,%.17g\n", static_cast<unsigned long long>(c.seed), c.score, h);
        out += buf;
    }
    return out;
}

// ---------------------------------------------------------------- verbs

int cmd_gen_data(const Common& c, const std::string& domain, const std::string& split) {
    const auto cfg = load_config(c);
    const auto ds = load_domain(cfg.data, parse_domain_id(domain, cfg.data));
    std::ostringstream os;
    write_batch_csv(os, split == "test" ? ds.test : ds.train);
    write_text(c.out, os.str());
    std::cout << "wrote " << (split == "test" ? ds.test.size() : ds.train.size()) << " samples (rotation "
              << ds.spec.rotation_deg << " deg) to " << c.out << "\n";
    return kOk;
}

int cmd_train(const Common& c) {
    const auto cfg = load_config(c);
    const auto fit = train_source(cfg);
    const auto bytes = serialize(to_checkpoint_file(fit.net));
    write_file_atomic(c.out, bytes);
    const double acc = accuracy(fit.net, load_domain(cfg.data, 0).test);
    write_json(sidecar(c.out), {{"command", "train"},
                                {"master_seed", cfg.data.master_seed},
                                {"epochs_run", fit.epochs_run},
                                {"final_train_loss", fit.final_train_loss},
                                {"test_accuracy", acc},
                                {"content_hash", hex(content_hash(bytes))}});
    std::cout << "source test accuracy " << acc << " after " << fit.epochs_run << " epochs\n";
    return kOk;
}

int cmd_adapt(const Common& c, const std::string& source_path, std::size_t target) {
    const auto cfg = load_config(c);
    const auto src = load(source_path);
    if (is_quantized(src.file)) throw FormatError("adapt needs a float source checkpoint");
    const Network source = to_network(src.file);
    const auto fit = adapt_to_target(source, cfg, target);
    save_checkpoint(c.out, to_checkpoint_file(fit.net, src.hash));
    const auto test = load_domain(cfg.data, target).test;
    const double dist = std::sqrt(distance_penalty(fit.net, source));
    const double before = accuracy(source, test), after = accuracy(fit.net, test);
    write_json(sidecar(c.out), {{"command", "adapt"},
                                {"target", target},
                                {"source_hash", hex(src.hash)},
                                {"distance_to_source", dist},
                                {"source_accuracy_on_target", before},
                                {"target_accuracy", after}});
    std::cout << domain_name(target) << ": accuracy " << before << " -> " << after << ", distance to source " << dist
              << "\n";
    return kOk;
}

int cmd_quantize(const Common& c, const std::string& adapted_path, const std::string& source_path, std::size_t target,
                 const std::optional<std::string>& method, const std::optional<int>& bits, bool allow_mixed) {
    const auto cfg = load_config(c);
    const auto ad = load(adapted_path);
    const auto src = load(source_path);
    if (is_quantized(ad.file) || is_quantized(src.file)) throw FormatError("quantize needs float checkpoints");
    if (!allow_mixed && ad.file.source_hash != 0 && ad.file.source_hash != src.hash)
        throw DimensionError("adapted checkpoint was derived from source " + hex(ad.file.source_hash) + ", not " +
                             hex(src.hash) + " (pass --allow-mixed-source to override)");
    PtqConfig p = cfg.ptq.ptq;
    try {
        if (method) p.method = parse_ptq_method(*method);
        if (bits) p.weight_bits = *bits;
        p.validate();
    } catch (const ValidationError& e) {
        throw ConfigError(e.what());
    }
    const Network adapted = to_network(ad.file), source = to_network(src.file);
    require_same_architecture(adapted, source, "quantize");
    auto r = quantize_for_target(adapted, source, cfg, p, target);
    r.quantized.source_hash = src.hash;
    save_checkpoint(c.out, to_checkpoint_file(r.quantized));
    write_text(sidecar(c.out, ".trace.csv"), trace_csv(r.loss_trace));
    const auto test = load_domain(cfg.data, target).test;
    const double fp = accuracy(adapted, test), q = quantized_accuracy(r.quantized, test);
    write_json(sidecar(c.out), {{"command", "quantize"},
                                {"target", target},
                                {"method", std::string(to_string(p.method))},
                                {"weight_bits", p.weight_bits},
                                {"act_bits", p.act_bits},
                                {"iterations", p.iterations},
                                {"source_hash", hex(src.hash)},
                                {"distance_to_source", r.distance_to_source},
                                {"final_loss", r.final_loss},
                                {"fp_accuracy", fp},
                                {"quantized_accuracy", q}});
    std::cout << to_string(p.method) << " W" << p.weight_bits << ": accuracy " << fp << " -> " << q << "\n";
    return kOk;
}

int cmd_merge(const Common& c, const std::vector<std::string>& paths, const std::optional<std::string>& strategy,
              std::vector<std::size_t> targets, bool allow_mixed) {
    auto cfg = load_config(c);
    if (strategy) {
        try {
            cfg.merge.strategy = parse_merge_strategy(*strategy);
        } catch (const ValidationError& e) {
            throw ConfigError(e.what());
        }
    }
    std::vector<QuantizedCheckpoint> qs;
    for (const auto& p : paths) {
        const auto f = load(p).file;
        if (!is_quantized(f)) throw FormatError("'" + p + "' is not a quantized checkpoint");
        qs.push_back(to_quantized(f));
    }
    for (const auto& q : qs)
        if (q.source_hash != qs.front().source_hash && !allow_mixed)
            throw DimensionError("checkpoints come from different sources (" + hex(qs.front().source_hash) + " vs " +
                                 hex(q.source_hash) + "); pass --allow-mixed-source to override");
    if (targets.empty()) targets = all_target_ids(cfg.data);
    std::vector<Dataset> ds;
    for (auto id : targets) ds.push_back(load_domain(cfg.data, id));

    const auto seed = derive_seed(cfg.data.master_seed, "merge");
    auto rep = merge_checkpoints(qs, cfg.merge, seed, c.jobs);
    fill_metrics(rep, ds, targets);
    save_checkpoint(c.out, merged_checkpoint_file(rep));
    write_text(sidecar(c.out, ".scores.csv"), scores_csv(qs, rep, seed, cfg.merge.cosine, ds));
    auto j = metrics_json(rep);
    j["command"] = "merge";
    j["inputs"] = paths;
    write_json(sidecar(c.out), j);
    std::cout << to_string(rep.strategy) << ": candidate " << rep.chosen.index << " score " << rep.chosen.score;
    for (const auto& [k, v] : rep.per_domain_metric) std::cout << ", " << k << " " << v;
    std::cout << ", harmonic mean " << rep.harmonic_mean << "\n";
    return kOk;
}

int cmd_eval(const Common& c, const std::vector<std::string>& paths, std::vector<std::size_t> targets) {
    const auto cfg = load_config(c);
    if (targets.empty()) targets = all_target_ids(cfg.data);
    std::vector<Dataset> ds;
    for (auto id : targets) ds.push_back(load_domain(cfg.data, id));
    json all = json::array();
    for (const auto& p : paths) {
        const auto f = load(p).file;
        const auto m = is_quantized(f) ? evaluate_targets(to_quantized(f), ds) : evaluate_targets(to_network(f), {}, ds);
        json j{{"checkpoint", p}, {"harmonic_mean", m.harmonic_mean}};
        std::cout << p << ":";
        for (std::size_t i = 0; i < targets.size(); ++i) {
            j["per_domain_accuracy"][domain_name(targets[i])] = m.accuracy[i];
            std::cout << " " << domain_name(targets[i]) << " " << m.accuracy[i];
        }
        std::cout << ", harmonic mean " << m.harmonic_mean << "\n";
        all.push_back(j);
    }
    if (!c.out.empty()) write_json(c.out, {{"command", "eval"}, {"results", all}});
    return kOk;
}

int cmd_barrier(const Common& c, const std::string& a, const std::string& b, const std::string& domain) {
    const auto cfg = load_config(c);
    const auto r = error_barrier(to_network(load(a).file), to_network(load(b).file), eval_batch(domain, cfg.data),
                                 cfg.analysis.grid_n, domain);
    std::ostringstream os;
    write_barrier_csv(os, r);
    write_text(c.out, os.str());
    write_json(sidecar(c.out), {{"command", "barrier"},
                                {"domain", domain},
                                {"grid_n", cfg.analysis.grid_n},
                                {"endpoint_losses", {r.endpoint_losses.first, r.endpoint_losses.second}},
                                {"barrier", r.barrier}});
    std::cout << "barrier " << r.barrier << " on " << domain << " (" << r.lambdas.size() << " points)\n";
    return kOk;
}

int cmd_surface(const Common& c, const std::string& a, const std::string& b, const std::optional<std::string>& origin,
                const std::string& domain) {
    const auto cfg = load_config(c);
    const Network t1 = to_network(load(a).file), t2 = to_network(load(b).file);
    // Without --origin the plane is anchored at the config's source model.
    const Network o = origin ? to_network(load(*origin).file) : train_source(cfg).net;
    require_same_architecture(o, t1, "surface");
    require_same_architecture(o, t2, "surface");

    // Extent: bounding box of origin, t1, t2 in plane coordinates, widened by the margin.
    const auto fo = flatten(o), f1 = flatten(t1), f2 = flatten(t2);
    const auto probe = surface_grid(std::span<const double>(fo), std::span<const double>(f1),
                                    std::span<const double>(f2), [](std::span<const double>) { return 0.0; }, {1, 1},
                                    {{0.0, 0.0}, {0.0, 0.0}});
    const auto c1 = probe.coordinates(std::span<const double>(f1));
    const auto c2 = probe.coordinates(std::span<const double>(f2));
    const double u0 = std::min({0.0, c1.first, c2.first}), u1 = std::max({0.0, c1.first, c2.first});
    const double v0 = std::min({0.0, c1.second, c2.second}), v1 = std::max({0.0, c1.second, c2.second});
    const double m = cfg.analysis.surface_margin;
    const double du = m * (u1 - u0), dv = m * (v1 - v0);
    const Batch batch = eval_batch(domain, cfg.data);
    const auto g = surface_grid(o, t1, t2, batch, {cfg.analysis.surface_nu, cfg.analysis.surface_nv},
                                {{u0 - du, u1 + du}, {v0 - dv, v1 + dv}});
    std::ostringstream os;
    write_surface_csv(os, g);
    write_text(c.out, os.str());
    const auto [lo, hi] = std::minmax_element(g.grid.begin(), g.grid.end());
    write_json(sidecar(c.out), {{"command", "surface"},
                                {"domain", domain},
                                {"nu", g.nu},
                                {"nv", g.nv},
                                {"u_range", {g.u_range.first, g.u_range.second}},
                                {"v_range", {g.v_range.first, g.v_range.second}},
                                {"t1_coordinates", {c1.first, c1.second}},
                                {"t2_coordinates", {c2.first, c2.second}},
                                {"min_loss", *lo},
                                {"max_loss", *hi}});
    std::cout << "surface " << g.nu << "x" << g.nv << " on " << domain << ": loss in [" << *lo << ", " << *hi << "]\n";
    return kOk;
}

// Full train -> adapt -> quantize -> merge run; every artifact goes under the --out directory.
int cmd_report(const Common& c) {
    const auto cfg = load_config(c);
    const fs::path dir = c.out;
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());

    const auto run = run_pipeline(cfg, c.jobs);
    save_checkpoint(dir / "source.mqck", to_checkpoint_file(run.source.net));
    json j;
    j["master_seed"] = cfg.data.master_seed;
    j["source"] = {{"epochs_run", run.source.epochs_run},
                   {"test_accuracy", accuracy(run.source.net, load_domain(cfg.data, 0).test)},
                   {"content_hash", hex(run.source_hash)}};
    std::vector<QuantizedCheckpoint> qs;
    for (std::size_t i = 0; i < run.target_ids.size(); ++i) {
        const std::string name = domain_name(run.target_ids[i]);
        const auto& test = run.targets[i].test;
        const auto& q = run.quantized[i];
        save_checkpoint(dir / (name + ".adapted.mqck"), to_checkpoint_file(run.adapted[i].net, run.source_hash));
        save_checkpoint(dir / (name + ".quantized.mqck"), to_checkpoint_file(q.quantized));
        write_text(dir / (name + ".trace.csv"), trace_csv(q.loss_trace));
        j["targets"][name] = {{"fp_accuracy", accuracy(run.adapted[i].net, test)},
                              {"quantized_accuracy", quantized_accuracy(q.quantized, test)},
                              {"distance_to_source", q.distance_to_source},
                              {"final_loss", q.final_loss}};
        qs.push_back(q.quantized);
    }
    j["ptq"] = {{"method", std::string(to_string(cfg.ptq.ptq.method))},
                {"weight_bits", cfg.ptq.ptq.weight_bits},
                {"act_bits", cfg.ptq.ptq.act_bits},
                {"iterations", cfg.ptq.ptq.iterations}};
    if (qs.size() >= 2) {
        save_checkpoint(dir / "merged.mqck", merged_checkpoint_file(run.merge));
        write_text(dir / "merged.scores.csv", scores_csv(qs, run.merge, derive_seed(cfg.data.master_seed, "merge"),
                                                         cfg.merge.cosine, run.targets));
        j["merge"] = metrics_json(run.merge);
        const auto r = error_barrier(dequantize(qs[0]), dequantize(qs[1]), joint_test_batch(run.targets),
                                     cfg.analysis.grid_n, "joint");
        std::ostringstream os;
        write_barrier_csv(os, r);
        write_text(dir / "barrier.csv", os.str());
        j["barrier"] = r.barrier;
    }
    write_json(dir / "report.json", j);
    std::cout << j.dump(2) << "\n";
    return kOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"mergeq-cli: quantization-aware model merging on synthetic domain shift"};
    app.require_subcommand(1);
    Common common;
    std::string domain = "0", split = "train", source, eval_domain = "joint";
    std::string single, a, b;
    std::optional<std::string> method, strategy, origin;
    std::optional<int> bits;
    std::size_t target = 1;
    std::vector<std::size_t> targets;
    std::vector<std::string> paths;
    bool allow_mixed = false;

    auto* gen = app.add_subcommand("gen-data", "write one domain split as CSV");
    add_common(gen, common);
    gen->add_option("--domain", domain, "'source' or domain index");
    gen->add_option("--split", split)->check(CLI::IsMember({"train", "test"}));

    auto* train = app.add_subcommand("train", "train the source model");
    add_common(train, common);

    auto* adapt = app.add_subcommand("adapt", "fine-tune a source checkpoint on one target domain");
    add_common(adapt, common);
    adapt->add_option("source", single, "source checkpoint")->required();
    adapt->add_option("--target", target, "target domain index")->required();

    auto* quant = app.add_subcommand("quantize", "post-training quantization of an adapted checkpoint");
    add_common(quant, common);
    quant->add_option("adapted", single, "adapted checkpoint")->required();
    quant->add_option("--source", source, "source checkpoint")->required();
    quant->add_option("--target", target, "target domain index (calibration data)")->required();
    quant->add_option("--method", method, "hdrq, recon_only or recon_drop");
    quant->add_option("--weight-bits", bits, "weight bit width");
    quant->add_flag("--allow-mixed-source", allow_mixed);

    auto* merge = app.add_subcommand("merge", "merge quantized checkpoints");
    add_common(merge, common);
    merge->add_option("checkpoints", paths, "quantized checkpoints")->required()->expected(2, -1);
    merge->add_option("--strategy", strategy, "fp_midpoint, int_naive or noise_sampled");
    merge->add_option("--targets", targets, "domains to evaluate on (default: all targets)")->delimiter(',');
    merge->add_flag("--allow-mixed-source", allow_mixed);

    auto* eval = app.add_subcommand("eval", "per-domain accuracy and harmonic mean");
    add_common(eval, common, false);
    eval->add_option("checkpoints", paths)->required()->expected(1, -1);
    eval->add_option("--targets", targets, "domains to evaluate on (default: all targets)")->delimiter(',');

    auto* barrier = app.add_subcommand("barrier", "loss along the line between two checkpoints");
    add_common(barrier, common);
    barrier->add_option("a", a)->required();
    barrier->add_option("b", b)->required();
    barrier->add_option("--domain", eval_domain, "'joint', 'source' or domain index");

    auto* surface = app.add_subcommand("surface", "loss on the plane through origin, a and b");
    add_common(surface, common);
    surface->add_option("a", a)->required();
    surface->add_option("b", b)->required();
    surface->add_option("--origin", origin, "plane origin (default: retrain the config's source model)");
    surface->add_option("--domain", eval_domain, "'joint', 'source' or domain index");

    auto* report = app.add_subcommand("report", "run the full pipeline into an output directory");
    add_common(report, common);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kConfig;
    }

    try {
        const auto cfg_for_ids = [&] { return load_config(common).data; };
        if (*gen) return cmd_gen_data(common, domain, split);
        if (*train) return cmd_train(common);
        if (*adapt) return cmd_adapt(common, single, parse_domain_id(std::to_string(target), cfg_for_ids()));
        if (*quant) return cmd_quantize(common, single, source, target, method, bits, allow_mixed);
        if (*merge) return cmd_merge(common, paths, strategy, targets, allow_mixed);
        if (*eval) return cmd_eval(common, paths, targets);
        if (*barrier) return cmd_barrier(common, a, b, eval_domain);
        if (*surface) return cmd_surface(common, a, b, origin, eval_domain);
        if (*report) return cmd_report(common);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfig;
    } catch (const IoError& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return kIo;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kData;
    } catch (const std::exception& e) {
        std::cerr << "unexpected failure: " << e.what() << "\n";
        return kFailure;
    }
    return kFailure;
}
