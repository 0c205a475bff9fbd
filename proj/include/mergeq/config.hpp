#pragma once

// Experiment configuration: `key = value` lines grouped under [data], [train], [ptq],
// [merge] and [analysis]. `#` starts a comment. Unknown sections and keys are
// rejected; [data] is mandatory, any other missing key takes its default and a
// notice is written to the supplied stream.

#include <charconv>
#include <cstdint>
#include <functional>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "errors.hpp"
#include "hdrq.hpp"
#include "merge.hpp"
#include "synthdata.hpp"

namespace mergeq {

struct DataConfig {
    BaseTask base_task = BaseTask::two_gaussians;
    double noise_std = 0.5;
    std::size_t n_train = 512;
    std::size_t n_test = 1024;
    double source_rotation = 0.0;
    std::vector<double> target_rotations{40.0, -40.0};
    std::uint64_t master_seed = 1;
};

struct TrainConfig {
    std::vector<std::size_t> hidden{16, 16};
    int epochs = 200;
    double lr = 3e-3;
    std::size_t batch_size = 64;
    int patience = 20;       // epochs without train-loss improvement before stopping
    double min_delta = 1e-5; // improvement threshold for the plateau test
    int adapt_epochs = 30;
    double adapt_lr = 5e-4;
};

struct PtqSection {
    PtqConfig ptq = PtqConfig::scaled(0.05);
    double scale = 0.05;
};

struct MergeConfig {
    MergeStrategy strategy = MergeStrategy::noise_sampled;
    std::size_t n_candidates = 30;
    CosineMode cosine = CosineMode::symmetric;
};

struct AnalysisConfig {
    int grid_n = 21;
    std::size_t surface_nu = 21;
    std::size_t surface_nv = 21;
    double surface_margin = 0.5; // extent beyond the endpoints, as a fraction of their span
};

struct ExperimentConfig {
    DataConfig data;
    TrainConfig train;
    PtqSection ptq;
    MergeConfig merge;
    AnalysisConfig analysis;
};

namespace detail {

inline std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

template <class T>
T parse_number(const std::string& v, const std::string& where) {
    T out{};
    const char* end = v.data() + v.size();
    auto [p, ec] = std::from_chars(v.data(), end, out);
    if (ec != std::errc{} || p != end) throw ConfigError(where + ": cannot parse '" + v + "'");
    return out;
}

template <class T>
std::vector<T> parse_list(const std::string& v, const std::string& where) {
    std::vector<T> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(parse_number<T>(trim(item), where));
    return out;
}

using Setter = std::function<void(const std::string&, const std::string&)>;

} // namespace detail

inline ExperimentConfig parse_config(std::string_view text, std::ostream* notices = nullptr) {
    using namespace detail;
    ExperimentConfig c;
    std::map<std::string, std::map<std::string, Setter>> table;

    auto& d = table["data"];
    d["base_task"] = [&](auto& v, auto& w) {
        try {
            c.data.base_task = parse_base_task(v);
        } catch (const ValidationError& e) {
            throw ConfigError(w + ": " + e.what());
        }
    };
    d["noise_std"] = [&](auto& v, auto& w) { c.data.noise_std = parse_number<double>(v, w); };
    d["n_train"] = [&](auto& v, auto& w) { c.data.n_train = parse_number<std::size_t>(v, w); };
    d["n_test"] = [&](auto& v, auto& w) { c.data.n_test = parse_number<std::size_t>(v, w); };
    d["source_rotation"] = [&](auto& v, auto& w) { c.data.source_rotation = parse_number<double>(v, w); };
    d["target_rotations"] = [&](auto& v, auto& w) { c.data.target_rotations = parse_list<double>(v, w); };
    d["master_seed"] = [&](auto& v, auto& w) { c.data.master_seed = parse_number<std::uint64_t>(v, w); };

    auto& t = table["train"];
    t["hidden"] = [&](auto& v, auto& w) { c.train.hidden = parse_list<std::size_t>(v, w); };
    t["epochs"] = [&](auto& v, auto& w) { c.train.epochs = parse_number<int>(v, w); };
    t["lr"] = [&](auto& v, auto& w) { c.train.lr = parse_number<double>(v, w); };
    t["batch_size"] = [&](auto& v, auto& w) { c.train.batch_size = parse_number<std::size_t>(v, w); };
    t["patience"] = [&](auto& v, auto& w) { c.train.patience = parse_number<int>(v, w); };
    t["min_delta"] = [&](auto& v, auto& w) { c.train.min_delta = parse_number<double>(v, w); };
    t["adapt_epochs"] = [&](auto& v, auto& w) { c.train.adapt_epochs = parse_number<int>(v, w); };
    t["adapt_lr"] = [&](auto& v, auto& w) { c.train.adapt_lr = parse_number<double>(v, w); };

    auto& q = table["ptq"];
    bool iterations_set = false, tail_set = false, warmup_set = false;
    q["method"] = [&](auto& v, auto& w) {
        try {
            c.ptq.ptq.method = parse_ptq_method(v);
        } catch (const ValidationError& e) {
            throw ConfigError(w + ": " + e.what());
        }
    };
    q["weight_bits"] = [&](auto& v, auto& w) { c.ptq.ptq.weight_bits = parse_number<int>(v, w); };
    q["act_bits"] = [&](auto& v, auto& w) { c.ptq.ptq.act_bits = parse_number<int>(v, w); };
    q["scale"] = [&](auto& v, auto& w) { c.ptq.scale = parse_number<double>(v, w); };
    q["iterations"] = [&](auto& v, auto& w) {
        c.ptq.ptq.iterations = parse_number<int>(v, w);
        iterations_set = true;
    };
    q["fake_quant_tail"] = [&](auto& v, auto& w) {
        c.ptq.ptq.fake_quant_tail = parse_number<int>(v, w);
        tail_set = true;
    };
    q["warmup"] = [&](auto& v, auto& w) {
        c.ptq.ptq.warmup = parse_number<int>(v, w);
        warmup_set = true;
    };
    q["lambda_dist"] = [&](auto& v, auto& w) { c.ptq.ptq.lambda_dist = parse_number<double>(v, w); };
    q["lr0"] = [&](auto& v, auto& w) { c.ptq.ptq.lr0 = parse_number<double>(v, w); };
    q["drop_prob"] = [&](auto& v, auto& w) { c.ptq.ptq.drop_prob = parse_number<double>(v, w); };
    q["calib_batches"] = [&](auto& v, auto& w) { c.ptq.ptq.calib_batches = parse_number<int>(v, w); };
    q["calib_batch_size"] = [&](auto& v, auto& w) { c.ptq.ptq.calib_batch_size = parse_number<std::size_t>(v, w); };
    q["recalibration_interval"] = [&](auto& v, auto& w) {
        c.ptq.ptq.recalibration_interval = parse_number<int>(v, w);
    };
    q["distance_norm"] = [&](auto& v, auto& w) {
        if (v == "squared")
            c.ptq.ptq.distance_norm = DistanceNorm::squared;
        else if (v == "l2")
            c.ptq.ptq.distance_norm = DistanceNorm::l2;
        else
            throw ConfigError(w + ": expected 'squared' or 'l2'");
    };

    auto& m = table["merge"];
    m["strategy"] = [&](auto& v, auto& w) {
        try {
            c.merge.strategy = parse_merge_strategy(v);
        } catch (const ValidationError& e) {
            throw ConfigError(w + ": " + e.what());
        }
    };
    m["n_candidates"] = [&](auto& v, auto& w) { c.merge.n_candidates = parse_number<std::size_t>(v, w); };
    m["cosine"] = [&](auto& v, auto& w) {
        if (v == "symmetric")
            c.merge.cosine = CosineMode::symmetric;
        else if (v == "one_sided")
            c.merge.cosine = CosineMode::one_sided;
        else
            throw ConfigError(w + ": expected 'symmetric' or 'one_sided'");
    };

    auto& a = table["analysis"];
    a["grid_n"] = [&](auto& v, auto& w) { c.analysis.grid_n = parse_number<int>(v, w); };
    a["surface_nu"] = [&](auto& v, auto& w) { c.analysis.surface_nu = parse_number<std::size_t>(v, w); };
    a["surface_nv"] = [&](auto& v, auto& w) { c.analysis.surface_nv = parse_number<std::size_t>(v, w); };
    a["surface_margin"] = [&](auto& v, auto& w) { c.analysis.surface_margin = parse_number<double>(v, w); };

    std::map<std::string, std::map<std::string, bool>> seen;
    std::string section;
    std::istringstream in{std::string(text)};
    std::string raw;
    int lineno = 0;
    while (std::getline(in, raw)) {
        ++lineno;
        const auto hash = raw.find('#');
        const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
        if (line.empty()) continue;
        const std::string where = "config line " + std::to_string(lineno);
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError(where + ": malformed section header");
            section = trim(std::string_view(line).substr(1, line.size() - 2));
            if (!table.count(section)) throw ConfigError(where + ": unknown section [" + section + "]");
            seen[section];
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
        if (section.empty()) throw ConfigError(where + ": key outside of any section");
        const std::string key = trim(std::string_view(line).substr(0, eq));
        const std::string value = trim(std::string_view(line).substr(eq + 1));
        auto& keys = table[section];
        auto it = keys.find(key);
        if (it == keys.end()) throw ConfigError(where + ": unknown key '" + key + "' in [" + section + "]");
        if (seen[section][key]) throw ConfigError(where + ": duplicate key '" + key + "'");
        it->second(value, where + " [" + section + "] " + key);
        seen[section][key] = true;
    }

    if (!seen.count("data")) throw ConfigError("missing required section [data]");
    for (const auto& [name, keys] : table) {
        if (!seen.count(name)) {
            if (notices) *notices << "notice: section [" << name << "] absent, using defaults\n";
            continue;
        }
        std::string defaulted;
        for (const auto& [key, _] : keys)
            if (!seen[name][key]) defaulted += (defaulted.empty() ? "" : ", ") + key;
        if (notices && !defaulted.empty()) *notices << "notice: [" << name << "] defaults for: " << defaulted << "\n";
    }

    // Iteration counts follow `scale` unless given explicitly.
    const PtqConfig scaled = PtqConfig::scaled(c.ptq.scale);
    if (!iterations_set) c.ptq.ptq.iterations = scaled.iterations;
    if (!tail_set) c.ptq.ptq.fake_quant_tail = scaled.fake_quant_tail;
    if (!warmup_set) c.ptq.ptq.warmup = c.ptq.ptq.iterations / 20;

    if (c.data.target_rotations.empty()) throw ConfigError("[data] target_rotations must list at least one domain");
    if (c.train.hidden.empty()) throw ConfigError("[train] hidden must list at least one layer width");
    try {
        DomainSpec{c.data.base_task, 0.0, c.data.noise_std, c.data.n_train, c.data.n_test, 0}.validate();
        c.ptq.ptq.validate();
    } catch (const ValidationError& e) {
        throw ConfigError(std::string("invalid configuration: ") + e.what());
    }
    if (c.analysis.grid_n < 3) throw ConfigError("[analysis] grid_n must be at least 3");
    if (c.merge.n_candidates < 1) throw ConfigError("[merge] n_candidates must be at least 1");
    if (c.train.epochs <= 0 || c.train.batch_size == 0 || c.train.adapt_epochs < 0)
        throw ConfigError("[train] epochs and batch_size must be positive");
    return c;
}

} // namespace mergeq
