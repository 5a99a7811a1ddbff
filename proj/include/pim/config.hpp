#pragma once

// Run configuration shared by the command-line tools: a flat key = value file
// whose entries command-line flags may override.

#include <cstddef>
#include <cstdint>
#include <fstream>
#include <istream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "pim/search.hpp"
#include "pim/trace.hpp"

namespace pim {

struct RunConfig {
    /// Error spec name; unset picks "demo" for traces that carry an arena
    /// size and "continuous" otherwise.
    std::optional<std::string> spec;
    std::optional<double> d_max;
    std::optional<double> e_max;
    std::optional<double> e_acc;
    ComplexityWeights weights;
    double lr = 0.5;
    std::size_t inner_budget = 200;
    std::size_t outer_budget = 1000;
    std::size_t best_k = 3;
    std::uint64_t seed = 1;
    std::size_t workers = 1;
    std::optional<ExecPolicy> exec_policy;

    /// Throws when a value is out of range.
    void validate() const
    {
        if (d_max && !(*d_max > 0.0)) throw Error("d_max must be positive");
        if (e_max && !(*e_max > 0.0)) throw Error("e_max must be positive");
        if (e_acc && !(*e_acc >= 0.0)) throw Error("e_acc must be non-negative");
        if (weights.depth < 0.0 || weights.params < 0.0 || weights.vars < 0.0)
            throw Error("complexity weights must be non-negative");
        if (!(lr > 0.0)) throw Error("lr must be positive");
        if (best_k == 0) throw Error("best_k must be at least 1");
        if (workers == 0) throw Error("workers must be at least 1");
        if (spec) spec_by_name(*spec); // throws on an unknown name
    }

    SearchConfig search() const
    {
        SearchConfig cfg;
        cfg.weights = weights;
        cfg.opt.lr = lr;
        cfg.opt.budget = inner_budget;
        cfg.outer_budget = outer_budget;
        cfg.best_k = best_k;
        cfg.seed = seed;
        cfg.workers = workers;
        cfg.exec_policy = exec_policy;
        return cfg;
    }

    std::string spec_name(const ObservationTrace& trace) const
    {
        if (spec) return *spec;
        return trace.d_max ? "demo" : "continuous";
    }

    /// The error spec with thresholds calibrated on `trace`. d_max comes from
    /// the config, else the trace, else 1.
    ErrorSpec error_spec(const ObservationTrace& trace) const
    {
        const double dm = d_max ? *d_max : trace.d_max.value_or(1.0);
        return calibrate(spec_by_name(spec_name(trace), dm), trace, Thresholds{e_max, e_acc});
    }
};

namespace detail {

inline std::string trim(const std::string& s)
{
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline double to_double(const std::string& key, const std::string& v)
{
    std::size_t used = 0;
    double x = 0.0;
    try {
        x = std::stod(v, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used != v.size() || v.empty()) throw Error("'" + key + "' expects a number, got '" + v + "'");
    return x;
}

inline std::uint64_t to_count(const std::string& key, const std::string& v)
{
    if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos)
        throw Error("'" + key + "' expects a non-negative integer, got '" + v + "'");
    try {
        return std::stoull(v);
    } catch (const std::exception&) {
        throw Error("'" + key + "' is out of range: '" + v + "'");
    }
}

} // namespace detail

/// Sets one configuration entry. `weights` takes three comma-separated
/// numbers (depth, parameters, variables).
inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value)
{
    const std::string v = detail::trim(value);
    if (key == "spec") cfg.spec = v;
    else if (key == "d_max") cfg.d_max = detail::to_double(key, v);
    else if (key == "e_max") cfg.e_max = detail::to_double(key, v);
    else if (key == "e_acc") cfg.e_acc = detail::to_double(key, v);
    else if (key == "lr") cfg.lr = detail::to_double(key, v);
    else if (key == "inner_budget") cfg.inner_budget = detail::to_count(key, v);
    else if (key == "outer_budget") cfg.outer_budget = detail::to_count(key, v);
    else if (key == "best_k") cfg.best_k = detail::to_count(key, v);
    else if (key == "seed") cfg.seed = detail::to_count(key, v);
    else if (key == "workers") cfg.workers = detail::to_count(key, v);
    else if (key == "exec_policy") cfg.exec_policy = parse_exec_policy(v);
    else if (key == "weights") {
        std::vector<double> w;
        std::stringstream ss(v);
        for (std::string part; std::getline(ss, part, ',');) w.push_back(detail::to_double(key, detail::trim(part)));
        if (w.size() != 3) throw Error("'weights' expects three comma-separated numbers");
        cfg.weights = {w[0], w[1], w[2]};
    } else {
        throw Error("unknown config key '" + key + "'");
    }
}

/// Reads `key = value` lines into `cfg`. Blank lines and lines starting with
/// '#' are skipped.
inline void read_config(std::istream& in, RunConfig& cfg)
{
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string t = detail::trim(line);
        if (t.empty() || t[0] == '#') continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos)
            throw Error("config line " + std::to_string(lineno) + ": expected key = value");
        try {
            set_config_value(cfg, detail::trim(t.substr(0, eq)), t.substr(eq + 1));
        } catch (const Error& e) {
            throw Error("config line " + std::to_string(lineno) + ": " + e.what());
        }
    }
}

inline RunConfig load_config(const std::string& path, RunConfig cfg = {})
{
    std::ifstream in(path);
    if (!in) throw Error("cannot open config '" + path + "'");
    read_config(in, cfg);
    return cfg;
}

} // namespace pim
