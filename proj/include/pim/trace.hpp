#pragma once

// Observation traces, the error specification that decides when an execution
// trace explains an observation trace, and the line-delimited trace file.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <functional>
#include <istream>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "pim/sexpr.hpp"
#include "pim/vec.hpp"

namespace pim {

struct Step {
    std::map<std::string, Vec> state;
    std::string action;
    Vec theta;

    bool operator==(const Step&) const = default;
};

struct ObservationTrace {
    Schema schema;
    std::vector<Step> steps;
    /// Optional arena size for the demonstration error function.
    std::optional<double> d_max;
    /// Optional per-action abort threshold suggested by the generator.
    std::optional<double> e_max;

    std::size_t length() const noexcept { return steps.size(); }

    /// Throws when a step disagrees with the schema.
    void validate() const
    {
        for (std::size_t i = 0; i < steps.size(); ++i) {
            const Step& s = steps[i];
            const std::string at = "step " + std::to_string(i + 1) + ": ";
            if (s.state.size() != schema.variables.size()) throw Error(at + "variable set differs from schema");
            for (const auto& [id, dim] : schema.variables) {
                auto it = s.state.find(id);
                if (it == s.state.end()) throw Error(at + "missing variable '" + id + "'");
                if (it->second.size() != dim) throw Error(at + "variable '" + id + "' has wrong dim");
            }
            auto a = schema.actions.find(s.action);
            if (a == schema.actions.end()) throw Error(at + "undeclared action '" + s.action + "'");
            if (s.theta.size() != a->second) throw Error(at + "theta dim does not match action '" + s.action + "'");
        }
    }
};

/// Emitted action of an execution: name and argument.
struct EmittedAction {
    std::string action;
    Vec theta;
};

/// Pluggable trace-equivalence definition.
struct ErrorSpec {
    std::string name;
    std::function<double(const std::string& a_hat, const Vec& theta_hat, const std::string& a, const Vec& theta)>
        sigma_act;
    /// d sigma_act / d theta_hat.
    std::function<Vec(const std::string& a_hat, const Vec& theta_hat, const std::string& a, const Vec& theta)>
        sigma_act_grad;
    std::function<double(std::size_t T, std::size_t T_exec)> sigma_len;
    double e_max = std::numeric_limits<double>::infinity();
    double e_acc = 0.0;
    double d_max = 1.0;
};

namespace detail {

inline Vec norm_grad(const Vec& theta_hat, const Vec& theta)
{
    Vec r = vec::sub(theta_hat, theta);
    const double n = vec::norm(r);
    if (n == 0.0) return Vec(r.size(), 0.0); // subgradient at the kink
    for (double& x : r) x /= n;
    return r;
}

} // namespace detail

/// ||theta_hat - theta||_2, sigma_len = 0. Action names are not compared:
/// systems using this preset expose a single action.
inline ErrorSpec continuous_spec()
{
    ErrorSpec s;
    s.name = "continuous";
    s.sigma_act = [](const std::string&, const Vec& th, const std::string&, const Vec& obs) {
        return vec::distance(th, obs);
    };
    s.sigma_act_grad = [](const std::string&, const Vec& th, const std::string&, const Vec& obs) {
        return detail::norm_grad(th, obs);
    };
    s.sigma_len = [](std::size_t, std::size_t) { return 0.0; };
    return s;
}

/// Smooth variant: squared distance.
inline ErrorSpec continuous_squared_spec()
{
    ErrorSpec s = continuous_spec();
    s.name = "continuous_sq";
    s.sigma_act = [](const std::string&, const Vec& th, const std::string&, const Vec& obs) {
        const double d = vec::distance(th, obs);
        return d * d;
    };
    s.sigma_act_grad = [](const std::string&, const Vec& th, const std::string&, const Vec& obs) {
        return vec::scale(2.0, vec::sub(th, obs));
    };
    return s;
}

/// Distance when action names agree, d_max otherwise; squared length error.
inline ErrorSpec demo_spec(double d_max)
{
    ErrorSpec s;
    s.name = "demo";
    s.d_max = d_max;
    s.sigma_act = [d_max](const std::string& ah, const Vec& th, const std::string& a, const Vec& obs) {
        return ah == a ? vec::distance(th, obs) : d_max;
    };
    s.sigma_act_grad = [](const std::string& ah, const Vec& th, const std::string& a, const Vec& obs) {
        return ah == a ? detail::norm_grad(th, obs) : Vec(th.size(), 0.0);
    };
    s.sigma_len = [](std::size_t T, std::size_t Tp) {
        const double d = static_cast<double>(Tp) - static_cast<double>(T);
        return d * d;
    };
    return s;
}

inline std::map<std::string, ErrorSpec> builtin_specs(double d_max = 1.0)
{
    return {
        {"continuous", continuous_spec()},
        {"continuous_sq", continuous_squared_spec()},
        {"demo", demo_spec(d_max)},
    };
}

inline ErrorSpec spec_by_name(const std::string& name, double d_max = 1.0)
{
    auto specs = builtin_specs(d_max);
    auto it = specs.find(name);
    if (it == specs.end()) throw Error("unknown error spec '" + name + "'");
    return it->second;
}

/// Total error between an executed action sequence and the observed trace:
/// the summed per-action error over the common prefix plus the length error.
inline double loss(const std::vector<EmittedAction>& executed, const ObservationTrace& observed, const ErrorSpec& spec)
{
    const std::size_t T = observed.length();
    const std::size_t n = std::min(T, executed.size());
    double total = 0.0;
    for (std::size_t t = 0; t < n; ++t) {
        const Step& s = observed.steps[t];
        total += spec.sigma_act(executed[t].action, executed[t].theta, s.action, s.theta);
    }
    return total + spec.sigma_len(T, executed.size());
}

/// Per-step error of the best constant explanation: each action id gets the
/// coordinate-wise median of its observed arguments.
inline double constant_baseline_per_step(const ObservationTrace& trace, const ErrorSpec& spec)
{
    if (trace.steps.empty()) return 0.0;
    std::map<std::string, std::vector<const Vec*>> by_action;
    for (const auto& s : trace.steps) by_action[s.action].push_back(&s.theta);
    std::map<std::string, Vec> centre;
    for (auto& [a, thetas] : by_action) {
        const std::size_t dim = thetas.front()->size();
        Vec c(dim);
        std::vector<double> col(thetas.size());
        for (std::size_t d = 0; d < dim; ++d) {
            for (std::size_t i = 0; i < thetas.size(); ++i) col[i] = (*thetas[i])[d];
            std::nth_element(col.begin(), col.begin() + col.size() / 2, col.end());
            c[d] = col[col.size() / 2];
        }
        centre[a] = std::move(c);
    }
    double total = 0.0;
    for (const auto& s : trace.steps) total += spec.sigma_act(s.action, centre[s.action], s.action, s.theta);
    return total / static_cast<double>(trace.steps.size());
}

/// Threshold overrides; unset entries are derived from the trace.
struct Thresholds {
    std::optional<double> e_max;
    std::optional<double> e_acc;
};

/// Fills e_max and e_acc. e_max is the override, else the trace's own
/// suggestion, else 10x the constant baseline's per-step error (unbounded
/// when that baseline is exact). e_acc defaults to 1e-3 per observed step.
inline ErrorSpec calibrate(ErrorSpec spec, const ObservationTrace& trace, const Thresholds& overrides = {})
{
    if (overrides.e_max) {
        spec.e_max = *overrides.e_max;
    } else if (trace.e_max) {
        spec.e_max = *trace.e_max;
    } else {
        const double base = constant_baseline_per_step(trace, spec);
        spec.e_max = base > 0.0 ? 10.0 * base : std::numeric_limits<double>::infinity();
    }
    spec.e_acc = overrides.e_acc ? *overrides.e_acc : 1e-3 * static_cast<double>(trace.length());
    return spec;
}

// ---------------------------------------------------------------------------
// Trace file: a schema header line followed by one JSON record per step.
// ---------------------------------------------------------------------------

inline void write_trace(std::ostream& out, const ObservationTrace& trace)
{
    nlohmann::ordered_json header;
    header["schema"]["variables"] = nlohmann::ordered_json::object();
    for (const auto& [id, dim] : trace.schema.variables) header["schema"]["variables"][id] = dim;
    header["schema"]["actions"] = nlohmann::ordered_json::object();
    for (const auto& [id, dim] : trace.schema.actions) header["schema"]["actions"][id] = dim;
    if (trace.d_max) header["d_max"] = *trace.d_max;
    if (trace.e_max) header["e_max"] = *trace.e_max;
    out << header.dump() << '\n';
    for (std::size_t t = 0; t < trace.steps.size(); ++t) {
        const Step& s = trace.steps[t];
        nlohmann::ordered_json rec;
        rec["t"] = t + 1;
        rec["state"] = nlohmann::ordered_json::object();
        for (const auto& [id, v] : s.state) rec["state"][id] = v;
        rec["action"] = s.action;
        rec["theta"] = s.theta;
        out << rec.dump() << '\n';
    }
}

inline ObservationTrace read_trace(std::istream& in)
{
    ObservationTrace trace;
    std::string line;
    std::size_t lineno = 0;
    bool have_header = false;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json rec;
        try {
            rec = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw Error("trace line " + std::to_string(lineno) + ": " + e.what());
        }
        try {
            if (!have_header) {
                if (!rec.contains("schema")) throw Error("first line must be the schema header");
                for (auto& [id, dim] : rec.at("schema").at("variables").items())
                    trace.schema.variables[id] = dim.get<std::size_t>();
                for (auto& [id, dim] : rec.at("schema").at("actions").items())
                    trace.schema.actions[id] = dim.get<std::size_t>();
                if (rec.contains("d_max")) trace.d_max = rec.at("d_max").get<double>();
                if (rec.contains("e_max")) {
                    trace.e_max = rec.at("e_max").get<double>();
                    if (!(*trace.e_max > 0.0)) throw Error("e_max must be positive");
                }
                have_header = true;
                continue;
            }
            Step s;
            for (auto& [id, v] : rec.at("state").items()) s.state[id] = v.get<Vec>();
            s.action = rec.at("action").get<std::string>();
            s.theta = rec.at("theta").get<Vec>();
            if (rec.contains("t") && rec.at("t").get<std::size_t>() != trace.steps.size() + 1)
                throw Error("steps out of order");
            trace.steps.push_back(std::move(s));
        } catch (const nlohmann::json::exception& e) {
            throw Error("trace line " + std::to_string(lineno) + ": " + e.what());
        } catch (const Error& e) {
            throw Error("trace line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    if (!have_header) throw Error("trace has no schema header");
    trace.validate();
    return trace;
}

inline void save_trace(const std::string& path, const ObservationTrace& trace)
{
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot open '" + path + "' for writing");
    write_trace(out, trace);
    if (!out) throw Error("failed writing '" + path + "'");
}

inline ObservationTrace load_trace(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open '" + path + "'");
    return read_trace(in);
}

} // namespace pim
