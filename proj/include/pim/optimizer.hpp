#pragma once

// Parameter optimisation for a fixed program structure: AdaGrad descent,
// temporary parameters standing in for variables, and KD-tree snapping of
// those temporaries back onto variables in memory.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "pim/autodiff.hpp"
#include "pim/machine.hpp"
#include "pim/sexpr.hpp"
#include "pim/trace.hpp"

namespace pim {

struct OptimizerConfig {
    double lr = 0.5;
    double stab = 1e-8;
    std::size_t budget = 200;
    /// Step-size adaptation on top of AdaGrad: shrink after an iteration that
    /// raised the loss, grow slightly otherwise.
    double lr_shrink = 0.5;
    double lr_grow = 1.05;
    /// Relax variable leaves into temporary parameters.
    bool relax_vars = true;
};

/// A variable leaf temporarily optimised as a continuous parameter.
struct TempParam {
    Path path;
    std::string param_id;
    std::string origin; ///< variable the value currently comes from
    std::size_t t_read = 0;
};

struct OptimState {
    std::map<std::string, Vec> accum;
    double lr = 0.5;
    std::vector<TempParam> temps;
    std::size_t iter = 0;
    double best_loss = std::numeric_limits<double>::infinity();

    void reset_history()
    {
        for (auto& [id, a] : accum) std::fill(a.begin(), a.end(), 0.0);
    }
};

using ParamFilter = std::function<bool(const std::string&)>;

/// One AdaGrad update of every parameter accepted by `trainable`.
inline std::map<std::string, Vec> adagrad_step(OptimState& state, std::map<std::string, Vec> params,
                                               const GradientSet& grads, double stab = 1e-8,
                                               const ParamFilter& trainable = {})
{
    for (auto& [id, value] : params) {
        if (trainable && !trainable(id)) continue;
        auto g = grads.by_param.find(id);
        if (g == grads.by_param.end()) continue;
        auto& acc = state.accum.try_emplace(id, Vec(value.size(), 0.0)).first->second;
        for (std::size_t k = 0; k < value.size(); ++k) {
            const double gk = g->second[k];
            if (gk == 0.0) continue;
            acc[k] += gk * gk;
            value[k] -= state.lr * gk / (std::sqrt(acc[k]) + stab);
        }
    }
    ++state.iter;
    return params;
}

struct SnapResult {
    bool snapped = false;
    std::string variable; ///< origin after the call
};

/// Moves a drifted temporary onto the nearest variable at its read time when
/// that variable differs from its current origin. A move resets the gradient
/// history of every parameter.
inline SnapResult snap_variable(OptimState& state, TempParam& temp, Vec& value, const KdIndex& idx)
{
    KdIndex::Hit hit;
    try {
        hit = idx.nearest(temp.t_read, value);
    } catch (const Error&) {
        return {false, temp.origin};
    }
    if (hit.id == temp.origin) return {false, temp.origin};
    value = hit.value;
    temp.origin = hit.id;
    state.reset_history();
    return {true, temp.origin};
}

struct OptimizeResult {
    Program program;
    double loss = std::numeric_limits<double>::infinity();
    std::size_t iterations = 0;
    bool failed = false;
    ExecResult exec;
    GradientSet grads;
};

namespace detail {

inline bool finite_result(const ExecResult& r, const Program& p)
{
    if (!std::isfinite(r.loss)) return false;
    for (const auto& [id, v] : p.params)
        if (!vec::all_finite(v)) return false;
    return true;
}

inline bool finite_grads(const GradientSet& g)
{
    for (const auto& [id, v] : g.by_param)
        if (!vec::all_finite(v)) return false;
    return true;
}

/// Variable leaves read exactly once, with the time of that read.
inline std::map<Path, std::size_t> single_reads(const CallTrace& chi)
{
    std::map<Path, std::size_t> count, when;
    for (const auto& node : chi.nodes)
        for (const auto& a : node.args)
            if (a.kind == ArgSource::Kind::VarRead) {
                ++count[a.path];
                when[a.path] = a.t;
            }
    std::map<Path, std::size_t> out;
    for (const auto& [path, n] : count)
        if (n == 1) out[path] = when[path];
    return out;
}

} // namespace detail

/// Optimises the parameters of a fixed structure.
///
/// When a variable leaf that is read once has the largest gradient among such
/// leaves (ties going to the leaves behind the largest action error), it is
/// first relaxed into a temporary parameter and descended alone
/// (other parameters held) with a snap after every step. The temporary is
/// then replaced by its nearest variable and the ordinary parameters are
/// descended for the rest of the budget. The best parameters seen are kept.
inline OptimizeResult optimize(const Program& candidate, const ObservationTrace& trace, const ErrorSpec& spec,
                               const OptimizerConfig& cfg, const KdIndex& idx,
                               const FunctionLibrary& lib = FunctionLibrary::standard())
{
    const Machine machine(trace, spec, lib);
    OptimizeResult out;
    Program prog = candidate;

    auto fail = [&](Program p) {
        out.program = std::move(p);
        out.failed = true;
        out.loss = std::numeric_limits<double>::infinity();
        return out;
    };

    ExecResult exec = machine.execute(prog);
    if (!detail::finite_result(exec, prog)) return fail(prog);
    if (exec.loss <= spec.e_acc || cfg.budget == 0) {
        out.grads = backprop(exec.chi, spec, lib);
        out.program = std::move(prog);
        out.loss = exec.loss;
        out.exec = std::move(exec);
        return out;
    }
    GradientSet grads = backprop(exec.chi, spec, lib);

    OptimState state;
    state.lr = cfg.lr;
    std::size_t used = 0;

    // Relaxation of the single-read variable leaves with the largest gradient
    // norm. A norm loss has a unit gradient at any nonzero residual, so among
    // tied norms only the leaves feeding the worst-explained action count.
    {
        const auto reads = detail::single_reads(exec.chi);
        auto sigma_of = [&](const Path& path) {
            auto it = grads.leaf_sigma.find(path);
            return it == grads.leaf_sigma.end() ? 0.0 : it->second;
        };
        double best_norm = 0.0;
        for (const auto& [path, t] : reads) best_norm = std::max(best_norm, grads.leaf_norm(path));
        const double tol = 1e-6 * best_norm;
        double best_sigma = 0.0;
        for (const auto& [path, t] : reads)
            if (grads.leaf_norm(path) >= best_norm - tol) best_sigma = std::max(best_sigma, sigma_of(path));
        std::map<std::string, Vec> start;
        if (cfg.relax_vars && best_norm > 0.0) {
            for (const auto& [path, t] : reads) {
                if (grads.leaf_norm(path) < best_norm - tol) continue;
                if (sigma_of(path) < best_sigma * (1.0 - 1e-9)) continue;
                const Expr* leaf = node_at(prog, path);
                const std::string id = "~t" + std::to_string(state.temps.size());
                state.temps.push_back({path, id, leaf->name, t});
                start[id] = trace.steps[t - 1].state.at(leaf->name);
            }
        }
        for (auto& temp : state.temps) {
            prog = replace_leaf(prog, temp.path, Expr::param(temp.param_id, start[temp.param_id].size()),
                                {{temp.param_id, start[temp.param_id]}});
            temp.param_id = node_at(prog, temp.path)->name;
        }
    }

    if (!state.temps.empty()) {
        const std::size_t phase_budget = std::max<std::size_t>(1, cfg.budget / 2);
        std::vector<std::string> temp_ids;
        for (const auto& t : state.temps) temp_ids.push_back(t.param_id);
        const ParamFilter only_temps = [&](const std::string& id) {
            return std::find(temp_ids.begin(), temp_ids.end(), id) != temp_ids.end();
        };
        double prev = std::numeric_limits<double>::infinity();
        for (; used < phase_budget; ++used) {
            exec = machine.execute(prog);
            if (!detail::finite_result(exec, prog)) return fail(candidate);
            if (exec.loss <= spec.e_acc) break;
            state.lr *= exec.loss > prev ? cfg.lr_shrink : cfg.lr_grow;
            prev = exec.loss;
            grads = backprop(exec.chi, spec, lib);
            if (!detail::finite_grads(grads)) return fail(candidate);
            prog.params = adagrad_step(state, std::move(prog.params), grads, cfg.stab, only_temps);
            for (auto& temp : state.temps) {
                if (snap_variable(state, temp, prog.params.at(temp.param_id), idx).snapped) {
                    state.lr = cfg.lr;
                    prev = std::numeric_limits<double>::infinity();
                }
            }
        }
        // Temporaries go back to being variables.
        for (const auto& temp : state.temps) {
            const Vec value = prog.params.at(temp.param_id);
            try {
                const auto hit = idx.nearest(temp.t_read, value);
                prog = replace_leaf(prog, temp.path, Expr::var(hit.id, value.size()));
            } catch (const Error&) {
                // No variable of that dim: the temporary stays a parameter.
            }
        }
        state.temps.clear();
        state.accum.clear();
        state.lr = cfg.lr;
    }

    exec = machine.execute(prog);
    if (!detail::finite_result(exec, prog)) return fail(candidate);
    Program best = prog;
    ExecResult best_exec = exec;
    while (used < cfg.budget && !prog.params.empty()) {
        if (best_exec.loss <= spec.e_acc) break;
        grads = backprop(best_exec.chi, spec, lib);
        if (!detail::finite_grads(grads)) return fail(candidate);
        prog.params = adagrad_step(state, best.params, grads, cfg.stab);
        ++used;
        exec = machine.execute(prog);
        if (detail::finite_result(exec, prog) && exec.loss < best_exec.loss) {
            best = prog;
            best_exec = std::move(exec);
            state.lr *= cfg.lr_grow;
        } else {
            // A parameter that already fits its actions exactly still sees a
            // unit norm gradient, so a joint step can be ruined by it. Before
            // shrinking, try each parameter on its own.
            bool improved = false;
            for (const auto& [id, value] : best.params) {
                if (used >= cfg.budget || best.params.size() < 2) break;
                OptimState trial = state;
                Program single = best;
                single.params = adagrad_step(trial, best.params, grads, cfg.stab,
                                             [&id = id](const std::string& p) { return p == id; });
                ++used;
                ExecResult e = machine.execute(single);
                if (detail::finite_result(e, single) && e.loss < best_exec.loss) {
                    state = std::move(trial);
                    best = std::move(single);
                    best_exec = std::move(e);
                    improved = true;
                    break;
                }
            }
            // Bold driver: reject the step and retry from the best point.
            state.lr *= improved ? cfg.lr_grow : cfg.lr_shrink;
        }
    }

    out.exec = machine.execute(best);
    out.loss = out.exec.loss;
    out.grads = backprop(out.exec.chi, spec, lib);
    out.program = std::move(best);
    out.iterations = used;
    return out;
}

inline OptimizeResult optimize(const Program& candidate, const ObservationTrace& trace, const ErrorSpec& spec,
                               const OptimizerConfig& cfg = {})
{
    const KdIndex idx(trace);
    return optimize(candidate, trace, spec, cfg, idx);
}

} // namespace pim
