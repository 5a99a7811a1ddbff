#pragma once

// Reverse-mode differentiation of the loss through a recorded call trace.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "pim/machine.hpp"
#include "pim/sexpr.hpp"
#include "pim/trace.hpp"
#include "pim/vec.hpp"

namespace pim {

struct GradientSet {
    std::map<std::string, Vec> by_param;
    std::map<std::string, Vec> by_var; ///< summed over every read of the variable
    std::map<Path, Vec> by_leaf;
    /// Largest action error among the scored emissions each leaf fed into.
    std::map<Path, double> leaf_sigma;

    double leaf_norm(const Path& path) const
    {
        auto it = by_leaf.find(path);
        return it == by_leaf.end() ? 0.0 : vec::norm(it->second);
    }
};

namespace detail {

inline void accumulate(std::map<std::string, Vec>& into, const std::string& key, const Vec& g)
{
    auto [it, inserted] = into.try_emplace(key, g);
    if (!inserted) vec::axpy(1.0, g, it->second);
}

inline void accumulate(std::map<Path, Vec>& into, const Path& key, const Vec& g)
{
    auto [it, inserted] = into.try_emplace(key, g);
    if (!inserted) vec::axpy(1.0, g, it->second);
}

} // namespace detail

/// Walks the call trace backwards, pushing vector-Jacobian products from each
/// scored action down to the parameters and variable reads that produced it.
/// The length term does not depend on parameters and contributes nothing.
inline GradientSet backprop(const CallTrace& chi, const ErrorSpec& spec,
                            const FunctionLibrary& lib = FunctionLibrary::standard())
{
    GradientSet out;
    // Every leaf that took part gets an entry, zero if nothing flows into it.
    for (const auto& node : chi.nodes) {
        for (const auto& a : node.args) {
            if (a.kind == ArgSource::Kind::Node) continue;
            const Vec zero(a.value.size(), 0.0);
            out.by_leaf.try_emplace(a.path, zero);
            out.leaf_sigma.try_emplace(a.path, 0.0);
            if (a.kind == ArgSource::Kind::Param) out.by_param.try_emplace(a.id, zero);
            if (a.kind == ArgSource::Kind::VarRead) out.by_var.try_emplace(a.id, zero);
        }
    }

    std::vector<std::size_t> stack;
    for (const auto& em : chi.emitted) {
        if (!em.scored) continue;
        stack.assign(1, em.node);
        while (!stack.empty()) {
            const CallNode& node = chi.nodes[stack.back()];
            stack.pop_back();
            for (const auto& a : node.args) {
                if (a.kind == ArgSource::Kind::Node) stack.push_back(a.node);
                else {
                    double& s = out.leaf_sigma[a.path];
                    s = std::max(s, em.sigma);
                }
            }
        }
    }

    std::vector<Vec> adj(chi.nodes.size());
    for (const auto& em : chi.emitted) {
        if (!em.scored) continue;
        Vec seed = spec.sigma_act_grad(em.action, em.theta, em.observed_action, em.observed_theta);
        if (adj[em.node].empty()) adj[em.node] = std::move(seed);
        else vec::axpy(1.0, seed, adj[em.node]);
    }

    std::vector<Vec> arg_values;
    for (std::size_t n = chi.nodes.size(); n-- > 0;) {
        if (adj[n].empty()) continue;
        const CallNode& node = chi.nodes[n];
        const FunctionSpec* f = node.is_action ? nullptr : &lib.at(node.fn);
        if (f) {
            arg_values.clear();
            for (const auto& a : node.args)
                arg_values.push_back(a.kind == ArgSource::Kind::Node ? chi.nodes[a.node].value : a.value);
        }
        for (std::size_t i = 0; i < node.args.size(); ++i) {
            const ArgSource& a = node.args[i];
            Vec g = f ? f->vjp(arg_values, adj[n], i) : adj[n];
            switch (a.kind) {
            case ArgSource::Kind::Node:
                if (adj[a.node].empty()) adj[a.node] = std::move(g);
                else vec::axpy(1.0, g, adj[a.node]);
                break;
            case ArgSource::Kind::Param:
                detail::accumulate(out.by_param, a.id, g);
                detail::accumulate(out.by_leaf, a.path, g);
                break;
            case ArgSource::Kind::VarRead:
                detail::accumulate(out.by_var, a.id, g);
                detail::accumulate(out.by_leaf, a.path, g);
                break;
            case ArgSource::Kind::Const: detail::accumulate(out.by_leaf, a.path, g); break;
            }
        }
    }
    return out;
}

struct GradientCheck {
    double max_rel_error = 0.0;
    std::size_t coordinates = 0;
    /// The point sits on an abort boundary or another discontinuity, where
    /// finite differences are meaningless.
    bool excluded = false;
};

/// Central finite differences on every parameter coordinate against backprop.
/// The relative error of a coordinate is |analytic - numeric| divided by
/// max(|analytic|, |numeric|, 1).
inline GradientCheck check_gradients(const Program& p, const ObservationTrace& trace, const ErrorSpec& spec,
                                     double eps = 1e-6, const FunctionLibrary& lib = FunctionLibrary::standard())
{
    GradientCheck out;
    const ExecResult base = execute(p, trace, spec, lib);
    if (base.status == ExecStatus::Aborted) {
        out.excluded = true;
        return out;
    }
    // An abort threshold within reach of some action makes the loss
    // discontinuous nearby.
    for (double factor : {1.0 - 1e-6, 1.0 + 1e-6}) {
        ErrorSpec moved = spec;
        moved.e_max = spec.e_max * factor;
        const ExecResult r = execute(p, trace, moved, lib);
        if (r.status != base.status || r.executed != base.executed) {
            out.excluded = true;
            return out;
        }
    }
    const GradientSet grads = backprop(base.chi, spec, lib);
    for (const auto& [id, value] : p.params) {
        auto g = grads.by_param.find(id);
        for (std::size_t k = 0; k < value.size(); ++k) {
            Program plus = p, minus = p;
            plus.params[id][k] += eps;
            minus.params[id][k] -= eps;
            const ExecResult rp = execute(plus, trace, spec, lib);
            const ExecResult rm = execute(minus, trace, spec, lib);
            if (rp.status != base.status || rm.status != base.status || rp.executed != base.executed
                || rm.executed != base.executed) {
                out.excluded = true;
                return out;
            }
            const double numeric = (rp.loss - rm.loss) / (2.0 * eps);
            const double analytic = g == grads.by_param.end() ? 0.0 : g->second[k];
            const double denom = std::max({std::abs(analytic), std::abs(numeric), 1.0});
            out.max_rel_error = std::max(out.max_rel_error, std::abs(analytic - numeric) / denom);
            ++out.coordinates;
        }
    }
    return out;
}

} // namespace pim
