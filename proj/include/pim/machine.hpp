#pragma once

// The abstract machine: replays a program against an observation trace,
// scoring each emitted action and recording the call trace that the backward
// pass differentiates.

#include <algorithm>
#include <cstddef>
#include <map>
#include <mutex>
#include <string>
#include <utility>
#include <vector>

#include "pim/kdtree.hpp"
#include "pim/sexpr.hpp"
#include "pim/trace.hpp"
#include "pim/vec.hpp"

namespace pim {

/// Where a function argument came from. Leaf sources keep the AST path of the
/// leaf and the time step at which they were evaluated.
struct ArgSource {
    enum class Kind { Param, VarRead, Node, Const };

    Kind kind = Kind::Const;
    std::string id;        ///< parameter or variable id
    std::size_t t = 0;     ///< 1-based time of the read
    Vec value;             ///< value at the time of the read, never updated
    std::size_t node = 0;  ///< index into CallTrace::nodes (Kind::Node)
    Path path;             ///< leaf position (all kinds except Node)
};

struct CallNode {
    std::string fn; ///< function id, or action id when is_action
    bool is_action = false;
    Vec value;
    std::vector<ArgSource> args;
};

struct Emission {
    std::string action;
    Vec theta;
    double sigma = 0.0;
    std::size_t t = 0;    ///< 1-based
    std::size_t node = 0; ///< the action's CallNode
    bool scored = false;  ///< false once the observation trace is exhausted
    std::string observed_action; ///< a_t, scored emissions only
    Vec observed_theta;          ///< theta_t, scored emissions only
};

/// Computational tree of one execution, in evaluation order (children precede
/// their parents).
struct CallTrace {
    std::vector<CallNode> nodes;
    std::vector<Emission> emitted;
};

enum class ExecStatus { Completed, Aborted };

struct ExecResult {
    double loss = 0.0;
    CallTrace chi;
    ExecStatus status = ExecStatus::Completed;
    std::size_t aborted_at = 0; ///< 1-based step of the abort
    std::size_t executed = 0;   ///< T', number of actions emitted

    std::vector<EmittedAction> actions() const
    {
        std::vector<EmittedAction> out;
        out.reserve(chi.emitted.size());
        for (const auto& e : chi.emitted) out.push_back({e.action, e.theta});
        return out;
    }
};

/// Memory of the machine at one instant: variables bound to the observed
/// state at time t, plus the program parameters.
struct MemoryState {
    const ObservationTrace* trace = nullptr;
    const std::map<std::string, Vec>* params = nullptr;
    std::size_t t = 1;

    /// Past the end of the trace the last observed state stays bound.
    const std::map<std::string, Vec>& vars() const
    {
        static const std::map<std::string, Vec> none;
        if (!trace || trace->steps.empty()) return none;
        return trace->steps[std::min(t, trace->steps.size()) - 1].state;
    }

    bool exhausted() const { return !trace || t > trace->steps.size(); }
};

/// One instruction with its evaluated arguments.
struct Instruction {
    std::string id;
    bool is_action = false;
    std::vector<ArgSource> args;
};

/// Lazily built per-(time, dim) KD-trees over the variables in memory.
/// Queries are safe from several threads.
class KdIndex {
public:
    explicit KdIndex(const ObservationTrace& trace)
        : trace_(&trace)
    {
    }

    KdIndex(const KdIndex&) = delete;
    KdIndex& operator=(const KdIndex&) = delete;

    struct Hit {
        std::string id;
        Vec value;
    };

    /// Variable whose value at time t (1-based) is nearest to `value`; ties
    /// go to the lexicographically smaller id. Throws when no variable of that
    /// dimension exists.
    Hit nearest(std::size_t t, const Vec& value) const
    {
        const KdTree& tree = tree_for(t, value.size());
        auto hit = tree.nearest(value);
        if (!hit) throw Error("no variable of dim " + std::to_string(value.size()) + " in memory");
        return {hit->id, hit->value};
    }

private:
    const KdTree& tree_for(std::size_t t, std::size_t dim) const
    {
        if (t == 0 || t > trace_->steps.size()) throw Error("KdIndex: time " + std::to_string(t) + " out of range");
        std::lock_guard lock(mutex_);
        auto key = std::make_pair(t, dim);
        auto it = cache_.find(key);
        if (it == cache_.end()) {
            std::vector<KdTree::Point> pts;
            for (const auto& [id, v] : trace_->steps[t - 1].state)
                if (v.size() == dim) pts.push_back({id, v});
            it = cache_.emplace(key, KdTree(std::move(pts))).first;
        }
        return it->second;
    }

    const ObservationTrace* trace_;
    mutable std::mutex mutex_;
    mutable std::map<std::pair<std::size_t, std::size_t>, KdTree> cache_;
};

/// Free function form of the KD query.
inline KdIndex::Hit nearest_variable(const KdIndex& idx, std::size_t t, const Vec& value)
{
    return idx.nearest(t, value);
}

class Machine {
public:
    Machine(const ObservationTrace& trace, const ErrorSpec& spec, const FunctionLibrary& lib)
        : trace_(trace)
        , spec_(spec)
        , lib_(lib)
    {
    }
    // The machine keeps references; temporaries would dangle.
    Machine(const ObservationTrace&, const ErrorSpec&, FunctionLibrary&&) = delete;
    Machine(ObservationTrace&&, const ErrorSpec&, const FunctionLibrary&) = delete;
    Machine(const ObservationTrace&, ErrorSpec&&, const FunctionLibrary&) = delete;

    /// Effect of one instruction. Functions append a node and leave memory
    /// alone; actions are scored, recorded, and advance time.
    MemoryState exec_step(MemoryState m, const Instruction& instr, CallTrace& chi) const
    {
        CallNode node;
        node.fn = instr.id;
        node.is_action = instr.is_action;
        node.args = instr.args;
        if (!instr.is_action) {
            const FunctionSpec& f = lib_.at(instr.id);
            std::vector<Vec> vals;
            vals.reserve(instr.args.size());
            for (const auto& a : instr.args) vals.push_back(value_of(a, chi));
            node.value = f.eval(vals);
            chi.nodes.push_back(std::move(node));
            return m;
        }
        if (instr.args.size() != 1) throw Error("action '" + instr.id + "' takes exactly one argument");
        node.value = value_of(instr.args[0], chi);
        chi.nodes.push_back(node);
        Emission em;
        em.action = instr.id;
        em.theta = node.value;
        em.t = m.t;
        em.node = chi.nodes.size() - 1;
        em.scored = !m.exhausted();
        if (em.scored) {
            const Step& obs = trace_.steps[m.t - 1];
            em.sigma = spec_.sigma_act(em.action, em.theta, obs.action, obs.theta);
            em.observed_action = obs.action;
            em.observed_theta = obs.theta;
        }
        chi.emitted.push_back(std::move(em));
        ++m.t;
        return m;
    }

    ExecResult execute(const Program& p) const
    {
        ExecResult res;
        MemoryState m{&trace_, &p.params, 1};
        const std::size_t T = trace_.length();
        bool aborted = false;

        auto run_body_once = [&]() {
            for (std::size_t i = 0; i < p.body.size() && !aborted; ++i) {
                if (p.policy == ExecPolicy::RepeatBody && m.exhausted()) return;
                Path path{i};
                eval(p.body[i], p, m, res.chi, path);
                const Emission& em = res.chi.emitted.back();
                if (em.scored && em.sigma > spec_.e_max) {
                    aborted = true;
                    res.status = ExecStatus::Aborted;
                    res.aborted_at = em.t;
                }
            }
        };

        if (p.policy == ExecPolicy::RepeatBody) {
            while (!p.body.empty() && !m.exhausted() && !aborted) run_body_once();
        } else {
            run_body_once();
        }

        res.executed = res.chi.emitted.size();
        double total = 0.0;
        for (const auto& em : res.chi.emitted)
            if (em.scored) total += em.sigma;
        if (aborted) {
            // Unexecuted steps are charged the abort threshold each, so an
            // aborted candidate never undercuts one that ran to completion.
            const std::size_t t = res.aborted_at;
            total += spec_.sigma_len(T, t) + static_cast<double>(T - t) * spec_.e_max;
        } else {
            total += spec_.sigma_len(T, res.executed);
        }
        res.loss = total;
        return res;
    }

private:
    static const Vec& value_of(const ArgSource& a, const CallTrace& chi)
    {
        return a.kind == ArgSource::Kind::Node ? chi.nodes[a.node].value : a.value;
    }

    /// Evaluates innermost-first; returns how the parent sees the result.
    ArgSource eval(const Expr& e, const Program& p, MemoryState& m, CallTrace& chi, Path& path) const
    {
        ArgSource src;
        switch (e.kind) {
        case ExprKind::Var: {
            const auto& vars = m.vars();
            auto it = vars.find(e.name);
            if (it == vars.end()) throw Error("variable '" + e.name + "' not in memory");
            if (it->second.size() != e.dim) throw Error("variable '" + e.name + "' has unexpected dim");
            src.kind = ArgSource::Kind::VarRead;
            src.id = e.name;
            src.value = it->second;
            src.t = m.t;
            src.path = path;
            return src;
        }
        case ExprKind::Param: {
            auto it = p.params.find(e.name);
            if (it == p.params.end()) throw Error("parameter '" + e.name + "' has no value");
            src.kind = ArgSource::Kind::Param;
            src.id = e.name;
            src.value = it->second;
            src.t = m.t;
            src.path = path;
            return src;
        }
        case ExprKind::Const:
            src.kind = ArgSource::Kind::Const;
            src.value = e.value;
            src.t = m.t;
            src.path = path;
            return src;
        case ExprKind::Call:
        case ExprKind::Action: {
            Instruction instr;
            instr.id = e.name;
            instr.is_action = e.kind == ExprKind::Action;
            instr.args.reserve(e.args.size());
            for (std::size_t i = 0; i < e.args.size(); ++i) {
                path.push_back(i);
                instr.args.push_back(eval(e.args[i], p, m, chi, path));
                path.pop_back();
            }
            m = exec_step(m, instr, chi);
            src.kind = ArgSource::Kind::Node;
            src.node = chi.nodes.size() - 1;
            return src;
        }
        }
        return src;
    }

    const ObservationTrace& trace_;
    const ErrorSpec& spec_;
    const FunctionLibrary& lib_;
};

inline ExecResult execute(const Program& p, const ObservationTrace& trace, const ErrorSpec& spec,
                          const FunctionLibrary& lib = FunctionLibrary::standard())
{
    return Machine(trace, spec, lib).execute(p);
}

} // namespace pim
