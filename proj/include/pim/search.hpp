#pragma once

// A* search over program structures. Nodes are ASTs, edges replace one leaf by
// a depth-1 function application; the score of a node is its structural
// complexity plus its optimised loss.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <memory>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <queue>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "pim/autodiff.hpp"
#include "pim/machine.hpp"
#include "pim/optimizer.hpp"
#include "pim/sexpr.hpp"
#include "pim/trace.hpp"

namespace pim {

struct ComplexityWeights {
    double depth = 10.0;
    double params = 5.0;
    double vars = 1.0;
};

/// Weighted sum of AST depth, distinct free parameters and variable leaf
/// occurrences. Constants written into the program text are not free
/// parameters.
inline double complexity(const Program& p, const ComplexityWeights& w = {})
{
    std::size_t vars = 0;
    std::function<void(const Expr&)> count = [&](const Expr& e) {
        if (e.kind == ExprKind::Var) ++vars;
        for (const auto& a : e.args) count(a);
    };
    for (const auto& e : p.body) count(e);
    return w.depth * static_cast<double>(depth(p)) + w.params * static_cast<double>(param_names(p).size())
        + w.vars * static_cast<double>(vars);
}

namespace detail {

inline std::string fn_id(const Expr& e, const FunctionLibrary& lib)
{
    if (e.kind != ExprKind::Call) return {};
    const FunctionSpec* f = lib.find(e.name);
    return f ? f->id : e.name;
}

struct Simplifier {
    const FunctionLibrary& lib;
    std::map<std::string, Vec>& params;
    std::size_t fresh = 0;
    std::map<std::string, std::size_t> uses; ///< occurrences of each parameter

    Expr fresh_param(Vec v)
    {
        std::string id;
        do id = "~s" + std::to_string(fresh++);
        while (params.count(id));
        const std::size_t dim = v.size();
        params[id] = std::move(v);
        uses[id] = 1;
        return Expr::param(id, dim);
    }

    /// Index of the parameter factor of a scale node, if it has one.
    std::optional<std::size_t> param_factor(const Expr& e) const
    {
        if (fn_id(e, lib) != "scale") return std::nullopt;
        if (e.args[0].kind == ExprKind::Param && e.args[0].dim == 1) return 0;
        if (e.dim == 1 && e.args[1].kind == ExprKind::Param) return 1;
        return std::nullopt;
    }

    /// Bottom-up: calls over parameters only collapse into one parameter;
    /// a parameter scale of a parameter scale collapses into one scale;
    /// subtracting a parameter used nowhere else becomes adding its negation.
    Expr fold(Expr e)
    {
        for (auto& a : e.args) a = fold(std::move(a));
        if (e.kind != ExprKind::Call) return e;
        const bool all_params = std::all_of(e.args.begin(), e.args.end(),
                                            [](const Expr& a) { return a.kind == ExprKind::Param; });
        if (all_params) {
            std::vector<Vec> vals;
            for (const auto& a : e.args) vals.push_back(params.at(a.name));
            return fresh_param(lib.at(e.name).eval(vals));
        }
        if (auto i = param_factor(e)) {
            const Expr& inner = e.args[1 - *i];
            if (auto j = param_factor(inner)) {
                const double c = params.at(e.args[*i].name)[0] * params.at(inner.args[*j].name)[0];
                Expr rest = inner.args[1 - *j];
                return Expr::call(e.name, e.dim, {fresh_param(Vec{c}), std::move(rest)});
            }
        }
        if (fn_id(e, lib) == "sub" && e.args[1].kind == ExprKind::Param && uses[e.args[1].name] == 1
            && lib.find("add")) {
            Expr neg = fresh_param(vec::scale(-1.0, params.at(e.args[1].name)));
            return Expr::call(lib.find("add")->id, e.dim, {std::move(neg), std::move(e.args[0])});
        }
        return e;
    }

    /// (* c (+ a b)) -> (+ (* c a) (* c b)), likewise for -, then folded.
    std::optional<Expr> distribute(const Expr& e)
    {
        auto i = param_factor(e);
        if (!i) return std::nullopt;
        const Expr& inner = e.args[1 - *i];
        const std::string id = fn_id(inner, lib);
        if (id != "add" && id != "sub") return std::nullopt;
        const Expr& c = e.args[*i];
        std::vector<Expr> parts;
        for (const auto& a : inner.args) parts.push_back(fold(Expr::call(e.name, a.dim, {c, a})));
        return Expr::call(inner.name, inner.dim, std::move(parts));
    }

    /// Sum of variable terms plus a constant, when `e` is built only from
    /// add, sub, parameter scales, variables and parameters.
    struct Linear {
        std::map<std::string, std::pair<double, std::size_t>> terms; ///< var -> (coefficient, dim)
        std::optional<Vec> constant;
    };

    std::optional<Linear> linearize(const Expr& e) const
    {
        Linear out;
        switch (e.kind) {
        case ExprKind::Var: out.terms[e.name] = {1.0, e.dim}; return out;
        case ExprKind::Param: out.constant = params.at(e.name); return out;
        case ExprKind::Const: out.constant = e.value; return out;
        case ExprKind::Action: return std::nullopt;
        case ExprKind::Call: break;
        }
        const std::string id = fn_id(e, lib);
        if (id == "add" || id == "sub") {
            auto a = linearize(e.args[0]);
            auto b = linearize(e.args[1]);
            if (!a || !b) return std::nullopt;
            const double sign = id == "add" ? 1.0 : -1.0;
            for (const auto& [v, t] : b->terms) {
                auto& slot = a->terms.try_emplace(v, 0.0, t.second).first->second;
                slot.first += sign * t.first;
            }
            if (b->constant) {
                const Vec c = vec::scale(sign, *b->constant);
                a->constant = a->constant ? vec::add(*a->constant, c) : c;
            }
            return a;
        }
        if (auto i = param_factor(e)) {
            auto inner = linearize(e.args[1 - *i]);
            if (!inner) return std::nullopt;
            const double c = params.at(e.args[*i].name)[0];
            for (auto& [v, t] : inner->terms) t.first *= c;
            if (inner->constant) inner->constant = vec::scale(c, *inner->constant);
            return inner;
        }
        return std::nullopt;
    }

    /// Rebuilds a linear call with like terms collected: unit coefficients
    /// drop their scale, minus-one terms move to a subtraction.
    std::optional<Expr> collect(const Expr& e)
    {
        if (e.kind != ExprKind::Call) return std::nullopt;
        const FunctionSpec* add = lib.find("add");
        const FunctionSpec* sub = lib.find("sub");
        const FunctionSpec* scale = lib.find("scale");
        if (!add || !sub || !scale) return std::nullopt;
        auto lin = linearize(e);
        if (!lin) return std::nullopt;
        std::vector<Expr> pos;
        std::vector<Expr> neg;
        if (lin->constant && std::any_of(lin->constant->begin(), lin->constant->end(),
                                         [](double x) { return x != 0.0; }))
            pos.push_back(fresh_param(*lin->constant));
        for (const auto& [v, t] : lin->terms) {
            const auto [c, dim] = t;
            if (c == 0.0) return std::nullopt; // cancelled variables stay a self-difference
            if (c == 1.0) pos.push_back(Expr::var(v, dim));
            else if (c == -1.0) neg.push_back(Expr::var(v, dim));
            else pos.push_back(Expr::call(scale->id, dim, {fresh_param(Vec{c}), Expr::var(v, dim)}));
        }
        if (pos.empty() && neg.empty()) return std::nullopt;
        if (pos.empty()) {
            const std::size_t dim = neg.front().dim;
            pos.push_back(Expr::call(scale->id, dim, {fresh_param(Vec{-1.0}), std::move(neg.front())}));
            neg.erase(neg.begin());
        }
        std::function<Expr(std::vector<Expr>&, std::size_t, std::size_t)> sum =
            [&](std::vector<Expr>& xs, std::size_t lo, std::size_t hi) -> Expr {
            if (hi - lo == 1) return std::move(xs[lo]);
            const std::size_t mid = lo + (hi - lo + 1) / 2;
            Expr l = sum(xs, lo, mid);
            Expr r = sum(xs, mid, hi);
            return Expr::call(add->id, e.dim, {std::move(l), std::move(r)});
        };
        Expr out = sum(pos, 0, pos.size());
        if (!neg.empty()) out = Expr::call(sub->id, e.dim, {std::move(out), sum(neg, 0, neg.size())});
        return out;
    }
};

inline void collect_paths(const Expr& e, Path& path, std::vector<Path>& out)
{
    if (e.kind == ExprKind::Call) out.push_back(path);
    for (std::size_t i = 0; i < e.args.size(); ++i) {
        path.push_back(i);
        collect_paths(e.args[i], path, out);
        path.pop_back();
    }
}

/// True when some subtraction takes a subtree from an identical copy of
/// itself, which is the zero vector whatever the state.
inline bool has_self_difference(const Expr& e, const FunctionLibrary& lib)
{
    if (fn_id(e, lib) == "sub" && e.args[0] == e.args[1]) return true;
    return std::any_of(e.args.begin(), e.args.end(),
                       [&](const Expr& a) { return has_self_difference(a, lib); });
}

} // namespace detail

/// Algebraic simplification that preserves the program's outputs: calls
/// whose arguments are all parameters fold into one parameter, nested
/// parameter scales merge, and a parameter scale distributes over + or -
/// whenever that lowers the complexity. With `collect`, linear subtrees are
/// also rebuilt with like terms gathered when that lowers the complexity.
/// The result is canonical.
inline Program simplify(const Program& p, const FunctionLibrary& lib = FunctionLibrary::standard(),
                        const ComplexityWeights& w = {}, bool collect = false)
{
    Program out = p;
    detail::Simplifier s{lib, out.params, 0, {}};
    std::function<void(const Expr&)> count = [&](const Expr& e) {
        if (e.kind == ExprKind::Param) ++s.uses[e.name];
        for (const auto& a : e.args) count(a);
    };
    for (const auto& e : out.body) count(e);
    for (auto& e : out.body) e = s.fold(std::move(e));

    bool changed = true;
    while (changed) {
        changed = false;
        std::vector<Path> calls;
        for (std::size_t i = 0; i < out.body.size(); ++i) {
            Path path{i};
            detail::collect_paths(out.body[i], path, calls);
        }
        const double before = complexity(out, w);
        for (const auto& path : calls) {
            for (int rule = 0; rule < (collect ? 2 : 1) && !changed; ++rule) {
                const Expr& node = *node_at(out, path);
                auto rewritten = rule == 0 ? s.distribute(node) : s.collect(node);
                if (!rewritten) continue;
                Program trial = out;
                *detail::node_at(trial.body, path) = std::move(*rewritten);
                if (complexity(trial, w) < before) {
                    out = std::move(trial);
                    changed = true;
                }
            }
            if (changed) break;
        }
    }

    auto live = param_names(out);
    for (auto it = out.params.begin(); it != out.params.end();) {
        if (std::find(live.begin(), live.end(), it->first) == live.end()) it = out.params.erase(it);
        else ++it;
    }
    return canonicalize(out, lib);
}

struct Candidate {
    Program program;
    double loss = 0.0;
    double complexity = 0.0;
    double score = 0.0;
    GradientSet grads;
    std::size_t id = 0;
    std::size_t parent = 0;
    std::size_t executed = 0; ///< T' of the final execution
    double param_norm = 0.0;  ///< L2 norm over every parameter coordinate
    double rank = 0.0;        ///< queue key, see detail::queue_rank
    ExecStatus status = ExecStatus::Completed;
    bool accepted = false;
};

using Rng = std::mt19937_64;

/// What leaf selection needs to know about the observation being explained.
struct SelectContext {
    std::size_t trace_length = 0;
    const ErrorSpec* spec = nullptr;
};

/// Gradient-guided choice of the leaf to expand: the leaf whose loss gradient
/// has the largest L2 norm. Norms within a relative 1e-6 of each other are
/// tied, and a tie goes to the leaf feeding the worst-explained action, since
/// a norm loss has a unit gradient however small the residual is. For the
/// same reason a leaf whose actions all sit within the per-step share of
/// e_acc is not a candidate. Parameters were just optimised, so whatever
/// gradient they keep is a subgradient residue at a kink of the loss; they
/// are considered only when no variable leaf or the body slot has a
/// gradient. The body slot competes with the drop in length error that one
/// more action would bring. All-zero gradients fall back to a uniformly
/// drawn leaf.
inline Leaf select_leaf(const Candidate& c, const SelectContext& ctx, Rng& rng)
{
    std::vector<Leaf> all = leaves(c.program);
    if (c.program.empty()) return all.back();

    auto strength = [&](const Leaf& leaf, double& sigma) {
        sigma = 0.0;
        if (leaf.body_slot) {
            // Actions appended after an abort never run.
            if (!ctx.spec || !ctx.spec->sigma_len || c.status == ExecStatus::Aborted) return 0.0;
            const std::size_t now = c.program.body.size();
            return std::max(0.0, ctx.spec->sigma_len(ctx.trace_length, now)
                                     - ctx.spec->sigma_len(ctx.trace_length, now + 1));
        }
        if (auto it = c.grads.leaf_sigma.find(leaf.path); it != c.grads.leaf_sigma.end()) sigma = it->second;
        // Every action this leaf feeds is explained within its share of the
        // acceptance threshold.
        if (ctx.spec && ctx.trace_length > 0 && sigma <= ctx.spec->e_acc / static_cast<double>(ctx.trace_length))
            return 0.0;
        return c.grads.leaf_norm(leaf.path);
    };
    auto scan = [&](bool params) {
        std::optional<std::size_t> best;
        double best_norm = 0.0, best_sigma = 0.0;
        for (std::size_t i = 0; i < all.size(); ++i) {
            const bool is_param = !all[i].body_slot && all[i].expr.kind == ExprKind::Param;
            if (is_param != params) continue;
            double sigma = 0.0;
            const double n = strength(all[i], sigma);
            if (n <= 0.0) continue;
            const double tol = 1e-6 * std::max(n, best_norm);
            if (!best || n > best_norm + tol || (n >= best_norm - tol && sigma > best_sigma)) {
                best_norm = std::max(n, best_norm);
                best_sigma = sigma;
                best = i;
            }
        }
        return best;
    };
    if (auto best = scan(false)) return all[*best];
    if (auto best = scan(true)) return all[*best];

    std::vector<std::size_t> real;
    for (std::size_t i = 0; i < all.size(); ++i)
        if (!all[i].body_slot) real.push_back(i);
    if (real.empty()) return all.back();
    std::uniform_int_distribution<std::size_t> pick(0, real.size() - 1);
    return all[real[pick(rng)]];
}

namespace detail {

inline Vec sample_param(std::size_t dim, Rng& rng)
{
    // N(0, 0.1 I)
    std::normal_distribution<double> n(0.0, std::sqrt(0.1));
    Vec v(dim);
    for (auto& x : v) x = n(rng);
    return v;
}

inline std::optional<std::string> sample_var(const Schema& schema, std::size_t dim, Rng& rng)
{
    auto vars = schema.variables_of_dim(dim);
    if (vars.empty()) return std::nullopt;
    std::uniform_int_distribution<std::size_t> pick(0, vars.size() - 1);
    return vars[pick(rng)];
}

} // namespace detail

/// How variable slots of a proposed subtree are filled.
enum class VarChoice {
    Sample,    ///< one uniformly drawn variable of matching dim per slot
    Enumerate, ///< every variable of matching dim, one child per choice
};

/// Neighbours of a candidate through one leaf. A value leaf is replaced, for
/// every type-compatible function, by each of the 2^arity parameter/variable
/// argument patterns. The body slot grows the body by one action per action
/// id, whose argument is a variable of matching dim when one exists.
/// Results are unoptimised. With `simplified` set they are also simplified,
/// and structural duplicates and programs containing a self-difference
/// (- e e) are dropped; otherwise each is the parent with exactly one leaf
/// replaced.
inline std::vector<Program> expand(const Candidate& c, const Leaf& leaf, const FunctionLibrary& lib,
                                   const Schema& schema, Rng& rng, VarChoice choice = VarChoice::Enumerate,
                                   bool simplified = true)
{
    std::vector<Program> out;
    std::set<std::string> keys;
    auto emit = [&](Program p) {
        if (typecheck(p, schema, lib)) return;
        if (!simplified) {
            out.push_back(std::move(p));
            return;
        }
        p = simplify(p, lib);
        for (const auto& e : p.body)
            if (detail::has_self_difference(e, lib)) return;
        if (keys.insert(print(p, lib)).second) out.push_back(std::move(p));
    };
    // Candidate fillings of a variable slot; empty means "use a parameter".
    auto var_options = [&](std::size_t d) {
        std::vector<std::string> vars = schema.variables_of_dim(d);
        if (choice == VarChoice::Sample && !vars.empty()) {
            std::uniform_int_distribution<std::size_t> pick(0, vars.size() - 1);
            vars = {vars[pick(rng)]};
        }
        return vars;
    };

    if (leaf.body_slot) {
        for (const auto& [action, dim] : schema.actions) {
            const auto vars = var_options(dim);
            if (vars.empty()) {
                emit(replace_leaf(c.program, leaf.path, Expr::action(action, Expr::param("a", dim)),
                                  {{"a", detail::sample_param(dim, rng)}}));
            }
            for (const auto& v : vars) emit(replace_leaf(c.program, leaf.path, Expr::action(action, Expr::var(v, dim))));
        }
        return out;
    }

    const std::size_t dim = leaf.expr.dim;
    for (const auto& f : lib.entries()) {
        const auto dims = f.arg_dims(dim);
        if (!dims) continue;
        // The all-parameter pattern (mask 0) folds into a single parameter and
        // is left out.
        for (std::size_t mask = 1; mask < (std::size_t{1} << f.arity); ++mask) {
            // Per slot: the list of variables to try, or a parameter.
            std::vector<std::vector<std::string>> slots(f.arity);
            bool realisable = true;
            for (std::size_t i = 0; i < f.arity; ++i) {
                if (!(mask & (std::size_t{1} << i))) continue;
                slots[i] = var_options((*dims)[i]);
                realisable = realisable && !slots[i].empty();
            }
            if (!realisable) continue;
            std::vector<std::size_t> at(f.arity, 0);
            while (true) {
                std::vector<Expr> args;
                std::map<std::string, Vec> values;
                for (std::size_t i = 0; i < f.arity; ++i) {
                    const std::size_t d = (*dims)[i];
                    if (!slots[i].empty()) {
                        args.push_back(Expr::var(slots[i][at[i]], d));
                    } else {
                        const std::string name = "a" + std::to_string(i);
                        args.push_back(Expr::param(name, d));
                        values[name] = detail::sample_param(d, rng);
                    }
                }
                emit(replace_leaf(c.program, leaf.path, Expr::call(f.id, dim, std::move(args)), values));
                std::size_t i = 0;
                for (; i < f.arity; ++i) {
                    if (slots[i].empty()) continue;
                    if (++at[i] < slots[i].size()) break;
                    at[i] = 0;
                }
                if (i == f.arity) break;
            }
        }
    }
    return out;
}

struct SearchConfig {
    ComplexityWeights weights;
    OptimizerConfig opt;
    std::size_t outer_budget = 1000;
    std::size_t best_k = 3;
    std::uint64_t seed = 1;
    std::size_t workers = 1;
    std::optional<ExecPolicy> exec_policy;
    VarChoice var_choice = VarChoice::Enumerate;
};

struct ProgressRecord {
    std::size_t iteration = 0;
    std::size_t queue_size = 0;
    std::size_t evaluated = 0;
    double best_score = 0.0; ///< score of the node expanded this iteration
    std::string program;     ///< structure of that node
};

struct InduceResult {
    std::vector<Candidate> best; ///< best first
    bool accepted = false;
    std::size_t iterations = 0; ///< expansions performed
    std::size_t evaluated = 0;  ///< candidates optimised and scored
    std::size_t score_checks = 0;
};

namespace detail {

/// Queue key: the score, except that losses already within the acceptance
/// threshold count as zero so that equally complex solutions tie.
inline double queue_rank(const Candidate& c, double e_acc)
{
    return !c.program.empty() && c.loss <= e_acc ? c.complexity : c.score;
}

inline double param_norm(const Program& p)
{
    double sq = 0.0;
    for (const auto& [id, v] : p.params)
        for (double x : v) sq += x * x;
    return std::sqrt(sq);
}

struct QueueOrder {
    // Lower rank first, then lower complexity, smaller parameters, first
    // pushed.
    bool operator()(const Candidate* a, const Candidate* b) const
    {
        if (a->rank != b->rank) return a->rank > b->rank;
        if (a->complexity != b->complexity) return a->complexity > b->complexity;
        if (a->param_norm != b->param_norm) return a->param_norm > b->param_norm;
        return a->id > b->id;
    }
};

template <typename F>
void parallel_for(std::size_t n, std::size_t workers, F&& body)
{
    if (workers <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) body(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    const std::size_t k = std::min(workers, n);
    pool.reserve(k);
    for (std::size_t w = 0; w < k; ++w)
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) body(i);
        });
    for (auto& t : pool) t.join();
}

} // namespace detail

/// Best-first search from the empty program. A popped non-empty candidate
/// whose loss is within spec.e_acc is accepted and returned together with the
/// next best queued alternatives. Otherwise the best candidates seen are
/// returned, flagged unaccepted. `spec` must already carry e_max and e_acc.
inline InduceResult induce(const ObservationTrace& trace, const ErrorSpec& spec, const SearchConfig& cfg,
                           const FunctionLibrary& lib = FunctionLibrary::standard(),
                           const std::function<void(const ProgressRecord&)>& progress = {})
{
    if (trace.steps.empty()) throw Error("cannot induce a program from an empty trace");
    const KdIndex idx(trace);
    const Machine machine(trace, spec, lib);
    Rng rng(cfg.seed);
    const SelectContext ctx{trace.length(), &spec};

    InduceResult result;
    std::vector<std::unique_ptr<Candidate>> store;
    std::priority_queue<const Candidate*, std::vector<const Candidate*>, detail::QueueOrder> queue;
    std::map<std::string, double> seen; ///< structure -> lowest loss queued

    auto push = [&](std::unique_ptr<Candidate> c) {
        if (c->score != c->complexity + c->loss) throw std::logic_error("f_total != C + L");
        ++result.score_checks;
        c->rank = detail::queue_rank(*c, spec.e_acc);
        c->param_norm = detail::param_norm(c->program);
        c->id = store.size();
        queue.push(c.get());
        store.push_back(std::move(c));
    };

    {
        auto root = std::make_unique<Candidate>();
        root->program.policy = cfg.exec_policy.value_or(trace.schema.default_policy());
        ExecResult r = machine.execute(root->program);
        root->loss = r.loss;
        root->complexity = complexity(root->program, cfg.weights);
        root->score = root->complexity + root->loss;
        root->executed = r.executed;
        seen.emplace(print(root->program, lib), root->loss);
        push(std::move(root));
    }

    const Candidate* accepted = nullptr;
    while (!queue.empty()) {
        const Candidate* top = queue.top();
        queue.pop();
        if (!top->program.empty() && top->loss <= spec.e_acc) {
            accepted = top;
            break;
        }
        if (result.iterations >= cfg.outer_budget) break;
        ++result.iterations;

        const Leaf leaf = select_leaf(*top, ctx, rng);
        std::vector<Program> children = expand(*top, leaf, lib, trace.schema, rng, cfg.var_choice);
        children.erase(std::remove_if(children.begin(), children.end(),
                                      [&](const Program& p) { return seen.count(print(p, lib)) > 0; }),
                       children.end());

        std::vector<OptimizeResult> optimised(children.size());
        detail::parallel_for(children.size(), cfg.workers, [&](std::size_t i) {
            optimised[i] = optimize(children[i], trace, spec, cfg.opt, idx, lib);
        });

        for (auto& o : optimised) {
            ++result.evaluated;
            if (o.failed) continue;
            Program prog = simplify(o.program, lib, cfg.weights);
            if (std::any_of(prog.body.begin(), prog.body.end(),
                            [&](const Expr& e) { return detail::has_self_difference(e, lib); }))
                continue;
            // Simplification can reorder leaves and round parameter values, so
            // the candidate is scored on a fresh execution.
            ExecResult r = machine.execute(prog);
            if (!std::isfinite(r.loss)) continue;
            // A structure reached again is queued only when its parameters
            // now fit better, so one poor local optimum cannot shadow it.
            auto [it, fresh] = seen.emplace(print(prog, lib), r.loss);
            if (!fresh) {
                if (r.loss >= it->second - 1e-9 * (1.0 + it->second)) continue;
                it->second = r.loss;
            }
            auto c = std::make_unique<Candidate>();
            c->program = std::move(prog);
            c->loss = r.loss;
            c->complexity = complexity(c->program, cfg.weights);
            c->score = c->complexity + c->loss;
            c->executed = r.executed;
            c->status = r.status;
            c->parent = top->id;
            c->grads = backprop(r.chi, spec, lib);
            push(std::move(c));
        }

        if (progress) {
            progress({result.iterations, queue.size(), result.evaluated, top->score, print(top->program, lib)});
        }
    }

    auto mark = [&](const Candidate& c) {
        Candidate copy = c;
        copy.accepted = !c.program.empty() && c.loss <= spec.e_acc;
        return copy;
    };

    if (accepted) {
        result.accepted = true;
        // Descent stopped as soon as the loss fell within e_acc; spend one more
        // budget on the parameters of the winner.
        ErrorSpec strict = spec;
        strict.e_acc = 0.0;
        OptimizerConfig polish_cfg = cfg.opt;
        polish_cfg.relax_vars = false;
        const OptimizeResult polished = optimize(accepted->program, trace, strict, polish_cfg, idx, lib);
        Candidate winner = *accepted;
        if (!polished.failed && polished.loss < winner.loss) {
            ExecResult r = machine.execute(polished.program);
            winner.program = polished.program;
            winner.loss = r.loss;
            winner.score = winner.complexity + winner.loss;
            winner.executed = r.executed;
            winner.status = r.status;
            winner.grads = backprop(r.chi, spec, lib);
        }
        // Collecting like terms is kept out of the search, where the uncollected
        // forms are stepping stones, and applied to the winner only.
        Program tidy = simplify(winner.program, lib, cfg.weights, true);
        const double tidy_c = complexity(tidy, cfg.weights);
        if (tidy_c < winner.complexity) {
            ExecResult r = machine.execute(tidy);
            if (r.loss <= spec.e_acc) {
                winner.program = std::move(tidy);
                winner.loss = r.loss;
                winner.complexity = tidy_c;
                winner.score = winner.complexity + winner.loss;
                winner.executed = r.executed;
                winner.status = r.status;
                winner.grads = backprop(r.chi, spec, lib);
            }
        }
        result.best.push_back(mark(winner));
        while (!queue.empty() && result.best.size() < cfg.best_k) {
            const Candidate* c = queue.top();
            queue.pop();
            if (!c->program.empty()) result.best.push_back(mark(*c));
        }
        return result;
    }

    std::vector<const Candidate*> ranked;
    for (const auto& c : store)
        if (!c->program.empty()) ranked.push_back(c.get());
    std::sort(ranked.begin(), ranked.end(), [](const Candidate* a, const Candidate* b) {
        return detail::QueueOrder{}(b, a);
    });
    for (std::size_t i = 0; i < ranked.size() && result.best.size() < cfg.best_k; ++i)
        result.best.push_back(mark(*ranked[i]));
    if (result.best.empty()) result.best.push_back(mark(*store.front()));
    return result;
}

// ---------------------------------------------------------------------------
// Search-space size
// ---------------------------------------------------------------------------

enum class DepthConvention {
    Program,    ///< edges from the action root, as used by complexity()
    Expression, ///< edges within the action's argument (action not counted)
};

/// Number of distinct single-action programs of exactly `depth` under the
/// search grammar: every value leaf is either the (anonymous) free parameter
/// or one of the variables of matching dim, every internal node a library
/// function whose argument dims typecheck. Argument orders count separately.
/// Under the Program convention depth 0 is the empty program. Saturates at
/// UINT64_MAX.
inline std::uint64_t count_programs(const Schema& schema, const FunctionLibrary& lib, std::size_t depth,
                                    DepthConvention convention = DepthConvention::Program)
{
    constexpr std::uint64_t kMax = std::numeric_limits<std::uint64_t>::max();
    auto sat_add = [](std::uint64_t a, std::uint64_t b) { return a > kMax - b ? kMax : a + b; };
    auto sat_mul = [](std::uint64_t a, std::uint64_t b) { return (a != 0 && b > kMax / a) ? kMax : a * b; };

    std::map<std::pair<std::size_t, std::size_t>, std::uint64_t> memo;
    std::function<std::uint64_t(std::size_t, std::size_t)> exact;
    // Expressions of dim d with depth <= k (k may be "-1", passed as k + 1 == 0).
    auto upto = [&](std::size_t dim, std::size_t k_plus_one) {
        std::uint64_t s = 0;
        for (std::size_t k = 0; k < k_plus_one; ++k) s = sat_add(s, exact(dim, k));
        return s;
    };
    exact = [&](std::size_t dim, std::size_t k) -> std::uint64_t {
        auto key = std::make_pair(dim, k);
        if (auto it = memo.find(key); it != memo.end()) return it->second;
        std::uint64_t n = 0;
        if (k == 0) {
            n = 1 + schema.variables_of_dim(dim).size();
        } else {
            for (const auto& f : lib.entries()) {
                auto dims = f.arg_dims(dim);
                if (!dims) continue;
                std::uint64_t all = 1, shallower = 1;
                for (std::size_t d : *dims) {
                    all = sat_mul(all, upto(d, k));
                    shallower = sat_mul(shallower, upto(d, k - 1));
                }
                n = sat_add(n, all == kMax ? kMax : all - shallower);
            }
        }
        memo[key] = n;
        return n;
    };

    if (convention == DepthConvention::Program) {
        if (depth == 0) return 1;
        depth -= 1;
    }
    std::uint64_t total = 0;
    for (const auto& [action, dim] : schema.actions) total = sat_add(total, exact(dim, depth));
    return total;
}

} // namespace pim
