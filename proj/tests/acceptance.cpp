// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
// exits nonzero when any criterion fails.

#include <chrono>
#include <cstdio>
#include <iostream>
#include <optional>
#include <random>
#include <set>
#include <sstream>

#include "pim/pim.hpp"

using namespace pim;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

// ---------------------------------------------------------------------------
// Independent oracles
// ---------------------------------------------------------------------------

/// Affine form of an expression: sum of scalar-weighted variables plus a
/// constant. Built here from the AST, independently of the library's own
/// simplifier.
struct Affine {
    std::map<std::string, double> coef;
    Vec constant;
    bool has_constant = false;
};

std::optional<Vec> value_of(const Expr& e, const Program& p)
{
    switch (e.kind) {
    case ExprKind::Const: return e.value;
    case ExprKind::Param: return p.params.at(e.name);
    case ExprKind::Var: return std::nullopt;
    default: break;
    }
    std::vector<Vec> a;
    for (const auto& x : e.args) {
        auto v = value_of(x, p);
        if (!v) return std::nullopt;
        a.push_back(*v);
    }
    if (e.name == "add") return vec::add(a[0], a[1]);
    if (e.name == "sub") return vec::sub(a[0], a[1]);
    if (e.name == "scale") return vec::scale(a[0][0], a[1]);
    return std::nullopt;
}

std::optional<Affine> affine(const Expr& e, const Program& p)
{
    if (auto v = value_of(e, p)) return Affine{{}, *v, true};
    if (e.kind == ExprKind::Var) return Affine{{{e.name, 1.0}}, Vec(e.dim, 0.0), false};
    if (e.kind != ExprKind::Call || e.args.size() != 2) return std::nullopt;
    if (e.name == "add" || e.name == "sub") {
        auto l = affine(e.args[0], p), r = affine(e.args[1], p);
        if (!l || !r) return std::nullopt;
        const double sign = e.name == "add" ? 1.0 : -1.0;
        for (const auto& [id, c] : r->coef) l->coef[id] += sign * c;
        l->constant = vec::add(l->constant, vec::scale(sign, r->constant));
        l->has_constant = l->has_constant || r->has_constant;
        return l;
    }
    if (e.name == "scale") {
        auto s = value_of(e.args[0], p);
        const Expr* rest = &e.args[1];
        if (!s && e.dim == 1) {
            s = value_of(e.args[1], p);
            rest = &e.args[0];
        }
        if (!s) return std::nullopt;
        auto inner = affine(*rest, p);
        if (!inner) return std::nullopt;
        for (auto& [id, c] : inner->coef) c *= (*s)[0];
        inner->constant = vec::scale((*s)[0], inner->constant);
        return inner;
    }
    return std::nullopt;
}

/// Least-squares fit theta ~ a u + b w through the normal equations.
std::pair<double, double> least_squares(const ObservationTrace& tr, const std::string& u, const std::string& w)
{
    double suu = 0, suw = 0, sww = 0, sut = 0, swt = 0;
    for (const auto& s : tr.steps) {
        const double a = s.state.at(u)[0], b = s.state.at(w)[0], t = s.theta[0];
        suu += a * a;
        suw += a * b;
        sww += b * b;
        sut += a * t;
        swt += b * t;
    }
    const double det = suu * sww - suw * suw;
    return {(sut * sww - swt * suw) / det, (swt * suu - sut * suw) / det};
}

/// Structural complexity recounted from the AST.
double recount_complexity(const Program& p)
{
    std::set<std::string> params;
    std::size_t vars = 0;
    std::function<std::size_t(const Expr&)> walk = [&](const Expr& e) -> std::size_t {
        if (e.kind == ExprKind::Param) params.insert(e.name);
        if (e.kind == ExprKind::Var) ++vars;
        std::size_t d = 0;
        for (const auto& a : e.args) d = std::max(d, 1 + walk(a));
        return d;
    };
    std::size_t depth = 0;
    for (const auto& e : p.body) depth = std::max(depth, walk(e));
    return 10.0 * double(depth) + 5.0 * double(params.size()) + 1.0 * double(vars);
}

double rel_err(double got, double want) { return std::abs(got - want) / std::abs(want); }

// ---------------------------------------------------------------------------
// Bookkeeping shared by the criteria
// ---------------------------------------------------------------------------

struct Run {
    std::string name;
    InduceResult result;
    std::string report;
    double seconds = 0.0;
    bool threw = false;
};

struct Ledger {
    std::vector<Run> runs; ///< every induce call made for criteria 1 to 4
};

Run run_induce(const std::string& name, const ObservationTrace& tr, const ErrorSpec& spec, Ledger& ledger)
{
    Run run;
    run.name = name;
    const auto t0 = Clock::now();
    try {
        run.result = induce(tr, spec, SearchConfig{});
        run.report = induce_report(run.result, spec);
    } catch (const std::logic_error& e) {
        std::cout << "  " << name << ": " << e.what() << "\n";
        run.threw = true;
    }
    run.seconds = seconds_since(t0);
    ledger.runs.push_back(run);
    return run;
}

bool report(int id, const std::string& title, bool pass, const std::string& detail)
{
    std::cout << (pass ? "PASS" : "FAIL") << " criterion " << id << ": " << title << " (" << detail << ")"
              << std::endl;
    return pass;
}

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0)
{
    char buf[256];
    std::snprintf(buf, sizeof buf, f, a, b, c, d);
    return buf;
}

// ---------------------------------------------------------------------------
// Criteria
// ---------------------------------------------------------------------------

struct Physics {
    std::string name;
    SecondOrderSystem sys;
};

const std::vector<Physics>& physics_cases()
{
    static const std::vector<Physics> cases = [] {
        SecondOrderSystem pend;
        SecondOrderSystem osc;
        osc.k1 = -1.0;
        osc.k2 = -0.2;
        return std::vector<Physics>{{"pendulum", pend}, {"oscillator", osc}};
    }();
    return cases;
}

bool criterion1(Ledger& ledger)
{
    bool ok = true;
    std::string detail;
    for (const auto& c : physics_cases()) {
        const ObservationTrace tr = simulate_second_order(c.sys);
        const ErrorSpec spec = calibrate(continuous_spec(), tr);
        const Run run = run_induce(c.name, tr, spec, ledger);
        const auto [k1, k2] = least_squares(tr, "x", "v");
        bool good = !run.threw && run.result.accepted && run.result.iterations <= 1000 && run.seconds <= 600.0;
        std::string prog = "none";
        double e1 = 1.0, e2 = 1.0;
        if (good) {
            const Program& p = run.result.best[0].program;
            prog = print_with_values(p);
            auto lin = p.body.size() == 1 ? affine(p.body[0].args[0], p) : std::nullopt;
            good = lin && !lin->has_constant && lin->coef.size() == 2 && lin->coef.count("x") && lin->coef.count("v");
            if (good) {
                e1 = rel_err(lin->coef.at("x"), k1);
                e2 = rel_err(lin->coef.at("v"), k2);
                good = e1 < 0.01 && e2 < 0.01 && rel_err(k1, c.sys.k1) < 1e-9 && rel_err(k2, c.sys.k2) < 1e-9;
            }
        }
        std::cout << "  " << c.name << ": " << prog << " accepted=" << run.result.accepted
                  << " iterations=" << run.result.iterations << fmt(" %.2fs rel.err %.2e %.2e", run.seconds, e1, e2)
                  << "\n";
        detail += c.name + " " + std::to_string(run.result.iterations) + " iterations; ";
        ok = ok && good;
    }
    detail.resize(detail.size() - 2);
    return report(1, "physics recovery", ok, detail);
}

bool criterion2()
{
    const Schema s = second_order_schema();
    const FunctionLibrary& lib = FunctionLibrary::standard();
    const std::uint64_t n = count_programs(s, lib, 2, DepthConvention::Expression);
    const double ratio = double(n) / 1.7e4;
    std::cout << "  grammar: leaves are one anonymous parameter or a schema variable of matching dim;"
                 " internal nodes are add, sub, scale; argument orders counted separately;"
                 " depth counted in edges below the action\n";
    return report(2, "search-space size", ratio >= 0.1 && ratio <= 10.0,
                  std::to_string(n) + " programs of depth 2, " + fmt("%.3g of the reference figure", ratio));
}

bool criterion3(Ledger& ledger)
{
    const PaddlePolicy pol;
    const PaddleConfig pcfg;
    const ObservationTrace tr = generate_paddle_trace(pol, 200, pcfg);
    const ErrorSpec spec = calibrate(continuous_spec(), tr);
    const Run run = run_induce("paddle", tr, spec, ledger);
    const auto [ca, cb] = least_squares(tr, "agent", "ball");
    if (run.threw || !run.result.accepted) return report(3, "paddle policy recovery", false, "not accepted");
    const Program& p = run.result.best[0].program;
    auto lin = p.body.size() == 1 ? affine(p.body[0].args[0], p) : std::nullopt;
    if (!lin || !lin->coef.count("agent") || !lin->coef.count("ball"))
        return report(3, "paddle policy recovery", false, "not linear in agent and ball: " + print_with_values(p));
    const double ga = lin->coef.at("agent"), gb = lin->coef.at("ball");
    const bool gains = rel_err(ga, pol.c_agent) < 0.05 && rel_err(gb, pol.c_ball) < 0.05
        && rel_err(ca, pol.c_agent) < 1e-9 && rel_err(cb, pol.c_ball) < 1e-9;

    // Following the program on the recorded states.
    const ExecResult r = execute(p, tr, spec);
    std::size_t open_hits = 0;
    for (const auto& e : r.chi.emitted)
        if (e.scored && e.sigma <= spec.e_max) ++open_hits;
    // Following the program in closed loop: it drives the paddle itself.
    std::size_t closed_hits = 0;
    const bool pure = !lin->has_constant && lin->coef.size() == 2;
    if (pure) {
        const ObservationTrace follow = generate_paddle_trace(PaddlePolicy{ga, gb, false}, 200, pcfg);
        for (std::size_t t = 0; t < follow.length(); ++t)
            if (std::abs(follow.steps[t].theta[0] - tr.steps[t].theta[0]) <= spec.e_max) ++closed_hits;
    }
    const double open = double(open_hits) / double(tr.length()), closed = double(closed_hits) / double(tr.length());
    std::cout << "  paddle: " << print_with_values(p) << " iterations=" << run.result.iterations
              << fmt(" gains %.6f %.6f, open-loop %.3f closed-loop %.3f\n", ga, gb, open, closed);
    return report(3, "paddle policy recovery", gains && open >= 0.99 && closed >= 0.99,
                  fmt("gain errors %.2e %.2e, %.1f%% of actions followed", rel_err(ga, pol.c_agent),
                      rel_err(gb, pol.c_ball), 100.0 * std::min(open, closed)));
}

bool demo_matches(const DemoScenario& scn, const ObservationTrace& tr, const Candidate& best, std::string& why)
{
    const Program& p = best.program;
    if (p.body.size() != tr.length()) {
        why = "length";
        return false;
    }
    for (std::size_t i = 0; i < p.body.size(); ++i) {
        if (p.body[i].name != tr.steps[i].action) {
            why = "action names";
            return false;
        }
    }
    for (std::size_t k = 0; k < scn.moves.size(); ++k) {
        const DemoMove& m = scn.moves[k];
        auto lin = affine(p.body[2 * k + 1].args[0], p);
        if (!lin || lin->coef.size() != 1 || !lin->coef.count(*m.reference)
            || std::abs(lin->coef.at(*m.reference) - 1.0) > 1e-9) {
            why = "place " + std::to_string(k + 1) + " is not relative to " + *m.reference;
            return false;
        }
        if (vec::distance(lin->constant, m.offset) > 1e-3) {
            why = "place " + std::to_string(k + 1) + fmt(" offset off by %.2e", vec::distance(lin->constant, m.offset));
            return false;
        }
    }
    return true;
}

bool criterion4(Ledger& ledger)
{
    std::size_t good = 0, max_iter = 0;
    double total = 0.0;
    for (std::uint64_t seed = 1; seed <= 50; ++seed) {
        const std::size_t n = 2 + seed % 4;
        const DemoScenario scn = make_tower_scenario(n, seed);
        const ObservationTrace tr = generate_demo(scn);
        const ErrorSpec spec = calibrate(demo_spec(*tr.d_max), tr);
        const Run run = run_induce("demo" + std::to_string(seed), tr, spec, ledger);
        total += run.seconds;
        max_iter = std::max(max_iter, run.result.iterations);
        std::string why = "not accepted";
        const bool ok = !run.threw && run.result.accepted && run.result.iterations <= 1000
            && demo_matches(scn, tr, run.result.best[0], why);
        if (ok) ++good;
        else std::cout << "  demo seed " << seed << " (" << n << " cubes) failed: " << why << "\n";
    }
    std::cout << "  demos: " << good << "/50 recovered, at most " << max_iter << " iterations, "
              << fmt("%.1fs total\n", total);
    return report(4, "demonstration recovery", good >= 48,
                  std::to_string(good) + "/50 recovered, at most " + std::to_string(max_iter) + " iterations");
}

// Random (program, trace) pairs for the gradient check.
Expr random_expr(std::mt19937_64& rng, std::size_t dim, std::size_t h, const Schema& schema, Program& p)
{
    std::uniform_int_distribution<int> pick(0, 5);
    std::normal_distribution<double> n(0.0, 1.0);
    const int c = pick(rng);
    if (h == 0 || c < 2) {
        const auto vars = schema.variables_of_dim(dim);
        if (c == 0 && !vars.empty()) return Expr::var(vars[rng() % vars.size()], dim);
        Vec v(dim);
        for (double& x : v) x = n(rng);
        if (c == 1) return Expr::constant(v);
        const std::string id = "w" + std::to_string(p.params.size());
        p.params[id] = v;
        return Expr::param(id, dim);
    }
    static const char* fns[] = {"add", "sub", "scale"};
    const char* f = fns[c % 3];
    const std::size_t first = std::string(f) == "scale" ? 1 : dim;
    Expr a = random_expr(rng, first, h - 1, schema, p);
    Expr b = random_expr(rng, dim, h - 1, schema, p);
    return Expr::call(f, dim, {std::move(a), std::move(b)});
}

bool criterion5()
{
    std::mt19937_64 rng(77);
    std::normal_distribution<double> n(0.0, 1.0);
    std::size_t checked = 0, skipped = 0;
    double worst = 0.0;
    for (int i = 0; checked < 1500 && i < 10000; ++i) {
        ObservationTrace tr;
        ErrorSpec spec;
        Program prog;
        if (i % 3 == 2) {
            tr.schema.variables = {{"a", 2}, {"b", 2}, {"s", 1}};
            tr.schema.actions = {{"pick", 2}, {"place", 2}};
            for (int t = 0; t < 6; ++t)
                tr.steps.push_back({{{"a", {n(rng), n(rng)}}, {"b", {n(rng), n(rng)}}, {"s", {n(rng)}}},
                                    t % 2 ? "place" : "pick", {n(rng), n(rng)}});
            spec = demo_spec(10.0);
            prog.policy = ExecPolicy::SinglePass;
            const std::size_t len = 1 + rng() % 6;
            for (std::size_t k = 0; k < len; ++k)
                prog.body.push_back(Expr::action(k % 2 ? "place" : "pick", random_expr(rng, 2, 1 + rng() % 3, tr.schema, prog)));
        } else {
            tr.schema = second_order_schema();
            for (int t = 0; t < 12; ++t) tr.steps.push_back({{{"v", {n(rng)}}, {"x", {n(rng)}}}, "accel", {n(rng)}});
            spec = i % 3 == 0 ? continuous_spec() : continuous_squared_spec();
            prog.body.push_back(Expr::action("accel", random_expr(rng, 1, 1 + rng() % 4, tr.schema, prog)));
        }
        spec.e_max = std::numeric_limits<double>::infinity();
        spec.e_acc = 0.0;
        if (prog.params.empty()) continue;
        const ExecResult base = execute(prog, tr, spec);
        const GradientSet g = backprop(base.chi, spec);
        bool kink = false;
        double case_worst = 0.0;
        for (const auto& [id, value] : prog.params) {
            for (std::size_t k = 0; k < value.size(); ++k) {
                const double h = 1e-6;
                Program plus = prog, minus = prog;
                plus.params[id][k] += h;
                minus.params[id][k] -= h;
                const double lp = execute(plus, tr, spec).loss, lm = execute(minus, tr, spec).loss;
                const double fwd = (lp - base.loss) / h, bwd = (base.loss - lm) / h;
                if (std::abs(fwd - bwd) > 1e-3 * std::max(1.0, std::abs(fwd))) kink = true;
                const double numeric = (lp - lm) / (2 * h);
                auto it = g.by_param.find(id);
                const double analytic = it == g.by_param.end() ? 0.0 : it->second[k];
                case_worst = std::max(case_worst, std::abs(analytic - numeric)
                                                      / std::max({std::abs(analytic), std::abs(numeric), 1.0}));
            }
        }
        if (kink) {
            ++skipped;
            continue;
        }
        ++checked;
        worst = std::max(worst, case_worst);
    }
    return report(5, "gradient correctness", checked >= 1000 && worst < 1e-5,
                  std::to_string(checked) + " pairs checked, " + std::to_string(skipped)
                      + " at kinks skipped, " + fmt("max rel. error %.2e", worst));
}

bool criterion6(const Ledger& ledger)
{
    const Schema s = second_order_schema();
    bool ok = complexity(Program{}) == 0.0 && complexity(parse("(accel x)", s)) == 11.0
        && complexity(parse("(accel (+ (* p0 x) (* p1 v)))", s)) == 42.0;
    std::size_t pushes = 0, candidates = 0;
    for (const auto& run : ledger.runs) {
        ok = ok && !run.threw && run.result.score_checks > 0;
        pushes += run.result.score_checks;
        for (const auto& c : run.result.best) {
            ++candidates;
            ok = ok && c.score == c.complexity + c.loss && c.complexity == recount_complexity(c.program);
        }
    }
    return report(6, "scoring exactness", ok,
                  std::to_string(pushes) + " queue pushes checked over " + std::to_string(ledger.runs.size())
                      + " runs, " + std::to_string(candidates) + " reported candidates recounted");
}

bool criterion7(const Ledger& first)
{
    Ledger again;
    for (const auto& c : physics_cases()) {
        const ObservationTrace tr = simulate_second_order(c.sys);
        run_induce(c.name, tr, calibrate(continuous_spec(), tr), again);
    }
    for (std::uint64_t seed = 1; seed <= 50; ++seed) {
        const ObservationTrace tr = generate_demo(make_tower_scenario(2 + seed % 4, seed));
        run_induce("demo" + std::to_string(seed), tr, calibrate(demo_spec(*tr.d_max), tr), again);
    }
    std::map<std::string, std::string> before;
    for (const auto& r : first.runs) before[r.name] = r.report;
    std::size_t same = 0;
    for (const auto& r : again.runs) {
        auto it = before.find(r.name);
        if (it != before.end() && !r.threw && it->second == r.report) ++same;
        else std::cout << "  " << r.name << " report differs\n";
    }
    return report(7, "determinism", same == again.runs.size(),
                  std::to_string(same) + "/" + std::to_string(again.runs.size()) + " reports byte-identical");
}

} // namespace

int main()
{
    Ledger ledger;
    bool all = true;
    all &= criterion1(ledger);
    all &= criterion2();
    all &= criterion3(ledger);
    all &= criterion4(ledger);
    all &= criterion5();
    all &= criterion6(ledger);
    all &= criterion7(ledger);
    std::cout << (all ? "all criteria passed" : "some criteria failed") << std::endl;
    return all ? 0 : 1;
}
