// pim: generate traces, induce programs, evaluate programs on traces, and
// count the search space.
//
// Exit codes: 0 ok, 1 usage error, 2 runtime error.

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "pim/pim.hpp"

namespace {

struct UsageError : pim::Error {
    using pim::Error::Error;
};

void emit_trace(const pim::ObservationTrace& trace, const std::string& out)
{
    if (out.empty() || out == "-") {
        pim::write_trace(std::cout, trace);
        std::cout.flush();
        if (!std::cout) throw pim::Error("failed writing the trace to stdout");
    } else {
        pim::save_trace(out, trace);
    }
}

struct GenOptions {
    std::string out;
    pim::SecondOrderSystem sys;
    pim::PaddlePolicy policy;
    pim::PaddleConfig paddle;
    std::size_t length = 200;
    std::size_t cubes = 3;
    std::uint64_t seed = 1;
    double jitter = 0.0;
};

void add_second_order(CLI::App& cmd, GenOptions& g)
{
    cmd.add_option("--k1", g.sys.k1, "position gain")->capture_default_str();
    cmd.add_option("--k2", g.sys.k2, "velocity gain")->capture_default_str();
    cmd.add_option("--x0", g.sys.x0, "initial position")->capture_default_str();
    cmd.add_option("--v0", g.sys.v0, "initial velocity")->capture_default_str();
    cmd.add_option("--dt", g.sys.dt, "time step in seconds")->capture_default_str();
    cmd.add_option("--steps", g.sys.steps, "number of steps")->capture_default_str();
    cmd.add_option("--out,-o", g.out, "output path (stdout when omitted)");
}

/// Flags shared by induce and eval that feed the run configuration.
struct ConfigFlags {
    std::string config_path;
    std::optional<std::string> spec;
    std::optional<double> d_max, e_max, e_acc, lr;
    std::optional<std::string> weights, policy;
    std::optional<std::size_t> inner_budget, outer_budget, best_k, workers;
    std::optional<std::uint64_t> seed;

    void add_thresholds(CLI::App& cmd)
    {
        cmd.add_option("--config", config_path, "key = value configuration file");
        cmd.add_option("--spec", spec, "error spec: continuous, continuous_sq or demo");
        cmd.add_option("--d-max", d_max, "arena size for the demo spec");
        cmd.add_option("--e-max", e_max, "per-action abort threshold");
        cmd.add_option("--e-acc", e_acc, "acceptance threshold on the total loss");
        cmd.add_option("--policy", policy, "execution policy: repeat or single");
    }

    void add_search(CLI::App& cmd)
    {
        cmd.add_option("--weights", weights, "complexity weights depth,params,vars");
        cmd.add_option("--lr", lr, "AdaGrad learning rate");
        cmd.add_option("--inner-budget", inner_budget, "optimiser iterations per candidate");
        cmd.add_option("--outer-budget", outer_budget, "search iterations");
        cmd.add_option("--best-k", best_k, "number of programs reported");
        cmd.add_option("--seed", seed, "random seed");
        cmd.add_option("--workers", workers, "optimiser threads");
    }

    pim::RunConfig resolve() const
    {
        pim::RunConfig cfg;
        if (!config_path.empty()) cfg = pim::load_config(config_path, cfg);
        auto set = [&](const char* key, const auto& v) {
            if (!v) return;
            if constexpr (std::is_same_v<std::decay_t<decltype(*v)>, std::string>) pim::set_config_value(cfg, key, *v);
            else pim::set_config_value(cfg, key, std::to_string(*v));
        };
        if (spec) cfg.spec = *spec;
        if (d_max) cfg.d_max = *d_max;
        if (e_max) cfg.e_max = *e_max;
        if (e_acc) cfg.e_acc = *e_acc;
        if (lr) cfg.lr = *lr;
        set("weights", weights);
        set("exec_policy", policy);
        set("inner_budget", inner_budget);
        set("outer_budget", outer_budget);
        set("best_k", best_k);
        set("seed", seed);
        set("workers", workers);
        cfg.validate();
        return cfg;
    }
};

std::string fixed(double x)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6g", x);
    return buf;
}

int run_induce(const std::string& trace_path, const ConfigFlags& flags, const std::string& report_path,
               const std::string& progress_path)
{
    const pim::RunConfig cfg = flags.resolve();
    const pim::ObservationTrace trace = pim::load_trace(trace_path);
    const pim::ErrorSpec spec = cfg.error_spec(trace);
    const auto& lib = pim::FunctionLibrary::standard();

    std::unique_ptr<std::ofstream> progress_out;
    if (!progress_path.empty()) {
        progress_out = std::make_unique<std::ofstream>(progress_path, std::ios::binary);
        if (!*progress_out) throw pim::Error("cannot open '" + progress_path + "' for writing");
    }
    std::function<void(const pim::ProgressRecord&)> progress;
    if (progress_out) progress = [&](const pim::ProgressRecord& p) { *progress_out << pim::progress_record(p) << '\n'; };

    const auto t0 = std::chrono::steady_clock::now();
    const pim::InduceResult r = pim::induce(trace, spec, cfg.search(), lib, progress);
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    if (!report_path.empty()) {
        std::ofstream out(report_path, std::ios::binary);
        if (!out) throw pim::Error("cannot open '" + report_path + "' for writing");
        out << pim::induce_report(r, spec, lib);
        if (!out) throw pim::Error("failed writing '" + report_path + "'");
    }

    std::cout << "spec " << spec.name << "  e_max " << fixed(spec.e_max) << "  e_acc " << fixed(spec.e_acc) << '\n';
    std::cout << (r.accepted ? "accepted" : "not accepted") << " after " << r.iterations << " iterations, "
              << r.evaluated << " candidates evaluated, " << fixed(wall) << " s\n";
    for (std::size_t i = 0; i < r.best.size(); ++i) {
        const pim::Candidate& c = r.best[i];
        std::cout << '#' << (i + 1) << ' ' << (c.accepted ? "[accepted] " : "") << pim::print_with_values(c.program, lib)
                  << "\n   loss " << fixed(c.loss) << "  C " << fixed(c.complexity) << "  f_total " << fixed(c.score)
                  << "  policy " << pim::to_string(c.program.policy) << '\n';
    }
    return 0;
}

int run_eval(const std::string& program_text, const std::string& trace_path, const ConfigFlags& flags)
{
    const pim::RunConfig cfg = flags.resolve();
    const pim::ObservationTrace trace = pim::load_trace(trace_path);
    const pim::ErrorSpec spec = cfg.error_spec(trace);
    const auto& lib = pim::FunctionLibrary::standard();

    pim::Program p = pim::parse(program_text, trace.schema, lib);
    if (cfg.exec_policy) p.policy = *cfg.exec_policy;
    if (auto err = pim::typecheck(p, trace.schema, lib)) throw pim::Error(err->what());
    if (!p.params.empty()) throw pim::Error("program has free parameters; write their values inline");

    const pim::ExecResult r = pim::execute(p, trace, spec, lib);
    std::cout << "loss " << pim::detail::format_number(r.loss) << "  executed " << r.executed << " of "
              << trace.length() << (r.status == pim::ExecStatus::Aborted ? "  aborted at step " + std::to_string(r.aborted_at) : "")
              << '\n';
    std::size_t matches = 0;
    double worst = 0.0;
    for (const auto& e : r.chi.emitted) {
        if (!e.scored) continue;
        std::cout << "t " << e.t << "  " << e.action << ' ' << pim::detail::format_vec(e.theta) << "  observed "
                  << e.observed_action << ' ' << pim::detail::format_vec(e.observed_theta) << "  sigma "
                  << pim::detail::format_number(e.sigma) << '\n';
        if (e.action == e.observed_action) {
            ++matches;
            worst = std::max(worst, pim::vec::distance(e.theta, e.observed_theta));
        }
    }
    std::cout << "action names matched " << matches << " of " << trace.length() << '\n';
    std::cout << "largest argument residual on matched steps " << pim::detail::format_number(worst) << '\n';
    return 0;
}

int run_count(const std::string& domain, std::size_t depth, const std::string& convention, std::size_t cubes)
{
    pim::Schema schema;
    if (domain == "physics") schema = pim::second_order_schema();
    else if (domain == "paddle") schema = pim::paddle_schema();
    else if (domain == "demo") schema = pim::demo_schema(pim::make_tower_scenario(cubes, 1));
    else throw UsageError("unknown domain '" + domain + "'");
    pim::DepthConvention conv;
    if (convention == "program") conv = pim::DepthConvention::Program;
    else if (convention == "expression") conv = pim::DepthConvention::Expression;
    else throw UsageError("convention must be 'program' or 'expression'");

    const auto& lib = pim::FunctionLibrary::standard();
    std::uint64_t cumulative = 0;
    for (std::size_t d = 0; d <= depth; ++d) cumulative += pim::count_programs(schema, lib, d, conv);
    std::cout << "domain " << domain << "  depth " << depth << "  convention " << convention << '\n';
    std::cout << "exactly depth " << depth << ": " << pim::count_programs(schema, lib, depth, conv) << '\n';
    std::cout << "up to depth " << depth << ": " << cumulative << '\n';
    std::cout << "grammar: one action over an expression; leaves are one anonymous parameter or a variable of"
                 " matching dim; functions";
    for (const auto& f : lib.entries()) std::cout << ' ' << f.symbol;
    std::cout << "; argument orders count separately\n";
    return 0;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Program induction from observation traces"};
    app.require_subcommand(1);

    GenOptions g;
    auto* gen = app.add_subcommand("gen", "generate an observation trace");
    gen->require_subcommand(1);
    auto* pend = gen->add_subcommand("pendulum", "damped second-order system");
    add_second_order(*pend, g);
    GenOptions osc_opts;
    osc_opts.sys.k1 = -1.0;
    osc_opts.sys.k2 = -0.2;
    auto* osc = gen->add_subcommand("oscillator", "lightly damped oscillator");
    add_second_order(*osc, osc_opts);
    auto* paddle = gen->add_subcommand("paddle", "proportional paddle controller");
    paddle->add_option("--c-agent", g.policy.c_agent, "gain on the agent position")->capture_default_str();
    paddle->add_option("--c-ball", g.policy.c_ball, "gain on the ball position")->capture_default_str();
    paddle->add_flag("--clip", g.policy.clip, "emit discrete moves in {-1, 0, 1}");
    paddle->add_option("--length", g.length, "number of steps")->capture_default_str();
    paddle->add_option("--rally", g.paddle.rally_length, "steps between serves, 0 for one rally")->capture_default_str();
    paddle->add_option("--seed", g.paddle.seed, "random seed")->capture_default_str();
    paddle->add_option("--out,-o", g.out, "output path (stdout when omitted)");
    auto* demo = gen->add_subcommand("demo", "pick-and-place tower demonstration");
    demo->add_option("--cubes", g.cubes, "number of cubes, 1 to 5")->capture_default_str();
    demo->add_option("--seed", g.seed, "random seed")->capture_default_str();
    demo->add_option("--jitter", g.jitter, "std of noise on recorded positions")->capture_default_str();
    demo->add_option("--out,-o", g.out, "output path (stdout when omitted)");

    std::string trace_path, report_path, progress_path, program_text;
    ConfigFlags induce_flags, eval_flags;
    auto* induce = app.add_subcommand("induce", "search for a program explaining a trace");
    induce->add_option("trace", trace_path, "trace file")->required();
    induce_flags.add_thresholds(*induce);
    induce_flags.add_search(*induce);
    induce->add_option("--report", report_path, "write line-delimited JSON results here");
    induce->add_option("--progress", progress_path, "write line-delimited JSON progress here");

    auto* eval = app.add_subcommand("eval", "execute a program against a trace");
    eval->add_option("program", program_text, "program text with inline values")->required();
    eval->add_option("trace", trace_path, "trace file")->required();
    eval_flags.add_thresholds(*eval);

    std::string domain = "physics", convention = "expression";
    std::size_t depth = 2, cubes = 3;
    auto* count = app.add_subcommand("count", "count programs of a given depth");
    count->add_option("--domain", domain, "physics, paddle or demo")->capture_default_str();
    count->add_option("--depth", depth, "AST depth")->capture_default_str();
    count->add_option("--convention", convention, "program or expression")->capture_default_str();
    count->add_option("--cubes", cubes, "cubes in the demo schema")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "pim: " << e.what() << '\n';
        return 1;
    }

    try {
        if (*gen) {
            if (*pend) emit_trace(pim::simulate_second_order(g.sys), g.out);
            else if (*osc) emit_trace(pim::simulate_second_order(osc_opts.sys), osc_opts.out);
            else if (*paddle) emit_trace(pim::generate_paddle_trace(g.policy, g.length, g.paddle), g.out);
            else emit_trace(pim::generate_demo(pim::make_tower_scenario(g.cubes, g.seed, g.jitter)), g.out);
            return 0;
        }
        if (*induce) return run_induce(trace_path, induce_flags, report_path, progress_path);
        if (*eval) return run_eval(program_text, trace_path, eval_flags);
        return run_count(domain, depth, convention, cubes);
    } catch (const UsageError& e) {
        std::cerr << "pim: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "pim: " << e.what() << '\n';
        return 2;
    }
}
