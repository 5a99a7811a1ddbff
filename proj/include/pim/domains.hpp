#pragma once

// Trace generators for the three experiment families: a damped second-order
// system, a paddle controller, and pick-and-place tower demonstrations.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "pim/trace.hpp"
#include "pim/vec.hpp"

namespace pim {

// ---------------------------------------------------------------------------
// Second-order system
// ---------------------------------------------------------------------------

struct SecondOrderSystem {
    double k1 = -9.8;
    double k2 = -0.1;
    double x0 = 1.0;
    double v0 = 0.0;
    double dt = 0.01;
    std::size_t steps = 100;
};

inline Schema second_order_schema()
{
    return Schema{{{"v", 1}, {"x", 1}}, {{"accel", 1}}};
}

/// Semi-implicit Euler: theta = k1 x + k2 v at the pre-step state, then
/// v += dt theta and x += dt v.
inline ObservationTrace simulate_second_order(const SecondOrderSystem& sys)
{
    if (!(sys.dt > 0.0) || !std::isfinite(sys.dt)) throw Error("dt must be positive");
    if (sys.steps < 2) throw Error("a second-order trace needs at least 2 steps");
    ObservationTrace trace;
    trace.schema = second_order_schema();
    double x = sys.x0, v = sys.v0;
    for (std::size_t i = 0; i < sys.steps; ++i) {
        const double theta = sys.k1 * x + sys.k2 * v;
        trace.steps.push_back({{{"v", {v}}, {"x", {x}}}, "accel", {theta}});
        v += sys.dt * theta;
        x += sys.dt * v;
    }
    return trace;
}

// ---------------------------------------------------------------------------
// Paddle controller
// ---------------------------------------------------------------------------

struct PaddlePolicy {
    double c_agent = -0.31;
    double c_ball = 0.34;
    bool clip = false;

    double operator()(double agent, double ball) const
    {
        const double raw = c_agent * agent + c_ball * ball;
        if (!clip) return raw;
        return raw > 0.5 ? 1.0 : (raw < -0.5 ? -1.0 : 0.0);
    }
};

struct PaddleConfig {
    double height = 10.0;      ///< court spans [0, height]
    double paddle_speed = 1.0; ///< agent displacement per unit of theta
    double opp_speed = 0.3;
    std::uint64_t seed = 1;
    std::optional<double> ball_start; ///< random when unset
    std::optional<double> ball_speed; ///< random when unset
    /// Steps between serves; each serve puts the ball at a random height with
    /// a random velocity. 0 means a single endless rally.
    std::size_t rally_length = 40;
};

inline Schema paddle_schema()
{
    return Schema{{{"agent", 1}, {"ball", 1}, {"opp", 1}}, {{"move", 1}}};
}

/// Vertical positions of agent, ball and opponent. The ball moves at constant
/// speed, reflects off the court walls and is served anew every rally; the
/// opponent chases it at a capped speed; the agent follows the policy.
inline ObservationTrace generate_paddle_trace(const PaddlePolicy& policy, std::size_t length,
                                              const PaddleConfig& cfg = {})
{
    std::mt19937_64 rng(cfg.seed);
    std::uniform_real_distribution<double> pos(0.2 * cfg.height, 0.8 * cfg.height);
    std::uniform_real_distribution<double> speed(0.15, 0.35);
    double ball = cfg.ball_start ? *cfg.ball_start : pos(rng);
    double vb = cfg.ball_speed ? *cfg.ball_speed : speed(rng) * (rng() % 2 ? 1.0 : -1.0);
    double agent = 0.5 * cfg.height, opp = 0.5 * cfg.height;

    ObservationTrace trace;
    trace.schema = paddle_schema();
    for (std::size_t i = 0; i < length; ++i) {
        if (cfg.rally_length > 0 && i > 0 && i % cfg.rally_length == 0) {
            ball = pos(rng);
            vb = speed(rng) * (rng() % 2 ? 1.0 : -1.0);
        }
        const double theta = policy(agent, ball);
        trace.steps.push_back({{{"agent", {agent}}, {"ball", {ball}}, {"opp", {opp}}}, "move", {theta}});
        agent = std::clamp(agent + cfg.paddle_speed * theta, 0.0, cfg.height);
        opp += std::clamp(ball - opp, -cfg.opp_speed, cfg.opp_speed);
        ball += vb;
        if (ball < 0.0) {
            ball = -ball;
            vb = -vb;
        } else if (ball > cfg.height) {
            ball = 2.0 * cfg.height - ball;
            vb = -vb;
        }
    }
    return trace;
}

// ---------------------------------------------------------------------------
// Pick-and-place demonstrations
// ---------------------------------------------------------------------------

struct DemoMove {
    std::string cube;
    /// Target is reference position + offset, or the absolute offset when
    /// there is no reference.
    std::optional<std::string> reference;
    Vec offset;
};

struct DemoScenario {
    std::vector<std::pair<std::string, Vec>> cubes;
    std::vector<DemoMove> moves;
    double arena = 10.0;                 ///< positions lie in [0, arena]^2
    double d_max = 10.0 * std::sqrt(2.0); ///< the arena diagonal
    /// Placement error beyond which an action counts as a different one:
    /// half the unit cube. Recorded in the trace as its abort threshold.
    double tolerance = 0.5;
    double jitter = 0.0; ///< std of Gaussian noise on recorded positions
    std::uint64_t seed = 1;
};

inline std::string cube_name(std::size_t i) { return "loc" + std::to_string(i); }

/// n cubes on the floor of a 10 x 10 arena, at least 2 apart, then stacked
/// one by one into a single tower in a random order. Each placement sits
/// dx in [-0.1, 0.1], dy in [1.1, 1.2] from the cube below.
inline DemoScenario make_tower_scenario(std::size_t n_cubes, std::uint64_t seed, double jitter = 0.0)
{
    if (n_cubes < 1 || n_cubes > 5) throw Error("tower scenarios take 1 to 5 cubes");
    std::mt19937_64 rng(seed);
    const double margin = 0.5, gap = 2.0;
    const double slack = 10.0 - 2.0 * margin - gap * static_cast<double>(n_cubes - 1);
    std::uniform_real_distribution<double> u(0.0, slack);
    std::vector<double> xs(n_cubes);
    for (auto& x : xs) x = u(rng);
    std::sort(xs.begin(), xs.end());

    DemoScenario scn;
    scn.seed = seed;
    scn.jitter = jitter;
    for (std::size_t i = 0; i < n_cubes; ++i)
        scn.cubes.emplace_back(cube_name(i + 1), Vec{margin + xs[i] + gap * static_cast<double>(i), 0.0});

    std::vector<std::size_t> order(n_cubes);
    for (std::size_t i = 0; i < n_cubes; ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);
    std::uniform_real_distribution<double> dx(-0.1, 0.1), dy(1.1, 1.2);
    for (std::size_t k = 1; k < n_cubes; ++k) {
        const double ox = dx(rng), oy = dy(rng);
        scn.moves.push_back({cube_name(order[k] + 1), cube_name(order[k - 1] + 1), Vec{ox, oy}});
    }
    return scn;
}

inline Schema demo_schema(const DemoScenario& scn)
{
    Schema s;
    for (const auto& [id, pos] : scn.cubes) s.variables[id] = pos.size();
    s.actions = {{"pick", 2}, {"place", 2}};
    return s;
}

/// One pick and one place per move. Each step records every cube position
/// as observed before the action; a cube's new position shows up from the
/// step after its place.
inline ObservationTrace generate_demo(const DemoScenario& scn)
{
    if (!(scn.tolerance > 0.0)) throw Error("placement tolerance must be positive");
    if (!(scn.d_max > 0.0)) throw Error("d_max must be positive");
    if (scn.jitter < 0.0) throw Error("jitter must be non-negative");
    auto inside = [&](const Vec& p) {
        return p[0] >= 0.0 && p[0] <= scn.arena && p[1] >= 0.0 && p[1] <= scn.arena;
    };
    std::map<std::string, Vec> world;
    for (const auto& [id, pos] : scn.cubes) {
        if (pos.size() != 2) throw Error("cube '" + id + "' must have a 2D position");
        if (!inside(pos)) throw Error("cube '" + id + "' lies outside the arena");
        world[id] = pos;
    }
    ObservationTrace trace;
    trace.schema = demo_schema(scn);
    trace.d_max = scn.d_max;
    trace.e_max = scn.tolerance;

    std::mt19937_64 rng(scn.seed);
    std::normal_distribution<double> noise(0.0, scn.jitter > 0.0 ? scn.jitter : 1.0);
    auto observe = [&] {
        auto seen = world;
        if (scn.jitter > 0.0)
            for (auto& [id, v] : seen)
                for (double& c : v) c += noise(rng);
        return seen;
    };

    for (const auto& m : scn.moves) {
        auto cube = world.find(m.cube);
        if (cube == world.end()) throw Error("move references missing cube '" + m.cube + "'");
        Vec target = m.offset;
        if (target.size() != 2) throw Error("move offsets must be 2D");
        if (m.reference) {
            auto ref = world.find(*m.reference);
            if (ref == world.end()) throw Error("move references missing cube '" + *m.reference + "'");
            target = vec::add(ref->second, m.offset);
        }
        if (!inside(target)) throw Error("move of '" + m.cube + "' ends outside the arena");
        auto seen = observe();
        trace.steps.push_back({seen, "pick", seen.at(m.cube)});
        trace.steps.push_back({observe(), "place", target});
        cube->second = target;
    }
    return trace;
}

} // namespace pim
