// Trace generators for the three experiment domains.

#include <sstream>

#include <catch_amalgamated.hpp>

#include "pim/pim.hpp"

using namespace pim;

namespace {

std::string serialised(const ObservationTrace& tr)
{
    std::stringstream ss;
    write_trace(ss, tr);
    return ss.str();
}

void check_schema_invariants(const ObservationTrace& tr)
{
    for (const auto& s : tr.steps) {
        REQUIRE(s.state.size() == tr.schema.variables.size());
        for (const auto& [id, v] : s.state) CHECK(v.size() == tr.schema.variables.at(id));
        CHECK(s.theta.size() == tr.schema.actions.at(s.action));
    }
}

} // namespace

TEST_CASE("second-order system")
{
    SECTION("one hand Euler step")
    {
        SecondOrderSystem sys{-1.0, 0.0, 1.0, 0.0, 0.01, 2};
        ObservationTrace tr = simulate_second_order(sys);
        CHECK(tr.steps[0].theta[0] == -1.0);
        CHECK(tr.steps[1].state.at("v")[0] == Catch::Approx(-0.01));
        CHECK(tr.steps[1].state.at("x")[0] == Catch::Approx(0.9999));
    }
    SECTION("zero gains hold still")
    {
        ObservationTrace tr = simulate_second_order({0.0, 0.0, 1.0, 0.0, 0.01, 50});
        for (const auto& s : tr.steps) {
            CHECK(s.theta[0] == 0.0);
            CHECK(s.state.at("x")[0] == 1.0);
        }
    }
    SECTION("one second at 100 Hz is 100 steps")
    {
        ObservationTrace tr = simulate_second_order({});
        CHECK(tr.length() == 100);
        check_schema_invariants(tr);
    }
    SECTION("energy is conserved to O(dt) without damping")
    {
        SecondOrderSystem sys{-4.0, 0.0, 1.0, 0.0, 0.01, 1000};
        ObservationTrace tr = simulate_second_order(sys);
        auto energy = [&](const Step& s) {
            const double x = s.state.at("x")[0], v = s.state.at("v")[0];
            return 0.5 * v * v + 0.5 * 4.0 * x * x;
        };
        const double e0 = energy(tr.steps.front());
        for (const auto& s : tr.steps) CHECK(std::abs(energy(s) - e0) / e0 < 10 * sys.dt);
    }
    SECTION("bad parameters")
    {
        CHECK_THROWS_AS(simulate_second_order({-1, 0, 1, 0, 0.0, 10}), Error);
        CHECK_THROWS_AS(simulate_second_order({-1, 0, 1, 0, 0.01, 1}), Error);
    }
}

TEST_CASE("pick-and-place demonstrations")
{
    SECTION("one move onto another cube")
    {
        DemoScenario scn;
        scn.cubes = {{"c1", {2.0, 0.0}}, {"c2", {5.0, 0.0}}};
        scn.moves = {{"c2", "c1", {-0.05, 1.17}}};
        ObservationTrace tr = generate_demo(scn);
        REQUIRE(tr.length() == 2);
        CHECK(tr.steps[0].action == "pick");
        CHECK(tr.steps[0].theta == Vec{5.0, 0.0});
        CHECK(tr.steps[1].action == "place");
        CHECK(tr.steps[1].theta == Vec{1.95, 1.17});
    }
    SECTION("no moves, no actions")
    {
        DemoScenario scn;
        scn.cubes = {{"c1", {2.0, 0.0}}};
        CHECK(generate_demo(scn).length() == 0);
    }
    SECTION("a 3-cube tower takes 2 picks and 2 places")
    {
        ObservationTrace tr = generate_demo(make_tower_scenario(3, 7));
        REQUIRE(tr.length() == 4);
        CHECK(tr.steps[0].action == "pick");
        CHECK(tr.steps[1].action == "place");
        CHECK(tr.steps[2].action == "pick");
        CHECK(tr.steps[3].action == "place");
        check_schema_invariants(tr);
    }
    SECTION("the moved cube shows its new position from the next step")
    {
        DemoScenario scn = make_tower_scenario(3, 2);
        ObservationTrace tr = generate_demo(scn);
        const std::string& moved = scn.moves[0].cube;
        CHECK(tr.steps[2].state.at(moved) == tr.steps[1].theta);
    }
    SECTION("tower scenarios keep cubes apart and offsets in range")
    {
        for (std::uint64_t seed = 0; seed < 30; ++seed) {
            for (std::size_t n = 1; n <= 5; ++n) {
                DemoScenario scn = make_tower_scenario(n, seed);
                CHECK(scn.moves.size() == n - 1);
                for (std::size_t i = 1; i < scn.cubes.size(); ++i)
                    CHECK(scn.cubes[i].second[0] - scn.cubes[i - 1].second[0] >= 2.0 - 1e-12);
                for (const auto& m : scn.moves) {
                    CHECK(std::abs(m.offset[0]) <= 0.1);
                    CHECK(m.offset[1] >= 1.1);
                    CHECK(m.offset[1] <= 1.2);
                }
                CHECK_NOTHROW(generate_demo(scn));
            }
        }
    }
    SECTION("errors")
    {
        DemoScenario scn;
        scn.cubes = {{"c1", {2.0, 0.0}}};
        scn.moves = {{"c9", "c1", {0.0, 1.0}}};
        CHECK_THROWS_AS(generate_demo(scn), Error);
        scn.moves = {{"c1", "c9", {0.0, 1.0}}};
        CHECK_THROWS_AS(generate_demo(scn), Error);
        CHECK_THROWS_AS(make_tower_scenario(0, 1), Error);
        CHECK_THROWS_AS(make_tower_scenario(6, 1), Error);
    }
}

TEST_CASE("paddle controller")
{
    SECTION("raw actions are linear in the state")
    {
        PaddlePolicy pol;
        ObservationTrace tr = generate_paddle_trace(pol, 200);
        CHECK(tr.length() == 200);
        check_schema_invariants(tr);
        for (const auto& s : tr.steps)
            CHECK(s.theta[0]
                  == Catch::Approx(pol.c_agent * s.state.at("agent")[0] + pol.c_ball * s.state.at("ball")[0]));
    }
    SECTION("balanced gains with the ball at the agent's height do nothing")
    {
        PaddleConfig cfg;
        cfg.ball_start = 5.0;
        cfg.ball_speed = 0.0;
        cfg.rally_length = 0;
        ObservationTrace tr = generate_paddle_trace(PaddlePolicy{-0.5, 0.5, false}, 60, cfg);
        for (const auto& s : tr.steps) CHECK(s.theta[0] == 0.0);
    }
    SECTION("clip mode only emits -1, 0 and 1")
    {
        PaddlePolicy pol;
        pol.clip = true;
        for (const auto& s : generate_paddle_trace(pol, 300).steps)
            CHECK((s.theta[0] == -1.0 || s.theta[0] == 0.0 || s.theta[0] == 1.0));
    }
    SECTION("positions stay on the court")
    {
        for (const auto& s : generate_paddle_trace(PaddlePolicy{}, 500).steps)
            for (const auto& [id, v] : s.state) {
                CHECK(v[0] >= 0.0);
                CHECK(v[0] <= 10.0);
            }
    }
}

TEST_CASE("regeneration is byte-identical")
{
    CHECK(serialised(simulate_second_order({})) == serialised(simulate_second_order({})));
    CHECK(serialised(generate_demo(make_tower_scenario(4, 11, 0.01)))
          == serialised(generate_demo(make_tower_scenario(4, 11, 0.01))));
    PaddleConfig cfg;
    cfg.seed = 5;
    CHECK(serialised(generate_paddle_trace({}, 100, cfg)) == serialised(generate_paddle_trace({}, 100, cfg)));
    PaddleConfig other = cfg;
    other.seed = 6;
    CHECK(serialised(generate_paddle_trace({}, 100, cfg)) != serialised(generate_paddle_trace({}, 100, other)));
}
