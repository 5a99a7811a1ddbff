// Observation traces, error specs, calibration and the trace file.

#include <sstream>

#include <catch_amalgamated.hpp>

#include "pim/pim.hpp"

using namespace pim;

namespace {

ObservationTrace pick_trace(std::size_t T)
{
    ObservationTrace tr;
    tr.schema.variables = {{"loc", 2}};
    tr.schema.actions = {{"pick", 2}, {"place", 2}};
    for (std::size_t t = 0; t < T; ++t)
        tr.steps.push_back({{{"loc", {double(t), 0.0}}}, t % 2 ? "place" : "pick", {double(t), 1.0}});
    return tr;
}

} // namespace

TEST_CASE("loss follows the total error definition")
{
    ObservationTrace tr = pick_trace(4);
    const ErrorSpec demo = demo_spec(14.0);

    std::vector<EmittedAction> same;
    for (const auto& s : tr.steps) same.push_back({s.action, s.theta});
    CHECK(loss(same, tr, demo) == 0.0);

    CHECK(loss({}, tr, demo) == 16.0);

    ObservationTrace one;
    one.schema = second_order_schema();
    one.steps.push_back({{{"v", {0.0}}, {"x", {0.0}}}, "accel", {1.0}});
    CHECK(loss({{"accel", {0.5}}}, one, continuous_spec()) == 0.5);

    // Equal lengths and matching names: the plain sum of per-step errors.
    std::vector<EmittedAction> off = same;
    off[1].theta[0] += 0.25;
    off[3].theta[1] -= 0.5;
    CHECK(loss(off, tr, demo) == Catch::Approx(0.75).epsilon(1e-15));
}

TEST_CASE("builtin specs")
{
    const auto specs = builtin_specs(7.5);
    REQUIRE(specs.count("continuous"));
    REQUIRE(specs.count("demo"));
    const ErrorSpec& demo = specs.at("demo");
    CHECK(demo.sigma_act("place", {1, 2}, "pick", {1, 2}) == 7.5);
    CHECK(demo.sigma_act("pick", {1, 2}, "pick", {1, 2}) == 0.0);
    CHECK(demo.sigma_act("pick", {1, 2}, "pick", {4, 6}) == 5.0);
    CHECK(demo.sigma_len(3, 3) == 0.0);
    CHECK(demo.sigma_len(4, 1) == 9.0);
    const ErrorSpec& cont = specs.at("continuous");
    CHECK(cont.sigma_act("accel", {2.0}, "accel", {-1.0}) == 3.0);
    CHECK(cont.sigma_len(100, 3) == 0.0);
    CHECK_THROWS_AS(spec_by_name("nope"), Error);
}

TEST_CASE("spec identities hold on random inputs")
{
    std::mt19937_64 rng(3);
    std::normal_distribution<double> n(0.0, 3.0);
    for (const auto& [name, spec] : builtin_specs(10.0)) {
        for (int i = 0; i < 200; ++i) {
            Vec a{n(rng), n(rng)}, b{n(rng), n(rng)};
            CHECK(spec.sigma_act("pick", a, "pick", a) == 0.0);
            CHECK(spec.sigma_act("pick", a, "pick", b) >= 0.0);
            CHECK(spec.sigma_act("place", a, "pick", b) >= 0.0);
            const std::size_t T = rng() % 50, Tp = rng() % 50;
            CHECK(spec.sigma_len(T, T) == 0.0);
            CHECK(spec.sigma_len(T, Tp) >= 0.0);
        }
    }
}

TEST_CASE("calibrate derives thresholds")
{
    ObservationTrace tr = simulate_second_order({});
    ErrorSpec s = calibrate(continuous_spec(), tr);
    CHECK(s.e_acc == Catch::Approx(0.1));
    // 10x the per-step error of the best constant (the median theta).
    std::vector<double> th;
    for (const auto& st : tr.steps) th.push_back(st.theta[0]);
    std::sort(th.begin(), th.end());
    const double med = 0.5 * (th[49] + th[50]);
    double base = 0.0;
    for (double x : th) base += std::abs(x - med);
    CHECK(s.e_max == Catch::Approx(10.0 * base / 100.0).epsilon(1e-9));

    ErrorSpec o = calibrate(continuous_spec(), tr, Thresholds{2.0, 0.5});
    CHECK(o.e_max == 2.0);
    CHECK(o.e_acc == 0.5);

    ObservationTrace demo = generate_demo(make_tower_scenario(3, 4));
    ErrorSpec d = calibrate(demo_spec(*demo.d_max), demo);
    CHECK(d.e_max == 0.5);
    CHECK(d.e_acc == Catch::Approx(0.004));
}

TEST_CASE("trace files round-trip exactly")
{
    for (const ObservationTrace& tr : {simulate_second_order({}), generate_demo(make_tower_scenario(4, 9)),
                                       generate_paddle_trace(PaddlePolicy{}, 50)}) {
        std::stringstream ss;
        write_trace(ss, tr);
        ObservationTrace back = read_trace(ss);
        CHECK(back.schema == tr.schema);
        CHECK(back.steps == tr.steps);
        CHECK(back.d_max == tr.d_max);
        CHECK(back.e_max == tr.e_max);
        std::stringstream again;
        write_trace(again, back);
        CHECK(again.str() == ss.str());
    }
}

TEST_CASE("trace files are validated")
{
    auto read = [](const std::string& text) {
        std::stringstream ss(text);
        return read_trace(ss);
    };
    const std::string header = R"({"schema":{"variables":{"x":1},"actions":{"accel":1}}})";
    CHECK_NOTHROW(read(header + "\n" + R"({"t":1,"state":{"x":[1]},"action":"accel","theta":[2]})"));
    CHECK_THROWS_AS(read(""), Error);
    CHECK_THROWS_AS(read(R"({"t":1})"), Error);
    CHECK_THROWS_AS(read(header + "\n{not json"), Error);
    CHECK_THROWS_AS(read(header + "\n" + R"({"t":1,"state":{"x":[1,2]},"action":"accel","theta":[2]})"), Error);
    CHECK_THROWS_AS(read(header + "\n" + R"({"t":1,"state":{"y":[1]},"action":"accel","theta":[2]})"), Error);
    CHECK_THROWS_AS(read(header + "\n" + R"({"t":1,"state":{"x":[1]},"action":"jump","theta":[2]})"), Error);
    CHECK_THROWS_AS(read(header + "\n" + R"({"t":1,"state":{"x":[1]},"action":"accel","theta":[2,3]})"), Error);
    CHECK_THROWS_AS(read(header + "\n" + R"({"t":2,"state":{"x":[1]},"action":"accel","theta":[2]})"), Error);
    CHECK_THROWS_AS(read(R"({"schema":{"variables":{},"actions":{}},"e_max":-1})"), Error);
}
