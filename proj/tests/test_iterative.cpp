#include <catch2/catch_amalgamated.hpp>

#include "m2m/bench.hpp"
#include "m2m/iterative.hpp"
#include "support/toys.hpp"

using namespace m2m;

TEST_CASE("relief request formulas") {
    SECTION("raw form can be negative") {
        CHECK(relief_eq3(80, 40, 100, 0) == Catch::Approx(20.0));
        CHECK(relief_eq3(-250, 100, 100, 0) == Catch::Approx(-250.0));
        CHECK(relief_eq3(50, 50, 100, 20) == Catch::Approx(20.0));
    }
    SECTION("magnitude form stays nonnegative") {
        CHECK(relief_eq8(-250, 100, 100, 0) == Catch::Approx(50.0));
        CHECK(relief_eq8(60, 40, 100, 0) == Catch::Approx(0.0));
        CHECK(relief_eq8(80, 40, 100, 20) == Catch::Approx(40.0));
    }
    SECTION("nonnegativity property of the magnitude form") {
        std::mt19937 rng(5150);
        std::uniform_real_distribution<double> u(-500, 500);
        for (int i = 0; i < 2000; ++i) {
            const double r = relief_eq8(u(rng), u(rng), std::abs(u(rng)) + 1, 0.0);
            REQUIRE(r >= 0.0);
        }
    }
}

TEST_CASE("adder triggers only when binding against a cheaper opposite price") {
    CHECK(compute_adder(true, 40, 10, 100) == Catch::Approx(20.0));
    CHECK(compute_adder(false, 40, 10, 100) == Catch::Approx(0.0));
    CHECK(compute_adder(true, 10, 40, 100) == Catch::Approx(0.0));
    CHECK(compute_adder(true, 40, 10, 100, 0.1) == Catch::Approx(10.0));
    CHECK_THROWS_AS(compute_adder(true, 40, 10, 100, 0.5), InvalidArgument);
}

TEST_CASE("swing detector") {
    auto trace_from_lambda1 = [](std::vector<double> seq) {
        IterativeTrace t;
        for (size_t i = 0; i < seq.size(); ++i) {
            IterTraceRow r;
            r.k = static_cast<int>(i) + 1;
            r.lambda1 = seq[i];
            t.rows.push_back(r);
        }
        return t;
    };
    CHECK(detect_swing(trace_from_lambda1({40, 0, 40, 0, 40})));
    CHECK_FALSE(detect_swing(trace_from_lambda1({40, 30, 20, 10})));
    // Constant nonzero against a constant zero is the non-stopping mode.
    auto t = trace_from_lambda1({43.98, 43.98, 43.98, 43.98});
    CHECK_FALSE(detect_swing(t));

    // Flow oscillation branch.
    IterativeTrace tf;
    for (int i = 0; i < 6; ++i) {
        IterTraceRow r;
        r.k = i + 1;
        r.f2 = (i % 2 == 0) ? 36.0 : 60.0;
        tf.rows.push_back(r);
    }
    CHECK(detect_swing(tf));
}

TEST_CASE("uncongested instance converges immediately with zero prices") {
    M2MInstance inst = test::ring4(500.0);  // wide flowgate
    FlowContext ctx(inst);
    auto [o, trace] = run_iterative(inst, ctx);
    CHECK(o.status == IterativeStatus::converged);
    CHECK(o.iterations == 1);
    CHECK(trace.rows.front().lambda1 == Catch::Approx(0.0).margin(1e-7));
    CHECK(trace.rows.front().lambda2 == Catch::Approx(0.0).margin(1e-7));
}

TEST_CASE("crafted swing geometry oscillates with the price alternating to zero") {
    M2MInstance inst = craft::swing();
    FlowContext ctx(inst);
    auto [o, trace] = run_iterative(inst, ctx);
    INFO(trace.to_csv());
    CHECK(o.status == IterativeStatus::swing_detected);
    REQUIRE(trace.rows.size() == 10);
    // Odd iterations bind at ~53.33; even iterations are relieved at zero.
    CHECK(trace.rows[0].lambda1 == Catch::Approx(40.0 / 0.75).margin(1e-4));
    CHECK(trace.rows[1].lambda1 == Catch::Approx(0.0).margin(1e-6));
    CHECK(trace.rows[2].lambda1 == Catch::Approx(40.0 / 0.75).margin(1e-4));
    CHECK(trace.rows[3].lambda1 == Catch::Approx(0.0).margin(1e-6));
    // The other market's granted flow swings back and forth.
    CHECK(trace.rows[0].f2 == Catch::Approx(36.0).margin(1e-4));
    CHECK(trace.rows[1].f2 == Catch::Approx(60.0).margin(1e-4));
    // A physically feasible iterate exists and dominates the central cost.
    CHECK(o.has_feasible_iterate);
}

TEST_CASE("crafted non-stopping geometry freezes unequal prices") {
    M2MInstance inst = craft::non_stopping();
    FlowContext ctx(inst);
    auto [o, trace] = run_iterative(inst, ctx);
    INFO(trace.to_csv());
    CHECK(o.status == IterativeStatus::max_iterations);
    REQUIRE(trace.rows.size() == 10);
    for (const auto& r : trace.rows) {
        CHECK(r.lambda1 == Catch::Approx(40.0 / 0.75).margin(1e-4));
        CHECK(r.lambda2 == Catch::Approx(0.0).margin(1e-7));
    }
    CHECK(detect_non_stopping(trace));
    CHECK_FALSE(detect_swing(trace));
    CHECK_FALSE(o.shadow_prices_converged);
    CHECK(o.physical_feasible);  // congestion is managed, prices never meet
}

TEST_CASE("opposite-flow geometry: raw relief negative, magnitude relief misdirects") {
    M2MInstance inst = craft::opposite_flow();
    FlowContext ctx(inst);

    SECTION("raw formula emits a negative request on the opposing flows") {
        IterativeConfig cfg;
        cfg.relief_formula = ReliefFormula::eq3;
        auto [o, trace] = run_iterative(inst, ctx, cfg);
        INFO(trace.to_csv());
        REQUIRE_FALSE(trace.rows.empty());
        CHECK(trace.rows.front().relief < 0.0);
        CHECK(o.status != IterativeStatus::converged);
    }
    SECTION("magnitude formula sends positive relief that worsens the joint flow") {
        IterativeConfig cfg;  // eq8 default
        auto [o, trace] = run_iterative(inst, ctx, cfg);
        INFO(trace.to_csv());
        REQUIRE_FALSE(trace.rows.empty());
        const auto& k1 = trace.rows.front();
        CHECK(k1.relief > 0.0);
        // The granted reduction (50 -> 30) pushes the joint flow further past
        // the 100 MW capacity instead of relieving it.
        CHECK(k1.f2 == Catch::Approx(30.0).margin(1e-4));
        CHECK(std::abs(k1.f1 + k1.f2) > inst.flowgates[0].capacity + 1.0);
        CHECK_FALSE(k1.physical_feasible);
        CHECK(o.status != IterativeStatus::converged);
    }
    SECTION("stressed variant is infeasible from the initial capacity shares") {
        M2MInstance hard = craft::opposite_flow_infeasible();
        FlowContext ctx2(hard);
        auto [o, trace] = run_iterative(hard, ctx2);
        CHECK(o.status == IterativeStatus::infeasible);
    }
}

TEST_CASE("printed soft form cannot oscillate: prices collapse monotonically") {
    M2MInstance inst = craft::swing();
    FlowContext ctx(inst);
    IterativeConfig cfg;
    cfg.mrto_mode = MrtoFlowgateMode::soft_allocation;
    auto [o, trace] = run_iterative(inst, ctx, cfg);
    INFO(trace.to_csv());
    // Each monitoring solve is capped by the price it received, so the price
    // sequence cannot rise; no alternation to a nonzero value is possible.
    for (size_t i = 1; i < trace.rows.size(); ++i)
        CHECK(trace.rows[i].lambda1 <= trace.rows[i - 1].lambda2 + 1e-6);
    CHECK_FALSE(detect_swing(trace));
}

TEST_CASE("protocol cost dominance on the crafted suite") {
    for (auto make : {craft::swing, craft::non_stopping, craft::opposite_flow}) {
        M2MInstance inst = make();
        FlowContext ctx(inst);
        auto central = solve_centralized(inst, ctx);
        REQUIRE(central.status == qp::SolveStatus::optimal);
        auto [o, trace] = run_iterative(inst, ctx);
        if (o.has_feasible_iterate)
            CHECK(o.feasible_cost >=
                  central.dispatch.objective * (1.0 - 1e-6) - 1e-6);
    }
}

TEST_CASE("ring4 runs to max iterations with frozen unequal prices") {
    M2MInstance inst = test::ring4();
    FlowContext ctx(inst);
    auto [o, trace] = run_iterative(inst, ctx);
    CHECK(o.status == IterativeStatus::max_iterations);
    CHECK(detect_non_stopping(trace));
    // The monitoring market fully manages the congestion on its own here, so
    // the kept outcome matches the centralized cost.
    REQUIRE(o.has_feasible_iterate);
    auto central = solve_centralized(inst, ctx);
    CHECK(o.feasible_cost == Catch::Approx(central.dispatch.objective).epsilon(1e-6));
}
