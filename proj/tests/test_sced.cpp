#include <catch2/catch_amalgamated.hpp>

#include "m2m/sced.hpp"
#include "support/lp_oracle.hpp"
#include "support/toys.hpp"

using namespace m2m;

TEST_CASE("uncongested two-bus toy dispatches on merit order") {
    M2MInstance inst;
    inst.name = "tiny";
    inst.network.buses = {{"b1", 80, 1}, {"b2", 0, 2}};
    inst.network.lines = {{"l1", "b1", "b2", 0.1, kInfinity, kInfinity, kInfinity}};
    inst.network.generators = {{"g1", "b1", 10, 0, 200}, {"g2", "b2", 50, 0, 200}};
    inst.network.slack_bus = "b1";
    inst.flowgates = {{"l1", std::nullopt, 500.0, 250.0, 250.0}};
    FlowContext ctx(inst);
    auto sol = solve_centralized(inst, ctx);
    REQUIRE(sol.status == qp::SolveStatus::optimal);
    CHECK(sol.dispatch.p.at("g1") == Catch::Approx(80.0).margin(1e-6));
    CHECK(sol.dispatch.objective == Catch::Approx(800.0).epsilon(1e-8));
    CHECK_FALSE(sol.dispatch.curtailed);
    CHECK(sol.prices.lambda[0][0] == Catch::Approx(0.0).margin(1e-7));
}

TEST_CASE("zero-load instance costs nothing") {
    M2MInstance inst = test::ring4();
    for (auto& b : inst.network.buses) b.load = 0.0;
    FlowContext ctx(inst);
    auto sol = solve_centralized(inst, ctx);
    REQUIRE(sol.status == qp::SolveStatus::optimal);
    CHECK(sol.dispatch.objective == Catch::Approx(0.0).margin(1e-7));
    for (const auto& [g, p] : sol.dispatch.p) CHECK(p == Catch::Approx(0.0).margin(1e-7));
}

TEST_CASE("ring4 centralized solve matches the vertex enumeration oracle") {
    M2MInstance inst = test::ring4();
    FlowContext ctx(inst);
    auto built = build_centralized(inst, ctx);
    auto sol = solve_model(inst, ctx, built);
    REQUIRE(sol.status == qp::SolveStatus::optimal);

    auto o = test::oracle_solve_lp(built.prog);
    REQUIRE(o.feasible);
    REQUIRE_FALSE(o.degenerate);
    REQUIRE(o.duals_valid);
    CHECK(sol.raw.objective == Catch::Approx(o.objective).epsilon(1e-8));
    // Analytic optimum: pB = 100/3 relieves the flowgate at 40 $/MW / 0.75.
    CHECK(sol.raw.objective == Catch::Approx(20.0 * 200.0 / 3.0 + 60.0 * 100.0 / 3.0 + 1500.0));
    CHECK(sol.dispatch.p.at("gB") == Catch::Approx(100.0 / 3.0).margin(1e-6));
    CHECK(sol.dispatch.p.at("gC") == Catch::Approx(100.0).margin(1e-6));

    // Flowgate price: marginal redispatch cost (60-20)/0.75.
    const double lam = 40.0 / 0.75;
    CHECK(sol.prices.lambda[0][0] == Catch::Approx(lam).margin(1e-5));
    CHECK(sol.prices.side[0][0] == BindingSide::upper);
    const int fg_row = built.fg[0].row_a;
    CHECK(sol.raw.row_dual_up(fg_row) ==
          Catch::Approx(o.row_dual_up(fg_row)).margin(1e-6));

    // Binding-set agreement between solver and oracle on the flowgate row.
    const double act = sol.raw.row_activity(built.prog, fg_row);
    CHECK(act == Catch::Approx(built.prog.row(fg_row).ub).margin(1e-6));
}

TEST_CASE("dispatch flows reproduce evaluate_rto_flow") {
    M2MInstance inst = test::ring4();
    FlowContext ctx(inst);
    auto sol = solve_centralized(inst, ctx);
    REQUIRE(sol.status == qp::SolveStatus::optimal);
    for (int l = 0; l < static_cast<int>(inst.network.lines.size()); ++l) {
        for (int rto : {1, 2}) {
            const double f = evaluate_rto_flow(inst.network, ctx.idx, ctx.ptdf, sol.dispatch.p,
                                               rto, inst.network.lines[l].id);
            CHECK(sol.dispatch.flows(l, rto - 1) == Catch::Approx(f).margin(1e-6));
        }
    }
    // Joint flowgate flow sits exactly at the 50 MW capacity.
    CHECK(sol.dispatch.fg_flows(0, 0) + sol.dispatch.fg_flows(0, 1) ==
          Catch::Approx(50.0).margin(1e-6));
}

TEST_CASE("combined relaxation is cheaper: z0 <= z1") {
    M2MInstance inst = test::ring4();
    FlowContext ctx(inst);
    auto z0 = solve_combined(inst, ctx);
    auto z1 = solve_centralized(inst, ctx);
    REQUIRE(z0.status == qp::SolveStatus::optimal);
    REQUIRE(z1.status == qp::SolveStatus::optimal);
    CHECK(z0.dispatch.objective == Catch::Approx(3000.0).epsilon(1e-8));  // all on gC
    CHECK(z0.dispatch.objective <= z1.dispatch.objective + 1e-6);
}

TEST_CASE("doubling every marginal cost doubles z1 and keeps the argmin") {
    M2MInstance inst = test::ring4();
    FlowContext ctx(inst);
    auto s1 = solve_centralized(inst, ctx);
    M2MInstance doubled = inst;
    for (auto& g : doubled.network.generators) g.cost *= 2.0;
    FlowContext ctx2(doubled);
    auto s2 = solve_centralized(doubled, ctx2);
    REQUIRE(s1.status == qp::SolveStatus::optimal);
    REQUIRE(s2.status == qp::SolveStatus::optimal);
    CHECK(s2.dispatch.objective == Catch::Approx(2.0 * s1.dispatch.objective).epsilon(1e-8));
    for (const auto& [g, p] : s1.dispatch.p)
        CHECK(s2.dispatch.p.at(g) == Catch::Approx(p).margin(1e-5));
}

TEST_CASE("interchange shifts the balance rows with opposite signs") {
    M2MInstance inst = test::ring4(500.0);  // wide flowgate, no congestion
    inst.interchange = -30.0;               // RTO 2 serves 30 MW of RTO 1's load
    FlowContext ctx(inst);
    auto sol = solve_centralized(inst, ctx);
    REQUIRE(sol.status == qp::SolveStatus::optimal);
    double p1 = sol.dispatch.p.at("gA") + sol.dispatch.p.at("gB");
    double p2 = sol.dispatch.p.at("gC") + sol.dispatch.p.at("gD");
    CHECK(p1 == Catch::Approx(70.0).margin(1e-6));
    CHECK(p2 == Catch::Approx(130.0).margin(1e-6));
}

TEST_CASE("monitoring-market model uses the excess up to the offered price") {
    M2MInstance inst = test::ring4();
    FlowContext ctx(inst);

    SECTION("cheap opposite price: excess absorbs the whole overflow") {
        auto built = build_mrto(inst, ctx, {10.0});
        auto sol = solve_model(inst, ctx, built);
        REQUIRE(sol.status == qp::SolveStatus::optimal);
        CHECK(sol.dispatch.p.at("gB") == Catch::Approx(0.0).margin(1e-6));
        CHECK(sol.raw.x(built.fg[0].s_var) == Catch::Approx(50.0).margin(1e-5));
        CHECK(sol.raw.objective == Catch::Approx(2500.0).epsilon(1e-7));
        CHECK(sol.prices.lambda[0][0] == Catch::Approx(10.0).margin(1e-6));
        auto o = test::oracle_solve_lp(built.prog);
        REQUIRE(o.feasible);
        CHECK(sol.raw.objective == Catch::Approx(o.objective).epsilon(1e-8));
    }
    SECTION("expensive opposite price: redispatch down to the own share") {
        auto built = build_mrto(inst, ctx, {70.0});
        auto sol = solve_model(inst, ctx, built);
        REQUIRE(sol.status == qp::SolveStatus::optimal);
        CHECK(sol.raw.x(built.fg[0].s_var) == Catch::Approx(0.0).margin(1e-6));
        CHECK(sol.dispatch.p.at("gB") == Catch::Approx(200.0 / 3.0).margin(1e-5));
        CHECK(sol.prices.lambda[0][0] == Catch::Approx(40.0 / 0.75).margin(1e-5));
        auto o = test::oracle_solve_lp(built.prog);
        REQUIRE(o.feasible);
        CHECK(sol.raw.objective == Catch::Approx(o.objective).epsilon(1e-8));
    }
    SECTION("zero opposite price frees the excess variable") {
        auto built = build_mrto(inst, ctx, {0.0});
        auto sol = solve_model(inst, ctx, built);
        REQUIRE(sol.status == qp::SolveStatus::optimal);
        CHECK(sol.dispatch.p.at("gB") == Catch::Approx(0.0).margin(1e-6));
        CHECK(sol.prices.lambda[0][0] == Catch::Approx(0.0).margin(1e-8));
    }
}

TEST_CASE("non-monitoring market honors the relief request") {
    M2MInstance inst = test::ring4();
    FlowContext ctx(inst);
    // Relief of 30 MW shrinks the share to -5: only the excess (priced at 40)
    // can restore feasibility, so its dual equals the offered price.
    auto built = build_nmrto(inst, ctx, {40.0}, {30.0});
    auto sol = solve_model(inst, ctx, built);
    REQUIRE(sol.status == qp::SolveStatus::optimal);
    CHECK(sol.raw.x(built.fg[0].s_var) == Catch::Approx(5.0).margin(1e-5));
    CHECK(sol.prices.lambda[0][1] == Catch::Approx(40.0).margin(1e-5));
    // Zero relief with the same price: share is slack at the natural point.
    auto built2 = build_nmrto(inst, ctx, {40.0}, {0.0});
    auto sol2 = solve_model(inst, ctx, built2);
    REQUIRE(sol2.status == qp::SolveStatus::optimal);
    CHECK(sol2.prices.lambda[0][1] == Catch::Approx(0.0).margin(1e-8));
}

TEST_CASE("consensus subproblem forms") {
    M2MInstance inst = test::ring4();
    FlowContext ctx(inst);
    std::vector<std::array<double, 2>> zero{{0.0, 0.0}};

    SECTION("rho = 0 and zero multipliers reduce to the plain market model") {
        auto built = build_admm_subproblem(inst, ctx, 1, zero, zero, 0.0);
        auto sol = solve_model(inst, ctx, built);
        REQUIRE(sol.status == qp::SolveStatus::optimal);
        // Free other-market copy makes the joint row harmless: natural cost.
        CHECK(sol.dispatch.cost_by_rto[0] == Catch::Approx(2000.0).epsilon(1e-7));
    }
    SECTION("huge rho pins the copies to the consensus target") {
        std::vector<std::array<double, 2>> fbar{{50.0, 0.0}};  // centralized flows
        auto built = build_admm_subproblem(inst, ctx, 1, fbar, zero, 1e6);
        auto sol = solve_model(inst, ctx, built);
        REQUIRE(sol.status == qp::SolveStatus::optimal);
        CHECK(sol.raw.x(built.fg[0].f_own) == Catch::Approx(50.0).margin(1e-3));
        CHECK(sol.raw.x(built.fg[0].f_oth) == Catch::Approx(0.0).margin(1e-3));
        // Quadratic term vanishes at the target: objective is pure cost.
        CHECK(sol.raw.objective ==
              Catch::Approx(20.0 * 200.0 / 3.0 + 60.0 * 100.0 / 3.0).epsilon(1e-5));
    }
    SECTION("negative rho is rejected") {
        CHECK_THROWS_AS(build_admm_subproblem(inst, ctx, 1, zero, zero, -1.0),
                        InvalidArgument);
    }
}

TEST_CASE("curtailment slack prices impossible balances instead of failing") {
    M2MInstance inst = test::ring4(500.0);
    for (auto& g : inst.network.generators)
        if (g.id == "gC" || g.id == "gD") g.pmax = 30.0;  // RTO 2 short by 40 MW
    FlowContext ctx(inst);
    auto sol = solve_centralized(inst, ctx);
    REQUIRE(sol.status == qp::SolveStatus::optimal);
    CHECK(sol.dispatch.curtailed);
    CHECK(sol.dispatch.curtail.at("b3") == Catch::Approx(40.0).margin(1e-5));
    CHECK(sol.dispatch.objective >= 40.0 * inst.curtailment_price);
}
