#include <catch2/catch_amalgamated.hpp>

#include "m2m/admm.hpp"
#include "m2m/bench.hpp"
#include "support/toys.hpp"

using namespace m2m;

TEST_CASE("state update arithmetic") {
    AdmmState s;
    s.rho = 2.0;
    s.f1 = {{10.0, 0.0}};
    s.f2 = {{6.0, 0.0}};
    s.fbar = {{8.0, 0.0}};
    s.lambda = {{0.0, 0.0}};
    // Consensus residual |10-8| + |6-8| on the first component.
    CHECK(global_residual(s) == Catch::Approx(4.0));
    // Multiplier ascent on the copy gap: 0 + 2*(10-6) = 8.
    const double lam = s.lambda[0][0] + s.rho * (s.f1[0][0] - s.f2[0][0]);
    CHECK(lam == Catch::Approx(8.0));
}

TEST_CASE("consensus state has zero residual and frozen multipliers") {
    AdmmState s;
    s.rho = 7.0;
    s.f1 = {{12.5, -3.0}};
    s.f2 = {{12.5, -3.0}};
    s.fbar = {{12.5, -3.0}};
    s.lambda = {{1.0, 2.0}};
    CHECK(global_residual(s) == 0.0);
    CHECK(s.lambda[0][0] + s.rho * (s.f1[0][0] - s.f2[0][0]) == Catch::Approx(1.0));
}

TEST_CASE("random states: residual matches an independent summation") {
    std::mt19937 rng(31337);
    std::uniform_real_distribution<double> u(-100, 100);
    for (int t = 0; t < 200; ++t) {
        AdmmState s;
        const int nfg = 1 + static_cast<int>(rng() % 3);
        for (int f = 0; f < nfg; ++f) {
            s.f1.push_back({u(rng), u(rng)});
            s.f2.push_back({u(rng), u(rng)});
            s.fbar.push_back({u(rng), u(rng)});
        }
        double expect = 0.0;
        for (int f = 0; f < nfg; ++f) {
            expect += std::abs(s.f1[f][0] - s.fbar[f][0]) + std::abs(s.f1[f][1] - s.fbar[f][1]);
            expect += std::abs(s.f2[f][0] - s.fbar[f][0]) + std::abs(s.f2[f][1] - s.fbar[f][1]);
        }
        REQUIRE(global_residual(s) == Catch::Approx(expect).margin(1e-12));
    }
}

TEST_CASE("uncongested instance converges with near-zero multipliers at the bound") {
    M2MInstance inst = test::ring4(500.0);
    FlowContext ctx(inst);
    auto central = solve_centralized(inst, ctx);
    REQUIRE(central.status == qp::SolveStatus::optimal);
    auto [o, trace] = run_admm(inst, ctx);
    INFO("iterations " << o.iterations << " residual " << o.final_residual);
    REQUIRE(o.status == AdmmStatus::converged);
    CHECK(o.final_cost ==
          Catch::Approx(central.dispatch.objective).epsilon(1e-6));
    CHECK(std::abs(trace.rows.back().lambda_l1) < 1.0);
}

TEST_CASE("ring4 converges to the centralized cost") {
    M2MInstance inst = test::ring4();
    FlowContext ctx(inst);
    auto central = solve_centralized(inst, ctx);
    auto [o, trace] = run_admm(inst, ctx);
    INFO("iterations " << o.iterations << " residual " << o.final_residual << " cost "
                       << o.final_cost << " central " << central.dispatch.objective);
    REQUIRE(o.status == AdmmStatus::converged);
    CHECK(o.final_cost ==
          Catch::Approx(central.dispatch.objective).epsilon(1e-4));
    CHECK(o.physical_feasible);
}

TEST_CASE("crafted geometries all reach the centralized bound") {
    for (auto make : {craft::swing, craft::non_stopping, craft::opposite_flow,
                      craft::opposite_flow_infeasible, craft::shared_margin}) {
        M2MInstance inst = make();
        FlowContext ctx(inst);
        auto central = solve_centralized(inst, ctx);
        REQUIRE(central.status == qp::SolveStatus::optimal);
        auto [o, trace] = run_admm(inst, ctx);
        INFO(inst.name << ": iterations " << o.iterations << " cost " << o.final_cost
                       << " central " << central.dispatch.objective << " residual "
                       << o.final_residual);
        CHECK(o.status == AdmmStatus::converged);
        CHECK(std::abs(optimality_gap(o.final_cost, central.dispatch.objective)) < 1e-3);
        CHECK(o.physical_feasible);
    }
}

TEST_CASE("penalty scaling leaves the limit point unchanged") {
    M2MInstance inst = craft::swing();
    FlowContext ctx(inst);
    AdmmConfig a, b;
    a.rho = 100.0;
    b.rho = 200.0;
    auto [oa, ta] = run_admm(inst, ctx, a);
    auto [ob, tb] = run_admm(inst, ctx, b);
    REQUIRE(oa.status == AdmmStatus::converged);
    REQUIRE(ob.status == AdmmStatus::converged);
    CHECK(std::abs(oa.final_cost - ob.final_cost) <= 1e-3 * std::abs(oa.final_cost));
}

TEST_CASE("paper-literal dual update keeps the multipliers at exactly zero") {
    M2MInstance inst = test::ring4();
    FlowContext ctx(inst);
    AdmmConfig cfg;
    cfg.dual_update = DualUpdate::paper_literal;
    cfg.max_iter = 60;
    auto [o, trace] = run_admm(inst, ctx, cfg);
    REQUIRE_FALSE(trace.rows.empty());
    for (const auto& r : trace.rows) {
        REQUIRE(r.lambda_l1 == 0.0);
        REQUIRE(r.lambda_l2 == 0.0);
    }
}

TEST_CASE("gauss-seidel mode also converges") {
    M2MInstance inst = test::ring4();
    FlowContext ctx(inst);
    AdmmConfig cfg;
    cfg.gauss_seidel = true;
    auto central = solve_centralized(inst, ctx);
    auto [o, trace] = run_admm(inst, ctx, cfg);
    INFO("iterations " << o.iterations << " cost " << o.final_cost);
    REQUIRE(o.status == AdmmStatus::converged);
    CHECK(o.final_cost ==
          Catch::Approx(central.dispatch.objective).epsilon(1e-4));
}

TEST_CASE("subproblem shadow-price endgames: equal and persistently different") {
    // Shared relief margins: both markets settle on the same flowgate price.
    {
        M2MInstance inst = craft::shared_margin();
        FlowContext ctx(inst);
        auto [o, trace] = run_admm(inst, ctx);
        REQUIRE(o.status == AdmmStatus::converged);
        const auto& last = trace.rows.back();
        INFO("sp1 " << last.sp1 << " sp2 " << last.sp2);
        CHECK(std::abs(last.sp1 - last.sp2) < 1.0);
        CHECK(last.sp1 > 5.0);  // both markets actually price the congestion
    }
    // One-sided relief: prices stay apart even at the optimum.
    {
        M2MInstance inst = craft::non_stopping();
        FlowContext ctx(inst);
        auto [o, trace] = run_admm(inst, ctx);
        REQUIRE(o.status == AdmmStatus::converged);
        const auto& last = trace.rows.back();
        INFO("sp1 " << last.sp1 << " sp2 " << last.sp2);
        CHECK(std::abs(last.sp1 - last.sp2) > 5.0);
    }
}

TEST_CASE("configuration validation") {
    M2MInstance inst = test::ring4();
    FlowContext ctx(inst);
    AdmmConfig cfg;
    cfg.rho = 0.0;
    CHECK_THROWS_AS(run_admm(inst, ctx, cfg), InvalidArgument);
    M2MInstance nofg = inst;
    nofg.flowgates.clear();
    FlowContext ctx2(nofg);
    CHECK_THROWS_AS(run_admm(nofg, ctx2), InvalidArgument);
}
