#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "m2m/qpsolver.hpp"
#include "support/lp_oracle.hpp"

using namespace m2m;
using namespace m2m::qp;

namespace {

ConvexProgram transport_lp() {
    // min 2a + 3b + 5c  s.t. a + b + c = 10, a <= 4, b <= 3, a,b,c >= 0
    ConvexProgram p;
    int a = p.add_variable("a", 0, 4, 2);
    int b = p.add_variable("b", 0, 3, 3);
    int c = p.add_variable("c", 0, kInfinity, 5);
    p.add_equality("balance", 10, {{a, 1}, {b, 1}, {c, 1}});
    return p;
}

}  // namespace

TEST_CASE("bound-only LP is solved by inspection") {
    ConvexProgram p;
    p.add_variable("x", 3, kInfinity, 1.0);
    auto r = solve(p);
    REQUIRE(r.status == SolveStatus::optimal);
    CHECK(r.x(0) == Catch::Approx(3.0));
    CHECK(r.objective == Catch::Approx(3.0));
    CHECK(r.var_dual_lo(0) == Catch::Approx(1.0));
    CHECK(r.var_dual_up(0) == Catch::Approx(0.0));
}

TEST_CASE("equality-fixed degenerate point") {
    ConvexProgram p;
    int x = p.add_variable("x", -kInfinity, kInfinity, 7.0);
    int y = p.add_variable("y", 0, 10, -1.0);
    p.add_equality("fix_x", 5, {{x, 1}});
    p.add_equality("fix_y", 2, {{y, 1}});
    auto r = solve(p);
    REQUIRE(r.status == SolveStatus::optimal);
    CHECK(r.objective == Catch::Approx(7.0 * 5 - 2.0));
    CHECK(r.x(0) == Catch::Approx(5.0));
    CHECK(r.x(1) == Catch::Approx(2.0));
}

TEST_CASE("box QP stationary point") {
    // min x^2 - 2x on [0, 5] -> x = 1, objective -1
    ConvexProgram p;
    p.add_variable("x", 0, 5, -2.0, 2.0);
    auto r = solve(p);
    REQUIRE(r.status == SolveStatus::optimal);
    CHECK(r.x(0) == Catch::Approx(1.0));
    CHECK(r.objective == Catch::Approx(-1.0));
}

TEST_CASE("simple LP with equality and bounds matches oracle") {
    ConvexProgram p = transport_lp();
    auto r = solve(p);
    REQUIRE(r.status == SolveStatus::optimal);
    auto o = test::oracle_solve_lp(p);
    REQUIRE(o.feasible);
    CHECK(r.objective == Catch::Approx(o.objective).epsilon(1e-9));
    for (int j = 0; j < p.num_variables(); ++j)
        CHECK(r.x(j) == Catch::Approx(o.x(j)).margin(1e-7));
    // a = 4, b = 3, c = 3 -> obj = 8 + 9 + 15 = 32; balance dual = 5.
    CHECK(r.objective == Catch::Approx(32.0));
    REQUIRE(o.duals_valid);
    CHECK(r.row_dual_lo(0) == Catch::Approx(o.row_dual_lo(0)).margin(1e-6));
    CHECK(r.row_dual_up(0) == Catch::Approx(o.row_dual_up(0)).margin(1e-6));
}

TEST_CASE("two-sided row duals follow the relaxation convention") {
    // min -x s.t. 1 <= x <= 4 via a row (not variable bounds).
    ConvexProgram p;
    int x = p.add_variable("x", -kInfinity, kInfinity, -1.0);
    int row = p.add_row("box", 1, 4, {{x, 1}});
    auto r = solve(p);
    REQUIRE(r.status == SolveStatus::optimal);
    CHECK(r.x(0) == Catch::Approx(4.0));
    CHECK(r.row_dual_up(row) == Catch::Approx(1.0));  // relax ub by 1 -> obj drops by 1
    CHECK(r.row_dual_lo(row) == Catch::Approx(0.0).margin(1e-8));
}

TEST_CASE("infeasible program is reported as a status") {
    ConvexProgram p;
    int x = p.add_variable("x", 0, 1, 1.0);
    p.add_row("need_two", 2, kInfinity, {{x, 1}});
    auto r = solve(p);
    CHECK(r.status == SolveStatus::infeasible);
}

TEST_CASE("obviously unbounded program is reported as a status") {
    ConvexProgram p;
    p.add_variable("x", -kInfinity, 0, 1.0);
    auto r = solve(p);
    CHECK(r.status == SolveStatus::unbounded);
}

TEST_CASE("strong duality holds on optimal LPs") {
    ConvexProgram p = transport_lp();
    auto r = solve(p);
    REQUIRE(r.status == SolveStatus::optimal);
    CHECK(r.dual_objective ==
          Catch::Approx(r.objective).epsilon(1e-6));
}

TEST_CASE("objective scaling scales duals and preserves the argmin") {
    ConvexProgram p = transport_lp();
    auto r1 = solve(p);
    ConvexProgram ps = transport_lp();
    for (int j = 0; j < ps.num_variables(); ++j)
        ps.set_cost(j, 3.0 * ps.variable(j).cost);
    auto r2 = solve(ps);
    REQUIRE(r1.status == SolveStatus::optimal);
    REQUIRE(r2.status == SolveStatus::optimal);
    CHECK(r2.objective == Catch::Approx(3.0 * r1.objective).epsilon(1e-8));
    for (int j = 0; j < p.num_variables(); ++j)
        CHECK(r2.x(j) == Catch::Approx(r1.x(j)).margin(1e-6));
    CHECK(r2.row_dual_lo(0) == Catch::Approx(3.0 * r1.row_dual_lo(0)).margin(1e-6));
    CHECK(r2.row_dual_up(0) == Catch::Approx(3.0 * r1.row_dual_up(0)).margin(1e-6));
}

TEST_CASE("determinism: identical programs give identical results") {
    ConvexProgram p = transport_lp();
    auto r1 = solve(p);
    auto r2 = solve(p);
    REQUIRE(r1.status == r2.status);
    CHECK(r1.objective == r2.objective);
    CHECK((r1.x - r2.x).cwiseAbs().maxCoeff() == 0.0);
    CHECK(r1.iterations == r2.iterations);
}

TEST_CASE("randomized LPs agree with the vertex enumeration oracle") {
    std::mt19937 rng(20240817);
    std::uniform_real_distribution<double> cost(1.0, 9.0);
    std::uniform_real_distribution<double> coef(-1.0, 1.0);
    int checked = 0;
    for (int trial = 0; trial < 40; ++trial) {
        const int n = 3 + static_cast<int>(rng() % 4);
        ConvexProgram p;
        for (int j = 0; j < n; ++j)
            p.add_variable("x" + std::to_string(j), 0.0, 2.0 + (rng() % 5), cost(rng));
        // One demand equality plus a couple of capacity rows.
        std::vector<LinearTerm> bal;
        for (int j = 0; j < n; ++j) bal.push_back({j, 1.0});
        p.add_equality("demand", 0.6 * n, bal);
        for (int i = 0; i < 2; ++i) {
            std::vector<LinearTerm> t;
            for (int j = 0; j < n; ++j) {
                double a = coef(rng);
                if (std::abs(a) > 0.3) t.push_back({j, a});
            }
            if (!t.empty()) p.add_row("cap" + std::to_string(i), -3.0, 3.0, t);
        }
        auto o = test::oracle_solve_lp(p);
        auto r = solve(p);
        if (!o.feasible) {
            CHECK(r.status == SolveStatus::infeasible);
            continue;
        }
        REQUIRE(r.status == SolveStatus::optimal);
        CHECK(r.objective == Catch::Approx(o.objective).epsilon(1e-7).margin(1e-7));
        ++checked;
    }
    CHECK(checked >= 25);
}

TEST_CASE("diagonal QP matches the KKT enumeration oracle") {
    ConvexProgram p;
    int x = p.add_variable("x", 0, 10, -4.0, 2.0);
    int y = p.add_variable("y", 0, 10, -2.0, 1.0);
    p.add_row("couple", -kInfinity, 2.5, {{x, 1}, {y, 1}});
    auto r = solve(p);
    REQUIRE(r.status == SolveStatus::optimal);
    auto o = test::oracle_solve_qp(p);
    REQUIRE(o.feasible);
    CHECK(r.objective == Catch::Approx(o.objective).epsilon(1e-8));
    CHECK(r.x(0) == Catch::Approx(o.x(0)).margin(1e-6));
    CHECK(r.x(1) == Catch::Approx(o.x(1)).margin(1e-6));
}

TEST_CASE("validate rejects malformed programs") {
    ConvexProgram p;
    p.add_variable("x", 1.0, 0.0, 1.0);  // crossed bounds
    CHECK_THROWS_AS(solve(p), InvalidArgument);

    ConvexProgram p2;
    p2.add_variable("x", 0.0, 1.0, 1.0, -1.0);  // indefinite
    CHECK_THROWS_AS(solve(p2), InvalidArgument);
}

TEST_CASE("LP text dump contains all sections") {
    ConvexProgram p = transport_lp();
    const std::string lp = p.to_lp_text();
    CHECK(lp.find("Minimize") != std::string::npos);
    CHECK(lp.find("Subject To") != std::string::npos);
    CHECK(lp.find("Bounds") != std::string::npos);
    CHECK(lp.find("balance") != std::string::npos);
    CHECK(lp.find("End") != std::string::npos);
}
