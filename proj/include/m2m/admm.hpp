#pragma once

// Consensus decomposition of the centralized two-market dispatch: each market
// carries its own copy of every flowgate flow pair, the copies are penalized
// toward their running average, and the pair multipliers ascend on the copy
// disagreement.  The two subproblem solves inside one iteration see the same
// averages and multipliers and may run concurrently.
//
// The multiplier update ascends on the inter-market copy gap,
//   lambda += rho * (copy_1 - copy_2),
// which is the dualization of the pairwise consensus constraints.  The
// literal sum of both copies' deviations from their mean is also available
// behind `DualUpdate::paper_literal`; it telescopes to exactly zero, so the
// multipliers never move and the decomposition degrades to pure averaging —
// kept selectable precisely to make that degeneracy demonstrable.

#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <future>
#include <string>
#include <vector>

#include "m2m/instance.hpp"
#include "m2m/sced.hpp"

namespace m2m {

enum class DualUpdate { consensus, paper_literal };

inline const char* to_string(DualUpdate d) {
    return d == DualUpdate::consensus ? "consensus" : "paper-literal";
}

inline DualUpdate dual_update_from_string(const std::string& s) {
    if (s == "consensus") return DualUpdate::consensus;
    if (s == "paper-literal" || s == "paper_literal") return DualUpdate::paper_literal;
    throw InvalidArgument("unknown dual update '" + s + "'");
}

struct AdmmConfig {
    double rho = 100.0;            // $/MWh per MW
    double residual_tol = 1e-4;    // MW
    double improvement_tol = 1e-6; // relative objective change
    int max_iter = 2000;
    DualUpdate dual_update = DualUpdate::consensus;
    bool gauss_seidel = false;  // sequential mode: market 2 sees market 1's fresh copies
    bool parallel_solves = true;
    qp::SolverOptions solver;
};

using FgPairs = std::vector<std::array<double, 2>>;  // per flowgate: (f_l1, f_l2)

struct AdmmState {
    int k = 0;
    FgPairs f1;    // market 1's copies
    FgPairs f2;    // market 2's copies
    FgPairs fbar;  // consensus targets
    FgPairs lambda;
    double rho = 0.0;
    double residual = kInfinity;  // MW
    double objective = kInfinity; // true combined generation + curtailment cost
    std::array<double, 2> sp{0.0, 0.0};  // first-flowgate joint-row duals per market
    std::array<double, 2> cost_by_rto{0.0, 0.0};
    bool curtailed = false;
};

/// Sum over flowgates and pair components of both copies' distances to the
/// consensus target.
inline double global_residual(const AdmmState& s) {
    double r = 0.0;
    for (size_t f = 0; f < s.fbar.size(); ++f)
        for (int j = 0; j < 2; ++j)
            r += std::abs(s.f1[f][j] - s.fbar[f][j]) + std::abs(s.f2[f][j] - s.fbar[f][j]);
    return r;
}

enum class AdmmStatus { converged, max_iterations, solver_failure };

inline const char* to_string(AdmmStatus s) {
    switch (s) {
        case AdmmStatus::converged: return "converged";
        case AdmmStatus::max_iterations: return "max_iterations";
        case AdmmStatus::solver_failure: return "solver_failure";
    }
    return "?";
}

struct AdmmOutcome {
    AdmmStatus status = AdmmStatus::solver_failure;
    int iterations = 0;
    double wall_seconds = 0.0;
    double final_cost = kInfinity;
    double final_residual = kInfinity;
    bool curtailed = false;
    bool physical_feasible = false;  // true joint flowgate flows within limits
};

struct AdmmTraceRow {
    int k;
    double residual, objective;
    double lambda_l1, lambda_l2;
    double sp1, sp2;
    double f1_1, f1_2, f2_1, f2_2;
};

struct AdmmTrace {
    std::vector<AdmmTraceRow> rows;

    std::string to_csv() const {
        std::string out = "k,residual,objective,lambda_l1,lambda_l2,sp1,sp2,f1_1,f1_2,f2_1,f2_2\n";
        char buf[360];
        for (const auto& r : rows) {
            snprintf(buf, sizeof(buf),
                     "%d,%.12g,%.12g,%.12g,%.12g,%.12g,%.12g,%.12g,%.12g,%.12g,%.12g\n", r.k,
                     r.residual, r.objective, r.lambda_l1, r.lambda_l2, r.sp1, r.sp2, r.f1_1,
                     r.f1_2, r.f2_1, r.f2_2);
            out += buf;
        }
        return out;
    }
};

struct AdmmSubResult {
    FgPairs copies;             // this market's flow-pair copies
    double cost = 0.0;          // generation + curtailment
    double curtailment = 0.0;   // MW
    double sp = 0.0;            // first flowgate joint-row dual
    bool ok = false;
};

/// One market's penalized solve given the shared averages and multipliers.
inline AdmmSubResult solve_admm_sub(const M2MInstance& inst, const FlowContext& ctx, int rto,
                                    const FgPairs& fbar, const FgPairs& lambda, double rho,
                                    const qp::SolverOptions& sopt) {
    AdmmSubResult out;
    auto built = build_admm_subproblem(inst, ctx, rto, fbar, lambda, rho);
    auto sol = solve_model(inst, ctx, built, sopt);
    if (sol.status != qp::SolveStatus::optimal) return out;
    out.ok = true;
    out.cost = sol.dispatch.objective;
    for (const auto& [bus, c] : sol.dispatch.curtail) out.curtailment += c;
    for (size_t f = 0; f < inst.flowgates.size(); ++f) {
        std::array<double, 2> pair{};
        const double own = sol.raw.x(built.fg[f].f_own);
        const double oth = sol.raw.x(built.fg[f].f_oth);
        pair[rto - 1] = own;
        pair[2 - rto] = oth;
        out.copies.push_back(pair);
    }
    out.sp = sol.raw.row_dual_up(built.fg[0].row_a) + sol.raw.row_dual_lo(built.fg[0].row_a);
    return out;
}

/// Warm start: each market's standalone dispatch supplies its own pair
/// component; zero when a standalone model is infeasible.
inline FgPairs admm_initial_target(const M2MInstance& inst, const FlowContext& ctx,
                                   const qp::SolverOptions& sopt) {
    FgPairs fbar(inst.flowgates.size(), {0.0, 0.0});
    for (int rto : {1, 2}) {
        auto built = build_rto_standalone(inst, ctx, rto);
        auto sol = solve_model(inst, ctx, built, sopt);
        if (sol.status != qp::SolveStatus::optimal) continue;
        for (size_t f = 0; f < inst.flowgates.size(); ++f)
            fbar[f][rto - 1] = sol.dispatch.fg_flows(f, rto - 1);
    }
    return fbar;
}

/// How the two subproblem solves are produced: locally (optionally in
/// parallel or Gauss-Seidel order) or across a transport boundary.
struct AdmmEndpoints {
    std::function<FgPairs()> initial_target;
    std::function<std::pair<AdmmSubResult, AdmmSubResult>(const FgPairs& fbar,
                                                          const FgPairs& lambda, double rho)>
        both_subs;
};

inline AdmmEndpoints local_admm_endpoints(const M2MInstance& inst, const FlowContext& ctx,
                                          const AdmmConfig& cfg) {
    AdmmEndpoints ep;
    ep.initial_target = [&inst, &ctx, &cfg] { return admm_initial_target(inst, ctx, cfg.solver); };
    ep.both_subs = [&inst, &ctx, &cfg](const FgPairs& fbar, const FgPairs& lambda, double rho) {
        AdmmSubResult r1, r2;
        if (cfg.gauss_seidel) {
            r1 = solve_admm_sub(inst, ctx, 1, fbar, lambda, rho, cfg.solver);
            if (r1.ok)
                r2 = solve_admm_sub(inst, ctx, 2, r1.copies, lambda, rho, cfg.solver);
        } else if (cfg.parallel_solves) {
            auto fut = std::async(std::launch::async, [&] {
                return solve_admm_sub(inst, ctx, 1, fbar, lambda, rho, cfg.solver);
            });
            r2 = solve_admm_sub(inst, ctx, 2, fbar, lambda, rho, cfg.solver);
            r1 = fut.get();
        } else {
            r1 = solve_admm_sub(inst, ctx, 1, fbar, lambda, rho, cfg.solver);
            r2 = solve_admm_sub(inst, ctx, 2, fbar, lambda, rho, cfg.solver);
        }
        return std::make_pair(r1, r2);
    };
    return ep;
}

/// One full iteration: both subproblem solves, averaging, multiplier ascent,
/// residual and objective refresh.
inline AdmmState admm_step_with(const M2MInstance& inst, const AdmmEndpoints& ep,
                                const AdmmState& prev, const AdmmConfig& cfg) {
    AdmmState s = prev;
    s.k = prev.k + 1;

    auto [r1, r2] = ep.both_subs(s.fbar, s.lambda, s.rho);
    if (!r1.ok || !r2.ok) throw NumericalError("consensus subproblem solve failed");

    s.f1 = r1.copies;
    s.f2 = r2.copies;
    for (size_t f = 0; f < inst.flowgates.size(); ++f)
        for (int j = 0; j < 2; ++j) {
            const double sum = s.f1[f][j] + s.f2[f][j];
            s.fbar[f][j] = sum / 2.0;
            if (cfg.dual_update == DualUpdate::consensus) {
                s.lambda[f][j] += s.rho * (s.f1[f][j] - s.f2[f][j]);
            } else {
                // Literal two-term sum around the fresh mean; the halving of
                // `sum` is exact in binary, so the increment is exactly zero.
                s.lambda[f][j] += s.rho * (sum - 2.0 * s.fbar[f][j]);
            }
        }
    s.residual = global_residual(s);
    s.cost_by_rto = {r1.cost, r2.cost};
    s.objective = r1.cost + r2.cost;
    s.curtailed = (r1.curtailment + r2.curtailment) > 1e-6;
    s.sp = {r1.sp, r2.sp};
    return s;
}

inline std::pair<AdmmOutcome, AdmmTrace> run_admm_with(const M2MInstance& inst,
                                                       const AdmmEndpoints& ep,
                                                       const AdmmConfig& cfg) {
    if (inst.flowgates.empty())
        throw InvalidArgument("consensus decomposition requires at least one flowgate");
    if (!(cfg.rho > 0.0)) throw InvalidArgument("penalty factor must be > 0");

    const auto t0 = std::chrono::steady_clock::now();
    AdmmOutcome out;
    AdmmTrace trace;

    AdmmState s;
    s.rho = cfg.rho;
    s.fbar = ep.initial_target();
    s.f1.assign(inst.flowgates.size(), {0.0, 0.0});
    s.f2.assign(inst.flowgates.size(), {0.0, 0.0});
    s.lambda.assign(inst.flowgates.size(), {0.0, 0.0});

    double prev_obj = kInfinity;
    bool converged = false;
    while (s.k < cfg.max_iter) {
        try {
            s = admm_step_with(inst, ep, s, cfg);
        } catch (const NumericalError&) {
            out.status = AdmmStatus::solver_failure;
            out.iterations = s.k;
            return {out, trace};
        }
        trace.rows.push_back({s.k, s.residual, s.objective, s.lambda[0][0], s.lambda[0][1],
                              s.sp[0], s.sp[1], s.f1[0][0], s.f1[0][1], s.f2[0][0], s.f2[0][1]});
        const double rel_impr =
            std::abs(s.objective - prev_obj) / std::max(1.0, std::abs(s.objective));
        if (s.residual <= cfg.residual_tol && rel_impr <= cfg.improvement_tol) {
            converged = true;
            break;
        }
        prev_obj = s.objective;
    }

    out.status = converged ? AdmmStatus::converged : AdmmStatus::max_iterations;
    out.iterations = s.k;
    out.final_cost = s.objective;
    out.final_residual = s.residual;
    out.curtailed = s.curtailed;
    // True physical verdict on the final iterates' own contributions.
    out.physical_feasible = true;
    for (size_t f = 0; f < inst.flowgates.size(); ++f) {
        const double joint = s.f1[f][0] + s.f2[f][1];
        if (std::abs(joint) > inst.flowgates[f].capacity + 10.0 * cfg.residual_tol + 1e-6)
            out.physical_feasible = false;
    }
    out.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return {out, trace};
}

/// Single-process engine over local subproblem solves.
inline std::pair<AdmmOutcome, AdmmTrace> run_admm(const M2MInstance& inst, const FlowContext& ctx,
                                                  const AdmmConfig& cfg = {}) {
    return run_admm_with(inst, local_admm_endpoints(inst, ctx, cfg), cfg);
}

/// One full iteration over local solves.
inline AdmmState admm_step(const M2MInstance& inst, const FlowContext& ctx, const AdmmState& prev,
                           const AdmmConfig& cfg) {
    return admm_step_with(inst, local_admm_endpoints(inst, ctx, cfg), prev, cfg);
}

}  // namespace m2m
