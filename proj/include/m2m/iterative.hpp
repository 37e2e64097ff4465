#pragma once

// The iterative market-to-market protocol: alternating per-market dispatches
// exchanging flowgate shadow prices and relief requests, with detectors for
// the oscillation and non-stopping modes the protocol is known for.
//
// Two monitoring-side treatments are available.  `soft_allocation` keeps the
// monitoring market against its own capacity share with the excess variable
// priced at the other market's shadow price.  `hard_headroom` (the default)
// enforces the joint flowgate limit with the other market's last reported
// flow frozen, which is what lets over-granted relief unbind the constraint
// and re-bind it later; the soft form provably cannot oscillate because each
// side's price is capped by the price it was sent.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "m2m/instance.hpp"
#include "m2m/sced.hpp"

namespace m2m {

enum class ReliefFormula { eq3, eq8 };

inline const char* to_string(ReliefFormula f) {
    return f == ReliefFormula::eq3 ? "eq3" : "eq8";
}

/// Raw relief request: joint flow excess over the capacity.  May be negative
/// when the flows oppose each other; that defect motivates the second form.
inline double relief_eq3(double f1, double f2, double capacity, double adder) {
    return (f1 + f2) - capacity + adder;
}

/// Magnitude form: distance of the absolute joint flow from the capacity.
/// Nonnegative for any finite inputs and nonnegative adder.
inline double relief_eq8(double f1, double f2, double capacity, double adder) {
    return std::abs(std::abs(f1 + f2) - capacity) + adder;
}

/// Relief acceleration: when the monitoring market is binding and the other
/// market's price is cheaper, up to 20% of the flow limit is added.  The cap
/// is taken in full; `fraction` must lie in [0, 0.2].
inline double compute_adder(bool mrto_binding, double lambda1, double lambda2, double capacity,
                            double fraction = 0.2) {
    if (!(fraction >= 0.0 && fraction <= 0.2))
        throw InvalidArgument("adder fraction must lie in [0, 0.2]");
    if (mrto_binding && lambda2 < lambda1) return fraction * capacity;
    return 0.0;
}

struct ReliefRequest {
    std::vector<double> relief;      // MW per flowgate
    std::vector<double> adder_used;  // MW per flowgate
    ReliefFormula formula = ReliefFormula::eq8;
};

enum class MrtoFlowgateMode { hard_headroom, soft_allocation };

struct IterativeConfig {
    int max_iter = 10;
    double price_tol = 1e-3;  // $/MWh
    double flow_tol = 1e-2;   // MW
    ReliefFormula relief_formula = ReliefFormula::eq8;
    MrtoFlowgateMode mrto_mode = MrtoFlowgateMode::hard_headroom;
    double adder_fraction = 0.2;
    qp::SolverOptions solver;
};

struct IterTraceRow {
    int k = 0;
    double lambda1 = 0, lambda2 = 0;
    double f1 = 0, f2 = 0;
    double relief = 0;
    double limit_mrto = 0, limit_nmrto = 0;
    double cost1 = 0, cost2 = 0;
    double curtailment = 0;
    bool physical_feasible = true;
};

struct IterativeTrace {
    std::vector<IterTraceRow> rows;

    std::string to_csv() const {
        std::string out =
            "k,lambda1,lambda2,f1,f2,relief,limit_mrto,limit_nmrto,cost1,cost2,curtailment\n";
        char buf[320];
        for (const auto& r : rows) {
            snprintf(buf, sizeof(buf),
                     "%d,%.12g,%.12g,%.12g,%.12g,%.12g,%.12g,%.12g,%.12g,%.12g,%.12g\n", r.k,
                     r.lambda1, r.lambda2, r.f1, r.f2, r.relief, r.limit_mrto, r.limit_nmrto,
                     r.cost1, r.cost2, r.curtailment);
            out += buf;
        }
        return out;
    }
};

enum class IterativeStatus { converged, max_iterations, swing_detected, infeasible };

inline const char* to_string(IterativeStatus s) {
    switch (s) {
        case IterativeStatus::converged: return "converged";
        case IterativeStatus::max_iterations: return "max_iterations";
        case IterativeStatus::swing_detected: return "swing_detected";
        case IterativeStatus::infeasible: return "infeasible";
    }
    return "?";
}

struct IterativeOutcome {
    IterativeStatus status = IterativeStatus::infeasible;
    int iterations = 0;
    double cost1 = 0, cost2 = 0;       // final iterate
    bool shadow_prices_converged = false;
    bool physical_feasible = false;    // final iterate joint flow within limits
    bool has_feasible_iterate = false;
    double feasible_cost = kInfinity;  // combined cost of the last physically
                                       // feasible iterate (the kept outcome)
};

// --- per-step building blocks (shared with the transport agents) -----------

struct RtoStepResult {
    std::vector<double> lambda;  // per flowgate
    std::vector<double> flow;    // per flowgate, this market's contribution
    std::vector<bool> binding;   // flowgate row active at its bound
    double cost = 0.0;           // generation + curtailment penalty
    double curtailment = 0.0;    // MW
};

namespace detail {

inline std::optional<RtoStepResult> run_rto_model(const M2MInstance& inst, const FlowContext& ctx,
                                                  const model::BuiltModel& built, int rto,
                                                  const qp::SolverOptions& sopt,
                                                  double flow_tol) {
    auto sol = solve_model(inst, ctx, built, sopt);
    if (sol.status != qp::SolveStatus::optimal) return std::nullopt;
    RtoStepResult r;
    const int slot = rto - 1;
    for (size_t f = 0; f < inst.flowgates.size(); ++f) {
        r.lambda.push_back(sol.prices.lambda[f][slot]);
        r.flow.push_back(sol.dispatch.fg_flows(f, slot));
        bool binding = false;
        const auto& h = built.fg[f];
        auto near_bound = [&](int row) {
            if (row < 0) return false;
            const double act = sol.raw.row_activity(built.prog, row);
            const auto& rr = built.prog.row(row);
            return (std::isfinite(rr.ub) && std::abs(act - rr.ub) <= flow_tol) ||
                   (std::isfinite(rr.lb) && std::abs(act - rr.lb) <= flow_tol);
        };
        if (h.s_var >= 0) {
            // Soft form: consider it binding when the excess is engaged or the
            // shared rows are tight.
            binding = sol.raw.x(h.s_var) > flow_tol || near_bound(h.row_a) || near_bound(h.row_b);
        } else {
            binding = near_bound(h.row_a);
        }
        r.binding.push_back(binding);
    }
    r.cost = sol.dispatch.objective;
    for (const auto& [bus, c] : sol.dispatch.curtail) r.curtailment += c;
    return r;
}

}  // namespace detail

/// Standalone dispatch of one market against its own flowgate shares.
inline std::optional<RtoStepResult> solve_rto_standalone(const M2MInstance& inst,
                                                         const FlowContext& ctx, int rto,
                                                         const IterativeConfig& cfg = {}) {
    auto built = build_rto_standalone(inst, ctx, rto);
    return detail::run_rto_model(inst, ctx, built, rto, cfg.solver, cfg.flow_tol);
}

/// Monitoring-market iterate given the other market's prices and last flows.
inline std::optional<RtoStepResult> solve_mrto_step(const M2MInstance& inst,
                                                    const FlowContext& ctx,
                                                    const IterativeConfig& cfg,
                                                    const std::vector<double>& lambda2,
                                                    const std::vector<double>& f2_latest) {
    if (cfg.mrto_mode == MrtoFlowgateMode::soft_allocation) {
        auto built = build_mrto(inst, ctx, lambda2);
        return detail::run_rto_model(inst, ctx, built, 1, cfg.solver, cfg.flow_tol);
    }
    std::vector<model::FlowgateTerm> terms;
    for (size_t f = 0; f < inst.flowgates.size(); ++f) {
        model::FlowgateTerm t;
        t.headroom = true;
        t.other_flow = f2_latest.at(f);
        terms.push_back(t);
    }
    auto built = build_rto_model(inst, ctx, 1, terms, false);
    return detail::run_rto_model(inst, ctx, built, 1, cfg.solver, cfg.flow_tol);
}

/// Non-monitoring-market iterate given the monitoring prices and the relief.
inline std::optional<RtoStepResult> solve_nmrto_step(const M2MInstance& inst,
                                                     const FlowContext& ctx,
                                                     const IterativeConfig& cfg,
                                                     const std::vector<double>& lambda1,
                                                     const std::vector<double>& relief) {
    auto built = build_nmrto(inst, ctx, lambda1, relief);
    return detail::run_rto_model(inst, ctx, built, 2, cfg.solver, cfg.flow_tol);
}

/// Relief computation from the monitoring side's current view.
inline ReliefRequest compute_relief(const M2MInstance& inst, const IterativeConfig& cfg,
                                    const RtoStepResult& mrto,
                                    const std::vector<double>& lambda2,
                                    const std::vector<double>& f2_latest) {
    ReliefRequest rq;
    rq.formula = cfg.relief_formula;
    for (size_t f = 0; f < inst.flowgates.size(); ++f) {
        const double cap = inst.flowgates[f].capacity;
        const double adder = compute_adder(mrto.binding[f], mrto.lambda[f], lambda2[f], cap,
                                           cfg.adder_fraction);
        const double r = cfg.relief_formula == ReliefFormula::eq3
                             ? relief_eq3(mrto.flow[f], f2_latest[f], cap, adder)
                             : relief_eq8(mrto.flow[f], f2_latest[f], cap, adder);
        rq.relief.push_back(r);
        rq.adder_used.push_back(adder);
    }
    return rq;
}

inline bool joint_feasible(const M2MInstance& inst, const std::vector<double>& f1,
                           const std::vector<double>& f2, double flow_tol) {
    for (size_t f = 0; f < inst.flowgates.size(); ++f)
        if (std::abs(f1[f] + f2[f]) > inst.flowgates[f].capacity + flow_tol) return false;
    return true;
}

// --- trace diagnostics ------------------------------------------------------

/// Oscillation detector: a shadow price alternating between zero and a
/// nonzero value over at least two full periods, or a flowgate flow whose
/// consecutive increments alternate sign with magnitude above the tolerance.
inline bool detect_swing(const IterativeTrace& trace, double price_tol = 1e-3,
                         double flow_tol = 1e-2) {
    auto alternates = [&](auto getter) {
        int run = 1;
        for (size_t i = 1; i < trace.rows.size(); ++i) {
            const bool prev_nz = std::abs(getter(trace.rows[i - 1])) > price_tol;
            const bool cur_nz = std::abs(getter(trace.rows[i])) > price_tol;
            if (prev_nz != cur_nz)
                ++run;
            else
                run = 1;
            bool any_nz = cur_nz || prev_nz;
            if (run >= 4 && any_nz) return true;
        }
        return false;
    };
    if (alternates([](const IterTraceRow& r) { return r.lambda1; })) return true;
    if (alternates([](const IterTraceRow& r) { return r.lambda2; })) return true;

    auto oscillates = [&](auto getter) {
        int run = 0;
        double prev_inc = 0.0;
        for (size_t i = 1; i < trace.rows.size(); ++i) {
            const double inc = getter(trace.rows[i]) - getter(trace.rows[i - 1]);
            if (std::abs(inc) > flow_tol && prev_inc != 0.0 && inc * prev_inc < 0.0)
                ++run;
            else if (std::abs(inc) <= flow_tol)
                run = 0;
            prev_inc = std::abs(inc) > flow_tol ? inc : 0.0;
            if (run >= 2) return true;  // three alternating increments: four iterates
        }
        return false;
    };
    if (oscillates([](const IterTraceRow& r) { return r.f1; })) return true;
    if (oscillates([](const IterTraceRow& r) { return r.f2; })) return true;
    if (oscillates([](const IterTraceRow& r) { return r.f1 + r.f2; })) return true;
    return false;
}

/// Non-stopping detector: both prices frozen and unequal with an unchanged
/// relief over the last `window` iterations.
inline bool detect_non_stopping(const IterativeTrace& trace, double price_tol = 1e-3,
                                double flow_tol = 1e-2, int window = 3) {
    if (static_cast<int>(trace.rows.size()) < window) return false;
    const auto& last = trace.rows.back();
    if (std::abs(last.lambda1 - last.lambda2) <= price_tol) return false;
    for (int i = 0; i < window; ++i) {
        const auto& r = trace.rows[trace.rows.size() - 1 - i];
        if (std::abs(r.lambda1 - last.lambda1) > 1e-6) return false;
        if (std::abs(r.lambda2 - last.lambda2) > 1e-6) return false;
        if (std::abs(r.relief - last.relief) > flow_tol) return false;
    }
    return true;
}

// --- the engine -------------------------------------------------------------

/// The protocol loop abstracted over how each market's step is produced, so
/// the in-process engine and the transport coordinator share one control
/// flow.  The monitoring endpoint returns both its step and the relief it
/// computed from the data it was handed.
struct IterativeEndpoints {
    std::function<std::optional<RtoStepResult>()> init_mrto;
    std::function<std::optional<RtoStepResult>()> init_nmrto;
    std::function<std::optional<std::pair<RtoStepResult, ReliefRequest>>(
        const std::vector<double>& lambda2, const std::vector<double>& f2)>
        mrto;
    std::function<std::optional<RtoStepResult>(const std::vector<double>& lambda1,
                                               const std::vector<double>& relief)>
        nmrto;
};

inline std::pair<IterativeOutcome, IterativeTrace> run_iterative_with(
    const M2MInstance& inst, const IterativeEndpoints& ep, const IterativeConfig& cfg) {
    if (inst.flowgates.empty())
        throw InvalidArgument("iterative protocol requires at least one flowgate");
    IterativeOutcome out;
    IterativeTrace trace;

    auto init1 = ep.init_mrto();
    auto init2 = ep.init_nmrto();
    if (!init1 || !init2) {
        out.status = IterativeStatus::infeasible;
        return {out, trace};
    }
    std::vector<double> lambda1 = init1->lambda, lambda2 = init2->lambda;
    std::vector<double> f1 = init1->flow, f2 = init2->flow;
    double cost1 = init1->cost, cost2 = init2->cost;

    auto note_feasible = [&](double c1, double c2, const std::vector<double>& a,
                             const std::vector<double>& b) {
        if (joint_feasible(inst, a, b, cfg.flow_tol)) {
            out.has_feasible_iterate = true;
            out.feasible_cost = c1 + c2;
            return true;
        }
        return false;
    };
    note_feasible(cost1, cost2, f1, f2);

    for (int k = 1; k <= cfg.max_iter; ++k) {
        auto mrto_reply = ep.mrto(lambda2, f2);
        if (!mrto_reply) {
            out.status = IterativeStatus::infeasible;
            out.iterations = k;
            return {out, trace};
        }
        const RtoStepResult& mrto = mrto_reply->first;
        const ReliefRequest& rq = mrto_reply->second;
        auto nmrto = ep.nmrto(mrto.lambda, rq.relief);
        if (!nmrto) {
            out.status = IterativeStatus::infeasible;
            out.iterations = k;
            return {out, trace};
        }
        lambda1 = mrto.lambda;
        f1 = mrto.flow;
        cost1 = mrto.cost;
        const std::vector<double> f2_frozen = f2;  // what the MRTO solved against
        lambda2 = nmrto->lambda;
        f2 = nmrto->flow;
        cost2 = nmrto->cost;

        IterTraceRow row;
        row.k = k;
        row.lambda1 = lambda1[0];
        row.lambda2 = lambda2[0];
        row.f1 = f1[0];
        row.f2 = f2[0];
        row.relief = rq.relief[0];
        row.limit_mrto = cfg.mrto_mode == MrtoFlowgateMode::hard_headroom
                             ? inst.flowgates[0].capacity - std::abs(f2_frozen[0])
                             : inst.flowgates[0].alloc1;
        row.limit_nmrto = inst.flowgates[0].alloc2 - rq.relief[0];
        row.cost1 = cost1;
        row.cost2 = cost2;
        row.curtailment = mrto.curtailment + nmrto->curtailment;
        row.physical_feasible = joint_feasible(inst, f1, f2, cfg.flow_tol);
        trace.rows.push_back(row);

        note_feasible(cost1, cost2, f1, f2);

        bool prices_match = true;
        for (size_t f = 0; f < inst.flowgates.size(); ++f)
            prices_match &= std::abs(lambda1[f] - lambda2[f]) <= cfg.price_tol;
        if (prices_match && row.physical_feasible) {
            out.status = IterativeStatus::converged;
            out.iterations = k;
            out.shadow_prices_converged = true;
            out.physical_feasible = true;
            out.cost1 = cost1;
            out.cost2 = cost2;
            return {out, trace};
        }
    }

    out.iterations = cfg.max_iter;
    out.cost1 = cost1;
    out.cost2 = cost2;
    out.physical_feasible = joint_feasible(inst, f1, f2, cfg.flow_tol);
    bool prices_match = true;
    for (size_t f = 0; f < inst.flowgates.size(); ++f)
        prices_match &= std::abs(lambda1[f] - lambda2[f]) <= cfg.price_tol;
    out.shadow_prices_converged = prices_match;
    out.status = detect_swing(trace, cfg.price_tol, cfg.flow_tol)
                     ? IterativeStatus::swing_detected
                     : IterativeStatus::max_iterations;
    return {out, trace};
}

/// Single-process engine: the loop over local solves.
inline std::pair<IterativeOutcome, IterativeTrace> run_iterative(const M2MInstance& inst,
                                                                 const FlowContext& ctx,
                                                                 const IterativeConfig& cfg = {}) {
    IterativeEndpoints ep;
    ep.init_mrto = [&] { return solve_rto_standalone(inst, ctx, 1, cfg); };
    ep.init_nmrto = [&] { return solve_rto_standalone(inst, ctx, 2, cfg); };
    ep.mrto = [&](const std::vector<double>& lambda2, const std::vector<double>& f2)
        -> std::optional<std::pair<RtoStepResult, ReliefRequest>> {
        auto step = solve_mrto_step(inst, ctx, cfg, lambda2, f2);
        if (!step) return std::nullopt;
        ReliefRequest rq = compute_relief(inst, cfg, *step, lambda2, f2);
        return std::make_pair(*step, rq);
    };
    ep.nmrto = [&](const std::vector<double>& lambda1, const std::vector<double>& relief) {
        return solve_nmrto_step(inst, ctx, cfg, lambda1, relief);
    };
    return run_iterative_with(inst, ep, cfg);
}

}  // namespace m2m
