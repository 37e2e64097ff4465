#pragma once

// Security-constrained economic dispatch models over an M2MInstance:
// the centralized two-market model, the single combined market, the
// per-market subproblems of the iterative coordination protocol, and the
// penalized subproblems used by the consensus decomposition.
//
// Flow expressions are substituted directly into the limit rows through the
// shift factors; the per-line market flows reported in a Dispatch always
// reproduce evaluate_rto_flow on the same shift factor matrix.  Load
// curtailment slacks live in the balance rows of every model so that lack of
// generation is priced, never fatal.

#include <Eigen/Dense>

#include <array>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "m2m/instance.hpp"
#include "m2m/network.hpp"
#include "m2m/qpsolver.hpp"

namespace m2m {

/// Immutable per-instance context shared by all model builds.
struct FlowContext {
    NetworkIndex idx;
    ShiftFactorMatrix ptdf;
    std::vector<Eigen::VectorXd> fg_cols;  // per flowgate, contingency-adjusted
    double big_limit = 0.0;

    explicit FlowContext(const M2MInstance& inst) : idx(inst.network) {
        validate_instance(inst);
        ptdf = compute_ptdf(inst.network, inst.network.slack_bus);
        big_limit = sufficiently_large_limit(inst.network);
        for (const auto& fg : inst.flowgates) {
            if (fg.outage) {
                auto lodf = compute_lodf(inst.network, idx, ptdf, *fg.outage);
                fg_cols.push_back(contingency_column(idx, ptdf, lodf, fg.monitored, *fg.outage));
            } else {
                fg_cols.push_back(ptdf.delta.col(idx.line_at(fg.monitored)));
            }
        }
    }
};

struct Dispatch {
    std::unordered_map<std::string, double> p;        // MW per generator
    std::unordered_map<std::string, double> curtail;  // MW per bus
    Eigen::MatrixXd flows;     // n_lines x 2, per-market base-case flows
    Eigen::MatrixXd fg_flows;  // n_flowgates x 2, contingency-adjusted
    double objective = 0.0;    // generation cost + curtailment penalty
    std::array<double, 2> cost_by_rto{0.0, 0.0};
    bool curtailed = false;
};

enum class BindingSide { none, upper, lower };

struct ShadowPriceReport {
    // Per flowgate, per market: flowgate constraint dual and its binding side.
    std::vector<std::array<double, 2>> lambda;
    std::vector<std::array<BindingSide, 2>> side;

    void resize(size_t nfg) {
        lambda.assign(nfg, {0.0, 0.0});
        side.assign(nfg, {BindingSide::none, BindingSide::none});
    }
};

namespace model {

enum class Scope { combined, centralized, rto1, rto2 };

/// Flowgate treatment in a per-market model.
struct FlowgateTerm {
    double own_limit = 0.0;   // symmetric bound on the market's own flow
    double price = 0.0;       // $/MWh charged on the excess variable
    double other_flow = 0.0;  // frozen opposite-market flow (headroom form)
    bool soft = false;        // add excess variable s >= 0 priced at `price`
    bool headroom = false;    // bound own + other_flow by the full capacity
};

struct FgHandles {
    int row_a = -1;  // two-sided row, or the upper-side row in soft form
    int row_b = -1;  // lower-side row in soft form
    int s_var = -1;
    int f_own = -1;  // consensus form only
    int f_oth = -1;
};

struct BuiltModel {
    qp::ConvexProgram prog;
    Scope scope = Scope::centralized;
    int rto = 0;  // 1 or 2 for per-market scopes
    std::vector<int> p_vars;     // aligned with network.generators, -1 if absent
    std::vector<int> curt_vars;  // aligned with network.buses, -1 if absent
    int balance1 = -1, balance2 = -1;
    std::vector<FgHandles> fg;
};

inline bool rto_in_scope(Scope s, int rto) {
    switch (s) {
        case Scope::combined:
        case Scope::centralized: return true;
        case Scope::rto1: return rto == 1;
        case Scope::rto2: return rto == 2;
    }
    return false;
}

/// Shared skeleton: dispatch variables, curtailment slacks, balance rows, and
/// non-flowgate line limit rows.
inline BuiltModel base_model(const M2MInstance& inst, const FlowContext& ctx, Scope scope,
                             bool allocation_line_limits) {
    const Network& net = inst.network;
    BuiltModel m;
    m.scope = scope;
    m.rto = scope == Scope::rto1 ? 1 : scope == Scope::rto2 ? 2 : 0;
    m.p_vars.assign(net.generators.size(), -1);
    m.curt_vars.assign(net.buses.size(), -1);

    for (int g = 0; g < static_cast<int>(net.generators.size()); ++g) {
        const auto& gen = net.generators[g];
        const int rto = net.buses[ctx.idx.bus_at(gen.bus)].rto;
        if (!rto_in_scope(scope, rto)) continue;
        m.p_vars[g] = m.prog.add_variable("p_" + gen.id, gen.pmin, gen.pmax, gen.cost);
    }
    for (int b = 0; b < static_cast<int>(net.buses.size()); ++b) {
        const auto& bus = net.buses[b];
        if (!rto_in_scope(scope, bus.rto) || bus.load <= 0.0) continue;
        m.curt_vars[b] =
            m.prog.add_variable("curtail_" + bus.id, 0.0, bus.load, inst.curtailment_price);
    }

    auto balance_row = [&](int rto, double delta_share) {
        std::vector<qp::LinearTerm> terms;
        double load = 0.0;
        for (int g = 0; g < static_cast<int>(net.generators.size()); ++g) {
            if (m.p_vars[g] < 0) continue;
            if (rto != 0 && net.buses[ctx.idx.bus_at(net.generators[g].bus)].rto != rto) continue;
            terms.push_back({m.p_vars[g], 1.0});
        }
        for (int b = 0; b < static_cast<int>(net.buses.size()); ++b) {
            if (rto != 0 && net.buses[b].rto != rto) continue;
            if (m.curt_vars[b] >= 0) terms.push_back({m.curt_vars[b], 1.0});
            if (rto == 0 || net.buses[b].rto == rto) load += net.buses[b].load;
        }
        const std::string name = rto == 0 ? "balance" : "balance_rto" + std::to_string(rto);
        return m.prog.add_equality(name, load + delta_share, std::move(terms));
    };
    switch (scope) {
        case Scope::combined: m.balance1 = balance_row(0, 0.0); break;
        case Scope::centralized:
            m.balance1 = balance_row(1, inst.interchange);
            m.balance2 = balance_row(2, -inst.interchange);
            break;
        case Scope::rto1: m.balance1 = balance_row(1, inst.interchange); break;
        case Scope::rto2: m.balance2 = balance_row(2, -inst.interchange); break;
    }

    // Non-flowgate limit rows.  A line monitored by a base-case flowgate is
    // governed by the flowgate row instead.
    std::vector<char> fg_replaces_line(net.lines.size(), 0);
    for (const auto& fg : inst.flowgates)
        if (!fg.outage) fg_replaces_line[ctx.idx.line_at(fg.monitored)] = 1;

    for (int l = 0; l < static_cast<int>(net.lines.size()); ++l) {
        if (fg_replaces_line[l]) continue;
        const auto& line = net.lines[l];
        double limit;
        if (allocation_line_limits) {
            limit = m.rto == 1 ? line.alloc1 : line.alloc2;
        } else {
            limit = line.capacity;
        }
        if (is_unlimited(limit) || limit >= 0.999 * ctx.big_limit) continue;
        std::vector<qp::LinearTerm> terms;
        double shift = 0.0;  // load part of the flow expression
        for (int b = 0; b < static_cast<int>(net.buses.size()); ++b) {
            if (!rto_in_scope(scope, net.buses[b].rto)) continue;
            const double d = ctx.ptdf.delta(b, l);
            if (d == 0.0) continue;
            shift += d * net.buses[b].load;
            for (int g : ctx.idx.gens_at_bus[b])
                if (m.p_vars[g] >= 0) terms.push_back({m.p_vars[g], d});
        }
        if (terms.empty()) continue;
        m.prog.add_row("flow_" + line.id, -limit + shift, limit + shift, std::move(terms));
    }
    return m;
}

/// Bound scale built from one market's own data plus the shared flowgate
/// capacities; identical whether the model is built from the full instance
/// or from a market view with the other side's loads and generators removed.
inline double market_scale(const M2MInstance& inst, const FlowContext& ctx, int rto) {
    double s = 1.0;
    for (const auto& fg : inst.flowgates) s += fg.capacity;
    for (const auto& g : inst.network.generators)
        if (inst.network.buses[ctx.idx.bus_at(g.bus)].rto == rto) s += g.pmax;
    for (const auto& b : inst.network.buses)
        if (b.rto == rto) s += b.load;
    return s;
}

/// Flow expression of one market (or both) through a flowgate column.
inline std::vector<qp::LinearTerm> fg_terms(const M2MInstance& inst, const FlowContext& ctx,
                                            const BuiltModel& m, const Eigen::VectorXd& col,
                                            double& load_shift) {
    const Network& net = inst.network;
    std::vector<qp::LinearTerm> terms;
    load_shift = 0.0;
    for (int b = 0; b < static_cast<int>(net.buses.size()); ++b) {
        if (!rto_in_scope(m.scope, net.buses[b].rto)) continue;
        const double d = col(b);
        if (d == 0.0) continue;
        load_shift += d * net.buses[b].load;
        for (int g : ctx.idx.gens_at_bus[b])
            if (m.p_vars[g] >= 0) terms.push_back({m.p_vars[g], d});
    }
    return terms;
}

}  // namespace model

/// Model (combined): one market, one balance row, one flow per line.
inline model::BuiltModel build_combined(const M2MInstance& inst, const FlowContext& ctx) {
    using namespace model;
    BuiltModel m = base_model(inst, ctx, Scope::combined, false);
    for (size_t f = 0; f < inst.flowgates.size(); ++f) {
        const auto& fg = inst.flowgates[f];
        double shift = 0.0;
        auto terms = fg_terms(inst, ctx, m, ctx.fg_cols[f], shift);
        FgHandles h;
        h.row_a = m.prog.add_row("fg_" + fg.monitored, -fg.capacity + shift,
                                 fg.capacity + shift, std::move(terms));
        m.fg.push_back(h);
    }
    return m;
}

/// The centralized two-market model: per-market balances with the scheduled
/// interchange, joint flowgate limits on the combined flow.
inline model::BuiltModel build_centralized(const M2MInstance& inst, const FlowContext& ctx) {
    using namespace model;
    BuiltModel m = base_model(inst, ctx, Scope::centralized, false);
    for (size_t f = 0; f < inst.flowgates.size(); ++f) {
        const auto& fg = inst.flowgates[f];
        double shift = 0.0;
        auto terms = fg_terms(inst, ctx, m, ctx.fg_cols[f], shift);
        FgHandles h;
        h.row_a = m.prog.add_row("fg_" + fg.monitored, -fg.capacity + shift,
                                 fg.capacity + shift, std::move(terms));
        m.fg.push_back(h);
    }
    return m;
}

/// One market's dispatch model with explicit flowgate treatment per flowgate.
/// `allocation_line_limits` selects the non-flowgate bound: full line capacity
/// (iterative protocol models) or the per-market allocation (consensus form).
inline model::BuiltModel build_rto_model(const M2MInstance& inst, const FlowContext& ctx, int rto,
                                         const std::vector<model::FlowgateTerm>& fg_terms_cfg,
                                         bool allocation_line_limits = false) {
    using namespace model;
    if (fg_terms_cfg.size() != inst.flowgates.size())
        throw InvalidArgument("one FlowgateTerm per flowgate required");
    BuiltModel m = base_model(inst, ctx, rto == 1 ? Scope::rto1 : Scope::rto2,
                              allocation_line_limits);
    const double scale = market_scale(inst, ctx, rto);
    for (size_t f = 0; f < inst.flowgates.size(); ++f) {
        const auto& fg = inst.flowgates[f];
        const auto& cfg = fg_terms_cfg[f];
        double shift = 0.0;
        auto terms = fg_terms(inst, ctx, m, ctx.fg_cols[f], shift);
        FgHandles h;
        const std::string nm = "fg_" + fg.monitored;
        if (cfg.headroom) {
            // |own + frozen other| <= capacity, enforced as written.
            h.row_a = m.prog.add_row(nm, -fg.capacity - cfg.other_flow + shift,
                                     fg.capacity - cfg.other_flow + shift, std::move(terms));
        } else if (cfg.soft) {
            // |own| <= own_limit + s, s >= 0 priced at the other market's
            // price.  The cap only bounds the optimal face; it never binds.
            h.s_var = m.prog.add_variable("s_" + fg.monitored, 0.0, 10.0 * scale,
                                          std::max(cfg.price, 0.0));
            auto up = terms;
            up.push_back({h.s_var, -1.0});
            h.row_a = m.prog.add_row(nm + "_up", -kInfinity, cfg.own_limit + shift, std::move(up));
            auto lo = std::move(terms);
            lo.push_back({h.s_var, 1.0});
            h.row_b = m.prog.add_row(nm + "_lo", -cfg.own_limit + shift, kInfinity, std::move(lo));
        } else {
            h.row_a = m.prog.add_row(nm, -cfg.own_limit + shift, cfg.own_limit + shift,
                                     std::move(terms));
        }
        m.fg.push_back(h);
    }
    return m;
}

/// Printed iterative model for the monitoring market: excess variable priced
/// at the other market's shadow price against the market's own capacity share.
inline model::BuiltModel build_mrto(const M2MInstance& inst, const FlowContext& ctx,
                                    const std::vector<double>& lambda_other,
                                    bool relief_applied = false) {
    std::vector<model::FlowgateTerm> cfg;
    for (size_t f = 0; f < inst.flowgates.size(); ++f) {
        model::FlowgateTerm t;
        t.own_limit = inst.flowgates[f].alloc1;
        t.price = lambda_other.at(f);
        t.soft = true;
        cfg.push_back(t);
    }
    (void)relief_applied;  // the monitoring side's limit is not relief-adjusted here
    return build_rto_model(inst, ctx, 1, cfg, false);
}

/// Printed iterative model for the non-monitoring market: its share shrunk by
/// the relief request, excess priced at the monitoring market's shadow price.
inline model::BuiltModel build_nmrto(const M2MInstance& inst, const FlowContext& ctx,
                                     const std::vector<double>& lambda_other,
                                     const std::vector<double>& relief) {
    std::vector<model::FlowgateTerm> cfg;
    for (size_t f = 0; f < inst.flowgates.size(); ++f) {
        model::FlowgateTerm t;
        t.own_limit = inst.flowgates[f].alloc2 - relief.at(f);
        t.price = lambda_other.at(f);
        t.soft = true;
        cfg.push_back(t);
    }
    return build_rto_model(inst, ctx, 2, cfg, false);
}

/// Standalone per-market dispatch: hard flowgate shares, no coordination.
inline model::BuiltModel build_rto_standalone(const M2MInstance& inst, const FlowContext& ctx,
                                              int rto) {
    std::vector<model::FlowgateTerm> cfg;
    for (const auto& fg : inst.flowgates) {
        model::FlowgateTerm t;
        t.own_limit = rto == 1 ? fg.alloc1 : fg.alloc2;
        cfg.push_back(t);
    }
    return build_rto_model(inst, ctx, rto, cfg, false);
}

/// Penalized consensus subproblem for one market: explicit flowgate flow-pair
/// copies, linear multiplier terms, quadratic penalty around the consensus
/// target, joint flowgate limits on the market's own copies, and per-market
/// allocation bounds on non-flowgate lines.
inline model::BuiltModel build_admm_subproblem(const M2MInstance& inst, const FlowContext& ctx,
                                               int rto, const std::vector<std::array<double, 2>>& fbar,
                                               const std::vector<std::array<double, 2>>& lambda,
                                               double rho) {
    using namespace model;
    if (rho < 0.0) throw InvalidArgument("penalty factor must be >= 0");
    if (fbar.size() != inst.flowgates.size() || lambda.size() != inst.flowgates.size())
        throw InvalidArgument("one consensus target and multiplier pair per flowgate required");
    BuiltModel m = base_model(inst, ctx, rto == 1 ? Scope::rto1 : Scope::rto2, true);
    const double sign = rto == 1 ? 1.0 : -1.0;
    const double fb = 20.0 * market_scale(inst, ctx, rto);  // finite box for flow copies
    for (size_t f = 0; f < inst.flowgates.size(); ++f) {
        const auto& fg = inst.flowgates[f];
        FgHandles h;
        // Pair component of this market and its copy of the other market's.
        const int own_comp = rto - 1;
        const int oth_comp = 2 - rto;
        const double cost_own = sign * lambda[f][own_comp] - rho * fbar[f][own_comp];
        const double cost_oth = sign * lambda[f][oth_comp] - rho * fbar[f][oth_comp];
        h.f_own = m.prog.add_variable("f_" + fg.monitored + "_own", -fb, fb, cost_own, rho);
        h.f_oth = m.prog.add_variable("f_" + fg.monitored + "_other", -fb, fb, cost_oth, rho);
        m.prog.add_objective_constant(0.5 * rho * (fbar[f][own_comp] * fbar[f][own_comp] +
                                                   fbar[f][oth_comp] * fbar[f][oth_comp]));
        double shift = 0.0;
        auto terms = fg_terms(inst, ctx, m, ctx.fg_cols[f], shift);
        // Definition row: f_own = own flow expression.
        auto def = terms;
        def.push_back({h.f_own, -1.0});
        m.prog.add_equality("def_f_" + fg.monitored, shift, std::move(def));
        // Joint limit on this market's copies.
        h.row_a = m.prog.add_row("fg_" + fg.monitored, -fg.capacity, fg.capacity,
                                 {{h.f_own, 1.0}, {h.f_oth, 1.0}});
        m.fg.push_back(h);
    }
    return m;
}

/// Generation-plus-curtailment cost, flows, and curtailment accounting.
inline Dispatch extract_dispatch(const M2MInstance& inst, const FlowContext& ctx,
                                 const model::BuiltModel& m, const qp::SolveResult& res) {
    const Network& net = inst.network;
    Dispatch d;
    d.flows = Eigen::MatrixXd::Zero(net.lines.size(), 2);
    d.fg_flows = Eigen::MatrixXd::Zero(inst.flowgates.size(), 2);

    Eigen::MatrixXd inj = Eigen::MatrixXd::Zero(net.buses.size(), 2);
    for (int g = 0; g < static_cast<int>(net.generators.size()); ++g) {
        if (m.p_vars[g] < 0) continue;
        const double pg = res.x(m.p_vars[g]);
        d.p[net.generators[g].id] = pg;
        const int b = ctx.idx.bus_at(net.generators[g].bus);
        const int rto = net.buses[b].rto;
        d.cost_by_rto[rto - 1] += net.generators[g].cost * pg;
        inj(b, rto - 1) += pg;
    }
    for (int b = 0; b < static_cast<int>(net.buses.size()); ++b) {
        const auto& bus = net.buses[b];
        if (!model::rto_in_scope(m.scope, bus.rto)) continue;
        inj(b, bus.rto - 1) -= bus.load;
        if (m.curt_vars[b] >= 0) {
            const double c = res.x(m.curt_vars[b]);
            d.curtail[bus.id] = c;
            d.cost_by_rto[bus.rto - 1] += inst.curtailment_price * c;
            if (c > 1e-6) d.curtailed = true;
        }
    }
    d.objective = d.cost_by_rto[0] + d.cost_by_rto[1];
    d.flows = ctx.ptdf.delta.transpose() * inj;
    for (size_t f = 0; f < inst.flowgates.size(); ++f)
        d.fg_flows.row(f) = (ctx.fg_cols[f].transpose() * inj);
    return d;
}

/// Flowgate duals under the fixed sign convention: the sum of the two
/// one-sided rows' multipliers (soft form) or of the two sides of the single
/// row (hard forms), with the binding side identified from the activity.
inline ShadowPriceReport extract_shadow_prices(const M2MInstance& inst,
                                               const model::BuiltModel& m,
                                               const qp::SolveResult& res) {
    ShadowPriceReport rep;
    rep.resize(inst.flowgates.size());
    const int slot = m.rto == 2 ? 1 : 0;
    for (size_t f = 0; f < inst.flowgates.size(); ++f) {
        const auto& h = m.fg[f];
        double lam = 0.0;
        BindingSide side = BindingSide::none;
        if (h.row_b >= 0) {
            const double up = res.row_dual_up(h.row_a);
            const double lo = res.row_dual_lo(h.row_b);
            lam = up + lo;
            if (up > lo)
                side = BindingSide::upper;
            else if (lo > up)
                side = BindingSide::lower;
        } else if (h.row_a >= 0) {
            const double up = res.row_dual_up(h.row_a);
            const double lo = res.row_dual_lo(h.row_a);
            lam = up + lo;
            if (up > lo)
                side = BindingSide::upper;
            else if (lo > up)
                side = BindingSide::lower;
        }
        if (lam <= 1e-11) side = BindingSide::none;
        rep.lambda[f][slot] = lam;
        rep.side[f][slot] = side;
        if (m.scope == model::Scope::centralized || m.scope == model::Scope::combined) {
            // One joint constraint: the same price applies to both markets.
            rep.lambda[f][1] = rep.lambda[f][0];
            rep.side[f][1] = rep.side[f][0];
        }
    }
    return rep;
}

struct ScedSolution {
    qp::SolveStatus status = qp::SolveStatus::numerical_failure;
    Dispatch dispatch;
    ShadowPriceReport prices;
    qp::SolveResult raw;
};

inline ScedSolution solve_model(const M2MInstance& inst, const FlowContext& ctx,
                                const model::BuiltModel& m,
                                const qp::SolverOptions& opt = {}) {
    ScedSolution out;
    out.raw = qp::solve(m.prog, opt);
    out.status = out.raw.status;
    if (out.status == qp::SolveStatus::optimal) {
        out.dispatch = extract_dispatch(inst, ctx, m, out.raw);
        out.prices = extract_shadow_prices(inst, m, out.raw);
    }
    return out;
}

/// Centralized solve; the objective is the lower bound for any coordination.
inline ScedSolution solve_centralized(const M2MInstance& inst, const FlowContext& ctx) {
    return solve_model(inst, ctx, build_centralized(inst, ctx));
}

/// Single-market relaxation: both rto balances merged, no interchange.
inline ScedSolution solve_combined(const M2MInstance& inst, const FlowContext& ctx) {
    return solve_model(inst, ctx, build_combined(inst, ctx));
}

}  // namespace m2m
