#pragma once

// Experiment harness: the bundled desk-scale instance suite (synthetic grids
// plus hand-crafted geometries that provoke the known coordination failure
// modes), per-instance regime runs, manifests, and comparison tables.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "m2m/admm.hpp"
#include "m2m/instance_io.hpp"
#include "m2m/instancegen.hpp"
#include "m2m/iterative.hpp"
#include "m2m/sced.hpp"

namespace m2m {

/// Relative optimality gap of a coordination outcome against the centralized
/// bound: (coordination cost - central cost) / central cost.
inline double optimality_gap(double m2m_cost, double central_cost) {
    return (m2m_cost - central_cost) / central_cost;
}

// ---------------------------------------------------------------------------
// Crafted geometries.  All live on the four-bus ring b1-b2-b3-b4-b1 with unit
// reactances and slack b1; shift factors on l1 (b1->b2) are -0.75 / -0.5 /
// -0.25 for injections at b2 / b3 / b4.  Market 1 owns {b1,b2}, market 2 owns
// {b3,b4}, so market 1 monitors l1.
// ---------------------------------------------------------------------------

namespace craft {

inline M2MInstance ring_base(const std::string& name, double fg_capacity) {
    M2MInstance inst;
    inst.name = name;
    Network& n = inst.network;
    n.buses = {{"b1", 0, 1}, {"b2", 0, 1}, {"b3", 0, 2}, {"b4", 0, 2}};
    n.lines = {{"l1", "b1", "b2", 1.0, fg_capacity, fg_capacity / 2, fg_capacity / 2},
               {"l2", "b2", "b3", 1.0, kInfinity, kInfinity, kInfinity},
               {"l3", "b3", "b4", 1.0, kInfinity, kInfinity, kInfinity},
               {"l4", "b4", "b1", 1.0, kInfinity, kInfinity, kInfinity}};
    n.slack_bus = "b1";
    inst.flowgates = {{"l1", std::nullopt, fg_capacity, fg_capacity / 2, fg_capacity / 2}};
    return inst;
}

/// Oscillation geometry.  Market 1's own flow ranges over [0,75] MW at a
/// 53.3 $/MW relief margin; market 2's over [0,60] at 1.6 $/MW with its
/// natural point at the top.  The 20% adder over-relieves, the monitoring
/// side unbinds, the zero price makes the granted relief free to abandon,
/// and the pair cycles with period two.
inline M2MInstance swing() {
    M2MInstance inst = ring_base("craft-swing", 120.0);
    inst.network.buses[1].load = 100.0;
    inst.network.buses[2].load = 240.0;
    inst.network.generators = {{"gA", "b1", 20.0, 0, 250},
                               {"gB", "b2", 60.0, 0, 250},
                               {"gC", "b3", 10.4, 0, 300},
                               {"gD", "b4", 10.0, 0, 300}};
    return inst;
}

/// Non-stopping geometry.  Market 2's flowgate contribution is already at its
/// floor, so every relief request lands on slack; market 1 stays congested at
/// a 53.3 $/MWh price against a permanent zero from the other side.
inline M2MInstance non_stopping() {
    M2MInstance inst = ring_base("craft-nonstop", 60.0);
    inst.network.buses[1].load = 100.0;
    inst.network.buses[2].load = 100.0;
    inst.network.generators = {{"gA", "b1", 20.0, 0, 250},
                               {"gB", "b2", 60.0, 0, 250},
                               {"gC", "b3", 10.0, 0, 300},
                               {"gD", "b4", 10.4, 0, 300}};
    return inst;
}

/// Opposite-flow geometry mirroring the 100 MW flowgate with a -250 MW
/// monitoring-side flow against +100 MW from the other market.  Market 1's
/// flow ranges over [-250,-50]; market 2's over [0,+100] with +100 natural.
/// Reducing market 2's flow (what a positive relief request demands) makes
/// the joint flow worse; increasing it is what actually helps.
inline M2MInstance opposite_flow() {
    M2MInstance inst = ring_base("craft-of", 100.0);
    inst.variant = Variant::opposite_flow;
    inst.network.buses[0].load = 400.0;
    inst.network.buses[2].load = 400.0;
    inst.network.generators = {{"gA", "b1", 50.0, 0, 1000.0 / 3.0},
                               {"gB", "b2", 20.0, 0, 1000.0 / 3.0},
                               {"gC", "b3", 10.5, 0, 400},
                               {"gD", "b4", 10.0, 0, 400}};
    return inst;
}

/// As `opposite_flow` but market 1 carries a must-run unit whose minimum
/// output keeps its flow magnitude at 120 MW or more, so the initial 50 MW
/// capacity share is outright infeasible and no curtailment can price it.
inline M2MInstance opposite_flow_infeasible() {
    M2MInstance inst = opposite_flow();
    inst.name = "craft-of-inf";
    inst.network.generators[1].pmin = 160.0;  // gB must-run forces |f1| >= 120
    return inst;
}

/// Relief settles strictly inside market 2's cheap range (12 $/MW against
/// market 1's 20), every flow copy stays interior, and the two subproblem
/// flowgate prices meet at the same value.
inline M2MInstance shared_margin() {
    M2MInstance inst = ring_base("craft-shared", 120.0);
    inst.network.buses[1].load = 100.0;
    inst.network.buses[2].load = 240.0;
    inst.network.generators = {{"gA", "b1", 20.0, 0, 250},
                               {"gB", "b2", 35.0, 0, 250},
                               {"gC", "b3", 13.0, 0, 300},
                               {"gD", "b4", 10.0, 0, 300}};
    return inst;
}

}  // namespace craft

// ---------------------------------------------------------------------------
// Desk suite
// ---------------------------------------------------------------------------

struct SuiteOptions {
    std::vector<int> sizes{24, 36, 48, 64, 80, 96};
    double interchange_ratio = 0.03;
    bool include_crafted = true;
};

/// Synthetic suite: one standard instance per size with its lower-limit and
/// opposite-flow variants where constructible, plus the crafted failure
/// geometries.  Deterministic for a fixed seed.
inline std::vector<M2MInstance> build_desk_suite(uint64_t seed, const SuiteOptions& opt = {}) {
    std::vector<M2MInstance> suite;
    for (size_t i = 0; i < opt.sizes.size(); ++i) {
        const uint64_t s = seed + 1000003ull * (i + 1);
        const int buses = opt.sizes[i];
        Network raw = synth_network(buses, s);
        PipelineOptions popt;
        popt.interchange_ratio = opt.interchange_ratio;
        M2MInstance std_inst;
        try {
            std_inst = build_standard_instance(raw, s, popt, "synth" + std::to_string(buses));
        } catch (const Error&) {
            // Rare: a partition without usable candidates.  Reseed once.
            Network raw2 = synth_network(buses, s + 17);
            std_inst = build_standard_instance(raw2, s + 17, popt, "synth" + std::to_string(buses));
        }
        FlowContext ctx(std_inst);
        auto central = solve_centralized(std_inst, ctx);
        suite.push_back(std_inst);
        // The variants shift the centralized dispatch, so their per-market
        // capacity splits are refreshed against their own market flows.
        auto realloc_and_add = [&](std::optional<M2MInstance> v) {
            if (!v) return;
            try {
                FlowContext vctx(*v);
                auto vc = solve_centralized(*v, vctx);
                if (vc.status != qp::SolveStatus::optimal) return;
                allocate_capacities(*v, vctx, vc.dispatch);
                validate_instance(*v);
                suite.push_back(*v);
            } catch (const Error&) {
            }
        };
        if (central.status == qp::SolveStatus::optimal) {
            realloc_and_add(make_variant(std_inst, ctx, Variant::lower_limit, central.dispatch));
            realloc_and_add(
                make_variant(std_inst, ctx, Variant::opposite_flow, central.dispatch));
        }
    }
    if (opt.include_crafted) {
        suite.push_back(craft::swing());
        suite.push_back(craft::non_stopping());
        suite.push_back(craft::opposite_flow());
        suite.push_back(craft::opposite_flow_infeasible());
        suite.push_back(craft::shared_margin());
    }
    return suite;
}

// ---------------------------------------------------------------------------
// Regime runs and manifests
// ---------------------------------------------------------------------------

struct RunRecord {
    std::string instance_name;
    std::string instance_hash;
    std::string variant;
    double interchange = 0.0;
    std::string flowgate;  // "monitored" or "monitored (outage)"
    std::string regime;    // central | iterative | admm
    double z0 = kInfinity;
    double z1 = kInfinity;
    double z2 = kInfinity;
    double gap = kInfinity;
    std::string status;
    bool curtailed = false;
    std::string shadow_prices;  // converged | didn't converge | -
    int iterations = 0;
    double wall_seconds = 0.0;
};

inline ordered_json run_record_to_json(const RunRecord& r) {
    ordered_json j;
    j["instance"] = r.instance_name;
    j["hash"] = r.instance_hash;
    j["variant"] = r.variant;
    j["interchange_mw"] = r.interchange;
    j["flowgate"] = r.flowgate;
    j["regime"] = r.regime;
    j["z0"] = std::isfinite(r.z0) ? ordered_json(r.z0) : ordered_json(nullptr);
    j["z1"] = std::isfinite(r.z1) ? ordered_json(r.z1) : ordered_json(nullptr);
    j["z2"] = std::isfinite(r.z2) ? ordered_json(r.z2) : ordered_json(nullptr);
    j["gap"] = std::isfinite(r.gap) ? ordered_json(r.gap) : ordered_json(nullptr);
    j["status"] = r.status;
    j["curtailed"] = r.curtailed;
    j["shadow_prices"] = r.shadow_prices;
    j["iterations"] = r.iterations;
    j["wall_seconds"] = r.wall_seconds;
    return j;
}

inline std::string flowgate_label(const M2MInstance& inst) {
    if (inst.flowgates.empty()) return "-";
    const auto& fg = inst.flowgates.front();
    return fg.outage ? fg.monitored + " (" + *fg.outage + ")" : fg.monitored;
}

struct InstanceResults {
    RunRecord iterative;
    RunRecord admm;
    double z0 = kInfinity, z1 = kInfinity;
    IterativeOutcome iter_outcome;
    IterativeTrace iter_trace;
    AdmmOutcome admm_outcome;
    AdmmTrace admm_trace;
};

/// All regimes over one instance.
inline InstanceResults run_all_regimes(const M2MInstance& inst, const IterativeConfig& icfg = {},
                                       const AdmmConfig& acfg = {}) {
    InstanceResults out;
    FlowContext ctx(inst);
    const std::string hash = instance_hash(inst);

    auto zc = solve_combined(inst, ctx);
    if (zc.status == qp::SolveStatus::optimal) out.z0 = zc.dispatch.objective;
    auto z1 = solve_centralized(inst, ctx);
    if (z1.status == qp::SolveStatus::optimal) out.z1 = z1.dispatch.objective;

    RunRecord base;
    base.instance_name = inst.name;
    base.instance_hash = hash;
    base.variant = to_string(inst.variant);
    base.interchange = inst.interchange;
    base.flowgate = flowgate_label(inst);
    base.z0 = out.z0;
    base.z1 = out.z1;

    {
        auto t0 = std::chrono::steady_clock::now();
        auto [o, trace] = run_iterative(inst, ctx, icfg);
        out.iter_outcome = o;
        out.iter_trace = std::move(trace);
        RunRecord r = base;
        r.regime = "iterative";
        r.status = to_string(o.status);
        r.iterations = o.iterations;
        r.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (o.status == IterativeStatus::infeasible) {
            r.z2 = kInfinity;
            r.gap = kInfinity;
            r.shadow_prices = "-";
        } else {
            // The kept outcome is the last physically feasible iterate.
            r.z2 = o.has_feasible_iterate ? o.feasible_cost : kInfinity;
            r.gap = std::isfinite(r.z2) && std::isfinite(out.z1)
                        ? optimality_gap(r.z2, out.z1)
                        : kInfinity;
            r.shadow_prices = o.shadow_prices_converged ? "converged" : "didn't converge";
            for (const auto& row : out.iter_trace.rows) r.curtailed |= row.curtailment > 1e-6;
        }
        out.iterative = r;
    }
    {
        auto [o, trace] = run_admm(inst, ctx, acfg);
        out.admm_outcome = o;
        out.admm_trace = std::move(trace);
        RunRecord r = base;
        r.regime = "admm";
        r.status = to_string(o.status);
        r.iterations = o.iterations;
        r.wall_seconds = o.wall_seconds;
        r.z2 = o.final_cost;
        r.gap = std::isfinite(out.z1) ? optimality_gap(o.final_cost, out.z1) : kInfinity;
        r.curtailed = o.curtailed;
        r.shadow_prices = "-";
        out.admm = r;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Failure-mode coverage over a suite
// ---------------------------------------------------------------------------

struct FailureModeCoverage {
    std::optional<std::string> swing_instance;
    std::optional<std::string> non_stopping_instance;
    std::optional<std::string> opposite_flow_instance;  // infeasible or under-mitigated

    bool complete() const {
        return swing_instance && non_stopping_instance && opposite_flow_instance;
    }
    std::string missing() const {
        std::string m;
        if (!swing_instance) m += "power-swing ";
        if (!non_stopping_instance) m += "non-stopping ";
        if (!opposite_flow_instance) m += "opposite-flow ";
        return m.empty() ? m : m.substr(0, m.size() - 1);
    }
};

inline void classify_failure_modes(const M2MInstance& inst, const InstanceResults& res,
                                   const IterativeConfig& icfg, FailureModeCoverage& cov) {
    const auto& o = res.iter_outcome;
    if (!cov.swing_instance && o.status == IterativeStatus::swing_detected)
        cov.swing_instance = inst.name;
    if (!cov.non_stopping_instance && o.status == IterativeStatus::max_iterations &&
        detect_non_stopping(res.iter_trace, icfg.price_tol, icfg.flow_tol))
        cov.non_stopping_instance = inst.name;
    const bool of_geometry = inst.variant == Variant::opposite_flow;
    const bool failed_physically =
        o.status == IterativeStatus::infeasible ||
        (o.status != IterativeStatus::converged && std::isfinite(res.z1) &&
         std::isfinite(res.iterative.z2) && res.iterative.gap > 1e-3) ||
        (o.status != IterativeStatus::converged && !std::isfinite(res.iterative.z2));
    if (!cov.opposite_flow_instance && of_geometry && failed_physically)
        cov.opposite_flow_instance = inst.name;
}

// ---------------------------------------------------------------------------
// Table and artifact emission
// ---------------------------------------------------------------------------

inline std::string format_money(double v) {
    if (!std::isfinite(v)) return "Inf";
    char buf[64];
    snprintf(buf, sizeof(buf), "%.2f", v);
    return buf;
}

inline std::string format_gap(double g) {
    if (!std::isfinite(g)) return "Inf";
    char buf[64];
    snprintf(buf, sizeof(buf), "%.2f%%", 100.0 * g);
    return buf;
}

inline std::string benchmark_table_markdown(const std::vector<InstanceResults>& all) {
    std::string md;
    md += "| Instance | Variant | Interchange | Flowgate | M2M Cost ($) | Central Cost ($) | Gap "
          "| Curtailment? | Shadow Prices | ADMM Gap | ADMM Iterations | ADMM Time (s) |\n";
    md += "|---|---|---|---|---|---|---|---|---|---|---|---|\n";
    for (const auto& r : all) {
        char buf[64];
        snprintf(buf, sizeof(buf), "%.3f", r.iterative.interchange);
        md += "| " + r.iterative.instance_name + " | " + r.iterative.variant + " | " + buf +
              " | " + r.iterative.flowgate + " | " + format_money(r.iterative.z2) + " | " +
              format_money(r.z1) + " | " + format_gap(r.iterative.gap) + " | " +
              (r.iterative.curtailed ? "Yes" : "No") + " | " + r.iterative.shadow_prices + " | " +
              format_gap(r.admm.gap) + " | " + std::to_string(r.admm.iterations) + " | " +
              [&] {
                  char b[32];
                  snprintf(b, sizeof(b), "%.2f", r.admm.wall_seconds);
                  return std::string(b);
              }() +
              " |\n";
    }
    return md;
}

inline std::string benchmark_table_csv(const std::vector<InstanceResults>& all) {
    std::string csv =
        "instance,variant,interchange,flowgate,m2m_cost,central_cost,gap,curtailed,"
        "shadow_prices,admm_gap,admm_iterations,admm_seconds\n";
    char buf[512];
    for (const auto& r : all) {
        snprintf(buf, sizeof(buf), "%s,%s,%.6g,%s,%.6f,%.6f,%.8g,%s,%s,%.8g,%d,%.3f\n",
                 r.iterative.instance_name.c_str(), r.iterative.variant.c_str(),
                 r.iterative.interchange, r.iterative.flowgate.c_str(),
                 std::isfinite(r.iterative.z2) ? r.iterative.z2 : -1.0,
                 std::isfinite(r.z1) ? r.z1 : -1.0,
                 std::isfinite(r.iterative.gap) ? r.iterative.gap : -1.0,
                 r.iterative.curtailed ? "yes" : "no", r.iterative.shadow_prices.c_str(),
                 std::isfinite(r.admm.gap) ? r.admm.gap : -1.0, r.admm.iterations,
                 r.admm.wall_seconds);
        csv += buf;
    }
    return csv;
}

/// Persist one benchmark run: manifest.json, table.md, table.csv, traces/.
inline std::filesystem::path persist_run(const std::vector<InstanceResults>& all,
                                         const std::filesystem::path& out_root,
                                         const std::string& suite_tag) {
    namespace fs = std::filesystem;
    const auto now = std::chrono::system_clock::now();
    const auto secs = std::chrono::duration_cast<std::chrono::seconds>(now.time_since_epoch());
    const fs::path dir = out_root / (std::to_string(secs.count()) + "-" + suite_tag);
    fs::create_directories(dir / "traces");

    ordered_json manifest = ordered_json::array();
    for (const auto& r : all) {
        manifest.push_back(run_record_to_json(r.iterative));
        manifest.push_back(run_record_to_json(r.admm));
    }
    std::ofstream(dir / "manifest.json") << manifest.dump(2) << "\n";
    std::ofstream(dir / "table.md") << benchmark_table_markdown(all);
    std::ofstream(dir / "table.csv") << benchmark_table_csv(all);
    for (const auto& r : all) {
        std::ofstream(dir / "traces" / (r.iterative.instance_name + "-iterative.csv"))
            << r.iter_trace.to_csv();
        std::ofstream(dir / "traces" / (r.admm.instance_name + "-admm.csv"))
            << r.admm_trace.to_csv();
    }
    return dir;
}

}  // namespace m2m
