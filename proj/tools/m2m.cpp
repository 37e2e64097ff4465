// Command-line front end: instance generation, the three solve regimes,
// benchmark tables, and the socket-mode agent entry point.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "m2m/bench.hpp"
#include "m2m/matpower.hpp"
#include "m2m/transport.hpp"

namespace fs = std::filesystem;
using namespace m2m;

namespace {

M2MInstance load_or_die(const std::string& path) {
    try {
        M2MInstance inst = load_instance(path);
        validate_instance(inst);
        return inst;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        std::exit(2);
    }
}

IterativeConfig make_iter_config(const std::string& relief_formula, const std::string& mrto_mode,
                                 int max_iter) {
    IterativeConfig cfg;
    cfg.relief_formula = relief_formula == "eq3" ? ReliefFormula::eq3 : ReliefFormula::eq8;
    cfg.mrto_mode = mrto_mode == "soft_allocation" ? MrtoFlowgateMode::soft_allocation
                                                   : MrtoFlowgateMode::hard_headroom;
    cfg.max_iter = max_iter;
    return cfg;
}

void write_file(const fs::path& path, const std::string& content) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    out << content;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Two-market congestion coordination laboratory"};
    app.require_subcommand(1);

    // generate ---------------------------------------------------------------
    auto* gen = app.add_subcommand("generate", "Generate coordination instances");
    uint64_t seed = 1;
    int buses = 48;
    std::string variant = "standard";
    double ratio = 0.03;
    std::string out_path = "instance.json";
    std::string out_dir = "suite";
    bool suite = false;
    gen->add_option("--seed", seed, "Deterministic seed");
    gen->add_option("--buses", buses, "Bus count of the synthetic grid");
    gen->add_option("--variant", variant, "standard | lower_limit | opposite_flow");
    gen->add_option("--interchange-ratio", ratio, "Share of market 1 load transferred");
    gen->add_option("--out", out_path, "Output instance file");
    gen->add_option("--out-dir", out_dir, "Output directory (suite mode)");
    gen->add_flag("--suite", suite, "Emit the full desk suite");

    // solve-central ----------------------------------------------------------
    auto* central = app.add_subcommand("solve-central", "Centralized and combined bounds");
    std::string instance_path;
    central->add_option("--instance", instance_path, "Instance file")->required();

    // solve-iterative ----------------------------------------------------------
    auto* iter = app.add_subcommand("solve-iterative", "Iterative coordination protocol");
    std::string relief_formula = "eq8";
    std::string mrto_mode = "hard_headroom";
    std::string mode = "inproc";
    std::string trace_path;
    int max_iter = 10;
    iter->add_option("--instance", instance_path, "Instance file")->required();
    iter->add_option("--relief-formula", relief_formula, "eq3 | eq8");
    iter->add_option("--mrto-mode", mrto_mode, "hard_headroom | soft_allocation");
    iter->add_option("--max-iter", max_iter, "Iteration cap");
    iter->add_option("--mode", mode, "inproc | socket | engine");
    iter->add_option("--trace", trace_path, "Write the per-iteration CSV here");

    // solve-admm ---------------------------------------------------------------
    auto* admm = app.add_subcommand("solve-admm", "Consensus decomposition");
    double rho = 100.0;
    int admm_max_iter = 2000;
    std::string dual_update = "consensus";
    admm->add_option("--instance", instance_path, "Instance file")->required();
    admm->add_option("--rho", rho, "Penalty factor");
    admm->add_option("--max-iter", admm_max_iter, "Iteration cap");
    admm->add_option("--dual-update", dual_update, "consensus | paper-literal");
    admm->add_option("--mode", mode, "inproc | socket | engine");
    admm->add_option("--trace", trace_path, "Write the per-iteration CSV here");

    // benchmark ----------------------------------------------------------------
    auto* bench = app.add_subcommand("benchmark", "Run every regime over an instance directory");
    std::string bench_dir;
    std::string bench_out = "runs";
    bench->add_option("--dir", bench_dir, "Directory of instance files")->required();
    bench->add_option("--out", bench_out, "Results root directory");
    bench->add_option("--relief-formula", relief_formula, "eq3 | eq8");
    bench->add_option("--rho", rho, "Penalty factor");
    bench->add_option("--dual-update", dual_update, "consensus | paper-literal");

    // trace ---------------------------------------------------------------------
    auto* trace_cmd = app.add_subcommand("trace", "Emit a per-iteration CSV for one regime");
    std::string regime = "iterative";
    std::string trace_out = "trace.csv";
    trace_cmd->add_option("--instance", instance_path, "Instance file")->required();
    trace_cmd->add_option("--regime", regime, "iterative | admm");
    trace_cmd->add_option("--relief-formula", relief_formula, "eq3 | eq8");
    trace_cmd->add_option("--rho", rho, "Penalty factor");
    trace_cmd->add_option("--dual-update", dual_update, "consensus | paper-literal");
    trace_cmd->add_option("--out", trace_out, "Output CSV path");

    // convert-matpower ------------------------------------------------------------
    auto* conv = app.add_subcommand("convert-matpower", "Read a MATPOWER case into a network file");
    std::string case_path;
    conv->add_option("--case", case_path, "MATPOWER .m case file")->required();
    conv->add_option("--out", out_path, "Output network file");

    // agent (socket mode worker) ----------------------------------------------------
    auto* agent = app.add_subcommand("agent", "Market agent process (socket transport)");
    int agent_rto = 1;
    std::string connect_to;
    agent->add_option("--rto", agent_rto, "Market index (1 or 2)")->required();
    agent->add_option("--connect", connect_to, "Coordinator endpoint host:port");
    agent->add_option("--instance", instance_path, "Market-view instance file")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*gen) {
            if (suite) {
                auto all = build_desk_suite(seed);
                fs::create_directories(out_dir);
                for (const auto& inst : all)
                    save_instance(inst, (fs::path(out_dir) / (inst.name + ".json")).string());
                std::cout << "wrote " << all.size() << " instances to " << out_dir << "\n";
                return 0;
            }
            Network raw = synth_network(buses, seed);
            PipelineOptions popt;
            popt.interchange_ratio = ratio;
            M2MInstance inst =
                build_standard_instance(raw, seed, popt, "synth" + std::to_string(buses));
            if (variant != "standard") {
                FlowContext ctx(inst);
                auto c = solve_centralized(inst, ctx);
                auto v = make_variant(inst, ctx, variant_from_string(variant), c.dispatch);
                if (!v) {
                    std::cerr << "error: no " << variant << " variant constructible\n";
                    return 3;
                }
                inst = *v;
            }
            save_instance(inst, out_path);
            std::cout << "wrote " << out_path << " (hash " << instance_hash(inst) << ")\n";
            return 0;
        }

        if (*central) {
            M2MInstance inst = load_or_die(instance_path);
            FlowContext ctx(inst);
            auto z0 = solve_combined(inst, ctx);
            auto z1 = solve_centralized(inst, ctx);
            std::cout << "combined_cost "
                      << (z0.status == qp::SolveStatus::optimal
                              ? std::to_string(z0.dispatch.objective)
                              : qp::to_string(z0.status))
                      << "\n";
            std::cout << "central_cost "
                      << (z1.status == qp::SolveStatus::optimal
                              ? std::to_string(z1.dispatch.objective)
                              : qp::to_string(z1.status))
                      << "\n";
            if (z1.status == qp::SolveStatus::optimal) {
                std::cout << "curtailed " << (z1.dispatch.curtailed ? "yes" : "no") << "\n";
                for (size_t f = 0; f < inst.flowgates.size(); ++f)
                    std::cout << "flowgate " << inst.flowgates[f].monitored << " price "
                              << z1.prices.lambda[f][0] << "\n";
            }
            return z1.status == qp::SolveStatus::optimal ? 0 : 1;
        }

        if (*iter) {
            M2MInstance inst = load_or_die(instance_path);
            IterativeConfig cfg = make_iter_config(relief_formula, mrto_mode, max_iter);
            IterativeOutcome outcome;
            IterativeTrace trace;
            if (mode == "engine") {
                FlowContext ctx(inst);
                std::tie(outcome, trace) = run_iterative(inst, ctx, cfg);
            } else {
                TransportOptions topt;
                topt.mode = mode == "socket" ? TransportMode::socket : TransportMode::inproc;
                if (topt.agent_binary.empty()) topt.agent_binary = fs::read_symlink("/proc/self/exe");
                auto res = run_agents(inst, "iterative", topt, cfg, {});
                outcome = res.iterative;
                trace = res.iterative_trace;
            }
            std::cout << "status " << to_string(outcome.status) << "\n";
            std::cout << "iterations " << outcome.iterations << "\n";
            std::cout << "m2m_cost "
                      << (outcome.has_feasible_iterate ? std::to_string(outcome.feasible_cost)
                                                       : "Inf")
                      << "\n";
            std::cout << "shadow_prices "
                      << (outcome.shadow_prices_converged ? "converged" : "didn't converge")
                      << "\n";
            if (!trace_path.empty()) write_file(trace_path, trace.to_csv());
            return 0;
        }

        if (*admm) {
            M2MInstance inst = load_or_die(instance_path);
            AdmmConfig cfg;
            cfg.rho = rho;
            cfg.max_iter = admm_max_iter;
            cfg.dual_update = dual_update_from_string(dual_update);
            AdmmOutcome outcome;
            AdmmTrace trace;
            if (mode == "engine" || mode == "inproc") {
                if (mode == "inproc") {
                    TransportOptions topt;
                    auto res = run_agents(inst, "admm", topt, {}, cfg);
                    outcome = res.admm;
                    trace = res.admm_trace;
                } else {
                    FlowContext ctx(inst);
                    std::tie(outcome, trace) = run_admm(inst, ctx, cfg);
                }
            } else {
                TransportOptions topt;
                topt.mode = TransportMode::socket;
                topt.agent_binary = fs::read_symlink("/proc/self/exe");
                auto res = run_agents(inst, "admm", topt, {}, cfg);
                outcome = res.admm;
                trace = res.admm_trace;
            }
            FlowContext ctx(inst);
            auto z1 = solve_centralized(inst, ctx);
            std::cout << "status " << to_string(outcome.status) << "\n";
            std::cout << "iterations " << outcome.iterations << "\n";
            std::cout << "admm_cost " << outcome.final_cost << "\n";
            if (z1.status == qp::SolveStatus::optimal)
                std::cout << "admm_gap "
                          << 100.0 * optimality_gap(outcome.final_cost, z1.dispatch.objective)
                          << "%\n";
            if (!trace_path.empty()) write_file(trace_path, trace.to_csv());
            return 0;
        }

        if (*bench) {
            std::vector<M2MInstance> instances;
            for (const auto& entry : fs::directory_iterator(bench_dir)) {
                if (entry.path().extension() != ".json") continue;
                instances.push_back(load_or_die(entry.path().string()));
            }
            std::sort(instances.begin(), instances.end(),
                      [](const auto& a, const auto& b) { return a.name < b.name; });
            if (instances.empty()) {
                std::cerr << "error: no instance files in " << bench_dir << "\n";
                return 2;
            }
            IterativeConfig icfg = make_iter_config(relief_formula, "hard_headroom", 10);
            AdmmConfig acfg;
            acfg.rho = rho;
            acfg.dual_update = dual_update_from_string(dual_update);
            std::vector<InstanceResults> all;
            for (const auto& inst : instances) {
                std::cout << "running " << inst.name << "...\n";
                all.push_back(run_all_regimes(inst, icfg, acfg));
            }
            auto dir = persist_run(all, bench_out, "bench");
            std::cout << benchmark_table_markdown(all);
            std::cout << "results in " << dir << "\n";
            return 0;
        }

        if (*trace_cmd) {
            M2MInstance inst = load_or_die(instance_path);
            FlowContext ctx(inst);
            if (regime == "iterative") {
                IterativeConfig cfg = make_iter_config(relief_formula, "hard_headroom", 10);
                auto [o, trace] = run_iterative(inst, ctx, cfg);
                write_file(trace_out, trace.to_csv());
            } else {
                AdmmConfig cfg;
                cfg.rho = rho;
                cfg.dual_update = dual_update_from_string(dual_update);
                auto [o, trace] = run_admm(inst, ctx, cfg);
                write_file(trace_out, trace.to_csv());
            }
            std::cout << "wrote " << trace_out << "\n";
            return 0;
        }

        if (*conv) {
            Network net = load_matpower_case(case_path);
            M2MInstance inst;
            inst.name = fs::path(case_path).stem().string();
            inst.network = net;
            // Bare network file: no m2m block consumers yet, label everything 1.
            ordered_json j = network_to_json(net);
            j["name"] = inst.name;
            write_file(out_path, j.dump(2) + "\n");
            std::cout << "wrote " << out_path << " (" << net.buses.size() << " buses, "
                      << net.generators.size() << " generators, " << net.lines.size()
                      << " lines)\n";
            return 0;
        }

        if (*agent) {
            std::string endpoint = connect_to;
            if (endpoint.empty())
                if (const char* env = ::getenv("M2M_PEER_COORDINATOR")) endpoint = env;
            if (endpoint.empty()) {
                std::cerr << "error: agent needs --connect or M2M_PEER_COORDINATOR\n";
                return 2;
            }
            return agent_main(instance_path, agent_rto, endpoint);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
