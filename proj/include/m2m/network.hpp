#pragma once

// Physical grid model and DC power-flow sensitivities: shift factors (PTDF),
// line outage distribution factors (LODF), and per-market flow evaluation.
//
// Line orientation is fixed as from_bus -> to_bus; every signed flow in the
// library follows that orientation.  Shift factors are computed by dense
// factorization of the reduced nodal susceptance matrix.

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <algorithm>
#include <optional>
#include <queue>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "m2m/common.hpp"

namespace m2m {

struct Bus {
    std::string id;
    double load = 0.0;  // MW
    int rto = 0;        // 1, 2, or 0 when unassigned
};

struct Line {
    std::string id;
    std::string from_bus;
    std::string to_bus;
    double reactance = 0.0;         // per-unit, > 0
    double capacity = kInfinity;    // MW; +inf means no explicit limit
    double alloc1 = kInfinity;      // MW capacity share of RTO 1
    double alloc2 = kInfinity;      // MW capacity share of RTO 2
};

struct Generator {
    std::string id;
    std::string bus;
    double cost = 0.0;  // $/MWh
    double pmin = 0.0;  // MW
    double pmax = 0.0;  // MW
};

struct Network {
    std::vector<Bus> buses;
    std::vector<Line> lines;
    std::vector<Generator> generators;
    std::string slack_bus;
    double power_base_mva = 100.0;
};

/// Id lookups and adjacency, built once per network.
struct NetworkIndex {
    std::unordered_map<std::string, int> bus;
    std::unordered_map<std::string, int> line;
    std::unordered_map<std::string, int> gen;
    std::vector<std::vector<int>> gens_at_bus;   // bus index -> generator indices
    std::vector<std::vector<int>> lines_at_bus;  // bus index -> incident line indices

    explicit NetworkIndex(const Network& n) {
        for (int i = 0; i < static_cast<int>(n.buses.size()); ++i) {
            if (!bus.emplace(n.buses[i].id, i).second)
                throw ModelError("duplicate bus id '" + n.buses[i].id + "'");
        }
        for (int i = 0; i < static_cast<int>(n.lines.size()); ++i) {
            if (!line.emplace(n.lines[i].id, i).second)
                throw ModelError("duplicate line id '" + n.lines[i].id + "'");
        }
        for (int i = 0; i < static_cast<int>(n.generators.size()); ++i) {
            if (!gen.emplace(n.generators[i].id, i).second)
                throw ModelError("duplicate generator id '" + n.generators[i].id + "'");
        }
        gens_at_bus.resize(n.buses.size());
        lines_at_bus.resize(n.buses.size());
        for (int g = 0; g < static_cast<int>(n.generators.size()); ++g) {
            auto it = bus.find(n.generators[g].bus);
            if (it == bus.end())
                throw ModelError("generator '" + n.generators[g].id + "' references unknown bus '" +
                                 n.generators[g].bus + "'");
            gens_at_bus[it->second].push_back(g);
        }
        for (int l = 0; l < static_cast<int>(n.lines.size()); ++l) {
            auto f = bus.find(n.lines[l].from_bus);
            auto t = bus.find(n.lines[l].to_bus);
            if (f == bus.end() || t == bus.end())
                throw ModelError("line '" + n.lines[l].id + "' references an unknown bus");
            lines_at_bus[f->second].push_back(l);
            lines_at_bus[t->second].push_back(l);
        }
    }

    int bus_at(const std::string& id) const {
        auto it = bus.find(id);
        if (it == bus.end()) throw ModelError("unknown bus id '" + id + "'");
        return it->second;
    }
    int line_at(const std::string& id) const {
        auto it = line.find(id);
        if (it == line.end()) throw ModelError("unknown line id '" + id + "'");
        return it->second;
    }
};

/// Connected components over (buses, lines), optionally skipping one line.
inline std::vector<int> connected_components(const Network& n, const NetworkIndex& idx,
                                             int skip_line = -1) {
    const int nb = static_cast<int>(n.buses.size());
    std::vector<int> comp(nb, -1);
    int next = 0;
    for (int start = 0; start < nb; ++start) {
        if (comp[start] >= 0) continue;
        comp[start] = next;
        std::queue<int> q;
        q.push(start);
        while (!q.empty()) {
            int b = q.front();
            q.pop();
            for (int l : idx.lines_at_bus[b]) {
                if (l == skip_line) continue;
                const int f = idx.bus.at(n.lines[l].from_bus);
                const int t = idx.bus.at(n.lines[l].to_bus);
                const int other = (f == b) ? t : f;
                if (comp[other] < 0) {
                    comp[other] = next;
                    q.push(other);
                }
            }
        }
        ++next;
    }
    return comp;
}

inline bool is_connected(const Network& n, const NetworkIndex& idx, int skip_line = -1) {
    auto comp = connected_components(n, idx, skip_line);
    return std::all_of(comp.begin(), comp.end(), [](int c) { return c == 0; });
}

/// Structural validation; throws ModelError naming the violation.
inline void validate_network(const Network& n) {
    if (n.buses.empty()) throw ModelError("network has no buses");
    NetworkIndex idx(n);
    if (idx.bus.find(n.slack_bus) == idx.bus.end())
        throw ModelError("slack bus '" + n.slack_bus + "' does not exist");
    for (const auto& b : n.buses) {
        if (!(b.load >= 0.0) || !std::isfinite(b.load))
            throw ModelError("bus '" + b.id + "': load must be finite and >= 0");
        if (b.rto < 0 || b.rto > 2) throw ModelError("bus '" + b.id + "': rto label out of range");
    }
    for (const auto& l : n.lines) {
        if (l.from_bus == l.to_bus) throw ModelError("line '" + l.id + "': from equals to");
        if (!(l.reactance > 0.0) || !std::isfinite(l.reactance))
            throw ModelError("line '" + l.id + "': reactance must be > 0");
        if (!(l.capacity > 0.0)) throw ModelError("line '" + l.id + "': capacity must be > 0");
    }
    for (const auto& g : n.generators) {
        if (!(0.0 <= g.pmin) || !(g.pmin <= g.pmax))
            throw ModelError("generator '" + g.id + "': requires 0 <= pmin <= pmax");
        if (!std::isfinite(g.cost)) throw ModelError("generator '" + g.id + "': non-finite cost");
    }
    auto comp = connected_components(n, idx);
    if (!std::all_of(comp.begin(), comp.end(), [](int c) { return c == 0; })) {
        // Name the smallest non-main component.
        std::unordered_map<int, std::vector<std::string>> groups;
        for (int b = 0; b < static_cast<int>(comp.size()); ++b)
            groups[comp[b]].push_back(n.buses[b].id);
        const std::vector<std::string>* smallest = nullptr;
        for (const auto& [c, ids] : groups)
            if (c != 0 && (!smallest || ids.size() < smallest->size())) smallest = &ids;
        std::ostringstream os;
        os << "network is disconnected; isolated component {";
        for (size_t i = 0; i < smallest->size(); ++i) os << (i ? "," : "") << (*smallest)[i];
        os << "}";
        throw ModelError(os.str());
    }
}

/// Shift factors delta(bus, line): flow sensitivity on each line (oriented
/// from_bus -> to_bus) to 1 MW injected at the bus and withdrawn at the slack.
struct ShiftFactorMatrix {
    Eigen::MatrixXd delta;  // n_bus x n_line
    std::string slack_bus;
    std::optional<std::string> outage;  // set for contingency-adjusted factors
};

inline ShiftFactorMatrix compute_ptdf(const Network& n, const std::string& slack) {
    NetworkIndex idx(n);
    validate_network(n);
    const int nb = static_cast<int>(n.buses.size());
    const int nl = static_cast<int>(n.lines.size());
    const int slack_i = idx.bus_at(slack);

    std::vector<int> red(nb, -1);  // bus index -> reduced index
    int r = 0;
    for (int b = 0; b < nb; ++b)
        if (b != slack_i) red[b] = r++;
    const int nr = nb - 1;

    Eigen::MatrixXd B = Eigen::MatrixXd::Zero(nr, nr);
    for (const auto& line : n.lines) {
        const double w = 1.0 / line.reactance;
        const int f = red[idx.bus_at(line.from_bus)];
        const int t = red[idx.bus_at(line.to_bus)];
        if (f >= 0) B(f, f) += w;
        if (t >= 0) B(t, t) += w;
        if (f >= 0 && t >= 0) {
            B(f, t) -= w;
            B(t, f) -= w;
        }
    }
    Eigen::LLT<Eigen::MatrixXd> llt(B);
    if (llt.info() != Eigen::Success)
        throw NumericalError("reduced susceptance matrix is singular");
    Eigen::MatrixXd Binv = llt.solve(Eigen::MatrixXd::Identity(nr, nr));

    ShiftFactorMatrix out;
    out.slack_bus = slack;
    out.delta = Eigen::MatrixXd::Zero(nb, nl);
    for (int l = 0; l < nl; ++l) {
        const auto& line = n.lines[l];
        const int f = red[idx.bus_at(line.from_bus)];
        const int t = red[idx.bus_at(line.to_bus)];
        const double w = 1.0 / line.reactance;
        for (int b = 0; b < nb; ++b) {
            if (red[b] < 0) continue;  // slack row stays zero
            const double thf = (f >= 0) ? Binv(f, red[b]) : 0.0;
            const double tht = (t >= 0) ? Binv(t, red[b]) : 0.0;
            out.delta(b, l) = w * (thf - tht);
        }
    }
    return out;
}

/// Transfer sensitivity of line `l` to 1 MW moved from bus `from` to bus `to`.
inline double transfer_factor(const ShiftFactorMatrix& sf, int from_bus, int to_bus, int line) {
    return sf.delta(from_bus, line) - sf.delta(to_bus, line);
}

/// Line outage distribution factors for a single outage.  Entry l satisfies:
/// post-outage flow(l) = base flow(l) + lodf[l] * base flow(outage).
/// The outaged line's own entry is -1.
inline std::vector<double> compute_lodf(const Network& n, const NetworkIndex& idx,
                                        const ShiftFactorMatrix& ptdf,
                                        const std::string& outage_id) {
    const int o = idx.line_at(outage_id);
    if (!is_connected(n, idx, o))
        throw ModelError("outage of line '" + outage_id + "' islands the network");
    const int fo = idx.bus_at(n.lines[o].from_bus);
    const int to = idx.bus_at(n.lines[o].to_bus);
    const double denom = 1.0 - transfer_factor(ptdf, fo, to, o);
    if (std::abs(denom) < 1e-9)
        throw NumericalError("LODF denominator vanishes for outage '" + outage_id + "'");
    std::vector<double> lodf(n.lines.size(), 0.0);
    for (int l = 0; l < static_cast<int>(n.lines.size()); ++l) {
        if (l == o) {
            lodf[l] = -1.0;
            continue;
        }
        lodf[l] = transfer_factor(ptdf, fo, to, l) / denom;
    }
    return lodf;
}

inline std::vector<double> compute_lodf(const Network& n, const ShiftFactorMatrix& ptdf,
                                        const std::string& outage_id) {
    NetworkIndex idx(n);
    return compute_lodf(n, idx, ptdf, outage_id);
}

/// Post-contingency shift factors for one monitored line:
/// delta_c(b) = delta(b, monitored) + LODF(monitored, outage) * delta(b, outage).
inline Eigen::VectorXd contingency_column(const NetworkIndex& idx, const ShiftFactorMatrix& ptdf,
                                          const std::vector<double>& lodf,
                                          const std::string& monitored,
                                          const std::string& outage) {
    if (monitored == outage)
        throw InvalidArgument("monitored line equals the outaged line");
    const int m = idx.line_at(monitored);
    const int o = idx.line_at(outage);
    return ptdf.delta.col(m) + lodf[m] * ptdf.delta.col(o);
}

inline ShiftFactorMatrix contingency_shift_factors(const Network& n,
                                                   const ShiftFactorMatrix& ptdf,
                                                   const std::vector<double>& lodf,
                                                   const std::string& monitored,
                                                   const std::string& outage) {
    NetworkIndex idx(n);
    ShiftFactorMatrix out = ptdf;
    out.delta.col(idx.line_at(monitored)) = contingency_column(idx, ptdf, lodf, monitored, outage);
    out.outage = outage;
    return out;
}

/// Flow contribution of one market on one line for a given dispatch:
/// sum over the market's buses of delta(b, l) * (generation at b - load at b).
inline double evaluate_rto_flow(const Network& n, const NetworkIndex& idx,
                                const ShiftFactorMatrix& sf,
                                const std::unordered_map<std::string, double>& dispatch, int rto,
                                const std::string& line_id) {
    const int l = idx.line_at(line_id);
    double flow = 0.0;
    for (int b = 0; b < static_cast<int>(n.buses.size()); ++b) {
        if (n.buses[b].rto != rto) continue;
        double inj = -n.buses[b].load;
        for (int g : idx.gens_at_bus[b]) {
            auto it = dispatch.find(n.generators[g].id);
            if (it != dispatch.end()) inj += it->second;
        }
        flow += sf.delta(b, l) * inj;
    }
    return flow;
}

inline double evaluate_rto_flow(const Network& n, const ShiftFactorMatrix& sf,
                                const std::unordered_map<std::string, double>& dispatch, int rto,
                                const std::string& line_id) {
    NetworkIndex idx(n);
    return evaluate_rto_flow(n, idx, sf, dispatch, rto, line_id);
}

inline double total_load(const Network& n, int rto = 0) {
    double s = 0.0;
    for (const auto& b : n.buses)
        if (rto == 0 || b.rto == rto) s += b.load;
    return s;
}

inline double total_pmax(const Network& n) {
    double s = 0.0;
    for (const auto& g : n.generators) s += g.pmax;
    return s;
}

/// Stand-in limit for lines without an explicit capacity: dominates any
/// feasible flow without wrecking LP scaling.
inline double sufficiently_large_limit(const Network& n) { return 10.0 * total_pmax(n); }

}  // namespace m2m
