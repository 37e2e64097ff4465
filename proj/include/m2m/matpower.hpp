#pragma once

// Minimal MATPOWER case reader: bus/gen/branch/gencost matrices from a .m
// file into a Network.  Out-of-service equipment is dropped, polynomial costs
// are linearized at the output midpoint, piecewise costs use the first
// segment's slope.

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "m2m/network.hpp"

namespace m2m {

namespace detail {

inline std::vector<std::vector<double>> parse_matrix(const std::string& text,
                                                     const std::string& name) {
    const std::string needle = "mpc." + name;
    size_t pos = text.find(needle);
    if (pos == std::string::npos) return {};
    pos = text.find('[', pos);
    const size_t end = text.find("];", pos);
    if (pos == std::string::npos || end == std::string::npos)
        throw ModelError("matpower: unterminated matrix '" + name + "'");
    std::string body = text.substr(pos + 1, end - pos - 1);
    // Strip comments.
    std::string clean;
    bool in_comment = false;
    for (char c : body) {
        if (c == '%') in_comment = true;
        if (c == '\n') in_comment = false;
        if (!in_comment) clean += c;
    }
    std::vector<std::vector<double>> rows;
    std::string row_text;
    auto flush_row = [&] {
        std::istringstream is(row_text);
        std::vector<double> row;
        double v;
        while (is >> v) row.push_back(v);
        if (!row.empty()) rows.push_back(std::move(row));
        row_text.clear();
    };
    for (char c : clean) {
        if (c == ';' || c == '\n') {
            flush_row();
        } else {
            row_text += (c == ',') ? ' ' : c;
        }
    }
    flush_row();
    return rows;
}

}  // namespace detail

inline Network parse_matpower(const std::string& text) {
    Network net;
    auto bus = detail::parse_matrix(text, "bus");
    auto gen = detail::parse_matrix(text, "gen");
    auto branch = detail::parse_matrix(text, "branch");
    auto gencost = detail::parse_matrix(text, "gencost");
    if (bus.empty() || branch.empty())
        throw ModelError("matpower: case needs bus and branch matrices");

    std::string slack;
    for (const auto& r : bus) {
        if (r.size() < 3) throw ModelError("matpower: short bus row");
        Bus b;
        b.id = "b" + std::to_string(static_cast<long long>(r[0]));
        b.load = std::max(r[2], 0.0);
        net.buses.push_back(b);
        if (r.size() > 1 && static_cast<int>(r[1]) == 3 && slack.empty()) slack = b.id;
    }
    int lid = 0;
    for (const auto& r : branch) {
        if (r.size() < 6) throw ModelError("matpower: short branch row");
        if (r.size() > 10 && r[10] == 0.0) continue;  // out of service
        Line l;
        l.id = "l" + std::to_string(++lid);
        l.from_bus = "b" + std::to_string(static_cast<long long>(r[0]));
        l.to_bus = "b" + std::to_string(static_cast<long long>(r[1]));
        l.reactance = r[3];
        if (l.reactance <= 0.0) l.reactance = 1e-4;  // transformers listed with ~0 reactance
        const double rate_a = r[5];
        l.capacity = (rate_a <= 0.0 || rate_a >= 9900.0) ? kInfinity : rate_a;
        if (l.from_bus == l.to_bus) continue;
        net.lines.push_back(l);
    }
    int gid = 0;
    for (size_t i = 0; i < gen.size(); ++i) {
        const auto& r = gen[i];
        if (r.size() < 10) throw ModelError("matpower: short gen row");
        if (r.size() > 7 && r[7] <= 0.0) continue;  // offline
        Generator g;
        g.id = "g" + std::to_string(++gid);
        g.bus = "b" + std::to_string(static_cast<long long>(r[0]));
        g.pmax = r[8];
        g.pmin = std::max(r[9], 0.0);
        if (g.pmax < g.pmin) continue;
        double cost = 10.0;
        if (i < gencost.size() && gencost[i].size() >= 4) {
            const auto& c = gencost[i];
            const int model = static_cast<int>(c[0]);
            const int ncost = static_cast<int>(c[3]);
            if (model == 2 && ncost >= 2 && c.size() >= 4 + static_cast<size_t>(ncost)) {
                // Polynomial c_{n-1} x^{n-1} + ... + c_0: marginal cost at the
                // midpoint of the output range.
                const double mid = 0.5 * (g.pmin + g.pmax);
                double marginal = 0.0;
                for (int kk = 0; kk < ncost - 1; ++kk) {
                    const double coef = c[4 + kk];
                    const int power = ncost - 1 - kk;  // degree of this term
                    marginal += power * coef * std::pow(mid, power - 1);
                }
                cost = marginal;
            } else if (model == 1 && ncost >= 2 && c.size() >= 4 + 2 * static_cast<size_t>(ncost)) {
                const double x1 = c[4], y1 = c[5], x2 = c[6], y2 = c[7];
                if (x2 > x1) cost = (y2 - y1) / (x2 - x1);
            }
        }
        g.cost = cost;
        net.generators.push_back(g);
    }
    net.slack_bus = slack.empty()
                        ? (net.generators.empty() ? net.buses.front().id : net.generators[0].bus)
                        : slack;
    return net;
}

inline Network load_matpower_case(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_matpower(ss.str());
}

}  // namespace m2m
