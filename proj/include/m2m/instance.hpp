#pragma once

// Two-market coordination instance: a partitioned network, its flowgates,
// the scheduled interchange, and the instance variant tag.

#include <optional>
#include <string>
#include <vector>

#include "m2m/common.hpp"
#include "m2m/network.hpp"

namespace m2m {

enum class Variant { standard, lower_limit, opposite_flow };

inline const char* to_string(Variant v) {
    switch (v) {
        case Variant::standard: return "standard";
        case Variant::lower_limit: return "lower_limit";
        case Variant::opposite_flow: return "opposite_flow";
    }
    return "?";
}

inline Variant variant_from_string(const std::string& s) {
    if (s == "standard") return Variant::standard;
    if (s == "lower_limit") return Variant::lower_limit;
    if (s == "opposite_flow") return Variant::opposite_flow;
    throw InvalidArgument("unknown variant '" + s + "'");
}

/// A transmission constraint coordinated between the two markets.  When
/// `outage` is set the constraint applies to the post-contingency flow.
struct Flowgate {
    std::string monitored;
    std::optional<std::string> outage;
    double capacity = 0.0;  // MW
    double alloc1 = 0.0;    // MW share of RTO 1
    double alloc2 = 0.0;    // MW share of RTO 2
};

struct M2MInstance {
    std::string name;
    Network network;
    std::vector<Flowgate> flowgates;
    double interchange = 0.0;  // MW, signed; enters RTO 1's balance with +
    Variant variant = Variant::standard;
    double curtailment_price = 5000.0;  // $/MWh
};

inline void validate_instance(const M2MInstance& inst) {
    validate_network(inst.network);
    NetworkIndex idx(inst.network);
    int n1 = 0, n2 = 0;
    for (const auto& b : inst.network.buses) {
        if (b.rto == 1) ++n1;
        if (b.rto == 2) ++n2;
        if (b.rto != 1 && b.rto != 2)
            throw ModelError("instance '" + inst.name + "': bus '" + b.id + "' is unassigned");
    }
    if (n1 == 0 || n2 == 0)
        throw ModelError("instance '" + inst.name + "': both market bus sets must be non-empty");
    if (!std::isfinite(inst.interchange))
        throw ModelError("instance '" + inst.name + "': interchange must be finite");
    for (const auto& fg : inst.flowgates) {
        idx.line_at(fg.monitored);
        if (fg.outage) idx.line_at(*fg.outage);
        if (!(fg.capacity > 0.0) || !std::isfinite(fg.capacity))
            throw ModelError("flowgate on '" + fg.monitored + "': capacity must be > 0");
        if (!nearly_equal(fg.alloc1 + fg.alloc2, fg.capacity, 1e-9))
            throw ModelError("flowgate on '" + fg.monitored +
                             "': capacity shares must sum to the capacity");
    }
}

/// Which market operates a line: the partition of its from_bus.
inline int operating_rto(const Network& n, const NetworkIndex& idx, const Line& line) {
    return n.buses[idx.bus_at(line.from_bus)].rto;
}

}  // namespace m2m
