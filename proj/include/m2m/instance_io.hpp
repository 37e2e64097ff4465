#pragma once

// Versioned instance file format (JSON).  The same schema serves bare
// networks and full coordination instances; the `m2m` block is optional.
// Serialization is canonical: fixed key order, buses/lines/generators in
// storage order, so serialize -> parse -> serialize is byte-identical.

#include <fstream>
#include <optional>
#include <sstream>
#include <string>

#include <json.hpp>

#include "m2m/instance.hpp"

namespace m2m {

inline constexpr const char* kInstanceFormatVersion = "1";

using ordered_json = nlohmann::ordered_json;

inline ordered_json network_to_json(const Network& n) {
    ordered_json j;
    j["format_version"] = kInstanceFormatVersion;
    j["parameters"] = {{"slack_bus", n.slack_bus}, {"power_base_mva", n.power_base_mva}};
    j["buses"] = ordered_json::array();
    for (const auto& b : n.buses) {
        ordered_json jb;
        jb["id"] = b.id;
        jb["load_mw"] = b.load;
        jb["rto"] = b.rto;
        j["buses"].push_back(jb);
    }
    j["lines"] = ordered_json::array();
    for (const auto& l : n.lines) {
        ordered_json jl;
        jl["id"] = l.id;
        jl["from_bus"] = l.from_bus;
        jl["to_bus"] = l.to_bus;
        jl["reactance_pu"] = l.reactance;
        if (is_unlimited(l.capacity))
            jl["capacity_mw"] = nullptr;
        else
            jl["capacity_mw"] = l.capacity;
        if (is_unlimited(l.alloc1))
            jl["alloc_1_mw"] = nullptr;
        else
            jl["alloc_1_mw"] = l.alloc1;
        if (is_unlimited(l.alloc2))
            jl["alloc_2_mw"] = nullptr;
        else
            jl["alloc_2_mw"] = l.alloc2;
        j["lines"].push_back(jl);
    }
    j["generators"] = ordered_json::array();
    for (const auto& g : n.generators) {
        ordered_json jg;
        jg["id"] = g.id;
        jg["bus"] = g.bus;
        jg["cost_per_mwh"] = g.cost;
        jg["pmin_mw"] = g.pmin;
        jg["pmax_mw"] = g.pmax;
        j["generators"].push_back(jg);
    }
    return j;
}

inline Network network_from_json(const ordered_json& j) {
    if (!j.contains("format_version") || j.at("format_version").get<std::string>() != kInstanceFormatVersion)
        throw ModelError("unsupported or missing format_version");
    Network n;
    const auto& params = j.at("parameters");
    n.slack_bus = params.at("slack_bus").get<std::string>();
    n.power_base_mva = params.value("power_base_mva", 100.0);
    for (const auto& jb : j.at("buses")) {
        Bus b;
        b.id = jb.at("id").get<std::string>();
        b.load = jb.at("load_mw").get<double>();
        b.rto = jb.value("rto", 0);
        n.buses.push_back(b);
    }
    for (const auto& jl : j.at("lines")) {
        Line l;
        l.id = jl.at("id").get<std::string>();
        l.from_bus = jl.at("from_bus").get<std::string>();
        l.to_bus = jl.at("to_bus").get<std::string>();
        l.reactance = jl.at("reactance_pu").get<double>();
        l.capacity = jl.at("capacity_mw").is_null() ? kInfinity : jl.at("capacity_mw").get<double>();
        l.alloc1 = jl.at("alloc_1_mw").is_null() ? kInfinity : jl.at("alloc_1_mw").get<double>();
        l.alloc2 = jl.at("alloc_2_mw").is_null() ? kInfinity : jl.at("alloc_2_mw").get<double>();
        n.lines.push_back(l);
    }
    for (const auto& jg : j.at("generators")) {
        Generator g;
        g.id = jg.at("id").get<std::string>();
        g.bus = jg.at("bus").get<std::string>();
        g.cost = jg.at("cost_per_mwh").get<double>();
        g.pmin = jg.at("pmin_mw").get<double>();
        g.pmax = jg.at("pmax_mw").get<double>();
        n.generators.push_back(g);
    }
    return n;
}

inline ordered_json instance_to_json(const M2MInstance& inst) {
    ordered_json j = network_to_json(inst.network);
    j["name"] = inst.name;
    ordered_json m;
    m["variant"] = to_string(inst.variant);
    m["interchange_mw"] = inst.interchange;
    m["curtailment_price_per_mwh"] = inst.curtailment_price;
    ordered_json labels = ordered_json::object();
    for (const auto& b : inst.network.buses) labels[b.id] = b.rto;
    m["rto_labels"] = labels;
    m["flowgates"] = ordered_json::array();
    for (const auto& fg : inst.flowgates) {
        ordered_json jf;
        jf["monitored"] = fg.monitored;
        if (fg.outage)
            jf["outage"] = *fg.outage;
        else
            jf["outage"] = nullptr;
        jf["capacity_mw"] = fg.capacity;
        jf["alloc_1_mw"] = fg.alloc1;
        jf["alloc_2_mw"] = fg.alloc2;
        m["flowgates"].push_back(jf);
    }
    j["m2m"] = m;
    return j;
}

inline M2MInstance instance_from_json(const ordered_json& j) {
    M2MInstance inst;
    inst.network = network_from_json(j);
    inst.name = j.value("name", "");
    if (j.contains("m2m")) {
        const auto& m = j.at("m2m");
        inst.variant = variant_from_string(m.at("variant").get<std::string>());
        inst.interchange = m.at("interchange_mw").get<double>();
        inst.curtailment_price = m.value("curtailment_price_per_mwh", 5000.0);
        if (m.contains("rto_labels")) {
            NetworkIndex idx(inst.network);
            for (const auto& [bus_id, rto] : m.at("rto_labels").items())
                inst.network.buses[idx.bus_at(bus_id)].rto = rto.get<int>();
        }
        for (const auto& jf : m.at("flowgates")) {
            Flowgate fg;
            fg.monitored = jf.at("monitored").get<std::string>();
            if (!jf.at("outage").is_null()) fg.outage = jf.at("outage").get<std::string>();
            fg.capacity = jf.at("capacity_mw").get<double>();
            fg.alloc1 = jf.at("alloc_1_mw").get<double>();
            fg.alloc2 = jf.at("alloc_2_mw").get<double>();
            inst.flowgates.push_back(fg);
        }
    }
    return inst;
}

inline std::string serialize_instance(const M2MInstance& inst) {
    return instance_to_json(inst).dump(2) + "\n";
}

inline M2MInstance parse_instance(const std::string& text) {
    ordered_json j;
    try {
        j = ordered_json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ModelError(std::string("instance parse error: ") + e.what());
    }
    try {
        return instance_from_json(j);
    } catch (const nlohmann::json::exception& e) {
        throw ModelError(std::string("instance schema error: ") + e.what());
    }
}

inline void save_instance(const M2MInstance& inst, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot open '" + path + "' for writing");
    out << serialize_instance(inst);
}

inline M2MInstance load_instance(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_instance(ss.str());
}

/// FNV-1a hash of the canonical serialization; stable identity for manifests.
inline std::string instance_hash(const M2MInstance& inst) {
    const std::string s = serialize_instance(inst);
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    char buf[17];
    snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

}  // namespace m2m
