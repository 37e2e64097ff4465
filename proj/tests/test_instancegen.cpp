#include <catch2/catch_amalgamated.hpp>

#include <set>

#include "m2m/instance_io.hpp"
#include "m2m/instancegen.hpp"
#include "support/toys.hpp"

using namespace m2m;

namespace {

Network path4() {
    Network n;
    n.buses = {{"a", 10, 0}, {"b", 10, 0}, {"c", 10, 0}, {"d", 10, 0}};
    n.lines = {{"l1", "a", "b", 0.1, kInfinity, kInfinity, kInfinity},
               {"l2", "b", "c", 0.1, kInfinity, kInfinity, kInfinity},
               {"l3", "c", "d", 0.1, kInfinity, kInfinity, kInfinity}};
    n.generators = {{"g1", "a", 10, 0, 100}};
    n.slack_bus = "a";
    return n;
}

// Exhaustive search over all balanced connected bipartitions.
int min_cut_oracle(const Network& n, std::set<std::set<std::string>>& argmin) {
    NetworkIndex idx(n);
    const int nb = static_cast<int>(n.buses.size());
    const int max_imb = static_cast<int>(0.2 * nb);
    int best = -1;
    for (unsigned mask = 1; mask + 1 < (1u << nb); ++mask) {
        std::vector<int> label(nb);
        int c1 = 0;
        for (int b = 0; b < nb; ++b) {
            label[b] = (mask >> b) & 1 ? 1 : 2;
            c1 += label[b] == 1;
        }
        if (std::abs(c1 - (nb - c1)) > max_imb) continue;
        auto connected = [&](int side) {
            int start = -1, count = 0;
            for (int b = 0; b < nb; ++b)
                if (label[b] == side) {
                    if (start < 0) start = b;
                    ++count;
                }
            std::vector<char> seen(nb, 0);
            std::vector<int> st{start};
            seen[start] = 1;
            int reach = 1;
            while (!st.empty()) {
                int u = st.back();
                st.pop_back();
                for (int l : idx.lines_at_bus[u]) {
                    int f = idx.bus.at(n.lines[l].from_bus);
                    int t = idx.bus.at(n.lines[l].to_bus);
                    int o = f == u ? t : f;
                    if (label[o] == side && !seen[o]) {
                        seen[o] = 1;
                        ++reach;
                        st.push_back(o);
                    }
                }
            }
            return reach == count;
        };
        if (!connected(1) || !connected(2)) continue;
        int cut = 0;
        for (const auto& l : n.lines)
            cut += label[idx.bus.at(l.from_bus)] != label[idx.bus.at(l.to_bus)];
        if (cut == 0) continue;
        if (best < 0 || cut < best) {
            best = cut;
            argmin.clear();
        }
        if (cut == best) {
            std::set<std::string> side1;
            for (int b = 0; b < nb; ++b)
                if (label[b] == 1) side1.insert(n.buses[b].id);
            argmin.insert(side1);
        }
    }
    return best;
}

}  // namespace

TEST_CASE("partition of the 4-bus path matches the exhaustive min-cut split") {
    Network n = path4();
    std::set<std::set<std::string>> argmin;
    const int best = min_cut_oracle(n, argmin);
    REQUIRE(best == 1);

    Network part = partition(n, 7);
    std::set<std::string> side1, side2;
    for (const auto& b : part.buses) (b.rto == 1 ? side1 : side2).insert(b.id);
    const bool matches = argmin.count(side1) || argmin.count(side2);
    CHECK(matches);
}

TEST_CASE("partition of K4: any balanced split is connected with cut 4") {
    Network n;
    n.buses = {{"a", 0, 0}, {"b", 0, 0}, {"c", 0, 0}, {"d", 0, 0}};
    int lid = 0;
    const char* ids[] = {"a", "b", "c", "d"};
    for (int i = 0; i < 4; ++i)
        for (int j = i + 1; j < 4; ++j)
            n.lines.push_back({"l" + std::to_string(++lid), ids[i], ids[j], 0.1, kInfinity,
                               kInfinity, kInfinity});
    n.generators = {{"g1", "a", 10, 0, 100}};
    n.slack_bus = "a";
    Network part = partition(n, 3);
    int c1 = 0;
    for (const auto& b : part.buses) c1 += b.rto == 1;
    CHECK(c1 == 2);
    NetworkIndex idx(part);
    int cut = 0;
    for (const auto& l : part.lines)
        cut += part.buses[idx.bus_at(l.from_bus)].rto != part.buses[idx.bus_at(l.to_bus)].rto;
    CHECK(cut == 4);
}

TEST_CASE("partition rejects bad inputs") {
    Network n = path4();
    n.buses.push_back({"z", 0, 0});
    n.buses.push_back({"y", 0, 0});
    n.lines.push_back({"lz", "z", "y", 0.1, kInfinity, kInfinity, kInfinity});
    CHECK_THROWS_AS(partition(n, 1), ModelError);  // disconnected

    Network small;
    small.buses = {{"a", 0, 0}, {"b", 0, 0}};
    small.lines = {{"l1", "a", "b", 0.1, kInfinity, kInfinity, kInfinity}};
    small.slack_bus = "a";
    CHECK_THROWS_AS(partition(small, 1), ModelError);  // fewer than 4 buses
}

TEST_CASE("partition is deterministic for a fixed seed") {
    Network n = synth_network(30, 99);
    Network p1 = partition(n, 5);
    Network p2 = partition(n, 5);
    for (size_t b = 0; b < n.buses.size(); ++b) CHECK(p1.buses[b].rto == p2.buses[b].rto);
}

TEST_CASE("partition balance and connectivity on random networks") {
    for (uint64_t seed : {11ull, 22ull, 33ull, 44ull}) {
        Network n = synth_network(20 + 7 * static_cast<int>(seed % 5), seed);
        Network p = partition(n, seed);
        NetworkIndex idx(p);
        int c1 = 0, c2 = 0;
        for (const auto& b : p.buses) (b.rto == 1 ? c1 : c2)++;
        CHECK(std::abs(c1 - c2) <= 0.2 * p.buses.size());
        CHECK(c1 > 0);
        CHECK(c2 > 0);
        int cut = 0;
        for (const auto& l : p.lines)
            cut += p.buses[idx.bus_at(l.from_bus)].rto != p.buses[idx.bus_at(l.to_bus)].rto;
        CHECK(cut > 0);
    }
}

TEST_CASE("congestion ratio worked values") {
    CHECK(congestion_ratio(50, 50) == Catch::Approx(25.0));
    CHECK(congestion_ratio(60, -40) == Catch::Approx(-120.0));
    CHECK(congestion_ratio(0, 80) == Catch::Approx(0.0));
    CHECK_THROWS_AS(congestion_ratio(50, -50), CancellingFlows);
    CHECK(congestion_ratio_or_sentinel(50, -50) == -kInfinity);
}

TEST_CASE("flowgate identification picks the highest ratio candidate") {
    M2MInstance inst = test::ring4();
    FlowContext ctx(inst);
    auto central = solve_centralized(inst, ctx);
    REQUIRE(central.status == qp::SolveStatus::optimal);
    inst.flowgates.clear();
    auto fg = identify_flowgate(inst, ctx, central.dispatch);
    REQUIRE(fg.has_value());
    CHECK(fg->monitored == "l1");
    CHECK(fg->capacity == Catch::Approx(50.0));
    CHECK(fg->alloc1 == Catch::Approx(25.0));

    SECTION("no finite-capacity candidate gives an empty result") {
        M2MInstance open = inst;
        for (auto& l : open.network.lines) l.capacity = kInfinity;
        FlowContext ctx2(open);
        CHECK_FALSE(identify_flowgate(open, ctx2, central.dispatch).has_value());
    }
}

TEST_CASE("capacity allocation rules") {
    M2MInstance inst = test::ring4();
    // Give l2 a finite capacity and fabricate market flows.
    NetworkIndex idx(inst.network);
    inst.network.lines[1].capacity = 100.0;
    FlowContext ctx(inst);
    Dispatch d;
    d.flows = Eigen::MatrixXd::Zero(4, 2);

    SECTION("both flows below half: split half/half") {
        d.flows(1, 0) = 30;
        d.flows(1, 1) = 20;
        allocate_capacities(inst, ctx, d);
        CHECK(inst.network.lines[1].alloc1 == Catch::Approx(50.0));
        CHECK(inst.network.lines[1].alloc2 == Catch::Approx(50.0));
    }
    SECTION("heavy side gets 110% of its flow, remainder covers the other") {
        d.flows(1, 0) = 70;
        d.flows(1, 1) = 20;
        allocate_capacities(inst, ctx, d);
        CHECK(inst.network.lines[1].alloc1 == Catch::Approx(77.0));
        CHECK(inst.network.lines[1].alloc2 == Catch::Approx(23.0));
    }
    SECTION("remainder short of the light side: proportional split") {
        d.flows(1, 0) = 88;
        d.flows(1, 1) = 11;
        allocate_capacities(inst, ctx, d);
        CHECK(inst.network.lines[1].alloc1 == Catch::Approx(100.0 * 88.0 / 99.0));
        CHECK(inst.network.lines[1].alloc2 == Catch::Approx(100.0 * 11.0 / 99.0));
    }
    SECTION("unlimited lines carry the stand-in limit on both sides") {
        allocate_capacities(inst, ctx, d);
        CHECK(inst.network.lines[2].alloc1 == Catch::Approx(ctx.big_limit));
        CHECK(inst.network.lines[2].alloc2 == Catch::Approx(ctx.big_limit));
    }
    SECTION("flowgates always split half/half") {
        d.flows(0, 0) = 180;
        d.flows(0, 1) = 10;
        allocate_capacities(inst, ctx, d);
        CHECK(inst.flowgates[0].alloc1 == Catch::Approx(25.0));
        CHECK(inst.flowgates[0].alloc2 == Catch::Approx(25.0));
    }
}

TEST_CASE("variants") {
    M2MInstance inst = test::ring4(100.0);
    FlowContext ctx(inst);
    Dispatch d;
    d.flows = Eigen::MatrixXd::Zero(4, 2);

    SECTION("standard is the identity") {
        auto v = make_variant(inst, ctx, Variant::standard, d);
        REQUIRE(v.has_value());
        CHECK(v->flowgates[0].capacity == Catch::Approx(100.0));
    }
    SECTION("lower limit scales the flowgate by 0.95 and re-splits") {
        auto v = make_variant(inst, ctx, Variant::lower_limit, d);
        REQUIRE(v.has_value());
        CHECK(v->flowgates[0].capacity == Catch::Approx(95.0));
        CHECK(v->flowgates[0].alloc1 == Catch::Approx(47.5));
        CHECK(v->flowgates[0].alloc2 == Catch::Approx(47.5));
        CHECK(v->name == "ring4-ll");
    }
    SECTION("opposite flow uses the joint market flow as the capacity") {
        d.flows(3, 0) = 60;   // l4 carries opposing market flows
        d.flows(3, 1) = -40;
        auto v = make_variant(inst, ctx, Variant::opposite_flow, d);
        REQUIRE(v.has_value());
        CHECK(v->flowgates[0].monitored == "l4");
        CHECK(v->flowgates[0].capacity == Catch::Approx(20.0));
        CHECK(v->name == "ring4-of");
    }
    SECTION("no negative-ratio candidate: structured empty result") {
        d.flows.setZero();
        d.flows(3, 0) = 60;
        d.flows(3, 1) = 40;  // same direction
        CHECK_FALSE(make_variant(inst, ctx, Variant::opposite_flow, d).has_value());
    }
}

TEST_CASE("interchange schedule") {
    M2MInstance inst = test::ring4();
    SECTION("zero ratio") {
        set_interchange(inst, 0.0);
        CHECK(inst.interchange == 0.0);
    }
    SECTION("three percent of a 100 MW market-1 load") {
        set_interchange(inst, 0.03);
        CHECK(std::abs(inst.interchange) == Catch::Approx(3.0));
        CHECK(inst.interchange < 0.0);  // market 2 generates the transfer
    }
    SECTION("sign switch") {
        set_interchange(inst, 0.03, false);
        CHECK(inst.interchange == Catch::Approx(3.0));
    }
    SECTION("out of range") {
        CHECK_THROWS_AS(set_interchange(inst, 0.7), InvalidArgument);
        CHECK_THROWS_AS(set_interchange(inst, -0.1), InvalidArgument);
    }
}

TEST_CASE("worked ratio-to-megawatt conversions") {
    M2MInstance inst = test::ring4();
    inst.network.buses[1].load = 1000.0;  // market-1 load
    set_interchange(inst, 0.03);
    CHECK(std::abs(inst.interchange) == Catch::Approx(30.0));
    inst.network.buses[1].load = 500.0;
    set_interchange(inst, 0.07);
    CHECK(std::abs(inst.interchange) == Catch::Approx(35.0));
}

TEST_CASE("end-to-end pipeline on a synthetic grid") {
    Network raw = synth_network(28, 4242);
    M2MInstance inst = build_standard_instance(raw, 4242, {}, "synth28");
    validate_instance(inst);
    REQUIRE(inst.flowgates.size() == 1);

    FlowContext ctx(inst);
    auto central = solve_centralized(inst, ctx);
    REQUIRE(central.status == qp::SolveStatus::optimal);
    CHECK_FALSE(central.dispatch.curtailed);

    SECTION("lower-limit variant is never cheaper centrally") {
        auto ll = make_variant(inst, ctx, Variant::lower_limit, central.dispatch);
        REQUIRE(ll.has_value());
        FlowContext ctx2(*ll);
        auto c2 = solve_centralized(*ll, ctx2);
        REQUIRE(c2.status == qp::SolveStatus::optimal);
        CHECK(c2.dispatch.objective >= central.dispatch.objective - 1e-6);
    }
    SECTION("file round-trip is byte-identical") {
        const std::string once = serialize_instance(inst);
        const std::string twice = serialize_instance(parse_instance(once));
        CHECK(once == twice);
    }
    SECTION("regeneration with the same seed is identical") {
        Network raw2 = synth_network(28, 4242);
        M2MInstance inst2 = build_standard_instance(raw2, 4242, {}, "synth28");
        CHECK(serialize_instance(inst) == serialize_instance(inst2));
    }
    SECTION("allocation feasibility invariant") {
        for (const auto& l : inst.network.lines) {
            if (is_unlimited(l.capacity)) continue;
            CHECK(l.alloc1 + l.alloc2 <= l.capacity + 1e-6);
        }
        for (const auto& fg : inst.flowgates)
            CHECK(fg.alloc1 + fg.alloc2 == Catch::Approx(fg.capacity));
    }
}
