#pragma once

// Message layer between the two market agents and the coordinator.
//
// Star topology: agents never talk to each other; the coordinator relays the
// protocol messages and assembles traces.  The same coordinator control flow
// runs over two transports: in-process (synchronous calls through the codec)
// and loopback TCP (one process per market).  Only flowgate-level data ever
// crosses the boundary; each agent is handed a copy of the instance with the
// other market's loads and generators removed.
//
// Wire format: a 4-byte big-endian payload length followed by a UTF-8 JSON
// payload carrying `v` (format version).  See docs/protocol.md.

#include <arpa/inet.h>
#include <netinet/in.h>
#include <poll.h>
#include <sys/socket.h>
#include <sys/wait.h>
#include <unistd.h>

#include <array>
#include <cstring>
#include <deque>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "m2m/admm.hpp"
#include "m2m/instance_io.hpp"
#include "m2m/iterative.hpp"

namespace m2m {

inline constexpr const char* kWireVersion = "1";

class DecodeError : public Error {
public:
    explicit DecodeError(const std::string& what) : Error("decode: " + what) {}
};

/// Payload accepted by the privacy boundary: only coordination-level data.
class PrivacyViolation : public Error {
public:
    explicit PrivacyViolation(const std::string& what) : Error("privacy: " + what) {}
};

enum class MsgKind { hello, iterative_update, relief, admm_update, terminate };
enum class Party { rto1, rto2, coordinator };

inline const char* to_string(MsgKind k) {
    switch (k) {
        case MsgKind::hello: return "hello";
        case MsgKind::iterative_update: return "iterative_update";
        case MsgKind::relief: return "relief";
        case MsgKind::admm_update: return "admm_update";
        case MsgKind::terminate: return "terminate";
    }
    return "?";
}

inline const char* to_string(Party p) {
    switch (p) {
        case Party::rto1: return "rto1";
        case Party::rto2: return "rto2";
        case Party::coordinator: return "coordinator";
    }
    return "?";
}

struct Message {
    MsgKind kind = MsgKind::hello;
    Party sender = Party::coordinator;
    int k = 0;

    // hello
    std::vector<std::string> flowgates;
    std::string protocol;  // "iterative" | "admm" (coordinator hello only)
    ordered_json config;   // protocol configuration (coordinator hello only)

    // iterative_update
    std::vector<double> lambda, flow;
    std::vector<bool> binding;
    double cost = 0.0;
    double curtailment = 0.0;

    // relief
    std::vector<double> relief, adder;
    std::string formula;

    // admm_update
    FgPairs pairs, fbar, lambda_pairs;
    double objective = 0.0;
    double residual = 0.0;
    double sp = 0.0;

    // terminate
    std::string reason;
};

namespace detail {

inline MsgKind kind_from_string(const std::string& s) {
    if (s == "hello") return MsgKind::hello;
    if (s == "iterative_update") return MsgKind::iterative_update;
    if (s == "relief") return MsgKind::relief;
    if (s == "admm_update") return MsgKind::admm_update;
    if (s == "terminate") return MsgKind::terminate;
    throw DecodeError("unknown kind '" + s + "'");
}

inline Party party_from_string(const std::string& s) {
    if (s == "rto1") return Party::rto1;
    if (s == "rto2") return Party::rto2;
    if (s == "coordinator") return Party::coordinator;
    throw DecodeError("unknown sender '" + s + "'");
}

inline ordered_json pairs_to_json(const FgPairs& p) {
    ordered_json a = ordered_json::array();
    for (const auto& x : p) a.push_back(ordered_json::array({x[0], x[1]}));
    return a;
}

inline FgPairs pairs_from_json(const ordered_json& a) {
    FgPairs p;
    for (const auto& x : a) p.push_back({x.at(0).get<double>(), x.at(1).get<double>()});
    return p;
}

inline const std::vector<std::string>& allowed_keys(MsgKind k) {
    static const std::vector<std::string> hello{"v", "kind", "sender", "k",
                                                "flowgates", "protocol", "config"};
    static const std::vector<std::string> iter{"v",       "kind", "sender",     "k",
                                               "lambda",  "flow", "binding",    "cost",
                                               "curtailment"};
    static const std::vector<std::string> relief{"v",      "kind",  "sender",
                                                 "k",      "relief", "adder", "formula"};
    static const std::vector<std::string> admm{"v",     "kind",      "sender", "k",
                                               "pairs", "fbar",      "lambda", "objective",
                                               "residual", "sp",     "curtailment"};
    static const std::vector<std::string> term{"v", "kind", "sender", "k", "reason"};
    switch (k) {
        case MsgKind::hello: return hello;
        case MsgKind::iterative_update: return iter;
        case MsgKind::relief: return relief;
        case MsgKind::admm_update: return admm;
        case MsgKind::terminate: return term;
    }
    return term;
}

}  // namespace detail

/// Schema/privacy validation.  Every key must be on the kind's whitelist; any
/// referenced line id must belong to `allowed_flowgates` when that set is
/// known.  Payloads carrying bus, load, or generator data have no valid keys
/// to live under and are rejected here.
inline void validate_payload(const ordered_json& j,
                             const std::vector<std::string>* allowed_flowgates = nullptr) {
    if (!j.is_object()) throw DecodeError("payload is not an object");
    if (!j.contains("v") || !j.at("v").is_string() ||
        j.at("v").get<std::string>() != kWireVersion)
        throw DecodeError("missing or unsupported wire version");
    if (!j.contains("kind")) throw DecodeError("missing kind");
    const MsgKind kind = detail::kind_from_string(j.at("kind").get<std::string>());
    const auto& allowed = detail::allowed_keys(kind);
    for (const auto& [key, val] : j.items()) {
        if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
            throw PrivacyViolation("field '" + key + "' is not allowed in a " +
                                   std::string(to_string(kind)) + " message");
    }
    if (kind == MsgKind::hello && allowed_flowgates && j.contains("flowgates")) {
        for (const auto& id : j.at("flowgates")) {
            const std::string s = id.get<std::string>();
            if (std::find(allowed_flowgates->begin(), allowed_flowgates->end(), s) ==
                allowed_flowgates->end())
                throw PrivacyViolation("flowgate id '" + s + "' is outside the coordinated set");
        }
    }
}

inline ordered_json message_to_json(const Message& m) {
    ordered_json j;
    j["v"] = kWireVersion;
    j["kind"] = to_string(m.kind);
    j["sender"] = to_string(m.sender);
    j["k"] = m.k;
    switch (m.kind) {
        case MsgKind::hello:
            j["flowgates"] = m.flowgates;
            j["protocol"] = m.protocol;
            j["config"] = m.config.is_null() ? ordered_json::object() : m.config;
            break;
        case MsgKind::iterative_update:
            j["lambda"] = m.lambda;
            j["flow"] = m.flow;
            j["binding"] = m.binding;
            j["cost"] = m.cost;
            j["curtailment"] = m.curtailment;
            break;
        case MsgKind::relief:
            j["relief"] = m.relief;
            j["adder"] = m.adder;
            j["formula"] = m.formula;
            break;
        case MsgKind::admm_update:
            j["pairs"] = detail::pairs_to_json(m.pairs);
            j["fbar"] = detail::pairs_to_json(m.fbar);
            j["lambda"] = detail::pairs_to_json(m.lambda_pairs);
            j["objective"] = m.objective;
            j["residual"] = m.residual;
            j["sp"] = m.sp;
            j["curtailment"] = m.curtailment;
            break;
        case MsgKind::terminate: j["reason"] = m.reason; break;
    }
    return j;
}

inline Message message_from_json(const ordered_json& j,
                                 const std::vector<std::string>* allowed_flowgates = nullptr) {
    validate_payload(j, allowed_flowgates);
    Message m;
    m.kind = detail::kind_from_string(j.at("kind").get<std::string>());
    m.sender = detail::party_from_string(j.at("sender").get<std::string>());
    m.k = j.at("k").get<int>();
    try {
        switch (m.kind) {
            case MsgKind::hello:
                m.flowgates = j.value("flowgates", std::vector<std::string>{});
                m.protocol = j.value("protocol", "");
                if (j.contains("config")) m.config = j.at("config");
                break;
            case MsgKind::iterative_update:
                m.lambda = j.at("lambda").get<std::vector<double>>();
                m.flow = j.at("flow").get<std::vector<double>>();
                m.binding = j.at("binding").get<std::vector<bool>>();
                m.cost = j.at("cost").get<double>();
                m.curtailment = j.at("curtailment").get<double>();
                break;
            case MsgKind::relief:
                m.relief = j.at("relief").get<std::vector<double>>();
                m.adder = j.at("adder").get<std::vector<double>>();
                m.formula = j.at("formula").get<std::string>();
                break;
            case MsgKind::admm_update:
                m.pairs = detail::pairs_from_json(j.at("pairs"));
                m.fbar = detail::pairs_from_json(j.at("fbar"));
                m.lambda_pairs = detail::pairs_from_json(j.at("lambda"));
                m.objective = j.at("objective").get<double>();
                m.residual = j.at("residual").get<double>();
                m.sp = j.at("sp").get<double>();
                m.curtailment = j.at("curtailment").get<double>();
                break;
            case MsgKind::terminate: m.reason = j.at("reason").get<std::string>(); break;
        }
    } catch (const nlohmann::json::exception& e) {
        throw DecodeError(e.what());
    }
    return m;
}

/// Frame = 4-byte big-endian payload length + UTF-8 JSON payload.
inline std::string encode(const Message& m) {
    const std::string payload = message_to_json(m).dump();
    validate_payload(ordered_json::parse(payload));
    std::string out;
    out.resize(4 + payload.size());
    const uint32_t n = static_cast<uint32_t>(payload.size());
    out[0] = static_cast<char>((n >> 24) & 0xff);
    out[1] = static_cast<char>((n >> 16) & 0xff);
    out[2] = static_cast<char>((n >> 8) & 0xff);
    out[3] = static_cast<char>(n & 0xff);
    std::memcpy(out.data() + 4, payload.data(), payload.size());
    return out;
}

inline Message decode(const std::string& frame,
                      const std::vector<std::string>* allowed_flowgates = nullptr) {
    if (frame.size() < 4) throw DecodeError("truncated frame header");
    const uint32_t n = (static_cast<uint32_t>(static_cast<unsigned char>(frame[0])) << 24) |
                       (static_cast<uint32_t>(static_cast<unsigned char>(frame[1])) << 16) |
                       (static_cast<uint32_t>(static_cast<unsigned char>(frame[2])) << 8) |
                       static_cast<uint32_t>(static_cast<unsigned char>(frame[3]));
    if (frame.size() != 4 + n) throw DecodeError("truncated frame payload");
    ordered_json j;
    try {
        j = ordered_json::parse(frame.substr(4));
    } catch (const nlohmann::json::exception& e) {
        throw DecodeError(e.what());
    }
    return message_from_json(j, allowed_flowgates);
}

/// Market view of an instance: topology and coordination data stay, the other
/// market's loads and generators are removed.
inline M2MInstance redact_for_market(const M2MInstance& inst, int rto) {
    M2MInstance out = inst;
    for (auto& b : out.network.buses)
        if (b.rto != rto) b.load = 0.0;
    out.network.generators.erase(
        std::remove_if(out.network.generators.begin(), out.network.generators.end(),
                       [&](const Generator& g) {
                           for (const auto& b : inst.network.buses)
                               if (b.id == g.bus) return b.rto != rto;
                           return true;
                       }),
        out.network.generators.end());
    // Keep a usable slack for sensitivity computation: topology is shared.
    return out;
}

// ---------------------------------------------------------------------------
// Agent: serves one market's solves behind the message boundary.
// ---------------------------------------------------------------------------

class RtoAgent {
public:
    RtoAgent(M2MInstance market_view, int rto)
        : inst_(std::move(market_view)), ctx_(inst_), rto_(rto) {}

    /// Replies to one coordinator message.  Several replies may be produced
    /// (the monitoring market answers an update with its update plus relief).
    std::vector<Message> handle(const Message& in) {
        switch (in.kind) {
            case MsgKind::hello: return on_hello(in);
            case MsgKind::iterative_update: return on_peer_update(in);
            case MsgKind::relief:
                pending_relief_ = in;
                return {};
            case MsgKind::admm_update: return on_admm(in);
            case MsgKind::terminate: done_ = true; return {};
        }
        return {};
    }

    bool done() const { return done_; }
    Party party() const { return rto_ == 1 ? Party::rto1 : Party::rto2; }

private:
    M2MInstance inst_;
    FlowContext ctx_;
    int rto_;
    IterativeConfig icfg_;
    AdmmConfig acfg_;
    std::string protocol_;
    std::optional<Message> pending_relief_;
    bool done_ = false;

    Message base(MsgKind kind, int k) const {
        Message m;
        m.kind = kind;
        m.sender = party();
        m.k = k;
        return m;
    }

    Message step_to_update(const RtoStepResult& s, int k) const {
        Message m = base(MsgKind::iterative_update, k);
        m.lambda = s.lambda;
        m.flow = s.flow;
        m.binding.assign(s.binding.begin(), s.binding.end());
        m.cost = s.cost;
        m.curtailment = s.curtailment;
        return m;
    }

    RtoStepResult update_to_step(const Message& m) const {
        RtoStepResult s;
        s.lambda = m.lambda;
        s.flow = m.flow;
        s.binding.assign(m.binding.begin(), m.binding.end());
        s.cost = m.cost;
        s.curtailment = m.curtailment;
        return s;
    }

    std::vector<Message> on_hello(const Message& in) {
        protocol_ = in.protocol;
        if (in.config.contains("iterative")) {
            const auto& c = in.config.at("iterative");
            icfg_.max_iter = c.value("max_iter", icfg_.max_iter);
            icfg_.price_tol = c.value("price_tol", icfg_.price_tol);
            icfg_.flow_tol = c.value("flow_tol", icfg_.flow_tol);
            icfg_.adder_fraction = c.value("adder_fraction", icfg_.adder_fraction);
            icfg_.relief_formula =
                c.value("relief_formula", std::string("eq8")) == "eq3" ? ReliefFormula::eq3
                                                                       : ReliefFormula::eq8;
            icfg_.mrto_mode = c.value("mrto_mode", std::string("hard_headroom")) ==
                                      "soft_allocation"
                                  ? MrtoFlowgateMode::soft_allocation
                                  : MrtoFlowgateMode::hard_headroom;
        }
        if (in.config.contains("admm")) {
            const auto& c = in.config.at("admm");
            acfg_.rho = c.value("rho", acfg_.rho);
        }
        Message hi = base(MsgKind::hello, 0);
        for (const auto& fg : inst_.flowgates) hi.flowgates.push_back(fg.monitored);
        std::vector<Message> replies{hi};
        if (protocol_ == "iterative") {
            auto init = solve_rto_standalone(inst_, ctx_, rto_, icfg_);
            if (!init) {
                Message t = base(MsgKind::terminate, 0);
                t.reason = "standalone dispatch infeasible";
                replies.push_back(t);
            } else {
                replies.push_back(step_to_update(*init, 0));
            }
        } else if (protocol_ == "admm") {
            Message up = base(MsgKind::admm_update, 0);
            up.pairs.assign(inst_.flowgates.size(), {0.0, 0.0});
            auto built = build_rto_standalone(inst_, ctx_, rto_);
            auto sol = solve_model(inst_, ctx_, built, acfg_.solver);
            if (sol.status == qp::SolveStatus::optimal)
                for (size_t f = 0; f < inst_.flowgates.size(); ++f)
                    up.pairs[f][rto_ - 1] = sol.dispatch.fg_flows(f, rto_ - 1);
            up.fbar.assign(inst_.flowgates.size(), {0.0, 0.0});
            up.lambda_pairs.assign(inst_.flowgates.size(), {0.0, 0.0});
            replies.push_back(up);
        }
        return replies;
    }

    std::vector<Message> on_peer_update(const Message& peer) {
        if (rto_ == 1) {
            // Monitoring side: solve against the peer's prices and flows,
            // then compute the relief request.
            auto step = solve_mrto_step(inst_, ctx_, icfg_, peer.lambda, peer.flow);
            if (!step) {
                Message t = base(MsgKind::terminate, peer.k + 1);
                t.reason = "monitoring dispatch infeasible";
                return {t};
            }
            ReliefRequest rq = compute_relief(inst_, icfg_, *step, peer.lambda, peer.flow);
            Message up = step_to_update(*step, peer.k + 1);
            Message rm = base(MsgKind::relief, peer.k + 1);
            rm.relief = rq.relief;
            rm.adder = rq.adder_used;
            rm.formula = to_string(rq.formula);
            return {up, rm};
        }
        // Non-monitoring side: needs the relief that arrived with the update.
        if (!pending_relief_) {
            Message t = base(MsgKind::terminate, peer.k);
            t.reason = "relief request missing";
            return {t};
        }
        auto step = solve_nmrto_step(inst_, ctx_, icfg_, peer.lambda, pending_relief_->relief);
        pending_relief_.reset();
        if (!step) {
            Message t = base(MsgKind::terminate, peer.k);
            t.reason = "non-monitoring dispatch infeasible";
            return {t};
        }
        return {step_to_update(*step, peer.k)};
    }

    std::vector<Message> on_admm(const Message& in) {
        auto r = solve_admm_sub(inst_, ctx_, rto_, in.fbar, in.lambda_pairs, acfg_.rho,
                                acfg_.solver);
        if (!r.ok) {
            Message t = base(MsgKind::terminate, in.k);
            t.reason = "consensus subproblem failed";
            return {t};
        }
        Message up = base(MsgKind::admm_update, in.k);
        up.pairs = r.copies;
        up.fbar.assign(inst_.flowgates.size(), {0.0, 0.0});
        up.lambda_pairs.assign(inst_.flowgates.size(), {0.0, 0.0});
        up.objective = r.cost;
        up.sp = r.sp;
        up.curtailment = r.curtailment;
        return {up};
    }
};

// ---------------------------------------------------------------------------
// Links: message pipes to an agent (in-process or socket).
// ---------------------------------------------------------------------------

struct LogEntry {
    Party sender;
    MsgKind kind;
    int k;
};

class MessageLog {
public:
    void record(const Message& m) { entries_.push_back({m.sender, m.kind, m.k}); }
    const std::vector<LogEntry>& entries() const { return entries_; }

    /// Iteration counters must never regress for any sender.
    bool monotone() const {
        int last[3] = {-1, -1, -1};
        for (const auto& e : entries_) {
            const int s = static_cast<int>(e.sender);
            if (e.k < last[s]) return false;
            last[s] = e.k;
        }
        return true;
    }

private:
    std::vector<LogEntry> entries_;
};

class AgentLink {
public:
    virtual ~AgentLink() = default;
    virtual void send_msg(const Message& m) = 0;
    virtual Message recv_msg() = 0;
};

/// Synchronous in-process link; every message still passes through the codec
/// so both transports quantize identically.
class InprocLink : public AgentLink {
public:
    InprocLink(M2MInstance market_view, int rto) : agent_(std::move(market_view), rto) {}

    void send_msg(const Message& m) override {
        auto replies = agent_.handle(decode(encode(m)));
        for (const auto& r : replies) inbox_.push_back(decode(encode(r)));
    }

    Message recv_msg() override {
        if (inbox_.empty()) throw Error("agent produced no reply");
        Message m = inbox_.front();
        inbox_.pop_front();
        return m;
    }

private:
    RtoAgent agent_;
    std::deque<Message> inbox_;
};

namespace detail {

class Fd {
public:
    Fd() = default;
    explicit Fd(int fd) : fd_(fd) {}
    ~Fd() { reset(); }
    Fd(Fd&& o) noexcept : fd_(o.fd_) { o.fd_ = -1; }
    Fd& operator=(Fd&& o) noexcept {
        reset();
        fd_ = o.fd_;
        o.fd_ = -1;
        return *this;
    }
    Fd(const Fd&) = delete;
    Fd& operator=(const Fd&) = delete;
    int get() const { return fd_; }
    bool valid() const { return fd_ >= 0; }
    void reset() {
        if (fd_ >= 0) ::close(fd_);
        fd_ = -1;
    }

private:
    int fd_ = -1;
};

inline void send_all(int fd, const std::string& bytes) {
    size_t off = 0;
    while (off < bytes.size()) {
        ssize_t n = ::send(fd, bytes.data() + off, bytes.size() - off, MSG_NOSIGNAL);
        if (n <= 0) throw Error("socket send failed");
        off += static_cast<size_t>(n);
    }
}

inline std::string recv_exact(int fd, size_t len, int timeout_ms) {
    std::string out(len, '\0');
    size_t off = 0;
    while (off < len) {
        pollfd p{fd, POLLIN, 0};
        const int pr = ::poll(&p, 1, timeout_ms);
        if (pr == 0) throw Error("socket receive timeout");
        if (pr < 0) throw Error("socket poll failed");
        ssize_t n = ::recv(fd, out.data() + off, len - off, 0);
        if (n == 0) throw Error("peer disconnected");
        if (n < 0) throw Error("socket receive failed");
        off += static_cast<size_t>(n);
    }
    return out;
}

inline Message recv_frame(int fd, int timeout_ms) {
    const std::string header = recv_exact(fd, 4, timeout_ms);
    const uint32_t n = (static_cast<uint32_t>(static_cast<unsigned char>(header[0])) << 24) |
                       (static_cast<uint32_t>(static_cast<unsigned char>(header[1])) << 16) |
                       (static_cast<uint32_t>(static_cast<unsigned char>(header[2])) << 8) |
                       static_cast<uint32_t>(static_cast<unsigned char>(header[3]));
    if (n > (1u << 26)) throw DecodeError("frame too large");
    return decode(header + recv_exact(fd, n, timeout_ms));
}

}  // namespace detail

class SocketLink : public AgentLink {
public:
    SocketLink(detail::Fd fd, int timeout_ms) : fd_(std::move(fd)), timeout_ms_(timeout_ms) {}

    void send_msg(const Message& m) override { detail::send_all(fd_.get(), encode(m)); }
    Message recv_msg() override { return detail::recv_frame(fd_.get(), timeout_ms_); }

private:
    detail::Fd fd_;
    int timeout_ms_;
};

// ---------------------------------------------------------------------------
// Coordinator
// ---------------------------------------------------------------------------

enum class TransportMode { inproc, socket };

struct TransportOptions {
    TransportMode mode = TransportMode::inproc;
    std::string bind = "127.0.0.1:0";  // overridden by M2M_BIND
    int timeout_ms = 60000;
    std::string agent_binary;  // socket mode; falls back to M2M_AGENT_BIN
};

struct TransportResult {
    IterativeOutcome iterative;
    IterativeTrace iterative_trace;
    AdmmOutcome admm;
    AdmmTrace admm_trace;
    MessageLog log;
};

namespace detail {

struct SpawnedAgent {
    pid_t pid = -1;
    std::filesystem::path view_path;

    ~SpawnedAgent() {
        if (pid > 0) {
            int status = 0;
            ::waitpid(pid, &status, 0);
        }
        if (!view_path.empty()) {
            std::error_code ec;
            std::filesystem::remove(view_path, ec);
        }
    }
};

inline std::pair<std::string, uint16_t> split_endpoint(const std::string& ep) {
    const auto colon = ep.rfind(':');
    if (colon == std::string::npos) throw InvalidArgument("endpoint must be host:port");
    return {ep.substr(0, colon), static_cast<uint16_t>(std::stoi(ep.substr(colon + 1)))};
}

}  // namespace detail

/// Runs the selected protocol through the message layer and returns outcomes
/// identical to the single-process engines for the same configuration.
inline TransportResult run_agents(const M2MInstance& inst, const std::string& protocol,
                                  const TransportOptions& topt = {},
                                  const IterativeConfig& icfg = {}, const AdmmConfig& acfg = {});

/// Agent process entry point (socket mode): connect, serve, exit.
inline int agent_main(const std::string& instance_path, int rto, const std::string& endpoint,
                      int timeout_ms = 60000) {
    M2MInstance view = load_instance(instance_path);
    auto [host, port] = detail::split_endpoint(endpoint);
    detail::Fd fd(::socket(AF_INET, SOCK_STREAM, 0));
    if (!fd.valid()) return 2;
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) return 2;
    if (::connect(fd.get(), reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) return 2;

    RtoAgent agent(std::move(view), rto);
    // Identify ourselves before the coordinator speaks.
    Message hi;
    hi.kind = MsgKind::hello;
    hi.sender = agent.party();
    detail::send_all(fd.get(), encode(hi));
    try {
        while (!agent.done()) {
            Message in = detail::recv_frame(fd.get(), timeout_ms);
            for (const auto& r : agent.handle(in)) detail::send_all(fd.get(), encode(r));
        }
    } catch (const Error&) {
        return 1;
    }
    return 0;
}

namespace detail {

inline ordered_json config_json(const IterativeConfig& icfg, const AdmmConfig& acfg) {
    ordered_json c;
    c["iterative"] = {{"max_iter", icfg.max_iter},
                      {"price_tol", icfg.price_tol},
                      {"flow_tol", icfg.flow_tol},
                      {"adder_fraction", icfg.adder_fraction},
                      {"relief_formula", std::string(to_string(icfg.relief_formula))},
                      {"mrto_mode", icfg.mrto_mode == MrtoFlowgateMode::soft_allocation
                                        ? "soft_allocation"
                                        : "hard_headroom"}};
    c["admm"] = {{"rho", acfg.rho}};
    return c;
}

}  // namespace detail

inline TransportResult run_agents(const M2MInstance& inst, const std::string& protocol,
                                  const TransportOptions& topt, const IterativeConfig& icfg,
                                  const AdmmConfig& acfg) {
    if (protocol != "iterative" && protocol != "admm")
        throw InvalidArgument("protocol must be 'iterative' or 'admm'");
    TransportResult result;

    std::unique_ptr<AgentLink> link1, link2;
    std::vector<std::unique_ptr<detail::SpawnedAgent>> children;

    if (topt.mode == TransportMode::inproc) {
        link1 = std::make_unique<InprocLink>(redact_for_market(inst, 1), 1);
        link2 = std::make_unique<InprocLink>(redact_for_market(inst, 2), 2);
    } else {
        std::string bind = topt.bind;
        if (const char* env = ::getenv("M2M_BIND")) bind = env;
        auto [host, port] = detail::split_endpoint(bind);
        detail::Fd listener(::socket(AF_INET, SOCK_STREAM, 0));
        if (!listener.valid()) throw Error("cannot create listening socket");
        int one = 1;
        ::setsockopt(listener.get(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
        sockaddr_in addr{};
        addr.sin_family = AF_INET;
        addr.sin_port = htons(port);
        if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1)
            throw InvalidArgument("bad bind address '" + bind + "'");
        if (::bind(listener.get(), reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0)
            throw Error("cannot bind '" + bind + "'");
        if (::listen(listener.get(), 2) != 0) throw Error("listen failed");
        socklen_t alen = sizeof(addr);
        ::getsockname(listener.get(), reinterpret_cast<sockaddr*>(&addr), &alen);
        const std::string endpoint =
            host + ":" + std::to_string(ntohs(addr.sin_port));

        std::string bin = topt.agent_binary;
        if (bin.empty())
            if (const char* env = ::getenv("M2M_AGENT_BIN")) bin = env;
        if (bin.empty()) throw InvalidArgument("socket mode needs an agent binary path");

        for (int rto : {1, 2}) {
            auto child = std::make_unique<detail::SpawnedAgent>();
            child->view_path = std::filesystem::temp_directory_path() /
                               ("m2m-view-" + std::to_string(::getpid()) + "-" +
                                std::to_string(rto) + "-" + instance_hash(inst) + ".json");
            save_instance(redact_for_market(inst, rto), child->view_path.string());
            const pid_t pid = ::fork();
            if (pid == 0) {
                ::execl(bin.c_str(), bin.c_str(), "agent", "--rto", std::to_string(rto).c_str(),
                        "--connect", endpoint.c_str(), "--instance",
                        child->view_path.string().c_str(), (char*)nullptr);
                ::_exit(127);
            }
            if (pid < 0) throw Error("fork failed");
            child->pid = pid;
            children.push_back(std::move(child));
        }
        // Identify the two connections by their first hello.
        for (int i = 0; i < 2; ++i) {
            detail::Fd conn(::accept(listener.get(), nullptr, nullptr));
            if (!conn.valid()) throw Error("accept failed");
            Message hi = detail::recv_frame(conn.get(), topt.timeout_ms);
            if (hi.kind != MsgKind::hello) throw Error("expected hello");
            auto link = std::make_unique<SocketLink>(std::move(conn), topt.timeout_ms);
            if (hi.sender == Party::rto1)
                link1 = std::move(link);
            else
                link2 = std::move(link);
        }
        if (!link1 || !link2) throw Error("both agents must connect");
    }

    auto send_logged = [&](AgentLink& link, const Message& m) {
        result.log.record(m);
        link.send_msg(m);
    };
    auto recv_logged = [&](AgentLink& link) {
        Message m = link.recv_msg();
        result.log.record(m);
        if (m.kind == MsgKind::terminate && m.sender != Party::coordinator)
            throw Error("agent failure: " + m.reason);
        return m;
    };

    // Handshake.
    Message hello;
    hello.kind = MsgKind::hello;
    hello.sender = Party::coordinator;
    hello.protocol = protocol;
    hello.config = detail::config_json(icfg, acfg);
    for (const auto& fg : inst.flowgates) hello.flowgates.push_back(fg.monitored);

    auto terminate_all = [&](const std::string& reason) {
        Message t;
        t.kind = MsgKind::terminate;
        t.sender = Party::coordinator;
        t.reason = reason;
        try {
            send_logged(*link1, t);
            send_logged(*link2, t);
        } catch (const Error&) {
        }
    };

    if (protocol == "iterative") {
        std::optional<Message> init1, init2;
        try {
            send_logged(*link1, hello);
            recv_logged(*link1);  // agent hello
            init1 = recv_logged(*link1);
            send_logged(*link2, hello);
            recv_logged(*link2);
            init2 = recv_logged(*link2);
        } catch (const Error&) {
            result.iterative.status = IterativeStatus::infeasible;
            terminate_all("initial dispatch infeasible");
            return result;
        }

        // Latest stored update message per market, relayed verbatim.
        Message last1 = *init1, last2 = *init2;
        std::optional<Message> pending_relief_msg_;
        IterativeEndpoints ep;
        ep.init_mrto = [&]() -> std::optional<RtoStepResult> {
            RtoStepResult s;
            s.lambda = init1->lambda;
            s.flow = init1->flow;
            s.binding.assign(init1->binding.begin(), init1->binding.end());
            s.cost = init1->cost;
            s.curtailment = init1->curtailment;
            return s;
        };
        ep.init_nmrto = [&]() -> std::optional<RtoStepResult> {
            RtoStepResult s;
            s.lambda = init2->lambda;
            s.flow = init2->flow;
            s.binding.assign(init2->binding.begin(), init2->binding.end());
            s.cost = init2->cost;
            s.curtailment = init2->curtailment;
            return s;
        };
        ep.mrto = [&](const std::vector<double>&, const std::vector<double>&)
            -> std::optional<std::pair<RtoStepResult, ReliefRequest>> {
            try {
                send_logged(*link1, last2);
                Message up = recv_logged(*link1);
                Message rm = recv_logged(*link1);
                last1 = up;
                RtoStepResult s;
                s.lambda = up.lambda;
                s.flow = up.flow;
                s.binding.assign(up.binding.begin(), up.binding.end());
                s.cost = up.cost;
                s.curtailment = up.curtailment;
                ReliefRequest rq;
                rq.relief = rm.relief;
                rq.adder_used = rm.adder;
                rq.formula = rm.formula == "eq3" ? ReliefFormula::eq3 : ReliefFormula::eq8;
                pending_relief_msg_ = rm;
                return std::make_pair(s, rq);
            } catch (const Error&) {
                return std::nullopt;
            }
        };
        ep.nmrto = [&](const std::vector<double>&, const std::vector<double>&)
            -> std::optional<RtoStepResult> {
            try {
                send_logged(*link2, *pending_relief_msg_);
                send_logged(*link2, last1);
                Message up = recv_logged(*link2);
                last2 = up;
                RtoStepResult s;
                s.lambda = up.lambda;
                s.flow = up.flow;
                s.binding.assign(up.binding.begin(), up.binding.end());
                s.cost = up.cost;
                s.curtailment = up.curtailment;
                return s;
            } catch (const Error&) {
                return std::nullopt;
            }
        };
        auto [outcome, trace] = run_iterative_with(inst, ep, icfg);
        result.iterative = outcome;
        result.iterative_trace = std::move(trace);
        terminate_all(std::string("iterative: ") + to_string(outcome.status));
    } else {
        send_logged(*link1, hello);
        recv_logged(*link1);  // agent hello
        Message s1 = recv_logged(*link1);
        send_logged(*link2, hello);
        recv_logged(*link2);
        Message s2 = recv_logged(*link2);

        AdmmEndpoints ep;
        ep.initial_target = [&]() {
            FgPairs fbar(inst.flowgates.size(), {0.0, 0.0});
            for (size_t f = 0; f < inst.flowgates.size(); ++f) {
                fbar[f][0] = s1.pairs[f][0];
                fbar[f][1] = s2.pairs[f][1];
            }
            return fbar;
        };
        int iter_k = 0;
        ep.both_subs = [&](const FgPairs& fbar, const FgPairs& lambda, double) {
            ++iter_k;
            Message req;
            req.kind = MsgKind::admm_update;
            req.sender = Party::coordinator;
            req.k = iter_k;
            req.pairs.assign(inst.flowgates.size(), {0.0, 0.0});
            req.fbar = fbar;
            req.lambda_pairs = lambda;
            send_logged(*link1, req);
            send_logged(*link2, req);
            Message r1 = recv_logged(*link1);
            Message r2 = recv_logged(*link2);
            AdmmSubResult a1, a2;
            a1.ok = a2.ok = true;
            a1.copies = r1.pairs;
            a1.cost = r1.objective;
            a1.sp = r1.sp;
            a1.curtailment = r1.curtailment;
            a2.copies = r2.pairs;
            a2.cost = r2.objective;
            a2.sp = r2.sp;
            a2.curtailment = r2.curtailment;
            return std::make_pair(a1, a2);
        };
        auto [outcome, trace] = run_admm_with(inst, ep, acfg);
        result.admm = outcome;
        result.admm_trace = std::move(trace);
        terminate_all(std::string("admm: ") + to_string(outcome.status));
    }
    return result;
}

}  // namespace m2m
