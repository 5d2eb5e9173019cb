#include "fedtabgan/fednet.hpp"

#include "fedtabgan/errors.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <cstring>
#include <iostream>
#include <map>
#include <thread>

namespace fedtabgan::fednet {

namespace {

using Clock = std::chrono::steady_clock;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int shift = 24; shift >= 0; shift -= 8) out.push_back(static_cast<std::uint8_t>(v >> shift));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int shift = 56; shift >= 0; shift -= 8) out.push_back(static_cast<std::uint8_t>(v >> shift));
}

std::uint32_t get_u32(const std::uint8_t* p) {
    return (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) | (std::uint32_t{p[2]} << 8) | p[3];
}

std::uint64_t get_u64(const std::uint8_t* p) {
    return (std::uint64_t{get_u32(p)} << 32) | get_u32(p + 4);
}

MessageType checked_type(std::uint8_t code) {
    if (code < 1 || code > 6) throw ProtocolError("unknown message type code " + std::to_string(code));
    return static_cast<MessageType>(code);
}

std::string errno_text(const char* what) { return std::string(what) + ": " + std::strerror(errno); }

void check_payload(const Message& msg) {
    switch (msg.type) {
        case MessageType::hello:
        case MessageType::end:
            if (!msg.payload.empty())
                throw ProtocolError(std::string(to_string(msg.type)) + " must carry an empty payload");
            break;
        case MessageType::global_weights:
        case MessageType::trained_weights:
            try {
                (void)federation::decode_weights(msg.payload);
            } catch (const IntegrityError& e) {
                throw ProtocolError(std::string("corrupt weights payload: ") + e.what());
            }
            break;
        case MessageType::assign: {
            const auto a = decode_assignment(msg.payload);
            if (a.node_id != msg.node_id) throw ProtocolError("ASSIGN payload names a different node");
            break;
        }
        case MessageType::error:
            break;
    }
}

Message error_message(std::string_view text) {
    Message m;
    m.type = MessageType::error;
    m.payload.assign(text.begin(), text.end());
    return m;
}

std::string payload_text(const Message& m) { return std::string(m.payload.begin(), m.payload.end()); }

int remaining_ms(Clock::time_point deadline) {
    const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - Clock::now()).count();
    return static_cast<int>(std::clamp<long long>(left, 0, 1000));
}

}  // namespace

std::string_view to_string(MessageType type) {
    switch (type) {
        case MessageType::hello: return "HELLO";
        case MessageType::assign: return "ASSIGN";
        case MessageType::global_weights: return "GLOBAL_WEIGHTS";
        case MessageType::trained_weights: return "TRAINED_WEIGHTS";
        case MessageType::end: return "END";
        case MessageType::error: return "ERROR";
    }
    return "UNKNOWN";
}

std::vector<std::uint8_t> encode_message(const Message& msg) {
    (void)checked_type(static_cast<std::uint8_t>(msg.type));
    if (msg.payload.size() > kMaxPayload)
        throw ProtocolError("payload of " + std::to_string(msg.payload.size()) + " bytes exceeds the frame limit");
    if ((msg.type == MessageType::hello || msg.type == MessageType::end) && !msg.payload.empty())
        throw ProtocolError(std::string(to_string(msg.type)) + " must carry an empty payload");
    std::vector<std::uint8_t> out;
    out.reserve(kFramePrefixSize + msg.payload.size());
    put_u32(out, static_cast<std::uint32_t>(msg.payload.size()));
    out.push_back(static_cast<std::uint8_t>(msg.type));
    put_u32(out, msg.round);
    put_u32(out, msg.node_id);
    out.insert(out.end(), msg.payload.begin(), msg.payload.end());
    return out;
}

Message decode_message(std::span<const std::uint8_t> frame) {
    if (frame.size() < kFramePrefixSize)
        throw ProtocolError("truncated frame: " + std::to_string(frame.size()) + " bytes");
    const std::uint32_t length = get_u32(frame.data());
    if (length > kMaxPayload) throw ProtocolError("declared payload of " + std::to_string(length) + " bytes too large");
    if (frame.size() != kFramePrefixSize + length)
        throw ProtocolError("frame size " + std::to_string(frame.size()) + " does not match declared payload " +
                            std::to_string(length));
    Message m;
    m.type = checked_type(frame[4]);
    m.round = get_u32(frame.data() + 5);
    m.node_id = get_u32(frame.data() + 9);
    m.payload.assign(frame.begin() + kFramePrefixSize, frame.end());
    check_payload(m);
    return m;
}

void FrameReader::feed(std::span<const std::uint8_t> bytes) {
    if (offset_ > 0 && offset_ == buffer_.size()) {
        buffer_.clear();
        offset_ = 0;
    }
    buffer_.insert(buffer_.end(), bytes.begin(), bytes.end());
}

std::optional<Message> FrameReader::next() {
    const std::size_t avail = buffered();
    if (avail < kLengthPrefixSize) return std::nullopt;
    const std::uint8_t* p = buffer_.data() + offset_;
    const std::uint32_t length = get_u32(p);
    if (length > kMaxPayload) throw ProtocolError("declared payload of " + std::to_string(length) + " bytes too large");
    if (avail > kLengthPrefixSize) (void)checked_type(p[4]);
    if (avail < kFramePrefixSize) return std::nullopt;
    const std::size_t size = kFramePrefixSize + length;
    if (avail < size) return std::nullopt;
    auto msg = decode_message(std::span<const std::uint8_t>(p, size));
    offset_ += size;
    if (offset_ == buffer_.size()) {
        buffer_.clear();
        offset_ = 0;
    }
    return msg;
}

std::vector<std::uint8_t> encode_assignment(const Assignment& a) {
    std::vector<std::uint8_t> out;
    put_u32(out, a.node_id);
    put_u64(out, a.epochs);
    out.insert(out.end(), a.digest.begin(), a.digest.end());
    out.insert(out.end(), a.config_text.begin(), a.config_text.end());
    return out;
}

Assignment decode_assignment(std::span<const std::uint8_t> bytes) {
    constexpr std::size_t fixed = 4 + 8 + 32;
    if (bytes.size() < fixed) throw ProtocolError("ASSIGN payload truncated");
    Assignment a;
    a.node_id = get_u32(bytes.data());
    a.epochs = get_u64(bytes.data() + 4);
    std::copy_n(bytes.begin() + 12, 32, a.digest.begin());
    a.config_text.assign(bytes.begin() + fixed, bytes.end());
    return a;
}

Endpoint parse_endpoint(std::string_view text) {
    const auto colon = text.rfind(':');
    if (colon == std::string_view::npos) throw UsageError("address '" + std::string(text) + "' lacks ':port'");
    Endpoint ep;
    ep.host = std::string(text.substr(0, colon));
    if (ep.host.size() >= 2 && ep.host.front() == '[' && ep.host.back() == ']')
        ep.host = ep.host.substr(1, ep.host.size() - 2);
    std::uint64_t port = 0;
    try {
        port = parse_uint(text.substr(colon + 1), "port");
    } catch (const Error&) {
        throw UsageError("bad port in address '" + std::string(text) + "'");
    }
    if (port > 65535) throw UsageError("port out of range in '" + std::string(text) + "'");
    ep.port = static_cast<std::uint16_t>(port);
    return ep;
}

Socket::Socket(Socket&& other) noexcept : fd_(other.fd_) { other.fd_ = -1; }

Socket& Socket::operator=(Socket&& other) noexcept {
    if (this != &other) {
        close();
        fd_ = other.fd_;
        other.fd_ = -1;
    }
    return *this;
}

Socket::~Socket() { close(); }

void Socket::close() noexcept {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
}

void Socket::send_all(std::span<const std::uint8_t> bytes) {
    std::size_t sent = 0;
    while (sent < bytes.size()) {
        const ssize_t n = ::send(fd_, bytes.data() + sent, bytes.size() - sent, MSG_NOSIGNAL);
        if (n < 0) {
            if (errno == EINTR) continue;
            throw NetworkError(errno_text("send failed"));
        }
        sent += static_cast<std::size_t>(n);
    }
}

void Socket::send_message(const Message& msg) { send_all(encode_message(msg)); }

std::size_t Socket::receive_some(std::span<std::uint8_t> buffer) {
    for (;;) {
        const ssize_t n = ::recv(fd_, buffer.data(), buffer.size(), 0);
        if (n >= 0) return static_cast<std::size_t>(n);
        if (errno == EINTR) continue;
        throw NetworkError(errno_text("receive failed"));
    }
}

namespace {

struct AddrInfo {
    addrinfo* list = nullptr;
    ~AddrInfo() {
        if (list) freeaddrinfo(list);
    }
};

AddrInfo resolve(const Endpoint& ep, bool passive) {
    addrinfo hints{};
    hints.ai_family = AF_UNSPEC;
    hints.ai_socktype = SOCK_STREAM;
    if (passive) hints.ai_flags = AI_PASSIVE;
    AddrInfo info;
    const std::string port = std::to_string(ep.port);
    const int rc = getaddrinfo(ep.host.empty() ? nullptr : ep.host.c_str(), port.c_str(), &hints, &info.list);
    if (rc != 0) throw NetworkError("cannot resolve '" + ep.host + "': " + gai_strerror(rc));
    return info;
}

void set_nodelay(int fd) {
    int one = 1;
    setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
}

}  // namespace

Listener Listener::bind(const Endpoint& endpoint) {
    const auto info = resolve(endpoint, true);
    std::string last = "no usable address";
    for (addrinfo* ai = info.list; ai; ai = ai->ai_next) {
        Socket s(::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol));
        if (!s.valid()) {
            last = errno_text("socket");
            continue;
        }
        int one = 1;
        setsockopt(s.fd(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
        if (::bind(s.fd(), ai->ai_addr, ai->ai_addrlen) != 0 || ::listen(s.fd(), 64) != 0) {
            last = errno_text("bind");
            continue;
        }
        sockaddr_storage addr{};
        socklen_t len = sizeof addr;
        getsockname(s.fd(), reinterpret_cast<sockaddr*>(&addr), &len);
        Listener l;
        l.port_ = ntohs(addr.ss_family == AF_INET6 ? reinterpret_cast<sockaddr_in6*>(&addr)->sin6_port
                                                   : reinterpret_cast<sockaddr_in*>(&addr)->sin_port);
        l.socket_ = std::move(s);
        return l;
    }
    throw NetworkError("cannot listen on '" + endpoint.host + ":" + std::to_string(endpoint.port) + "': " + last);
}

Socket Listener::accept() {
    for (;;) {
        const int fd = ::accept(socket_.fd(), nullptr, nullptr);
        if (fd >= 0) {
            set_nodelay(fd);
            return Socket(fd);
        }
        if (errno == EINTR) continue;
        throw NetworkError(errno_text("accept failed"));
    }
}

Socket connect_with_retry(const Endpoint& endpoint, double timeout_secs) {
    const auto deadline = Clock::now() + std::chrono::duration_cast<Clock::duration>(
                                             std::chrono::duration<double>(std::max(timeout_secs, 0.0)));
    std::string last = "timed out";
    for (;;) {
        try {
            const auto info = resolve(endpoint, false);
            for (addrinfo* ai = info.list; ai; ai = ai->ai_next) {
                Socket s(::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol));
                if (!s.valid()) continue;
                if (::connect(s.fd(), ai->ai_addr, ai->ai_addrlen) == 0) {
                    set_nodelay(s.fd());
                    return s;
                }
                last = errno_text("connect");
            }
        } catch (const NetworkError& e) {
            last = e.what();
        }
        if (Clock::now() >= deadline) break;
        std::this_thread::sleep_for(std::chrono::milliseconds(100));
    }
    throw NetworkError("cannot reach coordinator at " + endpoint.host + ":" + std::to_string(endpoint.port) + " (" +
                       last + ")");
}

// ---- coordinator ----

namespace {

struct Peer {
    Socket socket;
    FrameReader reader;
    std::optional<std::uint32_t> node_id;
};

class Session {
public:
    Session(const federation::FederationPlan& plan, Listener& listener, const CoordinatorOptions& options)
        : plan_(plan), listener_(listener), options_(options) {}

    federation::WeightsBundle run() {
        federation::validate(plan_);
        auto global_model = gan::build_gan(plan_.gan);
        auto global = federation::extract_weights(global_model);
        const auto layout = federation::expected_layout(plan_.gan);
        const auto digest = gan::digest(plan_.gan);
        const auto config_text = gan::to_text(plan_.gan);
        try {
            collect_hellos();
            const auto schedule = plan_.schedule();
            for (std::size_t r = 0; r < plan_.rounds; ++r) {
                for (const std::size_t node : plan_.node_order(r)) {
                    const auto round = static_cast<std::uint32_t>(r);
                    const auto id = static_cast<std::uint32_t>(node);
                    report("round " + std::to_string(r) + ": node " + std::to_string(node) + " training " +
                           std::to_string(schedule[r][node]) + " epochs");
                    Peer& peer = *by_node_.at(id);
                    Message assign{MessageType::assign, round, id,
                                   encode_assignment({id, schedule[r][node], digest, config_text})};
                    peer.socket.send_message(assign);
                    Message weights{MessageType::global_weights, round, id, federation::encode_weights(global)};
                    peer.socket.send_message(weights);
                    const Message reply = await_turn(round, id);
                    auto trained = federation::decode_weights(reply.payload);
                    if (trained.layout != layout)
                        throw ProtocolError("node " + std::to_string(node) + " returned weights of the wrong shape");
                    global = std::move(trained);
                }
            }
            for (auto& p : peers_) p.socket.send_message(Message{MessageType::end, 0, *p.node_id, {}});
            report("session complete");
            return global;
        } catch (const Error& e) {
            broadcast_error(e.what());
            throw;
        }
    }

private:
    void report(const std::string& text) {
        if (options_.progress) options_.progress(text);
    }

    Clock::time_point turn_deadline() const { return Clock::now() + std::chrono::seconds(plan_.timeout_secs); }

    void broadcast_error(const std::string& text) {
        for (auto& p : peers_) {
            if (!p.socket.valid()) continue;
            try {
                p.socket.send_message(error_message(text));
            } catch (const Error&) {
            }
        }
    }

    // Reads one chunk from a peer; false once the peer has closed.
    bool pump(Peer& peer) {
        std::uint8_t buf[65536];
        std::size_t n = 0;
        try {
            n = peer.socket.receive_some(buf);
        } catch (const NetworkError&) {
            n = 0;
        }
        if (n == 0) return false;
        peer.reader.feed(std::span<const std::uint8_t>(buf, n));
        return true;
    }

    void collect_hellos() {
        const auto deadline = turn_deadline();
        std::size_t greeted = 0;
        while (greeted < plan_.silo_count) {
            if (Clock::now() >= deadline) throw NetworkError("timed out waiting for workers to connect");
            std::vector<pollfd> fds{{listener_.fd(), POLLIN, 0}};
            for (auto& p : peers_) fds.push_back({p.socket.fd(), POLLIN, 0});
            if (::poll(fds.data(), fds.size(), remaining_ms(deadline)) < 0 && errno != EINTR)
                throw NetworkError(errno_text("poll failed"));
            if (fds[0].revents & POLLIN) {
                peers_.push_back(Peer{listener_.accept(), {}, {}});
                report("worker connected");
            }
            for (std::size_t i = 1; i < fds.size(); ++i) {
                if (!(fds[i].revents & (POLLIN | POLLHUP | POLLERR))) continue;
                Peer& peer = peers_[i - 1];
                if (!pump(peer)) {
                    if (peer.node_id) throw NetworkError("node " + std::to_string(*peer.node_id) + " disconnected");
                    peer.socket.close();
                    continue;
                }
                while (auto msg = peer.reader.next()) {
                    if (options_.on_receive) options_.on_receive(*msg);
                    if (msg->type != MessageType::hello || peer.node_id)
                        throw ProtocolError(std::string("unexpected ") + std::string(to_string(msg->type)) +
                                            " while waiting for workers");
                    if (msg->node_id >= plan_.silo_count)
                        throw ProtocolError("worker announced node " + std::to_string(msg->node_id) + " but plan has " +
                                            std::to_string(plan_.silo_count) + " nodes");
                    if (std::any_of(peers_.begin(), peers_.end(),
                                    [&](const Peer& other) { return other.node_id == msg->node_id; }))
                        throw ProtocolError("two workers announced node " + std::to_string(msg->node_id));
                    peer.node_id = msg->node_id;
                    ++greeted;
                    report("node " + std::to_string(msg->node_id) + " ready");
                }
            }
            peers_.erase(std::remove_if(peers_.begin(), peers_.end(), [](const Peer& p) { return !p.socket.valid(); }),
                         peers_.end());
            by_node_.clear();
            for (auto& p : peers_)
                if (p.node_id) by_node_[*p.node_id] = &p;
        }
    }

    Message await_turn(std::uint32_t round, std::uint32_t node) {
        const auto deadline = turn_deadline();
        for (;;) {
            for (auto& p : peers_) {
                if (auto msg = p.reader.next()) {
                    if (options_.on_receive) options_.on_receive(*msg);
                    const bool in_turn = msg->type == MessageType::trained_weights && *p.node_id == node &&
                                         msg->node_id == node && msg->round == round;
                    if (!in_turn) {
                        if (msg->type == MessageType::error)
                            throw NetworkError("node " + std::to_string(*p.node_id) + " reported: " + payload_text(*msg));
                        throw ProtocolError(std::string(to_string(msg->type)) + " from node " +
                                            std::to_string(*p.node_id) + " out of turn (expecting node " +
                                            std::to_string(node) + ", round " + std::to_string(round) + ")");
                    }
                    return std::move(*msg);
                }
            }
            if (Clock::now() >= deadline)
                throw NetworkError("node " + std::to_string(node) + " did not return weights within " +
                                   std::to_string(plan_.timeout_secs) + " s");
            std::vector<pollfd> fds;
            for (auto& p : peers_) fds.push_back({p.socket.fd(), POLLIN, 0});
            if (::poll(fds.data(), fds.size(), remaining_ms(deadline)) < 0 && errno != EINTR)
                throw NetworkError(errno_text("poll failed"));
            for (std::size_t i = 0; i < fds.size(); ++i) {
                if (!(fds[i].revents & (POLLIN | POLLHUP | POLLERR))) continue;
                if (!pump(peers_[i])) {
                    peers_[i].socket.close();
                    throw NetworkError("node " + std::to_string(*peers_[i].node_id) + " disconnected");
                }
            }
        }
    }

    const federation::FederationPlan& plan_;
    Listener& listener_;
    const CoordinatorOptions& options_;
    std::vector<Peer> peers_;
    std::map<std::uint32_t, Peer*> by_node_;
};

}  // namespace

federation::WeightsBundle coordinator_run(const federation::FederationPlan& plan, Listener& listener,
                                          const CoordinatorOptions& options) {
    Session session(plan, listener, options);
    return session.run();
}

federation::WeightsBundle coordinator_run(const federation::FederationPlan& plan, std::string_view bind_address,
                                          const CoordinatorOptions& options) {
    auto listener = Listener::bind(parse_endpoint(bind_address));
    return coordinator_run(plan, listener, options);
}

// ---- worker ----

namespace {

Message read_message(Socket& socket, FrameReader& reader) {
    std::uint8_t buf[65536];
    for (;;) {
        if (auto msg = reader.next()) return std::move(*msg);
        const std::size_t n = socket.receive_some(buf);
        if (n == 0) throw NetworkError("coordinator closed the connection");
        reader.feed(std::span<const std::uint8_t>(buf, n));
    }
}

}  // namespace

int worker_run(const data::PatientMatrix& data, std::string_view connect_address, std::uint32_t node_id,
               const WorkerOptions& options) {
    auto diag = [&](const std::string& text) {
        if (options.diagnostic)
            options.diagnostic(text);
        else
            std::cerr << "worker " << node_id << ": " << text << '\n';
    };
    Socket socket;
    try {
        socket = connect_with_retry(parse_endpoint(connect_address), options.connect_timeout_secs);
        auto send = [&](const Message& m) {
            if (options.on_send) options.on_send(m);
            socket.send_message(m);
        };
        send(Message{MessageType::hello, 0, node_id, {}});

        FrameReader reader;
        std::optional<gan::GanModel> local;
        std::optional<Assignment> pending;
        for (;;) {
            Message msg = read_message(socket, reader);
            if (msg.node_id != node_id && msg.type != MessageType::error)
                throw ProtocolError("message addressed to node " + std::to_string(msg.node_id));
            switch (msg.type) {
                case MessageType::end:
                    return 0;
                case MessageType::error:
                    diag("session aborted by coordinator: " + payload_text(msg));
                    return 1;
                case MessageType::assign: {
                    auto a = decode_assignment(msg.payload);
                    const auto config = gan::config_from_key_values(parse_key_values(a.config_text));
                    if (gan::digest(config) != a.digest) throw ProtocolError("assignment digest does not match its config");
                    if (options.expected_config && gan::digest(*options.expected_config) != a.digest)
                        throw ProtocolError("coordinator config digest " + gan::to_hex(a.digest) +
                                            " differs from local plan " +
                                            gan::to_hex(gan::digest(*options.expected_config)));
                    if (config.feature_dim != data.cols())
                        throw ProtocolError("local data has " + std::to_string(data.cols()) +
                                            " features, coordinator expects " + std::to_string(config.feature_dim));
                    if (local && local->config != config) throw ProtocolError("config changed mid-session");
                    if (!local) local = gan::build_gan(config, node_id);
                    pending = std::move(a);
                    break;
                }
                case MessageType::global_weights: {
                    if (!pending) throw ProtocolError("GLOBAL_WEIGHTS without an assignment");
                    federation::load_weights(*local, federation::decode_weights(msg.payload));
                    auto log = gan::train(*local, data, pending->epochs, options.train_hooks);
                    log.round = msg.round;
                    log.node = node_id;
                    federation::round_weights_to_f32(*local);
                    if (options.on_log) options.on_log(log);
                    send(Message{MessageType::trained_weights, msg.round, node_id,
                                 federation::encode_weights(federation::extract_weights(*local))});
                    pending.reset();
                    break;
                }
                default:
                    throw ProtocolError(std::string("unexpected ") + std::string(to_string(msg.type)));
            }
        }
    } catch (const Error& e) {
        if (socket.valid()) {
            try {
                socket.send_message(error_message(e.what()));
            } catch (const Error&) {
            }
        }
        diag(e.what());
        return 1;
    }
}

int worker_run(const std::filesystem::path& data_path, std::string_view connect_address, std::uint32_t node_id,
               const WorkerOptions& options) {
    data::PatientMatrix data;
    try {
        data = data::load_matrix(data_path);
    } catch (const Error& e) {
        if (options.diagnostic)
            options.diagnostic(e.what());
        else
            std::cerr << "worker " << node_id << ": " << e.what() << '\n';
        return 1;
    }
    return worker_run(data, connect_address, node_id, options);
}

}  // namespace fedtabgan::fednet
