#pragma once

#include "fedtabgan/data.hpp"
#include "fedtabgan/federation.hpp"
#include "fedtabgan/gan.hpp"
#include "fedtabgan/weights.hpp"

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

// Coordinator/worker transport for sequential federated training over TCP.
// There is no encryption or authentication: run it on trusted networks only.
namespace fedtabgan::fednet {

enum class MessageType : std::uint8_t {
    hello = 1,
    assign = 2,
    global_weights = 3,
    trained_weights = 4,
    end = 5,
    error = 6,
};

std::string_view to_string(MessageType type);

struct Message {
    MessageType type = MessageType::hello;
    std::uint32_t round = 0;
    std::uint32_t node_id = 0;
    std::vector<std::uint8_t> payload;

    friend bool operator==(const Message&, const Message&) = default;
};

inline constexpr std::size_t kLengthPrefixSize = 4;
inline constexpr std::size_t kHeaderSize = 9;  // type, round, node_id
inline constexpr std::size_t kFramePrefixSize = kLengthPrefixSize + kHeaderSize;
inline constexpr std::size_t kMaxPayload = std::size_t{256} << 20;

// Frame: u32 payload length, u8 type, u32 round, u32 node_id, payload.
// Integers are big-endian.
std::vector<std::uint8_t> encode_message(const Message& msg);

// Decodes exactly one complete frame. Payloads are checked against their
// type: HELLO and END empty, weights payloads CRC-valid bundles, ASSIGN
// well formed. Any violation raises ProtocolError.
Message decode_message(std::span<const std::uint8_t> frame);

// Splits a byte stream into frames.
class FrameReader {
public:
    void feed(std::span<const std::uint8_t> bytes);
    // Next complete frame, or nullopt when more bytes are needed.
    std::optional<Message> next();
    std::size_t buffered() const noexcept { return buffer_.size() - offset_; }

private:
    std::vector<std::uint8_t> buffer_;
    std::size_t offset_ = 0;
};

// ASSIGN payload: u32 node_id, u64 epochs, 32-byte config digest, then the
// canonical config text the digest was computed over.
struct Assignment {
    std::uint32_t node_id = 0;
    std::uint64_t epochs = 0;
    gan::ConfigDigest digest{};
    std::string config_text;

    friend bool operator==(const Assignment&, const Assignment&) = default;
};

std::vector<std::uint8_t> encode_assignment(const Assignment& a);
Assignment decode_assignment(std::span<const std::uint8_t> bytes);

struct Endpoint {
    std::string host;
    std::uint16_t port = 0;
};

// "host:port"; an empty host means all interfaces when binding.
Endpoint parse_endpoint(std::string_view text);

// Owns a file descriptor.
class Socket {
public:
    Socket() = default;
    explicit Socket(int fd) noexcept : fd_(fd) {}
    Socket(Socket&& other) noexcept;
    Socket& operator=(Socket&& other) noexcept;
    Socket(const Socket&) = delete;
    Socket& operator=(const Socket&) = delete;
    ~Socket();

    int fd() const noexcept { return fd_; }
    bool valid() const noexcept { return fd_ >= 0; }
    void close() noexcept;

    void send_all(std::span<const std::uint8_t> bytes);
    void send_message(const Message& msg);
    // Reads whatever is available; returns 0 on orderly shutdown.
    std::size_t receive_some(std::span<std::uint8_t> buffer);

private:
    int fd_ = -1;
};

class Listener {
public:
    static Listener bind(const Endpoint& endpoint);
    std::uint16_t port() const noexcept { return port_; }
    int fd() const noexcept { return socket_.fd(); }
    Socket accept();

private:
    Socket socket_;
    std::uint16_t port_ = 0;
};

// Retries until connected or the timeout expires (NetworkError).
Socket connect_with_retry(const Endpoint& endpoint, double timeout_secs);

struct CoordinatorOptions {
    // Every message the coordinator receives, before it is acted on.
    std::function<void(const Message&)> on_receive;
    std::function<void(std::string_view)> progress;
};

// Waits for plan.silo_count workers, then per round hands the global weights
// to one node at a time and installs what it returns. Sends END to everyone
// on success. Any failure broadcasts ERROR and rethrows.
federation::WeightsBundle coordinator_run(const federation::FederationPlan& plan, Listener& listener,
                                          const CoordinatorOptions& options = {});
federation::WeightsBundle coordinator_run(const federation::FederationPlan& plan, std::string_view bind_address,
                                          const CoordinatorOptions& options = {});

struct WorkerOptions {
    double connect_timeout_secs = 600.0;
    // When set, assignments whose digest differs are refused.
    std::optional<gan::GanConfig> expected_config;
    gan::TrainHooks train_hooks;
    std::function<void(const gan::TrainLog&)> on_log;
    std::function<void(const Message&)> on_send;
    std::function<void(std::string_view)> diagnostic;
};

// Returns 0 after END, 1 on any failure (reported through diagnostic or
// stderr).
int worker_run(const data::PatientMatrix& data, std::string_view connect_address, std::uint32_t node_id,
               const WorkerOptions& options = {});
int worker_run(const std::filesystem::path& data_path, std::string_view connect_address, std::uint32_t node_id,
               const WorkerOptions& options = {});

}  // namespace fedtabgan::fednet
