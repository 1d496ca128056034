#pragma once

// Engine <-> runner wire protocol, version 1.
//
// Every message is a frame: u32 little-endian byte length, then a UTF-8 JSON body
// with a "kind" field. A body carrying "binary_length": N is followed by one more
// frame of exactly N raw bytes (little-endian float32 tensors). See docs/protocol.md.

#include <chrono>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace steerkit::protocol {

inline constexpr int kProtocolVersion = 1;
inline constexpr std::uint32_t kMaxFrameBytes = 64u * 1024u * 1024u;

enum class Kind { hello, run_eval, eval_result, dump_trace, trace_chunk, ablate_attention, error, bye };

std::string_view to_string(Kind kind);
Kind parse_kind(std::string_view name);

// Reliable, ordered byte stream.
class Transport {
public:
    virtual ~Transport() = default;
    virtual void write_all(std::span<const std::uint8_t> data) = 0;
    // Fills dst completely or throws (ProtocolError on EOF, TimeoutError on timeout).
    virtual void read_exact(std::span<std::uint8_t> dst) = 0;
    virtual void close() {}

    std::uint64_t bytes_read() const noexcept { return bytes_read_; }

protected:
    std::uint64_t bytes_read_ = 0;
};

// Pair of POSIX file descriptors (socket, pipe or stdio).
class FdTransport final : public Transport {
public:
    FdTransport(int read_fd, int write_fd, bool owns_fds, std::chrono::milliseconds timeout = std::chrono::seconds(30));
    ~FdTransport() override;
    FdTransport(const FdTransport&) = delete;
    FdTransport& operator=(const FdTransport&) = delete;

    void write_all(std::span<const std::uint8_t> data) override;
    void read_exact(std::span<std::uint8_t> dst) override;
    void close() override;
    void set_timeout(std::chrono::milliseconds timeout) { timeout_ = timeout; }

private:
    int read_fd_;
    int write_fd_;
    bool owns_;
    std::chrono::milliseconds timeout_;
};

// Reads from a fixed buffer and records writes; used for codec tests.
class MemoryTransport final : public Transport {
public:
    explicit MemoryTransport(std::vector<std::uint8_t> input = {}) : input_(std::move(input)) {}
    void write_all(std::span<const std::uint8_t> data) override { output_.insert(output_.end(), data.begin(), data.end()); }
    void read_exact(std::span<std::uint8_t> dst) override;
    const std::vector<std::uint8_t>& output() const noexcept { return output_; }

private:
    std::vector<std::uint8_t> input_;
    std::size_t pos_ = 0;
    std::vector<std::uint8_t> output_;
};

// Connected in-process pair (socketpair); index 0 for the engine, 1 for the runner.
std::pair<std::unique_ptr<Transport>, std::unique_ptr<Transport>> make_pipe_pair(
    std::chrono::milliseconds timeout = std::chrono::seconds(30));

// "host:port" over TCP.
std::unique_ptr<Transport> connect_tcp(const std::string& address, std::chrono::milliseconds timeout = std::chrono::seconds(30));

// Spawns `/bin/sh -c command` and talks over its stdin/stdout. The child is reaped when
// the transport is destroyed.
std::unique_ptr<Transport> spawn_process(const std::string& command,
                                         std::chrono::milliseconds timeout = std::chrono::seconds(30));

// Listens on 127.0.0.1:port and accepts one connection. Port 0 picks a free port;
// on_listening receives the bound port before accept blocks.
std::unique_ptr<Transport> accept_tcp_once(std::uint16_t port,
                                           const std::function<void(std::uint16_t)>& on_listening = {});

// Frame codec.
std::vector<std::uint8_t> encode_frame(std::span<const std::uint8_t> payload);
void write_frame(Transport& t, std::span<const std::uint8_t> payload);
std::vector<std::uint8_t> read_frame(Transport& t, std::uint32_t max_bytes = kMaxFrameBytes);

struct Message {
    nlohmann::json body;
    std::vector<std::uint8_t> binary;

    Kind kind() const;
};

Message make_message(Kind kind, nlohmann::json fields = nlohmann::json::object(), std::vector<std::uint8_t> binary = {});
void send_message(Transport& t, const Message& m);
Message recv_message(Transport& t);

// Little-endian float32 helpers for sidecars.
std::vector<std::uint8_t> floats_to_bytes(std::span<const float> values);
std::vector<float> bytes_to_floats(std::span<const std::uint8_t> bytes);

}  // namespace steerkit::protocol
