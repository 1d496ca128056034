#include "steerkit/protocol.hpp"

#include <arpa/inet.h>
#include <cerrno>
#include <csignal>
#include <cstring>
#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <sys/wait.h>
#include <unistd.h>

#include <array>
#include <bit>

#include "steerkit/errors.hpp"

namespace steerkit::protocol {

namespace {

constexpr std::array<std::string_view, 8> kKindNames{"hello",      "run_eval",         "eval_result", "dump_trace",
                                                     "trace_chunk", "ablate_attention", "error",       "bye"};

std::string errno_text(const char* what) { return std::string(what) + ": " + std::strerror(errno); }

class ChildProcessTransport final : public Transport {
public:
    ChildProcessTransport(pid_t pid, int read_fd, int write_fd, std::chrono::milliseconds timeout)
        : pid_(pid), inner_(read_fd, write_fd, true, timeout) {}
    ~ChildProcessTransport() override {
        inner_.close();
        if (pid_ > 0) {
            int status = 0;
            // Give the runner a moment to exit after bye/EOF before forcing it.
            for (int i = 0; i < 50; ++i) {
                if (::waitpid(pid_, &status, WNOHANG) == pid_) return;
                ::usleep(20000);
            }
            ::kill(pid_, SIGTERM);
            ::waitpid(pid_, &status, 0);
        }
    }
    void write_all(std::span<const std::uint8_t> data) override { inner_.write_all(data); }
    void read_exact(std::span<std::uint8_t> dst) override {
        inner_.read_exact(dst);
        bytes_read_ += dst.size();
    }
    void close() override { inner_.close(); }

private:
    pid_t pid_;
    FdTransport inner_;
};

}  // namespace

std::string_view to_string(Kind kind) { return kKindNames[static_cast<std::size_t>(kind)]; }

Kind parse_kind(std::string_view name) {
    for (std::size_t i = 0; i < kKindNames.size(); ++i) {
        if (kKindNames[i] == name) return static_cast<Kind>(i);
    }
    throw ProtocolError("unknown message kind \"" + std::string(name) + "\"");
}

FdTransport::FdTransport(int read_fd, int write_fd, bool owns_fds, std::chrono::milliseconds timeout)
    : read_fd_(read_fd), write_fd_(write_fd), owns_(owns_fds), timeout_(timeout) {}

FdTransport::~FdTransport() { close(); }

void FdTransport::close() {
    if (!owns_) return;
    if (read_fd_ >= 0) ::close(read_fd_);
    if (write_fd_ >= 0 && write_fd_ != read_fd_) ::close(write_fd_);
    read_fd_ = write_fd_ = -1;
}

void FdTransport::write_all(std::span<const std::uint8_t> data) {
    std::size_t done = 0;
    while (done < data.size()) {
        const auto n = ::send(write_fd_, data.data() + done, data.size() - done, MSG_NOSIGNAL);
        if (n < 0 && errno == ENOTSOCK) {
            const auto w = ::write(write_fd_, data.data() + done, data.size() - done);
            if (w < 0) {
                if (errno == EINTR) continue;
                throw ProtocolError(errno_text("write to runner failed"));
            }
            done += static_cast<std::size_t>(w);
            continue;
        }
        if (n < 0) {
            if (errno == EINTR) continue;
            throw ProtocolError(errno_text("send to peer failed"));
        }
        done += static_cast<std::size_t>(n);
    }
}

void FdTransport::read_exact(std::span<std::uint8_t> dst) {
    std::size_t done = 0;
    while (done < dst.size()) {
        pollfd pfd{read_fd_, POLLIN, 0};
        const int timeout_ms = timeout_.count() <= 0 ? -1 : static_cast<int>(timeout_.count());
        const int ready = ::poll(&pfd, 1, timeout_ms);
        if (ready < 0) {
            if (errno == EINTR) continue;
            throw ProtocolError(errno_text("poll failed"));
        }
        if (ready == 0) {
            throw TimeoutError("timed out after " + std::to_string(timeout_.count()) + " ms waiting for peer (at byte offset " +
                               std::to_string(bytes_read_ + done) + ")");
        }
        const auto n = ::read(read_fd_, dst.data() + done, dst.size() - done);
        if (n < 0) {
            if (errno == EINTR) continue;
            throw ProtocolError(errno_text("read from peer failed"));
        }
        if (n == 0) {
            throw ProtocolError("connection closed mid-frame at byte offset " + std::to_string(bytes_read_ + done));
        }
        done += static_cast<std::size_t>(n);
    }
    bytes_read_ += done;
}

void MemoryTransport::read_exact(std::span<std::uint8_t> dst) {
    if (input_.size() - pos_ < dst.size()) {
        const auto available = input_.size() - pos_;
        throw ProtocolError("truncated stream: needed " + std::to_string(dst.size()) + " bytes, " +
                            std::to_string(available) + " available at byte offset " + std::to_string(bytes_read_ + available));
    }
    std::memcpy(dst.data(), input_.data() + pos_, dst.size());
    pos_ += dst.size();
    bytes_read_ += dst.size();
}

std::pair<std::unique_ptr<Transport>, std::unique_ptr<Transport>> make_pipe_pair(std::chrono::milliseconds timeout) {
    int fds[2];
    if (::socketpair(AF_UNIX, SOCK_STREAM, 0, fds) != 0) throw ProtocolError(errno_text("socketpair failed"));
    return {std::make_unique<FdTransport>(fds[0], fds[0], true, timeout),
            std::make_unique<FdTransport>(fds[1], fds[1], true, timeout)};
}

std::unique_ptr<Transport> connect_tcp(const std::string& address, std::chrono::milliseconds timeout) {
    const auto colon = address.rfind(':');
    if (colon == std::string::npos) throw ProtocolError("runner address must be host:port, got \"" + address + "\"");
    const auto host = address.substr(0, colon);
    const auto port = address.substr(colon + 1);
    addrinfo hints{};
    hints.ai_family = AF_UNSPEC;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* res = nullptr;
    if (const int rc = ::getaddrinfo(host.c_str(), port.c_str(), &hints, &res); rc != 0) {
        throw ProtocolError("cannot resolve " + address + ": " + ::gai_strerror(rc));
    }
    int fd = -1;
    for (auto* ai = res; ai != nullptr; ai = ai->ai_next) {
        fd = ::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol);
        if (fd < 0) continue;
        if (::connect(fd, ai->ai_addr, ai->ai_addrlen) == 0) break;
        ::close(fd);
        fd = -1;
    }
    ::freeaddrinfo(res);
    if (fd < 0) throw ProtocolError("cannot connect to runner at " + address);
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
    return std::make_unique<FdTransport>(fd, fd, true, timeout);
}

std::unique_ptr<Transport> accept_tcp_once(std::uint16_t port, const std::function<void(std::uint16_t)>& on_listening) {
    const int listener = ::socket(AF_INET, SOCK_STREAM, 0);
    if (listener < 0) throw ProtocolError(errno_text("socket failed"));
    int one = 1;
    ::setsockopt(listener, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    addr.sin_port = htons(port);
    if (::bind(listener, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0 || ::listen(listener, 1) != 0) {
        const auto msg = errno_text("cannot listen");
        ::close(listener);
        throw ProtocolError(msg);
    }
    socklen_t len = sizeof(addr);
    ::getsockname(listener, reinterpret_cast<sockaddr*>(&addr), &len);
    if (on_listening) on_listening(ntohs(addr.sin_port));
    const int fd = ::accept(listener, nullptr, nullptr);
    ::close(listener);
    if (fd < 0) throw ProtocolError(errno_text("accept failed"));
    return std::make_unique<FdTransport>(fd, fd, true, std::chrono::milliseconds(0));
}

std::unique_ptr<Transport> spawn_process(const std::string& command, std::chrono::milliseconds timeout) {
    int to_child[2];
    int from_child[2];
    if (::pipe(to_child) != 0) throw ProtocolError(errno_text("pipe failed"));
    if (::pipe(from_child) != 0) {
        ::close(to_child[0]);
        ::close(to_child[1]);
        throw ProtocolError(errno_text("pipe failed"));
    }
    const pid_t pid = ::fork();
    if (pid < 0) throw ProtocolError(errno_text("fork failed"));
    if (pid == 0) {
        ::dup2(to_child[0], STDIN_FILENO);
        ::dup2(from_child[1], STDOUT_FILENO);
        ::close(to_child[0]);
        ::close(to_child[1]);
        ::close(from_child[0]);
        ::close(from_child[1]);
        ::execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
        ::_exit(127);
    }
    ::close(to_child[0]);
    ::close(from_child[1]);
    ::fcntl(to_child[1], F_SETFD, FD_CLOEXEC);
    ::fcntl(from_child[0], F_SETFD, FD_CLOEXEC);
    return std::make_unique<ChildProcessTransport>(pid, from_child[0], to_child[1], timeout);
}

std::vector<std::uint8_t> encode_frame(std::span<const std::uint8_t> payload) {
    if (payload.size() > kMaxFrameBytes) {
        throw ProtocolError("frame of " + std::to_string(payload.size()) + " bytes exceeds the 64 MiB limit");
    }
    std::vector<std::uint8_t> out(4 + payload.size());
    const auto len = static_cast<std::uint32_t>(payload.size());
    for (int i = 0; i < 4; ++i) out[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(len >> (8 * i));
    std::memcpy(out.data() + 4, payload.data(), payload.size());
    return out;
}

void write_frame(Transport& t, std::span<const std::uint8_t> payload) {
    if (payload.size() > kMaxFrameBytes) {
        throw ProtocolError("frame of " + std::to_string(payload.size()) + " bytes exceeds the 64 MiB limit");
    }
    std::array<std::uint8_t, 4> header{};
    const auto len = static_cast<std::uint32_t>(payload.size());
    for (int i = 0; i < 4; ++i) header[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(len >> (8 * i));
    t.write_all(header);
    t.write_all(payload);
}

std::vector<std::uint8_t> read_frame(Transport& t, std::uint32_t max_bytes) {
    const auto frame_offset = t.bytes_read();
    std::array<std::uint8_t, 4> header{};
    try {
        t.read_exact(header);
    } catch (const TimeoutError&) {
        throw;
    } catch (const ProtocolError& e) {
        throw ProtocolError("framing error reading length of frame at byte offset " + std::to_string(frame_offset) +
                            ": " + e.what());
    }
    std::uint32_t len = 0;
    for (int i = 0; i < 4; ++i) len |= static_cast<std::uint32_t>(header[static_cast<std::size_t>(i)]) << (8 * i);
    if (len > max_bytes) {
        throw ProtocolError("framing error: frame at byte offset " + std::to_string(frame_offset) + " declares " +
                            std::to_string(len) + " bytes, limit is " + std::to_string(max_bytes));
    }
    std::vector<std::uint8_t> payload(len);
    try {
        t.read_exact(payload);
    } catch (const TimeoutError&) {
        throw;
    } catch (const ProtocolError& e) {
        throw ProtocolError("framing error: truncated frame starting at byte offset " + std::to_string(frame_offset) +
                            ": " + e.what());
    }
    return payload;
}

Kind Message::kind() const {
    if (!body.is_object() || !body.contains("kind") || !body["kind"].is_string()) {
        throw ProtocolError("message body has no string \"kind\" field");
    }
    return parse_kind(body["kind"].get<std::string>());
}

Message make_message(Kind kind, nlohmann::json fields, std::vector<std::uint8_t> binary) {
    if (!fields.is_object()) throw ProtocolError("message fields must be a JSON object");
    fields["kind"] = std::string(to_string(kind));
    return Message{std::move(fields), std::move(binary)};
}

void send_message(Transport& t, const Message& m) {
    nlohmann::json body = m.body;
    if (!m.binary.empty()) body["binary_length"] = m.binary.size();
    else body.erase("binary_length");
    const auto text = body.dump();
    write_frame(t, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
    if (!m.binary.empty()) write_frame(t, m.binary);
}

Message recv_message(Transport& t) {
    const auto offset = t.bytes_read();
    const auto payload = read_frame(t);
    Message m;
    try {
        m.body = nlohmann::json::parse(payload.begin(), payload.end());
    } catch (const nlohmann::json::exception& e) {
        throw ProtocolError("frame at byte offset " + std::to_string(offset) + " is not valid JSON: " + e.what());
    }
    (void)m.kind();
    if (m.body.contains("binary_length")) {
        const auto declared = m.body["binary_length"].get<std::uint64_t>();
        const auto side_offset = t.bytes_read();
        m.binary = read_frame(t);
        if (m.binary.size() != declared) {
            throw ProtocolError("binary frame at byte offset " + std::to_string(side_offset) + " has " +
                                std::to_string(m.binary.size()) + " bytes, body declared " + std::to_string(declared));
        }
    }
    return m;
}

std::vector<std::uint8_t> floats_to_bytes(std::span<const float> values) {
    std::vector<std::uint8_t> out(values.size() * 4);
    for (std::size_t i = 0; i < values.size(); ++i) {
        const auto bits = std::bit_cast<std::uint32_t>(values[i]);
        for (int b = 0; b < 4; ++b) out[i * 4 + static_cast<std::size_t>(b)] = static_cast<std::uint8_t>(bits >> (8 * b));
    }
    return out;
}

std::vector<float> bytes_to_floats(std::span<const std::uint8_t> bytes) {
    if (bytes.size() % 4 != 0) throw ProtocolError("float32 sidecar length is not a multiple of 4");
    std::vector<float> out(bytes.size() / 4);
    for (std::size_t i = 0; i < out.size(); ++i) {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(bytes[i * 4 + static_cast<std::size_t>(b)]) << (8 * b);
        out[i] = std::bit_cast<float>(bits);
    }
    return out;
}

}  // namespace steerkit::protocol
