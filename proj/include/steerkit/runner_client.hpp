#pragma once

// Engine side of the runner protocol. One RunnerClient owns one session; requests on a
// session are strictly sequential.

#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "steerkit/concept_data.hpp"
#include "steerkit/eval_types.hpp"
#include "steerkit/protocol.hpp"
#include "steerkit/steering_core.hpp"
#include "steerkit/trace_store.hpp"

namespace steerkit {

enum class Capability { steer, trace, ablate };

struct RunnerSession {
    std::string model_id;
    std::uint32_t n_layers = 0;
    std::uint32_t d_model = 0;
    std::set<Capability> capabilities;

    bool can(Capability c) const { return capabilities.contains(c); }
};

std::string_view to_string(Capability c);
Capability parse_capability(std::string_view name);

// Reassembles trace_chunk messages that may arrive in any order.
class TraceAssembler {
public:
    explicit TraceAssembler(std::uint32_t expected_d_model) : expected_d_model_(expected_d_model) {}

    void add(const protocol::Message& chunk);
    bool complete() const noexcept { return total_ && chunks_.size() == *total_; }
    // Validates coverage (no gaps, no overlaps) and builds the trace.
    ActivationTrace finish() const;

private:
    struct Chunk {
        std::uint32_t layer;
        std::uint32_t token_offset;
        std::uint32_t n_tokens;
        std::vector<float> values;
    };
    std::uint32_t expected_d_model_;
    std::optional<std::uint32_t> total_;
    std::optional<nlohmann::json> header_;
    std::map<std::uint32_t, Chunk> chunks_;
};

class RunnerClient {
public:
    explicit RunnerClient(std::unique_ptr<protocol::Transport> transport);
    ~RunnerClient();
    RunnerClient(const RunnerClient&) = delete;
    RunnerClient& operator=(const RunnerClient&) = delete;

    // hello exchange; throws ProtocolError on version mismatch (after sending bye).
    const RunnerSession& handshake();
    const RunnerSession& session() const;

    // One record per item, in item order. The runner never sees gold answers.
    std::vector<EvalRecord> run_eval(const std::vector<EvalItem>& items, const SteeringPlan* plan = nullptr,
                                     const std::optional<std::string>& prompt_prefix = std::nullopt);

    ActivationTrace request_trace(const ConceptSet& concept_set, const std::vector<std::uint32_t>& layers);

    // Accuracy with attention to image tokens zeroed in every layer after `layer`.
    double ablate_after_layer(const std::vector<EvalItem>& items, std::uint32_t layer);

    // Sends bye and closes the transport. Idempotent.
    void close();

private:
    std::vector<EvalRecord> collect_results(const std::vector<EvalItem>& items);
    void require(Capability c, const char* what) const;

    std::unique_ptr<protocol::Transport> transport_;
    std::optional<RunnerSession> session_;
    std::mutex mutex_;
    bool closed_ = false;
};

}  // namespace steerkit
