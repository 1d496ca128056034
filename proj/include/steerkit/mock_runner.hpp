#pragma once

// Deterministic in-process runner used by tests, the acceptance suite and the
// `steerkit mock-runner` command. Behaviour is scripted in JSON:
//
// {
//   "model_id": "mock", "n_layers": 26, "d_model": 16, "protocol_version": 1, "seed": 0,
//   "capabilities": ["steer", "trace", "ablate"],
//   "default_accuracy": 0.5,
//   "answer_key": {"item-1": "B", ...},
//   "rules": [
//     {"layer": 5, "alpha": 1.0, "classes": "both", "accuracy": 0.9},
//     {"prompt": "Count carefully.", "accuracy": 0.7},
//     {"baseline": true, "answers": {"item-1": "(B) right"}}
//   ],
//   "ablation_curve": {"0": 0.25, "10": 0.6},
//   "trace": {"planted_scale": 4.0, "noise": 1.0, "chunk_tokens": 8, "shuffle_chunks": false,
//             "split_anchor_subtokens": false, "corrupt": "none|gap|overlap|d_model"},
//   "fail_on_request": 3,     // 0-based eval request index that gets an error reply
//   "drop_results": 1         // omit the last N results of every eval request
// }
//
// A request's condition is (plan layer/alpha/classes, prompt prefix, ablation layer).
// Plans with alpha 0 and ablation at or beyond the last layer count as absent. The first
// rule whose every given field matches decides; fields a rule omits are wildcards, and
// "baseline": true matches only requests with none of the three. An "accuracy" p marks
// round(p·n) of the n requested items correct, chosen by a seeded per-item hash.

#include <atomic>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "steerkit/eval_types.hpp"
#include "steerkit/protocol.hpp"
#include "steerkit/runner_client.hpp"
#include "steerkit/trace_store.hpp"

namespace steerkit {

struct MockRule {
    std::optional<std::uint32_t> layer;
    std::optional<double> alpha;
    std::optional<std::string> classes;
    std::optional<std::string> prompt;
    std::optional<std::uint32_t> ablate;
    bool baseline = false;
    std::optional<double> accuracy;
    std::map<std::string, std::string> answers;
};

struct MockTraceOptions {
    double planted_scale = 4.0;
    double noise = 1.0;
    std::uint32_t chunk_tokens = 8;
    bool shuffle_chunks = false;
    bool split_anchor_subtokens = false;
    std::string corrupt = "none";
};

struct MockScript {
    std::string model_id = "mock";
    std::uint32_t n_layers = 26;
    std::uint32_t d_model = 16;
    int protocol_version = protocol::kProtocolVersion;
    std::vector<std::string> capabilities{"steer", "trace", "ablate"};
    std::uint64_t seed = 0;
    double default_accuracy = 0.5;
    std::map<std::string, std::string> answer_key;
    std::vector<MockRule> rules;
    std::map<std::uint32_t, double> ablation_curve;
    MockTraceOptions trace;
    std::optional<std::size_t> fail_on_request;
    std::size_t drop_results = 0;

    static MockScript from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
    static MockScript load(const std::string& path);

    // Fills answer_key from the items' gold answers.
    MockScript& with_answers_for(const std::vector<EvalItem>& items);
};

class MockRunner {
public:
    explicit MockRunner(MockScript script) : script_(std::move(script)) {}

    // Serve this exact trace for every dump_trace request.
    void set_fixed_trace(ActivationTrace trace) { fixed_trace_ = std::move(trace); }

    // Handles requests until bye or end of stream.
    void serve(protocol::Transport& transport);

    // Unit direction the mock plants on anchor tokens for a taxonomy.
    static std::vector<double> planted_direction(const std::string& taxonomy, std::uint32_t d_model, std::uint64_t seed);

    // Synthetic trace the mock returns for a dump_trace body.
    ActivationTrace synthesize_trace(const nlohmann::json& request) const;

private:
    void handle_eval(protocol::Transport& t, const protocol::Message& m, std::optional<std::uint32_t> ablate_layer);
    void handle_trace(protocol::Transport& t, const protocol::Message& m);

    MockScript script_;
    std::optional<ActivationTrace> fixed_trace_;
    std::size_t eval_requests_ = 0;
};

// A MockRunner serving on a background thread behind a connected RunnerClient.
class LocalMockRunner {
public:
    explicit LocalMockRunner(MockScript script, std::optional<ActivationTrace> fixed_trace = std::nullopt);
    ~LocalMockRunner();
    LocalMockRunner(const LocalMockRunner&) = delete;
    LocalMockRunner& operator=(const LocalMockRunner&) = delete;

    RunnerClient& client() { return *client_; }
    // Convenience: handshake and return the client.
    RunnerClient& connect();

private:
    std::unique_ptr<protocol::Transport> runner_side_;
    std::unique_ptr<RunnerClient> client_;
    std::unique_ptr<MockRunner> runner_;
    std::thread thread_;
};

}  // namespace steerkit
