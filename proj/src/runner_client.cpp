#include "steerkit/runner_client.hpp"

#include <algorithm>

#include "steerkit/errors.hpp"

namespace steerkit {

using protocol::Kind;
using protocol::Message;

std::string_view to_string(Capability c) {
    switch (c) {
        case Capability::steer: return "steer";
        case Capability::trace: return "trace";
        case Capability::ablate: return "ablate";
    }
    return "steer";
}

Capability parse_capability(std::string_view name) {
    if (name == "steer") return Capability::steer;
    if (name == "trace") return Capability::trace;
    if (name == "ablate") return Capability::ablate;
    throw ProtocolError("unknown runner capability \"" + std::string(name) + "\"");
}

namespace {

[[noreturn]] void raise_runner_error(const Message& m) {
    const auto& b = m.body;
    std::string item_id;
    if (b.contains("item_id") && b["item_id"].is_string()) item_id = b["item_id"].get<std::string>();
    throw RunnerError("runner error: " + b.value("message", std::string("(no message)")), item_id);
}

}  // namespace

void TraceAssembler::add(const Message& chunk) {
    const auto& b = chunk.body;
    try {
        const auto index = b.at("chunk_index").get<std::uint32_t>();
        const auto total = b.at("total_chunks").get<std::uint32_t>();
        const auto d_model = b.at("d_model").get<std::uint32_t>();
        if (d_model != expected_d_model_) {
            throw ProtocolError("trace chunk " + std::to_string(index) + " declares d_model " + std::to_string(d_model) +
                                " but the session reported " + std::to_string(expected_d_model_));
        }
        if (total_ && *total_ != total) throw ProtocolError("trace chunks disagree on total_chunks");
        total_ = total;
        if (index >= total) throw ProtocolError("trace chunk index " + std::to_string(index) + " out of range");
        if (chunks_.contains(index)) throw ProtocolError("duplicate trace chunk " + std::to_string(index));
        Chunk c{b.at("layer").get<std::uint32_t>(), b.at("token_offset").get<std::uint32_t>(),
                b.at("n_tokens").get<std::uint32_t>(), protocol::bytes_to_floats(chunk.binary)};
        if (c.values.size() != static_cast<std::size_t>(c.n_tokens) * d_model) {
            throw ProtocolError("trace chunk " + std::to_string(index) + " carries " + std::to_string(c.values.size()) +
                                " floats for " + std::to_string(c.n_tokens) + " tokens");
        }
        if (b.contains("header")) {
            if (header_) throw ProtocolError("more than one trace chunk carries the header");
            header_ = b["header"];
        }
        chunks_.emplace(index, std::move(c));
    } catch (const nlohmann::json::exception& e) {
        throw ProtocolError(std::string("malformed trace_chunk: ") + e.what());
    }
}

ActivationTrace TraceAssembler::finish() const {
    if (!complete()) throw ProtocolError("trace stream ended before all chunks arrived");
    if (!header_) throw ProtocolError("no trace chunk carried the trace header");
    const auto& h = *header_;
    std::vector<TokenRecord> tokens;
    std::vector<std::uint32_t> layers;
    std::map<std::string, std::string> metadata;
    std::string model_id;
    try {
        model_id = h.at("model_id").get<std::string>();
        layers = h.at("layers").get<std::vector<std::uint32_t>>();
        for (const auto& t : h.at("tokens")) {
            tokens.push_back(TokenRecord{t.at("text").get<std::string>(), t.at("token_index").get<std::uint32_t>(),
                                         parse_token_role(t.at("role").get<std::string>()),
                                         t.at("sentence_id").get<std::int32_t>()});
        }
        if (h.contains("metadata")) metadata = h["metadata"].get<std::map<std::string, std::string>>();
    } catch (const nlohmann::json::exception& e) {
        throw ProtocolError(std::string("malformed trace header: ") + e.what());
    }

    ActivationTrace trace(model_id, expected_d_model_, layers, std::move(tokens), std::move(metadata));
    const auto n_tokens = static_cast<std::uint32_t>(trace.tokens().size());
    std::map<std::uint32_t, std::vector<const Chunk*>> by_layer;
    for (const auto& [_, c] : chunks_) by_layer[c.layer].push_back(&c);
    for (auto layer : layers) {
        auto& list = by_layer[layer];
        std::sort(list.begin(), list.end(), [](const Chunk* a, const Chunk* b) { return a->token_offset < b->token_offset; });
        std::uint32_t next = 0;
        for (const auto* c : list) {
            if (c->token_offset > next) {
                throw ProtocolError("trace chunk gap in layer " + std::to_string(layer) + ": tokens [" +
                                    std::to_string(next) + ", " + std::to_string(c->token_offset) + ") missing");
            }
            if (c->token_offset < next) {
                throw ProtocolError("trace chunk overlap in layer " + std::to_string(layer) + " at token " +
                                    std::to_string(c->token_offset));
            }
            next = c->token_offset + c->n_tokens;
            if (next > n_tokens) throw ProtocolError("trace chunk extends past the token table in layer " + std::to_string(layer));
        }
        if (next != n_tokens) {
            throw ProtocolError("trace chunk gap in layer " + std::to_string(layer) + ": tokens [" + std::to_string(next) +
                                ", " + std::to_string(n_tokens) + ") missing");
        }
    }
    for (const auto& [layer, list] : by_layer) {
        if (!std::binary_search(layers.begin(), layers.end(), layer)) {
            throw ProtocolError("trace chunk for undeclared layer " + std::to_string(layer));
        }
        const auto lp = trace.layer_position(layer);
        for (const auto* c : list) {
            for (std::uint32_t t = 0; t < c->n_tokens; ++t) {
                auto row = trace.row(lp, c->token_offset + t);
                std::copy_n(c->values.begin() + static_cast<std::ptrdiff_t>(t) * expected_d_model_, expected_d_model_, row.begin());
            }
        }
    }
    try {
        trace.validate();
    } catch (const ValidationError& e) {
        throw ProtocolError(std::string("assembled trace is invalid: ") + e.what());
    }
    return trace;
}

RunnerClient::RunnerClient(std::unique_ptr<protocol::Transport> transport) : transport_(std::move(transport)) {}

RunnerClient::~RunnerClient() {
    try {
        close();
    } catch (...) {
    }
}

void RunnerClient::close() {
    std::lock_guard lock(mutex_);
    if (closed_ || !transport_) return;
    closed_ = true;
    try {
        protocol::send_message(*transport_, protocol::make_message(Kind::bye));
    } catch (const Error&) {
    }
    transport_->close();
}

const RunnerSession& RunnerClient::handshake() {
    std::lock_guard lock(mutex_);
    protocol::send_message(*transport_, protocol::make_message(Kind::hello, {{"protocol_version", protocol::kProtocolVersion}}));
    const auto reply = protocol::recv_message(*transport_);
    if (reply.kind() == Kind::error) raise_runner_error(reply);
    if (reply.kind() != Kind::hello) {
        throw ProtocolError("expected hello from runner, got " + std::string(protocol::to_string(reply.kind())));
    }
    const auto version = reply.body.value("protocol_version", -1);
    if (version != protocol::kProtocolVersion) {
        try {
            protocol::send_message(*transport_, protocol::make_message(Kind::bye, {{"reason", "protocol version mismatch"}}));
        } catch (const Error&) {
        }
        closed_ = true;
        throw ProtocolError("protocol version mismatch: engine speaks " + std::to_string(protocol::kProtocolVersion) +
                            ", runner speaks " + std::to_string(version));
    }
    RunnerSession s;
    try {
        s.model_id = reply.body.at("model_id").get<std::string>();
        s.n_layers = reply.body.at("n_layers").get<std::uint32_t>();
        s.d_model = reply.body.at("d_model").get<std::uint32_t>();
        for (const auto& c : reply.body.at("capabilities")) s.capabilities.insert(parse_capability(c.get<std::string>()));
    } catch (const nlohmann::json::exception& e) {
        throw ProtocolError(std::string("malformed hello from runner: ") + e.what());
    }
    session_ = std::move(s);
    return *session_;
}

const RunnerSession& RunnerClient::session() const {
    if (!session_) throw ProtocolError("runner session used before handshake");
    return *session_;
}

void RunnerClient::require(Capability c, const char* what) const {
    if (!session().can(c)) {
        throw ProtocolError(std::string("runner \"") + session().model_id + "\" lacks the '" + std::string(to_string(c)) +
                            "' capability needed for " + what);
    }
}

std::vector<EvalRecord> RunnerClient::collect_results(const std::vector<EvalItem>& items) {
    std::map<std::string, std::size_t> position;
    for (std::size_t i = 0; i < items.size(); ++i) position.emplace(items[i].item_id, i);
    std::vector<std::optional<std::string>> answers(items.size());
    if (items.empty()) return {};
    for (;;) {
        const auto m = protocol::recv_message(*transport_);
        if (m.kind() == Kind::error) raise_runner_error(m);
        if (m.kind() != Kind::eval_result) {
            throw ProtocolError("expected eval_result, got " + std::string(protocol::to_string(m.kind())));
        }
        std::string id;
        try {
            id = m.body.at("item_id").get<std::string>();
            const auto it = position.find(id);
            if (it == position.end()) throw ProtocolError("runner returned a result for unknown item " + id);
            if (answers[it->second]) throw ProtocolError("runner returned two results for item " + id);
            answers[it->second] = m.body.at("raw_answer").get<std::string>();
        } catch (const nlohmann::json::exception& e) {
            throw ProtocolError(std::string("malformed eval_result: ") + e.what());
        }
        if (m.body.value("remaining", 0) <= 0) break;
    }
    std::vector<std::string> missing;
    std::vector<EvalRecord> records;
    records.reserve(items.size());
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (!answers[i]) {
            missing.push_back(items[i].item_id);
            continue;
        }
        records.push_back(score_answer(items[i], *answers[i]));
    }
    if (!missing.empty()) throw IncompleteResultsError(std::move(missing));
    return records;
}

std::vector<EvalRecord> RunnerClient::run_eval(const std::vector<EvalItem>& items, const SteeringPlan* plan,
                                               const std::optional<std::string>& prompt_prefix) {
    std::lock_guard lock(mutex_);
    if (plan != nullptr) {
        require(Capability::steer, "steered evaluation");
        if (plan->vector.dim() != session().d_model) {
            throw ValidationError("plan vector dimension " + std::to_string(plan->vector.dim()) +
                                  " differs from runner d_model " + std::to_string(session().d_model));
        }
        if (plan->layer >= session().n_layers) {
            throw ValidationError("plan layer " + std::to_string(plan->layer) + " is outside the runner's " +
                                  std::to_string(session().n_layers) + " layers");
        }
    } else {
        (void)session();
    }
    nlohmann::json body = nlohmann::json::object();
    body["items"] = nlohmann::json::array();
    for (const auto& item : items) body["items"].push_back(item_to_json(item, false));
    body["prompt_prefix"] = prompt_prefix ? nlohmann::json(*prompt_prefix) : nlohmann::json(nullptr);
    std::vector<std::uint8_t> binary;
    if (plan != nullptr) {
        body["plan"] = plan_to_json(*plan);
        binary = plan_vector_bytes(*plan);
    } else {
        body["plan"] = nullptr;
    }
    protocol::send_message(*transport_, protocol::make_message(Kind::run_eval, std::move(body), std::move(binary)));
    return collect_results(items);
}

ActivationTrace RunnerClient::request_trace(const ConceptSet& concept_set, const std::vector<std::uint32_t>& layers) {
    std::lock_guard lock(mutex_);
    require(Capability::trace, "trace export");
    nlohmann::json body = {{"taxonomy", std::string(to_string(concept_set.taxonomy))},
                           {"definition", concept_set.definition},
                           {"layers", layers},
                           {"sentences", nlohmann::json::array()}};
    for (const auto& p : concept_set.pairs) {
        body["sentences"].push_back({{"sentence_id", p.sentence_id}, {"sentence", p.sentence}, {"anchor", p.anchor}});
    }
    protocol::send_message(*transport_, protocol::make_message(Kind::dump_trace, std::move(body)));

    TraceAssembler assembler(session().d_model);
    while (!assembler.complete()) {
        const auto m = protocol::recv_message(*transport_);
        if (m.kind() == Kind::error) raise_runner_error(m);
        if (m.kind() != Kind::trace_chunk) {
            throw ProtocolError("expected trace_chunk, got " + std::string(protocol::to_string(m.kind())));
        }
        assembler.add(m);
    }
    auto trace = assembler.finish();
    for (auto layer : layers) {
        if (!trace.has_layer(layer)) throw ProtocolError("runner trace is missing requested layer " + std::to_string(layer));
    }
    return trace;
}

double RunnerClient::ablate_after_layer(const std::vector<EvalItem>& items, std::uint32_t layer) {
    std::lock_guard lock(mutex_);
    require(Capability::ablate, "attention ablation");
    nlohmann::json body = {{"layer", layer}, {"items", nlohmann::json::array()}};
    for (const auto& item : items) body["items"].push_back(item_to_json(item, false));
    protocol::send_message(*transport_, protocol::make_message(Kind::ablate_attention, std::move(body)));
    return accuracy(collect_results(items));
}

}  // namespace steerkit
