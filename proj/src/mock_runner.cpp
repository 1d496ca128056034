#include "steerkit/mock_runner.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>

#include "steerkit/errors.hpp"
#include "steerkit/rng.hpp"
#include "steerkit/text_util.hpp"

namespace steerkit {

using protocol::Kind;
using protocol::Message;

namespace {

struct Condition {
    bool has_plan = false;
    std::uint32_t layer = 0;
    double alpha = 0.0;
    std::string classes;
    std::optional<std::string> prompt;
    std::optional<std::uint32_t> ablate;
};

bool alpha_equal(double a, double b) { return std::abs(a - b) <= 1e-9 * std::max(1.0, std::abs(b)); }

bool matches(const MockRule& r, const Condition& c) {
    if (r.baseline) return !c.has_plan && !c.prompt && !c.ablate;
    if (r.layer && !(c.has_plan && c.layer == *r.layer)) return false;
    if (r.alpha && !(c.has_plan && alpha_equal(c.alpha, *r.alpha))) return false;
    if (r.classes && !(c.has_plan && c.classes == *r.classes)) return false;
    if (r.prompt && !(c.prompt && *c.prompt == *r.prompt)) return false;
    if (r.ablate && !(c.ablate && *c.ablate == *r.ablate)) return false;
    return true;
}

std::string wrong_answer(const EvalItem& item, const std::string& gold) {
    if (item.format.kind == AnswerKind::numeric) {
        try {
            return std::to_string(std::stoll(gold) + 1);
        } catch (const std::exception&) {
            return "-1";
        }
    }
    const auto n = item.format.choices.size();
    for (std::size_t i = 0; i < n; ++i) {
        if (choice_letter(i) == gold) return n > 1 ? choice_letter((i + 1) % n) : "none";
    }
    return "none";
}

void send_error(protocol::Transport& t, const std::string& message, const std::string& item_id = {}) {
    nlohmann::json body = {{"message", message}};
    if (!item_id.empty()) body["item_id"] = item_id;
    protocol::send_message(t, protocol::make_message(Kind::error, std::move(body)));
}

// Splits a word into leading punctuation, core and trailing punctuation tokens.
std::vector<std::string> word_pieces(const std::string& word) {
    auto is_punct = [](char c) { return std::ispunct(static_cast<unsigned char>(c)) != 0 && c != '\'' && c != '-'; };
    std::size_t b = 0;
    std::size_t e = word.size();
    std::vector<std::string> pieces;
    while (b < e && is_punct(word[b])) pieces.emplace_back(1, word[b++]);
    std::vector<std::string> tail;
    while (e > b && is_punct(word[e - 1])) tail.emplace_back(1, word[--e]);
    if (e > b) pieces.push_back(word.substr(b, e - b));
    pieces.insert(pieces.end(), tail.rbegin(), tail.rend());
    return pieces;
}

nlohmann::json trace_header(const ActivationTrace& trace) {
    nlohmann::json tokens = nlohmann::json::array();
    for (const auto& t : trace.tokens()) {
        tokens.push_back({{"text", t.text},
                          {"token_index", t.token_index},
                          {"role", std::string(to_string(t.role))},
                          {"sentence_id", t.sentence_id}});
    }
    return {{"model_id", trace.model_id()}, {"layers", trace.layers()}, {"tokens", tokens}, {"metadata", trace.metadata()}};
}

}  // namespace

MockScript MockScript::from_json(const nlohmann::json& j) {
    MockScript s;
    s.model_id = j.value("model_id", s.model_id);
    s.n_layers = j.value("n_layers", s.n_layers);
    s.d_model = j.value("d_model", s.d_model);
    s.protocol_version = j.value("protocol_version", s.protocol_version);
    if (j.contains("capabilities")) s.capabilities = j["capabilities"].get<std::vector<std::string>>();
    s.seed = j.value("seed", s.seed);
    s.default_accuracy = j.value("default_accuracy", s.default_accuracy);
    if (j.contains("answer_key")) s.answer_key = j["answer_key"].get<std::map<std::string, std::string>>();
    if (j.contains("rules")) {
        for (const auto& r : j["rules"]) {
            MockRule rule;
            if (r.contains("layer")) rule.layer = r["layer"].get<std::uint32_t>();
            if (r.contains("alpha")) rule.alpha = r["alpha"].get<double>();
            if (r.contains("classes")) rule.classes = to_string(parse_token_classes(r["classes"].get<std::string>()));
            if (r.contains("prompt")) rule.prompt = r["prompt"].get<std::string>();
            if (r.contains("ablate")) rule.ablate = r["ablate"].get<std::uint32_t>();
            rule.baseline = r.value("baseline", false);
            if (r.contains("accuracy")) rule.accuracy = r["accuracy"].get<double>();
            if (r.contains("answers")) rule.answers = r["answers"].get<std::map<std::string, std::string>>();
            s.rules.push_back(std::move(rule));
        }
    }
    if (j.contains("ablation_curve")) {
        for (const auto& [k, v] : j["ablation_curve"].items()) s.ablation_curve[static_cast<std::uint32_t>(std::stoul(k))] = v.get<double>();
    }
    if (j.contains("trace")) {
        const auto& t = j["trace"];
        s.trace.planted_scale = t.value("planted_scale", s.trace.planted_scale);
        s.trace.noise = t.value("noise", s.trace.noise);
        s.trace.chunk_tokens = t.value("chunk_tokens", s.trace.chunk_tokens);
        s.trace.shuffle_chunks = t.value("shuffle_chunks", s.trace.shuffle_chunks);
        s.trace.split_anchor_subtokens = t.value("split_anchor_subtokens", s.trace.split_anchor_subtokens);
        s.trace.corrupt = t.value("corrupt", s.trace.corrupt);
    }
    if (j.contains("fail_on_request")) s.fail_on_request = j["fail_on_request"].get<std::size_t>();
    s.drop_results = j.value("drop_results", s.drop_results);
    if (s.trace.chunk_tokens == 0) throw ConfigError("mock trace chunk_tokens must be positive");
    return s;
}

nlohmann::json MockScript::to_json() const {
    nlohmann::json j = {{"model_id", model_id},         {"n_layers", n_layers},
                        {"d_model", d_model},           {"protocol_version", protocol_version},
                        {"capabilities", capabilities}, {"seed", seed},
                        {"default_accuracy", default_accuracy}, {"answer_key", answer_key},
                        {"drop_results", drop_results}};
    j["rules"] = nlohmann::json::array();
    for (const auto& r : rules) {
        nlohmann::json o = nlohmann::json::object();
        if (r.layer) o["layer"] = *r.layer;
        if (r.alpha) o["alpha"] = *r.alpha;
        if (r.classes) o["classes"] = *r.classes;
        if (r.prompt) o["prompt"] = *r.prompt;
        if (r.ablate) o["ablate"] = *r.ablate;
        if (r.baseline) o["baseline"] = true;
        if (r.accuracy) o["accuracy"] = *r.accuracy;
        if (!r.answers.empty()) o["answers"] = r.answers;
        j["rules"].push_back(std::move(o));
    }
    nlohmann::json curve = nlohmann::json::object();
    for (const auto& [l, a] : ablation_curve) curve[std::to_string(l)] = a;
    j["ablation_curve"] = curve;
    j["trace"] = {{"planted_scale", trace.planted_scale},
                  {"noise", trace.noise},
                  {"chunk_tokens", trace.chunk_tokens},
                  {"shuffle_chunks", trace.shuffle_chunks},
                  {"split_anchor_subtokens", trace.split_anchor_subtokens},
                  {"corrupt", trace.corrupt}};
    if (fail_on_request) j["fail_on_request"] = *fail_on_request;
    return j;
}

MockScript MockScript::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open mock script " + path);
    try {
        return from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("invalid mock script " + path + ": " + e.what());
    }
}

MockScript& MockScript::with_answers_for(const std::vector<EvalItem>& items) {
    for (const auto& item : items) answer_key[item.item_id] = item.gold;
    return *this;
}

std::vector<double> MockRunner::planted_direction(const std::string& taxonomy, std::uint32_t d_model, std::uint64_t seed) {
    rng::Generator g(rng::derive_seed(seed, rng::hash_string(taxonomy)));
    std::vector<double> v(d_model);
    double norm = 0.0;
    for (auto& x : v) {
        x = g.normal();
        norm += x * x;
    }
    norm = std::sqrt(norm);
    for (auto& x : v) x /= norm;
    return v;
}

ActivationTrace MockRunner::synthesize_trace(const nlohmann::json& request) const {
    const auto taxonomy = request.value("taxonomy", std::string("counting"));
    auto layers = request.at("layers").get<std::vector<std::uint32_t>>();
    std::sort(layers.begin(), layers.end());
    layers.erase(std::unique(layers.begin(), layers.end()), layers.end());
    for (auto l : layers) {
        if (l >= script_.n_layers) throw ValidationError("requested layer " + std::to_string(l) + " exceeds the model's layers");
    }

    std::vector<TokenRecord> tokens;
    std::map<std::string, std::string> metadata{{"taxonomy", taxonomy}};
    std::uint32_t next_index = 0;
    for (const auto& s : request.at("sentences")) {
        const auto sid = s.at("sentence_id").get<std::int32_t>();
        const auto sentence = s.at("sentence").get<std::string>();
        const auto anchor_words = text::split_whitespace(s.at("anchor").get<std::string>());
        metadata[sentence_key(sid)] = sentence;

        std::vector<std::string> pieces;
        for (const auto& w : text::split_whitespace(sentence)) {
            for (auto& p : word_pieces(w)) pieces.push_back(std::move(p));
        }
        std::size_t anchor_at = pieces.size();
        for (std::size_t i = 0; i + anchor_words.size() <= pieces.size() && !anchor_words.empty(); ++i) {
            if (std::equal(anchor_words.begin(), anchor_words.end(), pieces.begin() + static_cast<std::ptrdiff_t>(i))) {
                anchor_at = i;
                break;
            }
        }
        for (std::size_t i = 0; i < pieces.size(); ++i) {
            const bool is_anchor = i >= anchor_at && i < anchor_at + anchor_words.size();
            const auto role = is_anchor ? TokenRole::anchor : TokenRole::text;
            if (is_anchor && script_.trace.split_anchor_subtokens && pieces[i].size() >= 4) {
                const auto half = pieces[i].size() / 2;
                tokens.push_back({pieces[i].substr(0, half), next_index++, role, sid});
                tokens.push_back({pieces[i].substr(half), next_index++, role, sid});
            } else {
                tokens.push_back({pieces[i], next_index++, role, sid});
            }
        }
    }

    ActivationTrace trace(script_.model_id, script_.d_model, layers, std::move(tokens), std::move(metadata));
    const auto dir = planted_direction(taxonomy, script_.d_model, script_.seed);
    for (std::size_t lp = 0; lp < layers.size(); ++lp) {
        rng::Generator bg(rng::derive_seed(script_.seed, 0x1000 + layers[lp]));
        std::vector<double> background(script_.d_model);
        for (auto& b : background) b = 2.0 * bg.normal();
        for (std::size_t tp = 0; tp < trace.tokens().size(); ++tp) {
            rng::Generator g(rng::derive_seed(rng::derive_seed(script_.seed, layers[lp]), tp));
            const bool anchor = trace.tokens()[tp].role == TokenRole::anchor;
            auto row = trace.row(lp, tp);
            for (std::size_t d = 0; d < row.size(); ++d) {
                double v = background[d] + script_.trace.noise * g.normal();
                if (anchor) v += script_.trace.planted_scale * dir[d];
                row[d] = static_cast<float>(v);
            }
        }
    }
    return trace;
}

void MockRunner::handle_trace(protocol::Transport& t, const Message& m) {
    if (std::find(script_.capabilities.begin(), script_.capabilities.end(), "trace") == script_.capabilities.end()) {
        send_error(t, "mock runner lacks the trace capability");
        return;
    }
    ActivationTrace trace;
    try {
        trace = fixed_trace_ ? *fixed_trace_ : synthesize_trace(m.body);
    } catch (const std::exception& e) {
        send_error(t, e.what());
        return;
    }

    struct Planned {
        std::uint32_t layer_pos, offset, count;
    };
    std::vector<Planned> plan;
    const auto n_tokens = static_cast<std::uint32_t>(trace.tokens().size());
    for (std::uint32_t lp = 0; lp < trace.layers().size(); ++lp) {
        if (n_tokens == 0) {
            plan.push_back({lp, 0, 0});
            continue;
        }
        for (std::uint32_t off = 0; off < n_tokens; off += script_.trace.chunk_tokens) {
            plan.push_back({lp, off, std::min(script_.trace.chunk_tokens, n_tokens - off)});
        }
    }
    std::vector<Message> messages;
    const auto d_model = trace.d_model();
    for (std::size_t i = 0; i < plan.size(); ++i) {
        const auto& p = plan[i];
        std::vector<float> values;
        values.reserve(static_cast<std::size_t>(p.count) * d_model);
        for (std::uint32_t k = 0; k < p.count; ++k) {
            const auto row = trace.row(p.layer_pos, p.offset + k);
            values.insert(values.end(), row.begin(), row.end());
        }
        std::uint32_t offset = p.offset;
        std::uint32_t declared_d = d_model;
        if (i == 1 && script_.trace.corrupt == "gap") offset += 1;
        if (i == 1 && script_.trace.corrupt == "overlap" && offset > 0) offset -= 1;
        if (script_.trace.corrupt == "d_model") {
            declared_d = d_model + 1;
            values.resize(static_cast<std::size_t>(p.count) * declared_d, 0.0f);
        }
        nlohmann::json body = {{"chunk_index", i},       {"total_chunks", plan.size()},
                               {"layer", trace.layers()[p.layer_pos]}, {"token_offset", offset},
                               {"n_tokens", p.count},    {"d_model", declared_d}};
        if (i == 0) body["header"] = trace_header(trace);
        messages.push_back(protocol::make_message(Kind::trace_chunk, std::move(body), protocol::floats_to_bytes(values)));
    }
    if (script_.trace.shuffle_chunks) {
        rng::Generator g(rng::derive_seed(script_.seed, 0xC4C4));
        g.shuffle(messages);
    }
    for (const auto& msg : messages) protocol::send_message(t, msg);
}

void MockRunner::handle_eval(protocol::Transport& t, const Message& m, std::optional<std::uint32_t> ablate_layer) {
    const auto request_index = eval_requests_++;
    std::vector<EvalItem> items;
    for (const auto& j : m.body.at("items")) items.push_back(item_from_json(j));
    if (script_.fail_on_request && *script_.fail_on_request == request_index) {
        send_error(t, "scripted runner failure", items.empty() ? std::string() : items.front().item_id);
        return;
    }

    Condition cond;
    const auto has = [&](const char* cap) {
        return std::find(script_.capabilities.begin(), script_.capabilities.end(), cap) != script_.capabilities.end();
    };
    if (m.body.contains("plan") && !m.body["plan"].is_null()) {
        if (!has("steer")) {
            send_error(t, "mock runner lacks the steer capability");
            return;
        }
        const auto plan = plan_from_wire(m.body["plan"], m.binary);
        if (plan.layer >= script_.n_layers) {
            send_error(t, "plan layer " + std::to_string(plan.layer) + " is out of range");
            return;
        }
        if (plan.alpha != 0.0) {
            cond.has_plan = true;
            cond.layer = plan.layer;
            cond.alpha = plan.alpha;
            cond.classes = to_string(plan.classes());
        }
    }
    if (m.body.contains("prompt_prefix") && m.body["prompt_prefix"].is_string()) {
        cond.prompt = m.body["prompt_prefix"].get<std::string>();
    }
    if (ablate_layer) {
        if (!has("ablate")) {
            send_error(t, "mock runner lacks the ablate capability");
            return;
        }
        if (*ablate_layer + 1 < script_.n_layers) cond.ablate = *ablate_layer;
    }

    const MockRule* rule = nullptr;
    for (const auto& r : script_.rules) {
        if (matches(r, cond)) {
            rule = &r;
            break;
        }
    }
    double p = script_.default_accuracy;
    if (rule != nullptr && rule->accuracy) {
        p = *rule->accuracy;
    } else if (cond.ablate && script_.ablation_curve.contains(*cond.ablate)) {
        p = script_.ablation_curve.at(*cond.ablate);
    }

    std::vector<std::string> answers(items.size());
    std::vector<std::size_t> generated;
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (rule != nullptr) {
            if (auto it = rule->answers.find(items[i].item_id); it != rule->answers.end()) {
                answers[i] = it->second;
                continue;
            }
        }
        generated.push_back(i);
    }
    std::sort(generated.begin(), generated.end(), [&](std::size_t a, std::size_t b) {
        const auto ha = rng::hash_string(items[a].item_id, script_.seed);
        const auto hb = rng::hash_string(items[b].item_id, script_.seed);
        return ha != hb ? ha < hb : items[a].item_id < items[b].item_id;
    });
    const auto n_correct = static_cast<std::size_t>(std::llround(std::clamp(p, 0.0, 1.0) * static_cast<double>(generated.size())));
    for (std::size_t k = 0; k < generated.size(); ++k) {
        const auto& item = items[generated[k]];
        const auto key = script_.answer_key.find(item.item_id);
        if (key == script_.answer_key.end()) {
            send_error(t, "mock runner has no answer key entry", item.item_id);
            return;
        }
        answers[generated[k]] = k < n_correct ? key->second : wrong_answer(item, key->second);
    }

    const auto n_send = items.size() > script_.drop_results ? items.size() - script_.drop_results : 0;
    for (std::size_t i = 0; i < n_send; ++i) {
        protocol::send_message(t, protocol::make_message(Kind::eval_result, {{"item_id", items[i].item_id},
                                                                             {"raw_answer", answers[i]},
                                                                             {"remaining", n_send - 1 - i}}));
    }
    if (n_send == 0 && !items.empty()) {
        send_error(t, "mock runner dropped every result");
    }
}

void MockRunner::serve(protocol::Transport& transport) {
    for (;;) {
        Message m;
        try {
            m = protocol::recv_message(transport);
        } catch (const std::exception&) {
            return;
        }
        try {
            switch (m.kind()) {
                case Kind::hello:
                    protocol::send_message(transport, protocol::make_message(Kind::hello, {{"protocol_version", script_.protocol_version},
                                                                                          {"model_id", script_.model_id},
                                                                                          {"n_layers", script_.n_layers},
                                                                                          {"d_model", script_.d_model},
                                                                                          {"capabilities", script_.capabilities}}));
                    break;
                case Kind::run_eval: handle_eval(transport, m, std::nullopt); break;
                case Kind::ablate_attention: handle_eval(transport, m, m.body.at("layer").get<std::uint32_t>()); break;
                case Kind::dump_trace: handle_trace(transport, m); break;
                case Kind::bye: return;
                default: send_error(transport, "unexpected message kind " + std::string(protocol::to_string(m.kind())));
            }
        } catch (const std::exception& e) {
            try {
                send_error(transport, e.what());
            } catch (const std::exception&) {
                return;
            }
        }
    }
}

LocalMockRunner::LocalMockRunner(MockScript script, std::optional<ActivationTrace> fixed_trace) {
    auto [engine, runner] = protocol::make_pipe_pair();
    runner_side_ = std::move(runner);
    runner_ = std::make_unique<MockRunner>(std::move(script));
    if (fixed_trace) runner_->set_fixed_trace(std::move(*fixed_trace));
    client_ = std::make_unique<RunnerClient>(std::move(engine));
    thread_ = std::thread([this] { runner_->serve(*runner_side_); });
}

LocalMockRunner::~LocalMockRunner() {
    client_->close();
    if (thread_.joinable()) thread_.join();
}

RunnerClient& LocalMockRunner::connect() {
    client_->handshake();
    return *client_;
}

}  // namespace steerkit
