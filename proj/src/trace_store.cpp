#include "steerkit/trace_store.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "steerkit/binary_io.hpp"
#include "steerkit/errors.hpp"

namespace steerkit {

namespace {

constexpr std::uint16_t kTraceVersion = 1;
constexpr std::uint8_t kMaxRole = static_cast<std::uint8_t>(TokenRole::other);

}  // namespace

std::string_view to_string(TokenRole role) {
    switch (role) {
        case TokenRole::image: return "image";
        case TokenRole::text: return "text";
        case TokenRole::output: return "output";
        case TokenRole::anchor: return "anchor";
        case TokenRole::control: return "control";
        case TokenRole::other: return "other";
    }
    return "other";
}

TokenRole parse_token_role(std::string_view name) {
    for (std::uint8_t r = 0; r <= kMaxRole; ++r) {
        if (to_string(static_cast<TokenRole>(r)) == name) return static_cast<TokenRole>(r);
    }
    throw ValidationError("unknown token role \"" + std::string(name) + "\"");
}

std::string sentence_key(std::int32_t sentence_id) { return "sentence." + std::to_string(sentence_id); }

ActivationTrace::ActivationTrace(std::string model_id, std::uint32_t d_model, std::vector<std::uint32_t> layers,
                                 std::vector<TokenRecord> tokens, std::map<std::string, std::string> metadata)
    : model_id_(std::move(model_id)),
      d_model_(d_model),
      layers_(std::move(layers)),
      tokens_(std::move(tokens)),
      metadata_(std::move(metadata)),
      data_(layers_.size() * tokens_.size() * static_cast<std::size_t>(d_model_), 0.0f) {}

bool ActivationTrace::has_layer(std::uint32_t layer) const noexcept {
    return std::binary_search(layers_.begin(), layers_.end(), layer);
}

std::size_t ActivationTrace::layer_position(std::uint32_t layer) const {
    const auto it = std::lower_bound(layers_.begin(), layers_.end(), layer);
    if (it == layers_.end() || *it != layer) {
        throw ValidationError("layer " + std::to_string(layer) + " not present in trace");
    }
    return static_cast<std::size_t>(it - layers_.begin());
}

std::size_t ActivationTrace::token_position(std::uint32_t token_index) const {
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
        if (tokens_[i].token_index == token_index) return i;
    }
    throw ValidationError("token_index " + std::to_string(token_index) + " not present in trace");
}

std::span<float> ActivationTrace::row(std::size_t layer_pos, std::size_t token_pos) {
    const std::size_t d = d_model_;
    return std::span<float>(data_).subspan((layer_pos * tokens_.size() + token_pos) * d, d);
}

std::span<const float> ActivationTrace::row(std::size_t layer_pos, std::size_t token_pos) const {
    const std::size_t d = d_model_;
    return std::span<const float>(data_).subspan((layer_pos * tokens_.size() + token_pos) * d, d);
}

std::span<const float> ActivationTrace::layer_block(std::size_t layer_pos) const {
    const std::size_t n = tokens_.size() * d_model_;
    return std::span<const float>(data_).subspan(layer_pos * n, n);
}

std::span<float> ActivationTrace::layer_block(std::size_t layer_pos) {
    const std::size_t n = tokens_.size() * d_model_;
    return std::span<float>(data_).subspan(layer_pos * n, n);
}

void ActivationTrace::validate() const {
    if (d_model_ == 0) throw ValidationError("trace d_model must be positive");
    for (std::size_t i = 1; i < layers_.size(); ++i) {
        if (layers_[i] <= layers_[i - 1]) throw ValidationError("trace layers must be strictly increasing");
    }
    std::set<std::uint32_t> seen;
    for (const auto& tok : tokens_) {
        if (!seen.insert(tok.token_index).second) {
            throw ValidationError("duplicate token_index " + std::to_string(tok.token_index));
        }
        if (static_cast<std::uint8_t>(tok.role) > kMaxRole) throw ValidationError("invalid token role");
        if (tok.role == TokenRole::anchor && !metadata_.contains(sentence_key(tok.sentence_id))) {
            throw ValidationError("anchor token " + std::to_string(tok.token_index) + " refers to sentence " +
                                  std::to_string(tok.sentence_id) + " missing from trace metadata");
        }
    }
    if (data_.size() != layers_.size() * tokens_.size() * static_cast<std::size_t>(d_model_)) {
        throw ValidationError("activation buffer size does not match layers x tokens x d_model");
    }
    for (std::size_t i = 0; i < data_.size(); ++i) {
        if (!std::isfinite(data_[i])) {
            const std::size_t per_layer = tokens_.size() * d_model_;
            throw ValidationError("non-finite activation at layer " + std::to_string(layers_[i / per_layer]) +
                                  ", token position " + std::to_string((i % per_layer) / d_model_));
        }
    }
}

bool ActivationTrace::operator==(const ActivationTrace& other) const {
    return model_id_ == other.model_id_ && d_model_ == other.d_model_ && layers_ == other.layers_ &&
           tokens_ == other.tokens_ && metadata_ == other.metadata_ && io::bit_equal(data_, other.data_);
}

std::uint64_t write_trace(const ActivationTrace& trace, std::ostream& sink) {
    trace.validate();
    io::ByteWriter w(sink);
    w.magic("STRC");
    w.u16(kTraceVersion);
    w.string(trace.model_id());
    w.u32(trace.d_model());
    w.u32(static_cast<std::uint32_t>(trace.layers().size()));
    for (auto layer : trace.layers()) w.u32(layer);
    w.u32(static_cast<std::uint32_t>(trace.tokens().size()));
    for (const auto& tok : trace.tokens()) {
        w.string(tok.text);
        w.u32(tok.token_index);
        w.u8(static_cast<std::uint8_t>(tok.role));
        w.i32(tok.sentence_id);
    }
    w.u32(static_cast<std::uint32_t>(trace.metadata().size()));
    for (const auto& [key, value] : trace.metadata()) {
        w.string(key);
        w.string(value);
    }
    w.f32_array(trace.raw());
    return w.count();
}

ActivationTrace read_trace(std::istream& source) {
    io::ByteReader r(source, "STRC");
    r.expect_magic("STRC");
    const auto version_offset = r.offset();
    const auto version = r.u16();
    if (version != kTraceVersion) throw UnsupportedVersionError("STRC", version, version_offset);

    auto model_id = r.string();
    const auto d_model = r.u32();
    if (d_model == 0) r.fail("d_model is zero");
    const auto n_layers = r.u32();
    if (n_layers > (1u << 20)) r.fail("implausible layer count " + std::to_string(n_layers));
    std::vector<std::uint32_t> layers(n_layers);
    for (auto& layer : layers) layer = r.u32();

    const auto n_tokens = r.u32();
    if (n_tokens > (1u << 26)) r.fail("implausible token count " + std::to_string(n_tokens));
    std::vector<TokenRecord> tokens;
    tokens.reserve(n_tokens);
    for (std::uint32_t i = 0; i < n_tokens; ++i) {
        TokenRecord tok;
        tok.text = r.string();
        tok.token_index = r.u32();
        const auto role_offset = r.offset();
        const auto role = r.u8();
        if (role > kMaxRole) throw ParseError("STRC: invalid token role " + std::to_string(role), role_offset);
        tok.role = static_cast<TokenRole>(role);
        tok.sentence_id = r.i32();
        tokens.push_back(std::move(tok));
    }

    const auto n_meta = r.u32();
    std::map<std::string, std::string> metadata;
    for (std::uint32_t i = 0; i < n_meta; ++i) {
        auto key = r.string();
        metadata[std::move(key)] = r.string();
    }

    ActivationTrace trace(std::move(model_id), d_model, std::move(layers), std::move(tokens), std::move(metadata));
    for (std::size_t l = 0; l < trace.layers().size(); ++l) {
        r.f32_array(trace.layer_block(l));
    }
    r.expect_end();
    const auto end_offset = r.offset();
    try {
        trace.validate();
    } catch (const ValidationError& e) {
        throw ParseError(std::string("STRC: ") + e.what(), end_offset);
    }
    return trace;
}

void save_trace(const ActivationTrace& trace, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + path + " for writing");
    write_trace(trace, out);
}

ActivationTrace load_trace(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open trace " + path);
    return read_trace(in);
}

}  // namespace steerkit
