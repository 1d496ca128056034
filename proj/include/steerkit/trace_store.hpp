#pragma once

// Activation traces exported by a model runner and their "STRC" container.
//
// Layout (little-endian throughout):
//   "STRC" u16 version=1
//   model_id      u32 len + UTF-8
//   d_model       u32
//   layers        u32 count, u32 each (strictly increasing)
//   tokens        u32 count, then per token:
//                   text (u32 len + UTF-8), u32 token_index, u8 role, i32 sentence_id
//   metadata      u32 count, then (key, value) length-prefixed strings, sorted by key
//   activations   float32 rows, layer-major then token order, d_model floats per row
//
// Suggested on-disk path: <taxonomy>/<model_id>/layer_<l>.strc

#include <cstdint>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace steerkit {

enum class TokenRole : std::uint8_t { image = 0, text = 1, output = 2, anchor = 3, control = 4, other = 5 };

std::string_view to_string(TokenRole role);
TokenRole parse_token_role(std::string_view name);

struct TokenRecord {
    std::string text;
    std::uint32_t token_index = 0;
    TokenRole role = TokenRole::text;
    std::int32_t sentence_id = -1;

    bool operator==(const TokenRecord&) const = default;
};

// Metadata key under which the runner records sentence text for sentence_id n.
std::string sentence_key(std::int32_t sentence_id);

class ActivationTrace {
public:
    ActivationTrace() = default;
    // Activations are zero-initialised; fill them through row().
    ActivationTrace(std::string model_id, std::uint32_t d_model, std::vector<std::uint32_t> layers,
                    std::vector<TokenRecord> tokens, std::map<std::string, std::string> metadata = {});

    const std::string& model_id() const noexcept { return model_id_; }
    std::uint32_t d_model() const noexcept { return d_model_; }
    const std::vector<std::uint32_t>& layers() const noexcept { return layers_; }
    const std::vector<TokenRecord>& tokens() const noexcept { return tokens_; }
    const std::map<std::string, std::string>& metadata() const noexcept { return metadata_; }
    std::map<std::string, std::string>& metadata() noexcept { return metadata_; }

    // Position of `layer` in layers(); throws if absent.
    std::size_t layer_position(std::uint32_t layer) const;
    // Position of the token with this token_index; throws if absent.
    std::size_t token_position(std::uint32_t token_index) const;
    bool has_layer(std::uint32_t layer) const noexcept;

    std::span<float> row(std::size_t layer_pos, std::size_t token_pos);
    std::span<const float> row(std::size_t layer_pos, std::size_t token_pos) const;
    // Contiguous block of all token rows for one layer.
    std::span<const float> layer_block(std::size_t layer_pos) const;
    std::span<float> layer_block(std::size_t layer_pos);
    std::span<const float> raw() const noexcept { return data_; }

    // Checks every invariant; throws ValidationError describing the first violation.
    void validate() const;

    // Bit-exact comparison of every field.
    bool operator==(const ActivationTrace& other) const;

private:
    std::string model_id_;
    std::uint32_t d_model_ = 0;
    std::vector<std::uint32_t> layers_;
    std::vector<TokenRecord> tokens_;
    std::map<std::string, std::string> metadata_;
    std::vector<float> data_;
};

// Serializes a validated trace. Returns the number of bytes written.
std::uint64_t write_trace(const ActivationTrace& trace, std::ostream& sink);
ActivationTrace read_trace(std::istream& source);

void save_trace(const ActivationTrace& trace, const std::string& path);
ActivationTrace load_trace(const std::string& path);

}  // namespace steerkit
