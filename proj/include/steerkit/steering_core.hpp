#pragma once

// Additive activation steering: h' = h + α·γ(role)·v on targeted token classes.

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "steerkit/steering_vector.hpp"
#include "steerkit/trace_store.hpp"

namespace steerkit {

struct TokenClasses {
    bool image = false;
    bool text = false;

    bool empty() const noexcept { return !image && !text; }
    bool operator==(const TokenClasses&) const = default;

    static TokenClasses both() { return {true, true}; }
    static TokenClasses image_only() { return {true, false}; }
    static TokenClasses text_only() { return {false, true}; }
};

// "image", "text", "both" (also "image+text", "image,text", "none").
TokenClasses parse_token_classes(std::string_view spec);
std::string to_string(TokenClasses classes);

struct SteeringPlan {
    SteeringVector vector;
    std::uint32_t layer = 0;
    double alpha = 0.0;
    double gamma_image = 0.0;
    double gamma_text = 0.0;
    // Non-fatal notes, e.g. cross-layer application.
    std::vector<std::string> warnings;

    bool is_noop() const noexcept { return alpha == 0.0; }
    TokenClasses classes() const noexcept { return {gamma_image != 0.0, gamma_text != 0.0}; }
};

SteeringPlan build_plan(const SteeringVector& vector, std::uint32_t layer, double alpha, TokenClasses classes);

using HiddenStates = std::map<std::uint32_t, std::vector<float>>;
using TokenRoles = std::map<std::uint32_t, TokenRole>;

// Image tokens receive α·γ_image·v, every non-output prompt role receives α·γ_text·v,
// output tokens are never touched. Arithmetic is float32.
HiddenStates apply_intervention(const HiddenStates& hidden, const TokenRoles& roles, const SteeringPlan& plan);

// Image-only plans sweeping α over the grid.
std::vector<SteeringPlan> color_plan(const SteeringVector& target_color_vector, const std::vector<double>& alpha_grid);

// Wire form used by the runner protocol. The vector travels as a float32 sidecar.
nlohmann::json plan_to_json(const SteeringPlan& plan);
std::vector<std::uint8_t> plan_vector_bytes(const SteeringPlan& plan);
SteeringPlan plan_from_wire(const nlohmann::json& body, std::span<const std::uint8_t> vector_bytes);

}  // namespace steerkit
