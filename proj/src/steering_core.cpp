#include "steerkit/steering_core.hpp"

#include <bit>
#include <cmath>
#include <cstring>

#include "steerkit/errors.hpp"
#include "steerkit/text_util.hpp"

namespace steerkit {

TokenClasses parse_token_classes(std::string_view spec) {
    const auto s = text::to_lower(text::trim(spec));
    if (s == "both" || s == "image+text" || s == "image,text" || s == "text+image" || s == "text,image") {
        return TokenClasses::both();
    }
    if (s == "image") return TokenClasses::image_only();
    if (s == "text") return TokenClasses::text_only();
    if (s == "none" || s.empty()) return {};
    throw ValidationError("unknown token classes \"" + std::string(spec) + "\" (use image, text or both)");
}

std::string to_string(TokenClasses classes) {
    if (classes.image && classes.text) return "both";
    if (classes.image) return "image";
    if (classes.text) return "text";
    return "none";
}

SteeringPlan build_plan(const SteeringVector& vector, std::uint32_t layer, double alpha, TokenClasses classes) {
    if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ValidationError("steering scale must be finite and non-negative");
    if (classes.empty() && alpha > 0.0) throw ValidationError("a steering plan with alpha > 0 must target image or text tokens");
    vector.validate();
    SteeringPlan plan;
    plan.vector = vector;
    plan.layer = layer;
    plan.alpha = alpha;
    plan.gamma_image = classes.image ? 1.0 : 0.0;
    plan.gamma_text = classes.text ? 1.0 : 0.0;
    if (layer != vector.layer) {
        plan.warnings.push_back("vector extracted at layer " + std::to_string(vector.layer) + " applied at layer " +
                                std::to_string(layer));
    }
    return plan;
}

HiddenStates apply_intervention(const HiddenStates& hidden, const TokenRoles& roles, const SteeringPlan& plan) {
    const auto v = plan.vector.as_float32();
    const float image_scale = static_cast<float>(plan.alpha * plan.gamma_image);
    const float text_scale = static_cast<float>(plan.alpha * plan.gamma_text);

    HiddenStates out = hidden;
    for (auto& [index, h] : out) {
        if (h.size() != v.size()) {
            throw ValidationError("hidden state of token " + std::to_string(index) + " has dimension " +
                                  std::to_string(h.size()) + ", steering vector has " + std::to_string(v.size()));
        }
        const auto it = roles.find(index);
        if (it == roles.end()) throw ValidationError("token " + std::to_string(index) + " has no role");
        if (it->second == TokenRole::output) continue;
        const float scale = it->second == TokenRole::image ? image_scale : text_scale;
        if (scale == 0.0f) continue;
        for (std::size_t d = 0; d < h.size(); ++d) h[d] = h[d] + scale * v[d];
    }
    return out;
}

std::vector<SteeringPlan> color_plan(const SteeringVector& target_color_vector, const std::vector<double>& alpha_grid) {
    if (alpha_grid.empty()) throw ValidationError("alpha grid is empty");
    std::vector<SteeringPlan> plans;
    plans.reserve(alpha_grid.size());
    for (double alpha : alpha_grid) {
        if (alpha < 0.0) throw ValidationError("alpha grid contains a negative value");
        plans.push_back(build_plan(target_color_vector, target_color_vector.layer, alpha, TokenClasses::image_only()));
    }
    return plans;
}

nlohmann::json plan_to_json(const SteeringPlan& plan) {
    return {{"layer", plan.layer},
            {"alpha", plan.alpha},
            {"gamma_image", plan.gamma_image},
            {"gamma_text", plan.gamma_text},
            {"d_model", plan.vector.dim()},
            {"vector_layer", plan.vector.layer},
            {"method", std::string(to_string(plan.vector.method))},
            {"taxonomy", plan.vector.taxonomy},
            {"normalized", plan.vector.normalized}};
}

std::vector<std::uint8_t> plan_vector_bytes(const SteeringPlan& plan) {
    const auto v = plan.vector.as_float32();
    std::vector<std::uint8_t> bytes(v.size() * 4);
    for (std::size_t i = 0; i < v.size(); ++i) {
        const auto bits = std::bit_cast<std::uint32_t>(v[i]);
        for (int b = 0; b < 4; ++b) bytes[i * 4 + b] = static_cast<std::uint8_t>(bits >> (8 * b));
    }
    return bytes;
}

SteeringPlan plan_from_wire(const nlohmann::json& body, std::span<const std::uint8_t> vector_bytes) {
    SteeringPlan plan;
    plan.layer = body.at("layer").get<std::uint32_t>();
    plan.alpha = body.at("alpha").get<double>();
    plan.gamma_image = body.at("gamma_image").get<double>();
    plan.gamma_text = body.at("gamma_text").get<double>();
    const auto dim = body.at("d_model").get<std::size_t>();
    if (vector_bytes.size() != dim * 4) {
        throw ValidationError("plan vector sidecar has " + std::to_string(vector_bytes.size()) + " bytes, expected " +
                              std::to_string(dim * 4));
    }
    plan.vector.layer = body.value("vector_layer", plan.layer);
    plan.vector.method = parse_method(body.value("method", std::string("meanshift")));
    plan.vector.taxonomy = body.value("taxonomy", std::string());
    plan.vector.normalized = body.value("normalized", false);
    plan.vector.values.resize(dim);
    for (std::size_t i = 0; i < dim; ++i) {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(vector_bytes[i * 4 + b]) << (8 * b);
        plan.vector.values[i] = std::bit_cast<float>(bits);
    }
    return plan;
}

}  // namespace steerkit
