#pragma once

// Planted-direction simulator: a linear readout over orthonormal concept vectors with a
// single "image" token that can be steered like a real model's image tokens.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "steerkit/steering_core.hpp"

namespace steerkit {

struct PlantedModel {
    std::uint32_t d_model = 0;
    std::vector<std::string> names;
    std::vector<std::vector<double>> concepts;  // unit vectors, one per name
    std::vector<std::vector<double>> readout;   // unit rows, one per name
    double temperature = 1.0;
    std::uint32_t n_layers = 1;
    double noise_scale = 0.0;

    std::size_t index_of(const std::string& name) const;
    const std::vector<double>& concept_vector(const std::string& name) const { return concepts[index_of(name)]; }
};

struct PlantedModelOptions {
    double temperature = 1.0;
    std::uint32_t n_layers = 1;
    double noise_scale = 0.0;
};

// Seeded Gaussian draws orthonormalized by modified Gram-Schmidt.
PlantedModel make_planted_model(std::uint32_t d_model, const std::vector<std::string>& concept_names, std::uint64_t seed,
                                const PlantedModelOptions& options = {});

// Adds a concept whose vector and readout row are the normalized midpoint of a and b.
void add_intermediate(PlantedModel& model, const std::string& name, const std::string& a, const std::string& b);

// Softmax(readout · h / temperature) after applying the plan to the single image token.
std::vector<double> perceive(const PlantedModel& model, std::span<const float> image_token,
                             const SteeringPlan* plan = nullptr);

// The image token for a concept: scale · concept vector, plus noise_scale Gaussian noise.
std::vector<float> image_token(const PlantedModel& model, const std::string& concept_name, double scale,
                               std::uint64_t noise_seed = 0);

inline constexpr double kDefaultImageNorm = 30.0;

struct CrossoverCurve {
    std::vector<std::string> names;
    std::vector<double> alphas;
    std::vector<std::vector<double>> probabilities;  // [alpha][concept]

    std::vector<std::string> argmax_sequence() const;  // argmax per alpha
};

// Image token = image_norm · source; steered toward the unit target vector over alpha_grid.
CrossoverCurve crossover_curve(const PlantedModel& model, const std::string& source, const std::string& target,
                               const std::vector<double>& alpha_grid, double image_norm = kDefaultImageNorm,
                               std::uint64_t noise_seed = 0);

// Columns: alpha, one per concept, argmax.
void write_crossover_csv(const CrossoverCurve& curve, std::ostream& sink);

struct CrossoverCheck {
    bool target_nondecreasing = false;  // discrete differences >= -1e-9
    bool ordering = false;              // argmax runs are exactly source, intermediate, target
    bool intermediate_unimodal = false;
    double max_target_drop = 0.0;
    std::vector<std::string> argmax_runs;

    bool ok() const noexcept { return target_nondecreasing && ordering && intermediate_unimodal; }
};

CrossoverCheck check_crossover(const CrossoverCurve& curve, const std::string& source, const std::string& intermediate,
                               const std::string& target);

// 0, step, ..., max inclusive.
std::vector<double> alpha_sweep(double max_alpha, double step);

}  // namespace steerkit
