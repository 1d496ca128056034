#pragma once

// Mean-shift and PCA + linear-probe steering vector extraction.
//
// Sample matrices hold one activation per row (float64).

#include <cstdint>
#include <optional>
#include <set>
#include <string>

#include <Eigen/Dense>

#include "steerkit/errors.hpp"
#include "steerkit/steering_vector.hpp"
#include "steerkit/trace_store.hpp"

namespace steerkit {

// Rows of `trace` at `layer` for the given token indices, upcast to float64.
Eigen::MatrixXd gather_rows(const ActivationTrace& trace, std::uint32_t layer, const std::set<std::uint32_t>& token_indices);

// mean(anchors) − mean(controls), left unnormalized.
SteeringVector compute_meanshift(const Eigen::MatrixXd& anchors, const Eigen::MatrixXd& controls);

struct PCAProjection {
    Eigen::MatrixXd matrix;        // d x D, orthonormal rows, descending variance
    Eigen::VectorXd mean;          // D, centering offset
    Eigen::VectorXd variances;     // d, eigenvalues of the sample covariance

    std::size_t dim() const noexcept { return static_cast<std::size_t>(matrix.rows()); }
    // (x − mean) Qᵀ for every row of xs.
    Eigen::MatrixXd project(const Eigen::MatrixXd& xs) const;
};

// Top-d principal directions of the centered samples. Requires 1 ≤ d < number of samples.
// Each row is signed so that its largest-magnitude entry is positive.
PCAProjection pca_fit(const Eigen::MatrixXd& samples, std::size_t d);

struct ProbeOptions {
    double l2 = 1e-3;
    int max_iterations = 5000;
    double gradient_tolerance = 1e-7;
};

struct ProbeModel {
    Eigen::VectorXd normal;  // d, points toward the positive (anchor) class
    double bias = 0.0;
    PCAProjection projection;
    double train_accuracy = 0.0;
    double final_loss = 0.0;
    int iterations = 0;
};

class ProbeConvergenceError : public Error {
public:
    ProbeConvergenceError(int iterations, double final_loss, double gradient_norm);
    double final_loss() const noexcept { return final_loss_; }

private:
    double final_loss_;
};

// Default projection width: half the number of positive samples (at least 1).
std::size_t default_probe_dim(std::size_t n_positive);

// L2-regularized logistic regression on PCA-projected activations, fitted by damped
// Newton steps. `d` defaults to default_probe_dim(pos.rows()).
ProbeModel train_probe(const Eigen::MatrixXd& pos, const Eigen::MatrixXd& neg, std::optional<std::size_t> d = std::nullopt,
                       const ProbeOptions& options = {});

// Qᵀ·normal, unit-normalized.
SteeringVector probe_steering_vector(const ProbeModel& model, std::string taxonomy = {}, std::uint32_t layer = 0);

}  // namespace steerkit
