#include "steerkit/vector_extractors.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include <Eigen/Eigenvalues>

namespace steerkit {

namespace {

double softplus(double s) { return s > 0 ? s + std::log1p(std::exp(-s)) : std::log1p(std::exp(s)); }
double sigmoid(double s) {
    if (s >= 0) return 1.0 / (1.0 + std::exp(-s));
    const double e = std::exp(s);
    return e / (1.0 + e);
}

void fix_sign(Eigen::MatrixXd& m, Eigen::Index k) {
    auto row = m.row(k);
    Eigen::Index best = 0;
    for (Eigen::Index j = 1; j < row.size(); ++j) {
        if (std::abs(row(j)) > std::abs(row(best))) best = j;
    }
    if (row(best) < 0) row = -row;
}

std::vector<std::vector<double>> sorted_unique_rows(const Eigen::MatrixXd& m) {
    std::vector<std::vector<double>> rows(static_cast<std::size_t>(m.rows()));
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        auto& row = rows[static_cast<std::size_t>(i)];
        row.resize(static_cast<std::size_t>(m.cols()));
        for (Eigen::Index j = 0; j < m.cols(); ++j) row[static_cast<std::size_t>(j)] = m(i, j);
    }
    std::sort(rows.begin(), rows.end());
    rows.erase(std::unique(rows.begin(), rows.end()), rows.end());
    return rows;
}

}  // namespace

Eigen::MatrixXd gather_rows(const ActivationTrace& trace, std::uint32_t layer, const std::set<std::uint32_t>& token_indices) {
    const auto lp = trace.layer_position(layer);
    Eigen::MatrixXd out(static_cast<Eigen::Index>(token_indices.size()), static_cast<Eigen::Index>(trace.d_model()));
    Eigen::Index r = 0;
    for (auto idx : token_indices) {
        const auto row = trace.row(lp, trace.token_position(idx));
        for (std::size_t d = 0; d < row.size(); ++d) out(r, static_cast<Eigen::Index>(d)) = row[d];
        ++r;
    }
    return out;
}

SteeringVector compute_meanshift(const Eigen::MatrixXd& anchors, const Eigen::MatrixXd& controls) {
    if (anchors.rows() == 0 || controls.rows() == 0) throw ValidationError("mean shift needs non-empty anchor and control sets");
    if (anchors.cols() != controls.cols()) {
        throw ValidationError("anchor dimension " + std::to_string(anchors.cols()) + " differs from control dimension " +
                              std::to_string(controls.cols()));
    }
    if (anchors.cols() == 0) throw ValidationError("mean shift inputs have zero dimension");
    const Eigen::VectorXd diff = anchors.colwise().mean().transpose() - controls.colwise().mean().transpose();
    SteeringVector v;
    v.method = ExtractionMethod::meanshift;
    v.normalized = false;
    v.values.assign(diff.data(), diff.data() + diff.size());
    return v;
}

Eigen::MatrixXd PCAProjection::project(const Eigen::MatrixXd& xs) const {
    return (xs.rowwise() - mean.transpose()) * matrix.transpose();
}

PCAProjection pca_fit(const Eigen::MatrixXd& samples, std::size_t d) {
    const auto n = static_cast<std::size_t>(samples.rows());
    const auto dim = static_cast<std::size_t>(samples.cols());
    if (d == 0) throw ValidationError("PCA target dimension must be at least 1");
    if (d >= n) {
        throw ValidationError("PCA target dimension " + std::to_string(d) + " must be smaller than the " +
                              std::to_string(n) + " fitted samples");
    }
    if (d > dim) throw ValidationError("PCA target dimension exceeds the input dimension");

    PCAProjection pca;
    pca.mean = samples.colwise().mean().transpose();
    const Eigen::MatrixXd centered = samples.rowwise() - pca.mean.transpose();
    const double scale = 1.0 / static_cast<double>(n - 1);
    if (centered.squaredNorm() <= 0.0) throw ValidationError("PCA samples have zero variance");

    pca.matrix.resize(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(dim));
    pca.variances.resize(static_cast<Eigen::Index>(d));
    double top = 0.0;

    if (n < dim) {
        // Gram route: eigenvectors u of Xc Xcᵀ map to principal directions Xcᵀu.
        const Eigen::MatrixXd gram = centered * centered.transpose() * scale;
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(gram);
        if (solver.info() != Eigen::Success) throw Error("PCA eigen-decomposition failed");
        top = solver.eigenvalues()(static_cast<Eigen::Index>(n) - 1);
        for (std::size_t k = 0; k < d; ++k) {
            const auto col = static_cast<Eigen::Index>(n - 1 - k);
            const double lambda = solver.eigenvalues()(col);
            if (!(lambda > 1e-12 * top)) {
                throw ValidationError("PCA component " + std::to_string(k + 1) + " has zero variance; reduce d");
            }
            Eigen::VectorXd dir = centered.transpose() * solver.eigenvectors().col(col);
            dir.normalize();
            pca.matrix.row(static_cast<Eigen::Index>(k)) = dir.transpose();
            pca.variances(static_cast<Eigen::Index>(k)) = lambda;
        }
    } else {
        const Eigen::MatrixXd cov = centered.transpose() * centered * scale;
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
        if (solver.info() != Eigen::Success) throw Error("PCA eigen-decomposition failed");
        top = solver.eigenvalues()(static_cast<Eigen::Index>(dim) - 1);
        for (std::size_t k = 0; k < d; ++k) {
            const auto col = static_cast<Eigen::Index>(dim - 1 - k);
            const double lambda = solver.eigenvalues()(col);
            if (!(lambda > 1e-12 * top)) {
                throw ValidationError("PCA component " + std::to_string(k + 1) + " has zero variance; reduce d");
            }
            pca.matrix.row(static_cast<Eigen::Index>(k)) = solver.eigenvectors().col(col).transpose();
            pca.variances(static_cast<Eigen::Index>(k)) = lambda;
        }
    }
    for (Eigen::Index k = 0; k < pca.matrix.rows(); ++k) fix_sign(pca.matrix, k);
    return pca;
}

ProbeConvergenceError::ProbeConvergenceError(int iterations, double final_loss, double gradient_norm)
    : Error("probe did not converge after " + std::to_string(iterations) + " iterations (loss " +
            std::to_string(final_loss) + ", gradient norm " + std::to_string(gradient_norm) + ")"),
      final_loss_(final_loss) {}

std::size_t default_probe_dim(std::size_t n_positive) { return std::max<std::size_t>(1, n_positive / 2); }

ProbeModel train_probe(const Eigen::MatrixXd& pos, const Eigen::MatrixXd& neg, std::optional<std::size_t> d,
                       const ProbeOptions& options) {
    if (pos.rows() == 0 || neg.rows() == 0) throw ValidationError("probe needs non-empty positive and negative sets");
    if (pos.cols() != neg.cols()) throw ValidationError("probe classes differ in dimension");
    if (sorted_unique_rows(pos) == sorted_unique_rows(neg)) {
        throw ValidationError("probe classes are identical point sets");
    }
    const std::size_t dim = d.value_or(default_probe_dim(static_cast<std::size_t>(pos.rows())));
    if (dim > static_cast<std::size_t>(pos.rows() + neg.rows())) {
        throw ValidationError("probe dimension exceeds the number of training samples");
    }

    Eigen::MatrixXd all(pos.rows() + neg.rows(), pos.cols());
    all << pos, neg;
    ProbeModel model;
    model.projection = pca_fit(all, dim);
    const Eigen::MatrixXd z = model.projection.project(all);
    const Eigen::Index n = z.rows();
    const Eigen::Index p = z.cols();

    // Design matrix with a trailing bias column; labels 1 for anchors.
    Eigen::MatrixXd a(n, p + 1);
    a << z, Eigen::VectorXd::Ones(n);
    Eigen::VectorXd y = Eigen::VectorXd::Zero(n);
    y.head(pos.rows()).setOnes();

    Eigen::VectorXd reg = Eigen::VectorXd::Constant(p + 1, options.l2);
    reg(p) = 0.0;
    auto loss_at = [&](const Eigen::VectorXd& theta) {
        const Eigen::VectorXd s = a * theta;
        double l = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) l += softplus(s(i)) - y(i) * s(i);
        return l / static_cast<double>(n) + 0.5 * theta.cwiseProduct(reg).dot(theta);
    };

    Eigen::VectorXd theta = Eigen::VectorXd::Zero(p + 1);
    double loss = loss_at(theta);
    double grad_norm = 0.0;
    int iter = 0;
    for (; iter < options.max_iterations; ++iter) {
        const Eigen::VectorXd s = a * theta;
        Eigen::VectorXd prob(n), curvature(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            prob(i) = sigmoid(s(i));
            curvature(i) = prob(i) * (1.0 - prob(i));
        }
        const Eigen::VectorXd grad = a.transpose() * (prob - y) / static_cast<double>(n) + reg.cwiseProduct(theta);
        grad_norm = grad.norm();
        if (grad_norm < options.gradient_tolerance) break;

        Eigen::MatrixXd hess = a.transpose() * curvature.asDiagonal() * a / static_cast<double>(n);
        hess.diagonal() += reg + Eigen::VectorXd::Constant(p + 1, 1e-12);
        const Eigen::VectorXd step = hess.ldlt().solve(grad);

        double t = 1.0;
        Eigen::VectorXd next = theta - step;
        double next_loss = loss_at(next);
        while (next_loss > loss && t > 1e-10) {
            t *= 0.5;
            next = theta - t * step;
            next_loss = loss_at(next);
        }
        theta = next;
        loss = next_loss;
    }
    if (iter >= options.max_iterations) throw ProbeConvergenceError(iter, loss, grad_norm);

    model.normal = theta.head(p);
    model.bias = theta(p);
    model.final_loss = loss;
    model.iterations = iter;

    const Eigen::VectorXd pos_mean = z.topRows(pos.rows()).colwise().mean().transpose();
    const Eigen::VectorXd neg_mean = z.bottomRows(neg.rows()).colwise().mean().transpose();
    if (pos_mean.dot(model.normal) <= neg_mean.dot(model.normal)) {
        model.normal = -model.normal;
        model.bias = -model.bias;
    }
    if (!(model.normal.norm() > 0.0) || !model.normal.allFinite()) {
        throw ValidationError("probe produced a zero or non-finite normal");
    }

    const Eigen::VectorXd scores = z * model.normal + Eigen::VectorXd::Constant(n, model.bias);
    Eigen::Index correct = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
        const bool predicted_pos = scores(i) > 0.0;
        if (predicted_pos == (i < pos.rows())) ++correct;
    }
    model.train_accuracy = static_cast<double>(correct) / static_cast<double>(n);
    return model;
}

SteeringVector probe_steering_vector(const ProbeModel& model, std::string taxonomy, std::uint32_t layer) {
    if (model.normal.size() != model.projection.matrix.rows()) {
        throw ValidationError("probe normal does not match its projection dimension");
    }
    Eigen::VectorXd v = model.projection.matrix.transpose() * model.normal;
    const double norm = v.norm();
    if (!(norm > 0.0)) throw ValidationError("probe normal is zero");
    v /= norm;
    SteeringVector out;
    out.taxonomy = std::move(taxonomy);
    out.layer = layer;
    out.method = ExtractionMethod::probe;
    out.normalized = true;
    out.values.assign(v.data(), v.data() + v.size());
    return out;
}

}  // namespace steerkit
