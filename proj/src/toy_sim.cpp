#include "steerkit/toy_sim.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include "steerkit/errors.hpp"
#include "steerkit/rng.hpp"
#include "steerkit/search_eval.hpp"

namespace steerkit {

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

void normalize(std::vector<double>& v) {
    const double n = std::sqrt(dot(v, v));
    for (auto& x : v) x /= n;
}

}  // namespace

std::size_t PlantedModel::index_of(const std::string& name) const {
    const auto it = std::find(names.begin(), names.end(), name);
    if (it == names.end()) throw ValidationError("unknown concept '" + name + "'");
    return static_cast<std::size_t>(it - names.begin());
}

PlantedModel make_planted_model(std::uint32_t d_model, const std::vector<std::string>& concept_names, std::uint64_t seed,
                                const PlantedModelOptions& options) {
    if (d_model == 0) throw ValidationError("d_model must be positive");
    if (concept_names.empty()) throw ValidationError("planted model needs at least one concept");
    if (concept_names.size() > d_model) {
        throw ValidationError(std::to_string(concept_names.size()) + " concepts do not fit in d_model " + std::to_string(d_model));
    }
    if (!(options.temperature > 0.0)) throw ValidationError("temperature must be positive");
    if (options.noise_scale < 0.0) throw ValidationError("noise_scale must be non-negative");
    for (std::size_t i = 0; i < concept_names.size(); ++i) {
        for (std::size_t j = 0; j < i; ++j) {
            if (concept_names[i] == concept_names[j]) throw ValidationError("duplicate concept '" + concept_names[i] + "'");
        }
    }

    PlantedModel m;
    m.d_model = d_model;
    m.names = concept_names;
    m.temperature = options.temperature;
    m.n_layers = options.n_layers;
    m.noise_scale = options.noise_scale;
    rng::Generator g(seed);
    while (m.concepts.size() < concept_names.size()) {
        std::vector<double> v(d_model);
        for (auto& x : v) x = g.normal();
        for (int pass = 0; pass < 2; ++pass) {
            for (const auto& u : m.concepts) {
                const double p = dot(v, u);
                for (std::size_t k = 0; k < d_model; ++k) v[k] -= p * u[k];
            }
        }
        if (std::sqrt(dot(v, v)) < 1e-6) continue;
        normalize(v);
        m.concepts.push_back(std::move(v));
    }
    m.readout = m.concepts;
    return m;
}

void add_intermediate(PlantedModel& model, const std::string& name, const std::string& a, const std::string& b) {
    if (std::find(model.names.begin(), model.names.end(), name) != model.names.end()) {
        throw ValidationError("duplicate concept '" + name + "'");
    }
    const auto& va = model.concept_vector(a);
    const auto& vb = model.concept_vector(b);
    std::vector<double> mid(model.d_model);
    for (std::size_t k = 0; k < mid.size(); ++k) mid[k] = va[k] + vb[k];
    normalize(mid);
    model.names.push_back(name);
    model.concepts.push_back(mid);
    model.readout.push_back(std::move(mid));
}

std::vector<double> perceive(const PlantedModel& model, std::span<const float> image_token, const SteeringPlan* plan) {
    if (image_token.size() != model.d_model) {
        throw ValidationError("image token has dimension " + std::to_string(image_token.size()) + ", model expects " +
                              std::to_string(model.d_model));
    }
    std::vector<float> h(image_token.begin(), image_token.end());
    if (plan != nullptr) {
        if (plan->vector.dim() != model.d_model) throw ValidationError("plan vector dimension does not match the model");
        if (plan->layer >= model.n_layers) throw ValidationError("plan layer is beyond the model's layers");
        HiddenStates states{{0, h}};
        const TokenRoles roles{{0, TokenRole::image}};
        h = apply_intervention(states, roles, *plan).at(0);
    }
    std::vector<double> hd(h.begin(), h.end());
    std::vector<double> logits(model.readout.size());
    for (std::size_t i = 0; i < logits.size(); ++i) logits[i] = dot(model.readout[i], hd) / model.temperature;
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (auto& l : logits) {
        l = std::exp(l - mx);
        z += l;
    }
    for (auto& l : logits) l /= z;
    return logits;
}

std::vector<float> image_token(const PlantedModel& model, const std::string& concept_name, double scale,
                               std::uint64_t noise_seed) {
    const auto& v = model.concept_vector(concept_name);
    std::vector<float> h(model.d_model);
    rng::Generator g(noise_seed);
    for (std::size_t k = 0; k < h.size(); ++k) {
        double x = scale * v[k];
        if (model.noise_scale > 0.0) x += model.noise_scale * g.normal();
        h[k] = static_cast<float>(x);
    }
    return h;
}

std::vector<std::string> CrossoverCurve::argmax_sequence() const {
    std::vector<std::string> seq;
    for (const auto& p : probabilities) {
        seq.push_back(names[static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin())]);
    }
    return seq;
}

CrossoverCurve crossover_curve(const PlantedModel& model, const std::string& source, const std::string& target,
                               const std::vector<double>& alpha_grid, double image_norm, std::uint64_t noise_seed) {
    if (source == target) throw ValidationError("source and target concepts must differ");
    if (alpha_grid.empty()) throw ValidationError("alpha grid is empty");
    const auto h = image_token(model, source, image_norm, noise_seed);
    SteeringVector v;
    v.taxonomy = "attribute";
    v.method = ExtractionMethod::meanshift;
    v.values = model.concept_vector(target);
    v.provenance = {"planted:" + target};

    CrossoverCurve curve;
    curve.names = model.names;
    for (const auto& plan : color_plan(v, alpha_grid)) {
        curve.alphas.push_back(plan.alpha);
        curve.probabilities.push_back(perceive(model, h, &plan));
    }
    return curve;
}

void write_crossover_csv(const CrossoverCurve& curve, std::ostream& sink) {
    sink << "alpha";
    for (const auto& n : curve.names) sink << ',' << n;
    sink << ",argmax\n";
    const auto seq = curve.argmax_sequence();
    for (std::size_t i = 0; i < curve.alphas.size(); ++i) {
        sink << format_double(curve.alphas[i]);
        for (double p : curve.probabilities[i]) sink << ',' << format_double(p);
        sink << ',' << seq[i] << '\n';
    }
}

CrossoverCheck check_crossover(const CrossoverCurve& curve, const std::string& source, const std::string& intermediate,
                               const std::string& target) {
    auto index = [&](const std::string& n) {
        const auto it = std::find(curve.names.begin(), curve.names.end(), n);
        if (it == curve.names.end()) throw ValidationError("unknown concept '" + n + "'");
        return static_cast<std::size_t>(it - curve.names.begin());
    };
    const auto t = index(target);
    const auto mid = index(intermediate);
    index(source);

    CrossoverCheck check;
    check.target_nondecreasing = true;
    for (std::size_t i = 1; i < curve.probabilities.size(); ++i) {
        const double d = curve.probabilities[i][t] - curve.probabilities[i - 1][t];
        check.max_target_drop = std::max(check.max_target_drop, -d);
        if (d < -1e-9) check.target_nondecreasing = false;
    }
    for (const auto& name : curve.argmax_sequence()) {
        if (check.argmax_runs.empty() || check.argmax_runs.back() != name) check.argmax_runs.push_back(name);
    }
    check.ordering = check.argmax_runs == std::vector<std::string>{source, intermediate, target};

    // rises (weakly) to a single peak, then falls (weakly), with a strict rise and fall
    std::size_t i = 1;
    const auto& p = curve.probabilities;
    bool rose = false;
    bool fell = false;
    while (i < p.size() && p[i][mid] >= p[i - 1][mid]) rose |= p[i][mid] > p[i - 1][mid], ++i;
    while (i < p.size() && p[i][mid] <= p[i - 1][mid]) fell |= p[i][mid] < p[i - 1][mid], ++i;
    check.intermediate_unimodal = i == p.size() && rose && fell;
    return check;
}

std::vector<double> alpha_sweep(double max_alpha, double step) {
    if (!(step > 0.0) || max_alpha < 0.0) throw ValidationError("alpha sweep needs step > 0 and max >= 0");
    std::vector<double> grid;
    for (std::size_t k = 0;; ++k) {
        const double a = static_cast<double>(k) * step;
        if (a > max_alpha + 1e-12) break;
        grid.push_back(a);
    }
    return grid;
}

}  // namespace steerkit
