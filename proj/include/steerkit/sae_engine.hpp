#pragma once

// Pretrained sparse-autoencoder forward math and SAE-based concept vector search.

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "steerkit/concept_data.hpp"
#include "steerkit/steering_vector.hpp"
#include "steerkit/trace_store.hpp"

namespace steerkit {

class FeatureJudge;

enum class SaeActivationKind : std::uint8_t { relu = 0, jumprelu = 1 };

struct SaeActivation {
    SaeActivationKind kind = SaeActivationKind::relu;
    // Per-feature gates; only used by jumprelu.
    std::vector<float> thresholds;
};

class SAEModel {
public:
    // Weights are row-major: encoder F x D, decoder D x F.
    SAEModel(std::uint32_t layer, std::uint32_t d_model, std::uint32_t n_features, std::vector<float> enc_weights,
             std::vector<float> enc_bias, std::vector<float> dec_weights, std::vector<float> dec_bias,
             SaeActivation activation);

    std::uint32_t layer() const noexcept { return layer_; }
    std::uint32_t d_model() const noexcept { return d_model_; }
    std::uint32_t n_features() const noexcept { return n_features_; }
    const std::vector<float>& enc_weights() const noexcept { return enc_weights_; }
    const std::vector<float>& enc_bias() const noexcept { return enc_bias_; }
    const std::vector<float>& dec_weights() const noexcept { return dec_weights_; }
    const std::vector<float>& dec_bias() const noexcept { return dec_bias_; }
    const SaeActivation& activation() const noexcept { return activation_; }

    float enc(std::size_t feature, std::size_t dim) const { return enc_weights_[feature * d_model_ + dim]; }
    float dec(std::size_t dim, std::size_t feature) const { return dec_weights_[dim * n_features_ + feature]; }
    // ‖W_dec[:, i]‖₂
    double decoder_norm(std::size_t feature) const { return decoder_norms_.at(feature); }

private:
    std::uint32_t layer_;
    std::uint32_t d_model_;
    std::uint32_t n_features_;
    std::vector<float> enc_weights_;
    std::vector<float> enc_bias_;
    std::vector<float> dec_weights_;
    std::vector<float> dec_bias_;
    SaeActivation activation_;
    std::vector<double> decoder_norms_;
};

// f_i(x) = σ(W_enc[i,:]·x + b_enc[i])
std::vector<double> encode(const SAEModel& sae, std::span<const double> x);
// x̂ = b_dec + Σ_i f_i W_dec[:, i]
std::vector<double> decode(const SAEModel& sae, std::span<const double> features);
// f_i(x)·‖W_dec[:, i]‖₂
double activation_strength(const SAEModel& sae, std::span<const double> x, std::size_t feature);
// W_dec[:, i] / ‖W_dec[:, i]‖₂
std::vector<double> feature_direction(const SAEModel& sae, std::size_t feature);

struct FeatureInfo {
    std::string explanation;
    std::vector<std::string> top_tokens;
};

// Feature explanations and top activating tokens, keyed by feature id.
// TSV rows: feature_id <TAB> explanation <TAB> token|token|...
using FeatureCatalog = std::map<std::int64_t, FeatureInfo>;
FeatureCatalog load_feature_catalog(std::istream& source);
FeatureCatalog load_feature_catalog_file(const std::string& path);

struct FeatureCandidate {
    std::int64_t feature_id = 0;
    std::uint32_t layer = 0;
    std::vector<double> direction;
    double strength = 0.0;
    std::string explanation;
    std::vector<std::string> top_tokens;
};

// Features with the largest activation strength on `anchor_activation`, descending,
// ties broken by ascending feature id. n == 0 gives an empty list.
std::vector<FeatureCandidate> top_n_candidates(const SAEModel& sae, std::span<const double> anchor_activation,
                                               std::size_t n, const FeatureCatalog* catalog = nullptr);

// Deduplicates by feature id (first occurrence wins), then keeps what the judge accepts.
std::vector<FeatureCandidate> filter_candidates(const std::vector<FeatureCandidate>& candidates, FeatureJudge& judge,
                                                const ConceptSet& concept_set);

// Mean of unit feature directions, re-normalized to unit length.
SteeringVector aggregate_features(const std::vector<FeatureCandidate>& accepted, std::string taxonomy = {});

inline constexpr std::size_t kDefaultTopN = 5;

struct SaeSearchResult {
    std::vector<FeatureCandidate> candidates;  // union over anchors, before deduplication
    std::vector<FeatureCandidate> accepted;
    std::optional<SteeringVector> vector;      // empty when no feature survives
};

// Runs the two-stage search for one layer: top-n features per anchor token (features
// with zero strength dropped), judge filtering, then aggregation.
SaeSearchResult find_sae_vector(const ConceptSet& concept_set, const ActivationTrace& trace, const SAEModel& sae,
                                FeatureJudge& judge, std::size_t top_n = kDefaultTopN,
                                const FeatureCatalog* catalog = nullptr);

// Accepted-feature count per layer (diagnostic).
std::map<std::uint32_t, std::size_t> sparsity_census(const ConceptSet& concept_set, const ActivationTrace& trace,
                                                     const std::map<std::uint32_t, SAEModel>& saes,
                                                     FeatureJudge& judge, std::size_t top_n = kDefaultTopN,
                                                     const FeatureCatalog* catalog = nullptr);
void write_census_csv(const std::map<std::uint32_t, std::size_t>& census, std::ostream& sink);

struct ReconstructionStats {
    double mean_l2_error = 0.0;       // mean ‖x − x̂‖₂²
    double mean_l1_strength = 0.0;    // mean Σ_i f_i(x)‖W_dec[:, i]‖₂
};
ReconstructionStats reconstruction_diagnostics(const SAEModel& sae, const std::vector<std::vector<double>>& xs);

// "SAEW" container:
//   "SAEW" u16 version=1, u32 layer, u32 d_model, u32 n_features, u8 activation (0 relu, 1 jumprelu)
//   float32: W_enc (F x D), b_enc (F), W_dec (D x F), b_dec (D), [thresholds (F) if jumprelu]
std::uint64_t write_saew(const SAEModel& sae, std::ostream& sink);
SAEModel read_saew(std::istream& source);
void save_saew(const SAEModel& sae, const std::string& path);
SAEModel load_saew(const std::string& path);

// Two-file layout: a `key = value` header naming a raw little-endian float32 blob.
//   layer, d_model, n_features, activation (relu|jumprelu), blob (path relative to header)
//   w_enc_layout (FxD default | DxF), w_dec_layout (DxF default | FxD)
// Blob order: W_enc, b_enc, W_dec, b_dec, thresholds.
SAEModel load_sae_two_file(const std::string& header_path);

// Dispatches on extension: .saew binary, otherwise the two-file header.
SAEModel load_sae(const std::string& path);

}  // namespace steerkit
