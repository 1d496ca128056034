#include "steerkit/sae_engine.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <ostream>
#include <set>

#include "steerkit/binary_io.hpp"
#include "steerkit/errors.hpp"
#include "steerkit/judge.hpp"
#include "steerkit/text_util.hpp"

namespace steerkit {

namespace {

constexpr std::uint16_t kSaewVersion = 1;

void require_finite(const std::vector<float>& v, const char* what) {
    for (float x : v) {
        if (!std::isfinite(x)) throw ValidationError(std::string("SAE ") + what + " has a non-finite entry");
    }
}

void check_size(const std::vector<float>& v, std::size_t expected, const char* what) {
    if (v.size() != expected) {
        throw ValidationError(std::string("SAE ") + what + " has " + std::to_string(v.size()) + " entries, expected " +
                              std::to_string(expected));
    }
}

double gate(const SAEModel& sae, std::size_t feature, double pre) {
    if (sae.activation().kind == SaeActivationKind::jumprelu) {
        return pre > static_cast<double>(sae.activation().thresholds[feature]) ? pre : 0.0;
    }
    return pre > 0.0 ? pre : 0.0;
}

double encode_one(const SAEModel& sae, std::span<const double> x, std::size_t feature) {
    double pre = sae.enc_bias()[feature];
    const float* row = sae.enc_weights().data() + feature * sae.d_model();
    for (std::size_t d = 0; d < sae.d_model(); ++d) pre += static_cast<double>(row[d]) * x[d];
    return gate(sae, feature, pre);
}

void check_input(const SAEModel& sae, std::span<const double> x) {
    if (x.size() != sae.d_model()) {
        throw ValidationError("SAE input has dimension " + std::to_string(x.size()) + ", expected " +
                              std::to_string(sae.d_model()));
    }
}

}  // namespace

SAEModel::SAEModel(std::uint32_t layer, std::uint32_t d_model, std::uint32_t n_features, std::vector<float> enc_weights,
                   std::vector<float> enc_bias, std::vector<float> dec_weights, std::vector<float> dec_bias,
                   SaeActivation activation)
    : layer_(layer),
      d_model_(d_model),
      n_features_(n_features),
      enc_weights_(std::move(enc_weights)),
      enc_bias_(std::move(enc_bias)),
      dec_weights_(std::move(dec_weights)),
      dec_bias_(std::move(dec_bias)),
      activation_(std::move(activation)) {
    if (d_model_ == 0 || n_features_ == 0) throw ValidationError("SAE dimensions must be positive");
    const std::size_t fd = static_cast<std::size_t>(d_model_) * n_features_;
    check_size(enc_weights_, fd, "encoder weights");
    check_size(enc_bias_, n_features_, "encoder bias");
    check_size(dec_weights_, fd, "decoder weights");
    check_size(dec_bias_, d_model_, "decoder bias");
    require_finite(enc_weights_, "encoder weights");
    require_finite(enc_bias_, "encoder bias");
    require_finite(dec_weights_, "decoder weights");
    require_finite(dec_bias_, "decoder bias");
    if (activation_.kind == SaeActivationKind::jumprelu) {
        check_size(activation_.thresholds, n_features_, "jumprelu thresholds");
        require_finite(activation_.thresholds, "jumprelu thresholds");
    } else {
        activation_.thresholds.clear();
    }

    decoder_norms_.assign(n_features_, 0.0);
    for (std::size_t d = 0; d < d_model_; ++d) {
        for (std::size_t i = 0; i < n_features_; ++i) {
            const double w = dec(d, i);
            decoder_norms_[i] += w * w;
        }
    }
    for (std::size_t i = 0; i < n_features_; ++i) {
        decoder_norms_[i] = std::sqrt(decoder_norms_[i]);
        if (!(decoder_norms_[i] > 0.0)) {
            throw ValidationError("SAE decoder column " + std::to_string(i) + " has zero norm");
        }
    }
}

std::vector<double> encode(const SAEModel& sae, std::span<const double> x) {
    check_input(sae, x);
    std::vector<double> f(sae.n_features());
    for (std::size_t i = 0; i < f.size(); ++i) f[i] = encode_one(sae, x, i);
    return f;
}

std::vector<double> decode(const SAEModel& sae, std::span<const double> features) {
    if (features.size() != sae.n_features()) {
        throw ValidationError("SAE feature vector has dimension " + std::to_string(features.size()) + ", expected " +
                              std::to_string(sae.n_features()));
    }
    std::vector<double> x(sae.dec_bias().begin(), sae.dec_bias().end());
    for (std::size_t d = 0; d < x.size(); ++d) {
        const float* row = sae.dec_weights().data() + d * sae.n_features();
        double acc = x[d];
        for (std::size_t i = 0; i < features.size(); ++i) acc += static_cast<double>(row[i]) * features[i];
        x[d] = acc;
    }
    return x;
}

double activation_strength(const SAEModel& sae, std::span<const double> x, std::size_t feature) {
    check_input(sae, x);
    if (feature >= sae.n_features()) {
        throw ValidationError("feature id " + std::to_string(feature) + " out of range [0, " +
                              std::to_string(sae.n_features()) + ")");
    }
    return encode_one(sae, x, feature) * sae.decoder_norm(feature);
}

std::vector<double> feature_direction(const SAEModel& sae, std::size_t feature) {
    if (feature >= sae.n_features()) throw ValidationError("feature id " + std::to_string(feature) + " out of range");
    std::vector<double> dir(sae.d_model());
    const double norm = sae.decoder_norm(feature);
    for (std::size_t d = 0; d < dir.size(); ++d) dir[d] = static_cast<double>(sae.dec(d, feature)) / norm;
    return dir;
}

FeatureCatalog load_feature_catalog(std::istream& source) {
    FeatureCatalog catalog;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(source, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (text::trim(line).empty() || line.front() == '#') continue;
        const auto cols = text::split(line, '\t');
        if (cols.size() < 2) {
            throw ValidationError("feature catalog line " + std::to_string(line_no) + ": expected id<TAB>explanation[<TAB>tokens]");
        }
        std::int64_t id = 0;
        try {
            id = std::stoll(cols[0]);
        } catch (const std::exception&) {
            throw ValidationError("feature catalog line " + std::to_string(line_no) + ": bad feature id \"" + cols[0] + "\"");
        }
        FeatureInfo info;
        info.explanation = std::string(text::trim(cols[1]));
        if (cols.size() > 2) {
            for (const auto& tok : text::split(cols[2], '|')) {
                if (!text::trim(tok).empty()) info.top_tokens.emplace_back(text::trim(tok));
            }
        }
        catalog[id] = std::move(info);
    }
    return catalog;
}

FeatureCatalog load_feature_catalog_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open feature catalog " + path);
    return load_feature_catalog(in);
}

std::vector<FeatureCandidate> top_n_candidates(const SAEModel& sae, std::span<const double> anchor_activation,
                                               std::size_t n, const FeatureCatalog* catalog) {
    check_input(sae, anchor_activation);
    if (n > sae.n_features()) {
        throw ValidationError("top-n of " + std::to_string(n) + " exceeds the SAE's " +
                              std::to_string(sae.n_features()) + " features");
    }
    if (n == 0) return {};

    std::vector<double> strength(sae.n_features());
    for (std::size_t i = 0; i < strength.size(); ++i) {
        strength[i] = encode_one(sae, anchor_activation, i) * sae.decoder_norm(i);
    }
    std::vector<std::size_t> order(strength.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n), order.end(),
                      [&](std::size_t a, std::size_t b) {
                          if (strength[a] != strength[b]) return strength[a] > strength[b];
                          return a < b;
                      });

    std::vector<FeatureCandidate> out;
    out.reserve(n);
    for (std::size_t k = 0; k < n; ++k) {
        const auto id = order[k];
        FeatureCandidate c;
        c.feature_id = static_cast<std::int64_t>(id);
        c.layer = sae.layer();
        c.direction = feature_direction(sae, id);
        c.strength = strength[id];
        if (catalog != nullptr) {
            if (auto it = catalog->find(c.feature_id); it != catalog->end()) {
                c.explanation = it->second.explanation;
                c.top_tokens = it->second.top_tokens;
            }
        }
        out.push_back(std::move(c));
    }
    return out;
}

std::vector<FeatureCandidate> filter_candidates(const std::vector<FeatureCandidate>& candidates, FeatureJudge& judge,
                                                const ConceptSet& concept_set) {
    std::set<std::int64_t> seen;
    std::vector<FeatureCandidate> accepted;
    for (const auto& c : candidates) {
        if (!seen.insert(c.feature_id).second) continue;
        bool ok = false;
        try {
            ok = judge.accepts(c, concept_set);
        } catch (const JudgeError&) {
            throw;
        } catch (const std::exception& e) {
            throw JudgeError(std::string("judge failed: ") + e.what(), c.feature_id);
        }
        if (ok) accepted.push_back(c);
    }
    return accepted;
}

SteeringVector aggregate_features(const std::vector<FeatureCandidate>& accepted, std::string taxonomy) {
    if (accepted.empty()) throw ValidationError("no accepted SAE features to aggregate at this layer");
    const auto dim = accepted.front().direction.size();
    const auto layer = accepted.front().layer;
    std::vector<double> mean(dim, 0.0);
    SteeringVector v;
    for (const auto& c : accepted) {
        if (c.layer != layer) throw ValidationError("candidates from different layers cannot be aggregated");
        if (c.direction.size() != dim) throw ValidationError("candidate directions differ in dimension");
        for (std::size_t d = 0; d < dim; ++d) mean[d] += c.direction[d];
        v.provenance.push_back("feature:" + std::to_string(c.feature_id));
    }
    double norm = 0.0;
    for (auto& m : mean) {
        m /= static_cast<double>(accepted.size());
        norm += m * m;
    }
    norm = std::sqrt(norm);
    if (!(norm > 1e-12)) throw ValidationError("accepted feature directions cancel to a zero mean");
    for (auto& m : mean) m /= norm;

    v.taxonomy = std::move(taxonomy);
    v.layer = layer;
    v.method = ExtractionMethod::sae;
    v.values = std::move(mean);
    v.normalized = true;
    return v;
}

SaeSearchResult find_sae_vector(const ConceptSet& concept_set, const ActivationTrace& trace, const SAEModel& sae,
                                FeatureJudge& judge, std::size_t top_n, const FeatureCatalog* catalog) {
    if (trace.d_model() != sae.d_model()) {
        throw ValidationError("trace d_model " + std::to_string(trace.d_model()) + " differs from SAE d_model " +
                              std::to_string(sae.d_model()));
    }
    const auto part = partition_tokens(concept_set, trace);
    const auto layer_pos = trace.layer_position(sae.layer());

    SaeSearchResult result;
    for (auto token_index : part.anchor_indices) {
        const auto row = trace.row(layer_pos, trace.token_position(token_index));
        const std::vector<double> x(row.begin(), row.end());
        auto top = top_n_candidates(sae, x, top_n, catalog);
        // inactive features carry no evidence for the anchor
        std::erase_if(top, [](const FeatureCandidate& c) { return c.strength <= 0.0; });
        result.candidates.insert(result.candidates.end(), std::make_move_iterator(top.begin()),
                                 std::make_move_iterator(top.end()));
    }
    result.accepted = filter_candidates(result.candidates, judge, concept_set);
    if (!result.accepted.empty()) {
        result.vector = aggregate_features(result.accepted, std::string(to_string(concept_set.taxonomy)));
    }
    return result;
}

std::map<std::uint32_t, std::size_t> sparsity_census(const ConceptSet& concept_set, const ActivationTrace& trace,
                                                     const std::map<std::uint32_t, SAEModel>& saes,
                                                     FeatureJudge& judge, std::size_t top_n,
                                                     const FeatureCatalog* catalog) {
    std::map<std::uint32_t, std::size_t> census;
    for (const auto& [layer, sae] : saes) {
        census[layer] = find_sae_vector(concept_set, trace, sae, judge, top_n, catalog).accepted.size();
    }
    return census;
}

void write_census_csv(const std::map<std::uint32_t, std::size_t>& census, std::ostream& sink) {
    sink << "layer,accepted_features\n";
    for (const auto& [layer, count] : census) sink << layer << ',' << count << '\n';
}

ReconstructionStats reconstruction_diagnostics(const SAEModel& sae, const std::vector<std::vector<double>>& xs) {
    if (xs.empty()) throw ValidationError("reconstruction diagnostics need at least one input");
    ReconstructionStats stats;
    for (const auto& x : xs) {
        const auto f = encode(sae, x);
        const auto xhat = decode(sae, f);
        double err = 0.0;
        for (std::size_t d = 0; d < x.size(); ++d) err += (x[d] - xhat[d]) * (x[d] - xhat[d]);
        double l1 = 0.0;
        for (std::size_t i = 0; i < f.size(); ++i) l1 += f[i] * sae.decoder_norm(i);
        stats.mean_l2_error += err;
        stats.mean_l1_strength += l1;
    }
    stats.mean_l2_error /= static_cast<double>(xs.size());
    stats.mean_l1_strength /= static_cast<double>(xs.size());
    return stats;
}

std::uint64_t write_saew(const SAEModel& sae, std::ostream& sink) {
    io::ByteWriter w(sink);
    w.magic("SAEW");
    w.u16(kSaewVersion);
    w.u32(sae.layer());
    w.u32(sae.d_model());
    w.u32(sae.n_features());
    w.u8(static_cast<std::uint8_t>(sae.activation().kind));
    w.f32_array(sae.enc_weights());
    w.f32_array(sae.enc_bias());
    w.f32_array(sae.dec_weights());
    w.f32_array(sae.dec_bias());
    if (sae.activation().kind == SaeActivationKind::jumprelu) w.f32_array(sae.activation().thresholds);
    return w.count();
}

SAEModel read_saew(std::istream& source) {
    io::ByteReader r(source, "SAEW");
    r.expect_magic("SAEW");
    const auto version_offset = r.offset();
    const auto version = r.u16();
    if (version != kSaewVersion) throw UnsupportedVersionError("SAEW", version, version_offset);
    const auto layer = r.u32();
    const auto d = r.u32();
    const auto f = r.u32();
    if (d == 0 || f == 0) r.fail("zero SAE dimension");
    if (static_cast<std::uint64_t>(d) * f > (1ull << 32)) r.fail("implausible SAE size");
    const auto kind = r.u8();
    if (kind > 1) r.fail("unknown activation code " + std::to_string(kind));
    const std::size_t fd = static_cast<std::size_t>(d) * f;
    std::vector<float> enc(fd), enc_b(f), dec(fd), dec_b(d);
    r.f32_array(enc);
    r.f32_array(enc_b);
    r.f32_array(dec);
    r.f32_array(dec_b);
    SaeActivation act;
    act.kind = static_cast<SaeActivationKind>(kind);
    if (act.kind == SaeActivationKind::jumprelu) {
        act.thresholds.resize(f);
        r.f32_array(act.thresholds);
    }
    const auto end = r.offset();
    try {
        return SAEModel(layer, d, f, std::move(enc), std::move(enc_b), std::move(dec), std::move(dec_b), std::move(act));
    } catch (const ValidationError& e) {
        throw ParseError(std::string("SAEW: ") + e.what(), end);
    }
}

void save_saew(const SAEModel& sae, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + path + " for writing");
    write_saew(sae, out);
}

SAEModel load_saew(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open SAE weights " + path);
    return read_saew(in);
}

SAEModel load_sae_two_file(const std::string& header_path) {
    std::ifstream in(header_path);
    if (!in) throw Error("cannot open SAE header " + header_path);
    std::map<std::string, std::string> kv;
    std::string line;
    while (std::getline(in, line)) {
        const auto t = text::trim(line);
        if (t.empty() || t.front() == '#') continue;
        const auto eq = t.find('=');
        if (eq == std::string_view::npos) throw ValidationError("SAE header line without '=': " + std::string(t));
        kv[text::to_lower(text::trim(t.substr(0, eq)))] = std::string(text::trim(t.substr(eq + 1)));
    }
    auto need = [&](const std::string& key) -> const std::string& {
        auto it = kv.find(key);
        if (it == kv.end()) throw ValidationError("SAE header " + header_path + " is missing '" + key + "'");
        return it->second;
    };
    const auto layer = static_cast<std::uint32_t>(std::stoul(need("layer")));
    const auto d = static_cast<std::uint32_t>(std::stoul(need("d_model")));
    const auto f = static_cast<std::uint32_t>(std::stoul(need("n_features")));
    const auto& act_name = need("activation");
    SaeActivation act;
    if (act_name == "relu") {
        act.kind = SaeActivationKind::relu;
    } else if (act_name == "jumprelu") {
        act.kind = SaeActivationKind::jumprelu;
    } else {
        throw ValidationError("unknown SAE activation \"" + act_name + "\"");
    }
    const auto enc_layout = kv.contains("w_enc_layout") ? kv["w_enc_layout"] : std::string("FxD");
    const auto dec_layout = kv.contains("w_dec_layout") ? kv["w_dec_layout"] : std::string("DxF");
    if ((enc_layout != "FxD" && enc_layout != "DxF") || (dec_layout != "DxF" && dec_layout != "FxD")) {
        throw ValidationError("SAE weight layouts must be FxD or DxF");
    }

    const auto blob_path = (std::filesystem::path(header_path).parent_path() / need("blob")).string();
    std::ifstream blob(blob_path, std::ios::binary);
    if (!blob) throw Error("cannot open SAE blob " + blob_path);
    io::ByteReader r(blob, "SAE blob");
    const std::size_t fd = static_cast<std::size_t>(d) * f;
    std::vector<float> enc(fd), enc_b(f), dec(fd), dec_b(d);
    r.f32_array(enc);
    r.f32_array(enc_b);
    r.f32_array(dec);
    r.f32_array(dec_b);
    if (act.kind == SaeActivationKind::jumprelu) {
        act.thresholds.resize(f);
        r.f32_array(act.thresholds);
    }
    r.expect_end();

    auto transpose = [](const std::vector<float>& src, std::size_t rows, std::size_t cols) {
        std::vector<float> out(src.size());
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = src[i * cols + j];
        return out;
    };
    if (enc_layout == "DxF") enc = transpose(enc, d, f);
    if (dec_layout == "FxD") dec = transpose(dec, f, d);
    return SAEModel(layer, d, f, std::move(enc), std::move(enc_b), std::move(dec), std::move(dec_b), std::move(act));
}

SAEModel load_sae(const std::string& path) {
    if (std::filesystem::path(path).extension() == ".saew") return load_saew(path);
    return load_sae_two_file(path);
}

}  // namespace steerkit
