#include "steerkit/steering_vector.hpp"

#include <cmath>
#include <fstream>

#include "steerkit/binary_io.hpp"
#include "steerkit/errors.hpp"

namespace steerkit {

namespace {
constexpr std::uint16_t kSvecVersion = 1;
constexpr double kUnitTolerance = 1e-6;
}  // namespace

std::string_view to_string(ExtractionMethod method) {
    switch (method) {
        case ExtractionMethod::sae: return "sae";
        case ExtractionMethod::meanshift: return "meanshift";
        case ExtractionMethod::probe: return "probe";
    }
    return "meanshift";
}

ExtractionMethod parse_method(std::string_view name) {
    if (name == "sae") return ExtractionMethod::sae;
    if (name == "meanshift") return ExtractionMethod::meanshift;
    if (name == "probe") return ExtractionMethod::probe;
    throw ValidationError("unknown extraction method \"" + std::string(name) + "\"");
}

double SteeringVector::norm() const {
    double sum = 0.0;
    for (double v : values) sum += v * v;
    return std::sqrt(sum);
}

std::vector<float> SteeringVector::as_float32() const {
    return std::vector<float>(values.begin(), values.end());
}

void SteeringVector::validate() const {
    if (values.empty()) throw ValidationError("steering vector is empty");
    for (double v : values) {
        if (!std::isfinite(v)) throw ValidationError("steering vector has a non-finite entry");
    }
    if (method == ExtractionMethod::meanshift && normalized) {
        throw ValidationError("mean-shift vectors are never normalized");
    }
    if (normalized && std::abs(norm() - 1.0) > kUnitTolerance) {
        throw ValidationError("normalized steering vector has norm " + std::to_string(norm()));
    }
}

std::uint64_t write_svec(const SteeringVector& vector, std::ostream& sink) {
    vector.validate();
    io::ByteWriter w(sink);
    w.magic("SVEC");
    w.u16(kSvecVersion);
    w.string(vector.taxonomy);
    w.u8(static_cast<std::uint8_t>(vector.method));
    w.u32(vector.layer);
    w.u8(vector.normalized ? 1 : 0);
    w.u32(static_cast<std::uint32_t>(vector.provenance.size()));
    for (const auto& p : vector.provenance) w.string(p);
    w.u32(static_cast<std::uint32_t>(vector.values.size()));
    w.f32_array(vector.as_float32());
    return w.count();
}

SteeringVector read_svec(std::istream& source) {
    io::ByteReader r(source, "SVEC");
    r.expect_magic("SVEC");
    const auto version_offset = r.offset();
    const auto version = r.u16();
    if (version != kSvecVersion) throw UnsupportedVersionError("SVEC", version, version_offset);

    SteeringVector v;
    v.taxonomy = r.string();
    const auto method = r.u8();
    if (method > static_cast<std::uint8_t>(ExtractionMethod::probe)) r.fail("invalid method code " + std::to_string(method));
    v.method = static_cast<ExtractionMethod>(method);
    v.layer = r.u32();
    const auto flag = r.u8();
    if (flag > 1) r.fail("invalid normalized flag");
    v.normalized = flag == 1;
    const auto n_prov = r.u32();
    if (n_prov > (1u << 20)) r.fail("implausible provenance count");
    v.provenance.reserve(n_prov);
    for (std::uint32_t i = 0; i < n_prov; ++i) v.provenance.push_back(r.string());
    const auto dim = r.u32();
    if (dim == 0 || dim > (1u << 24)) r.fail("invalid dimension " + std::to_string(dim));
    std::vector<float> payload(dim);
    r.f32_array(payload);
    r.expect_end();
    v.values.assign(payload.begin(), payload.end());
    // float32 rounding can move a unit vector's norm by ~1e-7; re-check with the stored flag.
    try {
        v.validate();
    } catch (const ValidationError& e) {
        r.fail(e.what());
    }
    return v;
}

void save_svec(const SteeringVector& vector, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + path + " for writing");
    write_svec(vector, out);
}

SteeringVector load_svec(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open steering vector " + path);
    return read_svec(in);
}

std::string svec_relative_path(const SteeringVector& vector) {
    return vector.taxonomy + "/" + std::string(to_string(vector.method)) + "/layer_" + std::to_string(vector.layer) + ".svec";
}

}  // namespace steerkit
