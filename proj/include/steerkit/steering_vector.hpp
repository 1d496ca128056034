#pragma once

// SteeringVector and its "SVEC" export container.
//
// SVEC layout (little-endian):
//   "SVEC" u16 version=1
//   taxonomy     u32 len + UTF-8
//   method       u8   (0 sae, 1 meanshift, 2 probe)
//   layer        u32
//   normalized   u8   (0/1)
//   provenance   u32 count, then length-prefixed strings
//   d_model      u32
//   payload      d_model float32

#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

namespace steerkit {

enum class ExtractionMethod : std::uint8_t { sae = 0, meanshift = 1, probe = 2 };

std::string_view to_string(ExtractionMethod method);
ExtractionMethod parse_method(std::string_view name);

struct SteeringVector {
    std::string taxonomy;
    std::uint32_t layer = 0;
    ExtractionMethod method = ExtractionMethod::meanshift;
    std::vector<double> values;
    bool normalized = false;
    // Contributing feature ids ("feature:<id>") or dataset digests.
    std::vector<std::string> provenance;

    std::size_t dim() const noexcept { return values.size(); }
    double norm() const;
    std::vector<float> as_float32() const;

    // Throws ValidationError if values are non-finite, a normalized vector is not unit
    // length, or a mean-shift vector claims to be normalized.
    void validate() const;
};

// The float64 payload is rounded to float32 on write.
std::uint64_t write_svec(const SteeringVector& vector, std::ostream& sink);
SteeringVector read_svec(std::istream& source);

void save_svec(const SteeringVector& vector, const std::string& path);
SteeringVector load_svec(const std::string& path);

// Conventional file name inside an output directory: <taxonomy>/<method>/layer_<l>.svec
std::string svec_relative_path(const SteeringVector& vector);

}  // namespace steerkit
