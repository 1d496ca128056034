#pragma once

// Little-endian primitives shared by the STRC, SVEC and SAEW containers.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "steerkit/errors.hpp"

namespace steerkit::io {

class ByteWriter {
public:
    explicit ByteWriter(std::ostream& out) : out_(out) {}

    void bytes(std::span<const std::uint8_t> data);
    void magic(std::string_view tag) { bytes({reinterpret_cast<const std::uint8_t*>(tag.data()), tag.size()}); }
    void u8(std::uint8_t v) { bytes({&v, 1}); }
    void u16(std::uint16_t v) { put_le(v); }
    void u32(std::uint32_t v) { put_le(v); }
    void i32(std::int32_t v) { put_le(static_cast<std::uint32_t>(v)); }
    void u64(std::uint64_t v) { put_le(v); }
    void f32(float v) { put_le(std::bit_cast<std::uint32_t>(v)); }
    void string(std::string_view s);
    void f32_array(std::span<const float> values);

    std::uint64_t count() const noexcept { return count_; }

private:
    template <typename U>
    void put_le(U v) {
        std::array<std::uint8_t, sizeof(U)> buf{};
        for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<std::uint8_t>(v >> (8 * i));
        bytes(buf);
    }

    std::ostream& out_;
    std::uint64_t count_ = 0;
};

// Reads with truncation detection; every error names the failing offset.
class ByteReader {
public:
    ByteReader(std::istream& in, std::string format) : in_(in), format_(std::move(format)) {}

    void bytes(std::span<std::uint8_t> dst);
    void expect_magic(std::string_view tag);
    std::uint8_t u8();
    std::uint16_t u16() { return get_le<std::uint16_t>(); }
    std::uint32_t u32() { return get_le<std::uint32_t>(); }
    std::int32_t i32() { return static_cast<std::int32_t>(get_le<std::uint32_t>()); }
    std::uint64_t u64() { return get_le<std::uint64_t>(); }
    float f32() { return std::bit_cast<float>(get_le<std::uint32_t>()); }
    std::string string(std::uint32_t max_len = 1u << 24);
    void f32_array(std::span<float> dst);
    // Throws unless the stream is exhausted.
    void expect_end();

    std::uint64_t offset() const noexcept { return offset_; }
    [[noreturn]] void fail(const std::string& what) const { throw ParseError(format_ + ": " + what, offset_); }

private:
    template <typename U>
    U get_le() {
        std::array<std::uint8_t, sizeof(U)> buf{};
        bytes(buf);
        U v = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(buf[i]) << (8 * i));
        return v;
    }

    std::istream& in_;
    std::string format_;
    std::uint64_t offset_ = 0;
};

// Bitwise float comparison (distinguishes -0.0 from 0.0).
inline bool bit_equal(std::span<const float> a, std::span<const float> b) {
    return a.size() == b.size() && (a.empty() || std::memcmp(a.data(), b.data(), a.size_bytes()) == 0);
}

}  // namespace steerkit::io
