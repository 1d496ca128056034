#include "steerkit/binary_io.hpp"

#include <algorithm>

namespace steerkit::io {

void ByteWriter::bytes(std::span<const std::uint8_t> data) {
    out_.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
    if (!out_) throw Error("write failed after " + std::to_string(count_) + " bytes");
    count_ += data.size();
}

void ByteWriter::string(std::string_view s) {
    if (s.size() > 0xFFFFFFFFu) throw ValidationError("string too long to encode");
    u32(static_cast<std::uint32_t>(s.size()));
    bytes({reinterpret_cast<const std::uint8_t*>(s.data()), s.size()});
}

void ByteWriter::f32_array(std::span<const float> values) {
    if constexpr (std::endian::native == std::endian::little) {
        bytes({reinterpret_cast<const std::uint8_t*>(values.data()), values.size_bytes()});
    } else {
        for (float v : values) f32(v);
    }
}

void ByteReader::bytes(std::span<std::uint8_t> dst) {
    if (dst.empty()) return;
    in_.read(reinterpret_cast<char*>(dst.data()), static_cast<std::streamsize>(dst.size()));
    const auto got = static_cast<std::uint64_t>(in_.gcount());
    if (got != dst.size()) {
        offset_ += got;
        fail("truncated input, needed " + std::to_string(dst.size() - got) + " more bytes");
    }
    offset_ += got;
}

void ByteReader::expect_magic(std::string_view tag) {
    std::vector<std::uint8_t> buf(tag.size());
    const auto start = offset_;
    bytes(buf);
    if (!std::equal(buf.begin(), buf.end(), tag.begin(), [](std::uint8_t a, char b) { return a == static_cast<std::uint8_t>(b); })) {
        throw ParseError(format_ + ": bad magic, expected \"" + std::string(tag) + "\"", start);
    }
}

std::uint8_t ByteReader::u8() {
    std::uint8_t v = 0;
    bytes({&v, 1});
    return v;
}

std::string ByteReader::string(std::uint32_t max_len) {
    const auto len = u32();
    if (len > max_len) fail("string length " + std::to_string(len) + " exceeds limit");
    std::string s(len, '\0');
    bytes({reinterpret_cast<std::uint8_t*>(s.data()), s.size()});
    return s;
}

void ByteReader::f32_array(std::span<float> dst) {
    if constexpr (std::endian::native == std::endian::little) {
        bytes({reinterpret_cast<std::uint8_t*>(dst.data()), dst.size_bytes()});
    } else {
        for (float& v : dst) v = f32();
    }
}

void ByteReader::expect_end() {
    if (in_.peek() != std::char_traits<char>::eof()) fail("trailing bytes after end of payload");
}

}  // namespace steerkit::io
