#pragma once

// final_factors.bin: 16-byte header (magic "FRLV", version u32, layer count
// u32, reserved u32) followed by each layer's A then B, row-major, as
// little-endian IEEE-754 doubles.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedrlvr/model.hpp"

namespace fedrlvr {

inline constexpr std::array<char, 4> kFactorMagic{'F', 'R', 'L', 'V'};
inline constexpr std::uint32_t kFactorVersion = 1;

namespace detail {

inline void put_u32(std::vector<unsigned char>& buf, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

inline void put_f64(std::vector<unsigned char>& buf, double d) {
    const auto v = std::bit_cast<std::uint64_t>(d);
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

inline std::uint64_t get_le(const unsigned char* p, int bytes) {
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
}

inline void put_matrix(std::vector<unsigned char>& buf, const Matrix& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        for (Eigen::Index c = 0; c < m.cols(); ++c) put_f64(buf, m(r, c));
    }
}

}  // namespace detail

inline std::vector<unsigned char> encode_factors(const LoraFactors& f) {
    std::vector<unsigned char> buf(kFactorMagic.begin(), kFactorMagic.end());
    detail::put_u32(buf, kFactorVersion);
    detail::put_u32(buf, static_cast<std::uint32_t>(f.layers.size()));
    detail::put_u32(buf, 0);
    for (const auto& p : f.layers) {
        detail::put_matrix(buf, p.a);
        detail::put_matrix(buf, p.b);
    }
    return buf;
}

/// Decodes into the shapes of `like`; the file does not carry shapes.
inline LoraFactors decode_factors(const std::vector<unsigned char>& buf, const LoraFactors& like) {
    if (buf.size() < 16 || std::memcmp(buf.data(), kFactorMagic.data(), 4) != 0) {
        throw std::runtime_error("factor file: bad magic");
    }
    const auto version = detail::get_le(buf.data() + 4, 4);
    const auto layers = detail::get_le(buf.data() + 8, 4);
    if (version != kFactorVersion) throw std::runtime_error("factor file: unsupported version " + std::to_string(version));
    if (layers != like.layers.size()) {
        throw std::runtime_error("factor file: " + std::to_string(layers) + " layers, model has " +
                                 std::to_string(like.layers.size()));
    }
    const std::size_t expected = 16 + 8 * like.value_count();
    if (buf.size() != expected) {
        throw std::runtime_error("factor file: size " + std::to_string(buf.size()) + " bytes, expected " +
                                 std::to_string(expected));
    }
    LoraFactors out = LoraFactors::zeros_like(like);
    std::size_t pos = 16;
    auto fill = [&](Matrix& m) {
        for (Eigen::Index r = 0; r < m.rows(); ++r) {
            for (Eigen::Index c = 0; c < m.cols(); ++c) {
                m(r, c) = std::bit_cast<double>(detail::get_le(buf.data() + pos, 8));
                pos += 8;
            }
        }
    };
    for (auto& p : out.layers) {
        fill(p.a);
        fill(p.b);
    }
    return out;
}

inline void write_factors(const std::string& path, const LoraFactors& f) {
    const auto buf = encode_factors(f);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write '" + path + "'");
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

inline LoraFactors read_factors(const std::string& path, const LoraFactors& like) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open '" + path + "'");
    std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_factors(buf, like);
}

}  // namespace fedrlvr
