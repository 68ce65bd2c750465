#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>

#include "znn/types.hpp"
#include "znn/volume.hpp"

namespace znn {

// Volume binary format: little-endian, magic "ZNNV", u32 version=1, three
// u32 dims (nx, ny, nz), then nx*ny*nz float32 values in x-major order.
inline constexpr char volume_magic[4] = {'Z', 'N', 'N', 'V'};
inline constexpr std::uint32_t volume_format_version = 1;

namespace detail {
inline void write_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}
inline std::uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
           (std::uint32_t(b[3]) << 24);
}
} // namespace detail

template <typename T>
void write_volume(std::ostream& os, const volume<T>& v) {
    os.write(volume_magic, 4);
    detail::write_u32(os, volume_format_version);
    detail::write_u32(os, std::uint32_t(v.dims().x));
    detail::write_u32(os, std::uint32_t(v.dims().y));
    detail::write_u32(os, std::uint32_t(v.dims().z));
    for (std::int64_t i = 0, e = v.size(); i < e; ++i) {
        float f = float(v[i]);
        std::uint32_t bits;
        std::memcpy(&bits, &f, 4);
        detail::write_u32(os, bits);
    }
}

template <typename T>
volume<T> read_volume(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    require(is.good() && std::memcmp(magic, volume_magic, 4) == 0,
            "volume file: bad magic bytes");
    const std::uint32_t version = detail::read_u32(is);
    require(version == volume_format_version,
            "volume file: unsupported version " + std::to_string(version));
    vec3i dims;
    dims.x = detail::read_u32(is);
    dims.y = detail::read_u32(is);
    dims.z = detail::read_u32(is);
    require(dims.all_positive(), "volume file: non-positive dims " + dims.str());
    volume<T> v(dims);
    for (std::int64_t i = 0, e = v.size(); i < e; ++i) {
        std::uint32_t bits = detail::read_u32(is);
        float f;
        std::memcpy(&f, &bits, 4);
        v[i] = T(f);
    }
    require(is.good(), "volume file: truncated payload");
    return v;
}

template <typename T>
void save_volume(const std::string& path, const volume<T>& v) {
    std::ofstream os(path, std::ios::binary);
    require(os.good(), "cannot open for writing: " + path);
    write_volume(os, v);
}

template <typename T>
volume<T> load_volume(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    require(is.good(), "cannot open for reading: " + path);
    return read_volume<T>(is);
}

} // namespace znn
