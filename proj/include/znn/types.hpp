#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <ostream>
#include <stdexcept>
#include <string>

namespace znn {

// Integer triple for dimensions, window sizes, sparsities and offsets.
// Components are named after the volume axes; x is the slowest-varying
// (major) axis in the flat layout used throughout.
struct vec3i {
    std::int64_t x = 0;
    std::int64_t y = 0;
    std::int64_t z = 0;

    constexpr vec3i() = default;
    constexpr vec3i(std::int64_t x_, std::int64_t y_, std::int64_t z_) : x(x_), y(y_), z(z_) {}
    constexpr explicit vec3i(std::int64_t v) : x(v), y(v), z(v) {}

    constexpr std::int64_t operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }
    std::int64_t& operator[](int i) { return i == 0 ? x : (i == 1 ? y : z); }

    constexpr std::int64_t product() const { return x * y * z; }

    constexpr bool operator==(const vec3i&) const = default;

    friend constexpr vec3i operator+(vec3i a, vec3i b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
    friend constexpr vec3i operator-(vec3i a, vec3i b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
    friend constexpr vec3i operator*(vec3i a, vec3i b) { return {a.x * b.x, a.y * b.y, a.z * b.z}; }
    friend constexpr vec3i operator+(vec3i a, std::int64_t s) { return {a.x + s, a.y + s, a.z + s}; }
    friend constexpr vec3i operator-(vec3i a, std::int64_t s) { return {a.x - s, a.y - s, a.z - s}; }
    friend constexpr vec3i operator*(vec3i a, std::int64_t s) { return {a.x * s, a.y * s, a.z * s}; }

    constexpr bool all_positive() const { return x > 0 && y > 0 && z > 0; }
    constexpr bool all_at_least(std::int64_t v) const { return x >= v && y >= v && z >= v; }
    constexpr bool all_le(vec3i o) const { return x <= o.x && y <= o.y && z <= o.z; }
    constexpr bool divides(vec3i n) const { return n.x % x == 0 && n.y % y == 0 && n.z % z == 0; }

    std::string str() const {
        return std::to_string(x) + "," + std::to_string(y) + "," + std::to_string(z);
    }
};

inline std::ostream& operator<<(std::ostream& os, const vec3i& v) { return os << v.str(); }

// Effective window of a size-k window dilated by sparsity s: s*(k-1)+1 per axis.
constexpr vec3i effective_window(vec3i k, vec3i s) {
    return {s.x * (k.x - 1) + 1, s.y * (k.y - 1) + 1, s.z * (k.z - 1) + 1};
}

// Error thrown on structural violations: shape mismatches, invalid windows,
// malformed graphs. Carries the offending entity in the message.
class structural_error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline void require(bool cond, const char* what) {
    if (!cond) throw structural_error(what);
}

inline void require(bool cond, const std::string& what) {
    if (!cond) throw structural_error(what);
}

// For hot paths: the message is built only on failure.
template <typename MsgFn>
inline void require_f(bool cond, MsgFn&& msg) {
    if (!cond) throw structural_error(msg());
}

} // namespace znn
