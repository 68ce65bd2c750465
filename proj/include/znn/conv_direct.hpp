#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <utility>

#include "znn/types.hpp"
#include "znn/volume.hpp"

namespace znn {

// Convolution kernel: dense weights plus a per-dimension sparsity (stride
// within the sliding window). The effective window is s*(k-1)+1 per axis.
template <typename T>
struct kernel {
    volume<T> weights;
    vec3i sparsity{1, 1, 1};

    kernel(volume<T> w, vec3i s = vec3i{1, 1, 1}) : weights(std::move(w)), sparsity(s) {}

    vec3i dims() const { return weights.dims(); }
    vec3i effective_dims() const { return effective_window(weights.dims(), sparsity); }

    kernel clone() const { return kernel(weights.clone(), sparsity); }
};

namespace detail {
template <typename T>
using row_map = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <typename T>
using const_row_map = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;
} // namespace detail

// Valid sparse convolution, implemented as cross-correlation:
//   out[o] = sum_w x[o + s*w] * k[w]
// Output side per axis is n - s*(k-1). The backward pass obtains the adjoint
// by convolving with the reflected kernel, so no flips happen here.
template <typename T>
volume<T> conv_valid_direct(const volume<T>& x, const volume<T>& w, vec3i s = vec3i{1, 1, 1}) {
    const vec3i n = x.dims();
    const vec3i k = w.dims();
    const vec3i eff = effective_window(k, s);
    require_f(eff.all_le(n), [&] {
        return "conv_valid_direct: effective window " + eff.str() + " exceeds image " +
               n.str();
    });
    const vec3i m = n - (eff - 1);
    volume<T> out(m, T(0));
    for (std::int64_t ox = 0; ox < m.x; ++ox)
        for (std::int64_t oy = 0; oy < m.y; ++oy) {
            detail::row_map<T> acc(&out(ox, oy, 0), m.z);
            for (std::int64_t wx = 0; wx < k.x; ++wx)
                for (std::int64_t wy = 0; wy < k.y; ++wy) {
                    const T* xrow = &x(ox + s.x * wx, oy + s.y * wy, 0);
                    for (std::int64_t wz = 0; wz < k.z; ++wz) {
                        const T c = w(wx, wy, wz);
                        acc += c * detail::const_row_map<T>(xrow + s.z * wz, m.z);
                    }
                }
        }
    return out;
}

template <typename T>
volume<T> conv_valid_direct(const volume<T>& x, const kernel<T>& k) {
    return conv_valid_direct(x, k.weights, k.sparsity);
}

// Full sparse convolution, the adjoint counterpart of conv_valid_direct:
//   out[t] = sum_w k[w] * g[t + s*(w - (k-1))]   (g taken as zero outside)
// Output side per axis is m + s*(k-1). Satisfies
//   <conv_valid(x,k), g> == <x, conv_full(g, reflect(k))>.
template <typename T>
volume<T> conv_full_direct(const volume<T>& g, const volume<T>& w, vec3i s = vec3i{1, 1, 1}) {
    const vec3i m = g.dims();
    const vec3i k = w.dims();
    const vec3i out_dims = m + (effective_window(k, s) - 1);
    volume<T> out(out_dims, T(0));
    // Scatter form: every (input row, kernel tap) pair lands fully inside out.
    for (std::int64_t gx = 0; gx < m.x; ++gx)
        for (std::int64_t gy = 0; gy < m.y; ++gy) {
            const T* grow = &g(gx, gy, 0);
            for (std::int64_t wx = 0; wx < k.x; ++wx)
                for (std::int64_t wy = 0; wy < k.y; ++wy) {
                    const std::int64_t tx = gx + s.x * (k.x - 1 - wx);
                    const std::int64_t ty = gy + s.y * (k.y - 1 - wy);
                    for (std::int64_t wz = 0; wz < k.z; ++wz) {
                        const std::int64_t tz = s.z * (k.z - 1 - wz);
                        detail::row_map<T> acc(&out(tx, ty, tz), m.z);
                        acc += w(wx, wy, wz) * detail::const_row_map<T>(grow, m.z);
                    }
                }
        }
    return out;
}

template <typename T>
volume<T> conv_full_direct(const volume<T>& g, const kernel<T>& k) {
    return conv_full_direct(g, k.weights, k.sparsity);
}

// Loss gradient with respect to the kernel of a sparse valid convolution:
//   dL/dk[w] = sum_o x[o + s*w] * g[o]
// where x is the forward image at the edge's tail and g the backward image
// at its head. Output has kernel dims.
template <typename T>
volume<T> kernel_gradient_direct(const volume<T>& x, const volume<T>& g,
                                 vec3i kernel_dims, vec3i s = vec3i{1, 1, 1}) {
    const vec3i n = x.dims();
    const vec3i m = g.dims();
    require_f(m == n - (effective_window(kernel_dims, s) - 1), [&] {
        return "kernel_gradient_direct: image " + n.str() + ", gradient " + m.str() +
               " inconsistent with kernel " + kernel_dims.str() + " sparsity " + s.str();
    });
    volume<T> out(kernel_dims);
    for (std::int64_t wx = 0; wx < kernel_dims.x; ++wx)
        for (std::int64_t wy = 0; wy < kernel_dims.y; ++wy)
            for (std::int64_t wz = 0; wz < kernel_dims.z; ++wz) {
                T acc = T(0);
                for (std::int64_t ox = 0; ox < m.x; ++ox)
                    for (std::int64_t oy = 0; oy < m.y; ++oy) {
                        const T* xrow = &x(ox + s.x * wx, oy + s.y * wy, s.z * wz);
                        const T* grow = &g(ox, oy, 0);
                        acc += (detail::const_row_map<T>(xrow, m.z) *
                                detail::const_row_map<T>(grow, m.z))
                                   .sum();
                    }
                out(wx, wy, wz) = acc;
            }
    return out;
}

// Embeds the kernel weights at stride-s positions of an effective-window
// volume, zeros elsewhere. Dense convolution with the dilated kernel equals
// sparse convolution with the original.
template <typename T>
volume<T> dilate_kernel(const volume<T>& w, vec3i s) {
    const vec3i k = w.dims();
    volume<T> out(effective_window(k, s), T(0));
    for (std::int64_t i = 0; i < k.x; ++i)
        for (std::int64_t j = 0; j < k.y; ++j)
            for (std::int64_t l = 0; l < k.z; ++l)
                out(i * s.x, j * s.y, l * s.z) = w(i, j, l);
    return out;
}

template <typename T>
volume<T> dilate_kernel(const kernel<T>& k) {
    return dilate_kernel(k.weights, k.sparsity);
}

} // namespace znn
