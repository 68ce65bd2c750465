#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "znn/types.hpp"
#include "znn/volume.hpp"

namespace znn {

// Block max-pooling window; forward input dims must be divisible by p.
struct pool_spec {
    vec3i p{1, 1, 1};
};

// Sliding-window maximum with window k dilated by sparsity s; the effective
// window s*(k-1)+1 must fit inside the input.
struct filter_spec {
    vec3i k{1, 1, 1};
    vec3i s{1, 1, 1};
};

// Argmax records are volumes of flat input indices, one per output voxel.
using argmax_record = volume<std::int32_t>;

// 1D sliding-window maximum over a strided array with window k dilated by
// sparsity s. Produces n - s*(k-1) outputs. Ties select the lowest index.
// Implemented with a monotonic deque per residue class modulo s, one
// amortized comparison per element. The deque indices grow monotonically,
// so the scratch must hold n entries.
template <typename T>
void sliding_max_1d(const T* in, std::int64_t n, std::int64_t stride, std::int64_t k,
                    std::int64_t s, T* out, std::int64_t out_stride,
                    std::int32_t* argmax /* absolute in-index per output, may be null */,
                    std::int64_t* deque_buf /* scratch of n entries */) {
    const std::int64_t m = n - s * (k - 1);
    for (std::int64_t r = 0; r < s; ++r) {
        // Stream of elements r, r+s, r+2s, ...; plain windows of size k on it.
        std::int64_t head = 0, tail = 0; // deque of stream positions, values decreasing
        std::int64_t count = (n - r + s - 1) / s;
        for (std::int64_t t = 0; t < count; ++t) {
            const T v = in[(r + t * s) * stride];
            while (tail > head && in[(r + deque_buf[tail - 1] * s) * stride] < v) --tail;
            deque_buf[tail++] = t;
            if (deque_buf[head] <= t - k) ++head;
            if (t >= k - 1) {
                const std::int64_t oi = r + (t - (k - 1)) * s; // output position
                if (oi < m) {
                    out[oi * out_stride] = in[(r + deque_buf[head] * s) * stride];
                    if (argmax) argmax[oi * out_stride] = std::int32_t(r + deque_buf[head] * s);
                }
            }
        }
    }
}

// Max over each p-block; output dims are in/p. The record holds the flat
// input index of the block maximum (lowest flat index on ties).
template <typename T>
std::pair<volume<T>, argmax_record> maxpool_forward(const volume<T>& x, const pool_spec& spec) {
    const vec3i n = x.dims();
    const vec3i p = spec.p;
    require_f(p.all_positive() && p.divides(n), [&] {
        return "maxpool_forward: dims " + n.str() + " not divisible by window " + p.str();
    });
    const vec3i m{n.x / p.x, n.y / p.y, n.z / p.z};
    volume<T> out(m);
    argmax_record rec(m);
    for (std::int64_t bi = 0; bi < m.x; ++bi)
        for (std::int64_t bj = 0; bj < m.y; ++bj)
            for (std::int64_t bl = 0; bl < m.z; ++bl) {
                T best{};
                std::int64_t best_idx = -1;
                for (std::int64_t i = bi * p.x; i < (bi + 1) * p.x; ++i)
                    for (std::int64_t j = bj * p.y; j < (bj + 1) * p.y; ++j)
                        for (std::int64_t l = bl * p.z; l < (bl + 1) * p.z; ++l) {
                            const T v = x(i, j, l);
                            if (best_idx < 0 || v > best) {
                                best = v;
                                best_idx = x.index(i, j, l);
                            }
                        }
                out(bi, bj, bl) = best;
                rec(bi, bj, bl) = std::int32_t(best_idx);
            }
    return {std::move(out), std::move(rec)};
}

// Jacobian transpose of maxpool: each block is zero except the recorded
// argmax position, which receives the block's backward value.
template <typename T>
volume<T> maxpool_backward(const volume<T>& g_out, const argmax_record& rec,
                           const pool_spec& spec) {
    require(g_out.dims() == rec.dims(), "maxpool_backward: record/shape mismatch");
    const vec3i in_dims = g_out.dims() * spec.p;
    volume<T> out(in_dims, T(0));
    for (std::int64_t i = 0, e = g_out.size(); i < e; ++i) {
        const std::int32_t src = rec[i];
        assert(src >= 0 && src < out.size());
        out[src] = g_out[i];
    }
    return out;
}

// Dilated sliding-window maximum, computed as three sequential 1D passes
// (z, then y, then x). Each pass records the winning absolute coordinate in
// its own axis; the composition resolves to one flat source index per
// output voxel, which is what the Jacobian consumes. Ties resolve to the
// lexicographically smallest (x,y,z), i.e. the lowest flat index.
template <typename T>
std::pair<volume<T>, argmax_record> maxfilter_forward(const volume<T>& x,
                                                      const filter_spec& spec) {
    const vec3i n = x.dims();
    const vec3i k = spec.k;
    const vec3i s = spec.s;
    require(k.all_positive() && s.all_positive(), "maxfilter_forward: bad window spec");
    const vec3i eff = effective_window(k, s);
    require_f(eff.all_le(n), [&] {
        return "maxfilter_forward: effective window " + eff.str() + " exceeds input " +
               n.str();
    });
    const vec3i m = n - (eff - 1);

    const std::int64_t max_n = std::max({n.x, n.y, n.z});
    std::vector<std::int64_t, pool_allocator<std::int64_t>> deque_buf{
        std::size_t(max_n), pool_allocator<std::int64_t>(small_object_pool())};

    // Pass 1 along z: (nx, ny, nz) -> (nx, ny, mz)
    volume<T> v1({n.x, n.y, m.z});
    argmax_record src_z({n.x, n.y, m.z});
    for (std::int64_t i = 0; i < n.x; ++i)
        for (std::int64_t j = 0; j < n.y; ++j)
            sliding_max_1d(&x(i, j, 0), n.z, 1, k.z, s.z, &v1(i, j, 0), 1, &src_z(i, j, 0),
                           deque_buf.data());

    // Pass 2 along y: (nx, ny, mz) -> (nx, my, mz)
    volume<T> v2({n.x, m.y, m.z});
    argmax_record src_y({n.x, m.y, m.z});
    for (std::int64_t i = 0; i < n.x; ++i)
        for (std::int64_t l = 0; l < m.z; ++l)
            sliding_max_1d(&v1(i, 0, l), n.y, m.z, k.y, s.y, &v2(i, 0, l), m.z, &src_y(i, 0, l),
                           deque_buf.data());

    // Pass 3 along x: (nx, my, mz) -> (mx, my, mz)
    volume<T> out(m);
    argmax_record src_x(m);
    for (std::int64_t j = 0; j < m.y; ++j)
        for (std::int64_t l = 0; l < m.z; ++l)
            sliding_max_1d(&v2(0, j, l), n.x, m.y * m.z, k.x, s.x, &out(0, j, l), m.y * m.z,
                           &src_x(0, j, l), deque_buf.data());

    // Resolve the three per-axis records into flat input indices.
    argmax_record rec(m);
    for (std::int64_t i = 0; i < m.x; ++i)
        for (std::int64_t j = 0; j < m.y; ++j)
            for (std::int64_t l = 0; l < m.z; ++l) {
                const std::int64_t xs = src_x(i, j, l);
                const std::int64_t ys = src_y(xs, j, l);
                const std::int64_t zs = src_z(xs, ys, l);
                rec(i, j, l) = std::int32_t(x.index(xs, ys, zs));
            }
    return {std::move(out), std::move(rec)};
}

// Jacobian transpose of maxfilter: backward values are accumulated at the
// recorded source voxels; one source may receive contributions from several
// overlapping windows.
template <typename T>
volume<T> maxfilter_backward(const volume<T>& g_out, const argmax_record& rec,
                             const filter_spec& spec, vec3i in_dims) {
    require(g_out.dims() == rec.dims(), "maxfilter_backward: record/shape mismatch");
    require(g_out.dims() == in_dims - (effective_window(spec.k, spec.s) - 1),
            "maxfilter_backward: output dims inconsistent with input dims and window");
    volume<T> out(in_dims, T(0));
    for (std::int64_t i = 0, e = g_out.size(); i < e; ++i) {
        const std::int32_t src = rec[i];
        assert(src >= 0 && src < out.size());
        out[src] += g_out[i];
    }
    return out;
}

} // namespace znn
