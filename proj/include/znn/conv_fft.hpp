#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "znn/conv_direct.hpp"
#include "znn/fft.hpp"
#include "znn/types.hpp"
#include "znn/volume.hpp"

namespace znn {

// FFT realizations of the direct convolutions. All of them zero-pad to the
// exact needed size (no power-of-two rounding), transform, multiply
// pointwise and inverse-transform; the contract is equality with the direct
// engine in the spatial domain within 1e-5 relative error.
//
// Orientation bookkeeping: the canonical kernel transform is
// FFT(dilate(k)). The valid (forward) convolution is a correlation, so it
// multiplies by the conjugate; the adjoint full convolution used by the
// backward pass multiplies by the same transform unconjugated. This is what
// lets the forward-pass kernel transform be memoized and reused backward.

template <typename T>
cvolume<T> fwd_image_fft(fft_plan_cache<T>& cache, const volume<T>& x, vec3i pad,
                         transform_kind kind = transform_kind::image_forward) {
    return cache.forward(x, pad, kind);
}

// FFT of the dilated kernel, zero-padded to pad dims.
template <typename T>
cvolume<T> fwd_kernel_fft(fft_plan_cache<T>& cache, const volume<T>& w, vec3i s, vec3i pad) {
    volume<T> d = dilate_kernel(w, s);
    return cache.forward(d, pad, transform_kind::kernel_forward);
}

// Valid convolution from precomputed transforms: out = IFFT(X * conj(K))
// cropped to the low corner of size out_dims.
template <typename T>
volume<T> fft_conv_valid_pre(fft_plan_cache<T>& cache, const cvolume<T>& x_f,
                             const cvolume<T>& k_f, vec3i out_dims) {
    require(x_f.dims() == k_f.dims(), "fft_conv_valid_pre: transform dims mismatch");
    cvolume<T> prod(x_f.dims());
    prod.flat() = x_f.flat() * k_f.flat().conjugate();
    return cache.inverse_real(prod, out_dims);
}

template <typename T>
volume<T> fft_conv_valid(fft_plan_cache<T>& cache, const volume<T>& x, const volume<T>& w,
                         vec3i s = vec3i{1, 1, 1}) {
    const vec3i n = x.dims();
    const vec3i eff = effective_window(w.dims(), s);
    require_f(eff.all_le(n), [&] {
        return "fft_conv_valid: effective window " + eff.str() + " exceeds image " + n.str();
    });
    cvolume<T> x_f = fwd_image_fft(cache, x, n);
    cvolume<T> k_f = fwd_kernel_fft(cache, w, s, n);
    return fft_conv_valid_pre(cache, x_f, k_f, n - (eff - 1));
}

template <typename T>
volume<T> fft_conv_valid(fft_plan_cache<T>& cache, const volume<T>& x, const kernel<T>& k) {
    return fft_conv_valid(cache, x, k.weights, k.sparsity);
}

// Adjoint full convolution from precomputed transforms:
//   out[t] = sum_w k[w] * g[t - s*w]  ==  conv_full_direct(g, reflect(k)).
// k_f is the forward-pass kernel transform FFT(dilate(k)) at pad dims
// m + eff - 1; no conjugate, no crop. The zero padding of g guarantees the
// circular wrap touches only zeros.
template <typename T>
volume<T> fft_conv_full_adjoint_pre(fft_plan_cache<T>& cache, const cvolume<T>& g_f,
                                    const cvolume<T>& k_f) {
    require(g_f.dims() == k_f.dims(), "fft_conv_full_adjoint_pre: transform dims mismatch");
    cvolume<T> prod(g_f.dims());
    prod.flat() = g_f.flat() * k_f.flat();
    return cache.inverse_real(prod, g_f.dims());
}

// Mirror of conv_full_direct(g, k): realized as the adjoint convolution
// with the reflected kernel.
template <typename T>
volume<T> fft_conv_full(fft_plan_cache<T>& cache, const volume<T>& g, const volume<T>& w,
                        vec3i s = vec3i{1, 1, 1}) {
    const vec3i out_dims = g.dims() + (effective_window(w.dims(), s) - 1);
    cvolume<T> g_f = fwd_image_fft(cache, g, out_dims);
    volume<T> wr = reflect(w);
    cvolume<T> k_f = fwd_kernel_fft(cache, wr, s, out_dims);
    return fft_conv_full_adjoint_pre(cache, g_f, k_f);
}

template <typename T>
volume<T> fft_conv_full(fft_plan_cache<T>& cache, const volume<T>& g, const kernel<T>& k) {
    return fft_conv_full(cache, g, k.weights, k.sparsity);
}

// Kernel gradient from precomputed transforms at image pad dims n:
//   dL/dk[w] = IFFT(X * conj(G))[s*w]
// x_f is the forward image transform, g_f the backward image transform,
// both padded to the tail image dims. One gradient-specific inverse.
template <typename T>
volume<T> fft_kernel_gradient_pre(fft_plan_cache<T>& cache, const cvolume<T>& x_f,
                                  const cvolume<T>& g_f, vec3i kernel_dims, vec3i s) {
    require(x_f.dims() == g_f.dims(), "fft_kernel_gradient_pre: transform dims mismatch");
    cvolume<T> prod(x_f.dims());
    prod.flat() = x_f.flat() * g_f.flat().conjugate();
    const vec3i eff = effective_window(kernel_dims, s);
    volume<T> corr = cache.inverse_real(prod, eff);
    volume<T> out(kernel_dims);
    for (std::int64_t i = 0; i < kernel_dims.x; ++i)
        for (std::int64_t j = 0; j < kernel_dims.y; ++j)
            for (std::int64_t l = 0; l < kernel_dims.z; ++l)
                out(i, j, l) = corr(i * s.x, j * s.y, l * s.z);
    return out;
}

template <typename T>
volume<T> fft_kernel_gradient(fft_plan_cache<T>& cache, const volume<T>& x,
                              const volume<T>& g, vec3i kernel_dims, vec3i s) {
    const vec3i n = x.dims();
    cvolume<T> x_f = fwd_image_fft(cache, x, n);
    cvolume<T> g_f = fwd_image_fft(cache, g, n);
    return fft_kernel_gradient_pre(cache, x_f, g_f, kernel_dims, s);
}

// Cache of frequency-domain images and kernels produced during one learning
// iteration for reuse by later passes of the same iteration. Entries are
// tagged with the producing epoch; lookups for any other epoch miss. Kernel
// entries are cleared by the weight update of the owning edge.
//
// Concurrency: each slot has a single producing task, and consumers run only
// after task-graph ordering has published the write (queue or accumulator
// guard), so slots need no locking of their own.
template <typename T>
class memo_store {
public:
    void configure(std::size_t num_nodes, std::size_t num_edges) {
        node_fwd_.assign(2 * num_nodes, entry{});
        node_bwd_.assign(num_nodes, entry_list{});
        for (auto& l : node_bwd_) l.reserve(2);
        edge_kernel_.assign(num_edges, entry{});
    }

    // --- forward image transforms, one per node per iteration ---
    // Two slots per node, indexed by epoch parity: with pipelined rounds the
    // updates of iteration r consume these while iteration r+1 is already
    // producing its own.
    cvol_p<T> find_node_fwd(std::size_t node, std::int64_t epoch) const {
        const entry& e = node_fwd_[2 * node + std::size_t(epoch & 1)];
        return e.epoch == epoch ? e.value : nullptr;
    }
    void put_node_fwd(std::size_t node, std::int64_t epoch, cvol_p<T> v) {
        node_fwd_[2 * node + std::size_t(epoch & 1)] = entry{epoch, std::move(v)};
    }

    // --- backward image transforms, one per node per pad size ---
    cvol_p<T> find_node_bwd(std::size_t node, std::int64_t epoch, vec3i pad) const {
        for (const entry& e : node_bwd_[node])
            if (e.epoch == epoch && e.value && e.value->dims() == pad) return e.value;
        return nullptr;
    }
    void put_node_bwd(std::size_t node, std::int64_t epoch, cvol_p<T> v) {
        for (entry& e : node_bwd_[node])
            if (!e.value || e.epoch != epoch || e.value->dims() == v->dims()) {
                e = entry{epoch, std::move(v)};
                return;
            }
        node_bwd_[node].push_back(entry{epoch, std::move(v)});
    }

    // --- kernel transforms, one per edge per iteration ---
    cvol_p<T> find_edge_kernel(std::size_t edge, std::int64_t epoch) const {
        const entry& e = edge_kernel_[edge];
        return e.epoch == epoch ? e.value : nullptr;
    }
    void put_edge_kernel(std::size_t edge, std::int64_t epoch, cvol_p<T> v) {
        edge_kernel_[edge] = entry{epoch, std::move(v)};
    }
    void clear_edge_kernel(std::size_t edge) { edge_kernel_[edge] = entry{}; }

private:
    struct entry {
        std::int64_t epoch = -1;
        cvol_p<T> value;
    };
    using entry_list = std::vector<entry>;

    std::vector<entry> node_fwd_;
    std::vector<entry_list> node_bwd_;
    std::vector<entry> edge_kernel_;
};

} // namespace znn
