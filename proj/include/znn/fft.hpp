#pragma once

#include <unsupported/Eigen/FFT>

#include <array>
#include <atomic>
#include <complex>
#include <cstdint>
#include <mutex>
#include <set>
#include <vector>

#include "znn/mempool.hpp"
#include "znn/types.hpp"
#include "znn/volume.hpp"

namespace znn {

// Which pass of the learning iteration is executing on this thread; task
// bodies set this so transform counts can be attributed per pass.
enum class compute_phase : std::uint8_t { other = 0, forward = 1, backward = 2, update = 3 };

inline compute_phase& current_phase() {
    thread_local compute_phase phase = compute_phase::other;
    return phase;
}

enum class transform_kind : std::uint8_t { image_forward = 0, kernel_forward = 1, inverse = 2 };

struct transform_counts {
    // [phase][kind]
    std::uint64_t counts[4][3] = {};

    std::uint64_t total() const {
        std::uint64_t t = 0;
        for (auto& row : counts)
            for (auto c : row) t += c;
        return t;
    }
    std::uint64_t of(compute_phase p, transform_kind k) const {
        return counts[int(p)][int(k)];
    }
    transform_counts operator-(const transform_counts& o) const {
        transform_counts r;
        for (int p = 0; p < 4; ++p)
            for (int k = 0; k < 3; ++k) r.counts[p][k] = counts[p][k] - o.counts[p][k];
        return r;
    }
};

// 3D transforms over per-thread 1D plans. Plans are created on first use of
// a length and reused afterwards; reuse is bitwise deterministic for
// identical inputs. The shared registry of planned lengths is synchronized;
// the per-thread engines need no locking.
//
// Counters are attributed to the calling thread's current_phase().
template <typename T>
class fft_plan_cache {
public:
    using complex_t = std::complex<T>;

    // Forward 3D transform of a real volume zero-padded to pad_dims.
    cvolume<T> forward(const volume<T>& x, vec3i pad_dims, transform_kind kind) {
        require_f(x.dims().all_le(pad_dims), [&] {
            return "fft forward: pad dims " + pad_dims.str() + " smaller than image " +
                   x.dims().str();
        });
        cvolume<T> f(pad_dims);
        f.set_zero();
        const vec3i n = x.dims();
        for (std::int64_t i = 0; i < n.x; ++i)
            for (std::int64_t j = 0; j < n.y; ++j) {
                const T* src = &x(i, j, 0);
                complex_t* dst = &f(i, j, 0);
                for (std::int64_t l = 0; l < n.z; ++l) dst[l] = complex_t(src[l], T(0));
            }
        transform_all_axes(f, /*inverse=*/false);
        count(kind);
        return f;
    }

    // Inverse 3D transform; returns the real part of the low crop_dims
    // corner. The 1D inverse includes the 1/n scaling, so the composition
    // is an exact (up to rounding) inverse of forward().
    volume<T> inverse_real(const cvolume<T>& f, vec3i crop_dims) {
        require(crop_dims.all_le(f.dims()), "fft inverse: crop exceeds transform dims");
        cvolume<T> tmp = f.clone();
        transform_all_axes(tmp, /*inverse=*/true);
        volume<T> out(crop_dims);
        for (std::int64_t i = 0; i < crop_dims.x; ++i)
            for (std::int64_t j = 0; j < crop_dims.y; ++j) {
                const complex_t* src = &tmp(i, j, 0);
                T* dst = &out(i, j, 0);
                for (std::int64_t l = 0; l < crop_dims.z; ++l) dst[l] = src[l].real();
            }
        count(transform_kind::inverse);
        return out;
    }

    // Lengths that have been planned so far (all threads).
    std::set<std::int64_t> planned_lengths() const {
        std::lock_guard<std::mutex> g(registry_mutex_);
        return planned_;
    }

    transform_counts counts() const {
        transform_counts s;
        for (int p = 0; p < 4; ++p)
            for (int k = 0; k < 3; ++k)
                s.counts[p][k] = counters_[p][k].load(std::memory_order_relaxed);
        return s;
    }

    void reset_counts() {
        for (auto& row : counters_)
            for (auto& c : row) c.store(0, std::memory_order_relaxed);
    }

private:
    void count(transform_kind k) {
        counters_[int(current_phase())][int(k)].fetch_add(1, std::memory_order_relaxed);
    }

    static Eigen::FFT<T>& engine() {
        thread_local Eigen::FFT<T> fft;
        return fft;
    }

    using line_buffer = std::vector<complex_t, pool_allocator<complex_t>>;

    static line_buffer& scratch(int which) {
        thread_local line_buffer bufs[2] = {
            line_buffer(pool_allocator<complex_t>(small_object_pool())),
            line_buffer(pool_allocator<complex_t>(small_object_pool()))};
        return bufs[which];
    }

    void note_length(std::int64_t len) {
        std::lock_guard<std::mutex> g(registry_mutex_);
        planned_.insert(len);
    }

    // One pass of 1D transforms along every line of the given axis.
    void transform_axis(cvolume<T>& f, int axis, bool inverse) {
        const vec3i d = f.dims();
        const std::int64_t len = d[axis];
        if (len == 1) return;
        note_length(len);
        auto& in = scratch(0);
        auto& out = scratch(1);
        if (std::int64_t(in.size()) < len) {
            in.resize(len);
            out.resize(len);
        }
        auto run_line = [&](complex_t* base, std::int64_t stride) {
            if (stride == 1) {
                if (inverse)
                    engine().inv(out.data(), base, len);
                else
                    engine().fwd(out.data(), base, len);
                for (std::int64_t t = 0; t < len; ++t) base[t] = out[t];
            } else {
                for (std::int64_t t = 0; t < len; ++t) in[t] = base[t * stride];
                if (inverse)
                    engine().inv(out.data(), in.data(), len);
                else
                    engine().fwd(out.data(), in.data(), len);
                for (std::int64_t t = 0; t < len; ++t) base[t * stride] = out[t];
            }
        };
        if (axis == 2) {
            for (std::int64_t i = 0; i < d.x; ++i)
                for (std::int64_t j = 0; j < d.y; ++j) run_line(&f(i, j, 0), 1);
        } else if (axis == 1) {
            for (std::int64_t i = 0; i < d.x; ++i)
                for (std::int64_t l = 0; l < d.z; ++l) run_line(&f(i, 0, l), d.z);
        } else {
            for (std::int64_t j = 0; j < d.y; ++j)
                for (std::int64_t l = 0; l < d.z; ++l) run_line(&f(0, j, l), d.y * d.z);
        }
    }

    void transform_all_axes(cvolume<T>& f, bool inverse) {
        transform_axis(f, 2, inverse);
        transform_axis(f, 1, inverse);
        transform_axis(f, 0, inverse);
    }

    mutable std::mutex registry_mutex_;
    std::set<std::int64_t> planned_;
    std::atomic<std::uint64_t> counters_[4][3] = {};
};

} // namespace znn
