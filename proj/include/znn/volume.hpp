#pragma once

#include <Eigen/Core>

#include <cassert>
#include <cmath>
#include <complex>
#include <cstring>
#include <memory>
#include <random>
#include <utility>

#include "znn/mempool.hpp"
#include "znn/types.hpp"

namespace znn {

// Dense 3D array of scalars with shape metadata; the universal container for
// images, kernels, gradients and argmax records.
//
// Flat layout is x-major: index(i,j,l) = (i*ny + j)*nz + l, so x is the
// slowest-varying axis and z-rows are contiguous. Every module in this
// project assumes this one layout.
//
// Storage comes from the global volume pool (64-byte aligned) and is
// recycled on destruction. Volumes are move-only; copying is explicit via
// clone().
template <typename T>
class volume {
public:
    using scalar = T;
    using flat_map = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>, Eigen::Aligned64>;
    using const_flat_map = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>, Eigen::Aligned64>;

    explicit volume(vec3i dims, chunk_pool& pool = volume_pool())
        : dims_(dims), pool_(&pool) {
        require_f(dims.all_positive(),
                  [&] { return "volume dims must be positive, got " + dims.str(); });
        bytes_ = std::size_t(dims.product()) * sizeof(T);
        data_ = static_cast<T*>(pool_->acquire(bytes_));
    }

    volume(vec3i dims, T fill_value, chunk_pool& pool = volume_pool()) : volume(dims, pool) {
        fill(fill_value);
    }

    volume(const volume&) = delete;
    volume& operator=(const volume&) = delete;

    volume(volume&& o) noexcept
        : dims_(o.dims_), bytes_(o.bytes_), data_(o.data_), pool_(o.pool_) {
        o.data_ = nullptr;
    }

    volume& operator=(volume&& o) noexcept {
        if (this != &o) {
            destroy();
            dims_ = o.dims_;
            bytes_ = o.bytes_;
            data_ = o.data_;
            pool_ = o.pool_;
            o.data_ = nullptr;
        }
        return *this;
    }

    ~volume() { destroy(); }

    vec3i dims() const { return dims_; }
    std::int64_t size() const { return dims_.product(); }

    T* data() { return data_; }
    const T* data() const { return data_; }

    flat_map flat() { return flat_map(data_, size()); }
    const_flat_map flat() const { return const_flat_map(data_, size()); }

    std::int64_t index(std::int64_t i, std::int64_t j, std::int64_t l) const {
        return (i * dims_.y + j) * dims_.z + l;
    }

    T& operator()(std::int64_t i, std::int64_t j, std::int64_t l) {
        return data_[index(i, j, l)];
    }
    const T& operator()(std::int64_t i, std::int64_t j, std::int64_t l) const {
        return data_[index(i, j, l)];
    }

    T& operator[](std::int64_t flat_idx) { return data_[flat_idx]; }
    const T& operator[](std::int64_t flat_idx) const { return data_[flat_idx]; }

    void fill(T v) { flat().setConstant(v); }
    void set_zero() { flat().setZero(); }

    volume clone() const {
        volume out(dims_, *pool_);
        std::memcpy(out.data_, data_, bytes_);
        return out;
    }

private:
    void destroy() {
        if (data_) pool_->release(data_, bytes_);
        data_ = nullptr;
    }

    vec3i dims_;
    std::size_t bytes_ = 0;
    T* data_ = nullptr;
    chunk_pool* pool_;
};

template <typename T>
using vol_p = std::shared_ptr<volume<T>>;
template <typename T>
using cvolume = volume<std::complex<T>>;
template <typename T>
using cvol_p = std::shared_ptr<cvolume<T>>;

// Shared volume whose payload and control block both come from the pools,
// keeping the steady-state training loop free of system allocations.
template <typename T, typename... Args>
vol_p<T> make_volume(vec3i dims, Args&&... args) {
    return std::allocate_shared<volume<T>>(pool_allocator<volume<T>>(small_object_pool()),
                                           dims, std::forward<Args>(args)...);
}

template <typename T>
cvol_p<T> make_cvolume(vec3i dims) {
    return std::allocate_shared<cvolume<T>>(pool_allocator<cvolume<T>>(small_object_pool()),
                                            dims);
}

template <typename T>
vol_p<T> share(volume<T>&& v) {
    return std::allocate_shared<volume<T>>(pool_allocator<volume<T>>(small_object_pool()),
                                           std::move(v));
}

// out[i,j,l] = x[nx-1-i, ny-1-j, nz-1-l]; an involution.
template <typename T>
volume<T> reflect(const volume<T>& x) {
    const vec3i n = x.dims();
    volume<T> out(n);
    for (std::int64_t i = 0; i < n.x; ++i)
        for (std::int64_t j = 0; j < n.y; ++j)
            for (std::int64_t l = 0; l < n.z; ++l)
                out(i, j, l) = x(n.x - 1 - i, n.y - 1 - j, n.z - 1 - l);
    return out;
}

template <typename T>
void fill_uniform(volume<T>& v, std::mt19937& rng, T lo = T(0), T hi = T(1)) {
    std::uniform_real_distribution<double> dist{double(lo), double(hi)};
    T* p = v.data();
    for (std::int64_t i = 0, e = v.size(); i < e; ++i) p[i] = T(dist(rng));
}

template <typename T>
bool all_finite(const volume<T>& v) {
    return v.flat().isFinite().all();
}

template <typename T>
T max_abs_diff(const volume<T>& a, const volume<T>& b) {
    assert(a.dims() == b.dims());
    return (a.flat() - b.flat()).abs().maxCoeff();
}

// max_i |a_i - b_i| / (|b_i| + 1); the relative error used by the
// direct-vs-FFT equivalence contracts.
template <typename T>
T max_rel_error(const volume<T>& a, const volume<T>& b) {
    assert(a.dims() == b.dims());
    return ((a.flat() - b.flat()).abs() / (b.flat().abs() + T(1))).maxCoeff();
}

} // namespace znn
