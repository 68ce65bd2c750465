#pragma once

#include <cmath>
#include <string>

#include "znn/types.hpp"
#include "znn/volume.hpp"

namespace znn {

enum class transfer_kind { logistic, hyperbolic_tangent, rectified_linear };

inline std::string to_string(transfer_kind k) {
    switch (k) {
        case transfer_kind::logistic: return "logistic";
        case transfer_kind::hyperbolic_tangent: return "tanh";
        case transfer_kind::rectified_linear: return "relu";
    }
    return "?";
}

// Adds the bias to each voxel and applies the pointwise nonlinearity.
template <typename T>
struct transfer_fn {
    transfer_kind kind = transfer_kind::rectified_linear;
    T bias = T(0);
};

template <typename T>
T transfer_value(transfer_kind k, T x) {
    switch (k) {
        case transfer_kind::logistic: return T(1) / (T(1) + std::exp(-x));
        case transfer_kind::hyperbolic_tangent: return std::tanh(x);
        case transfer_kind::rectified_linear: return x > T(0) ? x : T(0);
    }
    return T(0);
}

// Derivative consistent with transfer_value; relu'(0) is defined as 0.
template <typename T>
T transfer_derivative(transfer_kind k, T x) {
    switch (k) {
        case transfer_kind::logistic: {
            const T v = T(1) / (T(1) + std::exp(-x));
            return v * (T(1) - v);
        }
        case transfer_kind::hyperbolic_tangent: {
            const T v = std::tanh(x);
            return T(1) - v * v;
        }
        case transfer_kind::rectified_linear: return x > T(0) ? T(1) : T(0);
    }
    return T(0);
}

// out[i] = phi(x[i] + bias). Non-finite inputs propagate; divergence is
// detected downstream by the trainer.
template <typename T>
volume<T> transfer_forward(const volume<T>& x, const transfer_fn<T>& f) {
    volume<T> out(x.dims());
    switch (f.kind) {
        case transfer_kind::logistic:
            out.flat() = T(1) / (T(1) + (-(x.flat() + f.bias)).exp());
            break;
        case transfer_kind::hyperbolic_tangent:
            out.flat() = (x.flat() + f.bias).tanh();
            break;
        case transfer_kind::rectified_linear:
            out.flat() = (x.flat() + f.bias).max(T(0));
            break;
    }
    return out;
}

// out[i] = g_out[i] * phi'(x_fwd[i] + bias), where x_fwd is the forward
// input image of the edge.
template <typename T>
volume<T> transfer_backward(const volume<T>& g_out, const volume<T>& x_fwd,
                            const transfer_fn<T>& f) {
    require_f(g_out.dims() == x_fwd.dims(), [&] {
        return "transfer_backward: shape mismatch " + g_out.dims().str() + " vs " +
               x_fwd.dims().str();
    });
    volume<T> out(x_fwd.dims());
    switch (f.kind) {
        case transfer_kind::logistic: {
            out.flat() = T(1) / (T(1) + (-(x_fwd.flat() + f.bias)).exp());
            out.flat() = g_out.flat() * out.flat() * (T(1) - out.flat());
            break;
        }
        case transfer_kind::hyperbolic_tangent: {
            out.flat() = (x_fwd.flat() + f.bias).tanh();
            out.flat() = g_out.flat() * (T(1) - out.flat().square());
            break;
        }
        case transfer_kind::rectified_linear:
            out.flat() = ((x_fwd.flat() + f.bias) > T(0)).template cast<T>() * g_out.flat();
            break;
    }
    return out;
}

// Sum of all voxels of the backward image; the bias gradient.
template <typename T>
T bias_gradient(const volume<T>& g) {
    return g.flat().sum();
}

// Bias gradient computed from the edge's captured images: the sum of
// g_out * phi'(x_fwd + bias) without materializing the product volume.
template <typename T>
T transfer_bias_gradient(const volume<T>& x_fwd, const volume<T>& g_out,
                         const transfer_fn<T>& f) {
    require(g_out.dims() == x_fwd.dims(), "transfer_bias_gradient: shape mismatch");
    T acc = T(0);
    const T* x = x_fwd.data();
    const T* g = g_out.data();
    for (std::int64_t i = 0, e = x_fwd.size(); i < e; ++i)
        acc += g[i] * transfer_derivative(f.kind, x[i] + f.bias);
    return acc;
}

} // namespace znn
