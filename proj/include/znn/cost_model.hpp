#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "znn/types.hpp"

namespace znn {

// Symbolic FLOP and critical-path model for layered networks. Work formulas
// follow the per-layer operation counts of a fully connected convolutional
// layer (direct, FFT-based, FFT-based with memoization) and of the
// nonlinear filtering layers; span formulas add the ceil(log2 f) binary
// collapse term for summing convergent convolutions. FFT complexity of an
// n^3 image is taken as C*n^3*log2(n^3) = 3*C*n^3*log2(n), with C
// defaulting to 5. Logs are base 2 throughout.
//
// The direct columns use the valid-output side n', the FFT columns the
// input side n, exactly as the model prescribes; the model is not
// "corrected". The backward direct span likewise mixes n'^3*k^3 with
// n^3*ceil(log2 f').

enum class conv_cost_mode { direct, fft, fft_memoized };
enum class cost_pass { forward, backward, update, total };
enum class nonconv_kind { pooling, filtering, transfer };

inline double default_fft_constant() { return 5.0; }

// Fully connected convolutional layer mapping f input images of side n to
// fp output images of side n_out = n - k + 1 using f*fp kernels of side k.
struct conv_layer_dims {
    double f = 1;      // input width
    double fp = 1;     // output width f'
    double n = 1;      // input image side
    double n_out = 1;  // valid output side n'
    double k = 1;      // kernel side
};

namespace cost_detail {
inline double log2d(double v) { return std::log2(v); }
inline double ceil_log2(double f) { return f <= 1 ? 0.0 : std::ceil(std::log2(f)); }
} // namespace cost_detail

// Work (total FLOPs) of one pass over a fully connected convolutional layer.
inline double flops_conv_layer(const conv_layer_dims& d, conv_cost_mode mode, cost_pass pass,
                               double C = default_fft_constant()) {
    using cost_detail::log2d;
    const double f = d.f, fp = d.fp, n = d.n, np = d.n_out, k = d.k;
    const double n3 = n * n * n, np3 = np * np * np, k3 = k * k * k;
    const double fft_all = 3 * C * n3 * log2d(n);

    if (pass == cost_pass::total)
        return flops_conv_layer(d, mode, cost_pass::forward, C) +
               flops_conv_layer(d, mode, cost_pass::backward, C) +
               flops_conv_layer(d, mode, cost_pass::update, C);

    switch (mode) {
        case conv_cost_mode::direct:
            return fp * f * np3 * k3;
        case conv_cost_mode::fft:
            return fft_all * (fp + f + fp * f) + 4 * fp * f * n3;
        case conv_cost_mode::fft_memoized:
            switch (pass) {
                case cost_pass::forward:
                    return fft_all * (fp + f + fp * f) + 4 * fp * f * n3;
                case cost_pass::backward:
                    return fft_all * (fp + f) + 4 * fp * f * n3;
                case cost_pass::update:
                    return fft_all * (fp * f) + 4 * fp * f * n3;
                default: break;
            }
    }
    return 0;
}

// Work of one pass over a width-f layer of identical nonlinear filters.
// Pooling and filtering have no update pass (zero FLOPs).
inline double flops_nonconv_layer(double f, double n, double k, nonconv_kind kind,
                                  cost_pass pass) {
    using cost_detail::log2d;
    const double n3 = n * n * n;
    if (pass == cost_pass::total)
        return flops_nonconv_layer(f, n, k, kind, cost_pass::forward) +
               flops_nonconv_layer(f, n, k, kind, cost_pass::backward) +
               flops_nonconv_layer(f, n, k, kind, cost_pass::update);
    switch (kind) {
        case nonconv_kind::pooling:
            return pass == cost_pass::update ? 0 : f * n3;
        case nonconv_kind::filtering:
            if (pass == cost_pass::forward) return f * 6 * n3 * log2d(k);
            return pass == cost_pass::update ? 0 : f * n3;
        case nonconv_kind::transfer:
            return f * n3;
    }
    return 0;
}

// Span (time with unbounded processors) of one pass over a fully connected
// convolutional layer.
inline double t_inf_conv_layer(const conv_layer_dims& d, conv_cost_mode mode, cost_pass pass,
                               double C = default_fft_constant()) {
    using cost_detail::ceil_log2;
    using cost_detail::log2d;
    const double f = d.f, fp = d.fp, n = d.n, np = d.n_out, k = d.k;
    const double n3 = n * n * n, np3 = np * np * np, k3 = k * k * k;
    const double fft2 = 6 * C * n3 * log2d(n);

    switch (mode) {
        case conv_cost_mode::direct:
            switch (pass) {
                case cost_pass::forward: return np3 * k3 + np3 * ceil_log2(f);
                case cost_pass::backward: return np3 * k3 + n3 * ceil_log2(fp);
                case cost_pass::update: return np3 * k3;
                default: break;
            }
            break;
        case conv_cost_mode::fft:
            switch (pass) {
                case cost_pass::forward: return fft2 + 4 * n3 * ceil_log2(f);
                case cost_pass::backward: return fft2 + 4 * n3 * ceil_log2(fp);
                case cost_pass::update: return fft2 + 4 * n3;
                default: break;
            }
            break;
        case conv_cost_mode::fft_memoized:
            switch (pass) {
                case cost_pass::forward: return fft2 + 4 * n3 * ceil_log2(f);
                case cost_pass::backward: return fft2 + 4 * n3 * ceil_log2(fp);
                case cost_pass::update: return 3 * C * n3 * log2d(n) + 4 * n3;
                default: break;
            }
            break;
    }
    return 0;
}

// Span of one pass over a nonlinear filtering layer; width-independent.
inline double t_inf_nonconv_layer(double n, double k, nonconv_kind kind, cost_pass pass) {
    using cost_detail::log2d;
    const double n3 = n * n * n;
    switch (kind) {
        case nonconv_kind::pooling:
            return pass == cost_pass::update ? 0 : n3;
        case nonconv_kind::filtering:
            if (pass == cost_pass::forward) return 6 * n3 * log2d(k);
            return pass == cost_pass::update ? 0 : n3;
        case nonconv_kind::transfer:
            return n3;
    }
    return 0;
}

// Theoretically achievable speedup on P processors given total work T1 and
// span Tinf:  S_P >= S_inf / (1 + (S_inf - 1)/P)  with  S_inf = T1/Tinf.
inline double brent_speedup(double t1, double t_inf, double p) {
    require(t_inf > 0, "brent_speedup: span must be positive");
    require(t1 >= t_inf, "brent_speedup: work must be at least the span");
    const double s_inf = t1 / t_inf;
    return s_inf / (1.0 + (s_inf - 1.0) / p);
}

// One layer of a layered cost description.
struct cost_layer {
    bool is_conv = false;
    conv_layer_dims conv;      // when is_conv
    double f = 1;              // width (nonconv)
    double n = 1;              // image side (nonconv)
    double k = 1;              // window side (nonconv)
    nonconv_kind kind = nonconv_kind::transfer;
};

struct iteration_cost {
    double t1 = 0;
    double t_inf = 0;
};

// One gradient iteration over a layered network: layers run sequentially in
// each pass (span adds), all updates run in parallel (span takes the max).
inline iteration_cost cost_of_iteration(const std::vector<cost_layer>& layers,
                                        conv_cost_mode mode,
                                        double C = default_fft_constant()) {
    iteration_cost total;
    double update_span_max = 0;
    for (const auto& l : layers) {
        for (cost_pass pass : {cost_pass::forward, cost_pass::backward, cost_pass::update}) {
            double work, span;
            if (l.is_conv) {
                work = flops_conv_layer(l.conv, mode, pass, C);
                span = t_inf_conv_layer(l.conv, mode, pass, C);
            } else {
                work = flops_nonconv_layer(l.f, l.n, l.k, l.kind, pass);
                span = t_inf_nonconv_layer(l.n, l.k, l.kind, pass);
            }
            total.t1 += work;
            if (pass == cost_pass::update)
                update_span_max = std::max(update_span_max, span);
            else
                total.t_inf += span;
        }
    }
    total.t_inf += update_span_max;
    return total;
}

// Smallest kernel side at which the FFT engine beats the direct engine over
// a full iteration of a width f=f'=1... layer, by exhaustive scan. The FFT
// cost does not depend on k, so the crossover exists whenever it is below
// the direct cost at k = n.
inline std::int64_t crossover_kernel_size(std::int64_t n, double C,
                                          conv_cost_mode fft_flavor = conv_cost_mode::fft,
                                          double f = 1, double fp = 1) {
    for (std::int64_t k = 1; k <= n; ++k) {
        conv_layer_dims d{f, fp, double(n), double(n - k + 1), double(k)};
        const double direct = flops_conv_layer(d, conv_cost_mode::direct, cost_pass::total, C);
        const double fft = flops_conv_layer(d, fft_flavor, cost_pass::total, C);
        if (fft < direct) return k;
    }
    return n + 1; // FFT never wins at this size
}

} // namespace znn
