#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <random>

#include "znn/cost_model.hpp"

using namespace znn;

TEST_SUITE_BEGIN("cost_model");

TEST_CASE("direct forward example: f=f'=2, n'=2, k=3 gives 864") {
    conv_layer_dims d{2, 2, 4, 2, 3};
    CHECK(flops_conv_layer(d, conv_cost_mode::direct, cost_pass::forward) == 864.0);
}

TEST_CASE("direct total is three times one pass") {
    conv_layer_dims d{3, 5, 12, 10, 3};
    const double fwd = flops_conv_layer(d, conv_cost_mode::direct, cost_pass::forward);
    CHECK(flops_conv_layer(d, conv_cost_mode::direct, cost_pass::total) == 3 * fwd);
}

TEST_CASE("memoized total equals fft total minus one full transform set") {
    conv_layer_dims d{4, 6, 16, 14, 3};
    const double C = 5.0;
    const double n3 = 16.0 * 16 * 16;
    const double transform_set = 3 * C * n3 * std::log2(16.0) * (6 + 4 + 6 * 4);
    const double fft = flops_conv_layer(d, conv_cost_mode::fft, cost_pass::total, C);
    const double memo = flops_conv_layer(d, conv_cost_mode::fft_memoized, cost_pass::total, C);
    CHECK(memo == doctest::Approx(fft - transform_set).epsilon(1e-12));
}

TEST_CASE("nonconv work: pooling has no update pass") {
    CHECK(flops_nonconv_layer(3, 8, 2, nonconv_kind::pooling, cost_pass::update) == 0.0);
    CHECK(flops_nonconv_layer(3, 8, 2, nonconv_kind::filtering, cost_pass::update) == 0.0);
}

TEST_CASE("filtering forward: f=2, n=4, k=2 gives 768") {
    CHECK(flops_nonconv_layer(2, 4, 2, nonconv_kind::filtering, cost_pass::forward) == 768.0);
}

TEST_CASE("transfer total over three passes is 3*f*n^3") {
    CHECK(flops_nonconv_layer(2, 4, 1, nonconv_kind::transfer, cost_pass::total) ==
          3.0 * 2 * 64);
}

TEST_CASE("span: direct forward n'=2, k=3, f=4 gives 232") {
    conv_layer_dims d{4, 1, 4, 2, 3};
    CHECK(t_inf_conv_layer(d, conv_cost_mode::direct, cost_pass::forward) == 232.0);
}

TEST_CASE("span: collapse term vanishes at width 1") {
    conv_layer_dims d{1, 1, 4, 2, 3};
    CHECK(t_inf_conv_layer(d, conv_cost_mode::direct, cost_pass::forward) == 8.0 * 27);
}

TEST_CASE("span: memoized update is 3*C*n^3*log n + 4n^3") {
    conv_layer_dims d{4, 4, 8, 6, 3};
    const double expect = 3 * 5.0 * 512 * 3 + 4 * 512;
    CHECK(t_inf_conv_layer(d, conv_cost_mode::fft_memoized, cost_pass::update) == expect);
}

TEST_CASE("brent bound degenerate and limit behavior") {
    CHECK(brent_speedup(100, 100, 7) == 1.0);                       // S_inf = 1
    CHECK(brent_speedup(1e6, 1.0, 1e15) == doctest::Approx(1e6));   // P -> inf gives S_inf
    CHECK_THROWS_AS(brent_speedup(10, 0, 4), structural_error);
    CHECK_THROWS_AS(brent_speedup(1, 2, 4), structural_error);
}

TEST_CASE("brent bound never exceeds min(P, T1/Tinf)") {
    std::mt19937 rng(3);
    std::uniform_real_distribution<double> dist{1.0, 1e9};
    for (int i = 0; i < 1000; ++i) {
        double t_inf = dist(rng);
        double t1 = t_inf * (1.0 + dist(rng) / 1e3);
        double p = 1.0 + double(rng() % 256);
        double s = brent_speedup(t1, t_inf, p);
        CHECK(s <= std::min(p, t1 / t_inf) * (1 + 1e-12));
    }
}

static std::vector<cost_layer> layered_conv_net(int depth, double width, double k,
                                                double out_side) {
    // depth conv layers, each followed by a transfer layer, widths
    // 1 -> w -> w -> ... -> w, sides grown backward from the output patch
    std::vector<cost_layer> layers;
    double side = out_side;
    std::vector<double> sides(depth);
    for (int i = depth - 1; i >= 0; --i) {
        sides[i] = side + k - 1; // conv input side
        side = sides[i];
    }
    for (int i = 0; i < depth; ++i) {
        cost_layer conv;
        conv.is_conv = true;
        conv.conv = conv_layer_dims{i == 0 ? 1.0 : width, width, sides[i], sides[i] - k + 1,
                                    k};
        layers.push_back(conv);
        cost_layer t;
        t.f = width;
        t.n = sides[i] - k + 1;
        t.kind = nonconv_kind::transfer;
        layers.push_back(t);
    }
    return layers;
}

TEST_CASE("achievable speedup curves: monotone in width, saturating, 75% width grows with P") {
    const std::vector<double> widths{5, 10, 15, 20, 25, 30, 40, 50, 60, 80, 100, 120};
    const std::vector<double> procs{4, 8, 18, 40, 64};
    for (conv_cost_mode mode : {conv_cost_mode::direct, conv_cost_mode::fft_memoized}) {
        for (int depth : {4, 12, 40}) {
            for (double p : procs) {
                double prev = 0;
                for (double w : widths) {
                    auto c = cost_of_iteration(layered_conv_net(depth, w, 5, 12), mode);
                    double s = brent_speedup(c.t1, c.t_inf, p);
                    CHECK(s >= prev * (1 - 1e-9)); // monotone nondecreasing in width
                    CHECK(s <= p * (1 + 1e-12));
                    prev = s;
                }
                // saturation: very wide nets approach P
                auto big = cost_of_iteration(layered_conv_net(depth, 4096, 5, 12), mode);
                CHECK(brent_speedup(big.t1, big.t_inf, p) >= 0.95 * p);
            }
            // width needed to reach 75% of P grows with P
            double prev_need = 0;
            for (double p : procs) {
                double need = 1e18;
                for (double w = 1; w <= 4096; w += 1) {
                    auto c = cost_of_iteration(layered_conv_net(depth, w, 5, 12), mode);
                    if (brent_speedup(c.t1, c.t_inf, p) >= 0.75 * p) {
                        need = w;
                        break;
                    }
                }
                CHECK(need >= prev_need);
                prev_need = need;
            }
        }
    }
}

TEST_CASE("crossover kernel size shrinks with width and with memoization") {
    for (std::int64_t n : {16, 32, 64, 128}) {
        const auto k1 = crossover_kernel_size(n, 5.0, conv_cost_mode::fft, 1, 1);
        const auto k8 = crossover_kernel_size(n, 5.0, conv_cost_mode::fft, 8, 8);
        const auto km = crossover_kernel_size(n, 5.0, conv_cost_mode::fft_memoized, 1, 1);
        CHECK(k8 <= k1);
        CHECK(km <= k1);
    }
}

TEST_CASE("crossover at n=64, C=5 pinned by exhaustive scan") {
    // frozen from the scan over k = 1..n of both totals
    const std::int64_t k = crossover_kernel_size(64, 5.0);
    conv_layer_dims before{1, 1, 64, double(64 - (k - 2)), double(k - 1)};
    conv_layer_dims at{1, 1, 64, double(64 - (k - 1)), double(k)};
    CHECK(flops_conv_layer(before, conv_cost_mode::direct, cost_pass::total) <=
          flops_conv_layer(before, conv_cost_mode::fft, cost_pass::total));
    CHECK(flops_conv_layer(at, conv_cost_mode::fft, cost_pass::total) <
          flops_conv_layer(at, conv_cost_mode::direct, cost_pass::total));
    // k^3 ~ log n scaling keeps the crossover in single digits here
    CHECK(k >= 2);
    CHECK(k <= 16);
}

TEST_SUITE_END();
