#include <doctest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "znn/transfer.hpp"

using namespace znn;

TEST_SUITE_BEGIN("transfer");

TEST_CASE("relu at zero input gives zeros, logistic gives 0.5") {
    volume<float> x({2, 2, 2}, 0.0f);
    auto r = transfer_forward(x, transfer_fn<float>{transfer_kind::rectified_linear, 0.0f});
    CHECK(r.flat().abs().maxCoeff() == 0.0f);
    auto l = transfer_forward(x, transfer_fn<float>{transfer_kind::logistic, 0.0f});
    CHECK(l.flat().minCoeff() == doctest::Approx(0.5f));
    CHECK(l.flat().maxCoeff() == doctest::Approx(0.5f));
}

TEST_CASE("tanh with bias matches scalar evaluation loop") {
    std::mt19937 rng(3);
    volume<double> x = oracle::random_volume<double>({3, 3, 3}, rng);
    auto out = transfer_forward(x, transfer_fn<double>{transfer_kind::hyperbolic_tangent, 0.1});
    for (std::int64_t i = 0; i < x.size(); ++i)
        CHECK(out[i] == doctest::Approx(std::tanh(x[i] + 0.1)).epsilon(1e-12));
}

TEST_CASE("relu backward saturates exactly") {
    std::mt19937 rng(4);
    volume<double> g = oracle::random_volume<double>({2, 2, 2}, rng);
    transfer_fn<double> f{transfer_kind::rectified_linear, 0.0};

    volume<double> pos({2, 2, 2}, 1.5);
    auto bp = transfer_backward(g, pos, f);
    CHECK(oracle::inner(bp, bp) == doctest::Approx(oracle::inner(g, g)));

    volume<double> neg({2, 2, 2}, -1.5);
    auto bn = transfer_backward(g, neg, f);
    CHECK(bn.flat().abs().maxCoeff() == 0.0);
}

TEST_CASE("shape mismatch rejected") {
    volume<double> g({2, 2, 2}, 0.0), x({2, 2, 3}, 0.0);
    CHECK_THROWS_AS(transfer_backward(g, x, transfer_fn<double>{}), structural_error);
}

static double central_diff(transfer_kind k, double x, double eps = 1e-6) {
    return (transfer_value(k, x + eps) - transfer_value(k, x - eps)) / (2 * eps);
}

TEST_CASE("derivatives match central finite differences, 1000 scalars per kind") {
    std::mt19937 rng(5);
    std::uniform_real_distribution<double> dist(-3.0, 3.0);
    for (transfer_kind k : {transfer_kind::logistic, transfer_kind::hyperbolic_tangent,
                            transfer_kind::rectified_linear}) {
        for (int i = 0; i < 1000; ++i) {
            double x = dist(rng);
            if (k == transfer_kind::rectified_linear && std::abs(x) < 1e-4) continue;
            CHECK(transfer_derivative(k, x) ==
                  doctest::Approx(central_diff(k, x)).epsilon(1e-6));
        }
    }
}

TEST_CASE("logistic backward matches finite differences through the volume op") {
    std::mt19937 rng(6);
    volume<double> x = oracle::random_volume<double>({3, 3, 3}, rng);
    volume<double> g = oracle::random_volume<double>({3, 3, 3}, rng);
    transfer_fn<double> f{transfer_kind::logistic, 0.2};
    auto bwd = transfer_backward(g, x, f);
    const double eps = 1e-6;
    for (std::int64_t i = 0; i < x.size(); ++i) {
        const double fd =
            (transfer_value(f.kind, x[i] + f.bias + eps) -
             transfer_value(f.kind, x[i] + f.bias - eps)) /
            (2 * eps);
        CHECK(bwd[i] == doctest::Approx(fd * g[i]).epsilon(1e-6));
    }
}

TEST_CASE("bias gradient is the voxel sum") {
    volume<double> z({4, 4, 4}, 0.0);
    CHECK(bias_gradient(z) == 0.0);
    volume<double> ones({2, 2, 2}, 1.0);
    CHECK(bias_gradient(ones) == 8.0);
    std::mt19937 rng(7);
    volume<double> r = oracle::random_volume<double>({3, 3, 3}, rng);
    double serial = 0.0;
    for (std::int64_t i = 0; i < r.size(); ++i) serial += r[i];
    CHECK(bias_gradient(r) == doctest::Approx(serial).epsilon(1e-12));
}

TEST_CASE("fused transfer bias gradient equals composed ops") {
    std::mt19937 rng(8);
    volume<double> x = oracle::random_volume<double>({3, 4, 2}, rng);
    volume<double> g = oracle::random_volume<double>({3, 4, 2}, rng);
    transfer_fn<double> f{transfer_kind::hyperbolic_tangent, -0.3};
    CHECK(transfer_bias_gradient(x, g, f) ==
          doctest::Approx(bias_gradient(transfer_backward(g, x, f))).epsilon(1e-12));
}

TEST_SUITE_END();
