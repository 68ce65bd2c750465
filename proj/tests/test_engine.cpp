#include <doctest.h>

#include <random>

#include "oracles.hpp"
#include "znn/engine.hpp"
#include "znn/netspec.hpp"

using namespace znn;

namespace {

// (input, desired) pairs held by the test; the same sample every round.
template <typename T>
struct fixed_source {
    typename engine<T>::sample s;

    static fixed_source make(const net_graph<T>& g, std::uint64_t seed) {
        std::mt19937 rng{std::uint32_t(seed)};
        fixed_source src;
        for (const auto& n : g.nodes) {
            if (n.role == node_role::input) {
                auto v = make_volume<T>(n.dims);
                fill_uniform(*v, rng, T(0), T(1));
                src.s.inputs.push_back(std::move(v));
            }
        }
        for (const auto& n : g.nodes)
            if (n.role == node_role::output) {
                auto v = make_volume<T>(n.dims);
                fill_uniform(*v, rng, T(0), T(1));
                src.s.desired.push_back(std::move(v));
            }
        return src;
    }

    typename engine<T>::sample_source fn() const {
        return [this](std::int64_t) -> const typename engine<T>::sample& { return s; };
    }
};

const char* tiny_spec =
    "[node in] role=input\n"
    "[node h0]\n[node h1]\n"
    "[node t0]\n[node t1]\n"
    "[node out0] role=output\n[node out1] role=output\n"
    "[edge c0] from=in to=h0 type=conv kernel=2,2,2\n"
    "[edge c1] from=in to=h1 type=conv kernel=2,2,2\n"
    "[edge t0] from=h0 to=t0 type=transfer fn=tanh\n"
    "[edge t1] from=h1 to=t1 type=transfer fn=logistic\n"
    "[edge c2] from=t0 to=out0 type=conv kernel=2,2,2\n"
    "[edge c3] from=t0 to=out1 type=conv kernel=2,2,2\n"
    "[edge c4] from=t1 to=out0 type=conv kernel=2,2,2\n"
    "[edge c5] from=t1 to=out1 type=conv kernel=2,2,2\n";

template <typename T>
std::vector<T> collect_params(const net_graph<T>& g) {
    std::vector<T> out;
    for (const auto& e : g.edges) {
        if (auto* c = std::get_if<conv_op<T>>(&e.op))
            for (std::int64_t i = 0; i < c->k.weights.size(); ++i)
                out.push_back(c->k.weights[i]);
        else if (auto* t = std::get_if<transfer_op<T>>(&e.op))
            out.push_back(t->fn.bias);
    }
    return out;
}

} // namespace

TEST_SUITE_BEGIN("engine");

TEST_CASE("one worker reproduces the straight-line reference over 5 rounds") {
    auto g = parse_netspec<double>(tiny_spec, {3, 3, 3});
    init_weights(g, 7);
    auto ref = g.clone();

    auto src = fixed_source<double>::make(g, 99);
    {
        typename engine<double>::config cfg;
        cfg.threads = 1;
        cfg.learning_rate = 0.05;
        engine<double> eng(g, compute_priorities(g), cfg);
        auto stats = eng.run(5, src.fn());
        CHECK(stats.size() == 5);

        std::vector<volume<double>> desired;
        for (auto& d : src.s.desired) desired.push_back(d->clone());
        for (int r = 0; r < 5; ++r) {
            const double ref_loss =
                oracle::net_train_round(ref, *src.s.inputs[0], desired, 0.05);
            CHECK(stats[std::size_t(r)].loss == doctest::Approx(ref_loss).epsilon(1e-9));
        }
    }
    auto pe = collect_params(g);
    auto pr = collect_params(ref);
    REQUIRE(pe.size() == pr.size());
    for (std::size_t i = 0; i < pe.size(); ++i)
        CHECK(pe[i] == doctest::Approx(pr[i]).epsilon(1e-6));
}

TEST_CASE("N=1 runs are bit-identical across repeats") {
    std::vector<float> p1, p2;
    for (int rep = 0; rep < 2; ++rep) {
        auto g = parse_netspec<float>(tiny_spec, {3, 3, 3});
        init_weights(g, 11);
        auto src = fixed_source<float>::make(g, 5);
        typename engine<float>::config cfg;
        cfg.threads = 1;
        engine<float> eng(g, compute_priorities(g), cfg);
        eng.run(4, src.fn());
        (rep == 0 ? p1 : p2) = collect_params(g);
    }
    REQUIRE(p1.size() == p2.size());
    for (std::size_t i = 0; i < p1.size(); ++i) REQUIRE(p1[i] == p2[i]);
}

TEST_CASE("multi-worker run stays close to single-worker parameters") {
    std::vector<float> p1, p4;
    for (int threads : {1, 4}) {
        auto g = parse_netspec<float>(tiny_spec, {3, 3, 3});
        init_weights(g, 13);
        auto src = fixed_source<float>::make(g, 17);
        typename engine<float>::config cfg;
        cfg.threads = threads;
        engine<float> eng(g, compute_priorities(g), cfg);
        eng.run(10, src.fn());
        (threads == 1 ? p1 : p4) = collect_params(g);
    }
    REQUIRE(p1.size() == p4.size());
    for (std::size_t i = 0; i < p1.size(); ++i)
        REQUIRE(double(std::abs(p1[i] - p4[i])) <=
                1e-3 * (1.0 + double(std::abs(p1[i]))));
}

TEST_CASE("force accounting at N=1: parked first-layer forwards, no waiting") {
    auto g = parse_netspec<float>(tiny_spec, {3, 3, 3});
    init_weights(g, 3);
    auto src = fixed_source<float>::make(g, 23);
    typename engine<float>::config cfg;
    cfg.threads = 1;
    engine<float> eng(g, compute_priorities(g), cfg);
    eng.run(6, src.fn());
    const auto c = eng.counters();
    // with one worker the backward pass reaches the first layer last, so
    // next-round forwards of the first layer park on the yet-uncreated
    // update; every parked or attached subtask runs exactly once
    CHECK(c.force_parked > 0);
    CHECK(c.force_completed > 0);
    CHECK(c.attached_executed == c.force_parked + c.force_executing);
    // every trainable edge is forced once per round after the first
    const std::uint64_t forces =
        c.force_completed + c.force_queued + c.force_executing + c.force_parked;
    std::uint64_t trainable = 0;
    for (const auto& e : g.edges)
        if (e.trainable()) ++trainable;
    CHECK(forces == trainable * 6);
    CHECK(c.blocked_on_update == 0);
    CHECK(c.queue.pops > 0);
}

TEST_CASE("eta=0 leaves parameters untouched") {
    auto g = parse_netspec<float>(tiny_spec, {3, 3, 3});
    init_weights(g, 29);
    const auto before = collect_params(g);
    auto src = fixed_source<float>::make(g, 31);
    typename engine<float>::config cfg;
    cfg.threads = 2;
    cfg.learning_rate = 0.0f;
    engine<float> eng(g, compute_priorities(g), cfg);
    eng.run(3, src.fn());
    const auto after = collect_params(g);
    REQUIRE(before == after);
}

TEST_CASE("zero backward image leaves parameters unchanged") {
    // desired == actual makes the loss gradient exactly zero
    auto g = parse_netspec<double>(
        "[node in] role=input\n[node out] role=output\n"
        "[edge c] from=in to=out type=conv kernel=2,2,2\n",
        {3, 3, 3});
    init_weights(g, 37);
    fixed_source<double> src;
    {
        std::mt19937 rng(41);
        auto in = make_volume<double>(vec3i{4, 4, 4});
        fill_uniform(*in, rng, 0.0, 1.0);
        auto& c = std::get<conv_op<double>>(g.edges[0].op);
        auto out = make_volume<double>(vec3i{3, 3, 3});
        *out = conv_valid_direct(*in, c.k);
        src.s.inputs.push_back(in);
        src.s.desired.push_back(out);
    }
    const auto before = collect_params(g);
    typename engine<double>::config cfg;
    cfg.threads = 1;
    cfg.learning_rate = 0.5;
    engine<double> eng(g, compute_priorities(g), cfg);
    auto stats = eng.run(2, src.fn());
    CHECK(stats[0].loss == doctest::Approx(0.0));
    CHECK(before == collect_params(g));
}

TEST_CASE("single SGD step matches finite differences on a 1-edge net") {
    auto g = parse_netspec<double>(
        "[node in] role=input\n[node out] role=output\n"
        "[edge c] from=in to=out type=conv kernel=2,2,2\n",
        {3, 3, 3});
    init_weights(g, 43);
    auto src = fixed_source<double>::make(g, 47);
    auto probe = g.clone();

    typename engine<double>::config cfg;
    cfg.threads = 1;
    cfg.learning_rate = 0.0;
    cfg.capture_gradients = true;
    engine<double> eng(g, compute_priorities(g), cfg);
    eng.run(1, src.fn());
    const volume<double>* grad = eng.captured_kernel_gradient(0);
    REQUIRE(grad != nullptr);

    // loss under perturbed weights via the independent forward evaluator
    auto loss_at = [&](std::int64_t i, double delta) {
        auto& k = std::get<conv_op<double>>(probe.edges[0].op).k;
        const double keep = k.weights[i];
        k.weights[i] += delta;
        auto imgs = oracle::net_forward(probe, *src.s.inputs[0]);
        k.weights[i] = keep;
        volume<double> diff(imgs[1].dims());
        diff.flat() = imgs[1].flat() - src.s.desired[0]->flat();
        return 0.5 * double(diff.flat().square().sum());
    };
    const double eps = 1e-6;
    for (std::int64_t i = 0; i < grad->size(); ++i) {
        const double fd = (loss_at(i, eps) - loss_at(i, -eps)) / (2 * eps);
        REQUIRE((*grad)[i] == doctest::Approx(fd).epsilon(1e-4));
    }
}

TEST_CASE("fft and direct engines train to matching losses") {
    std::vector<double> losses_direct, losses_fft;
    for (auto mode : {conv_engine::direct, conv_engine::fft}) {
        auto g = parse_netspec<float>(tiny_spec, {3, 3, 3});
        init_weights(g, 53);
        auto src = fixed_source<float>::make(g, 59);
        typename engine<float>::config cfg;
        cfg.threads = 2;
        cfg.edge_modes.assign(g.edges.size(), mode);
        engine<float> eng(g, compute_priorities(g), cfg);
        auto stats = eng.run(10, src.fn());
        auto& out = (mode == conv_engine::direct ? losses_direct : losses_fft);
        for (auto& s : stats) out.push_back(s.loss);
    }
    for (std::size_t i = 0; i < losses_direct.size(); ++i)
        CHECK(losses_fft[i] ==
              doctest::Approx(losses_direct[i]).epsilon(1e-3));
}

TEST_CASE("memoized and non-memoized fft runs are exactly identical at N=1") {
    std::vector<float> with, without;
    for (bool memo : {true, false}) {
        auto g = parse_netspec<float>(tiny_spec, {3, 3, 3});
        init_weights(g, 61);
        auto src = fixed_source<float>::make(g, 67);
        typename engine<float>::config cfg;
        cfg.threads = 1;
        cfg.memoize = memo;
        cfg.edge_modes.assign(g.edges.size(), conv_engine::fft);
        engine<float> eng(g, compute_priorities(g), cfg);
        eng.run(3, src.fn());
        (memo ? with : without) = collect_params(g);
    }
    REQUIRE(with.size() == without.size());
    for (std::size_t i = 0; i < with.size(); ++i) REQUIRE(with[i] == without[i]);
}

TEST_CASE("transform counts per fully connected layer match the memoized budget") {
    // one fully connected conv layer: f=3 inputs, f'=2 outputs
    const char* fc_spec =
        "[node i0] role=input\n[node i1] role=input\n[node i2] role=input\n"
        "[node o0] role=output\n[node o1] role=output\n"
        "[edge e00] from=i0 to=o0 type=conv kernel=3,3,3\n"
        "[edge e01] from=i0 to=o1 type=conv kernel=3,3,3\n"
        "[edge e10] from=i1 to=o0 type=conv kernel=3,3,3\n"
        "[edge e11] from=i1 to=o1 type=conv kernel=3,3,3\n"
        "[edge e20] from=i2 to=o0 type=conv kernel=3,3,3\n"
        "[edge e21] from=i2 to=o1 type=conv kernel=3,3,3\n";
    auto g = parse_netspec<float>(fc_spec, {6, 6, 6});
    init_weights(g, 71);

    fixed_source<float> src;
    {
        std::mt19937 rng(73);
        for (int i = 0; i < 3; ++i) {
            auto v = make_volume<float>(vec3i{8, 8, 8});
            fill_uniform(*v, rng, 0.0f, 1.0f);
            src.s.inputs.push_back(std::move(v));
        }
        for (int i = 0; i < 2; ++i) {
            auto v = make_volume<float>(vec3i{6, 6, 6});
            fill_uniform(*v, rng, 0.0f, 1.0f);
            src.s.desired.push_back(std::move(v));
        }
    }

    typename engine<float>::config cfg;
    cfg.threads = 1;
    cfg.memoize = true;
    cfg.edge_modes.assign(g.edges.size(), conv_engine::fft);
    engine<float> eng(g, compute_priorities(g), cfg);
    eng.run(2, src.fn()); // round 2 exercises the forced updates too
    const auto tc = eng.counters().transforms;

    const std::uint64_t f = 3, fp = 2, rounds = 2;
    using ck = transform_kind;
    using cp = compute_phase;
    // forward: f image transforms + f*f' kernel transforms + f' inverses
    CHECK(tc.of(cp::forward, ck::image_forward) == f * rounds);
    CHECK(tc.of(cp::forward, ck::kernel_forward) == f * fp * rounds);
    CHECK(tc.of(cp::forward, ck::inverse) == fp * rounds);
    // backward: f' new image transforms (of backward images) + f inverses,
    // zero new kernel transforms
    CHECK(tc.of(cp::backward, ck::image_forward) == fp * rounds);
    CHECK(tc.of(cp::backward, ck::kernel_forward) == 0);
    CHECK(tc.of(cp::backward, ck::inverse) == f * rounds);
    // update: only the gradient-specific inverses
    CHECK(tc.of(cp::update, ck::image_forward) == 0);
    CHECK(tc.of(cp::update, ck::kernel_forward) == 0);
    CHECK(tc.of(cp::update, ck::inverse) == f * fp * rounds);
}

TEST_CASE("liveness: rounds terminate with draining updates and no deadlock") {
    auto g = parse_netspec<float>(
        "[layered] seq=CTC width=2 kernel=2,2,2 fn=relu output=4,4,4\n");
    init_weights(g, 79);
    auto src = fixed_source<float>::make(g, 83);
    typename engine<float>::config cfg;
    cfg.threads = 3;
    engine<float> eng(g, compute_priorities(g), cfg);
    auto stats = eng.run(8, src.fn()); // run() asserts all updates completed
    CHECK(stats.size() == 8);
    // one fwd accumulator completion per node per round, one bwd likewise
    CHECK(eng.accumulator_completions() == 2 * g.nodes.size() * 8);
}

TEST_SUITE_END();
