#include <doctest.h>

#include <random>
#include <set>

#include "oracles.hpp"
#include "znn/netspec.hpp"
#include "znn/taskgraph.hpp"

using namespace znn;

TEST_SUITE_BEGIN("taskgraph");

TEST_CASE("one-edge conv net derives 5 tasks in a single chain") {
    auto g = parse_netspec<float>(
        "[node in] role=input\n[node out] role=output dims=3,3,3\n"
        "[edge c] from=in to=out type=conv kernel=2,2,2\n");
    auto pt = compute_priorities(g);
    auto tg = build_taskgraph(g, pt);
    CHECK(tg.tasks.size() == 5);
    CHECK(tg.count(task_kind::data_provider) == 1);
    CHECK(tg.count(task_kind::forward) == 1);
    CHECK(tg.count(task_kind::backward) == 1);
    CHECK(tg.count(task_kind::update) == 1);
    CHECK(tg.count(task_kind::loss_gradient) == 1);

    const int dp = tg.index_of(task_kind::data_provider, -1);
    const int f = tg.index_of(task_kind::forward, 0);
    const int b = tg.index_of(task_kind::backward, 0);
    const int u = tg.index_of(task_kind::update, 0);
    const int lg = tg.index_of(task_kind::loss_gradient, 1);
    CHECK(tg.depends(dp, f));
    CHECK(tg.depends(f, lg));
    CHECK(tg.depends(lg, b));
    CHECK(tg.depends(f, u));
    CHECK(tg.depends(b, u));
    CHECK(tg.next_iter_deps == std::vector<std::pair<int, int>>{{u, f}});
}

TEST_CASE("task counts: pooling and filtering edges contribute no update task") {
    auto g = parse_netspec<float>(
        "[layered] seq=CTMCTMCTCT width=3 kernel=3,3,3 pool=2,2,2 fn=relu output=12,12,12\n");
    auto tg = build_taskgraph(g, compute_priorities(g));
    std::size_t trainable = 0;
    for (const auto& e : g.edges)
        if (e.trainable()) ++trainable;
    CHECK(tg.count(task_kind::forward) == g.edges.size());
    CHECK(tg.count(task_kind::backward) == g.edges.size());
    CHECK(tg.count(task_kind::update) == trainable);
    std::size_t outputs = 0;
    for (const auto& n : g.nodes)
        if (n.role == node_role::output) ++outputs;
    CHECK(tg.count(task_kind::loss_gradient) == outputs);
    // update tasks sit in the dedicated lowest band
    for (const auto& t : tg.tasks)
        if (t.kind == task_kind::update) CHECK(t.priority == int(g.edges.size()));
}

TEST_CASE("dependency closure matches an independent rule checker on random DAGs") {
    std::mt19937 rng(17);
    for (int trial = 0; trial < 10; ++trial) {
        net_graph<float> g;
        const int in = g.add_node("in", node_role::input);
        const int a = g.add_node("a", node_role::internal);
        const int b = g.add_node("b", node_role::internal);
        const int out = g.add_node("out", node_role::output);
        int eid = 0;
        auto conv = [&] {
            return conv_op<float>{kernel<float>(volume<float>({1, 1, 1}, 1.f))};
        };
        g.add_edge("e" + std::to_string(eid++), in, a, conv());
        g.add_edge("e" + std::to_string(eid++), in, b, conv());
        g.add_edge("e" + std::to_string(eid++), a, out, conv());
        g.add_edge("e" + std::to_string(eid++), b, out, conv());
        if (rng() % 2)
            g.add_edge("e" + std::to_string(eid++), a, b,
                       conv());
        g.validate();
        auto tg = build_taskgraph(g, compute_priorities(g));

        // independent rules, restated from scratch
        std::set<std::pair<int, int>> expect;
        auto fidx = [&](int e) { return tg.index_of(task_kind::forward, e); };
        auto bidx = [&](int e) { return tg.index_of(task_kind::backward, e); };
        for (int e = 0; e < int(g.edges.size()); ++e) {
            const int u = g.edges[e].from, v = g.edges[e].to;
            if (g.nodes[u].role == node_role::input)
                expect.insert({tg.index_of(task_kind::data_provider, -1), fidx(e)});
            for (int w : g.nodes[u].in_edges) expect.insert({fidx(w), fidx(e)});
            if (g.nodes[v].role == node_role::output)
                expect.insert({tg.index_of(task_kind::loss_gradient, v), bidx(e)});
            for (int w : g.nodes[v].out_edges) expect.insert({bidx(w), bidx(e)});
            expect.insert({fidx(e), tg.index_of(task_kind::update, e)});
            expect.insert({bidx(e), tg.index_of(task_kind::update, e)});
        }
        for (int v = 0; v < int(g.nodes.size()); ++v)
            if (g.nodes[v].role == node_role::output)
                for (int w : g.nodes[v].in_edges)
                    expect.insert({fidx(w), tg.index_of(task_kind::loss_gradient, v)});

        std::set<std::pair<int, int>> got(tg.deps.begin(), tg.deps.end());
        REQUIRE(got == expect);
    }
}

TEST_CASE("loss and gradient: half-L2") {
    volume<double> a({2, 2, 2}, 1.0), d({2, 2, 2}, 1.0);
    auto [l0, g0] = loss_and_gradient(a, d);
    CHECK(l0 == 0.0);
    CHECK(g0.flat().abs().maxCoeff() == 0.0);

    volume<double> d1({2, 2, 2}, 0.0);
    auto [l1, g1] = loss_and_gradient(a, d1);
    CHECK(l1 == 4.0); // 1/2 * 8 * 1
    CHECK(g1.flat().minCoeff() == 1.0);

    std::mt19937 rng(3);
    auto ar = oracle::random_volume<double>({3, 3, 3}, rng);
    auto dr = oracle::random_volume<double>({3, 3, 3}, rng);
    auto [lr, gr] = loss_and_gradient(ar, dr);
    const double eps = 1e-6;
    for (std::int64_t i = 0; i < 5; ++i) {
        volume<double> ap = ar.clone();
        ap[i] += eps;
        auto [lp, gp] = loss_and_gradient(ap, dr);
        volume<double> am = ar.clone();
        am[i] -= eps;
        auto [lm, gm] = loss_and_gradient(am, dr);
        CHECK(gr[i] == doctest::Approx((lp - lm) / (2 * eps)).epsilon(1e-6));
    }

    volume<double> bad({2, 2, 1}, 0.0);
    CHECK_THROWS_AS(loss_and_gradient(a, bad), structural_error);
}

TEST_SUITE_END();
