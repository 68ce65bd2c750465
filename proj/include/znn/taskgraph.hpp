#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "znn/engine.hpp"
#include "znn/netgraph.hpp"

namespace znn {

// Static description of the per-iteration task dependency graph that the
// engine executes: one forward and one backward task per computation-graph
// edge, one update task per trainable edge, one loss-gradient task per
// output node, and the data provider. Dependencies:
//
//   provider            -> forward of every edge leaving an input node
//   forward (w,u)       -> forward (u,v)            (via u's accumulator)
//   forward (w,v)       -> loss gradient at output v
//   loss gradient at v  -> backward (u,v)
//   backward (v,w)      -> backward (u,v)
//   forward (e), backward (e) -> update (e)
//   update (e)          -> forward (e) of the NEXT iteration (cross edge)
//
// The cross-iteration dependency is listed separately: it is the one the
// scheduler resolves with the force protocol instead of queue gating.
struct task_graph {
    struct task {
        task_kind kind;
        int edge = -1; // forward/backward/update
        int node = -1; // loss_gradient
        int priority = 0;
    };

    std::vector<task> tasks;
    std::vector<std::pair<int, int>> deps;            // (before, after)
    std::vector<std::pair<int, int>> next_iter_deps;  // update -> next forward

    int index_of(task_kind k, int id) const {
        for (int i = 0; i < int(tasks.size()); ++i) {
            const task& t = tasks[std::size_t(i)];
            if (t.kind != k) continue;
            if (k == task_kind::loss_gradient ? t.node == id
                                              : (k == task_kind::data_provider || t.edge == id))
                return i;
        }
        return -1;
    }

    std::size_t count(task_kind k) const {
        std::size_t n = 0;
        for (const task& t : tasks)
            if (t.kind == k) ++n;
        return n;
    }

    bool depends(int before, int after) const {
        for (auto& d : deps)
            if (d.first == before && d.second == after) return true;
        return false;
    }
};

template <typename T>
task_graph build_taskgraph(const net_graph<T>& g, const priority_table& pt) {
    task_graph tg;
    const int ne = int(g.edges.size());

    tg.tasks.push_back({task_kind::data_provider, -1, -1, 0});
    std::vector<int> fwd_idx(ne), bwd_idx(ne), upd_idx(ne, -1);
    for (int e = 0; e < ne; ++e) {
        fwd_idx[e] = int(tg.tasks.size());
        tg.tasks.push_back({task_kind::forward, e, -1, pt.fwd_rank[std::size_t(e)]});
    }
    for (int e = 0; e < ne; ++e) {
        bwd_idx[e] = int(tg.tasks.size());
        tg.tasks.push_back({task_kind::backward, e, -1, pt.bwd_rank[std::size_t(e)]});
    }
    for (int e = 0; e < ne; ++e)
        if (g.edges[e].trainable()) {
            upd_idx[e] = int(tg.tasks.size());
            tg.tasks.push_back({task_kind::update, e, -1, pt.update_band()});
        }
    std::vector<int> loss_idx(g.nodes.size(), -1);
    for (int v = 0; v < int(g.nodes.size()); ++v)
        if (g.nodes[v].role == node_role::output) {
            loss_idx[v] = int(tg.tasks.size());
            tg.tasks.push_back({task_kind::loss_gradient, -1, v, 0});
        }

    for (int e = 0; e < ne; ++e) {
        const auto& ge = g.edges[e];
        const int u = ge.from, v = ge.to;

        if (g.nodes[u].role == node_role::input)
            tg.deps.emplace_back(0, fwd_idx[e]);
        for (int in : g.nodes[u].in_edges) tg.deps.emplace_back(fwd_idx[in], fwd_idx[e]);

        if (g.nodes[v].role == node_role::output)
            tg.deps.emplace_back(loss_idx[v], bwd_idx[e]);
        for (int out : g.nodes[v].out_edges) tg.deps.emplace_back(bwd_idx[out], bwd_idx[e]);

        if (upd_idx[e] >= 0) {
            tg.deps.emplace_back(fwd_idx[e], upd_idx[e]);
            tg.deps.emplace_back(bwd_idx[e], upd_idx[e]);
            tg.next_iter_deps.emplace_back(upd_idx[e], fwd_idx[e]);
        }
    }
    for (int v = 0; v < int(g.nodes.size()); ++v)
        if (loss_idx[v] >= 0)
            for (int in : g.nodes[v].in_edges) tg.deps.emplace_back(fwd_idx[in], loss_idx[v]);

    return tg;
}

// Half-L2 loss and its gradient: L = 1/2 sum (a-d)^2, dL/da = a - d.
template <typename T>
std::pair<double, volume<T>> loss_and_gradient(const volume<T>& actual,
                                               const volume<T>& desired) {
    require(actual.dims() == desired.dims(), "loss: shape mismatch " + actual.dims().str() +
                                                 " vs " + desired.dims().str());
    volume<T> g(actual.dims());
    g.flat() = actual.flat() - desired.flat();
    const double loss = 0.5 * double(g.flat().template cast<double>().square().sum());
    return {loss, std::move(g)};
}

} // namespace znn
