#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "znn/conv_direct.hpp"
#include "znn/maxops.hpp"
#include "znn/transfer.hpp"
#include "znn/types.hpp"
#include "znn/volume.hpp"

namespace znn {

enum class node_role { input, internal, output };

// Edge payloads. Convolution carries trainable kernel weights, transfer a
// trainable bias; pooling and filtering have no parameters.
template <typename T>
struct conv_op {
    kernel<T> k;
    conv_op clone() const { return conv_op{k.clone()}; }
};

template <typename T>
struct transfer_op {
    transfer_fn<T> fn;
};

struct pool_op {
    pool_spec spec;
};

struct filter_op {
    filter_spec spec;
};

enum class edge_kind { convolution, transfer, max_pool, max_filter };

// Computation graph: nodes are 3D images, edges are filtering operations.
// Node and edge ids are dense indices in declaration order; all orderings
// and tie-breaks use them, which keeps parallel runs comparable.
template <typename T>
class net_graph {
public:
    struct node {
        std::string name;
        node_role role = node_role::internal;
        vec3i dims{0, 0, 0}; // assigned by infer_shapes
        std::vector<int> in_edges;
        std::vector<int> out_edges;
    };

    struct edge {
        std::string name;
        int from = -1;
        int to = -1;
        std::variant<conv_op<T>, transfer_op<T>, pool_op, filter_op> op;

        edge_kind kind() const { return edge_kind(op.index()); }
        bool trainable() const {
            return kind() == edge_kind::convolution || kind() == edge_kind::transfer;
        }
    };

    std::vector<node> nodes;
    std::vector<edge> edges;

    int add_node(std::string name, node_role role) {
        nodes.push_back(node{std::move(name), role, {0, 0, 0}, {}, {}});
        return int(nodes.size()) - 1;
    }

    int add_edge(std::string name, int from, int to,
                 std::variant<conv_op<T>, transfer_op<T>, pool_op, filter_op> op) {
        require(from >= 0 && from < int(nodes.size()) && to >= 0 && to < int(nodes.size()),
                "edge " + name + ": unknown endpoint");
        const int id = int(edges.size());
        edges.push_back(edge{std::move(name), from, to, std::move(op)});
        nodes[from].out_edges.push_back(id);
        nodes[to].in_edges.push_back(id);
        return id;
    }

    int node_id(const std::string& name) const {
        for (int i = 0; i < int(nodes.size()); ++i)
            if (nodes[i].name == name) return i;
        return -1;
    }

    net_graph clone() const {
        net_graph g;
        g.nodes = nodes;
        g.edges.reserve(edges.size());
        for (const edge& e : edges) {
            auto op_copy = [&]() -> std::variant<conv_op<T>, transfer_op<T>, pool_op, filter_op> {
                if (auto* cv = std::get_if<conv_op<T>>(&e.op)) return cv->clone();
                if (auto* t = std::get_if<transfer_op<T>>(&e.op)) return *t;
                if (auto* p = std::get_if<pool_op>(&e.op)) return *p;
                return std::get<filter_op>(e.op);
            }();
            g.edges.push_back(edge{e.name, e.from, e.to, std::move(op_copy)});
        }
        return g;
    }

    // Topological order of node ids; throws on cycles, naming a node on one.
    std::vector<int> topo_order() const {
        std::vector<int> indeg(nodes.size(), 0);
        for (const edge& e : edges) ++indeg[e.to];
        std::vector<int> order;
        order.reserve(nodes.size());
        for (int i = 0; i < int(nodes.size()); ++i)
            if (indeg[i] == 0) order.push_back(i);
        for (std::size_t h = 0; h < order.size(); ++h)
            for (int eid : nodes[order[h]].out_edges)
                if (--indeg[edges[eid].to] == 0) order.push_back(edges[eid].to);
        if (order.size() != nodes.size()) {
            for (int i = 0; i < int(nodes.size()); ++i)
                if (indeg[i] > 0)
                    throw structural_error("graph has a cycle through node " + nodes[i].name);
        }
        return order;
    }

    // Structural validation: acyclic; convergent edges all convolutions;
    // roles consistent with degrees.
    void validate() const {
        require(!nodes.empty() && !edges.empty(), "graph must have nodes and edges");
        (void)topo_order();
        for (const node& v : nodes) {
            if (v.in_edges.size() >= 2)
                for (int eid : v.in_edges)
                    require(edges[eid].kind() == edge_kind::convolution,
                            "node " + v.name +
                                ": convergent edges must all be convolutions (edge " +
                                edges[eid].name + " is not)");
            if (v.role == node_role::input)
                require(v.in_edges.empty(), "input node " + v.name + " has incoming edges");
            if (v.role == node_role::output)
                require(v.out_edges.empty(), "output node " + v.name + " has outgoing edges");
            if (v.in_edges.empty())
                require(v.role == node_role::input,
                        "node " + v.name + " has no incoming edges but is not an input");
            if (v.out_edges.empty())
                require(v.role == node_role::output,
                        "node " + v.name + " has no outgoing edges but is not an output");
        }
    }
};

namespace graph_detail {

// Image dims at an edge's tail implied by dims at its head.
template <typename T>
vec3i tail_dims(const typename net_graph<T>::edge& e, vec3i head) {
    switch (e.kind()) {
        case edge_kind::convolution:
            return head + (std::get<conv_op<T>>(e.op).k.effective_dims() - 1);
        case edge_kind::transfer:
            return head;
        case edge_kind::max_pool:
            return head * std::get<pool_op>(e.op).spec.p;
        case edge_kind::max_filter: {
            const auto& f = std::get<filter_op>(e.op).spec;
            return head + (effective_window(f.k, f.s) - 1);
        }
    }
    return head;
}

// Image dims at an edge's head implied by dims at its tail.
template <typename T>
vec3i head_dims(const typename net_graph<T>::edge& e, vec3i tail) {
    switch (e.kind()) {
        case edge_kind::convolution: {
            const vec3i eff = std::get<conv_op<T>>(e.op).k.effective_dims();
            require(eff.all_le(tail), "edge " + e.name + ": effective kernel " + eff.str() +
                                          " exceeds image " + tail.str());
            return tail - (eff - 1);
        }
        case edge_kind::transfer:
            return tail;
        case edge_kind::max_pool: {
            const vec3i p = std::get<pool_op>(e.op).spec.p;
            require(p.divides(tail), "edge " + e.name + ": image " + tail.str() +
                                         " not divisible by pool window " + p.str());
            return {tail.x / p.x, tail.y / p.y, tail.z / p.z};
        }
        case edge_kind::max_filter: {
            const auto& f = std::get<filter_op>(e.op).spec;
            const vec3i eff = effective_window(f.k, f.s);
            require(eff.all_le(tail), "edge " + e.name + ": effective window " + eff.str() +
                                          " exceeds image " + tail.str());
            return tail - (eff - 1);
        }
    }
    return tail;
}

} // namespace graph_detail

// Computes every node's image dims from the dims of the output nodes,
// walking backward, then cross-checks by walking forward. Every node must
// come out consistent along all paths.
template <typename T>
std::map<int, vec3i> infer_shapes(net_graph<T>& g, vec3i output_dims) {
    require(output_dims.all_positive(), "output dims must be positive");
    const std::vector<int> topo = g.topo_order();

    std::vector<vec3i> dims(g.nodes.size(), vec3i{0, 0, 0});
    for (auto& n : g.nodes)
        if (n.role == node_role::output) dims[g.node_id(n.name)] = output_dims;

    // backward sweep: head dims determine tail dims
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        const int v = *it;
        require(dims[v].all_positive(),
                "shape inference: node " + g.nodes[v].name + " unreachable from outputs");
        for (int eid : g.nodes[v].in_edges) {
            const auto& e = g.edges[eid];
            const vec3i t = graph_detail::tail_dims<T>(e, dims[v]);
            if (dims[e.from].all_positive())
                require(dims[e.from] == t, "shape inference: node " + g.nodes[e.from].name +
                                               " implied " + t.str() + " via edge " + e.name +
                                               " but already " + dims[e.from].str());
            else
                dims[e.from] = t;
        }
    }

    // forward sweep cross-check (also validates divisibility and windows)
    for (int v : topo)
        for (int eid : g.nodes[v].out_edges) {
            const auto& e = g.edges[eid];
            const vec3i h = graph_detail::head_dims<T>(e, dims[v]);
            require(h == dims[e.to], "shape inference: edge " + e.name + " maps " +
                                         dims[v].str() + " to " + h.str() + " but node " +
                                         g.nodes[e.to].name + " has " + dims[e.to].str());
        }

    std::map<int, vec3i> out;
    for (int i = 0; i < int(g.nodes.size()); ++i) {
        g.nodes[i].dims = dims[i];
        out[i] = dims[i];
    }
    return out;
}

// Strict total orders over edges driving the scheduler: forward rank sorts
// by (longest distance from the edge's head to any output, descending),
// backward rank by (longest distance from the edge's tail to any input,
// descending); ties break by node id, then edge id. Lower rank = higher
// priority. Update tasks use the dedicated band below every rank.
struct priority_table {
    std::vector<int> fwd_rank;
    std::vector<int> bwd_rank;
    std::vector<std::int64_t> dist_to_output; // per node
    std::vector<std::int64_t> dist_to_input;  // per node

    int update_band() const { return int(fwd_rank.size()); }
    int num_ranks() const { return int(fwd_rank.size()) + 1; }
};

template <typename T>
priority_table compute_priorities(const net_graph<T>& g) {
    const std::vector<int> topo = g.topo_order();
    priority_table pt;
    pt.dist_to_output.assign(g.nodes.size(), 0);
    pt.dist_to_input.assign(g.nodes.size(), 0);

    for (auto it = topo.rbegin(); it != topo.rend(); ++it)
        for (int eid : g.nodes[*it].out_edges)
            pt.dist_to_output[*it] = std::max(pt.dist_to_output[*it],
                                              pt.dist_to_output[g.edges[eid].to] + 1);
    for (int v : topo)
        for (int eid : g.nodes[v].in_edges)
            pt.dist_to_input[v] =
                std::max(pt.dist_to_input[v], pt.dist_to_input[g.edges[eid].from] + 1);

    const int ne = int(g.edges.size());
    std::vector<int> order(ne);
    for (int i = 0; i < ne; ++i) order[i] = i;

    // forward: distance from head node to outputs, tie by head node id then edge id
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        const auto da = pt.dist_to_output[g.edges[a].to];
        const auto db = pt.dist_to_output[g.edges[b].to];
        if (da != db) return da > db;
        if (g.edges[a].to != g.edges[b].to) return g.edges[a].to < g.edges[b].to;
        return a < b;
    });
    pt.fwd_rank.assign(ne, 0);
    for (int r = 0; r < ne; ++r) pt.fwd_rank[order[r]] = r;

    // backward: distance from tail node to inputs, tie by tail node id then edge id
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        const auto da = pt.dist_to_input[g.edges[a].from];
        const auto db = pt.dist_to_input[g.edges[b].from];
        if (da != db) return da > db;
        if (g.edges[a].from != g.edges[b].from) return g.edges[a].from < g.edges[b].from;
        return a < b;
    });
    pt.bwd_rank.assign(ne, 0);
    for (int r = 0; r < ne; ++r) pt.bwd_rank[order[r]] = r;

    return pt;
}

// Rewrites a max-pooling network into its sliding-window equivalent: every
// max-pooling edge becomes a max-filtering edge with the same window, and
// the sparsity of everything downstream multiplies by the pooling factor.
// Applying the result densely equals applying the original net at every
// window offset.
template <typename T>
net_graph<T> to_sliding_equivalent(const net_graph<T>& g) {
    net_graph<T> out = g.clone();
    const std::vector<int> topo = out.topo_order();

    std::vector<vec3i> mult(out.nodes.size(), vec3i{0, 0, 0});
    for (auto& n : out.nodes)
        if (n.role == node_role::input) mult[out.node_id(n.name)] = vec3i{1, 1, 1};

    for (int v : topo) {
        require(mult[v].all_positive(),
                "to_sliding_equivalent: node " + out.nodes[v].name + " unreachable");
        for (int eid : out.nodes[v].out_edges) {
            auto& e = out.edges[eid];
            vec3i head_mult = mult[v];
            if (auto* c = std::get_if<conv_op<T>>(&e.op)) {
                c->k.sparsity = c->k.sparsity * mult[v];
            } else if (auto* p = std::get_if<pool_op>(&e.op)) {
                const vec3i win = p->spec.p;
                e.op = filter_op{filter_spec{win, mult[v]}};
                head_mult = mult[v] * win;
            } else if (auto* f = std::get_if<filter_op>(&e.op)) {
                f->spec.s = f->spec.s * mult[v];
            }
            if (mult[e.to].all_positive())
                require(mult[e.to] == head_mult,
                        "to_sliding_equivalent: inconsistent pooling factors at node " +
                            out.nodes[e.to].name);
            else
                mult[e.to] = head_mult;
        }
    }
    return out;
}

// Uniform weight init in [-1/sqrt(fan_in), +1/sqrt(fan_in)] with
// fan_in = (incoming edges of the head node) * kernel voxels; biases zero.
// Deterministic given the seed: edges are visited in id order.
template <typename T>
void init_weights(net_graph<T>& g, std::uint64_t seed) {
    std::mt19937 rng(std::uint32_t(seed ^ (seed >> 32)));
    for (auto& e : g.edges) {
        if (auto* c = std::get_if<conv_op<T>>(&e.op)) {
            const double fan_in =
                double(g.nodes[e.to].in_edges.size()) * double(c->k.weights.size());
            const T bound = T(1.0 / std::sqrt(fan_in));
            fill_uniform(c->k.weights, rng, -bound, bound);
        } else if (auto* t = std::get_if<transfer_op<T>>(&e.op)) {
            t->fn.bias = T(0);
        }
    }
}

} // namespace znn
