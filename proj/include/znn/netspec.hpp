#pragma once

#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "znn/netgraph.hpp"

namespace znn {

// Text format for network specs. Two styles, freely mixed:
//
//   [node in]  role=input
//   [node a]
//   [edge c1]  from=in to=a type=conv kernel=3,3,3 sparsity=1,1,1
//   [edge t1]  from=a to=b type=transfer fn=relu
//   [edge p1]  from=b to=c type=pool p=2,2,2
//   [edge m1]  from=c to=d type=filter k=2,2,2 sparsity=1,1,1
//
//   [layered]  seq=CTMCTMCTCT width=40 kernel=3,3,3 pool=2,2,2 fn=relu output=12,12,12
//
// Layer letters: C fully connected convolution, T transfer, M max-filter,
// P max-pool. Node roles default to input/output for degree-zero ends.
// Output dims come from `output=` in [layered] or `dims=` on output nodes;
// '#' starts a comment.

namespace netspec_detail {

inline std::string trim(std::string s) {
    const auto a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

inline vec3i parse_vec3(const std::string& s, const std::string& what) {
    vec3i v;
    char c1 = 0, c2 = 0;
    std::istringstream is(s);
    is >> v.x >> c1 >> v.y >> c2 >> v.z;
    require(!is.fail() && c1 == ',' && c2 == ',',
            what + ": expected three comma-separated integers, got '" + s + "'");
    return v;
}

inline transfer_kind parse_fn(const std::string& s) {
    if (s == "logistic" || s == "sigmoid") return transfer_kind::logistic;
    if (s == "tanh") return transfer_kind::hyperbolic_tangent;
    if (s == "relu" || s == "rectified_linear") return transfer_kind::rectified_linear;
    throw structural_error("unknown transfer function '" + s + "'");
}

struct section {
    std::string kind; // node | edge | layered
    std::string name;
    std::map<std::string, std::string> kv;

    std::string get(const std::string& key, const std::string& fallback = "") const {
        auto it = kv.find(key);
        return it == kv.end() ? fallback : it->second;
    }
    bool has(const std::string& key) const { return kv.count(key) > 0; }
};

inline std::vector<section> parse_sections(std::string_view text) {
    std::vector<section> sections;
    std::istringstream is{std::string(text)};
    std::string line;
    while (std::getline(is, line)) {
        if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            const auto close = line.find(']');
            require(close != std::string::npos, "netspec: unterminated section '" + line + "'");
            std::string inside = trim(line.substr(1, close - 1));
            std::istringstream hs(inside);
            section sec;
            hs >> sec.kind >> sec.name;
            require(sec.kind == "node" || sec.kind == "edge" || sec.kind == "layered",
                    "netspec: unknown section kind '" + sec.kind + "'");
            require(sec.kind == "layered" || !sec.name.empty(),
                    "netspec: [" + sec.kind + "] needs a name");
            line = trim(line.substr(close + 1));
            sections.push_back(std::move(sec));
            if (line.empty()) continue;
        }
        require(!sections.empty(), "netspec: key outside any section: '" + line + "'");
        std::istringstream ls(line);
        std::string tok;
        while (ls >> tok) {
            const auto eq = tok.find('=');
            require(eq != std::string::npos && eq > 0,
                    "netspec: expected key=value, got '" + tok + "'");
            sections.back().kv[tok.substr(0, eq)] = tok.substr(eq + 1);
        }
    }
    return sections;
}

template <typename T>
void expand_layered(net_graph<T>& g, const section& sec, vec3i& output_dims) {
    const std::string seq = sec.get("seq");
    require(!seq.empty(), "[layered]: missing seq=");
    const int width = std::stoi(sec.get("width", "1"));
    require(width >= 1, "[layered]: width must be >= 1");
    const vec3i kdim = parse_vec3(sec.get("kernel", "3,3,3"), "[layered] kernel");
    const vec3i pdim = parse_vec3(sec.get("pool", "2,2,2"), "[layered] pool");
    const transfer_kind fn = parse_fn(sec.get("fn", "relu"));
    require(sec.has("output"), "[layered]: missing output=");
    output_dims = parse_vec3(sec.get("output"), "[layered] output");

    std::vector<int> prev;
    prev.push_back(g.add_node("in", node_role::input));
    for (std::size_t li = 0; li < seq.size(); ++li) {
        const char c = seq[li];
        const bool last = li + 1 == seq.size();
        const node_role role = last ? node_role::output : node_role::internal;
        std::vector<int> cur;
        const std::string lname = "L" + std::to_string(li + 1);
        if (c == 'C') {
            for (int j = 0; j < width; ++j)
                cur.push_back(g.add_node(lname + "_" + std::to_string(j), role));
            for (int u : prev)
                for (std::size_t j = 0; j < cur.size(); ++j)
                    g.add_edge("c" + std::to_string(li + 1) + "_" + g.nodes[u].name + "_" +
                                   std::to_string(j),
                               u, cur[j], conv_op<T>{kernel<T>(volume<T>(kdim, T(0)))});
        } else {
            for (std::size_t j = 0; j < prev.size(); ++j) {
                cur.push_back(g.add_node(lname + "_" + std::to_string(j), role));
                const std::string ename =
                    std::string(1, char(std::tolower(c))) + std::to_string(li + 1) + "_" +
                    std::to_string(j);
                if (c == 'T')
                    g.add_edge(ename, prev[j], cur[j], transfer_op<T>{transfer_fn<T>{fn, T(0)}});
                else if (c == 'M')
                    g.add_edge(ename, prev[j], cur[j],
                               filter_op{filter_spec{pdim, {1, 1, 1}}});
                else if (c == 'P')
                    g.add_edge(ename, prev[j], cur[j], pool_op{pool_spec{pdim}});
                else
                    throw structural_error("[layered]: unknown layer letter '" +
                                           std::string(1, c) + "' (want C, T, M or P)");
            }
        }
        prev = std::move(cur);
    }
}

} // namespace netspec_detail

// Parses a netspec, validates the graph and runs shape inference. Output
// dims are taken from [layered] output= or dims= on output nodes unless
// overridden by the caller.
template <typename T>
net_graph<T> parse_netspec(std::string_view text, vec3i output_override = vec3i{0, 0, 0}) {
    using namespace netspec_detail;
    net_graph<T> g;
    vec3i output_dims = output_override;

    for (const section& sec : parse_sections(text)) {
        if (sec.kind == "layered") {
            vec3i layered_out{0, 0, 0};
            expand_layered(g, sec, layered_out);
            if (!output_dims.all_positive()) output_dims = layered_out;
        } else if (sec.kind == "node") {
            node_role role = node_role::internal;
            const std::string r = sec.get("role", "internal");
            if (r == "input")
                role = node_role::input;
            else if (r == "output")
                role = node_role::output;
            else
                require(r == "internal", "node " + sec.name + ": unknown role '" + r + "'");
            require(g.node_id(sec.name) < 0, "duplicate node '" + sec.name + "'");
            const int id = g.add_node(sec.name, role);
            if (sec.has("dims") && role == node_role::output &&
                !output_dims.all_positive())
                output_dims = parse_vec3(sec.get("dims"), "node " + sec.name + " dims");
            (void)id;
        } else { // edge
            const int from = g.node_id(sec.get("from"));
            const int to = g.node_id(sec.get("to"));
            require(from >= 0, "edge " + sec.name + ": unknown node '" + sec.get("from") + "'");
            require(to >= 0, "edge " + sec.name + ": unknown node '" + sec.get("to") + "'");
            const std::string type = sec.get("type");
            if (type == "conv") {
                const vec3i kd = parse_vec3(sec.get("kernel", "1,1,1"), "edge " + sec.name);
                const vec3i s = sec.has("sparsity")
                                    ? parse_vec3(sec.get("sparsity"), "edge " + sec.name)
                                    : vec3i{1, 1, 1};
                require(kd.all_positive() && s.all_positive(),
                        "edge " + sec.name + ": kernel and sparsity must be positive");
                g.add_edge(sec.name, from, to, conv_op<T>{kernel<T>(volume<T>(kd, T(0)), s)});
            } else if (type == "transfer") {
                g.add_edge(sec.name, from, to,
                           transfer_op<T>{transfer_fn<T>{parse_fn(sec.get("fn", "relu")), T(0)}});
            } else if (type == "pool") {
                g.add_edge(sec.name, from, to,
                           pool_op{pool_spec{parse_vec3(sec.get("p", "2,2,2"),
                                                        "edge " + sec.name)}});
            } else if (type == "filter") {
                const vec3i kd = parse_vec3(sec.get("k", "2,2,2"), "edge " + sec.name);
                const vec3i s = sec.has("sparsity")
                                    ? parse_vec3(sec.get("sparsity"), "edge " + sec.name)
                                    : vec3i{1, 1, 1};
                g.add_edge(sec.name, from, to, filter_op{filter_spec{kd, s}});
            } else {
                throw structural_error("edge " + sec.name + ": unknown type '" + type +
                                       "' (want conv|transfer|pool|filter)");
            }
        }
    }

    g.validate();
    require(output_dims.all_positive(),
            "netspec: no output dims given ([layered] output=, node dims=, or override)");
    infer_shapes(g, output_dims);
    return g;
}

} // namespace znn
