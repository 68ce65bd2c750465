#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "znn/cost_model.hpp"
#include "znn/engine.hpp"
#include "znn/netspec.hpp"
#include "znn/volume_io.hpp"

namespace znn {

enum class conv_mode_policy { direct, fft, autotune };

inline std::string to_string(conv_mode_policy m) {
    switch (m) {
        case conv_mode_policy::direct: return "direct";
        case conv_mode_policy::fft: return "fft";
        case conv_mode_policy::autotune: return "auto";
    }
    return "?";
}

template <typename T>
struct train_config {
    std::string netspec_text;
    int threads = 1;
    int warmup_rounds = 5;
    int measured_rounds = 50;
    conv_mode_policy mode = conv_mode_policy::autotune;
    bool memoize = true;
    T learning_rate = T(0.01);
    std::uint64_t seed = 1;
    std::string data; // "synthetic" or a directory with inputs/ and labels/
    int synthetic_samples = 4;
    int autotune_trials = 3;
    bool abort_on_nonfinite_loss = true;
    double baseline_seconds = 0; // recorded 1-worker mean round time, if any
};

// Serial straight-line forward pass used by the synthetic teacher and the
// autotuner; direct convolution, plain topological order.
template <typename T>
std::vector<volume<T>> serial_forward(const net_graph<T>& g,
                                      const std::vector<const volume<T>*>& inputs) {
    std::vector<volume<T>> img;
    img.reserve(g.nodes.size());
    for (const auto& n : g.nodes) img.emplace_back(n.dims, T(0));
    std::size_t ii = 0;
    for (int v = 0; v < int(g.nodes.size()); ++v)
        if (g.nodes[v].role == node_role::input) img[std::size_t(v)].flat() =
            inputs[ii++]->flat();
    for (int v : g.topo_order()) {
        bool first = true;
        for (int eid : g.nodes[v].in_edges) {
            const auto& e = g.edges[eid];
            volume<T> c({1, 1, 1});
            if (auto* cv = std::get_if<conv_op<T>>(&e.op))
                c = conv_valid_direct(img[std::size_t(e.from)], cv->k);
            else if (auto* t = std::get_if<transfer_op<T>>(&e.op))
                c = transfer_forward(img[std::size_t(e.from)], t->fn);
            else if (auto* p = std::get_if<pool_op>(&e.op))
                c = maxpool_forward(img[std::size_t(e.from)], p->spec).first;
            else
                c = maxfilter_forward(img[std::size_t(e.from)],
                                      std::get<filter_op>(e.op).spec)
                        .first;
            if (first) {
                img[std::size_t(v)] = std::move(c);
                first = false;
            } else {
                img[std::size_t(v)].flat() += c.flat();
            }
        }
    }
    return img;
}

// Pre-generated (input, desired) pairs. Synthetic samples draw inputs
// uniform in [0,1) and produce desired outputs with a fixed random teacher
// network of the same topology, so the loss is meaningfully reducible.
// File-backed samples read the volume binary format from inputs/ and
// labels/ subdirectories, paired by sorted filename.
template <typename T>
class data_provider {
public:
    static data_provider synthetic(const net_graph<T>& g, std::uint64_t seed, int samples) {
        require(samples >= 1, "need at least one synthetic sample");
        data_provider dp;
        net_graph<T> teacher = g.clone();
        init_weights(teacher, seed + 0x9e3779b9ULL);
        std::mt19937 rng(std::uint32_t(seed * 2654435761ULL >> 16));
        for (int s = 0; s < samples; ++s) {
            typename engine<T>::sample smp;
            std::vector<const volume<T>*> ins;
            for (const auto& n : g.nodes)
                if (n.role == node_role::input) {
                    auto v = make_volume<T>(n.dims);
                    fill_uniform(*v, rng, T(0), T(1));
                    ins.push_back(v.get());
                    smp.inputs.push_back(std::move(v));
                }
            auto imgs = serial_forward(teacher, ins);
            for (int v = 0; v < int(g.nodes.size()); ++v)
                if (g.nodes[v].role == node_role::output)
                    smp.desired.push_back(share(std::move(imgs[std::size_t(v)])));
            dp.samples_.push_back(std::move(smp));
        }
        return dp;
    }

    static data_provider from_files(const net_graph<T>& g, const std::string& dir) {
        namespace fs = std::filesystem;
        data_provider dp;
        std::vector<std::string> in_files, label_files;
        for (const auto& entry : fs::directory_iterator(dir + "/inputs"))
            in_files.push_back(entry.path().string());
        for (const auto& entry : fs::directory_iterator(dir + "/labels"))
            label_files.push_back(entry.path().string());
        std::sort(in_files.begin(), in_files.end());
        std::sort(label_files.begin(), label_files.end());
        require(!in_files.empty() && in_files.size() == label_files.size(),
                "data directory needs matching inputs/ and labels/ files");
        vec3i in_dims{0, 0, 0}, out_dims{0, 0, 0};
        for (const auto& n : g.nodes) {
            if (n.role == node_role::input) in_dims = n.dims;
            if (n.role == node_role::output) out_dims = n.dims;
        }
        for (std::size_t i = 0; i < in_files.size(); ++i) {
            typename engine<T>::sample smp;
            auto in = share(load_volume<T>(in_files[i]));
            require(in->dims() == in_dims, "input volume " + in_files[i] + " has dims " +
                                               in->dims().str() + ", net wants " +
                                               in_dims.str());
            auto label = share(load_volume<T>(label_files[i]));
            require(label->dims() == out_dims, "label volume " + label_files[i] +
                                                   " has dims " + label->dims().str() +
                                                   ", net wants " + out_dims.str());
            for (const auto& n : g.nodes) {
                if (n.role == node_role::input) smp.inputs.push_back(in);
                if (n.role == node_role::output) smp.desired.push_back(label);
            }
            dp.samples_.push_back(std::move(smp));
        }
        return dp;
    }

    typename engine<T>::sample_source source() const {
        return [this](std::int64_t round) -> const typename engine<T>::sample& {
            return samples_[std::size_t(round - 1) % samples_.size()];
        };
    }

    std::size_t size() const { return samples_.size(); }

private:
    std::vector<typename engine<T>::sample> samples_;
};

// Layerwise autotuning: times forward+backward+update of one representative
// edge per conv-layer signature with both engines and picks the faster.
// Median of `trials` runs.
template <typename T>
struct autotune_choice {
    vec3i image_dims;
    vec3i kernel_dims;
    vec3i sparsity;
    double direct_seconds = 0;
    double fft_seconds = 0;
    conv_engine chosen = conv_engine::direct;
};

template <typename T>
std::vector<conv_engine> autotune_modes(const net_graph<T>& g, int trials,
                                        std::vector<autotune_choice<T>>* report = nullptr) {
    using clock = std::chrono::steady_clock;
    struct signature {
        vec3i in, k, s;
        bool operator<(const signature& o) const {
            auto key = [](const signature& x) {
                return std::array<std::int64_t, 9>{x.in.x, x.in.y, x.in.z, x.k.x, x.k.y,
                                                   x.k.z, x.s.x, x.s.y, x.s.z};
            };
            return key(*this) < key(o);
        }
    };

    std::map<signature, conv_engine> decided;
    std::vector<conv_engine> modes(g.edges.size(), conv_engine::direct);
    fft_plan_cache<T> cache;
    std::mt19937 rng(12345);

    for (std::size_t eid = 0; eid < g.edges.size(); ++eid) {
        const auto& e = g.edges[eid];
        auto* cv = std::get_if<conv_op<T>>(&e.op);
        if (!cv) continue;
        const signature sig{g.nodes[e.from].dims, cv->k.weights.dims(), cv->k.sparsity};
        auto it = decided.find(sig);
        if (it == decided.end()) {
            volume<T> x(sig.in);
            fill_uniform(x, rng, T(0), T(1));
            volume<T> w(sig.k);
            fill_uniform(w, rng, T(-1), T(1));
            const vec3i out_dims = sig.in - (effective_window(sig.k, sig.s) - 1);
            volume<T> gout(out_dims);
            fill_uniform(gout, rng, T(-1), T(1));

            auto time_one = [&](auto&& body) {
                std::vector<double> ts;
                body(); // warm plans and pools outside the timed runs
                for (int t = 0; t < trials; ++t) {
                    const auto t0 = clock::now();
                    body();
                    ts.push_back(std::chrono::duration<double>(clock::now() - t0).count());
                }
                std::sort(ts.begin(), ts.end());
                return ts[ts.size() / 2];
            };

            const double td = time_one([&] {
                auto y = conv_valid_direct(x, w, sig.s);
                auto gx = conv_full_direct(gout, reflect(w), sig.s);
                auto gw = kernel_gradient_direct(x, gout, sig.k, sig.s);
            });
            const double tf = time_one([&] {
                auto x_f = fwd_image_fft(cache, x, sig.in);
                auto k_f = fwd_kernel_fft(cache, w, sig.s, sig.in);
                auto y = fft_conv_valid_pre(cache, x_f, k_f, out_dims);
                auto g_f = fwd_image_fft(cache, gout, sig.in);
                auto gx = fft_conv_full_adjoint_pre(cache, g_f, k_f);
                auto gw = fft_kernel_gradient_pre(cache, x_f, g_f, sig.k, sig.s);
            });

            const conv_engine choice = tf < td ? conv_engine::fft : conv_engine::direct;
            decided[sig] = choice;
            if (report)
                report->push_back(autotune_choice<T>{sig.in, sig.k, sig.s, td, tf, choice});
        }
        modes[eid] = decided[sig];
    }
    return modes;
}

template <typename T>
struct train_report {
    double mean_round_seconds = 0;
    double speedup_vs_baseline = 0; // 0 when no baseline was recorded
    std::vector<double> round_seconds; // measured rounds only
    std::vector<double> losses;        // warmup + measured
    int warmup_rounds = 0;
    std::vector<autotune_choice<T>> autotune;
    std::vector<conv_engine> edge_modes;
    typename engine<T>::counters_snapshot counters;
    chunk_pool::counters_snapshot volume_pool_counters;
};

// Runs warmup + measured rounds and reports timing, the loss trajectory and
// the instrumentation counters. Aborts with a diagnostic if the loss goes
// non-finite.
template <typename T>
train_report<T> train(net_graph<T>& g, const train_config<T>& cfg) {
    require(cfg.warmup_rounds >= 0 && cfg.measured_rounds >= 1 && cfg.threads >= 1,
            "train: bad warmup/rounds/threads");
    train_report<T> report;
    report.warmup_rounds = cfg.warmup_rounds;

    typename engine<T>::config ecfg;
    ecfg.threads = cfg.threads;
    ecfg.memoize = cfg.memoize;
    ecfg.learning_rate = cfg.learning_rate;
    switch (cfg.mode) {
        case conv_mode_policy::direct:
            ecfg.edge_modes.assign(g.edges.size(), conv_engine::direct);
            break;
        case conv_mode_policy::fft:
            ecfg.edge_modes.assign(g.edges.size(), conv_engine::fft);
            break;
        case conv_mode_policy::autotune:
            ecfg.edge_modes = autotune_modes(g, cfg.autotune_trials, &report.autotune);
            break;
    }
    report.edge_modes = ecfg.edge_modes;

    data_provider<T> dp = (cfg.data.empty() || cfg.data == "synthetic")
                              ? data_provider<T>::synthetic(g, cfg.seed,
                                                            cfg.synthetic_samples)
                              : data_provider<T>::from_files(g, cfg.data);

    engine<T> eng(g, compute_priorities(g), ecfg);
    auto source = dp.source();
    const auto stats = eng.run(cfg.warmup_rounds + cfg.measured_rounds, source);

    double sum = 0;
    for (std::size_t r = 0; r < stats.size(); ++r) {
        report.losses.push_back(stats[r].loss);
        if (int(r) >= cfg.warmup_rounds) {
            report.round_seconds.push_back(stats[r].seconds);
            sum += stats[r].seconds;
        }
        if (cfg.abort_on_nonfinite_loss && !std::isfinite(stats[r].loss))
            throw std::runtime_error("training diverged: loss is not finite at round " +
                                     std::to_string(r + 1));
    }
    report.mean_round_seconds = sum / double(cfg.measured_rounds);
    if (cfg.baseline_seconds > 0)
        report.speedup_vs_baseline = cfg.baseline_seconds / report.mean_round_seconds;
    report.counters = eng.counters();
    report.volume_pool_counters = volume_pool().counters();
    return report;
}

// CSV report: one row per round with the fixed, documented columns.
template <typename T>
void write_train_csv(std::ostream& os, const train_report<T>& r) {
    os << "round,phase,seconds,loss\n";
    for (std::size_t i = 0; i < r.losses.size(); ++i) {
        const bool warm = int(i) < r.warmup_rounds;
        const double secs =
            warm ? 0.0 : r.round_seconds[i - std::size_t(r.warmup_rounds)];
        os << (i + 1) << ',' << (warm ? "warmup" : "measured") << ',' << secs << ','
           << r.losses[i] << '\n';
    }
}

struct bench_row {
    int width = 0;
    int threads = 0;
    double mean_round_ms = 0;
    double speedup = 0;
};

// Thread/width sweep over a layered netspec: for each width, rebuilds the
// net, trains with each thread count and reports speedup against the
// 1-thread baseline of the same width.
template <typename T>
std::vector<bench_row> bench_sweep(const std::string& netspec_text,
                                   const train_config<T>& base,
                                   const std::vector<int>& thread_list,
                                   const std::vector<int>& width_list) {
    std::vector<bench_row> rows;
    for (int width : width_list) {
        std::string spec = netspec_text;
        const auto pos = spec.find("width=");
        require(pos != std::string::npos, "bench needs a [layered] spec with width=");
        const auto end = spec.find_first_of(" \t\n", pos);
        spec = spec.substr(0, pos) + "width=" + std::to_string(width) +
               (end == std::string::npos ? "" : spec.substr(end));

        double baseline = 0;
        for (int threads : thread_list) {
            auto g = parse_netspec<T>(spec);
            init_weights(g, base.seed);
            train_config<T> cfg = base;
            cfg.netspec_text = spec;
            cfg.threads = threads;
            auto rep = train(g, cfg);
            if (threads == thread_list.front() && thread_list.front() == 1)
                baseline = rep.mean_round_seconds;
            bench_row row;
            row.width = width;
            row.threads = threads;
            row.mean_round_ms = rep.mean_round_seconds * 1e3;
            row.speedup = baseline > 0 ? baseline / rep.mean_round_seconds : 1.0;
            rows.push_back(row);
        }
    }
    return rows;
}

inline void write_bench_csv(std::ostream& os, const std::vector<bench_row>& rows) {
    os << "width,threads,mean_round_ms,speedup\n";
    for (const auto& r : rows)
        os << r.width << ',' << r.threads << ',' << r.mean_round_ms << ',' << r.speedup
           << '\n';
}

// Cost-model rows for the analyze subcommand: evaluates the layered tables
// for the given netspec and processor counts.
struct analyze_row {
    int width = 0;
    int depth = 0;
    double procs = 0;
    double t1 = 0;
    double t_inf = 0;
    double bound = 0;
};

template <typename T>
std::vector<analyze_row> analyze_netspec(const std::string& netspec_text,
                                         const std::vector<double>& procs,
                                         conv_cost_mode mode, double fft_constant) {
    auto g = parse_netspec<T>(netspec_text);
    // derive per-layer cost descriptions from the graph: group conv edges by
    // head node distance, nonconv layers by edge kind
    std::vector<cost_layer> layers;
    int width = 1, depth = 0;
    auto pt = compute_priorities(g);
    std::map<std::int64_t, std::vector<int>> by_depth; // dist-from-input of head
    for (int e = 0; e < int(g.edges.size()); ++e)
        by_depth[pt.dist_to_input[std::size_t(g.edges[e].to)]].push_back(e);
    for (auto& [d, edge_ids] : by_depth) {
        const auto& first = g.edges[edge_ids.front()];
        cost_layer l;
        if (auto* cv = std::get_if<conv_op<T>>(&first.op)) {
            // fully connected layer: f tails, f' heads
            std::vector<int> tails, heads;
            for (int eid : edge_ids) {
                if (std::find(tails.begin(), tails.end(), g.edges[eid].from) == tails.end())
                    tails.push_back(g.edges[eid].from);
                if (std::find(heads.begin(), heads.end(), g.edges[eid].to) == heads.end())
                    heads.push_back(g.edges[eid].to);
            }
            l.is_conv = true;
            l.conv.f = double(tails.size());
            l.conv.fp = double(heads.size());
            l.conv.n = double(g.nodes[first.from].dims.x);
            l.conv.n_out = double(g.nodes[first.to].dims.x);
            l.conv.k = double(cv->k.weights.dims().x);
            width = std::max(width, int(heads.size()));
            ++depth;
        } else {
            l.f = double(edge_ids.size());
            l.n = double(g.nodes[first.from].dims.x);
            if (first.kind() == edge_kind::max_pool) {
                l.kind = nonconv_kind::pooling;
                l.k = double(std::get<pool_op>(first.op).spec.p.x);
            } else if (first.kind() == edge_kind::max_filter) {
                l.kind = nonconv_kind::filtering;
                l.k = double(std::get<filter_op>(first.op).spec.k.x);
            } else {
                l.kind = nonconv_kind::transfer;
                l.k = 1;
            }
        }
        layers.push_back(l);
    }
    const auto cost = cost_of_iteration(layers, mode, fft_constant);
    std::vector<analyze_row> rows;
    for (double p : procs)
        rows.push_back(analyze_row{width, depth, p, cost.t1, cost.t_inf,
                                   brent_speedup(cost.t1, cost.t_inf, p)});
    return rows;
}

inline void write_analyze_csv(std::ostream& os, const std::vector<analyze_row>& rows) {
    os << "width,depth,procs,t1,tinf,bound\n";
    for (const auto& r : rows)
        os << r.width << ',' << r.depth << ',' << r.procs << ',' << r.t1 << ',' << r.t_inf
           << ',' << r.bound << '\n';
}

} // namespace znn
