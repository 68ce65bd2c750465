#pragma once

#include <algorithm>
#include <atomic>
#include <cassert>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <exception>
#include <functional>
#include <memory>
#include <mutex>
#include <thread>
#include <vector>

#include "znn/bucket_queue.hpp"
#include "znn/conv_direct.hpp"
#include "znn/conv_fft.hpp"
#include "znn/fft.hpp"
#include "znn/maxops.hpp"
#include "znn/netgraph.hpp"
#include "znn/sum_accumulator.hpp"
#include "znn/transfer.hpp"
#include "znn/types.hpp"
#include "znn/volume.hpp"

namespace znn {

enum class task_kind : std::uint8_t { data_provider, forward, backward, update, loss_gradient };
enum class conv_engine : std::uint8_t { direct, fft };

// Accumulation payload: either a spatial image or a frequency-domain image.
// Convergent convolutions of a uniform FFT layer accumulate in the
// frequency domain; the contributor completing the sum performs the single
// inverse transform.
template <typename T>
struct accum_image {
    vol_p<T> spatial;
    cvol_p<T> freq;

    explicit operator bool() const { return spatial != nullptr || freq != nullptr; }
};

// Task-parallel training engine. Derives the per-iteration task dependency
// graph from the computation graph: one forward and one backward task per
// edge, one update task per trainable edge, a loss-gradient task per output
// node and the data provider. Tasks enter the global bucket queue when all
// their non-update dependencies are satisfied; the dependency of a forward
// task on the previous update of its edge is resolved by the force protocol,
// so no worker ever blocks on an update.
//
// Rounds are pipelined: the backward pass of iteration r runs concurrently
// with the forward pass of iteration r+1. The data provider of r+1 and the
// loss-gradient seeds of r are both released once the forward pass of r and
// the backward pass of r-1 have completed, which keeps exactly one backward
// and one forward wave in flight and bounds every cross-round reuse to two
// iterations (hence the parity-indexed buffers below).
//
// A forward task of iteration r+1 can be scheduled before the backward task
// of its edge has created the iteration-r update. Force handles this as an
// early attachment: the forward subtask parks on the edge and the update,
// once created, is enqueued already carrying it. No thread ever waits.
template <typename T>
class engine {
public:
    struct config {
        int threads = 1;
        bool memoize = true;
        T learning_rate = T(0.01);
        std::vector<conv_engine> edge_modes; // per edge; empty = all direct
        bool capture_gradients = false;
        bool guard_timing = false;
        // fault injection for protocol stress tests: widens the window in
        // which an update is observably executing
        int update_delay_us = 0;
    };

    struct sample {
        std::vector<vol_p<T>> inputs;  // one per input node, node-id order
        std::vector<vol_p<T>> desired; // one per output node, node-id order
    };

    // Called from a worker thread once per round; the returned sample must
    // stay alive for two rounds.
    using sample_source = std::function<const sample&(std::int64_t round)>;

    struct round_stats {
        double seconds = 0; // provider start to backward completion
        double loss = 0;
    };

    struct counters_snapshot {
        std::uint64_t force_completed = 0;
        std::uint64_t force_queued = 0;
        std::uint64_t force_executing = 0;
        std::uint64_t force_parked = 0;
        std::uint64_t attached_executed = 0;
        std::uint64_t blocked_on_update = 0; // no code path can increment this
        std::uint64_t sum_guard_acquisitions = 0;
        std::uint64_t sum_guard_held_ns = 0;
        std::vector<std::uint64_t> tasks_per_worker;
        std::vector<std::uint64_t> busy_ns_per_worker;
        bucket_queue::counters_snapshot queue;
        transform_counts transforms;
    };

    engine(net_graph<T>& net, const priority_table& pt, config cfg)
        : net_(net), pt_(pt), cfg_(std::move(cfg)), queue_(pt.num_ranks()) {
        const int nn = int(net_.nodes.size());
        const int ne = int(net_.edges.size());
        require(cfg_.threads >= 1, "engine needs at least one worker");
        require(int(pt.fwd_rank.size()) == ne, "priority table does not match the graph");
        if (cfg_.edge_modes.empty())
            cfg_.edge_modes.assign(std::size_t(ne), conv_engine::direct);
        require(int(cfg_.edge_modes.size()) == ne, "edge_modes size mismatch");
        for (const auto& n : net_.nodes)
            require(n.dims.all_positive(), "node " + n.name + " has no inferred shape");

        memo_.configure(std::size_t(nn), std::size_t(ne));
        nodes_.resize(std::size_t(nn));
        edges_.resize(std::size_t(ne)); // deque: elements stay put, mutexes never move

        for (int v = 0; v < nn; ++v) {
            auto& ns = nodes_[std::size_t(v)];
            const auto& gn = net_.nodes[v];
            ns.fwd_sum.set_required(int(std::max<std::size_t>(1, gn.in_edges.size())));
            ns.bwd_sum.set_required(gn.role == node_role::output
                                        ? 1
                                        : int(std::max<std::size_t>(1, gn.out_edges.size())));
            ns.fwd_sum.enable_guard_timing(cfg_.guard_timing);
            ns.bwd_sum.enable_guard_timing(cfg_.guard_timing);

            // frequency accumulation: all incoming edges FFT convolutions
            // over identically sized tail images
            ns.fwd_freq_accum = !gn.in_edges.empty();
            vec3i pad{0, 0, 0};
            for (int eid : gn.in_edges) {
                const vec3i tail = net_.nodes[net_.edges[eid].from].dims;
                if (!is_fft_conv(eid) || (pad.all_positive() && !(pad == tail)))
                    ns.fwd_freq_accum = false;
                pad = tail;
            }
            bool all_out_fft = !gn.out_edges.empty();
            for (int eid : gn.out_edges) {
                if (!is_fft_conv(eid))
                    all_out_fft = false;
                else
                    ns.need_fwd_fft = true;
            }
            ns.bwd_freq_accum = all_out_fft;
            for (int eid : gn.in_edges)
                if (is_fft_conv(eid)) {
                    const vec3i tail = net_.nodes[net_.edges[eid].from].dims;
                    if (std::find(ns.bwd_fft_pads.begin(), ns.bwd_fft_pads.end(), tail) ==
                        ns.bwd_fft_pads.end())
                        ns.bwd_fft_pads.push_back(tail);
                }
        }

        for (int e = 0; e < ne; ++e) {
            auto& es = edges_[std::size_t(e)];
            es.fwd_task.kind = task_kind::forward;
            es.fwd_task.id = e;
            es.bwd_task.kind = task_kind::backward;
            es.bwd_task.id = e;
            es.upd_task.kind = task_kind::update;
            es.upd_task.id = e;
        }
        provider_task_.kind = task_kind::data_provider;
        for (int v = 0; v < nn; ++v) {
            if (net_.nodes[v].role == node_role::output) {
                output_nodes_.push_back(v);
                auto ln = std::make_unique<task_node>();
                ln->kind = task_kind::loss_gradient;
                ln->id = v;
                loss_tasks_.push_back(std::move(ln));
            } else if (net_.nodes[v].role == node_role::input) {
                input_nodes_.push_back(v);
            }
        }

        tasks_per_worker_ = std::vector<std::atomic<std::uint64_t>>(std::size_t(cfg_.threads));
        busy_ns_per_worker_ =
            std::vector<std::atomic<std::uint64_t>>(std::size_t(cfg_.threads));
        workers_.reserve(std::size_t(cfg_.threads));
        for (int w = 0; w < cfg_.threads; ++w)
            workers_.emplace_back([this, w] { worker_loop(w); });
    }

    engine(const engine&) = delete;
    engine& operator=(const engine&) = delete;

    ~engine() {
        stop_.store(true, std::memory_order_release);
        queue_.wake_all();
        for (auto& t : workers_) t.join();
    }

    std::vector<round_stats> run(std::int64_t rounds, const sample_source& source) {
        require(rounds >= 1, "need at least one round");
        source_ = &source;
        total_rounds_ = rounds;
        fwd_round_.store(0, std::memory_order_release);
        bwd_round_.store(0, std::memory_order_release);
        for (auto& es : edges_) {
            std::lock_guard<std::mutex> g(es.upd.guard);
            es.upd.ph = update_phase::completed;
            es.upd.epoch = 0;
        }
        rounds_completed_.store(0, std::memory_order_release);
        per_round_loss_.assign(std::size_t(rounds) * output_nodes_.size(), 0.0);
        t_start_.assign(std::size_t(rounds), clock::time_point{});
        t_end_.assign(std::size_t(rounds), clock::time_point{});

        {
            std::lock_guard<std::mutex> g(advance_m_);
            fwd_done_round_ = 0;
            bwd_done_round_ = 0;
            next_provider_ = 1;
            try_advance_locked();
        }

        {
            std::unique_lock<std::mutex> g(driver_m_);
            driver_cv_.wait(g, [&] {
                return (rounds_completed_.load(std::memory_order_acquire) == rounds &&
                        pending_.load(std::memory_order_acquire) == 0) ||
                       failed_.load(std::memory_order_acquire);
            });
        }
        rethrow_worker_failure();

        for (auto& es : edges_)
            if (net_.edges[es.fwd_task.id].trainable()) {
                std::lock_guard<std::mutex> g(es.upd.guard);
                require(es.upd.ph == update_phase::completed,
                        "update task not completed at end of run");
            }

        std::vector<round_stats> stats;
        stats.reserve(std::size_t(rounds));
        for (std::int64_t r = 0; r < rounds; ++r) {
            double loss = 0;
            for (std::size_t o = 0; o < output_nodes_.size(); ++o)
                loss += per_round_loss_[std::size_t(r) * output_nodes_.size() + o];
            stats.push_back({std::chrono::duration<double>(t_end_[std::size_t(r)] -
                                                           t_start_[std::size_t(r)])
                                 .count(),
                             loss});
        }
        source_ = nullptr;
        return stats;
    }

    counters_snapshot counters() const {
        counters_snapshot c;
        c.force_completed = force_completed_.load(std::memory_order_relaxed);
        c.force_queued = force_queued_.load(std::memory_order_relaxed);
        c.force_executing = force_executing_.load(std::memory_order_relaxed);
        c.force_parked = force_parked_.load(std::memory_order_relaxed);
        c.attached_executed = attached_executed_.load(std::memory_order_relaxed);
        c.blocked_on_update = 0;
        for (const auto& ns : nodes_) {
            for (const auto* acc : {&ns.fwd_sum, &ns.bwd_sum}) {
                const auto s = acc->stats();
                c.sum_guard_acquisitions += s.acquisitions;
                c.sum_guard_held_ns += s.held_ns;
            }
        }
        for (const auto& t : tasks_per_worker_)
            c.tasks_per_worker.push_back(t.load(std::memory_order_relaxed));
        for (const auto& b : busy_ns_per_worker_)
            c.busy_ns_per_worker.push_back(b.load(std::memory_order_relaxed));
        c.queue = const_cast<bucket_queue&>(queue_).counters();
        c.transforms = cache_.counts();
        return c;
    }

    fft_plan_cache<T>& plan_cache() { return cache_; }
    memo_store<T>& memo() { return memo_; }

    std::uint64_t accumulator_completions() const {
        std::uint64_t total = 0;
        for (const auto& ns : nodes_)
            total += ns.fwd_sum.stats().completions + ns.bwd_sum.stats().completions;
        return total;
    }

    const volume<T>* captured_kernel_gradient(int edge) const {
        return edges_[std::size_t(edge)].grad_kernel
                   ? edges_[std::size_t(edge)].grad_kernel.get()
                   : nullptr;
    }
    T captured_bias_gradient(int edge) const { return edges_[std::size_t(edge)].grad_bias; }

private:
    using clock = std::chrono::steady_clock;

    enum class update_phase : std::uint8_t { completed, queued, executing };

    struct task_node : queue_node {
        task_kind kind = task_kind::forward;
        int id = -1;
    };

    struct update_state {
        std::mutex guard;
        update_phase ph = update_phase::completed;
        std::int64_t epoch = 0; // iteration of the pending/last update
        vol_p<T> x_fwd;
        vol_p<T> g_bwd;
        cvol_p<T> x_fft;
        cvol_p<T> g_fft;
        bool has_attached = false;       // forward subtask waiting on this update
        vol_p<T> attached_input;
    };

    struct edge_state {
        task_node fwd_task, bwd_task, upd_task;
        vol_p<T> fwd_input;
        vol_p<T> bwd_input;
        std::shared_ptr<argmax_record> record[2]; // by forward-wave parity
        update_state upd;
        vol_p<T> grad_kernel;
        T grad_bias = T(0);
    };

    struct node_state {
        sum_accumulator<accum_image<T>> fwd_sum;
        sum_accumulator<accum_image<T>> bwd_sum;
        vol_p<T> fwd_image[2]; // by forward-wave parity
        vol_p<T> bwd_image;
        bool fwd_freq_accum = false;
        bool bwd_freq_accum = false;
        bool need_fwd_fft = false;
        std::vector<vec3i> bwd_fft_pads;
    };

    bool is_fft_conv(int eid) const {
        return net_.edges[eid].kind() == edge_kind::convolution &&
               cfg_.edge_modes[std::size_t(eid)] == conv_engine::fft;
    }

    static void merge_payload(accum_image<T>& dst, accum_image<T>&& src) {
        if (dst.freq) {
            assert(src.freq && dst.freq->dims() == src.freq->dims());
            dst.freq->flat() += src.freq->flat();
        } else {
            assert(dst.spatial && src.spatial && dst.spatial->dims() == src.spatial->dims());
            dst.spatial->flat() += src.spatial->flat();
        }
    }

    // ---- wave sequencing ----

    // Called with advance_m_ held. Starts the next [backward r, forward r+1]
    // unit once forward r and backward r-1 are both complete.
    void try_advance_locked() {
        const std::int64_t p = next_provider_;
        const std::int64_t r = p - 1; // backward wave to release
        if (fwd_done_round_ < r || bwd_done_round_ < r - 1) return;
        if (r >= 1) {
            bwd_round_.store(r, std::memory_order_release);
            learn_remaining_.store(std::int64_t(net_.edges.size() + output_nodes_.size()),
                                   std::memory_order_release);
            for (auto& lt : loss_tasks_) {
                pending_.fetch_add(1, std::memory_order_acq_rel);
                queue_.push(lt.get(), 0);
            }
        }
        if (p <= total_rounds_) {
            next_provider_ = p + 1;
            fwd_outputs_remaining_.store(std::int64_t(output_nodes_.size()),
                                         std::memory_order_release);
            pending_.fetch_add(1, std::memory_order_acq_rel);
            queue_.push(&provider_task_, 0);
        } else {
            next_provider_ = p + 1; // no further waves
        }
    }

    void on_forward_wave_done(std::int64_t r) {
        std::lock_guard<std::mutex> g(advance_m_);
        fwd_done_round_ = r;
        try_advance_locked();
    }

    void on_backward_wave_done(std::int64_t r) {
        t_end_[std::size_t(r - 1)] = clock::now();
        {
            std::lock_guard<std::mutex> g(advance_m_);
            bwd_done_round_ = r;
            try_advance_locked();
        }
        rounds_completed_.fetch_add(1, std::memory_order_acq_rel);
        {
            std::lock_guard<std::mutex> g(driver_m_);
            driver_cv_.notify_all();
        }
    }

    // ---- worker ----

    void worker_loop(int wid) {
        for (;;) {
            queue_node* qn = queue_.pop_wait(stop_);
            if (!qn) return;
            auto* tn = static_cast<task_node*>(qn);
            tasks_per_worker_[std::size_t(wid)].fetch_add(1, std::memory_order_relaxed);
            const auto t0 = clock::now();
            try {
                dispatch(tn);
                busy_ns_per_worker_[std::size_t(wid)].fetch_add(
                    std::uint64_t(std::chrono::duration_cast<std::chrono::nanoseconds>(
                                      clock::now() - t0)
                                      .count()),
                    std::memory_order_relaxed);
            } catch (...) {
                {
                    std::lock_guard<std::mutex> g(driver_m_);
                    if (!failure_) failure_ = std::current_exception();
                    failed_.store(true, std::memory_order_release);
                }
                driver_cv_.notify_all();
            }
        }
    }

    void dispatch(task_node* tn) {
        switch (tn->kind) {
            case task_kind::data_provider:
                current_phase() = compute_phase::forward;
                run_provider();
                pending_done();
                break;
            case task_kind::forward: {
                current_phase() = compute_phase::forward;
                const int e = tn->id;
                vol_p<T> input = std::move(edges_[std::size_t(e)].fwd_input);
                if (net_.edges[e].trainable())
                    force_and_do_forward(e, std::move(input));
                else
                    do_forward(e, std::move(input));
                pending_done();
                break;
            }
            case task_kind::backward:
                current_phase() = compute_phase::backward;
                run_backward(tn->id);
                learn_done();
                pending_done();
                break;
            case task_kind::loss_gradient:
                current_phase() = compute_phase::backward;
                run_loss_gradient(tn->id);
                learn_done();
                pending_done();
                break;
            case task_kind::update: {
                const int e = tn->id;
                auto& us = edges_[std::size_t(e)].upd;
                bool claimed = false;
                {
                    std::lock_guard<std::mutex> g(us.guard);
                    if (us.ph == update_phase::queued) {
                        us.ph = update_phase::executing;
                        claimed = true;
                    }
                }
                // an unclaimed pop lost the race against force(); the forcing
                // thread runs the update and its bookkeeping
                if (claimed) {
                    current_phase() = compute_phase::update;
                    run_update_body(e);
                }
                break;
            }
        }
        current_phase() = compute_phase::other;
    }

    // ---- data provider and loss gradient ----

    void run_provider() {
        const std::int64_t r = fwd_round_.load(std::memory_order_acquire) + 1;
        fwd_round_.store(r, std::memory_order_release);
        t_start_[std::size_t(r - 1)] = clock::now();
        const sample& s = (*source_)(r);
        require(s.inputs.size() == input_nodes_.size() &&
                    s.desired.size() == output_nodes_.size(),
                "sample shape does not match the network");
        auto& bank = desired_bank_[std::size_t(r & 1)];
        bank.assign(s.desired.begin(), s.desired.end());
        for (std::size_t i = 0; i < input_nodes_.size(); ++i) {
            accum_image<T> payload;
            payload.spatial = s.inputs[i];
            contribute_forward(input_nodes_[i], std::move(payload));
        }
    }

    void run_loss_gradient(int v) {
        const std::int64_t r = bwd_round_.load(std::memory_order_acquire);
        const auto& ns = nodes_[std::size_t(v)];
        std::size_t oi = 0;
        while (output_nodes_[oi] != v) ++oi;
        const vol_p<T>& actual = ns.fwd_image[r & 1];
        const vol_p<T>& desired = desired_bank_[std::size_t(r & 1)][oi];
        require_f(actual->dims() == desired->dims(), [&] {
            return "desired output shape mismatch at node " + net_.nodes[v].name;
        });
        vol_p<T> g = make_volume<T>(actual->dims());
        g->flat() = actual->flat() - desired->flat();
        per_round_loss_[std::size_t(r - 1) * output_nodes_.size() + oi] =
            0.5 * double((g->flat().template cast<double>()).square().sum());
        accum_image<T> payload;
        payload.spatial = std::move(g);
        contribute_backward(v, std::move(payload));
    }

    // ---- forward pass ----

    void force_and_do_forward(int e, vol_p<T> input) {
        auto& us = edges_[std::size_t(e)].upd;
        const std::int64_t r = fwd_round_.load(std::memory_order_acquire);
        enum class action { run_now, run_update_first, attached, parked } act;
        {
            std::lock_guard<std::mutex> g(us.guard);
            if (us.epoch == r - 2) {
                // the backward task of iteration r-1 has not created the
                // update yet; park the subtask, creation will adopt it
                assert(us.ph == update_phase::completed);
                assert(!us.has_attached && "second subtask attached to one update");
                us.has_attached = true;
                us.attached_input = std::move(input);
                act = action::parked;
            } else {
                assert(us.epoch == r - 1 &&
                       "forward forced an update of the wrong iteration");
                switch (us.ph) {
                    case update_phase::completed:
                        act = action::run_now;
                        break;
                    case update_phase::queued:
                        us.ph = update_phase::executing;
                        act = action::run_update_first;
                        break;
                    case update_phase::executing:
                    default:
                        assert(!us.has_attached && "second subtask attached to one update");
                        us.has_attached = true;
                        us.attached_input = std::move(input);
                        act = action::attached;
                        break;
                }
            }
        }
        switch (act) {
            case action::run_now:
                force_completed_.fetch_add(1, std::memory_order_relaxed);
                do_forward(e, std::move(input));
                break;
            case action::run_update_first:
                force_queued_.fetch_add(1, std::memory_order_relaxed);
                // physically unlink; a concurrent pop may have beaten us, in
                // which case that worker's claim attempt found ph != queued
                queue_.remove(&edges_[std::size_t(e)].upd_task);
                current_phase() = compute_phase::update;
                run_update_body(e);
                current_phase() = compute_phase::forward;
                do_forward(e, std::move(input));
                break;
            case action::attached:
                force_executing_.fetch_add(1, std::memory_order_relaxed);
                break;
            case action::parked:
                force_parked_.fetch_add(1, std::memory_order_relaxed);
                break;
        }
    }

    void do_forward(int e, vol_p<T> input) {
        const auto& ge = net_.edges[e];
        auto& es = edges_[std::size_t(e)];
        const int u = ge.from, v = ge.to;
        const std::int64_t r = fwd_round_.load(std::memory_order_acquire);
        accum_image<T> payload;

        switch (ge.kind()) {
            case edge_kind::convolution: {
                const auto& k = std::get<conv_op<T>>(ge.op).k;
                if (cfg_.edge_modes[std::size_t(e)] == conv_engine::direct) {
                    payload.spatial = share(conv_valid_direct(*input, k));
                } else {
                    cvol_p<T> x_f = memo_.find_node_fwd(std::size_t(u), r);
                    assert(x_f && "image transform missing; producer ordering broken");
                    cvol_p<T> k_f = share(
                        fwd_kernel_fft(cache_, k.weights, k.sparsity, net_.nodes[u].dims));
                    if (cfg_.memoize) memo_.put_edge_kernel(std::size_t(e), r, k_f);
                    if (nodes_[std::size_t(v)].fwd_freq_accum) {
                        cvol_p<T> prod = make_cvolume<T>(x_f->dims());
                        prod->flat() = x_f->flat() * k_f->flat().conjugate();
                        payload.freq = std::move(prod);
                    } else {
                        payload.spatial =
                            share(fft_conv_valid_pre(cache_, *x_f, *k_f, net_.nodes[v].dims));
                    }
                }
                break;
            }
            case edge_kind::transfer:
                payload.spatial =
                    share(transfer_forward(*input, std::get<transfer_op<T>>(ge.op).fn));
                break;
            case edge_kind::max_pool: {
                auto [out, rec] = maxpool_forward(*input, std::get<pool_op>(ge.op).spec);
                es.record[r & 1] = std::allocate_shared<argmax_record>(
                    pool_allocator<argmax_record>(small_object_pool()), std::move(rec));
                payload.spatial = share(std::move(out));
                break;
            }
            case edge_kind::max_filter: {
                auto [out, rec] = maxfilter_forward(*input, std::get<filter_op>(ge.op).spec);
                es.record[r & 1] = std::allocate_shared<argmax_record>(
                    pool_allocator<argmax_record>(small_object_pool()), std::move(rec));
                payload.spatial = share(std::move(out));
                break;
            }
        }
        contribute_forward(v, std::move(payload));
    }

    void contribute_forward(int v, accum_image<T> payload) {
        auto& ns = nodes_[std::size_t(v)];
        if (ns.fwd_sum.add(std::move(payload), merge_payload)) finish_forward_at_node(v);
    }

    void finish_forward_at_node(int v) {
        auto& ns = nodes_[std::size_t(v)];
        const std::int64_t r = fwd_round_.load(std::memory_order_acquire);
        accum_image<T> sum = ns.fwd_sum.take();
        vol_p<T> img;
        if (sum.freq)
            img = share(cache_.inverse_real(*sum.freq, net_.nodes[v].dims));
        else
            img = std::move(sum.spatial);
        ns.fwd_image[r & 1] = img;

        if (ns.need_fwd_fft)
            memo_.put_node_fwd(std::size_t(v), r,
                               share(cache_.forward(*img, net_.nodes[v].dims,
                                                    transform_kind::image_forward)));

        if (net_.nodes[v].role == node_role::output) {
            if (fwd_outputs_remaining_.fetch_sub(1, std::memory_order_acq_rel) == 1)
                on_forward_wave_done(r);
        } else {
            for (int eid : net_.nodes[v].out_edges) {
                edges_[std::size_t(eid)].fwd_input = img;
                pending_.fetch_add(1, std::memory_order_acq_rel);
                queue_.push(&edges_[std::size_t(eid)].fwd_task,
                            pt_.fwd_rank[std::size_t(eid)]);
            }
        }
    }

    // ---- backward pass ----

    void run_backward(int e) {
        const auto& ge = net_.edges[e];
        auto& es = edges_[std::size_t(e)];
        const int u = ge.from, v = ge.to;
        const std::int64_t r = bwd_round_.load(std::memory_order_acquire);
        vol_p<T> g_v = std::move(es.bwd_input);
        accum_image<T> payload;

        switch (ge.kind()) {
            case edge_kind::convolution: {
                const auto& k = std::get<conv_op<T>>(ge.op).k;
                if (cfg_.edge_modes[std::size_t(e)] == conv_engine::direct) {
                    payload.spatial =
                        share(conv_full_direct(*g_v, reflect(k.weights), k.sparsity));
                } else {
                    cvol_p<T> g_f = memo_.find_node_bwd(std::size_t(v), r, net_.nodes[u].dims);
                    assert(g_f && "backward image transform missing");
                    cvol_p<T> k_f =
                        cfg_.memoize ? memo_.find_edge_kernel(std::size_t(e), r) : nullptr;
                    if (!k_f)
                        k_f = share(fwd_kernel_fft(cache_, k.weights, k.sparsity,
                                                   net_.nodes[u].dims));
                    if (nodes_[std::size_t(u)].bwd_freq_accum) {
                        cvol_p<T> prod = make_cvolume<T>(g_f->dims());
                        prod->flat() = g_f->flat() * k_f->flat(); // adjoint: no conjugate
                        payload.freq = std::move(prod);
                    } else {
                        payload.spatial = share(fft_conv_full_adjoint_pre(cache_, *g_f, *k_f));
                    }
                }
                break;
            }
            case edge_kind::transfer:
                payload.spatial =
                    share(transfer_backward(*g_v, *nodes_[std::size_t(u)].fwd_image[r & 1],
                                            std::get<transfer_op<T>>(ge.op).fn));
                break;
            case edge_kind::max_pool:
                payload.spatial = share(
                    maxpool_backward(*g_v, *es.record[r & 1], std::get<pool_op>(ge.op).spec));
                break;
            case edge_kind::max_filter:
                payload.spatial = share(maxfilter_backward(*g_v, *es.record[r & 1],
                                                           std::get<filter_op>(ge.op).spec,
                                                           net_.nodes[u].dims));
                break;
        }

        if (ge.trainable()) {
            auto& us = es.upd;
            bool adopted = false;
            {
                std::lock_guard<std::mutex> g(us.guard);
                assert(us.ph == update_phase::completed && "previous update still pending");
                us.ph = update_phase::queued;
                us.epoch = r;
                us.x_fwd = nodes_[std::size_t(u)].fwd_image[r & 1];
                us.g_bwd = g_v;
                if (is_fft_conv(e) && cfg_.memoize) {
                    us.x_fft = memo_.find_node_fwd(std::size_t(u), r);
                    us.g_fft = memo_.find_node_bwd(std::size_t(v), r, net_.nodes[u].dims);
                }
                adopted = us.has_attached; // a parked forward of round r+1
            }
            (void)adopted;
            pending_.fetch_add(1, std::memory_order_acq_rel);
            queue_.push(&es.upd_task, pt_.update_band());
        }

        contribute_backward(u, std::move(payload));
    }

    void contribute_backward(int u, accum_image<T> payload) {
        auto& ns = nodes_[std::size_t(u)];
        if (ns.bwd_sum.add(std::move(payload), merge_payload)) finish_backward_at_node(u);
    }

    void finish_backward_at_node(int u) {
        auto& ns = nodes_[std::size_t(u)];
        const std::int64_t r = bwd_round_.load(std::memory_order_acquire);
        accum_image<T> sum = ns.bwd_sum.take();
        vol_p<T> img;
        if (sum.freq)
            img = share(cache_.inverse_real(*sum.freq, net_.nodes[u].dims));
        else
            img = std::move(sum.spatial);
        ns.bwd_image = img;

        for (const vec3i& pad : ns.bwd_fft_pads)
            memo_.put_node_bwd(std::size_t(u), r,
                               share(cache_.forward(*img, pad, transform_kind::image_forward)));

        for (int eid : net_.nodes[u].in_edges) {
            edges_[std::size_t(eid)].bwd_input = img;
            pending_.fetch_add(1, std::memory_order_acq_rel);
            queue_.push(&edges_[std::size_t(eid)].bwd_task, pt_.bwd_rank[std::size_t(eid)]);
        }
    }

    // ---- update ----

    // Runs with the update claimed (phase == executing, or adopted straight
    // from queued by a forcing thread).
    void run_update_body(int e) {
        auto& es = edges_[std::size_t(e)];
        auto& us = es.upd;
        auto& mutable_edge = net_.edges[e];

        if (mutable_edge.kind() == edge_kind::convolution) {
            auto& k = std::get<conv_op<T>>(mutable_edge.op).k;
            volume<T> grad({1, 1, 1});
            if (cfg_.edge_modes[std::size_t(e)] == conv_engine::fft) {
                cvol_p<T> x_f = us.x_fft;
                cvol_p<T> g_f = us.g_fft;
                const vec3i pad = us.x_fwd->dims();
                if (!x_f)
                    x_f = share(cache_.forward(*us.x_fwd, pad, transform_kind::image_forward));
                if (!g_f)
                    g_f = share(cache_.forward(*us.g_bwd, pad, transform_kind::image_forward));
                grad = fft_kernel_gradient_pre(cache_, *x_f, *g_f, k.weights.dims(),
                                               k.sparsity);
            } else {
                grad =
                    kernel_gradient_direct(*us.x_fwd, *us.g_bwd, k.weights.dims(), k.sparsity);
            }
            if (cfg_.capture_gradients) es.grad_kernel = share(grad.clone());
            k.weights.flat() -= cfg_.learning_rate * grad.flat();
        } else { // transfer
            auto& fn = std::get<transfer_op<T>>(mutable_edge.op).fn;
            const T gb = transfer_bias_gradient(*us.x_fwd, *us.g_bwd, fn);
            if (cfg_.capture_gradients) es.grad_bias = gb;
            fn.bias -= cfg_.learning_rate * gb;
        }

        memo_.clear_edge_kernel(std::size_t(e));
        if (cfg_.update_delay_us > 0)
            std::this_thread::sleep_for(std::chrono::microseconds(cfg_.update_delay_us));

        bool run_attached = false;
        vol_p<T> attached;
        {
            std::lock_guard<std::mutex> g(us.guard);
            us.ph = update_phase::completed;
            us.x_fwd = nullptr;
            us.g_bwd = nullptr;
            us.x_fft = nullptr;
            us.g_fft = nullptr;
            if (us.has_attached) {
                us.has_attached = false;
                attached = std::move(us.attached_input);
                run_attached = true;
            }
        }
        if (run_attached) {
            attached_executed_.fetch_add(1, std::memory_order_relaxed);
            current_phase() = compute_phase::forward;
            do_forward(e, std::move(attached));
            current_phase() = compute_phase::update;
        }
        pending_done(); // the update task itself
    }

    // ---- bookkeeping ----

    void pending_done() {
        if (pending_.fetch_sub(1, std::memory_order_acq_rel) == 1) {
            std::lock_guard<std::mutex> g(driver_m_);
            driver_cv_.notify_all();
        }
    }

    void learn_done() {
        if (learn_remaining_.fetch_sub(1, std::memory_order_acq_rel) == 1)
            on_backward_wave_done(bwd_round_.load(std::memory_order_acquire));
    }

    void rethrow_worker_failure() {
        if (failed_.load(std::memory_order_acquire)) {
            std::lock_guard<std::mutex> g(driver_m_);
            if (failure_) std::rethrow_exception(failure_);
        }
    }

    net_graph<T>& net_;
    priority_table pt_;
    config cfg_;

    bucket_queue queue_;
    fft_plan_cache<T> cache_;
    memo_store<T> memo_;

    std::deque<node_state> nodes_;
    std::deque<edge_state> edges_;
    task_node provider_task_;
    std::vector<std::unique_ptr<task_node>> loss_tasks_;
    std::vector<int> input_nodes_;
    std::vector<int> output_nodes_;

    const sample_source* source_ = nullptr;
    std::int64_t total_rounds_ = 0;
    std::vector<vol_p<T>> desired_bank_[2];
    std::vector<double> per_round_loss_;
    std::vector<clock::time_point> t_start_, t_end_;

    std::atomic<std::int64_t> fwd_round_{0};
    std::atomic<std::int64_t> bwd_round_{0};
    std::atomic<std::int64_t> pending_{0};
    std::atomic<std::int64_t> learn_remaining_{0};
    std::atomic<std::int64_t> fwd_outputs_remaining_{0};
    std::atomic<std::int64_t> rounds_completed_{0};

    std::mutex advance_m_;
    std::int64_t fwd_done_round_ = 0;
    std::int64_t bwd_done_round_ = 0;
    std::int64_t next_provider_ = 1;

    std::mutex driver_m_;
    std::condition_variable driver_cv_;
    std::atomic<bool> stop_{false};
    std::atomic<bool> failed_{false};
    std::exception_ptr failure_;

    std::vector<std::thread> workers_;
    std::vector<std::atomic<std::uint64_t>> tasks_per_worker_;
    std::vector<std::atomic<std::uint64_t>> busy_ns_per_worker_;
    std::atomic<std::uint64_t> force_completed_{0};
    std::atomic<std::uint64_t> force_queued_{0};
    std::atomic<std::uint64_t> force_executing_{0};
    std::atomic<std::uint64_t> force_parked_{0};
    std::atomic<std::uint64_t> attached_executed_{0};
};

} // namespace znn
