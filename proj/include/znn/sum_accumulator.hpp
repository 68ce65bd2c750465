#pragma once

#include <atomic>
#include <cassert>
#include <chrono>
#include <cstdint>
#include <mutex>
#include <utility>

#if defined(__x86_64__) || defined(__i386__)
#include <x86intrin.h>
#endif

#include "znn/types.hpp"

namespace znn {

// Almost wait-free concurrent summation. Contributors hand their payload to
// add(); the guard protects only the slot handle swap and the counters,
// while the element-wise additions run outside it, so guard-held time does
// not depend on the payload size. Exactly one contributor per fill observes
// the completed count and returns true; the slot then holds the sum of all
// `required` contributions, which take() hands out while resetting the cell
// for the next iteration.
//
// Payload must be a movable handle with an empty state testable via
// explicit bool (a shared_ptr, or a small struct of them).
template <typename Payload>
class sum_accumulator {
public:
    sum_accumulator() = default;
    explicit sum_accumulator(int required) : required_(required) {}

    void set_required(int required) {
        std::lock_guard<std::mutex> g(lock_);
        assert(total_ == 0 && !slot_ && "reconfiguring a non-empty accumulator");
        required_ = required;
    }

    int required() const { return required_; }

    void enable_guard_timing(bool on) {
        timing_enabled_ = on;
        if (on) (void)ticks_per_ns(); // calibrate outside any guard
    }

    // Algorithm: loop { under guard: if slot empty, deposit v and count;
    // else take the slot value out; } — a caller that deposited returns
    // (true iff it completed the fill); a caller that took merges outside
    // the guard and retries.
    template <typename AddTo>
    bool add(Payload v, AddTo&& add_to) {
        Payload taken{};
        bool last = false;
        for (;;) {
            {
                // contributors arrive with their payload freshly written and
                // this cell evicted; pull its lines in before taking the lock
                // so the guarded pointer work runs warm
                __builtin_prefetch(this, 1);
                __builtin_prefetch(reinterpret_cast<const char*>(this) + 64, 1);
                std::lock_guard<std::mutex> g(lock_);
                auto t0 = now(); // held time only, not wait time
                if (!slot_) {
                    slot_ = std::move(v);
                    v = Payload{};
                    ++total_;
                    assert(total_ <= required_ && "accumulator overfilled");
                    last = (total_ == required_);
                } else {
                    taken = std::move(slot_);
                    slot_ = Payload{};
                }
                note_guard(t0);
            }
            if (!v) {
                if (last) completions_.fetch_add(1, std::memory_order_relaxed);
                return last;
            }
            add_to(v, std::move(taken));
            taken = Payload{};
        }
    }

    // Get-Sum: hands out the completed sum and resets the cell.
    Payload take() {
        std::lock_guard<std::mutex> g(lock_);
        auto t0 = now();
        assert(total_ == required_ && "taking an incomplete sum");
        Payload out = std::move(slot_);
        slot_ = Payload{};
        total_ = 0;
        note_guard(t0);
        return out;
    }

    struct guard_stats {
        std::uint64_t acquisitions = 0;
        std::uint64_t held_ns = 0;
        std::uint64_t completions = 0;
    };

    guard_stats stats() const {
        return {acquisitions_.load(std::memory_order_relaxed),
                held_ns_.load(std::memory_order_relaxed),
                completions_.load(std::memory_order_relaxed)};
    }

private:
    // Timestamps for the held-time instrumentation. rdtsc where available:
    // it reads no memory, so the measurement itself cannot be perturbed by
    // the payload writes evicting cache lines between acquisitions.
    static std::uint64_t tick() {
#if defined(__x86_64__) || defined(__i386__)
        return __rdtsc();
#else
        return std::uint64_t(
            std::chrono::steady_clock::now().time_since_epoch().count());
#endif
    }

    static double ticks_per_ns() {
        static const double tpn = [] {
#if defined(__x86_64__) || defined(__i386__)
            const auto w0 = std::chrono::steady_clock::now();
            const std::uint64_t t0 = __rdtsc();
            while (std::chrono::steady_clock::now() - w0 < std::chrono::milliseconds(20)) {
            }
            const std::uint64_t t1 = __rdtsc();
            const auto w1 = std::chrono::steady_clock::now();
            return double(t1 - t0) /
                   double(std::chrono::duration_cast<std::chrono::nanoseconds>(w1 - w0)
                              .count());
#else
            return 1.0;
#endif
        }();
        return tpn;
    }

    std::uint64_t now() const { return timing_enabled_ ? tick() : 0; }

    void note_guard(std::uint64_t t0) {
        acquisitions_.fetch_add(1, std::memory_order_relaxed);
        if (timing_enabled_) {
            const double ns = double(tick() - t0) / ticks_per_ns();
            held_ns_.fetch_add(std::uint64_t(ns > 0 ? ns : 0), std::memory_order_relaxed);
        }
    }

    std::mutex lock_;
    Payload slot_{};
    int total_ = 0;
    int required_ = 1;
    bool timing_enabled_ = false;
    std::atomic<std::uint64_t> acquisitions_{0};
    std::atomic<std::uint64_t> held_ns_{0};
    std::atomic<std::uint64_t> completions_{0};
};

} // namespace znn
