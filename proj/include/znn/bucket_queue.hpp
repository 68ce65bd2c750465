#pragma once

#include <atomic>
#include <cassert>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <mutex>
#include <vector>

#include "znn/types.hpp"

namespace znn {

// Intrusive hook embedded in every schedulable task. A node may be in at
// most one queue at a time.
struct queue_node {
    queue_node* next = nullptr;
    queue_node* prev = nullptr;
    int rank = -1;
    bool queued = false;
};

// Global task priority queue: a binary heap keyed by priority rank over
// per-rank FIFO lists. Insertion and removal cost O(log K) where K is the
// number of distinct live ranks, not the number of queued tasks. Rank 0 is
// the highest priority; ranks must be < num_ranks. All operations hold one
// short guard around pointer work and the heap sift.
class bucket_queue {
public:
    explicit bucket_queue(int num_ranks)
        : buckets_(std::size_t(num_ranks)), in_heap_(std::size_t(num_ranks), false) {
        heap_.reserve(std::size_t(num_ranks));
    }

    struct counters_snapshot {
        std::uint64_t pushes = 0;
        std::uint64_t pops = 0;
        std::uint64_t removals = 0;
        std::uint64_t idle_waits = 0;
    };

    void push(queue_node* n, int rank) {
        {
            std::lock_guard<std::mutex> g(m_);
            assert(!n->queued && "task already queued");
            assert(rank >= 0 && rank < int(buckets_.size()));
            n->rank = rank;
            n->queued = true;
            n->next = nullptr;
            bucket& b = buckets_[std::size_t(rank)];
            n->prev = b.tail;
            if (b.tail)
                b.tail->next = n;
            else
                b.head = n;
            b.tail = n;
            heap_insert(rank);
            ++pushes_;
        }
        cv_.notify_one();
    }

    // Highest-priority task or nullptr when the queue is empty.
    queue_node* try_pop() {
        std::lock_guard<std::mutex> g(m_);
        return pop_locked();
    }

    // Blocks until a task is available or the stop flag is raised; returns
    // nullptr only on stop. Stoppers must call wake_all() after raising the
    // flag so the wait predicate is re-evaluated under the guard.
    queue_node* pop_wait(const std::atomic<bool>& stop) {
        std::unique_lock<std::mutex> g(m_);
        for (;;) {
            if (queue_node* n = pop_locked()) return n;
            if (stop.load(std::memory_order_acquire)) return nullptr;
            ++idle_waits_;
            cv_.wait(g);
        }
    }

    // Wakes every blocked popper with the guard held, so a stop flag raised
    // just before cannot be missed between predicate check and sleep.
    void wake_all() {
        { std::lock_guard<std::mutex> g(m_); }
        cv_.notify_all();
    }

    // Unlinks a specific queued task; true if it was present.
    bool remove(queue_node* n) {
        std::lock_guard<std::mutex> g(m_);
        if (!n->queued) return false;
        unlink(n);
        ++removals_;
        return true;
    }

    void notify_all() { cv_.notify_all(); }

    bool empty() {
        std::lock_guard<std::mutex> g(m_);
        for (auto& b : buckets_)
            if (b.head) return false;
        return true;
    }

    counters_snapshot counters() {
        std::lock_guard<std::mutex> g(m_);
        return {pushes_, pops_, removals_, idle_waits_};
    }

private:
    struct bucket {
        queue_node* head = nullptr;
        queue_node* tail = nullptr;
    };

    void unlink(queue_node* n) {
        bucket& b = buckets_[std::size_t(n->rank)];
        if (n->prev)
            n->prev->next = n->next;
        else
            b.head = n->next;
        if (n->next)
            n->next->prev = n->prev;
        else
            b.tail = n->prev;
        n->next = n->prev = nullptr;
        n->queued = false;
    }

    queue_node* pop_locked() {
        while (!heap_.empty()) {
            const int rank = heap_.front();
            bucket& b = buckets_[std::size_t(rank)];
            if (!b.head) {
                heap_pop();
                in_heap_[std::size_t(rank)] = false;
                continue;
            }
            queue_node* n = b.head;
            unlink(n);
            ++pops_;
            return n;
        }
        return nullptr;
    }

    void heap_insert(int rank) {
        if (in_heap_[std::size_t(rank)]) return;
        in_heap_[std::size_t(rank)] = true;
        heap_.push_back(rank);
        std::size_t i = heap_.size() - 1;
        while (i > 0) {
            const std::size_t parent = (i - 1) / 2;
            if (heap_[parent] <= heap_[i]) break;
            std::swap(heap_[parent], heap_[i]);
            i = parent;
        }
    }

    void heap_pop() {
        heap_.front() = heap_.back();
        heap_.pop_back();
        std::size_t i = 0;
        for (;;) {
            const std::size_t l = 2 * i + 1, r = 2 * i + 2;
            std::size_t smallest = i;
            if (l < heap_.size() && heap_[l] < heap_[smallest]) smallest = l;
            if (r < heap_.size() && heap_[r] < heap_[smallest]) smallest = r;
            if (smallest == i) break;
            std::swap(heap_[i], heap_[smallest]);
            i = smallest;
        }
    }

    std::mutex m_;
    std::condition_variable cv_;
    std::vector<bucket> buckets_;
    std::vector<bool> in_heap_;
    std::vector<int> heap_;
    std::uint64_t pushes_ = 0, pops_ = 0, removals_ = 0, idle_waits_ = 0;
};

} // namespace znn
