#pragma once

#include <array>
#include <atomic>
#include <bit>
#include <cassert>
#include <cstddef>
#include <cstdint>
#include <mutex>
#include <new>
#include <vector>

#ifndef NDEBUG
#include <unordered_set>
#endif

namespace znn {

// Recycling chunk allocator with 32 power-of-two size classes. Requests are
// rounded up to the next power of two and served from the matching class'
// free list; a fresh system allocation happens only when the list is empty.
// Released chunks go back to their class and are never returned to the
// system while the pool is in use, so the footprint is monotone and
// stabilizes once the steady-state working set has been seen.
//
// One global instance serves volume payloads (64-byte aligned for vector
// loads), another the small helper objects; see volume_pool() and
// small_object_pool() below.
class chunk_pool {
public:
    static constexpr int num_classes = 32;

    struct counters_snapshot {
        std::uint64_t system_allocs = 0;  // calls into ::operator new
        std::uint64_t system_bytes = 0;   // bytes obtained from the system
        std::uint64_t acquires = 0;
        std::uint64_t releases = 0;
        std::uint64_t live_chunks = 0;
        std::uint64_t free_chunks = 0;
    };

    explicit chunk_pool(std::size_t alignment = alignof(std::max_align_t))
        : alignment_(alignment < alignof(std::max_align_t) ? alignof(std::max_align_t)
                                                           : alignment) {}

    chunk_pool(const chunk_pool&) = delete;
    chunk_pool& operator=(const chunk_pool&) = delete;

    ~chunk_pool() {
        // Free lists are handed back to the system only at destruction.
        for (int i = 0; i < num_classes; ++i) {
            auto& sc = classes_[i];
            for (void* p : sc.free_chunks)
                ::operator delete(p, std::align_val_t(alignment_));
        }
    }

    // Capacity a request of `size` bytes is served with.
    static constexpr std::size_t capacity_for(std::size_t size) {
        return std::bit_ceil(size == 0 ? std::size_t(1) : size);
    }

    static constexpr int class_index(std::size_t size) {
        return std::countr_zero(capacity_for(size));
    }

    void* acquire(std::size_t size) {
        assert(size >= 1 && size <= (std::size_t(1) << 31));
        const int ci = class_index(size);
        auto& sc = classes_[ci];
        void* chunk = nullptr;
        {
            std::lock_guard<std::mutex> g(sc.m);
            if (!sc.free_chunks.empty()) {
                chunk = sc.free_chunks.back();
                sc.free_chunks.pop_back();
            }
            ++sc.live;
#ifndef NDEBUG
            if (chunk) sc.owned.insert(chunk);
#endif
        }
        if (!chunk) {
            const std::size_t cap = std::size_t(1) << ci;
            chunk = ::operator new(cap, std::align_val_t(alignment_));
            system_allocs_.fetch_add(1, std::memory_order_relaxed);
            system_bytes_.fetch_add(cap, std::memory_order_relaxed);
#ifndef NDEBUG
            std::lock_guard<std::mutex> g(sc.m);
            sc.owned.insert(chunk);
#endif
        }
        acquires_.fetch_add(1, std::memory_order_relaxed);
        return chunk;
    }

    void release(void* chunk, std::size_t size) {
        const int ci = class_index(size);
        auto& sc = classes_[ci];
        std::lock_guard<std::mutex> g(sc.m);
#ifndef NDEBUG
        assert(sc.owned.count(chunk) && "chunk released to a foreign pool or wrong class");
#endif
        sc.free_chunks.push_back(chunk);
        --sc.live;
        releases_.fetch_add(1, std::memory_order_relaxed);
    }

    std::size_t alignment() const { return alignment_; }

    counters_snapshot counters() const {
        counters_snapshot s;
        s.system_allocs = system_allocs_.load(std::memory_order_relaxed);
        s.system_bytes = system_bytes_.load(std::memory_order_relaxed);
        s.acquires = acquires_.load(std::memory_order_relaxed);
        s.releases = releases_.load(std::memory_order_relaxed);
        for (int i = 0; i < num_classes; ++i) {
            auto& sc = const_cast<size_class&>(classes_[i]);
            std::lock_guard<std::mutex> g(sc.m);
            s.live_chunks += std::uint64_t(sc.live);
            s.free_chunks += sc.free_chunks.size();
        }
        return s;
    }

    std::uint64_t class_free_count(int ci) const {
        auto& sc = const_cast<size_class&>(classes_[ci]);
        std::lock_guard<std::mutex> g(sc.m);
        return sc.free_chunks.size();
    }

    std::uint64_t class_live_count(int ci) const {
        auto& sc = const_cast<size_class&>(classes_[ci]);
        std::lock_guard<std::mutex> g(sc.m);
        return std::uint64_t(sc.live);
    }

private:
    struct size_class {
        std::mutex m;
        std::vector<void*> free_chunks;
        std::int64_t live = 0;
#ifndef NDEBUG
        std::unordered_set<void*> owned;
#endif
    };

    std::size_t alignment_;
    std::array<size_class, num_classes> classes_;
    std::atomic<std::uint64_t> system_allocs_{0};
    std::atomic<std::uint64_t> system_bytes_{0};
    std::atomic<std::uint64_t> acquires_{0};
    std::atomic<std::uint64_t> releases_{0};
};

// Global pool for volume payloads, aligned for vector instructions.
inline chunk_pool& volume_pool() {
    static chunk_pool pool(64);
    return pool;
}

// Global pool for small helper objects (task payloads, control blocks).
inline chunk_pool& small_object_pool() {
    static chunk_pool pool;
    return pool;
}

// Standard allocator adapter over a chunk_pool, usable with allocate_shared
// and containers whose steady-state allocations must be recycled.
template <typename T>
class pool_allocator {
public:
    using value_type = T;

    pool_allocator() : pool_(&small_object_pool()) {}
    explicit pool_allocator(chunk_pool& pool) : pool_(&pool) {}
    template <typename U>
    pool_allocator(const pool_allocator<U>& o) : pool_(o.pool()) {}

    T* allocate(std::size_t n) { return static_cast<T*>(pool_->acquire(n * sizeof(T))); }
    void deallocate(T* p, std::size_t n) { pool_->release(p, n * sizeof(T)); }

    chunk_pool* pool() const { return pool_; }

    template <typename U>
    bool operator==(const pool_allocator<U>& o) const { return pool_ == o.pool(); }

private:
    chunk_pool* pool_;
};

} // namespace znn
