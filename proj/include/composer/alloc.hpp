#pragma once

#include <atomic>
#include <cstdint>
#include <memory>
#include <vector>

namespace composer {

// Process-wide accounting of live tensor storage. The peak (high-water mark)
// is what the overhead benchmark reports; reset_peak() snaps it back to the
// currently resident bytes so a measurement phase starts from the shared
// baseline.
class AllocStats {
public:
    static std::int64_t current_bytes() { return current().load(std::memory_order_relaxed); }
    static std::int64_t peak_bytes() { return peak().load(std::memory_order_relaxed); }

    static void reset_peak() {
        peak().store(current().load(std::memory_order_relaxed), std::memory_order_relaxed);
    }

    static void add(std::int64_t bytes) {
        const std::int64_t now = current().fetch_add(bytes, std::memory_order_relaxed) + bytes;
        std::int64_t old = peak().load(std::memory_order_relaxed);
        while (now > old && !peak().compare_exchange_weak(old, now, std::memory_order_relaxed)) {
        }
    }

    static void sub(std::int64_t bytes) { current().fetch_sub(bytes, std::memory_order_relaxed); }

private:
    static std::atomic<std::int64_t>& current() {
        static std::atomic<std::int64_t> c{0};
        return c;
    }
    static std::atomic<std::int64_t>& peak() {
        static std::atomic<std::int64_t> p{0};
        return p;
    }
};

// Flat value storage registered with AllocStats for its whole lifetime.
template <typename T>
class Block {
public:
    explicit Block(std::size_t n) : values_(n) {
        AllocStats::add(static_cast<std::int64_t>(n * sizeof(T)));
    }
    Block(const Block&) = delete;
    Block& operator=(const Block&) = delete;
    ~Block() { AllocStats::sub(static_cast<std::int64_t>(values_.size() * sizeof(T))); }

    T* data() { return values_.data(); }
    const T* data() const { return values_.data(); }
    std::size_t size() const { return values_.size(); }

private:
    std::vector<T> values_;
};

template <typename T>
std::shared_ptr<Block<T>> make_block(std::size_t n) {
    return std::make_shared<Block<T>>(n);
}

}  // namespace composer
