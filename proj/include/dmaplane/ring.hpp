#pragma once

#include <bit>
#include <cassert>
#include <cstddef>
#include <cstdint>
#include <utility>
#include <vector>

#include "dmaplane/error.hpp"

namespace dmaplane {

/// Fixed-size circular buffer with free-running head/tail counters. The
/// capacity is a power of two so the slot index is a mask; occupancy is
/// tail - head, which keeps full and empty distinct. Not synchronized.
template <class T>
class Ring {
public:
    explicit Ring(std::size_t capacity) : entries_(capacity), mask_(capacity - 1) {
        if (capacity < 2 || !std::has_single_bit(capacity)) {
            raise(ErrorCode::invalid_argument, "ring capacity must be a power of two >= 2");
        }
    }

    std::size_t capacity() const noexcept { return entries_.size(); }
    std::size_t size() const noexcept { return static_cast<std::size_t>(tail_ - head_); }
    bool empty() const noexcept { return tail_ == head_; }
    bool full() const noexcept { return size() == capacity(); }
    std::uint64_t head() const noexcept { return head_; }
    std::uint64_t tail() const noexcept { return tail_; }

    bool try_push(T value) {
        if (full()) return false;
        entries_[tail_ & mask_] = std::move(value);
        ++tail_;
        assert(size() <= capacity());
        return true;
    }

    bool try_pop(T& out) {
        if (empty()) return false;
        out = std::move(entries_[head_ & mask_]);
        ++head_;
        assert(size() <= capacity());
        return true;
    }

private:
    std::vector<T> entries_;
    std::uint64_t mask_;
    std::uint64_t head_ = 0;
    std::uint64_t tail_ = 0;
};

} // namespace dmaplane
