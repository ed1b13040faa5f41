#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <string>

#include "dmaplane/fabric.hpp"
#include "dmaplane/observability.hpp"

namespace dmaplane::flow {

struct CreditConfig {
    std::uint32_t max_credits = 64;
    std::uint32_t high_watermark = 48;
    std::uint32_t low_watermark = 16;

    /// low = max/4 and high = 3*max/4, both at least 1. For max=4 that is
    /// high=3, low=1.
    static CreditConfig with_default_watermarks(std::uint32_t max_credits);
};

/// Credit accounting for one sender pipeline. A credit is taken before each
/// post and given back when the matching completion is polled.
///
/// When fewer than `low_watermark` credits remain, acquire() keeps polling
/// until at least `high_watermark` are available. Each poll iteration spent
/// waiting counts as one stall.
class CreditGauge {
public:
    /// `bound_depth` is the depth of the CQ (or receive window) the credits
    /// stand for; max_credits above it is rejected. A gauge that starts
    /// exhausted has every credit in flight until release() grants some.
    CreditGauge(CreditConfig config, std::size_t bound_depth, obs::Observability* obs = nullptr,
                std::string name = "send", bool start_exhausted = false);

    CreditGauge(const CreditGauge&) = delete;
    CreditGauge& operator=(const CreditGauge&) = delete;

    /// Blocks by calling `poll` until a credit is free, then takes it.
    /// Throws aborted once `abort` becomes true.
    void acquire(const std::function<void()>& poll, const std::atomic<bool>* abort = nullptr);
    /// Takes a credit only if one is free; never stalls.
    bool try_acquire() noexcept;
    /// Returns `n` credits. More than in_flight raises accounting-corruption
    /// and leaves the gauge unchanged.
    void release(std::uint32_t n);

    const CreditConfig& config() const noexcept { return config_; }
    std::uint32_t max_credits() const noexcept { return config_.max_credits; }
    std::uint32_t in_flight() const noexcept { return in_flight_.load(std::memory_order_acquire); }
    std::uint32_t available() const noexcept { return config_.max_credits - in_flight(); }
    std::uint64_t stall_count() const noexcept { return stalls_.load(std::memory_order_relaxed); }
    std::uint32_t max_in_flight_seen() const noexcept { return max_seen_.load(std::memory_order_relaxed); }
    std::uint64_t acquired_total() const noexcept { return acquired_.load(std::memory_order_relaxed); }

private:
    void take() noexcept;
    void publish() noexcept;

    CreditConfig config_;
    std::string name_;
    obs::Observability* obs_;
    std::atomic<std::uint32_t> in_flight_{0};
    std::atomic<std::uint32_t> max_seen_{0};
    std::atomic<std::uint64_t> stalls_{0};
    std::atomic<std::uint64_t> acquired_{0};

    obs::Counter* stall_counter_ = nullptr;
    obs::Gauge* in_flight_gauge_ = nullptr;
    obs::Gauge* max_seen_gauge_ = nullptr;
};

/// Receiver side of the window: pre-posted receive slots for write_imm
/// notifications, reposted in batches and granted back to the sender as
/// credits.
class ReceiveWindow {
public:
    ReceiveWindow(fabric::Fabric& fabric, fabric::QpId qp, std::uint32_t refill_batch);

    /// Posts `n` slots and grants `n` credits to the peer.
    void post(std::uint32_t n);
    /// Accounts for one consumed slot; once `refill_batch` are owed they are
    /// reposted and granted in one go. Repost failure throws aborted.
    void on_receive_completion();

    std::uint32_t posted() const noexcept { return posted_; }
    std::uint32_t refill_batch() const noexcept { return refill_batch_; }
    std::uint64_t consumed() const noexcept { return consumed_; }
    std::uint64_t reposted() const noexcept { return reposted_; }
    /// Lowest `posted` value seen just before a slot was consumed. Zero here
    /// means a notification arrived with no slot available.
    std::uint32_t min_posted_at_arrival() const noexcept { return min_posted_at_arrival_; }

private:
    void post_slots(std::uint32_t n);

    fabric::Fabric& fabric_;
    fabric::QpId qp_;
    std::uint32_t refill_batch_;
    std::uint32_t posted_ = 0;
    std::uint32_t owed_ = 0;
    std::uint64_t consumed_ = 0;
    std::uint64_t reposted_ = 0;
    std::uint32_t min_posted_at_arrival_ = UINT32_MAX;
};

} // namespace dmaplane::flow
