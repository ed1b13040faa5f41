#pragma once

#include <array>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <shared_mutex>
#include <string>
#include <string_view>
#include <vector>

namespace dmaplane::obs {

enum class Section { stats, buffers, rdma, flow, histogram };

std::string_view to_string(Section section) noexcept;

class Counter {
public:
    void add(std::uint64_t n = 1) noexcept { value_.fetch_add(n, std::memory_order_relaxed); }
    std::uint64_t value() const noexcept { return value_.load(std::memory_order_relaxed); }

private:
    std::atomic<std::uint64_t> value_{0};
};

class Gauge {
public:
    void set(std::int64_t v) noexcept { value_.store(v, std::memory_order_relaxed); }
    void add(std::int64_t d) noexcept { value_.fetch_add(d, std::memory_order_relaxed); }
    /// Raises the gauge to `v` if it is higher; used for high-water marks.
    void raise_to(std::int64_t v) noexcept {
        auto cur = value_.load(std::memory_order_relaxed);
        while (v > cur && !value_.compare_exchange_weak(cur, v, std::memory_order_relaxed)) {
        }
    }
    std::int64_t value() const noexcept { return value_.load(std::memory_order_relaxed); }

private:
    std::atomic<std::int64_t> value_{0};
};

/// Log2 microsecond histogram. Bucket b holds [2^b, 2^(b+1)) us; a separate
/// underflow bucket holds everything under 1 us. Latencies beyond the last
/// bucket are clamped into it.
class LatencyHistogram {
public:
    static constexpr std::size_t bucket_count = 32;

    /// Index into buckets() for a latency in whole microseconds; -1 is the
    /// underflow bucket.
    static int bucket_index(std::uint64_t micros) noexcept;

    void record(std::chrono::nanoseconds latency) noexcept;
    void record_micros(std::uint64_t micros) noexcept;

    std::uint64_t underflow() const noexcept { return underflow_.load(std::memory_order_relaxed); }
    std::array<std::uint64_t, bucket_count> buckets() const noexcept;
    std::uint64_t total() const noexcept;

private:
    std::atomic<std::uint64_t> underflow_{0};
    std::array<std::atomic<std::uint64_t>, bucket_count> buckets_{};
};

struct StatsSnapshot {
    std::map<std::string, std::uint64_t> counters;
    std::map<std::string, std::int64_t> gauges;
};

/// Named counters, gauges and histograms grouped into render sections.
/// Instruments are stable for the registry's lifetime; after detach() the
/// read side refuses with stale-view.
class StatsRegistry {
public:
    Counter& counter(Section section, const std::string& name);
    Gauge& gauge(Section section, const std::string& name);
    LatencyHistogram& histogram(const std::string& name);

    /// Deterministic text for one section. First line is "dmaplane-stats v1".
    std::string render(Section section) const;
    StatsSnapshot snapshot() const;

    void detach() noexcept { detached_.store(true, std::memory_order_release); }
    bool detached() const noexcept { return detached_.load(std::memory_order_acquire); }

private:
    void check_attached() const;

    mutable std::mutex mutex_;
    std::map<std::string, std::pair<Section, std::unique_ptr<Counter>>> counters_;
    std::map<std::string, std::pair<Section, std::unique_ptr<Gauge>>> gauges_;
    std::map<std::string, std::unique_ptr<LatencyHistogram>> histograms_;
    std::atomic<bool> detached_{false};
};

enum class EventKind : std::uint8_t {
    rdma_post,
    rdma_completion,
    flow_stall,
    buffer_create,
    buffer_destroy,
    teardown,
};

enum class TeardownStage : std::uint8_t { observability_detach, fabric, registry, channel };

std::string_view to_string(EventKind kind) noexcept;
std::string_view to_string(TeardownStage stage) noexcept;

struct Event {
    EventKind kind{};
    std::chrono::steady_clock::time_point timestamp{};
    std::uint64_t id = 0;
    std::uint64_t value = 0;
    TeardownStage stage{};
};

using KindMask = std::uint32_t;

constexpr KindMask mask_of(EventKind kind) noexcept { return KindMask{1} << static_cast<unsigned>(kind); }
constexpr KindMask all_kinds = 0x3F;

/// Structured event hooks. Subscribers run on the emitter's thread and must
/// not block or emit.
class EventBus {
public:
    using Callback = std::function<void(const Event&)>;
    using SubscriptionId = std::uint64_t;

    SubscriptionId subscribe(KindMask kinds, Callback callback);
    void unsubscribe(SubscriptionId id);

    void emit(const Event& event) {
        if ((active_mask_.load(std::memory_order_relaxed) & mask_of(event.kind)) == 0) return;
        dispatch(event);
    }

    void emit(EventKind kind, std::uint64_t id = 0, std::uint64_t value = 0) {
        if ((active_mask_.load(std::memory_order_relaxed) & mask_of(kind)) == 0) return;
        dispatch(Event{kind, std::chrono::steady_clock::now(), id, value, {}});
    }

private:
    void dispatch(const Event& event);
    void recompute_mask();

    struct Subscriber {
        SubscriptionId id;
        KindMask kinds;
        Callback callback;
    };

    std::atomic<KindMask> active_mask_{0};
    mutable std::shared_mutex mutex_;
    std::vector<Subscriber> subscribers_;
    SubscriptionId next_id_ = 1;
};

/// Stats plus event hooks for one composed instance.
class Observability {
public:
    StatsRegistry& stats() noexcept { return stats_; }
    const StatsRegistry& stats() const noexcept { return stats_; }
    EventBus& events() noexcept { return events_; }

    EventBus::SubscriptionId subscribe(KindMask kinds, EventBus::Callback callback);

    /// Stops the read side and emits the observability teardown event.
    /// Idempotent; only the first call emits.
    void detach_registry();
    bool detached() const noexcept { return stats_.detached(); }

    std::string render(Section section) const { return stats_.render(section); }

private:
    StatsRegistry stats_;
    EventBus events_;
    std::atomic<bool> detach_emitted_{false};
};

/// Records every event it sees; handy for ordering assertions.
class EventLog {
public:
    void attach(Observability& obs, KindMask kinds = all_kinds);
    void attach(EventBus& bus, KindMask kinds = all_kinds);
    std::vector<Event> events() const;
    std::size_t count(EventKind kind) const;

private:
    mutable std::mutex mutex_;
    std::vector<Event> events_;
};

} // namespace dmaplane::obs
