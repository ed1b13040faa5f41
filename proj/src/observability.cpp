#include "dmaplane/observability.hpp"

#include <algorithm>
#include <bit>

#include "dmaplane/error.hpp"

namespace dmaplane::obs {

std::string_view to_string(Section section) noexcept {
    switch (section) {
    case Section::stats: return "stats";
    case Section::buffers: return "buffers";
    case Section::rdma: return "rdma";
    case Section::flow: return "flow";
    case Section::histogram: return "histogram";
    }
    return "unknown";
}

std::string_view to_string(EventKind kind) noexcept {
    switch (kind) {
    case EventKind::rdma_post: return "rdma_post";
    case EventKind::rdma_completion: return "rdma_completion";
    case EventKind::flow_stall: return "flow_stall";
    case EventKind::buffer_create: return "buffer_create";
    case EventKind::buffer_destroy: return "buffer_destroy";
    case EventKind::teardown: return "teardown";
    }
    return "unknown";
}

std::string_view to_string(TeardownStage stage) noexcept {
    switch (stage) {
    case TeardownStage::observability_detach: return "observability_detach";
    case TeardownStage::fabric: return "fabric";
    case TeardownStage::registry: return "registry";
    case TeardownStage::channel: return "channel";
    }
    return "unknown";
}

// -- LatencyHistogram ---------------------------------------------------------

int LatencyHistogram::bucket_index(std::uint64_t micros) noexcept {
    if (micros == 0) return -1;
    const int b = std::bit_width(micros) - 1;
    return std::min(b, static_cast<int>(bucket_count) - 1);
}

void LatencyHistogram::record(std::chrono::nanoseconds latency) noexcept {
    const auto ns = latency.count();
    record_micros(ns <= 0 ? 0 : static_cast<std::uint64_t>(ns) / 1000);
}

void LatencyHistogram::record_micros(std::uint64_t micros) noexcept {
    const int b = bucket_index(micros);
    if (b < 0) {
        underflow_.fetch_add(1, std::memory_order_relaxed);
    } else {
        buckets_[static_cast<std::size_t>(b)].fetch_add(1, std::memory_order_relaxed);
    }
}

std::array<std::uint64_t, LatencyHistogram::bucket_count> LatencyHistogram::buckets() const noexcept {
    std::array<std::uint64_t, bucket_count> out{};
    for (std::size_t i = 0; i < bucket_count; ++i) out[i] = buckets_[i].load(std::memory_order_relaxed);
    return out;
}

std::uint64_t LatencyHistogram::total() const noexcept {
    std::uint64_t sum = underflow();
    for (const auto& b : buckets_) sum += b.load(std::memory_order_relaxed);
    return sum;
}

// -- StatsRegistry ------------------------------------------------------------

Counter& StatsRegistry::counter(Section section, const std::string& name) {
    std::lock_guard lock(mutex_);
    auto& slot = counters_[name];
    if (!slot.second) slot = {section, std::make_unique<Counter>()};
    return *slot.second;
}

Gauge& StatsRegistry::gauge(Section section, const std::string& name) {
    std::lock_guard lock(mutex_);
    auto& slot = gauges_[name];
    if (!slot.second) slot = {section, std::make_unique<Gauge>()};
    return *slot.second;
}

LatencyHistogram& StatsRegistry::histogram(const std::string& name) {
    std::lock_guard lock(mutex_);
    auto& slot = histograms_[name];
    if (!slot) slot = std::make_unique<LatencyHistogram>();
    return *slot;
}

void StatsRegistry::check_attached() const {
    if (detached()) raise(ErrorCode::stale_view, "stats registry is detached");
}

std::string StatsRegistry::render(Section section) const {
    check_attached();
    std::lock_guard lock(mutex_);
    std::string out = "dmaplane-stats v1\n";

    if (section == Section::histogram) {
        for (const auto& [name, hist] : histograms_) {
            out += "histogram " + name + " total: " + std::to_string(hist->total()) + "\n";
            if (auto under = hist->underflow(); under != 0) {
                out += "[0,1) " + std::to_string(under) + "\n";
            }
            const auto buckets = hist->buckets();
            for (std::size_t b = 0; b < buckets.size(); ++b) {
                if (buckets[b] == 0) continue;
                out += "[" + std::to_string(std::uint64_t{1} << b) + "," +
                       std::to_string(std::uint64_t{1} << (b + 1)) + ") " + std::to_string(buckets[b]) + "\n";
            }
        }
        return out;
    }

    // Counters and gauges share one sorted namespace per section.
    std::map<std::string, std::string> lines;
    for (const auto& [name, slot] : counters_) {
        if (slot.first == section) lines[name] = std::to_string(slot.second->value());
    }
    for (const auto& [name, slot] : gauges_) {
        if (slot.first == section) lines[name] = std::to_string(slot.second->value());
    }
    for (const auto& [name, value] : lines) out += name + ": " + value + "\n";
    return out;
}

StatsSnapshot StatsRegistry::snapshot() const {
    check_attached();
    std::lock_guard lock(mutex_);
    StatsSnapshot snap;
    for (const auto& [name, slot] : counters_) snap.counters[name] = slot.second->value();
    for (const auto& [name, slot] : gauges_) snap.gauges[name] = slot.second->value();
    return snap;
}

// -- EventBus -----------------------------------------------------------------

EventBus::SubscriptionId EventBus::subscribe(KindMask kinds, Callback callback) {
    std::unique_lock lock(mutex_);
    const auto id = next_id_++;
    subscribers_.push_back({id, kinds, std::move(callback)});
    recompute_mask();
    return id;
}

void EventBus::unsubscribe(SubscriptionId id) {
    std::unique_lock lock(mutex_);
    std::erase_if(subscribers_, [id](const Subscriber& s) { return s.id == id; });
    recompute_mask();
}

void EventBus::recompute_mask() {
    KindMask mask = 0;
    for (const auto& s : subscribers_) mask |= s.kinds;
    active_mask_.store(mask, std::memory_order_relaxed);
}

void EventBus::dispatch(const Event& event) {
    std::shared_lock lock(mutex_);
    const auto bit = mask_of(event.kind);
    for (const auto& s : subscribers_) {
        if (s.kinds & bit) s.callback(event);
    }
}

// -- Observability ------------------------------------------------------------

EventBus::SubscriptionId Observability::subscribe(KindMask kinds, EventBus::Callback callback) {
    if (stats_.detached()) raise(ErrorCode::stale_view, "subscribe after detach");
    return events_.subscribe(kinds, std::move(callback));
}

void Observability::detach_registry() {
    if (detach_emitted_.exchange(true)) return;
    stats_.detach();
    Event event{EventKind::teardown, std::chrono::steady_clock::now(), 0, 0, TeardownStage::observability_detach};
    events_.emit(event);
}

// -- EventLog -----------------------------------------------------------------

void EventLog::attach(Observability& obs, KindMask kinds) {
    obs.subscribe(kinds, [this](const Event& e) {
        std::lock_guard lock(mutex_);
        events_.push_back(e);
    });
}

void EventLog::attach(EventBus& bus, KindMask kinds) {
    bus.subscribe(kinds, [this](const Event& e) {
        std::lock_guard lock(mutex_);
        events_.push_back(e);
    });
}

std::vector<Event> EventLog::events() const {
    std::lock_guard lock(mutex_);
    return events_;
}

std::size_t EventLog::count(EventKind kind) const {
    std::lock_guard lock(mutex_);
    return static_cast<std::size_t>(
        std::count_if(events_.begin(), events_.end(), [kind](const Event& e) { return e.kind == kind; }));
}

} // namespace dmaplane::obs
