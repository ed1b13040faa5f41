#pragma once

#include <chrono>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dmaplane/error.hpp"
#include "dmaplane/fabric.hpp"
#include "dmaplane/kv_pipeline.hpp"
#include "dmaplane/observability.hpp"
#include "dmaplane/registry.hpp"

namespace dmaplane::workloads {

/// Credit-bounded write_imm stream between two loopback QPs.
struct StreamConfig {
    double seconds = 10.0;
    /// Stop after this many posts; 0 means run for `seconds`.
    std::uint64_t max_ops = 0;
    std::uint32_t max_credits = 64;
    /// 0 picks the defaults from CreditConfig::with_default_watermarks.
    std::uint32_t high_watermark = 0;
    std::uint32_t low_watermark = 0;
    /// Receive window; 0 means max_credits.
    std::uint32_t window = 0;
    /// 0 means max(1, window / 2).
    std::uint32_t refill_batch = 0;
    std::size_t message_size = 64 * 1024;
    std::size_t cq_depth = 256;
    std::chrono::microseconds latency{20};
    /// Poll once after every post instead of only when out of credits.
    bool opportunistic_poll = true;
    /// Off: post without taking credits at all. Only useful to show what the
    /// gauges prevent.
    bool flow_control = true;
    std::uint64_t seed = 1;
};

struct StreamReport {
    /// Config with the automatic fields (watermarks, window, refill) resolved.
    StreamConfig config;
    std::uint64_t posted = 0;
    std::uint64_t completed = 0;
    std::uint64_t bytes = 0;
    std::chrono::nanoseconds elapsed{};
    double mbps = 0;
    /// MB/s per whole second of the run.
    std::vector<double> windows;
    std::uint64_t overflow_count = 0;
    std::uint64_t receiver_not_ready = 0;
    std::uint64_t error_completions = 0;
    std::uint64_t stalls = 0;
    std::uint64_t window_stalls = 0;
    std::uint32_t max_in_flight_seen = 0;
    /// Highest send in_flight sampled after each post, and how many samples
    /// exceeded max_credits.
    std::uint32_t max_sampled_in_flight = 0;
    std::uint64_t in_flight_violations = 0;
    std::uint32_t final_in_flight = 0;
    double mean_latency_us = 0;
    std::uint32_t min_posted_at_arrival = 0;
    /// Every stats section, rendered just before shutdown when `obs` is set.
    std::vector<std::pair<obs::Section, std::string>> stats_text;
};

/// Builds its own registry and fabric. When `obs` is given, counters land
/// there and the composed shutdown detaches it.
StreamReport run_stream(const StreamConfig& config, obs::Observability* obs = nullptr);

struct QdSweepConfig {
    std::vector<std::uint32_t> depths{1, 2, 4, 8, 16};
    std::size_t message_size = 4096;
    std::uint64_t ops_per_depth = 400;
    std::chrono::microseconds latency{200};
    std::size_t cq_depth = 256;
};

struct QdRow {
    std::uint32_t depth = 0;
    double mbps = 0;
    double mean_latency_us = 0;
    std::uint64_t ops = 0;
};

/// One row per depth. Depth 0 or above cq_depth is invalid-argument.
std::vector<QdRow> run_qd_sweep(const QdSweepConfig& config);

/// A random credit/poll interleaving on loopback, fully determined by seed.
struct ScheduleResult {
    std::uint64_t seed = 0;
    std::size_t cq_depth = 0;
    std::size_t recv_cq_depth = 0;
    std::uint32_t max_credits = 0;
    std::uint32_t window = 0;
    std::uint32_t refill_batch = 0;
    std::uint64_t ops = 0;
    std::uint64_t completed = 0;
    std::uint64_t overflow_count = 0;
    std::uint64_t receiver_not_ready = 0;
    /// Checks of in_flight <= max_credits <= cq_depth that failed.
    std::uint64_t invariant_violations = 0;
    std::uint32_t final_in_flight = 0;
    std::uint32_t max_in_flight_seen = 0;
    std::uint64_t stalls = 0;
};

ScheduleResult run_random_schedule(std::uint64_t seed, std::uint64_t max_ops = 10'000);

struct KvRunConfig {
    std::uint32_t layers = 4;
    std::uint32_t chunks_per_layer = 4;
    std::uint32_t chunk_size = 64 * 1024;
    std::uint64_t seed = 1;
    std::uint32_t max_credits = 16;
    std::uint32_t window = 16;
    std::uint32_t refill_batch = 0;
    bool socket_pair = false;
    kv::SendOptions send;
};

struct KvRunResult {
    bool bytes_match = false;
    std::optional<ErrorCode> sender_error;
    std::optional<ErrorCode> receiver_error;
    std::string error_message;
    std::vector<kv::ChunkTag> error_tags;
    kv::TransferStats send;
    std::uint64_t receive_completions = 0;
    std::uint64_t slots_consumed = 0;
    std::uint32_t min_posted_at_arrival = 0;
    std::vector<kv::LayerView> views;
    std::vector<kv::StageTiming> stages;
    std::uint64_t overflow_count = 0;
    std::uint64_t receiver_not_ready = 0;
    /// Layer views over the landing zone concatenate to the original layers.
    bool views_match = false;
};

/// Full transfer in one process: synthetic fill, consolidate, send on this
/// thread, receive on another.
KvRunResult run_kv_transfer(const KvRunConfig& config);

/// Observability detach, then fabric teardown, then registry shutdown. Any
/// pointer may be null.
void composed_shutdown(obs::Observability* obs, fabric::Fabric* fabric, BufferRegistry* registry);

struct CheckResult {
    std::string name;
    bool passed = false;
    std::string detail;
};

/// Quick cross-module invariant suite.
std::vector<CheckResult> run_selftest(std::uint64_t seed);

} // namespace dmaplane::workloads
