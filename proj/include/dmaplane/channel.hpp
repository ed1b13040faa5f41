#pragma once

#include <chrono>
#include <condition_variable>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <thread>
#include <variant>
#include <vector>

#include "dmaplane/error.hpp"
#include "dmaplane/observability.hpp"
#include "dmaplane/registry.hpp"
#include "dmaplane/ring.hpp"

namespace dmaplane {

using ChannelId = std::uint64_t;

enum class Opcode { noop, copy, fabric_post, sleep_test };

struct NoopOp {};

/// Copies between two registry buffers; the worker maps both for the
/// duration of the copy.
struct CopyOp {
    BufferId src = 0;
    BufferId dst = 0;
    std::size_t src_offset = 0;
    std::size_t dst_offset = 0;
    std::size_t length = 0;
};

/// Runs a fabric post on the worker. An Error thrown by the action becomes
/// the completion's error status.
struct FabricPostOp {
    std::function<std::uint64_t()> action;
};

struct SleepTestOp {
    std::chrono::microseconds duration{0};
};

using Operation = std::variant<NoopOp, CopyOp, FabricPostOp, SleepTestOp>;

enum class CompletionStatus { ok, flushed, error };

struct SubmissionEntry {
    std::uint64_t seq = 0;
    Operation op;
    std::chrono::steady_clock::time_point submitted_at{};
};

struct CompletionEntry {
    std::uint64_t seq = 0;
    Opcode opcode = Opcode::noop;
    CompletionStatus status = CompletionStatus::ok;
    std::optional<ErrorCode> error;
    std::chrono::nanoseconds latency{0};
    /// Bytes copied for copy, the action's return value for fabric_post.
    std::uint64_t metadata = 0;
};

struct ChannelStats {
    std::uint64_t submitted = 0;
    std::uint64_t consumed = 0;
    std::uint64_t completed = 0;
    std::uint64_t flushed = 0;
    std::uint64_t worker_parks = 0;
    std::size_t max_submission_occupancy = 0;
    std::size_t max_completion_occupancy = 0;
    bool live = false;
};

struct ChannelEngineConfig {
    BufferRegistry* registry = nullptr;
    obs::Observability* observability = nullptr;
};

Opcode opcode_of(const Operation& op) noexcept;

/// Channels: a submission ring, a completion ring, and one worker thread that
/// is the sole consumer of the former and sole producer of the latter.
class ChannelEngine {
public:
    explicit ChannelEngine(ChannelEngineConfig config = {});
    ~ChannelEngine();

    ChannelEngine(const ChannelEngine&) = delete;
    ChannelEngine& operator=(const ChannelEngine&) = delete;

    ChannelId create_channel(std::size_t submission_capacity, std::size_t completion_capacity);

    /// Throws would-block when the submission ring is full.
    std::uint64_t submit(ChannelId channel, Operation op);
    std::optional<std::uint64_t> try_submit(ChannelId channel, Operation op);

    /// Never blocks. Still usable after shutdown to drain the final entries.
    std::vector<CompletionEntry> poll_completions(ChannelId channel, std::size_t max);

    /// Flushes whatever is still queued, then joins the worker. Idempotent.
    void shutdown_channel(ChannelId channel);
    void shutdown_all();

    ChannelStats stats(ChannelId channel) const;

    /// Test hooks: a paused worker stops consuming submissions.
    void pause_worker(ChannelId channel);
    void resume_worker(ChannelId channel);

private:
    class Channel;

    std::shared_ptr<Channel> find(ChannelId channel) const;

    ChannelEngineConfig config_;
    mutable std::mutex mutex_;
    std::map<ChannelId, std::shared_ptr<Channel>> channels_;
    ChannelId next_id_ = 1;
};

} // namespace dmaplane
