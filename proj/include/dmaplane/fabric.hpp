#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <set>
#include <shared_mutex>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "dmaplane/lock_order.hpp"
#include "dmaplane/observability.hpp"
#include "dmaplane/registry.hpp"

namespace dmaplane::fabric {

using QpId = std::uint32_t;
using CqId = std::uint32_t;
using MrId = std::uint32_t;

enum class QpState { reset, init, rtr, rts, error };
enum class WcOpcode { send, recv, write, write_imm_send, write_imm_recv };
enum class WcStatus { ok, flushed, remote_protection, retry_exceeded, receiver_not_ready, length_error };

std::string_view to_string(QpState state) noexcept;
std::string_view to_string(WcOpcode opcode) noexcept;
std::string_view to_string(WcStatus status) noexcept;

/// True for exactly RESET->INIT, INIT->RTR, RTR->RTS and anything->ERROR.
bool is_legal_transition(QpState from, QpState to) noexcept;

struct WorkCompletion {
    std::uint64_t wr_seq = 0;
    QpId qp = 0;
    WcOpcode opcode = WcOpcode::send;
    WcStatus status = WcStatus::ok;
    std::optional<std::uint32_t> imm;
    std::uint32_t byte_len = 0;
};

/// Scatter/gather element: an address range inside a registered MR.
struct Sge {
    std::uint64_t addr = 0;
    std::uint32_t length = 0;
    std::uint32_t lkey = 0;
};

struct MemoryRegion {
    MrId id = 0;
    std::uint64_t base = 0;
    std::uint64_t length = 0;
    std::uint32_t lkey = 0;
    std::optional<std::uint32_t> rkey;
    BufferId buffer = 0;

    Sge sge(std::uint64_t offset, std::uint32_t len) const { return Sge{base + offset, len, lkey}; }
    std::byte* data() const { return reinterpret_cast<std::byte*>(static_cast<std::uintptr_t>(base)); }
};

/// What a peer learns about a remote landing region.
struct RemoteMr {
    std::uint64_t base = 0;
    std::uint64_t length = 0;
    std::uint32_t rkey = 0;
};

enum class TransportKind { loopback, socket_pair, stream };

struct LinkConfig {
    TransportKind kind = TransportKind::loopback;
    /// stream: peer to connect to.
    std::string host = "127.0.0.1";
    std::uint16_t port = 0;
    /// stream/socket_pair: an already-connected socket to adopt.
    int fd = -1;
};

struct FabricOptions {
    std::uint32_t key_seed = 0x5eed;
    std::size_t send_cq_depth = 256;
    std::size_t recv_cq_depth = 256;
    /// Receiver-not-ready retries before the error surfaces. 0 = strict.
    unsigned retry_count = 0;
    std::chrono::microseconds retry_interval{100};
    /// Loopback only: completions become visible this long after the post.
    std::chrono::microseconds loopback_latency{0};
    LockOrderValidator* validator = nullptr;
    obs::Observability* observability = nullptr;
};

struct CqStats {
    std::size_t depth = 0;
    std::size_t queued = 0;
    std::uint64_t delivered = 0;
    std::uint64_t overflow_count = 0;
};

struct FabricStats {
    std::uint64_t posts = 0;
    std::uint64_t send_completions = 0;
    std::uint64_t recv_completions = 0;
    std::uint64_t flushed = 0;
    std::uint64_t receiver_not_ready = 0;
    std::uint64_t remote_protection = 0;
    std::uint64_t retry_exceeded = 0;
    std::uint64_t cq_overflows = 0;
    std::uint64_t late_deliveries = 0;
    std::uint64_t bytes_written = 0;
};

enum class ResourceKind { pd, cq, qp, mr };

struct ResourceEvent {
    bool created = true;
    ResourceKind kind = ResourceKind::pd;
    std::uint32_t id = 0;
    /// CQs a QP depends on.
    std::vector<std::uint32_t> depends_on;
};

/// Listening socket for the stream transport.
class Listener {
public:
    explicit Listener(std::uint16_t port, const std::string& host = "0.0.0.0");
    ~Listener();
    Listener(const Listener&) = delete;
    Listener& operator=(const Listener&) = delete;

    std::uint16_t port() const noexcept { return port_; }
    /// Returns a connected fd, or throws unreachable on timeout.
    int accept(std::chrono::milliseconds timeout);

private:
    int fd_ = -1;
    std::uint16_t port_ = 0;
};

/// A simulated verbs context: one PD, CQs, QPs and MRs, plus the link to a
/// peer. Posts and polls run under shared access; teardown is exclusive.
class Fabric {
public:
    /// Allocates PD, the default send CQ and the default recv CQ. Stream
    /// links connect (or adopt `link.fd`) and fail with unreachable.
    Fabric(BufferRegistry& registry, const LinkConfig& link, FabricOptions options = {});
    ~Fabric();

    Fabric(const Fabric&) = delete;
    Fabric& operator=(const Fabric&) = delete;

    /// Two contexts connected through an in-process socket pair.
    static std::pair<std::unique_ptr<Fabric>, std::unique_ptr<Fabric>> make_pair(BufferRegistry& a,
                                                                                  BufferRegistry& b,
                                                                                  FabricOptions options = {});

    TransportKind transport() const noexcept { return link_.kind; }
    CqId default_send_cq() const noexcept { return send_cq_; }
    CqId default_recv_cq() const noexcept { return recv_cq_; }

    CqId create_cq(std::size_t depth);
    QpId create_qp(CqId send_cq, CqId recv_cq);
    /// `dest_qp` names the loopback peer and is required on the loopback
    /// RESET/INIT->RTR step; other transports bind the QP to the link.
    void modify_qp(QpId qp, QpState target, std::optional<QpId> dest_qp = std::nullopt);
    QpState qp_state(QpId qp) const;
    std::size_t posted_recvs(QpId qp) const;
    std::size_t pending_sends(QpId qp) const;

    MemoryRegion register_mr(BufferId buffer, bool remote_access);
    void deregister_mr(MrId mr);

    std::uint64_t post_send(QpId qp, std::span<const Sge> sges);
    std::uint64_t post_recv(QpId qp, std::span<const Sge> sges);
    std::uint64_t rdma_write(QpId qp, const Sge& local, std::uint64_t remote_addr, std::uint32_t rkey);
    std::uint64_t rdma_write_imm(QpId qp, const Sge& local, std::uint64_t remote_addr, std::uint32_t rkey,
                                 std::uint32_t imm);

    /// Dequeues up to `max` completions in arrival order. Never blocks.
    std::vector<WorkCompletion> poll_cq(CqId cq, std::size_t max);
    std::size_t poll_cq(CqId cq, std::span<WorkCompletion> out);
    CqStats cq_stats(CqId cq) const;

    void destroy_qp(QpId qp);
    void destroy_cq(CqId cq);
    /// Fails with child-alive while any CQ, QP or MR exists.
    void destroy_pd();

    /// Quiesces the link, moves every QP to ERROR (flushing pending work),
    /// then destroys QPs, CQs, MRs and the PD in that order. Idempotent.
    void teardown();
    bool torn_down() const noexcept { return torn_down_.load(std::memory_order_acquire); }

    // -- control plane ---------------------------------------------------------

    /// Tells the peer about a landing region (ctrl frame on stream links).
    void advertise_mr(const MemoryRegion& mr);
    std::optional<RemoteMr> wait_remote_mr(std::chrono::milliseconds timeout);
    /// Receiver side: grants `n` receive-window credits to the peer of `qp`.
    void return_credits(QpId qp, std::uint32_t n);
    /// Sender side: credits granted by the peer since the last call.
    std::uint32_t take_returned_credits(QpId qp);

    // -- instrumentation --------------------------------------------------------

    FabricStats stats() const;
    std::vector<ResourceEvent> resource_log() const;

    /// Loopback test hook: while held, posted work stays pending on the QP.
    void hold_delivery(bool hold);

private:
    struct RecvSlot {
        std::uint64_t wr_seq = 0;
        std::vector<Sge> sges;
    };

    struct PendingWr {
        std::uint64_t wr_seq = 0;
        WcOpcode opcode = WcOpcode::send;
        Sge local;
        std::vector<Sge> sges;
        std::uint64_t remote_addr = 0;
        std::uint32_t rkey = 0;
        std::uint32_t imm = 0;
        std::uint32_t byte_len = 0;
        std::chrono::steady_clock::time_point posted_at{};
    };

    struct Cq {
        CqId id = 0;
        std::size_t depth = 0;
        struct Entry {
            WorkCompletion wc;
            std::chrono::steady_clock::time_point visible_at{};
        };
        std::deque<Entry> entries;
        std::uint64_t delivered = 0;
        std::uint64_t overflow = 0;
    };

    struct Qp {
        QpId id = 0;
        QpState state = QpState::reset;
        CqId send_cq = 0;
        CqId recv_cq = 0;
        std::optional<QpId> dest;
        std::deque<RecvSlot> recvs;
        std::deque<PendingWr> pending;
        std::uint32_t returned_credits = 0;
        bool processing = false;
    };

    struct Mr {
        MemoryRegion region;
        MapToken token;
    };

    enum class DataOp { send, write, write_imm };

    struct Incoming {
        DataOp op = DataOp::write;
        std::uint64_t remote_addr = 0;
        std::uint32_t rkey = 0;
        std::uint32_t imm = 0;
        std::span<const std::byte> payload;
    };

    std::uint64_t post_data(QpId qp, WcOpcode opcode, std::span<const Sge> sges, std::uint64_t remote_addr,
                            std::uint32_t rkey, std::uint32_t imm);
    void check_usable() const;
    Qp& qp_locked(QpId qp);
    const Qp& qp_locked(QpId qp) const;
    Cq& cq_locked(CqId cq);
    const Cq& cq_locked(CqId cq) const;
    std::uint32_t fresh_key_locked();

    std::uint64_t gather_length(std::span<const Sge> sges) const;
    void check_local(std::span<const Sge> sges) const;
    std::vector<std::byte> gather(std::span<const Sge> sges) const;

    void push_completion_locked(Qp& qp, bool send_side, WorkCompletion wc,
                                std::chrono::steady_clock::time_point posted_at);
    void to_error_locked(Qp& qp);
    void drain_loopback(QpId qp);
    WcStatus execute_loopback(Qp& sender, PendingWr& wr, std::unique_lock<std::mutex>& lock);
    /// Target-side handling shared by loopback and the stream progress thread.
    WcStatus accept_incoming(QpId target, const Incoming& in, std::unique_lock<std::mutex>& lock);

    void start_progress();
    void progress_loop();
    void send_frame(std::uint8_t opcode, std::uint8_t flags, std::uint64_t remote_addr, std::uint32_t rkey,
                    std::uint32_t imm, std::span<const std::byte> payload);
    void stop_link();

    BufferRegistry& registry_;
    LinkConfig link_;
    FabricOptions options_;

    mutable std::shared_mutex rw_;        // fabric level: posts shared, teardown exclusive
    mutable std::shared_mutex mr_mutex_;  // region level
    mutable std::mutex state_mutex_;      // QP and CQ internals, leaf
    std::mutex out_mutex_;                // outbound frame queue, leaf
    std::condition_variable out_cv_;
    std::deque<std::vector<std::byte>> outbound_;
    bool out_closing_ = false;

    std::map<CqId, Cq> cqs_;
    std::map<QpId, Qp> qps_;
    std::map<MrId, Mr> mrs_;
    std::set<std::uint32_t> issued_keys_;
    std::mt19937 key_rng_;
    std::uint32_t next_object_id_ = 1;
    std::uint64_t next_wr_seq_ = 1;
    bool pd_alive_ = false;
    std::uint32_t pd_id_ = 0;
    CqId send_cq_ = 0;
    CqId recv_cq_ = 0;
    bool hold_ = false;
    std::optional<QpId> bound_qp_;

    std::deque<RemoteMr> remote_mrs_;
    std::condition_variable remote_mr_cv_;

    std::vector<ResourceEvent> resource_log_;
    FabricStats stats_;

    std::atomic<bool> torn_down_{false};
    std::atomic<bool> teardown_complete_{false};
    std::mutex teardown_mutex_;

    int fd_ = -1;
    std::thread progress_;
    std::thread writer_;
    std::atomic<bool> stopping_{false};

    obs::Counter* posts_counter_ = nullptr;
    obs::Counter* completions_counter_ = nullptr;
    obs::Counter* overflow_counter_ = nullptr;
    obs::Counter* rnr_counter_ = nullptr;
    obs::Counter* protection_counter_ = nullptr;
    obs::Counter* flushed_counter_ = nullptr;
    obs::LatencyHistogram* latency_ = nullptr;
};

} // namespace dmaplane::fabric
