#include "dmaplane/fabric.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstring>

#include "dmaplane/error.hpp"
#include "dmaplane/wire.hpp"

namespace dmaplane::fabric {

namespace {

bool write_all(int fd, std::span<const std::byte> data) {
    std::size_t done = 0;
    while (done < data.size()) {
        const auto n = ::send(fd, data.data() + done, data.size() - done, MSG_NOSIGNAL);
        if (n < 0) {
            if (errno == EINTR) continue;
            return false;
        }
        done += static_cast<std::size_t>(n);
    }
    return true;
}

bool read_all(int fd, std::span<std::byte> out) {
    std::size_t done = 0;
    while (done < out.size()) {
        const auto n = ::recv(fd, out.data() + done, out.size() - done, 0);
        if (n < 0 && errno == EINTR) continue;
        if (n <= 0) return false;
        done += static_cast<std::size_t>(n);
    }
    return true;
}

int connect_to(const std::string& host, std::uint16_t port) {
    addrinfo hints{};
    hints.ai_family = AF_UNSPEC;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* res = nullptr;
    const auto service = std::to_string(port);
    if (::getaddrinfo(host.c_str(), service.c_str(), &hints, &res) != 0 || !res) {
        raise(ErrorCode::unreachable, "cannot resolve " + host);
    }
    int fd = -1;
    for (auto* ai = res; ai; ai = ai->ai_next) {
        fd = ::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol);
        if (fd < 0) continue;
        if (::connect(fd, ai->ai_addr, ai->ai_addrlen) == 0) break;
        ::close(fd);
        fd = -1;
    }
    ::freeaddrinfo(res);
    if (fd < 0) raise(ErrorCode::unreachable, "cannot connect to " + host + ":" + service);
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
    return fd;
}

} // namespace

std::string_view to_string(QpState state) noexcept {
    switch (state) {
    case QpState::reset: return "RESET";
    case QpState::init: return "INIT";
    case QpState::rtr: return "RTR";
    case QpState::rts: return "RTS";
    case QpState::error: return "ERROR";
    }
    return "?";
}

std::string_view to_string(WcOpcode opcode) noexcept {
    switch (opcode) {
    case WcOpcode::send: return "send";
    case WcOpcode::recv: return "recv";
    case WcOpcode::write: return "write";
    case WcOpcode::write_imm_send: return "write_imm_send";
    case WcOpcode::write_imm_recv: return "write_imm_recv";
    }
    return "?";
}

std::string_view to_string(WcStatus status) noexcept {
    switch (status) {
    case WcStatus::ok: return "ok";
    case WcStatus::flushed: return "flushed";
    case WcStatus::remote_protection: return "remote-protection";
    case WcStatus::retry_exceeded: return "retry-exceeded";
    case WcStatus::receiver_not_ready: return "receiver-not-ready";
    case WcStatus::length_error: return "length-error";
    }
    return "?";
}

bool is_legal_transition(QpState from, QpState to) noexcept {
    if (to == QpState::error) return true;
    return (from == QpState::reset && to == QpState::init) || (from == QpState::init && to == QpState::rtr) ||
           (from == QpState::rtr && to == QpState::rts);
}

// -- Listener -------------------------------------------------------------------

Listener::Listener(std::uint16_t port, const std::string& host) {
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd_ < 0) raise(ErrorCode::unreachable, "socket() failed");
    int one = 1;
    ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    if (host.empty() || host == "0.0.0.0") {
        addr.sin_addr.s_addr = htonl(INADDR_ANY);
    } else if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
        ::close(fd_);
        raise(ErrorCode::invalid_argument, "bad listen address " + host);
    }
    if (::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0 || ::listen(fd_, 4) != 0) {
        const std::string reason = std::strerror(errno);
        ::close(fd_);
        raise(ErrorCode::unreachable, "cannot listen on port " + std::to_string(port) + ": " + reason);
    }
    socklen_t len = sizeof(addr);
    ::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
}

Listener::~Listener() {
    if (fd_ >= 0) ::close(fd_);
}

int Listener::accept(std::chrono::milliseconds timeout) {
    pollfd pfd{fd_, POLLIN, 0};
    const int rc = ::poll(&pfd, 1, static_cast<int>(timeout.count()));
    if (rc <= 0) raise(ErrorCode::unreachable, "no peer connected within timeout");
    const int fd = ::accept(fd_, nullptr, nullptr);
    if (fd < 0) raise(ErrorCode::unreachable, "accept failed");
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
    return fd;
}

// -- Fabric: setup ----------------------------------------------------------------

Fabric::Fabric(BufferRegistry& registry, const LinkConfig& link, FabricOptions options)
    : registry_(registry), link_(link), options_(options), key_rng_(options.key_seed) {
    if (options_.send_cq_depth == 0 || options_.recv_cq_depth == 0) {
        raise(ErrorCode::invalid_argument, "CQ depth must be positive");
    }
    if (link_.kind != TransportKind::loopback) {
        if (link_.fd >= 0) {
            fd_ = link_.fd;
        } else if (link_.kind == TransportKind::stream) {
            fd_ = connect_to(link_.host, link_.port);
        } else {
            raise(ErrorCode::invalid_argument, "socket_pair link needs a connected fd");
        }
    }

    if (auto* obs = options_.observability) {
        auto& s = obs->stats();
        posts_counter_ = &s.counter(obs::Section::rdma, "posts");
        completions_counter_ = &s.counter(obs::Section::rdma, "completions");
        overflow_counter_ = &s.counter(obs::Section::rdma, "cq_overflows");
        rnr_counter_ = &s.counter(obs::Section::rdma, "receiver_not_ready");
        protection_counter_ = &s.counter(obs::Section::rdma, "remote_protection");
        flushed_counter_ = &s.counter(obs::Section::rdma, "flushed");
        latency_ = &s.histogram("rdma_latency");
    }

    pd_id_ = next_object_id_++;
    pd_alive_ = true;
    resource_log_.push_back({true, ResourceKind::pd, pd_id_, {}});
    send_cq_ = create_cq(options_.send_cq_depth);
    recv_cq_ = create_cq(options_.recv_cq_depth);

    if (fd_ >= 0) start_progress();
}

Fabric::~Fabric() {
    teardown();
}

std::pair<std::unique_ptr<Fabric>, std::unique_ptr<Fabric>> Fabric::make_pair(BufferRegistry& a, BufferRegistry& b,
                                                                              FabricOptions options) {
    int fds[2];
    if (::socketpair(AF_UNIX, SOCK_STREAM, 0, fds) != 0) raise(ErrorCode::unreachable, "socketpair failed");
    LinkConfig la{TransportKind::socket_pair, {}, 0, fds[0]};
    LinkConfig lb{TransportKind::socket_pair, {}, 0, fds[1]};
    auto first = std::make_unique<Fabric>(a, la, options);
    options.key_seed ^= 0x9e3779b9u;
    auto second = std::make_unique<Fabric>(b, lb, options);
    return {std::move(first), std::move(second)};
}

void Fabric::check_usable() const {
    if (torn_down_.load(std::memory_order_acquire)) raise(ErrorCode::stale_handle, "fabric torn down");
    if (!pd_alive_) raise(ErrorCode::stale_handle, "protection domain destroyed");
}

Fabric::Qp& Fabric::qp_locked(QpId qp) {
    auto it = qps_.find(qp);
    if (it == qps_.end()) raise(ErrorCode::not_found, "unknown QP " + std::to_string(qp));
    return it->second;
}

const Fabric::Qp& Fabric::qp_locked(QpId qp) const {
    auto it = qps_.find(qp);
    if (it == qps_.end()) raise(ErrorCode::not_found, "unknown QP " + std::to_string(qp));
    return it->second;
}

Fabric::Cq& Fabric::cq_locked(CqId cq) {
    auto it = cqs_.find(cq);
    if (it == cqs_.end()) raise(ErrorCode::stale_handle, "unknown CQ " + std::to_string(cq));
    return it->second;
}

const Fabric::Cq& Fabric::cq_locked(CqId cq) const {
    auto it = cqs_.find(cq);
    if (it == cqs_.end()) raise(ErrorCode::stale_handle, "unknown CQ " + std::to_string(cq));
    return it->second;
}

std::uint32_t Fabric::fresh_key_locked() {
    for (;;) {
        const std::uint32_t key = key_rng_();
        if (key != 0 && issued_keys_.insert(key).second) return key;
    }
}

// -- Resources ------------------------------------------------------------------

CqId Fabric::create_cq(std::size_t depth) {
    if (depth == 0) raise(ErrorCode::invalid_argument, "CQ depth must be positive");
    LevelScope scope(options_.validator, LockLevel::fabric);
    std::unique_lock rw(rw_);
    check_usable();
    std::lock_guard state(state_mutex_);
    const CqId id = next_object_id_++;
    Cq cq;
    cq.id = id;
    cq.depth = depth;
    cqs_.emplace(id, std::move(cq));
    resource_log_.push_back({true, ResourceKind::cq, id, {}});
    return id;
}

QpId Fabric::create_qp(CqId send_cq, CqId recv_cq) {
    LevelScope scope(options_.validator, LockLevel::fabric);
    std::unique_lock rw(rw_);
    check_usable();
    std::lock_guard state(state_mutex_);
    if (!cqs_.count(send_cq) || !cqs_.count(recv_cq)) raise(ErrorCode::not_found, "unknown CQ for QP");
    const QpId id = next_object_id_++;
    Qp qp;
    qp.id = id;
    qp.send_cq = send_cq;
    qp.recv_cq = recv_cq;
    qps_.emplace(id, std::move(qp));
    resource_log_.push_back({true, ResourceKind::qp, id, {send_cq, recv_cq}});
    return id;
}

void Fabric::modify_qp(QpId id, QpState target, std::optional<QpId> dest_qp) {
    LevelScope scope(options_.validator, LockLevel::fabric);
    std::shared_lock rw(rw_);
    check_usable();
    std::lock_guard state(state_mutex_);
    auto& qp = qp_locked(id);
    if (!is_legal_transition(qp.state, target)) {
        raise(ErrorCode::invalid_state, "illegal QP transition " + std::string(to_string(qp.state)) + " -> " +
                                            std::string(to_string(target)));
    }
    if (target == QpState::error) {
        to_error_locked(qp);
        return;
    }
    if (target == QpState::rtr) {
        if (link_.kind == TransportKind::loopback) {
            if (!dest_qp) raise(ErrorCode::invalid_argument, "loopback RTR needs a destination QP");
            qp_locked(*dest_qp);
            qp.dest = dest_qp;
        } else {
            if (bound_qp_ && *bound_qp_ != id) raise(ErrorCode::invalid_state, "link already bound to a QP");
            bound_qp_ = id;
        }
    }
    qp.state = target;
}

QpState Fabric::qp_state(QpId id) const {
    LevelScope scope(options_.validator, LockLevel::fabric);
    std::shared_lock rw(rw_);
    check_usable();
    std::lock_guard state(state_mutex_);
    return qp_locked(id).state;
}

std::size_t Fabric::posted_recvs(QpId id) const {
    LevelScope scope(options_.validator, LockLevel::fabric);
    std::shared_lock rw(rw_);
    check_usable();
    std::lock_guard state(state_mutex_);
    return qp_locked(id).recvs.size();
}

std::size_t Fabric::pending_sends(QpId id) const {
    LevelScope scope(options_.validator, LockLevel::fabric);
    std::shared_lock rw(rw_);
    check_usable();
    std::lock_guard state(state_mutex_);
    return qp_locked(id).pending.size();
}

MemoryRegion Fabric::register_mr(BufferId buffer, bool remote_access) {
    LevelScope scope(options_.validator, LockLevel::fabric);
    std::shared_lock rw(rw_);
    check_usable();

    MapToken token;
    std::span<std::byte> bytes;
    try {
        token = registry_.map_buffer(buffer);
        bytes = registry_.mapped_bytes(token);
    } catch (const Error& e) {
        if (e.code() == ErrorCode::stale_handle) raise(ErrorCode::not_found, e.what());
        throw;
    }

    LevelScope mr_scope(options_.validator, LockLevel::region);
    std::unique_lock mr_lock(mr_mutex_);
    MemoryRegion mr;
    mr.id = next_object_id_++;
    mr.base = reinterpret_cast<std::uintptr_t>(bytes.data());
    mr.length = bytes.size();
    mr.lkey = fresh_key_locked();
    if (remote_access) mr.rkey = fresh_key_locked();
    mr.buffer = buffer;
    mrs_.emplace(mr.id, Mr{mr, token});
    resource_log_.push_back({true, ResourceKind::mr, mr.id, {}});
    return mr;
}

void Fabric::deregister_mr(MrId id) {
    LevelScope scope(options_.validator, LockLevel::fabric);
    std::shared_lock rw(rw_);
    check_usable();
    MapToken token;
    {
        LevelScope mr_scope(options_.validator, LockLevel::region);
        std::unique_lock mr_lock(mr_mutex_);
        auto it = mrs_.find(id);
        if (it == mrs_.end()) raise(ErrorCode::not_found, "unknown MR " + std::to_string(id));
        token = it->second.token;
        mrs_.erase(it);
        resource_log_.push_back({false, ResourceKind::mr, id, {}});
    }
    registry_.unmap_buffer(token);
}

void Fabric::destroy_qp(QpId id) {
    LevelScope scope(options_.validator, LockLevel::fabric);
    std::unique_lock rw(rw_);
    check_usable();
    std::lock_guard state(state_mutex_);
    auto& qp = qp_locked(id);
    to_error_locked(qp);
    qps_.erase(id);
    if (bound_qp_ == id) bound_qp_.reset();
    resource_log_.push_back({false, ResourceKind::qp, id, {}});
}

void Fabric::destroy_cq(CqId id) {
    LevelScope scope(options_.validator, LockLevel::fabric);
    std::unique_lock rw(rw_);
    check_usable();
    std::lock_guard state(state_mutex_);
    cq_locked(id);
    for (const auto& [qid, qp] : qps_) {
        if (qp.send_cq == id || qp.recv_cq == id) {
            raise(ErrorCode::child_alive, "CQ " + std::to_string(id) + " still used by QP " + std::to_string(qid));
        }
    }
    cqs_.erase(id);
    resource_log_.push_back({false, ResourceKind::cq, id, {}});
}

void Fabric::destroy_pd() {
    LevelScope scope(options_.validator, LockLevel::fabric);
    std::unique_lock rw(rw_);
    check_usable();
    {
        std::lock_guard state(state_mutex_);
        if (!qps_.empty() || !cqs_.empty()) raise(ErrorCode::child_alive, "PD still has QPs or CQs");
    }
    {
        std::shared_lock mr_lock(mr_mutex_);
        if (!mrs_.empty()) raise(ErrorCode::child_alive, "PD still has MRs");
    }
    pd_alive_ = false;
    resource_log_.push_back({false, ResourceKind::pd, pd_id_, {}});
}

// -- Data path ----------------------------------------------------------------

void Fabric::check_local(std::span<const Sge> sges) const {
    for (const auto& sge : sges) {
        if (sge.length == 0) continue;
        bool ok = false;
        for (const auto& [id, mr] : mrs_) {
            if (mr.region.lkey != sge.lkey) continue;
            ok = sge.addr >= mr.region.base && sge.addr + sge.length <= mr.region.base + mr.region.length;
            break;
        }
        if (!ok) raise(ErrorCode::local_protection, "SGE outside any MR for its lkey");
    }
}

std::uint64_t Fabric::gather_length(std::span<const Sge> sges) const {
    std::uint64_t total = 0;
    for (const auto& s : sges) total += s.length;
    return total;
}

std::vector<std::byte> Fabric::gather(std::span<const Sge> sges) const {
    std::vector<std::byte> out;
    out.reserve(gather_length(sges));
    for (const auto& s : sges) {
        const auto* p = reinterpret_cast<const std::byte*>(static_cast<std::uintptr_t>(s.addr));
        out.insert(out.end(), p, p + s.length);
    }
    return out;
}

std::uint64_t Fabric::post_send(QpId qp, std::span<const Sge> sges) {
    return post_data(qp, WcOpcode::send, sges, 0, 0, 0);
}

std::uint64_t Fabric::rdma_write(QpId qp, const Sge& local, std::uint64_t remote_addr, std::uint32_t rkey) {
    return post_data(qp, WcOpcode::write, std::span<const Sge>(&local, 1), remote_addr, rkey, 0);
}

std::uint64_t Fabric::rdma_write_imm(QpId qp, const Sge& local, std::uint64_t remote_addr, std::uint32_t rkey,
                                     std::uint32_t imm) {
    return post_data(qp, WcOpcode::write_imm_send, std::span<const Sge>(&local, 1), remote_addr, rkey, imm);
}

std::uint64_t Fabric::post_data(QpId id, WcOpcode opcode, std::span<const Sge> sges, std::uint64_t remote_addr,
                                std::uint32_t rkey, std::uint32_t imm) {
    LevelScope scope(options_.validator, LockLevel::fabric);
    std::shared_lock rw(rw_);
    check_usable();
    LevelScope mr_scope(options_.validator, LockLevel::region);
    std::shared_lock mr_lock(mr_mutex_);
    check_local(sges);
    const auto length = gather_length(sges);
    if (length > wire::max_payload) raise(ErrorCode::invalid_argument, "work request too large");

    std::unique_lock state(state_mutex_);
    auto& qp = qp_locked(id);
    if (qp.state != QpState::rts) {
        raise(ErrorCode::invalid_state, "post requires RTS, QP is " + std::string(to_string(qp.state)));
    }

    PendingWr wr;
    wr.wr_seq = next_wr_seq_++;
    wr.opcode = opcode;
    wr.sges.assign(sges.begin(), sges.end());
    if (!sges.empty()) wr.local = sges.front();
    wr.remote_addr = remote_addr;
    wr.rkey = rkey;
    wr.imm = imm;
    wr.byte_len = static_cast<std::uint32_t>(length);
    wr.posted_at = std::chrono::steady_clock::now();
    const auto seq = wr.wr_seq;

    ++stats_.posts;
    if (posts_counter_) posts_counter_->add();
    if (auto* obs = options_.observability) obs->events().emit(obs::EventKind::rdma_post, seq, length);

    if (link_.kind == TransportKind::loopback) {
        qp.pending.push_back(std::move(wr));
        if (!hold_) drain_loopback(id);
        return seq;
    }

    const auto frame_op = opcode == WcOpcode::send    ? wire::FrameOpcode::send
                          : opcode == WcOpcode::write ? wire::FrameOpcode::write
                                                      : wire::FrameOpcode::write_imm;
    auto payload = gather(sges);
    qp.pending.push_back(std::move(wr));
    send_frame(static_cast<std::uint8_t>(frame_op), 0, remote_addr, rkey, imm, payload);
    return seq;
}

std::uint64_t Fabric::post_recv(QpId id, std::span<const Sge> sges) {
    LevelScope scope(options_.validator, LockLevel::fabric);
    std::shared_lock rw(rw_);
    check_usable();
    LevelScope mr_scope(options_.validator, LockLevel::region);
    std::shared_lock mr_lock(mr_mutex_);
    check_local(sges);
    std::lock_guard state(state_mutex_);
    auto& qp = qp_locked(id);
    if (qp.state == QpState::reset || qp.state == QpState::error) {
        raise(ErrorCode::invalid_state, "post_recv requires INIT or later, QP is " + std::string(to_string(qp.state)));
    }
    const auto seq = next_wr_seq_++;
    qp.recvs.push_back(RecvSlot{seq, std::vector<Sge>(sges.begin(), sges.end())});
    return seq;
}

// Runs with rw_ shared, mr_mutex_ shared and state_mutex_ held.
void Fabric::drain_loopback(QpId id) {
    auto* qp = &qps_.at(id);
    if (qp->processing) return;
    qp->processing = true;
    // Only one context drains a QP at a time so per-QP order holds even when
    // a retry drops the state lock.
    std::unique_lock<std::mutex> relock(state_mutex_, std::adopt_lock);
    while (!hold_ && !qp->pending.empty() && qp->state == QpState::rts) {
        PendingWr wr = qp->pending.front();
        const WcStatus status = execute_loopback(*qp, wr, relock);
        qp = &qps_.at(id);
        if (qp->pending.empty() || qp->pending.front().wr_seq != wr.wr_seq) continue; // flushed meanwhile
        qp->pending.pop_front();
        push_completion_locked(*qp, true, WorkCompletion{wr.wr_seq, id, wr.opcode, status, std::nullopt, wr.byte_len},
                               wr.posted_at);
        if (status != WcStatus::ok) to_error_locked(*qp);
    }
    qp->processing = false;
    relock.release();
}

WcStatus Fabric::execute_loopback(Qp& sender, PendingWr& wr, std::unique_lock<std::mutex>& lock) {
    if (!sender.dest) return WcStatus::retry_exceeded;
    // Local memory may have been deregistered while the WR sat in the queue.
    for (const auto& sge : wr.sges) {
        bool ok = sge.length == 0;
        for (const auto& [mid, mr] : mrs_) {
            if (ok) break;
            ok = mr.region.lkey == sge.lkey && sge.addr >= mr.region.base &&
                 sge.addr + sge.length <= mr.region.base + mr.region.length;
        }
        if (!ok) return WcStatus::remote_protection;
    }

    std::vector<std::byte> scratch;
    Incoming in;
    in.remote_addr = wr.remote_addr;
    in.rkey = wr.rkey;
    in.imm = wr.imm;
    if (wr.opcode == WcOpcode::send) {
        in.op = DataOp::send;
        scratch = gather(wr.sges);
        in.payload = scratch;
    } else {
        in.op = wr.opcode == WcOpcode::write ? DataOp::write : DataOp::write_imm;
        in.payload = {reinterpret_cast<const std::byte*>(static_cast<std::uintptr_t>(wr.local.addr)),
                      wr.local.length};
    }
    return accept_incoming(*sender.dest, in, lock);
}

WcStatus Fabric::accept_incoming(QpId target_id, const Incoming& in, std::unique_lock<std::mutex>& lock) {
    const auto ready = [&](Qp* t) { return t && (t->state == QpState::rtr || t->state == QpState::rts); };
    auto lookup = [&]() -> Qp* {
        auto it = qps_.find(target_id);
        return it == qps_.end() ? nullptr : &it->second;
    };

    Qp* target = lookup();
    if (!ready(target)) {
        ++stats_.retry_exceeded;
        return WcStatus::retry_exceeded;
    }

    std::byte* dest = nullptr;
    if (in.op != DataOp::send) {
        const Mr* hit = nullptr;
        for (const auto& [mid, mr] : mrs_) {
            if (mr.region.rkey && *mr.region.rkey == in.rkey) {
                hit = &mr;
                break;
            }
        }
        if (!hit || in.remote_addr < hit->region.base ||
            in.remote_addr + in.payload.size() > hit->region.base + hit->region.length) {
            ++stats_.remote_protection;
            if (protection_counter_) protection_counter_->add();
            return WcStatus::remote_protection;
        }
        dest = reinterpret_cast<std::byte*>(static_cast<std::uintptr_t>(in.remote_addr));
    }

    if (in.op != DataOp::write) {
        for (unsigned attempt = 0; target->recvs.empty() && attempt < options_.retry_count; ++attempt) {
            lock.unlock();
            std::this_thread::sleep_for(options_.retry_interval);
            lock.lock();
            target = lookup();
            if (!ready(target)) {
                ++stats_.retry_exceeded;
                return WcStatus::retry_exceeded;
            }
        }
        if (target->recvs.empty()) {
            if (in.op == DataOp::send) {
                ++stats_.retry_exceeded;
                return WcStatus::retry_exceeded;
            }
            ++stats_.receiver_not_ready;
            if (rnr_counter_) rnr_counter_->add();
            return WcStatus::receiver_not_ready;
        }
    }

    const auto len = static_cast<std::uint32_t>(in.payload.size());
    switch (in.op) {
    case DataOp::write:
        std::memmove(dest, in.payload.data(), in.payload.size());
        break;
    case DataOp::write_imm: {
        std::memmove(dest, in.payload.data(), in.payload.size());
        RecvSlot slot = std::move(target->recvs.front());
        target->recvs.pop_front();
        push_completion_locked(*target, false, WorkCompletion{slot.wr_seq, target->id, WcOpcode::write_imm_recv,
                                                              WcStatus::ok, in.imm, len},
                               {});
        break;
    }
    case DataOp::send: {
        RecvSlot slot = std::move(target->recvs.front());
        target->recvs.pop_front();
        std::uint64_t capacity = 0;
        for (const auto& s : slot.sges) capacity += s.length;
        if (capacity < in.payload.size()) {
            push_completion_locked(*target, false,
                                   WorkCompletion{slot.wr_seq, target->id, WcOpcode::recv, WcStatus::length_error,
                                                  std::nullopt, len},
                                   {});
            return WcStatus::length_error;
        }
        std::size_t off = 0;
        for (const auto& s : slot.sges) {
            const auto n = std::min<std::size_t>(s.length, in.payload.size() - off);
            std::memcpy(reinterpret_cast<std::byte*>(static_cast<std::uintptr_t>(s.addr)), in.payload.data() + off, n);
            off += n;
            if (off == in.payload.size()) break;
        }
        push_completion_locked(*target, false,
                               WorkCompletion{slot.wr_seq, target->id, WcOpcode::recv, WcStatus::ok, std::nullopt, len},
                               {});
        break;
    }
    }
    stats_.bytes_written += in.payload.size();
    return WcStatus::ok;
}

void Fabric::push_completion_locked(Qp& qp, bool send_side, WorkCompletion wc,
                                    std::chrono::steady_clock::time_point posted_at) {
    if (teardown_complete_.load(std::memory_order_acquire)) {
        ++stats_.late_deliveries;
        return;
    }
    auto it = cqs_.find(send_side ? qp.send_cq : qp.recv_cq);
    if (it == cqs_.end()) return;
    auto& cq = it->second;

    if (auto* obs = options_.observability) {
        obs->events().emit(obs::EventKind::rdma_completion, wc.wr_seq, static_cast<std::uint64_t>(wc.status));
    }
    if (wc.status == WcStatus::flushed) {
        ++stats_.flushed;
        if (flushed_counter_) flushed_counter_->add();
    }
    if (send_side) {
        ++stats_.send_completions;
    } else {
        ++stats_.recv_completions;
    }

    if (cq.entries.size() >= cq.depth) {
        ++cq.overflow;
        ++stats_.cq_overflows;
        if (overflow_counter_) overflow_counter_->add();
        return;
    }
    const auto now = std::chrono::steady_clock::now();
    auto visible_at = now;
    if (link_.kind == TransportKind::loopback && options_.loopback_latency.count() > 0) {
        const auto base = posted_at == std::chrono::steady_clock::time_point{} ? now : posted_at;
        visible_at = base + options_.loopback_latency;
    }
    if (send_side && latency_ && posted_at != std::chrono::steady_clock::time_point{}) {
        latency_->record(visible_at - posted_at);
    }
    cq.entries.push_back({wc, visible_at});
    ++cq.delivered;
    if (completions_counter_) completions_counter_->add();
}

void Fabric::to_error_locked(Qp& qp) {
    qp.state = QpState::error;
    while (!qp.pending.empty()) {
        auto wr = std::move(qp.pending.front());
        qp.pending.pop_front();
        push_completion_locked(qp, true,
                               WorkCompletion{wr.wr_seq, qp.id, wr.opcode, WcStatus::flushed, std::nullopt, 0},
                               wr.posted_at);
    }
    while (!qp.recvs.empty()) {
        auto slot = std::move(qp.recvs.front());
        qp.recvs.pop_front();
        push_completion_locked(qp, false,
                               WorkCompletion{slot.wr_seq, qp.id, WcOpcode::recv, WcStatus::flushed, std::nullopt, 0},
                               {});
    }
}

std::size_t Fabric::poll_cq(CqId cq_id, std::span<WorkCompletion> out) {
    LevelScope scope(options_.validator, LockLevel::fabric);
    std::shared_lock rw(rw_);
    if (torn_down_.load(std::memory_order_acquire)) raise(ErrorCode::stale_handle, "fabric torn down");
    std::lock_guard state(state_mutex_);
    auto& cq = cq_locked(cq_id);
    const auto now = std::chrono::steady_clock::now();
    std::size_t n = 0;
    while (n < out.size() && !cq.entries.empty() && cq.entries.front().visible_at <= now) {
        out[n++] = cq.entries.front().wc;
        cq.entries.pop_front();
    }
    return n;
}

std::vector<WorkCompletion> Fabric::poll_cq(CqId cq, std::size_t max) {
    std::vector<WorkCompletion> out(max);
    out.resize(poll_cq(cq, std::span<WorkCompletion>(out)));
    return out;
}

CqStats Fabric::cq_stats(CqId cq_id) const {
    LevelScope scope(options_.validator, LockLevel::fabric);
    std::shared_lock rw(rw_);
    std::lock_guard state(state_mutex_);
    const auto& cq = cq_locked(cq_id);
    return CqStats{cq.depth, cq.entries.size(), cq.delivered, cq.overflow};
}

void Fabric::hold_delivery(bool hold) {
    LevelScope scope(options_.validator, LockLevel::fabric);
    std::shared_lock rw(rw_);
    LevelScope mr_scope(options_.validator, LockLevel::region);
    std::shared_lock mr_lock(mr_mutex_);
    std::unique_lock state(state_mutex_);
    hold_ = hold;
    if (hold || torn_down_.load()) return;
    std::vector<QpId> ids;
    for (const auto& [id, qp] : qps_) ids.push_back(id);
    state.release();
    for (auto id : ids) {
        if (qps_.count(id)) drain_loopback(id);
    }
    state_mutex_.unlock();
}

// -- Control plane ----------------------------------------------------------------

void Fabric::advertise_mr(const MemoryRegion& mr) {
    if (!mr.rkey) raise(ErrorCode::invalid_argument, "MR has no remote access");
    LevelScope scope(options_.validator, LockLevel::fabric);
    std::shared_lock rw(rw_);
    check_usable();
    if (link_.kind == TransportKind::loopback) {
        {
            std::lock_guard state(state_mutex_);
            remote_mrs_.push_back(RemoteMr{mr.base, mr.length, *mr.rkey});
        }
        remote_mr_cv_.notify_all();
        return;
    }
    std::array<std::byte, wire::mr_advert_size> payload{};
    wire::encode_mr_advert(wire::MrAdvert{mr.base, mr.length, *mr.rkey}, payload);
    std::lock_guard state(state_mutex_);
    send_frame(static_cast<std::uint8_t>(wire::FrameOpcode::ctrl), static_cast<std::uint8_t>(wire::CtrlKind::mr_advert),
               0, 0, 0, payload);
}

std::optional<RemoteMr> Fabric::wait_remote_mr(std::chrono::milliseconds timeout) {
    std::unique_lock state(state_mutex_);
    if (!remote_mr_cv_.wait_for(state, timeout, [this] { return !remote_mrs_.empty(); })) return std::nullopt;
    auto mr = remote_mrs_.front();
    remote_mrs_.pop_front();
    return mr;
}

void Fabric::return_credits(QpId id, std::uint32_t n) {
    if (n == 0) return;
    LevelScope scope(options_.validator, LockLevel::fabric);
    std::shared_lock rw(rw_);
    check_usable();
    std::lock_guard state(state_mutex_);
    auto& qp = qp_locked(id);
    if (link_.kind == TransportKind::loopback) {
        if (!qp.dest) raise(ErrorCode::invalid_state, "QP has no loopback peer");
        qp_locked(*qp.dest).returned_credits += n;
        return;
    }
    send_frame(static_cast<std::uint8_t>(wire::FrameOpcode::ctrl),
               static_cast<std::uint8_t>(wire::CtrlKind::credit_return), 0, 0, n, {});
}

std::uint32_t Fabric::take_returned_credits(QpId id) {
    LevelScope scope(options_.validator, LockLevel::fabric);
    std::shared_lock rw(rw_);
    check_usable();
    std::lock_guard state(state_mutex_);
    auto& qp = qp_locked(id);
    return std::exchange(qp.returned_credits, 0);
}

// -- Stream transport -------------------------------------------------------------

void Fabric::send_frame(std::uint8_t opcode, std::uint8_t flags, std::uint64_t remote_addr, std::uint32_t rkey,
                        std::uint32_t imm, std::span<const std::byte> payload) {
    std::vector<std::byte> frame(wire::header_size + payload.size());
    wire::FrameHeader h;
    h.opcode = static_cast<wire::FrameOpcode>(opcode);
    h.flags = flags;
    h.remote_addr = remote_addr;
    h.rkey = rkey;
    h.imm = imm;
    h.length = static_cast<std::uint32_t>(payload.size());
    wire::encode_header(h, std::span<std::byte, wire::header_size>(frame.data(), wire::header_size));
    std::copy(payload.begin(), payload.end(), frame.begin() + wire::header_size);

    {
        std::lock_guard lock(out_mutex_);
        outbound_.push_back(std::move(frame));
    }
    out_cv_.notify_one();
}

void Fabric::start_progress() {
    // Writer: the only thread that writes to the socket, so the reader never
    // blocks on a full peer buffer.
    writer_ = std::thread([this] {
        for (;;) {
            std::vector<std::byte> frame;
            {
                std::unique_lock lock(out_mutex_);
                out_cv_.wait(lock, [this] { return out_closing_ || !outbound_.empty(); });
                if (outbound_.empty()) return;
                frame = std::move(outbound_.front());
                outbound_.pop_front();
            }
            if (!write_all(fd_, frame)) return;
        }
    });
    progress_ = std::thread([this] { progress_loop(); });
}

void Fabric::progress_loop() {
    std::array<std::byte, wire::header_size> raw{};
    std::vector<std::byte> payload;
    while (!stopping_.load(std::memory_order_acquire)) {
        if (!read_all(fd_, raw)) break;
        wire::FrameHeader h;
        try {
            h = wire::decode_header(raw);
        } catch (const Error&) {
            break;
        }
        payload.resize(h.length);
        if (h.length && !read_all(fd_, payload)) break;

        LevelScope scope(options_.validator, LockLevel::fabric);
        std::shared_lock rw(rw_);
        if (h.opcode == wire::FrameOpcode::ctrl) {
            std::unique_lock state(state_mutex_);
            switch (static_cast<wire::CtrlKind>(h.flags)) {
            case wire::CtrlKind::mr_advert:
                if (payload.size() == wire::mr_advert_size) {
                    auto a = wire::decode_mr_advert(
                        std::span<const std::byte, wire::mr_advert_size>(payload.data(), wire::mr_advert_size));
                    remote_mrs_.push_back(RemoteMr{a.base, a.length, a.rkey});
                    remote_mr_cv_.notify_all();
                }
                break;
            case wire::CtrlKind::ack:
                if (bound_qp_) {
                    auto& qp = qps_.at(*bound_qp_);
                    if (!qp.pending.empty()) {
                        auto wr = std::move(qp.pending.front());
                        qp.pending.pop_front();
                        const auto status = static_cast<WcStatus>(h.imm);
                        push_completion_locked(
                            qp, true, WorkCompletion{wr.wr_seq, qp.id, wr.opcode, status, std::nullopt, wr.byte_len},
                            wr.posted_at);
                        if (status != WcStatus::ok) to_error_locked(qp);
                    }
                }
                break;
            case wire::CtrlKind::credit_return:
                if (bound_qp_) qps_.at(*bound_qp_).returned_credits += h.imm;
                break;
            }
            continue;
        }

        Incoming in;
        in.op = h.opcode == wire::FrameOpcode::send    ? DataOp::send
                : h.opcode == wire::FrameOpcode::write ? DataOp::write
                                                       : DataOp::write_imm;
        in.remote_addr = h.remote_addr;
        in.rkey = h.rkey;
        in.imm = h.imm;
        in.payload = payload;
        WcStatus status;
        {
            LevelScope mr_scope(options_.validator, LockLevel::region);
            std::shared_lock mr_lock(mr_mutex_);
            std::unique_lock state(state_mutex_);
            status = bound_qp_ ? accept_incoming(*bound_qp_, in, state) : WcStatus::retry_exceeded;
        }
        send_frame(static_cast<std::uint8_t>(wire::FrameOpcode::ctrl), static_cast<std::uint8_t>(wire::CtrlKind::ack),
                   0, 0, static_cast<std::uint32_t>(status), {});
    }

    // Peer gone: nothing outstanding on this link can complete any more.
    if (!stopping_.load(std::memory_order_acquire)) {
        LevelScope scope(options_.validator, LockLevel::fabric);
        std::shared_lock rw(rw_);
        std::lock_guard state(state_mutex_);
        if (bound_qp_) {
            if (auto it = qps_.find(*bound_qp_); it != qps_.end() && it->second.state != QpState::error) {
                to_error_locked(it->second);
            }
        }
    }
}

void Fabric::stop_link() {
    if (fd_ < 0) return;
    {
        std::lock_guard lock(out_mutex_);
        out_closing_ = true;
    }
    out_cv_.notify_all();
    if (writer_.joinable()) writer_.join(); // drains queued frames first
    stopping_.store(true, std::memory_order_release);
    ::shutdown(fd_, SHUT_RDWR);
    if (progress_.joinable()) progress_.join();
    ::close(fd_);
    fd_ = -1;
}

// -- Teardown -------------------------------------------------------------------

void Fabric::teardown() {
    std::lock_guard once(teardown_mutex_);
    if (teardown_complete_.load(std::memory_order_acquire)) return;
    torn_down_.store(true, std::memory_order_release);
    stop_link();

    std::vector<MapToken> tokens;
    {
        LevelScope scope(options_.validator, LockLevel::fabric);
        std::unique_lock rw(rw_);
        {
            std::lock_guard state(state_mutex_);
            for (auto& [id, qp] : qps_) {
                if (qp.state != QpState::error || !qp.pending.empty() || !qp.recvs.empty()) to_error_locked(qp);
            }
            // Ids grow monotonically, so reverse id order is reverse creation.
            for (auto it = qps_.rbegin(); it != qps_.rend(); ++it) {
                resource_log_.push_back({false, ResourceKind::qp, it->first, {}});
            }
            qps_.clear();
            bound_qp_.reset();
            for (auto it = cqs_.rbegin(); it != cqs_.rend(); ++it) {
                resource_log_.push_back({false, ResourceKind::cq, it->first, {}});
            }
            cqs_.clear();
        }
        {
            LevelScope mr_scope(options_.validator, LockLevel::region);
            std::unique_lock mr_lock(mr_mutex_);
            for (auto it = mrs_.rbegin(); it != mrs_.rend(); ++it) {
                resource_log_.push_back({false, ResourceKind::mr, it->first, {}});
                tokens.push_back(it->second.token);
            }
            mrs_.clear();
        }
        for (auto token : tokens) {
            try {
                registry_.unmap_buffer(token);
            } catch (const Error&) {
            }
        }
        if (pd_alive_) {
            pd_alive_ = false;
            resource_log_.push_back({false, ResourceKind::pd, pd_id_, {}});
        }
        teardown_complete_.store(true, std::memory_order_release);
    }
    if (auto* obs = options_.observability) {
        obs->events().emit(obs::Event{obs::EventKind::teardown, std::chrono::steady_clock::now(), pd_id_, 0,
                                      obs::TeardownStage::fabric});
    }
}

FabricStats Fabric::stats() const {
    std::lock_guard state(state_mutex_);
    return stats_;
}

std::vector<ResourceEvent> Fabric::resource_log() const {
    std::shared_lock rw(rw_);
    std::shared_lock mr_lock(mr_mutex_);
    return resource_log_;
}

} // namespace dmaplane::fabric
