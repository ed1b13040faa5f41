#include "dmaplane/flow_control.hpp"

#include <algorithm>
#include <thread>

#include "dmaplane/error.hpp"

namespace dmaplane::flow {

CreditConfig CreditConfig::with_default_watermarks(std::uint32_t max_credits) {
    CreditConfig c;
    c.max_credits = max_credits;
    c.low_watermark = std::max<std::uint32_t>(1, max_credits / 4);
    c.high_watermark = std::max(c.low_watermark, max_credits * 3 / 4);
    return c;
}

CreditGauge::CreditGauge(CreditConfig config, std::size_t bound_depth, obs::Observability* obs, std::string name,
                         bool start_exhausted)
    : config_(config), name_(std::move(name)), obs_(obs) {
    if (config_.max_credits == 0) raise(ErrorCode::invalid_argument, "max_credits must be positive");
    if (config_.max_credits > bound_depth) {
        raise(ErrorCode::invalid_argument, "max_credits " + std::to_string(config_.max_credits) +
                                               " exceeds bound depth " + std::to_string(bound_depth));
    }
    if (config_.low_watermark == 0 || config_.low_watermark > config_.high_watermark ||
        config_.high_watermark > config_.max_credits) {
        raise(ErrorCode::invalid_argument, "watermarks must satisfy 1 <= low <= high <= max_credits");
    }
    if (start_exhausted) in_flight_.store(config_.max_credits);
    if (obs_) {
        auto& s = obs_->stats();
        stall_counter_ = &s.counter(obs::Section::flow, name_ + "_stalls");
        in_flight_gauge_ = &s.gauge(obs::Section::flow, name_ + "_in_flight");
        max_seen_gauge_ = &s.gauge(obs::Section::flow, name_ + "_max_in_flight_seen");
        s.gauge(obs::Section::flow, name_ + "_max_credits").set(config_.max_credits);
        publish();
    }
}

void CreditGauge::publish() noexcept {
    if (in_flight_gauge_) in_flight_gauge_->set(in_flight());
    if (max_seen_gauge_) max_seen_gauge_->raise_to(max_seen_.load(std::memory_order_relaxed));
}

void CreditGauge::take() noexcept {
    const auto now = in_flight_.fetch_add(1, std::memory_order_acq_rel) + 1;
    auto seen = max_seen_.load(std::memory_order_relaxed);
    while (now > seen && !max_seen_.compare_exchange_weak(seen, now, std::memory_order_relaxed)) {
    }
    acquired_.fetch_add(1, std::memory_order_relaxed);
    publish();
}

bool CreditGauge::try_acquire() noexcept {
    if (available() == 0) return false;
    take();
    return true;
}

void CreditGauge::acquire(const std::function<void()>& poll, const std::atomic<bool>* abort) {
    if (available() < config_.low_watermark) {
        while (available() < config_.high_watermark) {
            if (abort && abort->load(std::memory_order_acquire)) raise(ErrorCode::aborted, "credit wait aborted");
            stalls_.fetch_add(1, std::memory_order_relaxed);
            if (stall_counter_) stall_counter_->add();
            if (obs_) obs_->events().emit(obs::EventKind::flow_stall, 0, in_flight());
            poll();
            if (available() < config_.high_watermark) std::this_thread::yield();
        }
    }
    take();
}

void CreditGauge::release(std::uint32_t n) {
    auto cur = in_flight_.load(std::memory_order_acquire);
    do {
        if (n > cur) {
            raise(ErrorCode::accounting_corruption, name_ + " credits: release " + std::to_string(n) +
                                                        " with only " + std::to_string(cur) + " in flight");
        }
    } while (!in_flight_.compare_exchange_weak(cur, cur - n, std::memory_order_acq_rel));
    publish();
}

// -- ReceiveWindow --------------------------------------------------------------

ReceiveWindow::ReceiveWindow(fabric::Fabric& fabric, fabric::QpId qp, std::uint32_t refill_batch)
    : fabric_(fabric), qp_(qp), refill_batch_(refill_batch) {
    if (refill_batch_ == 0) raise(ErrorCode::invalid_argument, "refill_batch must be positive");
}

void ReceiveWindow::post_slots(std::uint32_t n) {
    for (std::uint32_t i = 0; i < n; ++i) fabric_.post_recv(qp_, {});
    posted_ += n;
    fabric_.return_credits(qp_, n);
}

void ReceiveWindow::post(std::uint32_t n) {
    if (n == 0) raise(ErrorCode::invalid_argument, "receive window must post at least one slot");
    post_slots(n);
}

void ReceiveWindow::on_receive_completion() {
    if (posted_ == 0) raise(ErrorCode::accounting_corruption, "receive completion with no posted slot");
    min_posted_at_arrival_ = std::min(min_posted_at_arrival_, posted_);
    --posted_;
    ++consumed_;
    if (++owed_ < refill_batch_) return;
    try {
        post_slots(owed_);
    } catch (const Error& e) {
        raise(ErrorCode::aborted, std::string("receive window repost failed: ") + e.what());
    }
    reposted_ += owed_;
    owed_ = 0;
}

} // namespace dmaplane::flow
