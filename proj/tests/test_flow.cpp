#include <doctest.h>

#include <functional>
#include <map>

#include "dmaplane/flow_control.hpp"
#include "dmaplane/workloads.hpp"
#include "support.hpp"

using namespace dmaplane;
using namespace dmaplane::fabric;
using dmaplane::flow::CreditConfig;
using dmaplane::flow::CreditGauge;
using dmaplane::flow::ReceiveWindow;
using testsupport::Loop;

namespace {

ErrorCode code_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.code();
    }
    FAIL("expected an error");
    return ErrorCode::invalid_argument;
}

CreditConfig cfg(std::uint32_t max, std::uint32_t high, std::uint32_t low) {
    CreditConfig c;
    c.max_credits = max;
    c.high_watermark = high;
    c.low_watermark = low;
    return c;
}

/// Lazy-polling write loop on a zero-latency loopback: poll only inside
/// acquire. Fully deterministic, so stall counts are comparable across runs.
std::uint64_t stalls_for(std::uint32_t max_credits, std::uint64_t ops) {
    BufferRegistry reg;
    Fabric f(reg, LinkConfig{});
    Loop q(f);
    const auto src = f.register_mr(reg.create_buffer(64, AllocClass::page_backed), false);
    const auto dst = f.register_mr(reg.create_buffer(64, AllocClass::page_backed), true);
    CreditGauge g(CreditConfig::with_default_watermarks(max_credits), 256);
    const auto poll = [&] {
        const auto n = f.poll_cq(f.default_send_cq(), 256).size();
        if (n) g.release(static_cast<std::uint32_t>(n));
    };
    for (std::uint64_t i = 0; i < ops; ++i) {
        g.acquire(poll);
        f.rdma_write(q.a, src.sge(0, 8), dst.base, *dst.rkey);
    }
    return g.stall_count();
}

} // namespace

TEST_CASE("default watermarks") {
    const auto c = CreditConfig::with_default_watermarks(4);
    CHECK(c.max_credits == 4);
    CHECK(c.high_watermark == 3);
    CHECK(c.low_watermark == 1);
    const auto d = CreditConfig::with_default_watermarks(64);
    CHECK(d.high_watermark == 48);
    CHECK(d.low_watermark == 16);
    const auto one = CreditConfig::with_default_watermarks(1);
    CHECK(one.high_watermark == 1);
    CHECK(one.low_watermark == 1);
}

TEST_CASE("gauge construction is checked against the bound depth") {
    CHECK(code_of([] { CreditGauge g(cfg(8, 6, 2), 4); }) == ErrorCode::invalid_argument);
    CHECK(code_of([] { CreditGauge g(cfg(0, 0, 0), 4); }) == ErrorCode::invalid_argument);
    CHECK(code_of([] { CreditGauge g(cfg(4, 1, 2), 4); }) == ErrorCode::invalid_argument);
    CHECK(code_of([] { CreditGauge g(cfg(4, 5, 1), 8); }) == ErrorCode::invalid_argument);
    CreditGauge ok(cfg(4, 3, 1), 4);
    CHECK(ok.available() == 4);
    CreditGauge exhausted(cfg(4, 3, 1), 4, nullptr, "window", true);
    CHECK(exhausted.in_flight() == 4);
    CHECK_FALSE(exhausted.try_acquire());
}

TEST_CASE("fifth acquire at max 4 stalls until completions are polled") {
    CreditGauge g(cfg(4, 3, 1), 4);
    for (int i = 0; i < 4; ++i) g.acquire([] { FAIL("no poll expected"); });
    CHECK(g.stall_count() == 0);
    int polls = 0;
    g.acquire([&] {
        ++polls;
        g.release(1);
    });
    // Drained up to the high watermark (3 available) before taking one.
    CHECK(polls == 3);
    CHECK(g.stall_count() == 3);
    CHECK(g.in_flight() == 2);
    CHECK(g.max_in_flight_seen() == 4);
}

TEST_CASE("acquire with credits to spare returns immediately") {
    CreditGauge g(CreditConfig::with_default_watermarks(64), 64);
    g.acquire([] {});
    g.acquire([] { FAIL("no poll expected"); });
    CHECK(g.stall_count() == 0);
    CHECK(g.in_flight() == 2);
}

TEST_CASE("acquire honours the abort flag") {
    CreditGauge g(cfg(2, 1, 1), 2);
    g.acquire([] {});
    g.acquire([] {});
    std::atomic<bool> abort{false};
    int polls = 0;
    CHECK(code_of([&] {
              g.acquire(
                  [&] {
                      if (++polls == 10) abort = true;
                  },
                  &abort);
          }) == ErrorCode::aborted);
    CHECK(polls == 10);
    CHECK(g.in_flight() == 2);
}

TEST_CASE("release accounting") {
    CreditGauge g(cfg(4, 3, 1), 4);
    for (int i = 0; i < 3; ++i) CHECK(g.try_acquire());
    g.release(2);
    CHECK(g.in_flight() == 1);
    g.release(1);
    CHECK(code_of([&] { g.release(1); }) == ErrorCode::accounting_corruption);
    CHECK(g.in_flight() == 0);
    g.try_acquire();
    CHECK(code_of([&] { g.release(5); }) == ErrorCode::accounting_corruption);
    CHECK(g.in_flight() == 1);
}

TEST_CASE("random post/poll schedule balances against the event log") {
    obs::Observability o;
    obs::EventLog log;
    log.attach(o, obs::mask_of(obs::EventKind::rdma_post) | obs::mask_of(obs::EventKind::rdma_completion));
    BufferRegistry reg;
    FabricOptions fo;
    fo.send_cq_depth = 16;
    fo.observability = &o;
    Fabric f(reg, LinkConfig{}, fo);
    Loop q(f);
    const auto src = f.register_mr(reg.create_buffer(64, AllocClass::page_backed), false);
    const auto dst = f.register_mr(reg.create_buffer(64, AllocClass::page_backed), true);
    CreditGauge g(CreditConfig::with_default_watermarks(16), 16);
    testsupport::Gen gen(21);
    const auto poll = [&](std::size_t max) {
        const auto n = f.poll_cq(f.default_send_cq(), max).size();
        if (n) g.release(static_cast<std::uint32_t>(n));
    };
    for (int i = 0; i < 100000; ++i) {
        if (gen.range(0, 2) != 0) {
            g.acquire([&] { poll(16); });
            f.rdma_write(q.a, src.sge(0, 8), dst.base, *dst.rkey);
        } else {
            poll(gen.range(1, 8));
        }
        REQUIRE(g.in_flight() <= 16);
    }
    while (g.in_flight() > 0) poll(16);

    // Replay: every posted wr_seq completes exactly once.
    std::map<std::uint64_t, int> balance;
    for (const auto& ev : log.events()) {
        if (ev.kind == obs::EventKind::rdma_post) ++balance[ev.id];
        if (ev.kind == obs::EventKind::rdma_completion) --balance[ev.id];
    }
    for (const auto& [seq, b] : balance) REQUIRE(b == 0);
    CHECK(balance.size() == g.acquired_total());
    CHECK(g.in_flight() == 0);
    CHECK(g.max_in_flight_seen() <= 16);
    CHECK(f.cq_stats(f.default_send_cq()).overflow_count == 0);
}

TEST_CASE("stall count never decreases as max_credits shrinks") {
    std::uint64_t prev = 0;
    for (std::uint32_t max : {64u, 32u, 16u, 8u, 4u, 2u, 1u}) {
        const auto s = stalls_for(max, 5000);
        CAPTURE(max);
        CHECK(s >= prev);
        prev = s;
    }
    CHECK(prev > 0);
}

TEST_CASE("receive window post validation") {
    BufferRegistry reg;
    Fabric f(reg, LinkConfig{});
    Loop q(f);
    CHECK(code_of([&] { ReceiveWindow w(f, q.b, 0); }) == ErrorCode::invalid_argument);
    ReceiveWindow w(f, q.b, 1);
    CHECK(code_of([&] { w.post(0); }) == ErrorCode::invalid_argument);
    CHECK(code_of([&] { w.on_receive_completion(); }) == ErrorCode::accounting_corruption);
    w.post(3);
    CHECK(w.posted() == 3);
    CHECK(f.posted_recvs(q.b) == 3);
    CHECK(f.take_returned_credits(q.a) == 3);
}

TEST_CASE("window 16 with refill 8 never runs dry under the combined bound") {
    BufferRegistry reg;
    Fabric f(reg, LinkConfig{});
    Loop q(f);
    const auto src = f.register_mr(reg.create_buffer(64, AllocClass::page_backed), false);
    const auto dst = f.register_mr(reg.create_buffer(64, AllocClass::page_backed), true);
    ReceiveWindow w(f, q.b, 8);
    w.post(16);
    CreditGauge send(CreditConfig::with_default_watermarks(16), 256);
    CreditGauge window(cfg(16, 1, 1), 16, nullptr, "window", true);
    window.release(f.take_returned_credits(q.a));
    const auto poll = [&] {
        for (const auto& wc : f.poll_cq(f.default_recv_cq(), 16)) {
            REQUIRE(wc.status == WcStatus::ok);
            w.on_receive_completion();
        }
        const auto s = f.poll_cq(f.default_send_cq(), 16).size();
        if (s) send.release(static_cast<std::uint32_t>(s));
        if (const auto c = f.take_returned_credits(q.a)) window.release(c);
    };
    for (std::uint32_t i = 0; i < 64; ++i) {
        send.acquire(poll);
        window.acquire(poll);
        f.rdma_write_imm(q.a, src.sge(0, 8), dst.base, *dst.rkey, i);
    }
    while (send.in_flight() > 0) poll();
    poll();
    CHECK(w.consumed() == 64);
    CHECK(w.min_posted_at_arrival() >= 1);
    CHECK(f.stats().receiver_not_ready == 0);
    CHECK(w.posted() == 16);
}

namespace {

/// Independent model of the window protocol. Actions: S posts one write_imm
/// (needs a window credit; the slot is consumed on arrival), R handles one
/// receive completion (reposts and grants once `batch` are owed), G moves
/// granted credits to the sender.
struct WindowModel {
    int posted = 2;
    int credits = 0;
    int granted = 2;
    int owed = 0;
    int pending = 0;
    int sent = 0;
    int batch = 1;
    bool dry_arrival = false;
};

} // namespace

TEST_CASE("window 2: every interleaving of up to 4 sends matches the model") {
    constexpr int max_ops = 4;
    std::size_t schedules = 0;
    std::vector<char> path;

    const auto replay = [&](const std::vector<char>& actions, int batch) {
        BufferRegistry reg;
        Fabric f(reg, LinkConfig{});
        Loop q(f);
        const auto src = f.register_mr(reg.create_buffer(64, AllocClass::page_backed), false);
        const auto dst = f.register_mr(reg.create_buffer(64, AllocClass::page_backed), true);
        ReceiveWindow w(f, q.b, static_cast<std::uint32_t>(batch));
        w.post(2);
        WindowModel m;
        m.batch = batch;
        std::uint32_t credits = 0;
        for (char a : actions) {
            if (a == 'S') {
                REQUIRE(credits > 0);
                --credits;
                f.rdma_write_imm(q.a, src.sge(0, 8), dst.base, *dst.rkey, 0);
                REQUIRE(m.posted > 0);
                --m.credits;
                --m.posted;
                ++m.pending;
            } else if (a == 'R') {
                const auto wc = f.poll_cq(f.default_recv_cq(), 1);
                REQUIRE(wc.size() == 1);
                REQUIRE(wc[0].status == WcStatus::ok);
                w.on_receive_completion();
                --m.pending;
                if (++m.owed == m.batch) {
                    m.posted += m.owed;
                    m.granted += m.owed;
                    m.owed = 0;
                }
            } else {
                credits += f.take_returned_credits(q.a);
                m.credits += m.granted;
                m.granted = 0;
            }
            REQUIRE(static_cast<int>(credits) == m.credits);
            REQUIRE(static_cast<int>(f.posted_recvs(q.b)) == m.posted);
        }
        CHECK(f.stats().receiver_not_ready == 0);
        CHECK(f.cq_stats(f.default_recv_cq()).overflow_count == 0);
    };

    for (int batch : {1, 2}) {
        std::function<void(WindowModel)> explore = [&](WindowModel m) {
            ++schedules;
            replay(path, batch);
            if (m.credits > 0 && m.sent < max_ops) {
                WindowModel n = m;
                if (n.posted == 0) n.dry_arrival = true;
                CHECK_FALSE(n.dry_arrival);
                --n.credits;
                --n.posted;
                ++n.pending;
                ++n.sent;
                path.push_back('S');
                explore(n);
                path.pop_back();
            }
            if (m.pending > 0) {
                WindowModel n = m;
                --n.pending;
                if (++n.owed == n.batch) {
                    n.posted += n.owed;
                    n.granted += n.owed;
                    n.owed = 0;
                }
                path.push_back('R');
                explore(n);
                path.pop_back();
            }
            if (m.granted > 0) {
                WindowModel n = m;
                n.credits += n.granted;
                n.granted = 0;
                path.push_back('G');
                explore(n);
                path.pop_back();
            }
        };
        WindowModel start;
        start.batch = batch;
        explore(start);
    }
    CHECK(schedules > 100);
}

TEST_CASE("random schedules keep the credit invariants") {
    for (std::uint64_t seed = 1; seed <= 40; ++seed) {
        const auto r = workloads::run_random_schedule(seed, 2000);
        CAPTURE(seed);
        CHECK(r.cq_depth >= 2);
        CHECK(r.cq_depth <= 16);
        CHECK(r.window >= 1);
        CHECK(r.window <= 8);
        CHECK(r.max_credits <= r.cq_depth);
        CHECK(r.max_in_flight_seen <= r.max_credits);
        CHECK(r.overflow_count == 0);
        CHECK(r.receiver_not_ready == 0);
        CHECK(r.invariant_violations == 0);
        CHECK(r.final_in_flight == 0);
        CHECK(r.completed == r.ops);
    }
}

TEST_CASE("a seed reproduces its schedule") {
    const auto a = workloads::run_random_schedule(77, 3000);
    const auto b = workloads::run_random_schedule(77, 3000);
    CHECK(a.cq_depth == b.cq_depth);
    CHECK(a.window == b.window);
    CHECK(a.ops == b.ops);
    CHECK(a.stalls == b.stalls);
}

TEST_CASE("stress configuration: many stalls, no overflow") {
    workloads::StreamConfig c;
    c.seconds = 0.3;
    c.max_credits = 4;
    c.high_watermark = 3;
    c.low_watermark = 1;
    c.opportunistic_poll = false;
    const auto r = workloads::run_stream(c);
    CHECK(r.overflow_count == 0);
    CHECK(r.receiver_not_ready == 0);
    CHECK(r.stalls > 0);
    CHECK(r.max_in_flight_seen <= 4);
    CHECK(r.in_flight_violations == 0);
    CHECK(r.min_posted_at_arrival >= 1);
}

TEST_CASE("without flow control a small CQ overflows") {
    workloads::StreamConfig c;
    c.max_ops = 2000;
    c.seconds = 0.5;
    c.cq_depth = 8;
    c.max_credits = 8;
    c.flow_control = false;
    c.opportunistic_poll = false;
    const auto r = workloads::run_stream(c);
    CHECK(r.overflow_count + r.receiver_not_ready > 0);
}
