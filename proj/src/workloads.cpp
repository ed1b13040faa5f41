#include "dmaplane/workloads.hpp"

#include <algorithm>
#include <cstring>
#include <deque>
#include <random>
#include <thread>

#include "dmaplane/flow_control.hpp"
#include "dmaplane/lock_order.hpp"
#include "dmaplane/placement.hpp"

namespace dmaplane::workloads {

namespace {

using Clock = std::chrono::steady_clock;

/// Two loopback QPs, `a` sending to `b`, each on the default CQs.
struct LoopbackPair {
    fabric::QpId a = 0;
    fabric::QpId b = 0;

    explicit LoopbackPair(fabric::Fabric& f) {
        a = f.create_qp(f.default_send_cq(), f.default_recv_cq());
        b = f.create_qp(f.default_send_cq(), f.default_recv_cq());
        for (auto [qp, peer] : {std::pair{a, b}, std::pair{b, a}}) {
            f.modify_qp(qp, fabric::QpState::init);
            f.modify_qp(qp, fabric::QpState::rtr, peer);
            f.modify_qp(qp, fabric::QpState::rts);
        }
    }
};

void bring_up(fabric::Fabric& f, fabric::QpId qp) {
    f.modify_qp(qp, fabric::QpState::init);
    f.modify_qp(qp, fabric::QpState::rtr);
    f.modify_qp(qp, fabric::QpState::rts);
}

} // namespace

void composed_shutdown(obs::Observability* obs, fabric::Fabric* fabric, BufferRegistry* registry) {
    if (obs) obs->detach_registry();
    if (fabric) fabric->teardown();
    if (registry) registry->shutdown();
}

// -- Sustained stream / stress -------------------------------------------------------

StreamReport run_stream(const StreamConfig& config, obs::Observability* obs) {
    if (config.message_size == 0 || config.message_size > (1u << 30)) {
        raise(ErrorCode::invalid_argument, "message size must be in 1..2^30");
    }
    StreamReport report;
    report.config = config;

    auto credit = flow::CreditConfig::with_default_watermarks(config.max_credits);
    if (config.high_watermark) credit.high_watermark = config.high_watermark;
    if (config.low_watermark) credit.low_watermark = config.low_watermark;
    const std::uint32_t window = config.window ? config.window : config.max_credits;
    const std::uint32_t refill = config.refill_batch ? config.refill_batch : std::max<std::uint32_t>(1, window / 2);
    report.config.high_watermark = credit.high_watermark;
    report.config.low_watermark = credit.low_watermark;
    report.config.window = window;
    report.config.refill_batch = refill;

    BufferRegistry registry(RegistryConfig{.observability = obs});
    fabric::FabricOptions fopts;
    fopts.send_cq_depth = config.cq_depth;
    fopts.recv_cq_depth = config.cq_depth;
    fopts.loopback_latency = config.latency;
    fopts.observability = obs;
    fopts.key_seed = static_cast<std::uint32_t>(config.seed);
    fabric::Fabric fabric(registry, fabric::LinkConfig{}, fopts);

    // Gauges validate against CQ depth before any traffic.
    flow::CreditGauge send(credit, config.cq_depth, obs, "send");
    flow::CreditGauge win(flow::CreditConfig{window, 1, 1}, config.cq_depth, obs, "window", true);

    LoopbackPair pair(fabric);
    const std::uint32_t slots = std::max<std::uint32_t>(config.max_credits, 1);
    const auto src_buf = registry.create_buffer(config.message_size, AllocClass::page_backed);
    const auto dst_buf = registry.create_buffer(config.message_size * slots, AllocClass::page_backed);
    const auto src = fabric.register_mr(src_buf, false);
    const auto dst = fabric.register_mr(dst_buf, true);
    std::memset(src.data(), 0xA5, config.message_size);

    flow::ReceiveWindow rwin(fabric, pair.b, refill);
    rwin.post(window);

    const auto start = Clock::now();
    const auto sec = std::chrono::seconds(1);
    std::vector<std::uint64_t> window_bytes;
    std::deque<Clock::time_point> post_times;
    double latency_sum_us = 0;
    std::array<fabric::WorkCompletion, 64> wcs;

    const auto poll = [&] {
        const auto n = fabric.poll_cq(fabric.default_send_cq(), wcs);
        const auto now = Clock::now();
        for (std::size_t i = 0; i < n; ++i) {
            if (wcs[i].status != fabric::WcStatus::ok) {
                ++report.error_completions;
            } else {
                report.bytes += wcs[i].byte_len;
                const auto idx = static_cast<std::size_t>((now - start) / sec);
                if (window_bytes.size() <= idx) window_bytes.resize(idx + 1, 0);
                window_bytes[idx] += wcs[i].byte_len;
            }
            if (!post_times.empty()) {
                latency_sum_us += std::chrono::duration<double, std::micro>(now - post_times.front()).count();
                post_times.pop_front();
            }
        }
        report.completed += n;
        if (n && config.flow_control) send.release(static_cast<std::uint32_t>(n));

        const auto m = fabric.poll_cq(fabric.default_recv_cq(), wcs);
        for (std::size_t i = 0; i < m; ++i) {
            if (wcs[i].status == fabric::WcStatus::ok) rwin.on_receive_completion();
        }
        const auto r = fabric.take_returned_credits(pair.a);
        if (r && config.flow_control) win.release(r);
    };

    const auto deadline = start + std::chrono::duration_cast<Clock::duration>(std::chrono::duration<double>(config.seconds));
    std::uint32_t tag = 0;
    for (;;) {
        if (config.max_ops ? report.posted >= config.max_ops : Clock::now() >= deadline) break;
        if (config.flow_control) {
            send.acquire(poll);
            win.acquire(poll);
            const auto inflight = send.in_flight();
            report.max_sampled_in_flight = std::max(report.max_sampled_in_flight, inflight);
            if (inflight > config.max_credits) ++report.in_flight_violations;
        }
        const auto slot = report.posted % slots;
        try {
            fabric.rdma_write_imm(pair.a, src.sge(0, static_cast<std::uint32_t>(config.message_size)),
                                  dst.base + slot * config.message_size, *dst.rkey, tag++ & 0x7FFF'FFFF);
        } catch (const Error& e) {
            if (e.code() != ErrorCode::invalid_state) throw;
            break; // QP went to ERROR after a failed completion
        }
        post_times.push_back(Clock::now());
        ++report.posted;
        if (config.opportunistic_poll || !config.flow_control) poll();
    }
    // Drain what is still in flight.
    const auto drain_deadline = Clock::now() + std::chrono::seconds(5);
    while (report.completed < report.posted && Clock::now() < drain_deadline) {
        poll();
        std::this_thread::yield();
    }
    report.elapsed = Clock::now() - start;

    const auto fstats = fabric.stats();
    report.overflow_count = fabric.cq_stats(fabric.default_send_cq()).overflow_count +
                            fabric.cq_stats(fabric.default_recv_cq()).overflow_count;
    report.receiver_not_ready = fstats.receiver_not_ready;
    report.stalls = send.stall_count();
    report.window_stalls = win.stall_count();
    report.max_in_flight_seen = send.max_in_flight_seen();
    report.final_in_flight = send.in_flight();
    report.min_posted_at_arrival = rwin.min_posted_at_arrival();
    report.mbps = static_cast<double>(report.bytes) / 1e6 / std::max(1e-9, std::chrono::duration<double>(report.elapsed).count());
    const auto full_seconds = static_cast<std::size_t>(report.elapsed / sec);
    for (std::size_t i = 0; i < std::min(full_seconds, window_bytes.size()); ++i) {
        report.windows.push_back(static_cast<double>(window_bytes[i]) / 1e6);
    }
    if (report.completed) report.mean_latency_us = latency_sum_us / static_cast<double>(report.completed);

    if (obs) {
        for (auto section : {obs::Section::stats, obs::Section::buffers, obs::Section::rdma, obs::Section::flow,
                             obs::Section::histogram}) {
            report.stats_text.emplace_back(section, obs->render(section));
        }
    }
    composed_shutdown(obs, &fabric, &registry);
    return report;
}

// -- Queue-depth sweep -------------------------------------------------------------

std::vector<QdRow> run_qd_sweep(const QdSweepConfig& config) {
    if (config.depths.empty()) raise(ErrorCode::invalid_argument, "qd sweep needs at least one depth");
    for (auto d : config.depths) {
        if (d == 0) raise(ErrorCode::invalid_argument, "queue depth must be positive");
        if (d > config.cq_depth) {
            raise(ErrorCode::invalid_argument,
                  "queue depth " + std::to_string(d) + " exceeds CQ depth " + std::to_string(config.cq_depth));
        }
    }
    std::vector<QdRow> rows;
    for (auto d : config.depths) {
        StreamConfig sc;
        sc.max_ops = config.ops_per_depth;
        sc.max_credits = d;
        sc.high_watermark = 1;
        sc.low_watermark = 1;
        sc.window = d;
        sc.refill_batch = 1;
        sc.message_size = config.message_size;
        sc.cq_depth = config.cq_depth;
        sc.latency = config.latency;
        sc.opportunistic_poll = true;
        const auto r = run_stream(sc);
        rows.push_back(QdRow{d, r.mbps, r.mean_latency_us, r.completed});
    }
    return rows;
}

// -- Random credit schedules -------------------------------------------------------

ScheduleResult run_random_schedule(std::uint64_t seed, std::uint64_t max_ops) {
    std::mt19937_64 rng(seed);
    const auto pick = [&](std::uint64_t lo, std::uint64_t hi) {
        return std::uniform_int_distribution<std::uint64_t>(lo, hi)(rng);
    };

    ScheduleResult res;
    res.seed = seed;
    res.cq_depth = pick(2, 16);
    res.max_credits = static_cast<std::uint32_t>(pick(1, res.cq_depth));
    res.window = static_cast<std::uint32_t>(pick(1, 8));
    res.recv_cq_depth = pick(res.window, 16);
    res.refill_batch = static_cast<std::uint32_t>(pick(1, res.window));
    res.ops = pick(1, std::max<std::uint64_t>(1, max_ops));
    const auto low = static_cast<std::uint32_t>(pick(1, res.max_credits));
    const auto high = static_cast<std::uint32_t>(pick(low, res.max_credits));

    BufferRegistry registry;
    fabric::FabricOptions fopts;
    fopts.send_cq_depth = res.cq_depth;
    fopts.recv_cq_depth = res.recv_cq_depth;
    fopts.key_seed = static_cast<std::uint32_t>(seed);
    fabric::Fabric fabric(registry, fabric::LinkConfig{}, fopts);
    flow::CreditGauge send(flow::CreditConfig{res.max_credits, high, low}, res.cq_depth);
    flow::CreditGauge win(flow::CreditConfig{res.window, 1, 1}, res.recv_cq_depth, nullptr, "window", true);
    LoopbackPair pair(fabric);

    constexpr std::uint32_t msg = 64;
    const auto src_buf = registry.create_buffer(msg, AllocClass::page_backed);
    const auto dst_buf = registry.create_buffer(msg, AllocClass::page_backed);
    const auto src = fabric.register_mr(src_buf, false);
    const auto dst = fabric.register_mr(dst_buf, true);
    flow::ReceiveWindow rwin(fabric, pair.b, res.refill_batch);
    rwin.post(res.window);

    const auto check = [&] {
        if (!(send.in_flight() <= send.max_credits() && send.max_credits() <= res.cq_depth)) {
            ++res.invariant_violations;
        }
        if (!(win.in_flight() <= win.max_credits() && win.max_credits() <= res.recv_cq_depth)) {
            ++res.invariant_violations;
        }
    };
    std::vector<fabric::WorkCompletion> wcs(16);
    const auto poll_send = [&](std::size_t max) {
        const auto n = fabric.poll_cq(fabric.default_send_cq(), std::span(wcs.data(), max));
        res.completed += n;
        if (n) send.release(static_cast<std::uint32_t>(n));
    };
    const auto poll_recv = [&](std::size_t max) {
        const auto n = fabric.poll_cq(fabric.default_recv_cq(), std::span(wcs.data(), max));
        for (std::size_t i = 0; i < n; ++i) rwin.on_receive_completion();
        if (const auto r = fabric.take_returned_credits(pair.a)) win.release(r);
    };
    // The poll callback handed to acquire() must make progress eventually,
    // so it always touches both sides, in a random order with random batch.
    const auto progress = [&] {
        if (pick(0, 1)) {
            poll_send(pick(1, 16));
            poll_recv(pick(1, 16));
        } else {
            poll_recv(pick(1, 16));
            poll_send(pick(1, 16));
        }
        check();
    };

    std::uint64_t posted = 0;
    while (posted < res.ops) {
        switch (pick(0, 3)) {
        case 0:
        case 1:
            send.acquire(progress);
            win.acquire(progress);
            check();
            fabric.rdma_write_imm(pair.a, src.sge(0, msg), dst.base, *dst.rkey, static_cast<std::uint32_t>(posted));
            ++posted;
            break;
        case 2:
            poll_send(pick(1, 16));
            break;
        default:
            poll_recv(pick(1, 16));
            break;
        }
        check();
    }
    while (res.completed < posted) {
        poll_send(16);
        poll_recv(16);
    }
    poll_recv(16);

    res.overflow_count = fabric.cq_stats(fabric.default_send_cq()).overflow_count +
                         fabric.cq_stats(fabric.default_recv_cq()).overflow_count;
    res.receiver_not_ready = fabric.stats().receiver_not_ready;
    res.final_in_flight = send.in_flight();
    res.max_in_flight_seen = send.max_in_flight_seen();
    res.stalls = send.stall_count();
    composed_shutdown(nullptr, &fabric, &registry);
    return res;
}

// -- KV transfer -------------------------------------------------------------------

KvRunResult run_kv_transfer(const KvRunConfig& config) {
    KvRunResult out;
    kv::KvLayout layout;
    layout.layer_count = config.layers;
    layout.chunk_size = config.chunk_size;
    layout.bytes_per_layer = std::uint64_t{config.chunks_per_layer} * config.chunk_size;
    layout.validate();
    const std::uint32_t refill =
        config.refill_batch ? config.refill_batch : std::max<std::uint32_t>(1, config.window / 2);

    BufferRegistry registry;
    fabric::FabricOptions fopts;
    fopts.key_seed = static_cast<std::uint32_t>(config.seed);
    fopts.send_cq_depth = std::max<std::size_t>(config.max_credits, 1);
    fopts.recv_cq_depth = std::max<std::size_t>(config.window, 1);

    std::unique_ptr<fabric::Fabric> owned_a, owned_b;
    fabric::QpId qa = 0, qb = 0;
    if (config.socket_pair) {
        std::tie(owned_a, owned_b) = fabric::Fabric::make_pair(registry, registry, fopts);
        qa = owned_a->create_qp(owned_a->default_send_cq(), owned_a->default_recv_cq());
        qb = owned_b->create_qp(owned_b->default_send_cq(), owned_b->default_recv_cq());
        bring_up(*owned_a, qa);
        bring_up(*owned_b, qb);
    } else {
        owned_a = std::make_unique<fabric::Fabric>(registry, fabric::LinkConfig{}, fopts);
        LoopbackPair pair(*owned_a);
        qa = pair.a;
        qb = pair.b;
    }
    fabric::Fabric& fa = *owned_a;
    fabric::Fabric& fb = config.socket_pair ? *owned_b : *owned_a;

    // Synthetic fill stands in for tokenization and the prefill forward pass.
    auto t0 = Clock::now();
    std::vector<std::vector<std::byte>> layers(layout.layer_count, std::vector<std::byte>(layout.bytes_per_layer));
    for (std::uint32_t l = 0; l < layout.layer_count; ++l) kv::synthetic_fill(layers[l], config.seed, l);
    out.stages.push_back({"synthetic fill (replaces tokenization + prefill)", Clock::now() - t0});

    const auto total = std::max<std::uint64_t>(layout.total_bytes(), 1);
    const auto staging_buf = registry.create_buffer(total, AllocClass::page_backed);
    const auto landing_buf = registry.create_buffer(total, AllocClass::page_backed);
    const auto staging = fa.register_mr(staging_buf, false);
    const auto landing = fb.register_mr(landing_buf, true);

    t0 = Clock::now();
    if (layout.layer_count > 0) {
        std::vector<std::span<const std::byte>> spans(layers.begin(), layers.end());
        kv::consolidate(spans, std::span(staging.data(), staging.length), layout.chunk_size);
    }
    out.stages.push_back({"KV-cache consolidation", Clock::now() - t0});

    flow::CreditGauge send_credits(flow::CreditConfig::with_default_watermarks(config.max_credits),
                                   fopts.send_cq_depth);
    flow::CreditGauge window_credits(flow::CreditConfig{config.window, 1, 1}, fopts.recv_cq_depth, nullptr, "window",
                                     true);
    flow::ReceiveWindow rwin(fb, qb, refill);
    rwin.post(config.window);
    fb.advertise_mr(landing);
    const auto remote = fa.wait_remote_mr(std::chrono::seconds(5));
    if (!remote) raise(ErrorCode::aborted, "landing zone advertisement never arrived");

    std::optional<kv::ReceiveResult> received;
    std::thread receiver([&] {
        try {
            received = kv::receive_kv(fb, qb, layout, landing, rwin, config.send.timeout);
        } catch (const kv::TransferError& e) {
            out.receiver_error = e.code();
            out.error_message = e.what();
            out.error_tags = e.tags();
        } catch (const Error& e) {
            out.receiver_error = e.code();
            out.error_message = e.what();
        }
    });
    try {
        out.send = kv::send_kv(fa, qa, layout, staging, *remote, send_credits, window_credits, config.send);
    } catch (const kv::TransferError& e) {
        out.sender_error = e.code();
        if (out.error_message.empty()) out.error_message = e.what();
        if (out.error_tags.empty()) out.error_tags = e.tags();
    } catch (const Error& e) {
        out.sender_error = e.code();
        if (out.error_message.empty()) out.error_message = e.what();
    }
    if (out.sender_error) {
        // The receiver would otherwise wait for a sentinel that never comes.
        fa.teardown();
        if (&fb != &fa) fb.teardown();
    }
    receiver.join();

    for (auto& s : out.send.stages) out.stages.push_back(s);
    if (received) {
        for (auto& s : received->stages) out.stages.push_back(s);
        out.receive_completions = received->receive_completions;
        out.views = received->views;
        const auto* land = landing.data();
        out.bytes_match = std::memcmp(land, staging.data(), layout.total_bytes()) == 0;
        out.views_match = out.views.size() == layout.layer_count;
        for (const auto& v : out.views) {
            out.views_match = out.views_match && v.length == layers[v.layer_index].size() &&
                              std::memcmp(land + v.offset, layers[v.layer_index].data(), v.length) == 0;
        }
    }
    out.slots_consumed = rwin.consumed();
    out.min_posted_at_arrival = rwin.min_posted_at_arrival();
    if (!fa.torn_down()) {
        out.overflow_count = fa.cq_stats(fa.default_send_cq()).overflow_count +
                             fb.cq_stats(fb.default_recv_cq()).overflow_count;
        out.receiver_not_ready = fa.stats().receiver_not_ready + (&fb != &fa ? fb.stats().receiver_not_ready : 0);
    }
    if (owned_b) owned_b->teardown();
    composed_shutdown(nullptr, owned_a.get(), &registry);
    return out;
}

// -- Selftest --------------------------------------------------------------------

std::vector<CheckResult> run_selftest(std::uint64_t seed) {
    std::vector<CheckResult> checks;
    const auto add = [&](std::string name, bool ok, std::string detail = {}) {
        checks.push_back({std::move(name), ok, std::move(detail)});
    };
    const auto guarded = [&](const std::string& name, const std::function<void()>& body) {
        try {
            body();
        } catch (const std::exception& e) {
            add(name, false, std::string("exception: ") + e.what());
        }
    };

    guarded("tag-bijection", [&] {
        std::size_t bad = 0;
        for (std::uint32_t l = 0; l < 256; ++l) {
            for (std::uint32_t c = 0; c < 256; ++c) {
                const auto t = kv::decode_tag(kv::encode_tag(l, c));
                bad += !t || t->layer != l || t->chunk != c;
            }
        }
        bad += kv::decode_tag(kv::sentinel_tag).has_value();
        add("tag-bijection", bad == 0, std::to_string(bad) + " mismatches");
    });

    guarded("lock-order", [&] {
        std::size_t wrong = 0;
        for (int mask = 1; mask < 16; ++mask) {
            std::vector<int> levels;
            for (int l = 0; l < 4; ++l) {
                if (mask & (1 << l)) levels.push_back(l);
            }
            do {
                LockOrderValidator v;
                bool violated = false;
                for (int l : levels) violated |= v.check_acquire(static_cast<LockLevel>(l)).has_value();
                wrong += violated != !std::is_sorted(levels.begin(), levels.end());
            } while (std::next_permutation(levels.begin(), levels.end()));
        }
        add("lock-order", wrong == 0, std::to_string(wrong) + " misjudged orderings");
    });

    guarded("qp-flush", [&] {
        std::size_t bad = 0;
        for (std::uint32_t n = 0; n <= 32; ++n) {
            BufferRegistry reg;
            fabric::Fabric f(reg, fabric::LinkConfig{});
            LoopbackPair pair(f);
            const auto buf = reg.create_buffer(64, AllocClass::page_backed);
            const auto mr = f.register_mr(buf, true);
            f.hold_delivery(true);
            for (std::uint32_t i = 0; i < n; ++i) f.rdma_write(pair.a, mr.sge(0, 64), mr.base, *mr.rkey);
            f.modify_qp(pair.a, fabric::QpState::error);
            std::size_t flushed = 0;
            for (const auto& wc : f.poll_cq(f.default_send_cq(), 64)) flushed += wc.status == fabric::WcStatus::flushed;
            bad += flushed != n;
            composed_shutdown(nullptr, &f, &reg);
        }
        add("qp-flush", bad == 0, std::to_string(bad) + " counts off");
    });

    guarded("credit-schedules", [&] {
        std::size_t bad = 0;
        for (std::uint64_t s = 0; s < 20; ++s) {
            const auto r = run_random_schedule(seed + s, 2000);
            bad += r.invariant_violations || r.overflow_count || r.receiver_not_ready || r.final_in_flight;
        }
        add("credit-schedules", bad == 0, std::to_string(bad) + " of 20 schedules failed");
    });

    guarded("kv-transfer", [&] {
        KvRunConfig c;
        c.seed = seed;
        c.chunk_size = 4096;
        const auto r = run_kv_transfer(c);
        const bool ok = !r.sender_error && !r.receiver_error && r.bytes_match && r.views_match &&
                        r.receive_completions == std::uint64_t{c.layers} * c.chunks_per_layer + 1;
        add("kv-transfer", ok, ok ? "bytes-match" : r.error_message);
    });

    guarded("teardown-order", [&] {
        obs::Observability o;
        obs::EventLog log;
        log.attach(o.events(), obs::mask_of(obs::EventKind::teardown));
        BufferRegistry reg(RegistryConfig{.observability = &o});
        fabric::FabricOptions fo;
        fo.observability = &o;
        fabric::Fabric f(reg, fabric::LinkConfig{}, fo);
        composed_shutdown(&o, &f, &reg);
        std::vector<obs::TeardownStage> stages;
        for (const auto& e : log.events()) stages.push_back(e.stage);
        const bool ok = stages == std::vector<obs::TeardownStage>{obs::TeardownStage::observability_detach,
                                                                  obs::TeardownStage::fabric,
                                                                  obs::TeardownStage::registry};
        add("teardown-order", ok);
    });

    guarded("placement-fallback", [&] {
        BufferRegistry reg;
        placement::Topology t = placement::parse_topology("nodes=2; distance=10,21;21,10");
        placement::SimulatedPlacement sim;
        placement::Placer placer(reg, t, sim);
        bool ok = true;
        for (NodeId n = 0; n < 2; ++n) {
            for (int inject = -1; inject < 2; ++inject) {
                const auto a = placer.alloc_on_node(4096, n, inject < 0 ? std::nullopt : std::optional<NodeId>(inject));
                const NodeId expect = inject < 0 ? n : inject;
                ok = ok && a.report.actual == expect && a.report.fell_back == (expect != n);
            }
        }
        ok = ok && placer.silent_fallbacks() == 0;
        add("placement-fallback", ok);
    });

    guarded("histogram", [&] {
        obs::LatencyHistogram h;
        std::vector<std::thread> threads;
        for (int t = 0; t < 4; ++t) {
            threads.emplace_back([&h, t] {
                for (int i = 0; i < 10'000; ++i) h.record_micros(static_cast<std::uint64_t>(i * (t + 1)));
            });
        }
        for (auto& th : threads) th.join();
        add("histogram", h.total() == 40'000, std::to_string(h.total()) + " of 40000");
    });

    return checks;
}

} // namespace dmaplane::workloads
