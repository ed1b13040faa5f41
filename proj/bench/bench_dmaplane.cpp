#include <benchmark/benchmark.h>

#include "dmaplane/channel.hpp"
#include "dmaplane/fabric.hpp"
#include "dmaplane/flow_control.hpp"
#include "dmaplane/kv_pipeline.hpp"
#include "dmaplane/observability.hpp"
#include "dmaplane/ring.hpp"

using namespace dmaplane;

static void BM_EmitNoSubscriber(benchmark::State& state) {
    obs::EventBus bus;
    std::uint64_t i = 0;
    for (auto _ : state) {
        bus.emit(obs::EventKind::rdma_post, ++i, 64);
    }
    benchmark::DoNotOptimize(i);
}
BENCHMARK(BM_EmitNoSubscriber);

static void BM_EmitOneSubscriber(benchmark::State& state) {
    obs::EventBus bus;
    std::uint64_t seen = 0;
    bus.subscribe(obs::mask_of(obs::EventKind::rdma_post), [&](const obs::Event&) { ++seen; });
    for (auto _ : state) bus.emit(obs::EventKind::rdma_post, 1, 64);
    benchmark::DoNotOptimize(seen);
}
BENCHMARK(BM_EmitOneSubscriber);

static void BM_HistogramRecord(benchmark::State& state) {
    obs::LatencyHistogram h;
    std::uint64_t us = 1;
    for (auto _ : state) {
        h.record_micros(us);
        us = us * 3 % 1000003;
    }
    benchmark::DoNotOptimize(h.total());
}
BENCHMARK(BM_HistogramRecord)->Threads(1)->Threads(4);

static void BM_RingPushPop(benchmark::State& state) {
    Ring<std::uint64_t> ring(static_cast<std::size_t>(state.range(0)));
    std::uint64_t v = 0;
    for (auto _ : state) {
        ring.try_push(v);
        ring.try_pop(v);
    }
    benchmark::DoNotOptimize(v);
}
BENCHMARK(BM_RingPushPop)->Arg(8)->Arg(1024);

static void BM_CreditAcquireRelease(benchmark::State& state) {
    flow::CreditGauge g(flow::CreditConfig::with_default_watermarks(64), 64);
    for (auto _ : state) {
        g.acquire([] {});
        g.release(1);
    }
}
BENCHMARK(BM_CreditAcquireRelease);

static void BM_TagRoundTrip(benchmark::State& state) {
    std::uint32_t l = 0, c = 0;
    for (auto _ : state) {
        auto t = kv::decode_tag(kv::encode_tag(l, c));
        benchmark::DoNotOptimize(t);
        c = (c + 1) & 0xFFF;
        l = (l + (c == 0)) & 0xFFF;
    }
}
BENCHMARK(BM_TagRoundTrip);

static void BM_ChannelNoop(benchmark::State& state) {
    ChannelEngine eng;
    const auto ch = eng.create_channel(64, 64);
    for (auto _ : state) {
        eng.submit(ch, NoopOp{});
        while (eng.poll_completions(ch, 1).empty()) {
        }
    }
    eng.shutdown_channel(ch);
}
BENCHMARK(BM_ChannelNoop);

static void BM_LoopbackWrite(benchmark::State& state) {
    using namespace dmaplane::fabric;
    const auto size = static_cast<std::size_t>(state.range(0));
    BufferRegistry reg;
    Fabric f(reg, LinkConfig{});
    const auto a = f.create_qp(f.default_send_cq(), f.default_recv_cq());
    const auto b = f.create_qp(f.default_send_cq(), f.default_recv_cq());
    for (auto [qp, peer] : {std::pair{a, b}, std::pair{b, a}}) {
        f.modify_qp(qp, QpState::init);
        f.modify_qp(qp, QpState::rtr, peer);
        f.modify_qp(qp, QpState::rts);
    }
    const auto src = f.register_mr(reg.create_buffer(size, AllocClass::page_backed), false);
    const auto dst = f.register_mr(reg.create_buffer(size, AllocClass::page_backed), true);
    for (auto _ : state) {
        f.rdma_write(a, src.sge(0, size), dst.base, *dst.rkey);
        f.poll_cq(f.default_send_cq(), 1);
    }
    state.SetBytesProcessed(static_cast<std::int64_t>(state.iterations() * size));
}
BENCHMARK(BM_LoopbackWrite)->Arg(4096)->Arg(64 * 1024);

BENCHMARK_MAIN();
