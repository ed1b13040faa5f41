#include "demo.hpp"

#include <cstdio>
#include <cstring>
#include <thread>

#include "dmaplane/error.hpp"
#include "dmaplane/fabric.hpp"
#include "dmaplane/flow_control.hpp"
#include "dmaplane/kv_pipeline.hpp"
#include "dmaplane/observability.hpp"
#include "dmaplane/registry.hpp"
#include "dmaplane/workloads.hpp"

namespace dmaplane::cli {

namespace {

using Clock = std::chrono::steady_clock;

/// Immediate that announces the transfer descriptor. Layer 0xFFFF is
/// reserved, so it cannot be mistaken for a chunk.
constexpr std::uint32_t descriptor_imm = 0xFFFF'FFFEu;

double ms(std::chrono::nanoseconds d) {
    return std::chrono::duration<double, std::milli>(d).count();
}

void bring_up(fabric::Fabric& f, fabric::QpId qp) {
    f.modify_qp(qp, fabric::QpState::init);
    f.modify_qp(qp, fabric::QpState::rtr);
    f.modify_qp(qp, fabric::QpState::rts);
}

fabric::WorkCompletion wait_one(fabric::Fabric& f, fabric::CqId cq, std::chrono::milliseconds timeout,
                                const char* what) {
    const auto deadline = Clock::now() + timeout;
    for (;;) {
        auto wcs = f.poll_cq(cq, 1);
        if (!wcs.empty()) return wcs.front();
        if (Clock::now() > deadline) raise(ErrorCode::aborted, std::string("timed out waiting for ") + what);
        std::this_thread::sleep_for(std::chrono::microseconds(50));
    }
}

void add_stage(Report& r, const kv::StageTiming& s) {
    r.add("stage " + s.name, fmt::format("{:.3f} ms", ms(s.elapsed)));
}

} // namespace

Endpoint parse_endpoint(const std::string& text, const std::string& default_host) {
    const auto colon = text.rfind(':');
    if (colon == std::string::npos) raise(ErrorCode::invalid_argument, "expected host:port, got '" + text + "'");
    Endpoint e;
    e.host = colon == 0 ? default_host : text.substr(0, colon);
    const auto port_text = text.substr(colon + 1);
    try {
        std::size_t used = 0;
        const auto port = std::stoul(port_text, &used);
        if (used != port_text.size() || port > 65535) throw std::out_of_range("port");
        e.port = static_cast<std::uint16_t>(port);
    } catch (const std::exception&) {
        raise(ErrorCode::invalid_argument, "bad port in '" + text + "'");
    }
    return e;
}

int demo_recv(const DemoRecvOptions& options, Format format) {
    fabric::Listener listener(options.listen.port, options.listen.host);
    std::printf("listening: %s:%u\n", options.listen.host.c_str(), listener.port());
    std::fflush(stdout);
    const int fd = listener.accept(options.timeout);

    obs::Observability obs;
    BufferRegistry registry(RegistryConfig{.observability = &obs});
    fabric::FabricOptions fopts;
    fopts.observability = &obs;
    fabric::Fabric fabric(registry, fabric::LinkConfig{fabric::TransportKind::stream, {}, 0, fd}, fopts);
    const auto qp = fabric.create_qp(fabric.default_send_cq(), fabric.default_recv_cq());
    bring_up(fabric, qp);

    // Descriptor handshake: one slot, then tell the sender where to write.
    const auto hdr_buf = registry.create_buffer(kv::descriptor_size, AllocClass::coherent);
    const auto hdr = fabric.register_mr(hdr_buf, true);
    fabric.post_recv(qp, {});
    fabric.advertise_mr(hdr);
    const auto first = wait_one(fabric, fabric.default_recv_cq(), options.timeout, "transfer descriptor");
    if (first.status != fabric::WcStatus::ok || first.imm != descriptor_imm) {
        raise(ErrorCode::protocol_error, "expected a transfer descriptor");
    }
    const auto desc = kv::decode_descriptor(std::span<const std::byte>(hdr.data(), kv::descriptor_size));
    const auto& layout = desc.layout;
    if (desc.window == 0 || desc.window > fopts.recv_cq_depth) {
        raise(ErrorCode::invalid_argument, "window must be in 1.." + std::to_string(fopts.recv_cq_depth));
    }

    const auto landing_buf = registry.create_buffer(std::max<std::uint64_t>(layout.total_bytes(), 1),
                                                    AllocClass::page_backed);
    const auto landing = fabric.register_mr(landing_buf, true);
    flow::ReceiveWindow window(fabric, qp, std::max<std::uint32_t>(1, desc.window / 2));
    window.post(desc.window);
    fabric.advertise_mr(landing);

    const auto result = kv::receive_kv(fabric, qp, layout, landing, window, options.timeout);

    // Regenerate the sender's synthetic layers and compare view by view.
    bool match = true;
    std::vector<std::byte> expect(layout.bytes_per_layer);
    for (const auto& v : result.views) {
        kv::synthetic_fill(expect, desc.seed, v.layer_index);
        match = match && std::memcmp(landing.data() + v.offset, expect.data(), v.length) == 0;
    }

    Report r(format);
    r.add("role", "recv");
    r.add("listen", fmt::format("{}:{}", options.listen.host, listener.port()));
    r.add("seed", desc.seed);
    r.add("layers", layout.layer_count);
    r.add("bytes_per_layer", layout.bytes_per_layer);
    r.add("chunk_size", layout.chunk_size);
    r.add("window", desc.window);
    r.add("refill_batch", window.refill_batch());
    r.add("chunks", result.bitmap.seen_count());
    r.add("receive_completions", result.receive_completions);
    r.add("slots_consumed", window.consumed());
    for (const auto& s : result.stages) add_stage(r, s);
    r.add("elapsed_ms", fmt::format("{:.3f}", ms(result.elapsed)));
    r.line(fmt::format("complete: {} layers, {} chunks, {}", layout.layer_count, result.bitmap.seen_count(),
                       match ? "bytes-match" : "bytes-mismatch"));
    std::fputs(r.render().c_str(), stdout);

    workloads::composed_shutdown(&obs, &fabric, &registry);
    return match ? 0 : 1;
}

int demo_send(const DemoSendOptions& options, Format format) {
    kv::KvLayout layout;
    layout.layer_count = options.layers;
    layout.chunk_size = options.chunk_size;
    layout.bytes_per_layer = std::uint64_t{options.chunks_per_layer} * options.chunk_size;
    layout.validate();
    if (layout.layer_count == 0) raise(ErrorCode::invalid_argument, "layers must be positive");

    obs::Observability obs;
    BufferRegistry registry(RegistryConfig{.observability = &obs});
    fabric::FabricOptions fopts;
    fopts.observability = &obs;
    fabric::Fabric fabric(registry,
                          fabric::LinkConfig{fabric::TransportKind::stream, options.peer.host, options.peer.port, -1},
                          fopts);
    const auto qp = fabric.create_qp(fabric.default_send_cq(), fabric.default_recv_cq());
    bring_up(fabric, qp);

    flow::CreditGauge send_credits(flow::CreditConfig::with_default_watermarks(options.max_credits),
                                   fopts.send_cq_depth, &obs, "send");
    flow::CreditGauge window_credits(flow::CreditConfig{options.window, 1, 1}, options.window, &obs, "window", true);

    const auto hdr_remote = fabric.wait_remote_mr(options.timeout);
    if (!hdr_remote) raise(ErrorCode::aborted, "receiver never advertised its descriptor slot");

    std::vector<kv::StageTiming> stages;
    auto t0 = Clock::now();
    std::vector<std::vector<std::byte>> layers(layout.layer_count, std::vector<std::byte>(layout.bytes_per_layer));
    for (std::uint32_t l = 0; l < layout.layer_count; ++l) kv::synthetic_fill(layers[l], options.seed, l);
    stages.push_back({"synthetic fill (replaces tokenization + prefill)", Clock::now() - t0});

    const auto staging_buf = registry.create_buffer(layout.total_bytes(), AllocClass::page_backed);
    const auto staging = fabric.register_mr(staging_buf, false);
    t0 = Clock::now();
    std::vector<std::span<const std::byte>> spans(layers.begin(), layers.end());
    kv::consolidate(spans, std::span(staging.data(), staging.length), layout.chunk_size);
    stages.push_back({"KV-cache consolidation", Clock::now() - t0});

    const auto desc_buf = registry.create_buffer(kv::descriptor_size, AllocClass::coherent);
    const auto desc_mr = fabric.register_mr(desc_buf, false);
    const auto desc = kv::encode_descriptor(kv::Descriptor{layout, options.seed, options.window});
    std::memcpy(desc_mr.data(), desc.data(), desc.size());
    fabric.rdma_write_imm(qp, desc_mr.sge(0, kv::descriptor_size), hdr_remote->base, hdr_remote->rkey, descriptor_imm);
    if (wait_one(fabric, fabric.default_send_cq(), options.timeout, "descriptor completion").status !=
        fabric::WcStatus::ok) {
        raise(ErrorCode::aborted, "descriptor write failed");
    }

    const auto landing = fabric.wait_remote_mr(options.timeout);
    if (!landing) raise(ErrorCode::aborted, "receiver never advertised its landing zone");

    kv::SendOptions so;
    so.timeout = options.timeout;
    const auto stats = kv::send_kv(fabric, qp, layout, staging, *landing, send_credits, window_credits, so);
    for (const auto& s : stats.stages) stages.push_back(s);

    Report r(format);
    r.add("role", "send");
    r.add("peer", fmt::format("{}:{}", options.peer.host, options.peer.port));
    r.add("seed", options.seed);
    r.add("layers", layout.layer_count);
    r.add("chunks_per_layer", layout.chunks_per_layer());
    r.add("chunk_size", layout.chunk_size);
    r.add("max_credits", options.max_credits);
    r.add("window", options.window);
    r.add("chunks", stats.chunks);
    r.add("bytes", stats.bytes);
    for (const auto& s : stages) add_stage(r, s);
    r.add("elapsed_ms", fmt::format("{:.3f}", ms(stats.elapsed)));
    r.add("stalls", stats.send_stalls + stats.window_stalls);
    r.add("max_outstanding", stats.max_outstanding);
    r.add("mbps", fmt::format("{:.1f}", stats.mbps()));
    std::fputs(r.render().c_str(), stdout);

    workloads::composed_shutdown(&obs, &fabric, &registry);
    return 0;
}

} // namespace dmaplane::cli
