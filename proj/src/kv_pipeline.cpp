#include "dmaplane/kv_pipeline.hpp"

#include <algorithm>
#include <cstring>
#include <deque>
#include <thread>

#include "dmaplane/wire.hpp"

namespace dmaplane::kv {

namespace {

using Clock = std::chrono::steady_clock;

constexpr std::array<std::byte, 4> descriptor_magic{std::byte{'K'}, std::byte{'V'}, std::byte{'D'}, std::byte{'1'}};

std::string tag_list(const std::vector<ChunkTag>& tags) {
    std::string out;
    for (std::size_t i = 0; i < tags.size(); ++i) {
        if (i) out += ' ';
        if (i == 16) {
            out += "... (" + std::to_string(tags.size()) + " total)";
            break;
        }
        out += to_string(tags[i]);
    }
    return out;
}

} // namespace

std::uint32_t encode_tag(std::uint32_t layer, std::uint32_t chunk) {
    if (layer >= reserved_index || chunk >= reserved_index) {
        raise(ErrorCode::invalid_argument, "tag fields must be below 0xFFFF (layer " + std::to_string(layer) +
                                               ", chunk " + std::to_string(chunk) + ")");
    }
    return (layer << 16) | chunk;
}

std::optional<ChunkTag> decode_tag(std::uint32_t imm) noexcept {
    if (imm == sentinel_tag) return std::nullopt;
    return ChunkTag{static_cast<std::uint16_t>(imm >> 16), static_cast<std::uint16_t>(imm & 0xFFFFu)};
}

std::string to_string(ChunkTag tag) {
    return "(" + std::to_string(tag.layer) + "," + std::to_string(tag.chunk) + ")";
}

// -- Layout ---------------------------------------------------------------------

std::uint32_t KvLayout::chunks_per_layer() const noexcept {
    if (chunk_size == 0) return 0;
    return static_cast<std::uint32_t>((bytes_per_layer + chunk_size - 1) / chunk_size);
}

std::uint64_t KvLayout::chunk_offset(std::uint32_t layer, std::uint32_t chunk) const noexcept {
    return std::uint64_t{layer} * bytes_per_layer + std::uint64_t{chunk} * chunk_size;
}

std::uint32_t KvLayout::chunk_length(std::uint32_t chunk) const noexcept {
    const auto start = std::uint64_t{chunk} * chunk_size;
    return static_cast<std::uint32_t>(std::min<std::uint64_t>(chunk_size, bytes_per_layer - start));
}

ChunkTag KvLayout::tag_of(std::uint32_t global) const noexcept {
    const auto cpl = chunks_per_layer();
    return ChunkTag{static_cast<std::uint16_t>(global / cpl), static_cast<std::uint16_t>(global % cpl)};
}

void KvLayout::validate() const {
    if (chunk_size == 0) raise(ErrorCode::invalid_argument, "chunk_size must be positive");
    if (layer_count >= reserved_index) raise(ErrorCode::invalid_argument, "layer_count must be below 65535");
    if (layer_count > 0 && bytes_per_layer == 0) raise(ErrorCode::invalid_argument, "bytes_per_layer must be positive");
    if (chunks_per_layer() >= reserved_index) {
        raise(ErrorCode::invalid_argument, "too many chunks per layer; raise chunk_size");
    }
}

KvLayout consolidate(std::span<const std::span<const std::byte>> layers, std::span<std::byte> staging,
                     std::uint32_t chunk_size) {
    if (layers.empty()) raise(ErrorCode::invalid_argument, "consolidate needs at least one layer");
    const auto per_layer = layers.front().size();
    for (const auto& l : layers) {
        if (l.size() != per_layer) raise(ErrorCode::invalid_argument, "layers must all have the same size");
    }
    KvLayout layout;
    layout.layer_count = static_cast<std::uint32_t>(layers.size());
    layout.bytes_per_layer = per_layer;
    layout.chunk_size = chunk_size;
    layout.validate();
    if (staging.size() < layout.total_bytes()) {
        raise(ErrorCode::invalid_argument, "staging buffer too small: need " + std::to_string(layout.total_bytes()) +
                                               " bytes, have " + std::to_string(staging.size()));
    }
    for (std::size_t i = 0; i < layers.size(); ++i) {
        std::memcpy(staging.data() + i * per_layer, layers[i].data(), per_layer);
    }
    return layout;
}

// -- Arrival bitmap and views ---------------------------------------------------------

bool ArrivalBitmap::mark(std::uint32_t index) {
    if (seen_.at(index)) return false;
    seen_[index] = true;
    ++count_;
    return true;
}

std::vector<std::uint32_t> ArrivalBitmap::missing() const {
    std::vector<std::uint32_t> out;
    for (std::uint32_t i = 0; i < seen_.size(); ++i) {
        if (!seen_[i]) out.push_back(i);
    }
    return out;
}

std::vector<LayerView> layer_views(const KvLayout& layout) {
    std::vector<LayerView> views;
    views.reserve(layout.layer_count);
    for (std::uint32_t l = 0; l < layout.layer_count; ++l) {
        views.push_back(LayerView{l, std::uint64_t{l} * layout.bytes_per_layer, layout.bytes_per_layer});
    }
    return views;
}

double TransferStats::mbps() const noexcept {
    const double secs = std::chrono::duration<double>(elapsed).count();
    return secs > 0 ? static_cast<double>(bytes) / 1e6 / secs : 0.0;
}

// -- Sender -----------------------------------------------------------------------

TransferStats send_kv(fabric::Fabric& fabric, fabric::QpId qp, const KvLayout& layout,
                      const fabric::MemoryRegion& staging, const fabric::RemoteMr& landing,
                      flow::CreditGauge& send_credits, flow::CreditGauge& window_credits, const SendOptions& options) {
    layout.validate();
    const auto total = layout.total_bytes();
    if (staging.length < total) {
        raise(ErrorCode::invalid_argument, "staging MR holds " + std::to_string(staging.length) + " of " +
                                               std::to_string(total) + " bytes");
    }
    if (landing.length < total) {
        raise(ErrorCode::invalid_argument, "landing zone is " + std::to_string(total - landing.length) +
                                               " bytes short of " + std::to_string(total));
    }

    const auto start = Clock::now();
    const auto deadline = start + options.timeout;
    const auto send_stalls0 = send_credits.stall_count();
    const auto window_stalls0 = window_credits.stall_count();

    struct Outstanding {
        std::uint64_t seq;
        std::optional<std::uint32_t> chunk; // nullopt for the sentinel
    };
    std::deque<Outstanding> outstanding;
    std::uint64_t granted = 0;
    std::uint64_t posted = 0;
    bool sentinel_done = false;

    TransferStats stats;
    std::array<fabric::WorkCompletion, 64> wcs;
    const auto poll = [&] {
        const auto n = fabric.poll_cq(fabric.default_send_cq(), wcs);
        for (std::size_t i = 0; i < n; ++i) {
            const auto& wc = wcs[i];
            auto it = std::find_if(outstanding.begin(), outstanding.end(),
                                   [&](const Outstanding& o) { return o.seq == wc.wr_seq; });
            if (it == outstanding.end()) continue;
            const auto chunk = it->chunk;
            outstanding.erase(it);
            send_credits.release(1);
            if (wc.status != fabric::WcStatus::ok) {
                std::vector<ChunkTag> tags;
                std::string what = "sentinel";
                if (chunk) {
                    tags.push_back(layout.tag_of(*chunk));
                    what = "chunk " + to_string(tags.back());
                }
                std::string msg = what + " failed with " + std::string(fabric::to_string(wc.status));
                if (wc.status == fabric::WcStatus::receiver_not_ready) msg += " (flow-control breach)";
                throw TransferError(ErrorCode::aborted, msg, std::move(tags), wc.status);
            }
            if (!chunk) sentinel_done = true;
        }
        if (const auto r = fabric.take_returned_credits(qp)) {
            granted += r;
            window_credits.release(r);
        }
        if (Clock::now() > deadline) raise(ErrorCode::aborted, "transfer timed out");
    };

    const auto post = [&](std::optional<std::uint32_t> chunk) {
        send_credits.acquire(poll, options.abort);
        window_credits.acquire(poll, options.abort);
        if (outstanding.size() + 1 > send_credits.max_credits() || posted + 1 > granted) ++stats.bound_violations;
        std::uint64_t seq;
        if (chunk) {
            const auto tag = layout.tag_of(*chunk);
            const auto off = layout.chunk_offset(tag.layer, tag.chunk);
            seq = fabric.rdma_write_imm(qp, staging.sge(off, layout.chunk_length(tag.chunk)), landing.base + off,
                                        landing.rkey, encode_tag(tag.layer, tag.chunk));
        } else {
            seq = fabric.rdma_write_imm(qp, staging.sge(0, 0), landing.base, landing.rkey, sentinel_tag);
        }
        ++posted;
        outstanding.push_back({seq, chunk});
        stats.max_outstanding = std::max<std::uint32_t>(stats.max_outstanding, outstanding.size());
    };

    for (std::uint32_t i = 0; i < layout.total_chunks(); ++i) {
        if (options.drop_chunk == i) continue;
        const int reps = options.duplicate_chunk == i ? 2 : 1;
        for (int r = 0; r < reps; ++r) {
            post(i);
            ++stats.chunks;
            stats.bytes += layout.chunk_length(layout.tag_of(i).chunk);
        }
    }
    // Every data chunk is known to be placed before the sentinel goes out.
    while (!outstanding.empty()) {
        poll();
        if (!outstanding.empty()) std::this_thread::yield();
    }
    post(std::nullopt);
    while (!sentinel_done) {
        poll();
        if (!sentinel_done) std::this_thread::yield();
    }

    stats.elapsed = Clock::now() - start;
    stats.send_stalls = send_credits.stall_count() - send_stalls0;
    stats.window_stalls = window_credits.stall_count() - window_stalls0;
    stats.stages.push_back({"KV-cache transfer", stats.elapsed});
    return stats;
}

// -- Receiver ---------------------------------------------------------------------

ReceiveResult receive_kv(fabric::Fabric& fabric, fabric::QpId qp, const KvLayout& layout,
                         const fabric::MemoryRegion& landing, flow::ReceiveWindow& window,
                         std::chrono::milliseconds timeout) {
    (void)qp;
    layout.validate();
    if (landing.length < layout.total_bytes()) {
        raise(ErrorCode::invalid_argument, "landing MR smaller than the layout");
    }
    const auto start = Clock::now();
    const auto deadline = start + timeout;
    ReceiveResult result{ArrivalBitmap(layout.total_chunks()), {}, 0, {}, {}};
    const auto cpl = layout.chunks_per_layer();

    std::array<fabric::WorkCompletion, 64> wcs;
    for (;;) {
        const auto n = fabric.poll_cq(fabric.default_recv_cq(), wcs);
        if (n == 0) {
            if (Clock::now() > deadline) raise(ErrorCode::aborted, "receive timed out");
            std::this_thread::yield();
            continue;
        }
        for (std::size_t i = 0; i < n; ++i) {
            const auto& wc = wcs[i];
            if (wc.status != fabric::WcStatus::ok) {
                throw TransferError(ErrorCode::aborted,
                                    "receive completion failed with " + std::string(fabric::to_string(wc.status)),
                                    {}, wc.status);
            }
            window.on_receive_completion();
            ++result.receive_completions;
            if (wc.opcode != fabric::WcOpcode::write_imm_recv || !wc.imm) {
                raise(ErrorCode::protocol_error, "receive completion without an immediate value");
            }
            const auto tag = decode_tag(*wc.imm);
            if (!tag) {
                if (!result.bitmap.complete()) {
                    std::vector<ChunkTag> tags;
                    for (auto g : result.bitmap.missing()) tags.push_back(layout.tag_of(g));
                    throw TransferError(ErrorCode::missing_chunks, "missing chunks: " + tag_list(tags), tags);
                }
                const auto t0 = Clock::now();
                result.views = layer_views(layout);
                result.stages.push_back({"KV-cache reconstruction", Clock::now() - t0});
                result.elapsed = Clock::now() - start;
                return result;
            }
            if (tag->layer >= layout.layer_count || tag->chunk >= cpl) {
                throw TransferError(ErrorCode::protocol_error, "chunk " + to_string(*tag) + " outside layout",
                                    {*tag});
            }
            if (!result.bitmap.mark(layout.global_index(*tag))) {
                throw TransferError(ErrorCode::duplicate_chunk, "duplicate chunk " + to_string(*tag), {*tag});
            }
        }
    }
}

// -- Descriptor and synthetic data ---------------------------------------------------

std::array<std::byte, descriptor_size> encode_descriptor(const Descriptor& d) {
    std::array<std::byte, descriptor_size> out{};
    std::copy(descriptor_magic.begin(), descriptor_magic.end(), out.begin());
    wire::put_u32(out.data() + 4, d.layout.layer_count);
    wire::put_u32(out.data() + 8, d.layout.chunk_size);
    wire::put_u32(out.data() + 12, d.window);
    wire::put_u64(out.data() + 16, d.layout.bytes_per_layer);
    wire::put_u64(out.data() + 24, d.seed);
    return out;
}

Descriptor decode_descriptor(std::span<const std::byte> bytes) {
    if (bytes.size() < descriptor_size || !std::equal(descriptor_magic.begin(), descriptor_magic.end(), bytes.data())) {
        raise(ErrorCode::protocol_error, "bad transfer descriptor");
    }
    Descriptor d;
    d.layout.layer_count = wire::get_u32(bytes.data() + 4);
    d.layout.chunk_size = wire::get_u32(bytes.data() + 8);
    d.window = wire::get_u32(bytes.data() + 12);
    d.layout.bytes_per_layer = wire::get_u64(bytes.data() + 16);
    d.seed = wire::get_u64(bytes.data() + 24);
    d.layout.validate();
    return d;
}

void synthetic_fill(std::span<std::byte> out, std::uint64_t seed, std::uint32_t layer) {
    // splitmix64 stream keyed by (seed, layer)
    std::uint64_t state = seed ^ (0x9E3779B97F4A7C15ull * (std::uint64_t{layer} + 1));
    std::size_t i = 0;
    while (i < out.size()) {
        state += 0x9E3779B97F4A7C15ull;
        std::uint64_t z = state;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        z ^= z >> 31;
        for (int b = 0; b < 8 && i < out.size(); ++b, ++i) out[i] = static_cast<std::byte>(z >> (8 * b));
    }
}

} // namespace dmaplane::kv
