#pragma once

#include <array>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dmaplane/error.hpp"
#include "dmaplane/fabric.hpp"
#include "dmaplane/flow_control.hpp"

namespace dmaplane::kv {

inline constexpr std::uint32_t sentinel_tag = 0xFFFF'FFFFu;
inline constexpr std::uint32_t reserved_index = 0xFFFFu;
inline constexpr std::size_t default_chunk_size = 64 * 1024;

struct ChunkTag {
    std::uint16_t layer = 0;
    std::uint16_t chunk = 0;
    friend bool operator==(const ChunkTag&, const ChunkTag&) = default;
};

/// Layer in the high 16 bits, chunk in the low 16. Index 0xFFFF is reserved
/// so no valid tag can equal the sentinel.
std::uint32_t encode_tag(std::uint32_t layer, std::uint32_t chunk);
/// nullopt for the sentinel.
std::optional<ChunkTag> decode_tag(std::uint32_t imm) noexcept;
std::string to_string(ChunkTag tag);

struct KvLayout {
    std::uint32_t layer_count = 0;
    std::uint64_t bytes_per_layer = 0;
    std::uint32_t chunk_size = static_cast<std::uint32_t>(default_chunk_size);

    std::uint32_t chunks_per_layer() const noexcept;
    std::uint32_t total_chunks() const noexcept { return layer_count * chunks_per_layer(); }
    std::uint64_t total_bytes() const noexcept { return layer_count * bytes_per_layer; }
    /// Offset of a chunk inside staging and landing zone. Equals
    /// global_index * chunk_size whenever chunk_size divides bytes_per_layer.
    std::uint64_t chunk_offset(std::uint32_t layer, std::uint32_t chunk) const noexcept;
    std::uint32_t chunk_length(std::uint32_t chunk) const noexcept;
    ChunkTag tag_of(std::uint32_t global_index) const noexcept;
    std::uint32_t global_index(ChunkTag tag) const noexcept { return tag.layer * chunks_per_layer() + tag.chunk; }
    /// Throws invalid-argument for zero chunk size, too many layers or chunks.
    void validate() const;
};

/// Packs equal-sized layers back to back into `staging`.
KvLayout consolidate(std::span<const std::span<const std::byte>> layers, std::span<std::byte> staging,
                     std::uint32_t chunk_size = static_cast<std::uint32_t>(default_chunk_size));

class ArrivalBitmap {
public:
    explicit ArrivalBitmap(std::uint32_t total = 0) : seen_(total, false) {}
    /// False if the chunk was already marked.
    bool mark(std::uint32_t index);
    bool seen(std::uint32_t index) const { return seen_.at(index); }
    std::uint32_t seen_count() const noexcept { return count_; }
    std::uint32_t total() const noexcept { return static_cast<std::uint32_t>(seen_.size()); }
    bool complete() const noexcept { return count_ == seen_.size(); }
    std::vector<std::uint32_t> missing() const;

private:
    std::vector<bool> seen_;
    std::uint32_t count_ = 0;
};

struct LayerView {
    std::uint32_t layer_index = 0;
    std::uint64_t offset = 0;
    std::uint64_t length = 0;
};

std::vector<LayerView> layer_views(const KvLayout& layout);

/// Raised by either side of a transfer. `tags` names the chunks involved:
/// the absent ones for missing-chunks, the repeated one for duplicate-chunk,
/// the failed one when the sender aborts.
class TransferError : public Error {
public:
    TransferError(ErrorCode code, const std::string& message, std::vector<ChunkTag> tags = {},
                  std::optional<fabric::WcStatus> status = std::nullopt)
        : Error(code, message), tags_(std::move(tags)), status_(status) {}
    const std::vector<ChunkTag>& tags() const noexcept { return tags_; }
    std::optional<fabric::WcStatus> status() const noexcept { return status_; }

private:
    std::vector<ChunkTag> tags_;
    std::optional<fabric::WcStatus> status_;
};

struct StageTiming {
    std::string name;
    std::chrono::nanoseconds elapsed{};
};

struct TransferStats {
    std::uint32_t chunks = 0;
    std::uint64_t bytes = 0;
    std::chrono::nanoseconds elapsed{};
    std::uint64_t send_stalls = 0;
    std::uint64_t window_stalls = 0;
    /// Most write_imms outstanding (posted, send completion not yet polled).
    std::uint32_t max_outstanding = 0;
    /// Posts made without a matching send credit or window grant. Zero when
    /// the combined bound holds.
    std::uint32_t bound_violations = 0;
    std::vector<StageTiming> stages;

    double mbps() const noexcept;
};

struct SendOptions {
    std::chrono::milliseconds timeout{10'000};
    const std::atomic<bool>* abort = nullptr;
    /// Fault injection: skip, or post twice, one global chunk index.
    std::optional<std::uint32_t> drop_chunk;
    std::optional<std::uint32_t> duplicate_chunk;
};

/// Writes every chunk to landing.base + chunk_offset with its tag, waits for
/// all data completions, then posts the zero-length sentinel. Each post first
/// takes a send credit and a window credit. A non-ok completion throws
/// TransferError(aborted) naming the chunk.
TransferStats send_kv(fabric::Fabric& fabric, fabric::QpId qp, const KvLayout& layout,
                      const fabric::MemoryRegion& staging, const fabric::RemoteMr& landing,
                      flow::CreditGauge& send_credits, flow::CreditGauge& window_credits,
                      const SendOptions& options = {});

struct ReceiveResult {
    ArrivalBitmap bitmap;
    std::vector<LayerView> views;
    std::uint64_t receive_completions = 0;
    std::chrono::nanoseconds elapsed{};
    std::vector<StageTiming> stages;
};

/// Polls the recv CQ of `qp` until the sentinel, reposting through `window`.
/// Throws TransferError for missing, duplicate or out-of-range chunks and
/// aborted on timeout or a failed receive.
ReceiveResult receive_kv(fabric::Fabric& fabric, fabric::QpId qp, const KvLayout& layout,
                         const fabric::MemoryRegion& landing, flow::ReceiveWindow& window,
                         std::chrono::milliseconds timeout = std::chrono::milliseconds{10'000});

/// Transfer parameters the sender announces before any chunk moves.
struct Descriptor {
    KvLayout layout;
    std::uint64_t seed = 0;
    std::uint32_t window = 16;
};

inline constexpr std::size_t descriptor_size = 32;
std::array<std::byte, descriptor_size> encode_descriptor(const Descriptor& d);
/// Throws protocol-error on a bad magic.
Descriptor decode_descriptor(std::span<const std::byte> bytes);

/// Deterministic stand-in for prefill output: layer `layer` of a seeded run.
void synthetic_fill(std::span<std::byte> out, std::uint64_t seed, std::uint32_t layer);

} // namespace dmaplane::kv
