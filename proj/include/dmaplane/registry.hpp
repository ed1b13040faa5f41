#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <unordered_map>
#include <vector>

#include "dmaplane/error.hpp"
#include "dmaplane/lock_order.hpp"
#include "dmaplane/observability.hpp"

namespace dmaplane {

using BufferId = std::uint64_t;
using ExportId = std::uint64_t;
using AttachmentId = std::uint64_t;
using RegionId = std::uint64_t;
using NodeId = int;

inline constexpr std::size_t kib = 1024;
inline constexpr std::size_t mib = 1024 * kib;

enum class AllocClass { coherent, page_backed };
enum class BufferState { live, destroying, destroyed };

/// Decides (and, on real hosts, steers) the NUMA node of a fresh backing
/// region. prepare() runs before the region is first touched.
class PlacementPolicy {
public:
    virtual ~PlacementPolicy() = default;
    virtual void prepare(std::span<std::byte> region, std::optional<NodeId> requested) {
        (void)region;
        (void)requested;
    }
    virtual NodeId resolve(std::span<const std::byte> region, std::optional<NodeId> requested) = 0;
};

struct MapToken {
    std::uint64_t value = 0;
    friend bool operator==(MapToken, MapToken) = default;
};

struct BufferInfo {
    BufferId id = 0;
    std::size_t size_bytes = 0;
    AllocClass alloc_class = AllocClass::page_backed;
    std::optional<NodeId> requested_node;
    NodeId actual_node = 0;
    bool fell_back = false;
    std::size_t mapping_count = 0;
    std::optional<ExportId> export_id;
    std::size_t active_attachments = 0;
    BufferState state = BufferState::live;
};

/// One contiguous range as seen by a particular importer.
struct Segment {
    std::uint64_t importer_address = 0;
    std::size_t length = 0;
    friend bool operator==(const Segment&, const Segment&) = default;
};

struct ExportInfo {
    ExportId id = 0;
    BufferId buffer_id = 0;
    std::size_t active_attachments = 0;
    bool dropped = false;
    bool released = false;
    std::uint64_t release_count = 0;
};

enum class RevokeResult { revoked, already_revoked, unknown_region };

struct RegionInfo {
    RegionId id = 0;
    std::size_t size_bytes = 0;
    bool revoked = false;
    bool cleanup_pending = false;
    bool released = false;
};

struct RegistryConfig {
    std::size_t max_buffers = 4096;
    std::size_t coherent_ceiling = 64 * kib;
    std::size_t max_revocable_regions = 1024;
    /// Granularity of per-importer segment tables.
    std::size_t segment_size = 4096;
    LockOrderValidator* validator = nullptr;
    obs::Observability* observability = nullptr;
    PlacementPolicy* placement = nullptr;
};

/// Buffer namespace: lifecycle, mapping counts, export/attach sharing and
/// revocable external regions. All calls are thread-safe.
class BufferRegistry {
public:
    explicit BufferRegistry(RegistryConfig config = {});
    ~BufferRegistry();

    BufferRegistry(const BufferRegistry&) = delete;
    BufferRegistry& operator=(const BufferRegistry&) = delete;

    BufferId create_buffer(std::size_t size_bytes, AllocClass alloc_class,
                           std::optional<NodeId> requested_node = std::nullopt);
    BufferId create_buffer(std::size_t size_bytes, AllocClass alloc_class, std::optional<NodeId> requested_node,
                           PlacementPolicy& placement);

    /// Every map increments, including the first one.
    MapToken map_buffer(BufferId id);
    void unmap_buffer(MapToken token);
    /// Backing bytes; valid for as long as the token stays mapped.
    std::span<std::byte> mapped_bytes(MapToken token) const;

    void destroy_buffer(BufferId id);
    BufferInfo info(BufferId id) const;
    std::vector<BufferInfo> list() const;

    ExportId export_buffer(BufferId id);
    /// Builds a fresh segment table through the importer's translation:
    /// address = importer_id * 2^32 + buffer offset.
    AttachmentId attach(ExportId handle, std::uint64_t importer_id);
    void detach(AttachmentId attachment);
    /// Exporter side drop. Release fires once the handle is dropped and the
    /// last attachment is gone.
    void drop_export(ExportId handle);
    std::vector<Segment> segment_table(AttachmentId attachment) const;
    ExportInfo export_info(ExportId handle) const;
    void set_release_callback(std::function<void(ExportId)> callback);

    static std::uint64_t importer_base(std::uint64_t importer_id) noexcept { return importer_id << 32; }

    RegionId register_revocable_region(std::size_t size_bytes);
    /// Non-blocking: flips the revoked flag and schedules cleanup. Takes no
    /// registry lock and releases nothing.
    RevokeResult revoke(RegionId id) noexcept;
    /// Releases every revoked region exactly once; returns how many.
    std::size_t run_deferred_cleanup();
    RegionInfo region_info(RegionId id) const;
    std::size_t revocable_bytes_accounted() const noexcept {
        return region_bytes_.load(std::memory_order_relaxed);
    }
    /// Test hook invoked inside revoke(), within the no-lock section.
    void set_revocation_hook(std::function<void(RegionId)> hook) { revocation_hook_ = std::move(hook); }

    /// Final teardown: destroys every destroyable buffer, runs pending region
    /// cleanup and emits the registry teardown event. Returns the number of
    /// buffers that could not be destroyed.
    std::size_t shutdown();

    std::size_t live_buffers() const;
    LockOrderValidator* validator() const noexcept { return config_.validator; }

private:
    struct Backing {
        std::byte* data = nullptr;
        std::size_t capacity = 0;
        ~Backing();
        Backing() = default;
        Backing(Backing&& other) noexcept;
        Backing& operator=(Backing&& other) noexcept;
    };

    struct Record {
        BufferInfo info;
        Backing backing;
    };

    struct ExportRecord {
        ExportInfo info;
    };

    struct Attachment {
        AttachmentId id = 0;
        ExportId export_id = 0;
        std::uint64_t importer_id = 0;
        std::vector<Segment> segments;
        bool active = true;
    };

    struct RegionSlot {
        std::atomic<bool> published{false};
        std::size_t size_bytes = 0;
        std::atomic<bool> revoked{false};
        std::atomic<bool> cleanup_pending{false};
        std::atomic<bool> released{false};
        std::unique_ptr<std::byte[]> resource;
    };

    Record& live_record(BufferId id);
    const Record& find_record(BufferId id) const;
    void maybe_release(ExportRecord& rec, std::vector<ExportId>& fired);
    void fire_release(const std::vector<ExportId>& fired);
    BufferId create_impl(std::size_t size_bytes, AllocClass alloc_class, std::optional<NodeId> requested,
                         PlacementPolicy* placement);

    RegistryConfig config_;
    mutable std::mutex mutex_;
    mutable std::mutex region_mutex_;

    std::map<BufferId, Record> records_;
    std::unordered_map<std::uint64_t, BufferId> tokens_;
    std::map<ExportId, ExportRecord> exports_;
    std::unordered_map<AttachmentId, Attachment> attachments_;

    BufferId next_buffer_id_ = 1;
    std::uint64_t next_token_ = 1;
    ExportId next_export_id_ = 1;
    AttachmentId next_attachment_id_ = 1;
    std::size_t live_count_ = 0;
    std::function<void(ExportId)> release_callback_;

    std::unique_ptr<RegionSlot[]> regions_;
    std::atomic<RegionId> next_region_id_{1};
    std::atomic<std::size_t> region_bytes_{0};
    std::function<void(RegionId)> revocation_hook_;

    obs::Gauge* gauge_live_ = nullptr;
    obs::Gauge* gauge_bytes_ = nullptr;
    obs::Gauge* gauge_mappings_ = nullptr;
    obs::Counter* counter_created_ = nullptr;
    obs::Counter* counter_destroyed_ = nullptr;
    obs::Counter* counter_released_ = nullptr;
    bool shut_down_ = false;
};

} // namespace dmaplane
