#include "dmaplane/registry.hpp"

#include <cstdlib>
#include <cstring>
#include <string>

#include "dmaplane/error.hpp"

namespace dmaplane {

namespace {

constexpr std::size_t page_size = 4096;

std::size_t round_up(std::size_t n, std::size_t align) {
    return (n + align - 1) / align * align;
}

class DefaultPlacement final : public PlacementPolicy {
public:
    NodeId resolve(std::span<const std::byte>, std::optional<NodeId> requested) override {
        return requested.value_or(0);
    }
};

DefaultPlacement default_placement;

std::string id_text(const char* what, std::uint64_t id) {
    return std::string(what) + " " + std::to_string(id);
}

} // namespace

// -- Backing ------------------------------------------------------------------

BufferRegistry::Backing::~Backing() {
    std::free(data);
}

BufferRegistry::Backing::Backing(Backing&& other) noexcept : data(other.data), capacity(other.capacity) {
    other.data = nullptr;
    other.capacity = 0;
}

BufferRegistry::Backing& BufferRegistry::Backing::operator=(Backing&& other) noexcept {
    if (this != &other) {
        std::free(data);
        data = other.data;
        capacity = other.capacity;
        other.data = nullptr;
        other.capacity = 0;
    }
    return *this;
}

// -- Registry -----------------------------------------------------------------

BufferRegistry::BufferRegistry(RegistryConfig config)
    : config_(config), regions_(std::make_unique<RegionSlot[]>(config.max_revocable_regions)) {
    if (config_.segment_size == 0) raise(ErrorCode::invalid_argument, "segment_size must be positive");
    if (auto* obs = config_.observability) {
        auto& stats = obs->stats();
        gauge_live_ = &stats.gauge(obs::Section::buffers, "buffers_live");
        gauge_bytes_ = &stats.gauge(obs::Section::buffers, "bytes_live");
        gauge_mappings_ = &stats.gauge(obs::Section::buffers, "mappings_active");
        counter_created_ = &stats.counter(obs::Section::buffers, "buffers_created");
        counter_destroyed_ = &stats.counter(obs::Section::buffers, "buffers_destroyed");
        counter_released_ = &stats.counter(obs::Section::buffers, "exports_released");
    }
}

BufferRegistry::~BufferRegistry() = default;

BufferId BufferRegistry::create_buffer(std::size_t size_bytes, AllocClass alloc_class,
                                       std::optional<NodeId> requested_node) {
    return create_impl(size_bytes, alloc_class, requested_node, config_.placement);
}

BufferId BufferRegistry::create_buffer(std::size_t size_bytes, AllocClass alloc_class,
                                       std::optional<NodeId> requested_node, PlacementPolicy& placement) {
    return create_impl(size_bytes, alloc_class, requested_node, &placement);
}

BufferId BufferRegistry::create_impl(std::size_t size_bytes, AllocClass alloc_class,
                                     std::optional<NodeId> requested, PlacementPolicy* placement) {
    if (size_bytes == 0) raise(ErrorCode::invalid_argument, "buffer size must be > 0");
    if (alloc_class == AllocClass::coherent && size_bytes > config_.coherent_ceiling) {
        raise(ErrorCode::invalid_argument, "coherent allocation of " + std::to_string(size_bytes) +
                                               " bytes exceeds ceiling " + std::to_string(config_.coherent_ceiling));
    }
    if (requested && *requested < 0) raise(ErrorCode::invalid_argument, "negative node id");

    // Reserve a slot first so a full registry fails before allocating.
    {
        LevelScope scope(config_.validator, LockLevel::buffer);
        std::lock_guard lock(mutex_);
        if (shut_down_) raise(ErrorCode::stale_handle, "registry is shut down");
        if (live_count_ >= config_.max_buffers) raise(ErrorCode::resource_exhausted, "registry full");
        ++live_count_;
    }

    Backing backing;
    backing.capacity = round_up(size_bytes, page_size);
    backing.data = static_cast<std::byte*>(std::aligned_alloc(page_size, backing.capacity));
    if (!backing.data) {
        LevelScope scope(config_.validator, LockLevel::buffer);
        std::lock_guard lock(mutex_);
        --live_count_;
        raise(ErrorCode::resource_exhausted, "allocation of " + std::to_string(size_bytes) + " bytes failed");
    }

    auto& policy = placement ? *placement : static_cast<PlacementPolicy&>(default_placement);
    std::span<std::byte> region(backing.data, backing.capacity);
    policy.prepare(region, requested);
    std::memset(backing.data, 0, backing.capacity);
    const NodeId actual = policy.resolve(region, requested);

    BufferId id = 0;
    {
        LevelScope scope(config_.validator, LockLevel::buffer);
        std::lock_guard lock(mutex_);
        id = next_buffer_id_++;
        Record rec;
        rec.info.id = id;
        rec.info.size_bytes = size_bytes;
        rec.info.alloc_class = alloc_class;
        rec.info.requested_node = requested;
        rec.info.actual_node = actual;
        rec.info.fell_back = requested.has_value() && *requested != actual;
        rec.backing = std::move(backing);
        records_.emplace(id, std::move(rec));
    }

    if (counter_created_) {
        counter_created_->add();
        gauge_live_->add(1);
        gauge_bytes_->add(static_cast<std::int64_t>(size_bytes));
    }
    if (auto* obs = config_.observability) obs->events().emit(obs::EventKind::buffer_create, id, size_bytes);
    return id;
}

BufferRegistry::Record& BufferRegistry::live_record(BufferId id) {
    auto it = records_.find(id);
    if (it == records_.end()) raise(ErrorCode::not_found, id_text("unknown buffer", id));
    if (it->second.info.state != BufferState::live) raise(ErrorCode::stale_handle, id_text("buffer not live:", id));
    return it->second;
}

const BufferRegistry::Record& BufferRegistry::find_record(BufferId id) const {
    auto it = records_.find(id);
    if (it == records_.end()) raise(ErrorCode::not_found, id_text("unknown buffer", id));
    return it->second;
}

MapToken BufferRegistry::map_buffer(BufferId id) {
    LevelScope scope(config_.validator, LockLevel::buffer);
    std::lock_guard lock(mutex_);
    auto& rec = live_record(id);
    ++rec.info.mapping_count;
    MapToken token{next_token_++};
    tokens_.emplace(token.value, id);
    if (gauge_mappings_) gauge_mappings_->add(1);
    return token;
}

void BufferRegistry::unmap_buffer(MapToken token) {
    LevelScope scope(config_.validator, LockLevel::buffer);
    std::lock_guard lock(mutex_);
    auto it = tokens_.find(token.value);
    if (it == tokens_.end()) raise(ErrorCode::invalid_argument, id_text("unknown mapping token", token.value));
    auto& rec = records_.at(it->second);
    --rec.info.mapping_count;
    tokens_.erase(it);
    if (gauge_mappings_) gauge_mappings_->add(-1);
}

std::span<std::byte> BufferRegistry::mapped_bytes(MapToken token) const {
    LevelScope scope(config_.validator, LockLevel::buffer);
    std::lock_guard lock(mutex_);
    auto it = tokens_.find(token.value);
    if (it == tokens_.end()) raise(ErrorCode::invalid_argument, id_text("unknown mapping token", token.value));
    auto& rec = records_.at(it->second);
    return {rec.backing.data, rec.info.size_bytes};
}

void BufferRegistry::destroy_buffer(BufferId id) {
    Backing doomed;
    std::size_t size = 0;
    {
        LevelScope scope(config_.validator, LockLevel::buffer);
        std::lock_guard lock(mutex_);
        auto it = records_.find(id);
        if (it == records_.end()) raise(ErrorCode::not_found, id_text("unknown buffer", id));
        auto& info = it->second.info;
        if (info.state == BufferState::destroying) raise(ErrorCode::busy, id_text("buffer is being destroyed:", id));
        if (info.state == BufferState::destroyed) raise(ErrorCode::stale_handle, id_text("buffer destroyed:", id));
        if (info.mapping_count > 0) {
            raise(ErrorCode::busy, id_text("buffer", id) + " has " + std::to_string(info.mapping_count) +
                                       " active mappings");
        }
        if (info.active_attachments > 0) {
            raise(ErrorCode::busy, id_text("buffer", id) + " has " + std::to_string(info.active_attachments) +
                                       " active attachments");
        }
        info.state = BufferState::destroying;
        doomed = std::move(it->second.backing);
        size = info.size_bytes;
    }

    // Release the backing outside the lock; the destroying state keeps map,
    // export and a second destroy out.
    doomed = Backing{};

    {
        LevelScope scope(config_.validator, LockLevel::buffer);
        std::lock_guard lock(mutex_);
        records_.at(id).info.state = BufferState::destroyed;
        --live_count_;
    }
    if (counter_destroyed_) {
        counter_destroyed_->add();
        gauge_live_->add(-1);
        gauge_bytes_->add(-static_cast<std::int64_t>(size));
    }
    if (auto* obs = config_.observability) obs->events().emit(obs::EventKind::buffer_destroy, id, size);
}

BufferInfo BufferRegistry::info(BufferId id) const {
    LevelScope scope(config_.validator, LockLevel::buffer);
    std::lock_guard lock(mutex_);
    return find_record(id).info;
}

std::vector<BufferInfo> BufferRegistry::list() const {
    LevelScope scope(config_.validator, LockLevel::buffer);
    std::lock_guard lock(mutex_);
    std::vector<BufferInfo> out;
    for (const auto& [id, rec] : records_) {
        if (rec.info.state != BufferState::destroyed) out.push_back(rec.info);
    }
    return out;
}

std::size_t BufferRegistry::live_buffers() const {
    LevelScope scope(config_.validator, LockLevel::buffer);
    std::lock_guard lock(mutex_);
    return live_count_;
}

// -- Export / attach ------------------------------------------------------------

ExportId BufferRegistry::export_buffer(BufferId id) {
    LevelScope scope(config_.validator, LockLevel::buffer);
    std::lock_guard lock(mutex_);
    auto& rec = live_record(id);
    if (rec.info.export_id) {
        const auto& existing = exports_.at(*rec.info.export_id);
        if (!existing.info.released) raise(ErrorCode::busy, id_text("buffer already exported:", id));
    }
    const ExportId handle = next_export_id_++;
    ExportRecord er;
    er.info.id = handle;
    er.info.buffer_id = id;
    exports_.emplace(handle, er);
    rec.info.export_id = handle;
    return handle;
}

AttachmentId BufferRegistry::attach(ExportId handle, std::uint64_t importer_id) {
    LevelScope scope(config_.validator, LockLevel::buffer);
    std::lock_guard lock(mutex_);
    auto it = exports_.find(handle);
    if (it == exports_.end()) raise(ErrorCode::not_found, id_text("unknown export", handle));
    auto& er = it->second;
    if (er.info.released || er.info.dropped) raise(ErrorCode::stale_handle, id_text("export released:", handle));
    auto& rec = live_record(er.info.buffer_id);
    if (importer_id >= (std::uint64_t{1} << 32)) raise(ErrorCode::invalid_argument, "importer id must fit 32 bits");
    if (rec.info.size_bytes > (std::size_t{1} << 32)) {
        raise(ErrorCode::invalid_argument, "buffer larger than one importer window");
    }

    Attachment att;
    att.id = next_attachment_id_++;
    att.export_id = handle;
    att.importer_id = importer_id;
    const auto base = importer_base(importer_id);
    for (std::size_t off = 0; off < rec.info.size_bytes; off += config_.segment_size) {
        const auto len = std::min(config_.segment_size, rec.info.size_bytes - off);
        att.segments.push_back({base + off, len});
    }
    const auto id = att.id;
    attachments_.emplace(id, std::move(att));
    ++er.info.active_attachments;
    ++rec.info.active_attachments;
    return id;
}

void BufferRegistry::detach(AttachmentId attachment) {
    std::vector<ExportId> fired;
    {
        LevelScope scope(config_.validator, LockLevel::buffer);
        std::lock_guard lock(mutex_);
        auto it = attachments_.find(attachment);
        if (it == attachments_.end() || !it->second.active) {
            raise(ErrorCode::invalid_argument, id_text("attachment not active:", attachment));
        }
        it->second.active = false;
        it->second.segments.clear();
        auto& er = exports_.at(it->second.export_id);
        --er.info.active_attachments;
        --records_.at(er.info.buffer_id).info.active_attachments;
        maybe_release(er, fired);
    }
    fire_release(fired);
}

void BufferRegistry::drop_export(ExportId handle) {
    std::vector<ExportId> fired;
    {
        LevelScope scope(config_.validator, LockLevel::buffer);
        std::lock_guard lock(mutex_);
        auto it = exports_.find(handle);
        if (it == exports_.end()) raise(ErrorCode::not_found, id_text("unknown export", handle));
        if (it->second.info.dropped) raise(ErrorCode::invalid_argument, id_text("export already dropped:", handle));
        it->second.info.dropped = true;
        maybe_release(it->second, fired);
    }
    fire_release(fired);
}

void BufferRegistry::maybe_release(ExportRecord& rec, std::vector<ExportId>& fired) {
    if (rec.info.released || !rec.info.dropped || rec.info.active_attachments != 0) return;
    rec.info.released = true;
    ++rec.info.release_count;
    fired.push_back(rec.info.id);
}

void BufferRegistry::fire_release(const std::vector<ExportId>& fired) {
    for (auto id : fired) {
        if (counter_released_) counter_released_->add();
        if (release_callback_) release_callback_(id);
    }
}

void BufferRegistry::set_release_callback(std::function<void(ExportId)> callback) {
    LevelScope scope(config_.validator, LockLevel::buffer);
    std::lock_guard lock(mutex_);
    release_callback_ = std::move(callback);
}

std::vector<Segment> BufferRegistry::segment_table(AttachmentId attachment) const {
    LevelScope scope(config_.validator, LockLevel::buffer);
    std::lock_guard lock(mutex_);
    auto it = attachments_.find(attachment);
    if (it == attachments_.end() || !it->second.active) {
        raise(ErrorCode::invalid_argument, id_text("attachment not active:", attachment));
    }
    return it->second.segments;
}

ExportInfo BufferRegistry::export_info(ExportId handle) const {
    LevelScope scope(config_.validator, LockLevel::buffer);
    std::lock_guard lock(mutex_);
    auto it = exports_.find(handle);
    if (it == exports_.end()) raise(ErrorCode::not_found, id_text("unknown export", handle));
    return it->second.info;
}

// -- Revocable regions --------------------------------------------------------

RegionId BufferRegistry::register_revocable_region(std::size_t size_bytes) {
    if (size_bytes == 0) raise(ErrorCode::invalid_argument, "region size must be > 0");
    LevelScope scope(config_.validator, LockLevel::region);
    std::lock_guard lock(region_mutex_);
    const RegionId id = next_region_id_.load(std::memory_order_relaxed);
    if (id > config_.max_revocable_regions) raise(ErrorCode::resource_exhausted, "revocable region table full");
    auto& slot = regions_[id - 1];
    slot.size_bytes = size_bytes;
    slot.resource = std::make_unique<std::byte[]>(size_bytes);
    region_bytes_.fetch_add(size_bytes, std::memory_order_relaxed);
    slot.published.store(true, std::memory_order_release);
    next_region_id_.store(id + 1, std::memory_order_relaxed);
    return id;
}

RevokeResult BufferRegistry::revoke(RegionId id) noexcept {
    LockOrderValidator::NoLockSection no_locks(config_.validator);
    if (id == 0 || id > config_.max_revocable_regions) return RevokeResult::unknown_region;
    auto& slot = regions_[id - 1];
    if (!slot.published.load(std::memory_order_acquire)) return RevokeResult::unknown_region;
    bool expected = false;
    if (!slot.revoked.compare_exchange_strong(expected, true, std::memory_order_acq_rel)) {
        return RevokeResult::already_revoked;
    }
    slot.cleanup_pending.store(true, std::memory_order_release);
    if (revocation_hook_) revocation_hook_(id);
    return RevokeResult::revoked;
}

std::size_t BufferRegistry::run_deferred_cleanup() {
    LevelScope scope(config_.validator, LockLevel::region);
    std::lock_guard lock(region_mutex_);
    std::size_t cleaned = 0;
    const RegionId end = next_region_id_.load(std::memory_order_relaxed);
    for (RegionId id = 1; id < end; ++id) {
        auto& slot = regions_[id - 1];
        if (!slot.cleanup_pending.exchange(false, std::memory_order_acq_rel)) continue;
        slot.resource.reset();
        region_bytes_.fetch_sub(slot.size_bytes, std::memory_order_relaxed);
        slot.released.store(true, std::memory_order_release);
        ++cleaned;
    }
    return cleaned;
}

RegionInfo BufferRegistry::region_info(RegionId id) const {
    if (id == 0 || id > config_.max_revocable_regions || !regions_[id - 1].published.load(std::memory_order_acquire)) {
        raise(ErrorCode::not_found, id_text("unknown region", id));
    }
    const auto& slot = regions_[id - 1];
    return RegionInfo{id, slot.size_bytes, slot.revoked.load(), slot.cleanup_pending.load(), slot.released.load()};
}

// -- Shutdown -----------------------------------------------------------------

std::size_t BufferRegistry::shutdown() {
    std::vector<BufferId> ids;
    {
        LevelScope scope(config_.validator, LockLevel::buffer);
        std::lock_guard lock(mutex_);
        if (shut_down_) return 0;
        for (const auto& [id, rec] : records_) {
            if (rec.info.state == BufferState::live) ids.push_back(id);
        }
    }
    std::size_t stuck = 0;
    for (auto id : ids) {
        try {
            destroy_buffer(id);
        } catch (const Error&) {
            ++stuck;
        }
    }
    run_deferred_cleanup();
    {
        LevelScope scope(config_.validator, LockLevel::buffer);
        std::lock_guard lock(mutex_);
        shut_down_ = true;
    }
    if (auto* obs = config_.observability) {
        obs->events().emit(obs::Event{obs::EventKind::teardown, std::chrono::steady_clock::now(), 0, stuck,
                                      obs::TeardownStage::registry});
    }
    return stuck;
}

} // namespace dmaplane
