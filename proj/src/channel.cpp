#include "dmaplane/channel.hpp"

#include <algorithm>
#include <cstring>

namespace dmaplane {

Opcode opcode_of(const Operation& op) noexcept {
    struct Visitor {
        Opcode operator()(const NoopOp&) const { return Opcode::noop; }
        Opcode operator()(const CopyOp&) const { return Opcode::copy; }
        Opcode operator()(const FabricPostOp&) const { return Opcode::fabric_post; }
        Opcode operator()(const SleepTestOp&) const { return Opcode::sleep_test; }
    };
    return std::visit(Visitor{}, op);
}

class ChannelEngine::Channel {
public:
    Channel(std::size_t sub_capacity, std::size_t comp_capacity, const ChannelEngineConfig& config)
        : config_(config), submissions_(sub_capacity), completions_(comp_capacity) {
        if (auto* obs = config_.observability) {
            auto& stats = obs->stats();
            submitted_counter_ = &stats.counter(obs::Section::stats, "channel_submissions");
            completed_counter_ = &stats.counter(obs::Section::stats, "channel_completions");
            latency_ = &stats.histogram("channel_latency");
        }
        worker_ = std::thread([this] { run(); });
    }

    ~Channel() { shutdown(); }

    std::optional<std::uint64_t> try_submit(Operation op) {
        {
            std::lock_guard lock(sub_mutex_);
            if (closing_) raise(ErrorCode::stale_handle, "channel is shut down");
            if (submissions_.full()) return std::nullopt;
            const auto seq = next_seq_++;
            submissions_.try_push(SubmissionEntry{seq, std::move(op), std::chrono::steady_clock::now()});
            ++stats_.submitted;
            stats_.max_submission_occupancy = std::max(stats_.max_submission_occupancy, submissions_.size());
            work_cv_.notify_one();
            if (submitted_counter_) submitted_counter_->add();
            return seq;
        }
    }

    std::vector<CompletionEntry> poll(std::size_t max) {
        std::vector<CompletionEntry> out;
        {
            std::lock_guard lock(comp_mutex_);
            CompletionEntry entry;
            while (out.size() < max && completions_.try_pop(entry)) out.push_back(std::move(entry));
            while (out.size() < max && !overflow_.empty()) {
                out.push_back(std::move(overflow_.front()));
                overflow_.pop_front();
            }
        }
        if (!out.empty()) space_cv_.notify_one();
        return out;
    }

    void shutdown() {
        std::lock_guard join_lock(join_mutex_);
        {
            std::scoped_lock lock(sub_mutex_, comp_mutex_);
            closing_ = true;
        }
        work_cv_.notify_all();
        space_cv_.notify_all();
        if (worker_.joinable()) {
            if (worker_.get_id() == std::this_thread::get_id()) {
                worker_.detach();
            } else {
                worker_.join();
            }
        }
    }

    void set_paused(bool paused) {
        {
            std::lock_guard lock(sub_mutex_);
            paused_ = paused;
        }
        work_cv_.notify_all();
    }

    ChannelStats stats() const {
        std::scoped_lock lock(sub_mutex_, comp_mutex_);
        ChannelStats out = stats_;
        out.live = !closing_;
        return out;
    }

private:
    void run() {
        for (;;) {
            SubmissionEntry entry;
            bool flush = false;
            {
                std::unique_lock lock(sub_mutex_);
                const auto ready = [this] { return closing_ || (!paused_ && !submissions_.empty()); };
                if (!ready()) {
                    ++stats_.worker_parks;
                    work_cv_.wait(lock, ready);
                }
                if (submissions_.empty()) return; // closing with nothing left
                submissions_.try_pop(entry);
                ++stats_.consumed;
                flush = closing_;
            }
            CompletionEntry completion = flush ? flushed(entry) : execute(entry);
            completion.latency = std::chrono::steady_clock::now() - entry.submitted_at;
            if (latency_) latency_->record(completion.latency);
            deliver(std::move(completion));
        }
    }

    CompletionEntry flushed(const SubmissionEntry& entry) {
        CompletionEntry c;
        c.seq = entry.seq;
        c.opcode = opcode_of(entry.op);
        c.status = CompletionStatus::flushed;
        return c;
    }

    CompletionEntry execute(SubmissionEntry& entry) {
        CompletionEntry c;
        c.seq = entry.seq;
        c.opcode = opcode_of(entry.op);
        try {
            if (auto* copy = std::get_if<CopyOp>(&entry.op)) {
                c.metadata = do_copy(*copy);
            } else if (auto* post = std::get_if<FabricPostOp>(&entry.op)) {
                if (!post->action) raise(ErrorCode::invalid_argument, "empty fabric_post action");
                c.metadata = post->action();
            } else if (auto* sleep = std::get_if<SleepTestOp>(&entry.op)) {
                std::this_thread::sleep_for(sleep->duration);
            }
        } catch (const Error& e) {
            c.status = CompletionStatus::error;
            c.error = e.code();
        }
        return c;
    }

    std::uint64_t do_copy(const CopyOp& op) {
        auto* registry = config_.registry;
        if (!registry) raise(ErrorCode::invalid_state, "channel engine has no buffer registry");
        const auto src = registry->map_buffer(op.src);
        MapToken dst{};
        try {
            dst = registry->map_buffer(op.dst);
        } catch (...) {
            registry->unmap_buffer(src);
            throw;
        }
        struct Unmap {
            BufferRegistry* r;
            MapToken a, b;
            ~Unmap() {
                r->unmap_buffer(a);
                r->unmap_buffer(b);
            }
        } unmap{registry, src, dst};

        auto src_bytes = registry->mapped_bytes(src);
        auto dst_bytes = registry->mapped_bytes(dst);
        if (op.src_offset > src_bytes.size() || op.length > src_bytes.size() - op.src_offset ||
            op.dst_offset > dst_bytes.size() || op.length > dst_bytes.size() - op.dst_offset) {
            raise(ErrorCode::invalid_argument, "copy range outside buffer");
        }
        std::memmove(dst_bytes.data() + op.dst_offset, src_bytes.data() + op.src_offset, op.length);
        return op.length;
    }

    void deliver(CompletionEntry completion) {
        std::unique_lock lock(comp_mutex_);
        // A full completion ring blocks the worker until the consumer polls;
        // during shutdown the overflow list takes the remainder.
        space_cv_.wait(lock, [this] { return closing_ || !completions_.full(); });
        if (completion.status == CompletionStatus::flushed) ++stats_.flushed;
        if (!overflow_.empty() || completions_.full()) {
            overflow_.push_back(std::move(completion));
        } else {
            completions_.try_push(std::move(completion));
            stats_.max_completion_occupancy = std::max(stats_.max_completion_occupancy, completions_.size());
        }
        ++stats_.completed;
        if (completed_counter_) completed_counter_->add();
    }

    ChannelEngineConfig config_;

    mutable std::mutex sub_mutex_;
    std::condition_variable work_cv_;
    Ring<SubmissionEntry> submissions_;
    bool paused_ = false;
    std::uint64_t next_seq_ = 1;

    mutable std::mutex comp_mutex_;
    std::condition_variable space_cv_;
    Ring<CompletionEntry> completions_;
    std::deque<CompletionEntry> overflow_;

    // Written under both ring locks, read under either.
    bool closing_ = false;
    ChannelStats stats_;

    std::mutex join_mutex_;
    std::thread worker_;

    obs::Counter* submitted_counter_ = nullptr;
    obs::Counter* completed_counter_ = nullptr;
    obs::LatencyHistogram* latency_ = nullptr;
};

// -- ChannelEngine --------------------------------------------------------------

ChannelEngine::ChannelEngine(ChannelEngineConfig config) : config_(config) {}

ChannelEngine::~ChannelEngine() {
    shutdown_all();
}

ChannelId ChannelEngine::create_channel(std::size_t submission_capacity, std::size_t completion_capacity) {
    auto channel = std::make_shared<Channel>(submission_capacity, completion_capacity, config_);
    std::lock_guard lock(mutex_);
    const auto id = next_id_++;
    channels_.emplace(id, std::move(channel));
    return id;
}

std::shared_ptr<ChannelEngine::Channel> ChannelEngine::find(ChannelId channel) const {
    std::lock_guard lock(mutex_);
    auto it = channels_.find(channel);
    if (it == channels_.end()) raise(ErrorCode::stale_handle, "unknown channel " + std::to_string(channel));
    return it->second;
}

std::uint64_t ChannelEngine::submit(ChannelId channel, Operation op) {
    auto seq = find(channel)->try_submit(std::move(op));
    if (!seq) raise(ErrorCode::would_block, "submission ring full");
    return *seq;
}

std::optional<std::uint64_t> ChannelEngine::try_submit(ChannelId channel, Operation op) {
    return find(channel)->try_submit(std::move(op));
}

std::vector<CompletionEntry> ChannelEngine::poll_completions(ChannelId channel, std::size_t max) {
    return find(channel)->poll(max);
}

void ChannelEngine::shutdown_channel(ChannelId channel) {
    find(channel)->shutdown();
    if (auto* obs = config_.observability) {
        obs->events().emit(obs::Event{obs::EventKind::teardown, std::chrono::steady_clock::now(), channel, 0,
                                      obs::TeardownStage::channel});
    }
}

void ChannelEngine::shutdown_all() {
    std::vector<std::shared_ptr<Channel>> all;
    {
        std::lock_guard lock(mutex_);
        for (auto& [id, ch] : channels_) all.push_back(ch);
    }
    for (auto& ch : all) ch->shutdown();
}

ChannelStats ChannelEngine::stats(ChannelId channel) const {
    return find(channel)->stats();
}

void ChannelEngine::pause_worker(ChannelId channel) {
    find(channel)->set_paused(true);
}

void ChannelEngine::resume_worker(ChannelId channel) {
    find(channel)->set_paused(false);
}

} // namespace dmaplane
