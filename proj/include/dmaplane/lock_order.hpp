#pragma once

#include <atomic>
#include <cstddef>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace dmaplane {

/// Global lock hierarchy. A context may only acquire a level strictly greater
/// than every level it already holds.
enum class LockLevel : int {
    device = 0,
    fabric = 1,
    buffer = 2,
    region = 3,
};

std::string_view to_string(LockLevel level) noexcept;

struct LockViolation {
    LockLevel held;
    LockLevel requested;
    bool inside_no_lock_section = false;

    std::string message() const;
};

/// Debug-time checker for the acquisition order. Each thread keeps its own
/// held-level stack per validator instance. Components take a nullable
/// pointer so the disabled path costs one branch.
class LockOrderValidator {
public:
    enum class Mode { report, panic };

    explicit LockOrderValidator(Mode mode = Mode::report) : mode_(mode) {}
    ~LockOrderValidator();

    LockOrderValidator(const LockOrderValidator&) = delete;
    LockOrderValidator& operator=(const LockOrderValidator&) = delete;

    /// Records the acquisition on the calling thread's stack and returns the
    /// violation, if any. The level is pushed either way so release pairs up.
    std::optional<LockViolation> check_acquire(LockLevel level);

    /// Pops the most recent entry of `level`. Releasing a level that is not
    /// held is ignored.
    void check_release(LockLevel level);

    std::size_t violation_count() const noexcept {
        return violation_count_.load(std::memory_order_relaxed);
    }
    std::vector<LockViolation> violations() const;
    void clear_violations();

    /// Levels currently held by the calling thread, oldest first.
    std::vector<LockLevel> held_by_current_thread() const;

    /// While alive on a thread, any acquisition through this validator on that
    /// thread is a violation. Used to assert callbacks that must not block.
    class NoLockSection {
    public:
        explicit NoLockSection(LockOrderValidator* validator);
        ~NoLockSection();
        NoLockSection(const NoLockSection&) = delete;
        NoLockSection& operator=(const NoLockSection&) = delete;

    private:
        LockOrderValidator* validator_;
    };

private:
    void record(const LockViolation& violation);

    Mode mode_;
    std::atomic<std::size_t> violation_count_{0};
    mutable std::mutex log_mutex_;
    std::vector<LockViolation> log_;
};

/// RAII acquisition marker; construct before taking the real lock so that the
/// release is recorded after the unlock.
class LevelScope {
public:
    LevelScope(LockOrderValidator* validator, LockLevel level) : validator_(validator), level_(level) {
        if (validator_) validator_->check_acquire(level_);
    }
    ~LevelScope() {
        if (validator_) validator_->check_release(level_);
    }
    LevelScope(const LevelScope&) = delete;
    LevelScope& operator=(const LevelScope&) = delete;

private:
    LockOrderValidator* validator_;
    LockLevel level_;
};

} // namespace dmaplane
