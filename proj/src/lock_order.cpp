#include "dmaplane/lock_order.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>

namespace dmaplane {

namespace {

struct HeldEntry {
    const LockOrderValidator* owner;
    LockLevel level;
};

struct ThreadState {
    std::vector<HeldEntry> held;
    std::vector<const LockOrderValidator*> no_lock_sections;
};

ThreadState& thread_state() {
    thread_local ThreadState state;
    return state;
}

} // namespace

std::string_view to_string(LockLevel level) noexcept {
    switch (level) {
    case LockLevel::device: return "device";
    case LockLevel::fabric: return "fabric";
    case LockLevel::buffer: return "buffer";
    case LockLevel::region: return "region";
    }
    return "unknown";
}

std::string LockViolation::message() const {
    std::string out = "lock order violation: acquiring ";
    out += to_string(requested);
    out += "(" + std::to_string(static_cast<int>(requested)) + ")";
    if (inside_no_lock_section) {
        out += " inside a no-lock section";
    } else {
        out += " while holding ";
        out += to_string(held);
        out += "(" + std::to_string(static_cast<int>(held)) + ")";
    }
    return out;
}

LockOrderValidator::~LockOrderValidator() {
    auto& held = thread_state().held;
    std::erase_if(held, [this](const HeldEntry& e) { return e.owner == this; });
}

std::optional<LockViolation> LockOrderValidator::check_acquire(LockLevel level) {
    auto& state = thread_state();
    std::optional<LockViolation> violation;

    if (std::find(state.no_lock_sections.begin(), state.no_lock_sections.end(), this) !=
        state.no_lock_sections.end()) {
        violation = LockViolation{level, level, true};
    } else {
        // Report the highest held level that is >= the requested one.
        for (const auto& entry : state.held) {
            if (entry.owner != this || static_cast<int>(entry.level) < static_cast<int>(level)) continue;
            if (!violation || static_cast<int>(entry.level) > static_cast<int>(violation->held)) {
                violation = LockViolation{entry.level, level, false};
            }
        }
    }

    state.held.push_back({this, level});
    if (violation) record(*violation);
    return violation;
}

void LockOrderValidator::check_release(LockLevel level) {
    auto& held = thread_state().held;
    for (auto it = held.rbegin(); it != held.rend(); ++it) {
        if (it->owner == this && it->level == level) {
            held.erase(std::next(it).base());
            return;
        }
    }
}

std::vector<LockViolation> LockOrderValidator::violations() const {
    std::lock_guard lock(log_mutex_);
    return log_;
}

void LockOrderValidator::clear_violations() {
    std::lock_guard lock(log_mutex_);
    log_.clear();
    violation_count_.store(0, std::memory_order_relaxed);
}

std::vector<LockLevel> LockOrderValidator::held_by_current_thread() const {
    std::vector<LockLevel> out;
    for (const auto& entry : thread_state().held) {
        if (entry.owner == this) out.push_back(entry.level);
    }
    return out;
}

void LockOrderValidator::record(const LockViolation& violation) {
    violation_count_.fetch_add(1, std::memory_order_relaxed);
    {
        std::lock_guard lock(log_mutex_);
        log_.push_back(violation);
    }
    if (mode_ == Mode::panic) {
        std::fprintf(stderr, "dmaplane: %s\n", violation.message().c_str());
        std::abort();
    }
}

LockOrderValidator::NoLockSection::NoLockSection(LockOrderValidator* validator) : validator_(validator) {
    if (validator_) thread_state().no_lock_sections.push_back(validator_);
}

LockOrderValidator::NoLockSection::~NoLockSection() {
    if (!validator_) return;
    auto& sections = thread_state().no_lock_sections;
    auto it = std::find(sections.rbegin(), sections.rend(), validator_);
    if (it != sections.rend()) sections.erase(std::next(it).base());
}

} // namespace dmaplane
