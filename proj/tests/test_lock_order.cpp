#include <doctest.h>

#include <functional>
#include <thread>

#include "dmaplane/lock_order.hpp"

using namespace dmaplane;

namespace {

/// Violation flag per step of a nested acquisition sequence, computed from
/// the rule directly: a step is bad if any earlier held level is >= it.
std::vector<bool> expected_violations(const std::vector<int>& seq) {
    std::vector<bool> out;
    for (std::size_t i = 0; i < seq.size(); ++i) {
        bool bad = false;
        for (std::size_t j = 0; j < i; ++j) bad = bad || seq[j] >= seq[i];
        out.push_back(bad);
    }
    return out;
}

void for_each_sequence(std::size_t max_len, const std::function<void(const std::vector<int>&)>& f) {
    std::vector<int> seq;
    std::function<void()> rec = [&] {
        if (!seq.empty()) f(seq);
        if (seq.size() == max_len) return;
        for (int l = 0; l < 4; ++l) {
            seq.push_back(l);
            rec();
            seq.pop_back();
        }
    };
    rec();
}

} // namespace

TEST_CASE("in-order acquisition is clean") {
    LockOrderValidator v;
    for (auto l : {LockLevel::device, LockLevel::fabric, LockLevel::buffer, LockLevel::region}) {
        CHECK_FALSE(v.check_acquire(l));
    }
    CHECK(v.violation_count() == 0);
    CHECK(v.held_by_current_thread().size() == 4);
}

TEST_CASE("inversion names both levels") {
    LockOrderValidator v;
    v.check_acquire(LockLevel::buffer);
    const auto viol = v.check_acquire(LockLevel::fabric);
    REQUIRE(viol);
    CHECK(viol->held == LockLevel::buffer);
    CHECK(viol->requested == LockLevel::fabric);
    const auto msg = viol->message();
    CHECK(msg.find("buffer") != std::string::npos);
    CHECK(msg.find("fabric") != std::string::npos);
}

TEST_CASE("release then lower acquire is clean") {
    LockOrderValidator v;
    v.check_acquire(LockLevel::fabric);
    v.check_release(LockLevel::fabric);
    CHECK_FALSE(v.check_acquire(LockLevel::device));
    CHECK(v.violation_count() == 0);
}

TEST_CASE("exhaustive sequences up to length 4 match the order rule") {
    std::size_t sequences = 0, accepted = 0;
    for_each_sequence(4, [&](const std::vector<int>& seq) {
        ++sequences;
        LockOrderValidator v;
        const auto expect = expected_violations(seq);
        bool any = false;
        for (std::size_t i = 0; i < seq.size(); ++i) {
            const auto got = v.check_acquire(static_cast<LockLevel>(seq[i]));
            CHECK(got.has_value() == expect[i]);
            any = any || expect[i];
        }
        bool increasing = true;
        for (std::size_t i = 1; i < seq.size(); ++i) increasing = increasing && seq[i - 1] < seq[i];
        CHECK(any == !increasing);
        if (!any) ++accepted;
        for (auto it = seq.rbegin(); it != seq.rend(); ++it) v.check_release(static_cast<LockLevel>(*it));
        CHECK(v.held_by_current_thread().empty());
    });
    CHECK(sequences == 4 + 16 + 64 + 256);
    // Non-empty strictly increasing subsequences of 0<1<2<3.
    CHECK(accepted == 15);
}

TEST_CASE("held stacks are per thread") {
    LockOrderValidator v;
    v.check_acquire(LockLevel::region);
    std::thread t([&] { CHECK_FALSE(v.check_acquire(LockLevel::device)); });
    t.join();
    CHECK(v.violation_count() == 0);
}

TEST_CASE("validators do not see each other's holds") {
    LockOrderValidator a, b;
    a.check_acquire(LockLevel::region);
    CHECK_FALSE(b.check_acquire(LockLevel::device));
}

TEST_CASE("no-lock section flags any acquisition") {
    LockOrderValidator v;
    {
        LockOrderValidator::NoLockSection section(&v);
        const auto viol = v.check_acquire(LockLevel::region);
        REQUIRE(viol);
        CHECK(viol->inside_no_lock_section);
        v.check_release(LockLevel::region);
    }
    CHECK_FALSE(v.check_acquire(LockLevel::region));
    v.clear_violations();
    CHECK(v.violation_count() == 0);
}

TEST_CASE("level scope pairs acquire and release") {
    LockOrderValidator v;
    {
        LevelScope a(&v, LockLevel::fabric);
        LevelScope b(&v, LockLevel::buffer);
        CHECK(v.held_by_current_thread().size() == 2);
    }
    CHECK(v.held_by_current_thread().empty());
    LevelScope disabled(nullptr, LockLevel::device);
}
