#pragma once

#include <chrono>
#include <cstdint>
#include <thread>
#include <vector>

#include "dmaplane/fabric.hpp"

namespace testsupport {

/// Small seeded generator for property tests.
class Gen {
public:
    explicit Gen(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }
    /// Uniform in [lo, hi].
    std::uint64_t range(std::uint64_t lo, std::uint64_t hi) { return lo + next() % (hi - lo + 1); }
    bool coin() { return next() & 1; }

    template <class T>
    const T& pick(const std::vector<T>& v) {
        return v[range(0, v.size() - 1)];
    }

private:
    std::uint64_t state_;
};

/// Two loopback QPs wired to each other, both in RTS.
struct Loop {
    dmaplane::fabric::QpId a = 0;
    dmaplane::fabric::QpId b = 0;

    explicit Loop(dmaplane::fabric::Fabric& f) : Loop(f, f.default_send_cq(), f.default_recv_cq()) {}
    Loop(dmaplane::fabric::Fabric& f, dmaplane::fabric::CqId scq, dmaplane::fabric::CqId rcq) {
        using dmaplane::fabric::QpState;
        a = f.create_qp(scq, rcq);
        b = f.create_qp(scq, rcq);
        f.modify_qp(a, QpState::init);
        f.modify_qp(b, QpState::init);
        f.modify_qp(a, QpState::rtr, b);
        f.modify_qp(b, QpState::rtr, a);
        f.modify_qp(a, QpState::rts);
        f.modify_qp(b, QpState::rts);
    }
};

/// Polls `cq` until `n` completions arrived or the deadline passes.
inline std::vector<dmaplane::fabric::WorkCompletion> poll_n(dmaplane::fabric::Fabric& f, dmaplane::fabric::CqId cq,
                                                            std::size_t n,
                                                            std::chrono::milliseconds timeout = std::chrono::seconds(5)) {
    std::vector<dmaplane::fabric::WorkCompletion> out;
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    while (out.size() < n && std::chrono::steady_clock::now() < deadline) {
        auto got = f.poll_cq(cq, n - out.size());
        if (got.empty()) {
            std::this_thread::yield();
            continue;
        }
        out.insert(out.end(), got.begin(), got.end());
    }
    return out;
}

} // namespace testsupport
