#include <doctest.h>

#include "dmaplane/workloads.hpp"

using namespace dmaplane;
using namespace dmaplane::workloads;

TEST_CASE("qd sweep has one row per depth and throughput grows with depth") {
    QdSweepConfig c;
    c.depths = {1, 4, 16};
    c.ops_per_depth = 200;
    const auto rows = run_qd_sweep(c);
    REQUIRE(rows.size() == 3);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        CHECK(rows[i].depth == c.depths[i]);
        CHECK(rows[i].ops == 200);
        CHECK(rows[i].mbps > 0);
        // Each op still waits out the loopback latency.
        CHECK(rows[i].mean_latency_us >= 190.0);
    }
    CHECK(rows[0].mbps < rows[1].mbps);
    CHECK(rows[1].mbps < rows[2].mbps);
}

TEST_CASE("qd sweep argument validation") {
    for (auto depths : {std::vector<std::uint32_t>{0}, std::vector<std::uint32_t>{}, std::vector<std::uint32_t>{512}}) {
        QdSweepConfig c;
        c.depths = depths;
        try {
            run_qd_sweep(c);
            FAIL("expected invalid-argument");
        } catch (const Error& e) {
            CHECK(e.code() == ErrorCode::invalid_argument);
        }
    }
}

TEST_CASE("sustained stream reports per-second windows") {
    StreamConfig c;
    c.seconds = 2.2;
    c.max_credits = 64;
    const auto r = run_stream(c);
    CHECK(r.windows.size() == 2);
    for (double w : r.windows) CHECK(w > 0);
    CHECK(r.overflow_count == 0);
    CHECK(r.receiver_not_ready == 0);
    CHECK(r.max_sampled_in_flight <= 64);
    CHECK(r.in_flight_violations == 0);
    CHECK(r.final_in_flight == 0);
    CHECK(r.completed == r.posted);
    CHECK(r.config.window == 64);
    CHECK(r.config.refill_batch == 32);
    CHECK(r.config.high_watermark == 48);
}

TEST_CASE("stream rejects a credit limit above the CQ depth") {
    StreamConfig c;
    c.max_ops = 10;
    c.max_credits = 512;
    c.cq_depth = 256;
    CHECK_THROWS_AS(run_stream(c), Error);
}

TEST_CASE("selftest passes every check") {
    const auto checks = run_selftest(7);
    CHECK(checks.size() >= 5);
    for (const auto& c : checks) {
        CAPTURE(c.name);
        CAPTURE(c.detail);
        CHECK(c.passed);
    }
}

TEST_CASE("composed shutdown tolerates null parts") {
    composed_shutdown(nullptr, nullptr, nullptr);
    BufferRegistry reg;
    composed_shutdown(nullptr, nullptr, &reg);
}
