// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.

#include <array>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <thread>
#include <vector>

#include <fmt/format.h>

#include "dmaplane/fabric.hpp"
#include "dmaplane/kv_pipeline.hpp"
#include "dmaplane/lock_order.hpp"
#include "dmaplane/observability.hpp"
#include "dmaplane/placement.hpp"
#include "dmaplane/registry.hpp"
#include "dmaplane/workloads.hpp"
#include "support.hpp"

using namespace dmaplane;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
    bool pass = true;
    std::string detail;
};

/// Collects failed expectations; the first few are kept for the report.
class Checker {
public:
    void expect(bool ok, const std::string& what) {
        if (ok) return;
        ++failures_;
        if (failures_ <= 3) first_ += (first_.empty() ? "" : "; ") + what;
    }
    Outcome done(std::string summary) const {
        if (failures_ == 0) return {true, std::move(summary)};
        return {false, fmt::format("{} failure(s): {}", failures_, first_)};
    }

private:
    std::size_t failures_ = 0;
    std::string first_;
};

std::map<std::string, std::string> parse_csv_report(const std::string& text) {
    std::map<std::string, std::string> out;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        const auto comma = line.find(',');
        if (comma != std::string::npos) out[line.substr(0, comma)] = line.substr(comma + 1);
    }
    return out;
}

struct Proc {
    int code = -1;
    std::string out;
};

Proc run_cli(const std::string& args) {
    const auto cmd = std::string(DMAPLANE_CLI) + " " + args + " 2>&1";
    Proc p;
    FILE* f = popen(cmd.c_str(), "r");
    if (!f) return p;
    std::array<char, 4096> buf{};
    while (const auto n = fread(buf.data(), 1, buf.size(), f)) p.out.append(buf.data(), n);
    const int status = pclose(f);
    p.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return p;
}

std::uint64_t num(const std::map<std::string, std::string>& r, const std::string& key) {
    const auto it = r.find(key);
    return it == r.end() ? UINT64_MAX : std::stoull(it->second);
}

// -- 1 ------------------------------------------------------------------------------

Outcome flow_control_safety() {
    const auto t0 = Clock::now();
    const auto p = run_cli("--format csv stress --seconds 5 --max-credits 4 --high 3 --low 1");
    const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
    auto r = parse_csv_report(p.out);
    Checker c;
    c.expect(p.code == 0, fmt::format("exit {}", p.code));
    c.expect(num(r, "overflow_count") == 0, "overflow_count " + r["overflow_count"]);
    c.expect(num(r, "receiver_not_ready") == 0, "receiver_not_ready " + r["receiver_not_ready"]);
    c.expect(num(r, "stall_count") > 0 && num(r, "stall_count") != UINT64_MAX, "stall_count " + r["stall_count"]);
    c.expect(num(r, "max_in_flight_seen") <= 4, "max_in_flight_seen " + r["max_in_flight_seen"]);
    c.expect(secs <= 10.0, fmt::format("runtime {:.1f}s", secs));
    return c.done(fmt::format("overflow=0 rnr=0 stalls={} max_in_flight={} runtime={:.1f}s", r["stall_count"],
                              r["max_in_flight_seen"], secs));
}

// -- 2 ------------------------------------------------------------------------------

Outcome sustained_stream() {
    const auto p = run_cli("--format csv sustained-stream --seconds 10 --max-credits 64");
    auto r = parse_csv_report(p.out);
    Checker c;
    c.expect(p.code == 0, fmt::format("exit {}", p.code));
    std::size_t windows = 0;
    for (const auto& [k, v] : r) {
        if (k.rfind("window_", 0) == 0 && k.size() > 5 && k.substr(k.size() - 5) == "_mbps") {
            ++windows;
            c.expect(std::stod(v) > 0, k + " is " + v);
        }
    }
    c.expect(windows == 10, fmt::format("{} per-second windows", windows));
    c.expect(num(r, "overflow_count") == 0, "overflow_count " + r["overflow_count"]);
    c.expect(num(r, "max_sampled_in_flight") <= 64, "max_sampled_in_flight " + r["max_sampled_in_flight"]);
    c.expect(num(r, "in_flight_violations") == 0, "in_flight_violations " + r["in_flight_violations"]);
    return c.done(fmt::format("windows={} overflow=0 max_sampled_in_flight={} mbps={}", windows,
                              r["max_sampled_in_flight"], r["mbps"]));
}

// -- 3 ------------------------------------------------------------------------------

Outcome credit_invariant() {
    Checker c;
    std::uint64_t ops = 0;
    std::set<std::size_t> depths;
    std::set<std::uint32_t> windows;
    for (std::uint64_t seed = 1; seed <= 200; ++seed) {
        const auto r = workloads::run_random_schedule(seed, 10'000);
        const auto tag = fmt::format("seed {}", seed);
        c.expect(r.cq_depth >= 2 && r.cq_depth <= 16, tag + " depth out of range");
        c.expect(r.window >= 1 && r.window <= 8, tag + " window out of range");
        c.expect(r.ops <= 10'000, tag + " too many ops");
        c.expect(r.max_credits <= r.cq_depth, tag + " max_credits > depth");
        c.expect(r.max_in_flight_seen <= r.max_credits, tag + " in_flight > max_credits");
        c.expect(r.invariant_violations == 0, tag + " invariant violations");
        c.expect(r.overflow_count == 0, tag + " overflow");
        c.expect(r.receiver_not_ready == 0, tag + " receiver-not-ready");
        c.expect(r.final_in_flight == 0 && r.completed == r.ops, tag + " unbalanced");
        ops += r.ops;
        depths.insert(r.cq_depth);
        windows.insert(r.window);
    }
    c.expect(depths.size() > 8 && windows.size() == 8, "generator does not cover the parameter space");
    return c.done(fmt::format("200 seeds, {} ops, {} depths, {} windows, zero violations", ops, depths.size(),
                              windows.size()));
}

// -- 4 ------------------------------------------------------------------------------

Outcome kv_two_process() {
    const auto t0 = Clock::now();
    const auto recv_cmd = std::string(DMAPLANE_CLI) + " write-imm-demo recv --listen 127.0.0.1:0 --timeout-ms 5000 2>&1";
    FILE* rp = popen(recv_cmd.c_str(), "r");
    if (!rp) return {false, "cannot start receiver"};
    std::array<char, 512> line{};
    std::string first;
    if (fgets(line.data(), line.size(), rp)) first = line.data();
    const auto colon = first.rfind(':');
    if (first.rfind("listening: ", 0) != 0 || colon == std::string::npos) {
        pclose(rp);
        return {false, "receiver did not report its port: " + first};
    }
    const auto port = std::stoi(first.substr(colon + 1));
    const auto sender = run_cli(fmt::format("write-imm-demo send --peer 127.0.0.1:{} --layers 4 --chunks-per-layer 4",
                                            port));
    std::string recv_out = first;
    std::array<char, 4096> buf{};
    while (const auto n = fread(buf.data(), 1, buf.size(), rp)) recv_out.append(buf.data(), n);
    const int status = pclose(rp);
    const int recv_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    const double secs = std::chrono::duration<double>(Clock::now() - t0).count();

    const auto has = [](const std::string& s, const std::string& t) { return s.find(t) != std::string::npos; };
    Checker c;
    c.expect(sender.code == 0, fmt::format("sender exit {}", sender.code));
    c.expect(recv_code == 0, fmt::format("receiver exit {}", recv_code));
    c.expect(has(recv_out, "complete: 4 layers, 16 chunks, bytes-match"), "receiver did not report bytes-match");
    c.expect(has(recv_out, "receive_completions: 17\n"), "receive completions != chunks + 1");
    c.expect(has(recv_out, "slots_consumed: 17\n"), "slots consumed != chunks + 1");
    c.expect(has(sender.out, "chunks: 16\n"), "sender chunk count");
    c.expect(has(sender.out, "stage KV-cache consolidation"), "no consolidate stage");
    c.expect(has(sender.out, "stage KV-cache transfer"), "no transfer stage");
    c.expect(has(recv_out, "stage KV-cache reconstruction"), "no reconstruct stage");
    c.expect(secs <= 5.0, fmt::format("runtime {:.1f}s", secs));
    return c.done(fmt::format("port {} 16 chunks + sentinel, bytes-match, stages present, {:.2f}s", port, secs));
}

// -- 5 ------------------------------------------------------------------------------

Outcome tag_bijection() {
    std::vector<std::uint32_t> values;
    for (std::uint32_t v = 0; v <= 255; ++v) values.push_back(v);
    values.push_back(0xFFFE);
    std::size_t mismatches = 0, pairs = 0;
    std::set<std::uint32_t> images;
    for (auto l : values) {
        for (auto ch : values) {
            ++pairs;
            const auto imm = kv::encode_tag(l, ch);
            const auto back = kv::decode_tag(imm);
            // Layer high, chunk low.
            if (imm != ((l << 16) | ch) || !back || back->layer != l || back->chunk != ch || imm == kv::sentinel_tag ||
                !images.insert(imm).second) {
                ++mismatches;
            }
        }
    }
    if (kv::decode_tag(kv::sentinel_tag)) ++mismatches;
    Checker c;
    c.expect(mismatches == 0, fmt::format("{} mismatches", mismatches));
    return c.done(fmt::format("{} pairs plus sentinel, 0 mismatches", pairs));
}

// -- 6 ------------------------------------------------------------------------------

Outcome teardown_safety() {
    using namespace dmaplane::fabric;
    Checker c;
    testsupport::Gen gen(606);
    std::uint64_t posted_total = 0, flushed_total = 0;
    for (int rep = 0; rep < 100; ++rep) {
        const auto tag = fmt::format("rep {}", rep);
        obs::Observability o;
        obs::EventLog log;
        log.attach(o, obs::mask_of(obs::EventKind::rdma_post) | obs::mask_of(obs::EventKind::rdma_completion) |
                          obs::mask_of(obs::EventKind::teardown));
        BufferRegistry reg(RegistryConfig{.observability = &o});
        FabricOptions fo;
        fo.observability = &o;
        Fabric f(reg, LinkConfig{}, fo);
        testsupport::Loop q(f);
        const auto src = f.register_mr(reg.create_buffer(4096, AllocClass::page_backed), false);
        const auto dst = f.register_mr(reg.create_buffer(4096, AllocClass::page_backed), true);
        // Some settled traffic first, polled or left queued.
        const auto settled = gen.range(0, 8);
        for (std::uint64_t i = 0; i < settled; ++i) f.rdma_write(q.a, src.sge(0, 64), dst.base, *dst.rkey);
        if (gen.coin()) f.poll_cq(f.default_send_cq(), 64);
        f.hold_delivery(true);
        const auto n = gen.range(2, 32);
        for (std::uint64_t i = 0; i < n; ++i) {
            if (gen.coin()) {
                f.post_recv(q.b, {});
                f.rdma_write_imm(q.a, src.sge(0, 64), dst.base + 64 * (i % 64), *dst.rkey,
                                 static_cast<std::uint32_t>(i));
            } else {
                f.rdma_write(q.a, src.sge(0, 64), dst.base + 64 * (i % 64), *dst.rkey);
            }
        }
        const auto in_flight = f.pending_sends(q.a);
        c.expect(in_flight >= 2, tag + fmt::format(" only {} in flight at shutdown", in_flight));

        workloads::composed_shutdown(&o, &f, &reg);
        const auto snapshot = log.events().size();
        std::this_thread::sleep_for(std::chrono::milliseconds(1));

        std::set<std::uint64_t> posted, completed;
        std::vector<obs::TeardownStage> stages;
        bool fabric_down = false;
        for (const auto& e : log.events()) {
            if (e.kind == obs::EventKind::teardown) {
                stages.push_back(e.stage);
                fabric_down = fabric_down || e.stage == obs::TeardownStage::fabric;
            } else if (e.kind == obs::EventKind::rdma_post) {
                posted.insert(e.id);
            } else if (posted.count(e.id)) {
                const auto st = static_cast<WcStatus>(e.value);
                c.expect(!fabric_down, tag + " completion after fabric teardown");
                c.expect(st == WcStatus::ok || st == WcStatus::flushed, tag + " bad status");
                c.expect(completed.insert(e.id).second, tag + " duplicate completion");
                flushed_total += st == WcStatus::flushed;
            }
        }
        c.expect(posted == completed, tag + " posted WR without completion");
        c.expect(log.events().size() == snapshot, tag + " events after shutdown returned");
        c.expect(f.stats().late_deliveries == 0, tag + " late deliveries");
        c.expect(stages == std::vector<obs::TeardownStage>{obs::TeardownStage::observability_detach,
                                                           obs::TeardownStage::fabric, obs::TeardownStage::registry},
                 tag + " teardown order");
        bool stale = false;
        try {
            f.poll_cq(f.default_send_cq(), 16);
        } catch (const Error& e) {
            stale = e.code() == ErrorCode::stale_handle;
        }
        c.expect(stale, tag + " poll after teardown not stale");
        posted_total += posted.size();
    }
    return c.done(fmt::format("100 reps, {} WRs all completed-or-flushed ({} flushed), order detach<fabric<registry",
                              posted_total, flushed_total));
}

// -- 7 ------------------------------------------------------------------------------

Outcome lifecycle_discipline() {
    Checker c;
    testsupport::Gen gen(707);
    std::uint64_t busy_expected = 0, busy_seen = 0, exports_checked = 0;
    for (int round = 0; round < 10'000; ++round) {
        BufferRegistry reg;
        std::map<ExportId, int> fired;
        reg.set_release_callback([&](ExportId e) { ++fired[e]; });

        struct Model {
            BufferId id;
            std::vector<MapToken> maps;
            std::optional<ExportId> exp; // current, not dropped
            std::vector<AttachmentId> attachments;
            bool destroyed = false;
        };
        std::vector<Model> bufs;
        for (int i = 0; i < 2; ++i) bufs.push_back({reg.create_buffer(4096, AllocClass::page_backed), {}, {}, {}, false});
        std::map<AttachmentId, ExportId> attach_owner;
        std::set<ExportId> all_exports;

        const auto steps = gen.range(5, 30);
        for (std::uint64_t s = 0; s < steps; ++s) {
            auto& b = bufs[gen.range(0, 1)];
            if (b.destroyed) continue;
            switch (gen.range(0, 6)) {
            case 0: b.maps.push_back(reg.map_buffer(b.id)); break;
            case 1:
                if (!b.maps.empty()) {
                    reg.unmap_buffer(b.maps.back());
                    b.maps.pop_back();
                }
                break;
            case 2:
                if (!b.exp && b.attachments.empty()) {
                    b.exp = reg.export_buffer(b.id);
                    all_exports.insert(*b.exp);
                }
                break;
            case 3:
                if (b.exp) {
                    const auto a = reg.attach(*b.exp, gen.range(1, 100));
                    b.attachments.push_back(a);
                    attach_owner[a] = *b.exp;
                }
                break;
            case 4:
                if (!b.attachments.empty()) {
                    reg.detach(b.attachments.back());
                    b.attachments.pop_back();
                }
                break;
            case 5:
                if (b.exp) {
                    reg.drop_export(*b.exp);
                    b.exp.reset();
                }
                break;
            default: {
                const bool must_refuse = !b.maps.empty() || !b.attachments.empty();
                bool refused = false;
                try {
                    reg.destroy_buffer(b.id);
                } catch (const Error& e) {
                    refused = e.code() == ErrorCode::busy;
                }
                busy_expected += must_refuse;
                busy_seen += must_refuse && refused;
                c.expect(refused == must_refuse, fmt::format("round {} destroy refused={} expected={}", round,
                                                             refused, must_refuse));
                if (!refused) b.destroyed = true;
            }
            }
        }
        for (auto& b : bufs) {
            for (auto a : b.attachments) reg.detach(a);
            if (b.exp) reg.drop_export(*b.exp);
            for (auto t : b.maps) reg.unmap_buffer(t);
        }
        for (auto e : all_exports) {
            const auto info = reg.export_info(e);
            c.expect(info.released && info.release_count == 1 && fired[e] == 1,
                     fmt::format("round {} export {} released {} times", round, e, fired[e]));
            ++exports_checked;
        }
        c.expect(reg.shutdown() == 0, fmt::format("round {} shutdown left buffers", round));
    }
    c.expect(busy_expected > 1000, "too few guarded destroys generated");
    return c.done(fmt::format("10^4 interleavings, {}/{} guarded destroys rejected, {} exports released once",
                              busy_seen, busy_expected, exports_checked));
}

// -- 8 ------------------------------------------------------------------------------

Outcome lock_order() {
    Checker c;
    std::size_t sequences = 0, accepted = 0;
    std::vector<int> seq;
    std::function<void()> rec = [&] {
        if (!seq.empty()) {
            ++sequences;
            LockOrderValidator v;
            bool rejected = false;
            bool increasing = true;
            for (std::size_t i = 0; i < seq.size(); ++i) {
                if (i > 0 && seq[i - 1] >= seq[i]) increasing = false;
                rejected = v.check_acquire(static_cast<LockLevel>(seq[i])).has_value() || rejected;
            }
            c.expect(rejected == !increasing, "sequence misclassified");
            accepted += !rejected;
        }
        if (seq.size() == 4) return;
        for (int l = 0; l < 4; ++l) {
            seq.push_back(l);
            rec();
            seq.pop_back();
        }
    };
    rec();
    c.expect(sequences == 340, fmt::format("{} sequences", sequences));
    c.expect(accepted == 15, fmt::format("{} accepted", accepted));
    return c.done(fmt::format("{} sequences, {} accepted (all order-respecting), {} rejected", sequences, accepted,
                              sequences - accepted));
}

// -- 9 ------------------------------------------------------------------------------

Outcome qp_flush() {
    using namespace dmaplane::fabric;
    Checker c;
    for (std::uint32_t n = 0; n <= 32; ++n) {
        BufferRegistry reg;
        Fabric f(reg, LinkConfig{});
        testsupport::Loop q(f);
        const auto src = f.register_mr(reg.create_buffer(64, AllocClass::page_backed), false);
        const auto dst = f.register_mr(reg.create_buffer(64, AllocClass::page_backed), true);
        f.hold_delivery(true);
        for (std::uint32_t i = 0; i < n; ++i) f.rdma_write(q.a, src.sge(0, 8), dst.base, *dst.rkey);
        f.modify_qp(q.a, QpState::error);
        const auto wcs = f.poll_cq(f.default_send_cq(), 64);
        std::size_t flushed = 0;
        for (const auto& wc : wcs) flushed += wc.status == WcStatus::flushed;
        c.expect(wcs.size() == n && flushed == n, fmt::format("N={} gave {} flushed of {}", n, flushed, wcs.size()));
        f.teardown();
    }
    return c.done("N in 0..32: exactly N flushed completions each");
}

// -- 10 -----------------------------------------------------------------------------

Outcome numa_properties() {
    Checker c;
    const double penalty = placement::cross_node_penalty({{6778, 5577}, {5013, 6095}});
    c.expect(std::fabs(penalty * 100 - 17.7) <= 0.5, fmt::format("penalty {:.3f}%", penalty * 100));

    BufferRegistry reg;
    placement::SimulatedPlacement sim;
    placement::Placer p(reg, placement::parse_topology("nodes=2; distance=10,21;21,10"), sim);
    std::size_t injected = 0;
    for (NodeId node = 0; node < 2; ++node) {
        for (std::optional<NodeId> inj : {std::optional<NodeId>{}, std::optional<NodeId>{0}, std::optional<NodeId>{1}}) {
            for (int rep = 0; rep < 50; ++rep) {
                const auto a = p.alloc_on_node(4096, node, inj);
                const bool moved = inj && *inj != node;
                injected += moved;
                c.expect(a.report.fell_back == moved, "fell_back inconsistent");
                c.expect(reg.info(a.buffer).fell_back == moved, "registry fell_back inconsistent");
            }
        }
    }
    c.expect(p.silent_fallbacks() == 0, "silent fallbacks");
    c.expect(p.fallbacks() == injected, "fallback count");
    return c.done(fmt::format("penalty {:.2f}%, {} injected fallbacks all flagged, silent=0", penalty * 100, injected));
}

// -- 11 -----------------------------------------------------------------------------

Outcome histogram_conservation() {
    obs::LatencyHistogram h;
    std::vector<std::thread> threads;
    for (int t = 0; t < 8; ++t) {
        threads.emplace_back([&h, t] {
            testsupport::Gen g(t + 1);
            for (int i = 0; i < 100'000; ++i) {
                if (i % 8 == 0) {
                    h.record(std::chrono::nanoseconds(g.range(0, 999)));
                } else {
                    h.record_micros(g.range(1, 1u << 20));
                }
            }
        });
    }
    for (auto& t : threads) t.join();
    std::uint64_t sum = h.underflow();
    for (auto b : h.buckets()) sum += b;
    Checker c;
    c.expect(sum == 800'000, fmt::format("bucket sum {}", sum));
    c.expect(h.total() == 800'000, fmt::format("total {}", h.total()));
    return c.done(fmt::format("8 x 10^5 records, bucket sum {}", sum));
}

} // namespace

int main() {
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"flow-control safety (stress)", flow_control_safety},
        {"sustained stream", sustained_stream},
        {"credit invariant property", credit_invariant},
        {"end-to-end KV transfer (two processes)", kv_two_process},
        {"immediate-tag bijection", tag_bijection},
        {"teardown safety", teardown_safety},
        {"lifecycle discipline", lifecycle_discipline},
        {"lock-order validator", lock_order},
        {"QP flush", qp_flush},
        {"NUMA properties", numa_properties},
        {"histogram conservation", histogram_conservation},
    };
    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        Outcome o;
        const auto t0 = Clock::now();
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
        failed += !o.pass;
        std::printf("criterion %zu %s: %s (%s) [%.2fs]\n", i + 1, criteria[i].first.c_str(), o.pass ? "PASS" : "FAIL",
                    o.detail.c_str(), secs);
        std::fflush(stdout);
    }
    std::printf("%s: %zu of %zu criteria passed\n", failed ? "FAIL" : "PASS", criteria.size() - failed,
                criteria.size());
    return failed ? 1 : 0;
}
