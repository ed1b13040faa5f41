#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "demo.hpp"
#include "dmaplane/error.hpp"
#include "dmaplane/observability.hpp"
#include "dmaplane/placement.hpp"
#include "dmaplane/registry.hpp"
#include "dmaplane/workloads.hpp"
#include "report.hpp"

namespace {

using namespace dmaplane;
using cli::Format;
using cli::Report;

struct Globals {
    std::uint64_t seed = 1;
    std::string format = "plain";
};

Format format_of(const Globals& g) { return g.format == "csv" ? Format::csv : Format::plain; }

/// "64K", "1M", "2G" or plain bytes.
std::size_t parse_size(const std::string& text) {
    if (text.empty()) raise(ErrorCode::invalid_argument, "empty size");
    std::size_t used = 0;
    unsigned long long n = 0;
    try {
        n = std::stoull(text, &used);
    } catch (const std::exception&) {
        raise(ErrorCode::invalid_argument, "bad size '" + text + "'");
    }
    const auto suffix = text.substr(used);
    if (suffix.empty()) return n;
    if (suffix == "K" || suffix == "k" || suffix == "KiB") return n << 10;
    if (suffix == "M" || suffix == "MiB") return n << 20;
    if (suffix == "G" || suffix == "GiB") return n << 30;
    raise(ErrorCode::invalid_argument, "bad size suffix in '" + text + "'");
}

void add_stream_config(Report& r, const workloads::StreamConfig& c, const Globals& g) {
    r.add("seed", g.seed);
    r.add("seconds", c.seconds);
    r.add("max_credits", c.max_credits);
    r.add("high_watermark", c.high_watermark);
    r.add("low_watermark", c.low_watermark);
    r.add("window", c.window);
    r.add("refill_batch", c.refill_batch);
    r.add("message_size", c.message_size);
    r.add("cq_depth", c.cq_depth);
    r.add("latency_us", c.latency.count());
    r.add("polling", c.opportunistic_poll ? "opportunistic" : "lazy");
}

void add_stream_results(Report& r, const workloads::StreamReport& s) {
    r.add("posted", s.posted);
    r.add("completed", s.completed);
    r.add("bytes", s.bytes);
    r.add("elapsed_s", fmt::format("{:.3f}", std::chrono::duration<double>(s.elapsed).count()));
    r.add("mbps", fmt::format("{:.1f}", s.mbps));
    for (std::size_t i = 0; i < s.windows.size(); ++i) r.add(fmt::format("window_{}_mbps", i), fmt::format("{:.1f}", s.windows[i]));
    r.add("overflow_count", s.overflow_count);
    r.add("receiver_not_ready", s.receiver_not_ready);
    r.add("error_completions", s.error_completions);
    r.add("stall_count", s.stalls);
    r.add("window_stalls", s.window_stalls);
    r.add("max_in_flight_seen", s.max_in_flight_seen);
    r.add("max_sampled_in_flight", s.max_sampled_in_flight);
    r.add("in_flight_violations", s.in_flight_violations);
    r.add("final_in_flight", s.final_in_flight);
    r.add("mean_latency_us", fmt::format("{:.2f}", s.mean_latency_us));
}

int run_stream_command(const workloads::StreamConfig& config, const Globals& g, const char* name) {
    auto c = config;
    c.seed = g.seed;
    const auto s = workloads::run_stream(c);
    Report r(format_of(g));
    r.add("command", name);
    add_stream_config(r, s.config, g);
    add_stream_results(r, s);
    std::fputs(r.render().c_str(), stdout);
    return s.overflow_count == 0 && s.receiver_not_ready == 0 && s.in_flight_violations == 0 ? 0 : 1;
}

int run_qd(const std::vector<std::uint32_t>& depths, const workloads::QdSweepConfig& base, const Globals& g) {
    auto c = base;
    c.depths = depths;
    const auto rows = workloads::run_qd_sweep(c);
    Report r(format_of(g));
    r.add("command", "qd-sweep");
    r.add("seed", g.seed);
    r.add("message_size", c.message_size);
    r.add("ops_per_depth", c.ops_per_depth);
    r.add("latency_us", c.latency.count());
    r.add("cq_depth", c.cq_depth);
    if (r.format() == Format::csv) {
        r.line("depth,mbps,mean_latency_us,ops");
        for (const auto& row : rows) r.line(fmt::format("{},{:.1f},{:.2f},{}", row.depth, row.mbps, row.mean_latency_us, row.ops));
    } else {
        r.line(fmt::format("{:>6} {:>12} {:>16} {:>8}", "depth", "MB/s", "mean_lat_us", "ops"));
        for (const auto& row : rows) {
            r.line(fmt::format("{:>6} {:>12.1f} {:>16.2f} {:>8}", row.depth, row.mbps, row.mean_latency_us, row.ops));
        }
    }
    std::fputs(r.render().c_str(), stdout);
    return 0;
}

int run_numa_bench(const std::vector<std::string>& size_texts, unsigned iterations, unsigned warmup,
                   const std::string& topology_path, const Globals& g) {
    placement::BenchConfig config;
    config.iterations = iterations;
    config.warmup = warmup;
    if (!size_texts.empty()) {
        config.sizes.clear();
        for (const auto& s : size_texts) config.sizes.push_back(parse_size(s));
    }

    placement::HostPlacement host;
    placement::SimulatedPlacement simulated;
    const bool from_file = !topology_path.empty();
    const auto topology = from_file ? placement::load_topology_file(topology_path) : placement::query_host_topology();
    PlacementPolicy& policy = from_file ? static_cast<PlacementPolicy&>(simulated) : host;

    BufferRegistry registry(RegistryConfig{.placement = &policy});
    std::function<void(NodeId)> pin;
    if (!from_file) pin = [&host](NodeId n) { host.run_on_node(n); };
    const auto result = placement::numa_memcpy_bench(registry, topology, policy, config, pin);

    Report r(format_of(g));
    r.add("command", "numa-bench");
    r.add("seed", g.seed);
    r.add("topology", topology.source);
    r.add("nodes", topology.node_count);
    r.add("placement", from_file ? "simulated" : (host.numa_available() ? "host" : "host (no numa)"));
    std::string sizes;
    for (auto s : config.sizes) sizes += (sizes.empty() ? "" : " ") + placement::format_size(s);
    r.add("sizes", sizes);
    r.add("iterations", config.iterations);
    r.add("warmup", config.warmup);
    r.line(r.format() == Format::csv ? placement::format_bench_csv(result) : placement::format_bench_table(result));
    std::fputs(r.render().c_str(), stdout);
    registry.shutdown();
    return 0;
}

int run_topology(const std::string& path, const Globals& g) {
    const auto t = path.empty() ? placement::query_host_topology() : placement::load_topology_file(path);
    Report r(format_of(g));
    r.add("command", "topology");
    r.add("source", t.source);
    r.add("nodes", t.node_count);
    r.add("asymmetric", t.asymmetric ? "yes" : "no");
    r.line(placement::format_topology(t));
    std::fputs(r.render().c_str(), stdout);
    return 0;
}

int run_stats(double seconds, const std::string& section, const Globals& g) {
    std::optional<obs::Section> only;
    if (!section.empty()) {
        for (auto s : {obs::Section::stats, obs::Section::buffers, obs::Section::rdma, obs::Section::flow,
                       obs::Section::histogram}) {
            if (obs::to_string(s) == section) only = s;
        }
        if (!only) raise(ErrorCode::invalid_argument, "unknown section '" + section + "'");
    }
    obs::Observability observability;
    workloads::StreamConfig c;
    c.seconds = seconds;
    c.seed = g.seed;
    const auto s = workloads::run_stream(c, &observability);
    std::printf("# command: stats seed: %llu seconds: %g max_credits: %u\n",
                static_cast<unsigned long long>(g.seed), seconds, c.max_credits);
    for (const auto& [sec, text] : s.stats_text) {
        if (!only || *only == sec) std::fputs(text.c_str(), stdout);
    }
    return 0;
}

int run_selftest(const Globals& g) {
    const auto checks = workloads::run_selftest(g.seed);
    Report r(format_of(g));
    r.add("command", "selftest");
    r.add("seed", g.seed);
    bool ok = true;
    for (const auto& c : checks) {
        r.add(c.name, std::string(c.passed ? "PASS" : "FAIL") + (c.detail.empty() ? "" : " (" + c.detail + ")"));
        ok = ok && c.passed;
    }
    std::fputs(r.render().c_str(), stdout);
    return ok ? 0 : 1;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"dmaplane: buffer orchestration harness"};
    app.require_subcommand(1);
    app.fallthrough();

    Globals g;
    app.add_option("--seed", g.seed, "seed for randomized runs")->envname("DMAPLANE_SEED")->capture_default_str();
    app.add_option("--format", g.format, "report format")
        ->check(CLI::IsMember({"plain", "csv"}))
        ->capture_default_str();

    workloads::StreamConfig sustained;
    auto* cmd_sustained = app.add_subcommand("sustained-stream", "credit-bounded write_imm stream on loopback");
    cmd_sustained->add_option("--seconds", sustained.seconds)->capture_default_str();
    cmd_sustained->add_option("--max-credits", sustained.max_credits)->capture_default_str();
    cmd_sustained->add_option("--message-size", sustained.message_size)->capture_default_str();
    cmd_sustained->add_option("--cq-depth", sustained.cq_depth)->capture_default_str();

    workloads::StreamConfig stress;
    stress.seconds = 5;
    stress.max_credits = 4;
    stress.high_watermark = 3;
    stress.low_watermark = 1;
    stress.opportunistic_poll = false;
    auto* cmd_stress = app.add_subcommand("stress", "tiny credit budget, poll only when out of credits");
    cmd_stress->add_option("--seconds", stress.seconds)->capture_default_str();
    cmd_stress->add_option("--max-credits", stress.max_credits)->capture_default_str();
    cmd_stress->add_option("--high", stress.high_watermark)->capture_default_str();
    cmd_stress->add_option("--low", stress.low_watermark)->capture_default_str();
    cmd_stress->add_option("--message-size", stress.message_size)->capture_default_str();
    cmd_stress->add_option("--cq-depth", stress.cq_depth)->capture_default_str();

    workloads::QdSweepConfig qd;
    std::vector<std::uint32_t> depths = qd.depths;
    auto* cmd_qd = app.add_subcommand("qd-sweep", "throughput and latency per queue depth");
    cmd_qd->add_option("--depths", depths)->delimiter(',')->capture_default_str();
    cmd_qd->add_option("--message-size", qd.message_size)->capture_default_str();
    cmd_qd->add_option("--ops", qd.ops_per_depth)->capture_default_str();

    std::vector<std::string> sizes{"1M", "64M"};
    unsigned iterations = 20, warmup = 3;
    std::string bench_topology;
    auto* cmd_numa = app.add_subcommand("numa-bench", "cross-node memcpy bandwidth matrix");
    cmd_numa->add_option("--sizes", sizes)->delimiter(',')->capture_default_str();
    cmd_numa->add_option("--iterations", iterations)->capture_default_str();
    cmd_numa->add_option("--warmup", warmup)->capture_default_str();
    cmd_numa->add_option("--topology", bench_topology, "topology config file instead of the host");

    std::string topology_config;
    auto* cmd_topology = app.add_subcommand("topology", "print the node distance matrix");
    cmd_topology->add_option("--config", topology_config, "topology config file instead of the host");

    auto* cmd_demo = app.add_subcommand("write-imm-demo", "two-process KV-cache transfer");
    cmd_demo->require_subcommand(1);
    std::string listen = ":7470";
    std::uint32_t timeout_ms = 30'000;
    auto* cmd_recv = cmd_demo->add_subcommand("recv", "listen and receive one transfer");
    cmd_recv->add_option("--listen", listen)->capture_default_str();
    cmd_recv->add_option("--timeout-ms", timeout_ms)->capture_default_str();
    cli::DemoSendOptions send_opts;
    std::string peer = "127.0.0.1:7470";
    auto* cmd_send = cmd_demo->add_subcommand("send", "connect and send one transfer");
    cmd_send->add_option("--peer", peer)->capture_default_str();
    cmd_send->add_option("--layers", send_opts.layers)->capture_default_str();
    cmd_send->add_option("--chunks-per-layer", send_opts.chunks_per_layer)->capture_default_str();
    cmd_send->add_option("--chunk-size", send_opts.chunk_size)->capture_default_str();
    cmd_send->add_option("--max-credits", send_opts.max_credits)->capture_default_str();
    cmd_send->add_option("--window", send_opts.window)->capture_default_str();
    cmd_send->add_option("--timeout-ms", timeout_ms)->capture_default_str();

    double stats_seconds = 1.0;
    std::string stats_section;
    auto* cmd_stats = app.add_subcommand("stats", "run a short stream and render the stats sections");
    cmd_stats->add_option("--seconds", stats_seconds)->capture_default_str();
    cmd_stats->add_option("--section", stats_section, "stats|buffers|rdma|flow|histogram")
        ->check(CLI::IsMember({"stats", "buffers", "rdma", "flow", "histogram"}));

    auto* cmd_selftest = app.add_subcommand("selftest", "cross-module invariant suite");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::fprintf(stderr, "usage error: %s\n", e.what());
        std::fprintf(stderr, "run with --help for usage\n");
        return 2;
    }

    try {
        if (*cmd_sustained) return run_stream_command(sustained, g, "sustained-stream");
        if (*cmd_stress) return run_stream_command(stress, g, "stress");
        if (*cmd_qd) return run_qd(depths, qd, g);
        if (*cmd_numa) return run_numa_bench(sizes, iterations, warmup, bench_topology, g);
        if (*cmd_topology) return run_topology(topology_config, g);
        if (*cmd_stats) return run_stats(stats_seconds, stats_section, g);
        if (*cmd_selftest) return run_selftest(g);
        if (*cmd_recv) {
            cli::DemoRecvOptions o;
            o.listen = cli::parse_endpoint(listen, "0.0.0.0");
            o.timeout = std::chrono::milliseconds(timeout_ms);
            return cli::demo_recv(o, format_of(g));
        }
        if (*cmd_send) {
            send_opts.peer = cli::parse_endpoint(peer, "127.0.0.1");
            send_opts.seed = g.seed;
            send_opts.timeout = std::chrono::milliseconds(timeout_ms);
            return cli::demo_send(send_opts, format_of(g));
        }
    } catch (const Error& e) {
        std::printf("error: code=%s msg=%s\n", std::string(to_string(e.code())).c_str(), e.what());
        return 1;
    } catch (const std::exception& e) {
        std::printf("error: code=internal msg=%s\n", e.what());
        return 1;
    }
    return 2;
}
