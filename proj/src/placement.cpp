#include "dmaplane/placement.hpp"

#include <numa.h>
#include <numaif.h>

#include <algorithm>
#include <chrono>
#include <cstring>
#include <fstream>
#include <sstream>

#include <fmt/format.h>

#include "dmaplane/error.hpp"

namespace dmaplane::placement {

namespace {

std::string_view trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string_view::npos) return {};
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

[[noreturn]] void parse_fail(std::size_t line, const std::string& what) {
    raise(ErrorCode::parse_error, "line " + std::to_string(line) + ": " + what);
}

int parse_int(std::string_view text, std::size_t line) {
    text = trim(text);
    if (text.empty()) parse_fail(line, "empty number");
    int value = 0;
    for (char c : text) {
        if (c < '0' || c > '9') parse_fail(line, "not a number: '" + std::string(text) + "'");
        value = value * 10 + (c - '0');
        if (value > 1'000'000) parse_fail(line, "number out of range");
    }
    return value;
}

class InjectingPolicy final : public PlacementPolicy {
public:
    InjectingPolicy(PlacementPolicy& base, NodeId forced) : base_(base), forced_(forced) {}
    void prepare(std::span<std::byte> region, std::optional<NodeId> requested) override {
        base_.prepare(region, requested);
    }
    NodeId resolve(std::span<const std::byte>, std::optional<NodeId>) override { return forced_; }

private:
    PlacementPolicy& base_;
    NodeId forced_;
};

double median_of(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const auto n = v.size();
    return n % 2 ? v[n / 2] : (v[n / 2 - 1] + v[n / 2]) / 2;
}

} // namespace

// -- Topology ---------------------------------------------------------------------

Topology query_host_topology() {
    Topology t;
    t.source = "host";
    if (::numa_available() < 0) return t;
    const int nodes = ::numa_max_node() + 1;
    t.node_count = nodes;
    t.distance.assign(nodes, std::vector<int>(nodes, 0));
    for (int i = 0; i < nodes; ++i) {
        for (int j = 0; j < nodes; ++j) {
            const int d = ::numa_distance(i, j);
            t.distance[i][j] = d > 0 ? d : (i == j ? 10 : 20);
        }
    }
    for (int i = 0; i < nodes; ++i) {
        for (int j = 0; j < nodes; ++j) t.asymmetric |= t.distance[i][j] != t.distance[j][i];
    }
    return t;
}

Topology parse_topology(std::string_view text) {
    struct Item {
        std::string key;
        std::vector<std::pair<std::string, std::size_t>> values; // value text, line
    };
    std::vector<Item> items;

    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        const auto end = std::min(text.find('\n', pos), text.size());
        auto line = text.substr(pos, end - pos);
        ++line_no;
        pos = end + 1;
        if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);

        std::size_t start = 0;
        while (start <= line.size()) {
            const auto semi = std::min(line.find(';', start), line.size());
            const auto token = trim(line.substr(start, semi - start));
            start = semi + 1;
            if (token.empty()) continue;
            if (const auto eq = token.find('='); eq != std::string_view::npos) {
                const auto key = trim(token.substr(0, eq));
                if (key != "nodes" && key != "distance") parse_fail(line_no, "unknown key '" + std::string(key) + "'");
                for (const auto& it : items) {
                    if (it.key == key) parse_fail(line_no, "duplicate key '" + std::string(key) + "'");
                }
                items.push_back({std::string(key), {{std::string(trim(token.substr(eq + 1))), line_no}}});
            } else {
                if (items.empty() || items.back().key != "distance") {
                    parse_fail(line_no, "expected key=value, got '" + std::string(token) + "'");
                }
                items.back().values.push_back({std::string(token), line_no});
            }
        }
        if (end == text.size()) break;
    }

    Topology t;
    t.source = "config";
    const Item* nodes_item = nullptr;
    const Item* dist_item = nullptr;
    for (const auto& it : items) (it.key == "nodes" ? nodes_item : dist_item) = &it;
    if (!nodes_item) parse_fail(line_no, "missing nodes=");

    const auto nodes_line = nodes_item->values.front().second;
    t.node_count = parse_int(nodes_item->values.front().first, nodes_line);
    if (t.node_count < 1 || t.node_count > 64) parse_fail(nodes_line, "nodes must be in 1..64");
    const auto n = static_cast<std::size_t>(t.node_count);

    t.distance.assign(n, std::vector<int>(n, 20));
    for (std::size_t i = 0; i < n; ++i) t.distance[i][i] = 10;
    if (dist_item) {
        const auto& rows = dist_item->values;
        if (rows.size() != n) {
            parse_fail(rows.back().second, "distance has " + std::to_string(rows.size()) + " rows, expected " +
                                               std::to_string(n));
        }
        for (std::size_t i = 0; i < n; ++i) {
            const auto& [row_text, row_line] = rows[i];
            std::vector<int> row;
            std::string_view rest = row_text;
            for (;;) {
                const auto comma = rest.find(',');
                row.push_back(parse_int(rest.substr(0, comma), row_line));
                if (comma == std::string_view::npos) break;
                rest = rest.substr(comma + 1);
            }
            if (row.size() != n) {
                parse_fail(row_line, "distance row " + std::to_string(i) + " has " + std::to_string(row.size()) +
                                         " cells, expected " + std::to_string(n));
            }
            for (int d : row) {
                if (d <= 0) parse_fail(row_line, "distances must be positive");
            }
            if (*std::min_element(row.begin(), row.end()) != row[i]) {
                parse_fail(row_line, "diagonal is not the minimum of row " + std::to_string(i));
            }
            t.distance[i] = std::move(row);
        }
    }
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) t.asymmetric |= t.distance[i][j] != t.distance[j][i];
    }
    return t;
}

Topology load_topology_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) raise(ErrorCode::not_found, "cannot open topology file " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    auto t = parse_topology(ss.str());
    t.source = path;
    return t;
}

std::string format_topology(const Topology& t) {
    std::string out = fmt::format("nodes: {}\n", t.node_count);
    for (int i = 0; i < t.node_count; ++i) {
        out += fmt::format("node{}:", i);
        for (int d : t.distance[i]) out += fmt::format(" {:>3}", d);
        out += '\n';
    }
    if (t.asymmetric) out += "warning: distance matrix is asymmetric\n";
    return out;
}

// -- Policies -----------------------------------------------------------------------

NodeId SimulatedPlacement::resolve(std::span<const std::byte>, std::optional<NodeId> requested) {
    return requested.value_or(0);
}

HostPlacement::HostPlacement() : available_(::numa_available() >= 0) {}

void HostPlacement::prepare(std::span<std::byte> region, std::optional<NodeId> requested) {
    if (!available_ || !requested || region.empty()) return;
    if (*requested < 0 || *requested > ::numa_max_node()) return;
    unsigned long mask = 1ul << *requested;
    // Preferred, not bind: the kernel may still place pages elsewhere, which
    // resolve() then reports.
    ::mbind(region.data(), region.size(), MPOL_PREFERRED, &mask, sizeof(mask) * 8, 0);
}

NodeId HostPlacement::resolve(std::span<const std::byte> region, std::optional<NodeId>) {
    if (!available_ || region.empty()) return 0;
    int node = -1;
    if (::get_mempolicy(&node, nullptr, 0, const_cast<std::byte*>(region.data()), MPOL_F_NODE | MPOL_F_ADDR) != 0 ||
        node < 0) {
        return 0;
    }
    return node;
}

void HostPlacement::run_on_node(NodeId node) {
    if (available_) ::numa_run_on_node(node);
}

// -- Placer -------------------------------------------------------------------------

Placer::Placer(BufferRegistry& registry, Topology topology, PlacementPolicy& policy)
    : registry_(registry), topology_(std::move(topology)), policy_(policy) {}

Placer::Allocation Placer::alloc_on_node(std::size_t size_bytes, NodeId node, std::optional<NodeId> inject) {
    if (node < 0 || node >= topology_.node_count) {
        raise(ErrorCode::invalid_argument, "node " + std::to_string(node) + " outside topology of " +
                                               std::to_string(topology_.node_count) + " nodes");
    }
    Allocation a;
    if (inject) {
        InjectingPolicy forced(policy_, *inject);
        a.buffer = registry_.create_buffer(size_bytes, AllocClass::page_backed, node, forced);
    } else {
        a.buffer = registry_.create_buffer(size_bytes, AllocClass::page_backed, node, policy_);
    }
    const auto info = registry_.info(a.buffer);
    a.report = PlacementReport{info.requested_node, info.actual_node, info.fell_back};
    ++allocations_;
    if (a.report.fell_back) ++fallbacks_;
    if (a.report.fell_back != (a.report.actual != node)) ++silent_;
    return a;
}

// -- Bench --------------------------------------------------------------------------

std::vector<std::vector<double>> BenchResult::matrix(std::size_t size_bytes) const {
    std::vector<std::vector<double>> m(node_count, std::vector<double>(node_count, 0.0));
    for (const auto& c : cells) {
        if (c.size_bytes == size_bytes) m[c.src][c.dst] = c.median_mbps;
    }
    return m;
}

double cross_node_penalty(const std::vector<std::vector<double>>& mbps) {
    const auto n = mbps.size();
    if (n < 2) return 0.0;
    double diag = 0, off = 0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) (i == j ? diag : off) += mbps[i][j];
    }
    diag /= static_cast<double>(n);
    off /= static_cast<double>(n * (n - 1));
    if (diag <= 0) return 0.0;
    return 1.0 - off / diag;
}

BenchResult numa_memcpy_bench(BufferRegistry& registry, const Topology& topology, PlacementPolicy& policy,
                              const BenchConfig& config, const std::function<void(NodeId)>& pin) {
    if (config.sizes.empty()) raise(ErrorCode::invalid_argument, "bench needs at least one size");
    if (config.iterations == 0) raise(ErrorCode::invalid_argument, "iterations must be positive");
    for (auto s : config.sizes) {
        if (s == 0) raise(ErrorCode::invalid_argument, "bench sizes must be positive");
    }

    BenchResult result;
    result.config = config;
    result.node_count = topology.node_count;
    for (auto size : config.sizes) {
        for (NodeId src = 0; src < topology.node_count; ++src) {
            for (NodeId dst = 0; dst < topology.node_count; ++dst) {
                if (pin) pin(src);
                const auto a = registry.create_buffer(size, AllocClass::page_backed, src, policy);
                const auto b = registry.create_buffer(size, AllocClass::page_backed, dst, policy);
                const auto ta = registry.map_buffer(a);
                const auto tb = registry.map_buffer(b);
                auto from = registry.mapped_bytes(ta);
                auto to = registry.mapped_bytes(tb);
                std::memset(from.data(), 0x5a, size);

                std::vector<double> samples;
                for (unsigned i = 0; i < config.warmup + config.iterations; ++i) {
                    const auto t0 = std::chrono::steady_clock::now();
                    std::memcpy(to.data(), from.data(), size);
                    const auto t1 = std::chrono::steady_clock::now();
                    if (i < config.warmup) continue;
                    const double secs = std::max(std::chrono::duration<double>(t1 - t0).count(), 1e-9);
                    samples.push_back(static_cast<double>(size) / 1e6 / secs);
                }
                registry.unmap_buffer(ta);
                registry.unmap_buffer(tb);
                registry.destroy_buffer(a);
                registry.destroy_buffer(b);

                BenchCell cell;
                cell.src = src;
                cell.dst = dst;
                cell.size_bytes = size;
                cell.median_mbps = median_of(samples);
                cell.min_mbps = *std::min_element(samples.begin(), samples.end());
                cell.max_mbps = *std::max_element(samples.begin(), samples.end());
                result.cells.push_back(cell);
            }
        }
    }
    return result;
}

std::string format_size(std::size_t bytes) {
    if (bytes >= (1u << 20) && bytes % (1u << 20) == 0) return fmt::format("{} MB", bytes >> 20);
    if (bytes >= 1024 && bytes % 1024 == 0) return fmt::format("{} KB", bytes >> 10);
    return fmt::format("{} B", bytes);
}

std::string format_bench_table(const BenchResult& r) {
    std::vector<std::string> header{"Buffer size"};
    for (int s = 0; s < r.node_count; ++s) {
        for (int d = 0; d < r.node_count; ++d) header.push_back(fmt::format("Node {} to {}", s, d));
    }
    header.push_back("Cross-node penalty");

    std::vector<std::vector<std::string>> rows;
    for (auto size : r.config.sizes) {
        std::vector<std::string> row{format_size(size)};
        const auto m = r.matrix(size);
        for (int s = 0; s < r.node_count; ++s) {
            for (int d = 0; d < r.node_count; ++d) row.push_back(fmt::format("{:.0f}", m[s][d]));
        }
        row.push_back(r.node_count < 2 ? std::string("n/a (1 node)")
                                       : fmt::format("{:.1f}%", 100.0 * cross_node_penalty(m)));
        rows.push_back(std::move(row));
    }

    std::vector<std::size_t> width(header.size());
    for (std::size_t i = 0; i < header.size(); ++i) {
        width[i] = header[i].size();
        for (const auto& row : rows) width[i] = std::max(width[i], row[i].size());
    }
    std::string out;
    auto emit = [&](const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) {
            out += i == 0 ? fmt::format("{:<{}}", cells[i], width[i]) : fmt::format("  {:>{}}", cells[i], width[i]);
        }
        out += '\n';
    };
    emit(header);
    for (const auto& row : rows) emit(row);
    out += fmt::format("iterations: {}  warmup: {}  statistic: median MB/s\n", r.config.iterations, r.config.warmup);
    return out;
}

std::string format_bench_csv(const BenchResult& r) {
    std::string out;
    for (const auto& c : r.cells) out += fmt::format("{},{},{},{:.1f}\n", c.src, c.dst, c.size_bytes, c.median_mbps);
    return out;
}

} // namespace dmaplane::placement
