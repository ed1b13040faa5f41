#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "dmaplane/registry.hpp"

namespace dmaplane::placement {

struct Topology {
    int node_count = 1;
    /// distance[i][j], SLIT-style relative distances.
    std::vector<std::vector<int>> distance{{10}};
    bool asymmetric = false;
    std::string source = "default";
};

/// Host topology from libnuma. Non-NUMA hosts give one node at distance 10.
Topology query_host_topology();

/// Parses "key=value" items separated by ';' or newlines. Keys: nodes=N and
/// distance=row;row;... with comma-separated cells. '#' starts a comment.
/// Throws parse-error naming the offending line. An asymmetric matrix is
/// accepted and flagged; a diagonal that is not its row minimum is not.
Topology parse_topology(std::string_view text);
Topology load_topology_file(const std::string& path);

/// Rows like "node0: 10 21".
std::string format_topology(const Topology& topology);

struct PlacementReport {
    std::optional<NodeId> requested;
    NodeId actual = 0;
    bool fell_back = false;
};

/// Deterministic placement: memory lands where it was asked to.
class SimulatedPlacement final : public PlacementPolicy {
public:
    NodeId resolve(std::span<const std::byte> region, std::optional<NodeId> requested) override;
};

/// Preferred-node mbind before first touch, get_mempolicy afterwards. On
/// hosts without NUMA support everything resolves to node 0.
class HostPlacement final : public PlacementPolicy {
public:
    HostPlacement();
    void prepare(std::span<std::byte> region, std::optional<NodeId> requested) override;
    NodeId resolve(std::span<const std::byte> region, std::optional<NodeId> requested) override;
    bool numa_available() const noexcept { return available_; }
    /// Restricts the calling thread to the CPUs of `node`; no-op without NUMA.
    void run_on_node(NodeId node);

private:
    bool available_ = false;
};

/// Node-hinted allocation that always reports where memory ended up.
class Placer {
public:
    Placer(BufferRegistry& registry, Topology topology, PlacementPolicy& policy);

    struct Allocation {
        BufferId buffer = 0;
        PlacementReport report;
    };

    /// `inject_fallback_to` forces the resolved node, standing in for the
    /// allocator falling back. node >= node_count is invalid-argument.
    Allocation alloc_on_node(std::size_t size_bytes, NodeId node, std::optional<NodeId> inject_fallback_to = {});

    const Topology& topology() const noexcept { return topology_; }
    std::size_t allocations() const noexcept { return allocations_; }
    std::size_t fallbacks() const noexcept { return fallbacks_; }
    /// Allocations whose report disagrees with requested vs actual.
    std::size_t silent_fallbacks() const noexcept { return silent_; }

private:
    BufferRegistry& registry_;
    Topology topology_;
    PlacementPolicy& policy_;
    std::size_t allocations_ = 0;
    std::size_t fallbacks_ = 0;
    std::size_t silent_ = 0;
};

struct BenchConfig {
    std::vector<std::size_t> sizes{1u << 20, 64u << 20};
    unsigned iterations = 20;
    unsigned warmup = 3;
};

struct BenchCell {
    NodeId src = 0;
    NodeId dst = 0;
    std::size_t size_bytes = 0;
    double median_mbps = 0;
    double min_mbps = 0;
    double max_mbps = 0;
};

struct BenchResult {
    BenchConfig config;
    int node_count = 1;
    std::vector<BenchCell> cells;

    /// node_count x node_count median MB/s for one size.
    std::vector<std::vector<double>> matrix(std::size_t size_bytes) const;
};

/// 1 - mean(off-diagonal) / mean(diagonal). A single node has no
/// off-diagonal cells and yields 0.
double cross_node_penalty(const std::vector<std::vector<double>>& mbps);

/// memcpy bandwidth for every (src, dst, size) cell, one cell at a time.
/// `pin`, if set, is called with the source node before each cell.
BenchResult numa_memcpy_bench(BufferRegistry& registry, const Topology& topology, PlacementPolicy& policy,
                              const BenchConfig& config, const std::function<void(NodeId)>& pin = {});

std::string format_size(std::size_t bytes);
/// Aligned table: one row per size, one column per (src,dst), then penalty.
std::string format_bench_table(const BenchResult& result);
/// "src,dst,size_bytes,mbps" lines.
std::string format_bench_csv(const BenchResult& result);

} // namespace dmaplane::placement
