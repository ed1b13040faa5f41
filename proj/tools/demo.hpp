#pragma once

#include <chrono>
#include <cstdint>
#include <string>

#include "report.hpp"

namespace dmaplane::cli {

struct Endpoint {
    std::string host;
    std::uint16_t port = 0;
};

/// "host:port" or ":port". Throws invalid-argument.
Endpoint parse_endpoint(const std::string& text, const std::string& default_host);

struct DemoRecvOptions {
    Endpoint listen{"0.0.0.0", 7470};
    std::chrono::milliseconds timeout{30'000};
};

struct DemoSendOptions {
    Endpoint peer{"127.0.0.1", 7470};
    std::uint32_t layers = 4;
    std::uint32_t chunks_per_layer = 4;
    std::uint32_t chunk_size = 64 * 1024;
    std::uint32_t max_credits = 16;
    std::uint32_t window = 16;
    std::uint64_t seed = 1;
    std::chrono::milliseconds timeout{30'000};
};

/// Both return the process exit code and print their report to stdout.
int demo_recv(const DemoRecvOptions& options, Format format);
int demo_send(const DemoSendOptions& options, Format format);

} // namespace dmaplane::cli
