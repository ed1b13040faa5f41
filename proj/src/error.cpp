#include "dmaplane/error.hpp"

namespace dmaplane {

std::string_view to_string(ErrorCode code) noexcept {
    switch (code) {
    case ErrorCode::invalid_argument: return "invalid-argument";
    case ErrorCode::resource_exhausted: return "resource-exhausted";
    case ErrorCode::stale_handle: return "stale-handle";
    case ErrorCode::busy: return "busy";
    case ErrorCode::not_found: return "not-found";
    case ErrorCode::invalid_state: return "invalid-state";
    case ErrorCode::local_protection: return "local-protection";
    case ErrorCode::unreachable: return "unreachable";
    case ErrorCode::aborted: return "aborted";
    case ErrorCode::accounting_corruption: return "accounting-corruption";
    case ErrorCode::stale_view: return "stale-view";
    case ErrorCode::parse_error: return "parse-error";
    case ErrorCode::protocol_error: return "protocol-error";
    case ErrorCode::missing_chunks: return "missing-chunks";
    case ErrorCode::duplicate_chunk: return "duplicate-chunk";
    case ErrorCode::would_block: return "would-block";
    case ErrorCode::child_alive: return "child-alive";
    }
    return "unknown";
}

void raise(ErrorCode code, const std::string& what) {
    throw Error(code, what);
}

} // namespace dmaplane
