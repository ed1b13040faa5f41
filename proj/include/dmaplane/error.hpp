#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace dmaplane {

enum class ErrorCode {
    invalid_argument,
    resource_exhausted,
    stale_handle,
    busy,
    not_found,
    invalid_state,
    local_protection,
    unreachable,
    aborted,
    accounting_corruption,
    stale_view,
    parse_error,
    protocol_error,
    missing_chunks,
    duplicate_chunk,
    would_block,
    child_alive,
};

std::string_view to_string(ErrorCode code) noexcept;

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(what), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

[[noreturn]] void raise(ErrorCode code, const std::string& what);

} // namespace dmaplane
