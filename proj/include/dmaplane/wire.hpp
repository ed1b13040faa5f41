#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>

namespace dmaplane::wire {

// Stream-transport framing, all fields little-endian:
//   magic "DPL1" | opcode u8 | flags u8 | reserved u16 | remote_addr u64 |
//   rkey u32 | imm u32 | length u32 | payload[length]

inline constexpr std::array<std::byte, 4> magic{std::byte{'D'}, std::byte{'P'}, std::byte{'L'}, std::byte{'1'}};
inline constexpr std::size_t header_size = 28;
inline constexpr std::size_t mr_advert_size = 20;
inline constexpr std::uint32_t max_payload = 1u << 30;

enum class FrameOpcode : std::uint8_t { send = 1, write = 2, write_imm = 3, ctrl = 4 };

/// Subtype of a ctrl frame, carried in the flags byte.
enum class CtrlKind : std::uint8_t {
    mr_advert = 0,   // payload: base u64, length u64, rkey u32
    ack = 1,         // imm: completion status of the oldest unacknowledged data frame
    credit_return = 2, // imm: number of receive slots reposted
};

struct FrameHeader {
    FrameOpcode opcode = FrameOpcode::ctrl;
    std::uint8_t flags = 0;
    std::uint16_t reserved = 0;
    std::uint64_t remote_addr = 0;
    std::uint32_t rkey = 0;
    std::uint32_t imm = 0;
    std::uint32_t length = 0;

    friend bool operator==(const FrameHeader&, const FrameHeader&) = default;
};

struct MrAdvert {
    std::uint64_t base = 0;
    std::uint64_t length = 0;
    std::uint32_t rkey = 0;

    friend bool operator==(const MrAdvert&, const MrAdvert&) = default;
};

void encode_header(const FrameHeader& header, std::span<std::byte, header_size> out) noexcept;
/// Throws protocol-error on a bad magic, unknown opcode or oversized length.
FrameHeader decode_header(std::span<const std::byte, header_size> in);

void encode_mr_advert(const MrAdvert& advert, std::span<std::byte, mr_advert_size> out) noexcept;
MrAdvert decode_mr_advert(std::span<const std::byte, mr_advert_size> in) noexcept;

void put_u16(std::byte* p, std::uint16_t v) noexcept;
void put_u32(std::byte* p, std::uint32_t v) noexcept;
void put_u64(std::byte* p, std::uint64_t v) noexcept;
std::uint16_t get_u16(const std::byte* p) noexcept;
std::uint32_t get_u32(const std::byte* p) noexcept;
std::uint64_t get_u64(const std::byte* p) noexcept;

} // namespace dmaplane::wire
