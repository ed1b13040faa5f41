#include "dmaplane/wire.hpp"

#include <algorithm>
#include <string>

#include "dmaplane/error.hpp"

namespace dmaplane::wire {

void put_u16(std::byte* p, std::uint16_t v) noexcept {
    for (int i = 0; i < 2; ++i) p[i] = static_cast<std::byte>(v >> (8 * i));
}

void put_u32(std::byte* p, std::uint32_t v) noexcept {
    for (int i = 0; i < 4; ++i) p[i] = static_cast<std::byte>(v >> (8 * i));
}

void put_u64(std::byte* p, std::uint64_t v) noexcept {
    for (int i = 0; i < 8; ++i) p[i] = static_cast<std::byte>(v >> (8 * i));
}

std::uint16_t get_u16(const std::byte* p) noexcept {
    return static_cast<std::uint16_t>(std::to_integer<std::uint16_t>(p[0]) |
                                      (std::to_integer<std::uint16_t>(p[1]) << 8));
}

std::uint32_t get_u32(const std::byte* p) noexcept {
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | std::to_integer<std::uint32_t>(p[i]);
    return v;
}

std::uint64_t get_u64(const std::byte* p) noexcept {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | std::to_integer<std::uint64_t>(p[i]);
    return v;
}

void encode_header(const FrameHeader& h, std::span<std::byte, header_size> out) noexcept {
    std::byte* p = out.data();
    std::copy(magic.begin(), magic.end(), p);
    p[4] = static_cast<std::byte>(h.opcode);
    p[5] = static_cast<std::byte>(h.flags);
    put_u16(p + 6, h.reserved);
    put_u64(p + 8, h.remote_addr);
    put_u32(p + 16, h.rkey);
    put_u32(p + 20, h.imm);
    put_u32(p + 24, h.length);
}

FrameHeader decode_header(std::span<const std::byte, header_size> in) {
    const std::byte* p = in.data();
    if (!std::equal(magic.begin(), magic.end(), p)) raise(ErrorCode::protocol_error, "bad frame magic");
    const auto op = std::to_integer<std::uint8_t>(p[4]);
    if (op < 1 || op > 4) raise(ErrorCode::protocol_error, "unknown frame opcode " + std::to_string(op));
    FrameHeader h;
    h.opcode = static_cast<FrameOpcode>(op);
    h.flags = std::to_integer<std::uint8_t>(p[5]);
    h.reserved = get_u16(p + 6);
    h.remote_addr = get_u64(p + 8);
    h.rkey = get_u32(p + 16);
    h.imm = get_u32(p + 20);
    h.length = get_u32(p + 24);
    if (h.length > max_payload) raise(ErrorCode::protocol_error, "frame payload too large");
    return h;
}

void encode_mr_advert(const MrAdvert& a, std::span<std::byte, mr_advert_size> out) noexcept {
    put_u64(out.data(), a.base);
    put_u64(out.data() + 8, a.length);
    put_u32(out.data() + 16, a.rkey);
}

MrAdvert decode_mr_advert(std::span<const std::byte, mr_advert_size> in) noexcept {
    return MrAdvert{get_u64(in.data()), get_u64(in.data() + 8), get_u32(in.data() + 16)};
}

} // namespace dmaplane::wire
