#pragma once

#include <cstddef>
#include <cstdint>
#include <span>

namespace pulsegate {

/// CRC-32C (Castagnoli, reflected polynomial 0x82F63B78).
std::uint32_t crc32c(std::span<const std::byte> data, std::uint32_t seed = 0) noexcept;

}  // namespace pulsegate
