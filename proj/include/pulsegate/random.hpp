#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace pulsegate {

using Rng = std::mt19937_64;

/// SplitMix64 finalizer; used to decorrelate derived seeds.
std::uint64_t mix64(std::uint64_t x) noexcept;

/// Named substream of a global seed, e.g. derive_seed(seed, "split").
std::uint64_t derive_seed(std::uint64_t seed, std::string_view name) noexcept;

/// Indexed substream, e.g. per (generation, candidate) in the genetic search.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) noexcept;

}  // namespace pulsegate
