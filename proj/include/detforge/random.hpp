#pragma once

#include <concepts>
#include <cstdint>
#include <limits>
#include <random>

// Distribution helpers with a fixed, portable mapping from engine output to
// values. The standard distributions are implementation-defined, which would
// break byte-identical replay across toolchains.

namespace detforge {

template <class G>
concept Full64BitGenerator =
    std::uniform_random_bit_generator<G> && (G::min() == 0) &&
    (G::max() == std::numeric_limits<std::uint64_t>::max());

using Engine = std::mt19937_64;

/// Engine for stream `stream` derived from a base seed.
inline Engine make_engine(std::uint64_t seed, std::uint64_t stream = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  return Engine(seq);
}

/// Uniform double in [0, 1) with 53 random bits.
template <Full64BitGenerator G>
double uniform01(G& g) {
  return static_cast<double>(g() >> 11) * 0x1.0p-53;
}

/// Uniform integer in [0, n), n > 0 (Lemire's multiply-and-reject).
template <Full64BitGenerator G>
std::uint64_t uniform_index(G& g, std::uint64_t n) {
  unsigned __int128 m = static_cast<unsigned __int128>(g()) * n;
  auto low = static_cast<std::uint64_t>(m);
  if (low < n) {
    const std::uint64_t threshold = (0 - n) % n;
    while (low < threshold) {
      m = static_cast<unsigned __int128>(g()) * n;
      low = static_cast<std::uint64_t>(m);
    }
  }
  return static_cast<std::uint64_t>(m >> 64);
}

}  // namespace detforge
