#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace contactlab {

using Rng = std::mt19937_64;

/// Independent stream for (master seed, replica index, purpose tag).
/// Streams depend only on these three numbers, never on worker count.
inline Rng make_stream(std::uint64_t master, std::uint64_t index, std::uint64_t tag = 0) {
  auto lo = [](std::uint64_t v) { return static_cast<std::uint32_t>(v & 0xffffffffu); };
  auto hi = [](std::uint64_t v) { return static_cast<std::uint32_t>(v >> 32); };
  std::seed_seq seq{lo(master), hi(master), lo(index), hi(index), lo(tag), hi(tag)};
  return Rng(seq);
}

/// Uniform on [0, 1) with 53 random bits.
inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double exponential(Rng& rng, double rate) {
  return -std::log1p(-uniform01(rng)) / rate;
}

// Purpose tags keep streams of different estimators apart under one seed.
namespace stream_tag {
inline constexpr std::uint64_t transience = 1;
inline constexpr std::uint64_t stationary = 2;
inline constexpr std::uint64_t convergence = 3;
inline constexpr std::uint64_t simulator = 4;
inline constexpr std::uint64_t heat = 5;
inline constexpr std::uint64_t poisson = 6;
inline constexpr std::uint64_t walker = 7;
inline constexpr std::uint64_t sufficient = 8;
}  // namespace stream_tag

}  // namespace contactlab
