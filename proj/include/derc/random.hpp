#pragma once

#include <cstdint>
#include <random>
#include <utility>
#include <vector>

namespace derc {

/// Offsets from the master seed for each random stream.
enum class SeedStream : std::uint64_t { Data = 1, Init = 2, Shuffle = 3, Probe = 4, Perturb = 5 };

inline std::uint64_t derive_seed(std::uint64_t master, SeedStream stream) {
  return master + static_cast<std::uint64_t>(stream);
}

/// Uniform index in [0, n). Plain modulo keeps results identical across
/// standard library implementations.
inline std::size_t uniform_index(std::mt19937_64& rng, std::size_t n) { return static_cast<std::size_t>(rng() % n); }

template <typename T>
void shuffle_in_place(std::vector<T>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[uniform_index(rng, i)]);
}

}  // namespace derc
