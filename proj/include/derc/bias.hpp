#pragma once

#include "derc/instance.hpp"

#include <span>
#include <vector>

namespace derc {

inline constexpr double kHighOverlap = 0.7;
inline constexpr double kLowOverlap = 0.3;

/// Shared unique token types over the longer sentence length. Special
/// tokens are ignored on both sides.
double overlap_ratio(std::span<const std::size_t> tokens_a, std::span<const std::size_t> tokens_b);

/// Biased when overlap agrees with the label (high and duplicate, or low
/// and non-duplicate), anti-biased when it contradicts it, otherwise
/// neutral. Both thresholds are strict.
BiasTag tag_instance(double ratio, std::size_t label);

struct SplitSets {
  std::vector<Instance> biased;
  std::vector<Instance> anti_biased;
  std::vector<Instance> neutral;
};

/// Recomputes ratio and tag for every instance and partitions the set.
SplitSets split_sets(std::span<const Instance> dataset);

}  // namespace derc
