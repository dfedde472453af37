#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

namespace derc {

namespace labels {
inline constexpr std::size_t kNonDuplicate = 0;
inline constexpr std::size_t kDuplicate = 1;
inline constexpr std::size_t kNumLabels = 2;
}  // namespace labels

enum class BiasTag { Biased, AntiBiased, Neutral };

std::string_view to_string(BiasTag tag);
/// Accepts "biased", "anti_biased" or "neutral".
BiasTag parse_bias_tag(std::string_view text);

std::string_view label_name(std::size_t label);
std::size_t parse_label(std::string_view text);

/// One sentence pair. gold_rationale indexes the wrapped
/// "[CLS] a [SEP] b [SEP]" sequence.
struct Instance {
  std::string id;
  std::vector<std::size_t> tokens_a;
  std::vector<std::size_t> tokens_b;
  std::size_t label = labels::kNonDuplicate;
  double overlap_ratio = 0.0;
  BiasTag bias_tag = BiasTag::Neutral;
  std::vector<std::size_t> gold_rationale;

  bool operator==(const Instance&) const = default;
};

}  // namespace derc
