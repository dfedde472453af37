#include "derc/bias.hpp"

#include "derc/encoder.hpp"

#include <algorithm>
#include <stdexcept>

namespace derc {

std::string_view to_string(BiasTag tag) {
  switch (tag) {
    case BiasTag::Biased: return "biased";
    case BiasTag::AntiBiased: return "anti_biased";
    case BiasTag::Neutral: return "neutral";
  }
  return "neutral";
}

BiasTag parse_bias_tag(std::string_view text) {
  if (text == "biased") return BiasTag::Biased;
  if (text == "anti_biased") return BiasTag::AntiBiased;
  if (text == "neutral") return BiasTag::Neutral;
  throw ContractError("unknown bias tag '" + std::string(text) + "'");
}

std::string_view label_name(std::size_t label) {
  if (label == labels::kDuplicate) return "duplicate";
  if (label == labels::kNonDuplicate) return "non-duplicate";
  throw IndexError("label " + std::to_string(label) + " out of range");
}

std::size_t parse_label(std::string_view text) {
  if (text == "duplicate") return labels::kDuplicate;
  if (text == "non-duplicate") return labels::kNonDuplicate;
  throw ContractError("unknown label '" + std::string(text) + "'");
}

namespace {

std::vector<std::size_t> content_types(std::span<const std::size_t> tokens, std::size_t& length) {
  std::vector<std::size_t> out;
  for (std::size_t t : tokens) {
    if (t >= tokens::kNumSpecial) out.push_back(t);
  }
  length = out.size();
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

}  // namespace

double overlap_ratio(std::span<const std::size_t> tokens_a, std::span<const std::size_t> tokens_b) {
  std::size_t len_a = 0, len_b = 0;
  const auto ua = content_types(tokens_a, len_a);
  const auto ub = content_types(tokens_b, len_b);
  if (len_a == 0 || len_b == 0) throw ContractError("overlap_ratio: both sentences must be nonempty");
  std::vector<std::size_t> shared;
  std::set_intersection(ua.begin(), ua.end(), ub.begin(), ub.end(), std::back_inserter(shared));
  return static_cast<double>(shared.size()) / static_cast<double>(std::max(len_a, len_b));
}

BiasTag tag_instance(double ratio, std::size_t label) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw ContractError("tag_instance: ratio outside [0, 1]");
  if (label >= labels::kNumLabels) throw IndexError("tag_instance: label out of range");
  const bool duplicate = label == labels::kDuplicate;
  if (ratio > kHighOverlap) return duplicate ? BiasTag::Biased : BiasTag::AntiBiased;
  if (ratio < kLowOverlap) return duplicate ? BiasTag::AntiBiased : BiasTag::Biased;
  return BiasTag::Neutral;
}

SplitSets split_sets(std::span<const Instance> dataset) {
  SplitSets out;
  for (Instance inst : dataset) {
    inst.overlap_ratio = overlap_ratio(inst.tokens_a, inst.tokens_b);
    inst.bias_tag = tag_instance(inst.overlap_ratio, inst.label);
    switch (inst.bias_tag) {
      case BiasTag::Biased: out.biased.push_back(std::move(inst)); break;
      case BiasTag::AntiBiased: out.anti_biased.push_back(std::move(inst)); break;
      case BiasTag::Neutral: out.neutral.push_back(std::move(inst)); break;
    }
  }
  return out;
}

}  // namespace derc
