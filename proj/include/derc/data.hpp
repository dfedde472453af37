#pragma once

#include "derc/bias.hpp"
#include "derc/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace derc {

/// Thrown when a dataset spec cannot be realized.
class GenerationError : public ContractError {
 public:
  using ContractError::ContractError;
};

/// Malformed dataset file; the message carries the 1-based line number.
class DataFormatError : public std::runtime_error {
 public:
  DataFormatError(std::size_t line, const std::string& what);
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

struct DatasetSpec {
  std::size_t n_train = 20000;
  std::size_t n_val = 4000;
  std::size_t n_ood = 4000;
  double bias_rate = 0.9;
  double bias_rate_ood = 0.0;
  std::size_t n_keyword_classes = 40;
  std::size_t synonyms_per_class = 3;
  std::size_t n_filler = 400;
  std::size_t min_sentence_len = 8;
  std::size_t max_sentence_len = 12;
  std::size_t shard_size = 1000;
  std::uint64_t seed = 1;

  /// Throws GenerationError naming the violated constraint.
  void validate() const;
  bool operator==(const DatasetSpec&) const = default;
};

/// Closed vocabulary: specials, then keyword synonyms grouped by class,
/// then filler words.
class Vocabulary {
 public:
  Vocabulary(std::size_t n_classes, std::size_t synonyms, std::size_t n_filler);
  explicit Vocabulary(const DatasetSpec& spec)
      : Vocabulary(spec.n_keyword_classes, spec.synonyms_per_class, spec.n_filler) {}

  std::size_t size() const { return first_filler_ + n_filler_; }
  std::size_t num_classes() const { return n_classes_; }
  std::size_t synonyms() const { return synonyms_; }
  std::size_t num_fillers() const { return n_filler_; }

  std::size_t keyword(std::size_t cls, std::size_t synonym) const;
  std::size_t filler(std::size_t i) const { return first_filler_ + i; }
  bool is_keyword(std::size_t token) const;
  bool is_filler(std::size_t token) const { return token >= first_filler_ && token < size(); }
  std::size_t keyword_class(std::size_t token) const;
  std::string surface(std::size_t token) const;

 private:
  std::size_t n_classes_, synonyms_, n_filler_, first_filler_;
};

struct Dataset {
  std::vector<Instance> train;
  std::vector<Instance> val;
  std::vector<Instance> ood;
};

/// Label-balanced splits in which the overlap shortcut agrees with the
/// label for exactly round(rate * n) instances.
Dataset generate(const DatasetSpec& spec);

/// Label from the keyword classes alone.
std::size_t semantic_label(const Instance& inst, const Vocabulary& vocab);

void write_jsonl(std::span<const Instance> instances, std::ostream& out);
void write_jsonl(std::span<const Instance> instances, const std::filesystem::path& path);
/// Unknown fields are reported on `warnings` (if given) and ignored.
std::vector<Instance> read_jsonl(std::istream& in, std::ostream* warnings = nullptr);
std::vector<Instance> read_jsonl(const std::filesystem::path& path, std::ostream* warnings = nullptr);

void write_vocab_json(const Vocabulary& vocab, const std::filesystem::path& path);

struct SplitSummary {
  std::size_t count = 0;
  std::size_t duplicates = 0;
  std::size_t biased = 0;
  std::size_t anti_biased = 0;
  std::size_t neutral = 0;
  /// Fraction of instances whose overlap agrees with the label.
  double agreement() const { return count ? static_cast<double>(biased) / count : 0.0; }
};

SplitSummary summarize(std::span<const Instance> instances);

}  // namespace derc
