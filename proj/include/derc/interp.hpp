#pragma once

// Attention rationales and the plausibility/faithfulness metrics computed
// from them: Token-F1, MAP under filler perturbations, sufficiency and
// comprehensiveness.

#include "derc/data.hpp"
#include "derc/model.hpp"

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace derc {

/// Importance of the non-special positions of one input.
struct TokenScores {
  std::vector<std::size_t> positions;
  std::vector<double> scores;
};

/// Top-layer attention from the [CLS] query, averaged over heads, with
/// [CLS]/[SEP] masked out and the rest renormalized to sum to 1.
std::vector<TokenScores> attention_importance(const DercModel& model, std::span<const EncodedInput> inputs,
                                              std::size_t batch_size = 64);
TokenScores attention_importance(const DercModel& model, const EncodedInput& input);

struct Rationale {
  std::string instance_id;
  /// Every scored position, most important first.
  std::vector<std::size_t> ranked_tokens;
  std::vector<double> scores;
  std::size_t k = 0;

  /// The first k ranked positions.
  std::vector<std::size_t> selected() const;
};

/// Ranks by descending score, ties to the lower position. Requires
/// 1 <= k <= number of scored tokens.
Rationale extract_rationale(const TokenScores& scores, std::size_t k, std::string instance_id = {});

/// Mean per-instance F1 of predicted against gold position sets.
double token_f1(std::span<const std::vector<std::size_t>> pred, std::span<const std::vector<std::size_t>> gold);
double token_f1(const std::vector<std::size_t>& pred, const std::vector<std::size_t>& gold);

/// (1/|X^p|) sum_i (1/i) sum_{j<=i} [x^p_j in X^o_{1:i}], comparing positions.
double map_score(std::span<const std::size_t> original, std::span<const std::size_t> perturbed);

/// Class probabilities [n, K] for a batch of inputs.
using ProbabilityFn = std::function<std::vector<double>(std::span<const EncodedInput>)>;

/// f_L probabilities at the given alpha.
ProbabilityFn model_probabilities(const DercModel& model, double alpha = 0.0);

/// The input restricted to `keep` (original order, re-wrapped with specials).
EncodedInput rationale_only(const EncodedInput& input, std::span<const std::size_t> keep);
/// The input with the `drop` positions deleted.
EncodedInput rationale_removed(const EncodedInput& input, std::span<const std::size_t> drop);

/// Per-instance F(x)_j - F(r)_j with j the argmax class on the full input.
std::vector<double> sufficiency_terms(const ProbabilityFn& f, std::span<const EncodedInput> inputs,
                                      std::span<const std::vector<std::size_t>> rationales);
/// Per-instance F(x)_j - F(x \ r)_j.
std::vector<double> comprehensiveness_terms(const ProbabilityFn& f, std::span<const EncodedInput> inputs,
                                            std::span<const std::vector<std::size_t>> rationales);
double suff(const ProbabilityFn& f, std::span<const EncodedInput> inputs,
            std::span<const std::vector<std::size_t>> rationales);
double comp(const ProbabilityFn& f, std::span<const EncodedInput> inputs,
            std::span<const std::vector<std::size_t>> rationales);

/// Copies of `inst`, each with one random filler replaced by a different
/// filler. Returns nothing (and warns) when the instance has no filler.
std::vector<Instance> perturb(const Instance& inst, const Vocabulary& vocab, std::size_t n_perturbations,
                              std::uint64_t seed, std::ostream* warnings = nullptr);

/// Arithmetic mean by pairwise summation.
double pairwise_mean(std::span<const double> values);

struct InterpReport {
  std::string model_tag;
  double token_f1 = 0.0;
  double map = 0.0;
  double suff = 0.0;
  double comp = 0.0;
  std::size_t n = 0;
};

struct InterpOptions {
  std::size_t n_perturbations = 5;
  std::uint64_t seed = 0;
  double alpha = 0.0;
};

struct InterpResult {
  InterpReport report;
  std::vector<Rationale> rationales;
};

/// All four metrics with k = |gold_rationale| per instance.
InterpResult interpret(const DercModel& model, std::span<const Instance> instances, const Vocabulary& vocab,
                       const InterpOptions& options, std::ostream* warnings = nullptr);

void write_interp_csv(std::span<const InterpReport> reports, std::ostream& out);
void write_rationales_jsonl(std::span<const Rationale> rationales, std::ostream& out);

}  // namespace derc
