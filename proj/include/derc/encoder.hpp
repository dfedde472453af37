#pragma once

// Mini BERT-style encoder: token + position + segment embeddings followed by
// L post-layer-norm transformer layers. Every intermediate hidden state is
// exposed so that classifiers can tap the [CLS] row of any layer.

#include "derc/parameters.hpp"
#include "derc/tensor.hpp"

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace derc {

namespace tokens {
inline constexpr std::size_t kPad = 0;
inline constexpr std::size_t kCls = 1;
inline constexpr std::size_t kSep = 2;
inline constexpr std::size_t kNumSpecial = 3;
}  // namespace tokens

struct EncoderConfig {
  std::size_t num_layers = 6;
  std::size_t d_model = 64;
  std::size_t num_heads = 4;
  std::size_t d_ff = 128;
  std::size_t vocab_size = 0;
  std::size_t max_len = 32;
  std::uint64_t seed = 0;
  double init_std = 0.02;

  /// Throws ContractError on an unusable configuration.
  void validate() const;
  bool operator==(const EncoderConfig&) const = default;
};

/// Token and segment ids of one "[CLS] a [SEP] b [SEP]" input.
struct EncodedInput {
  std::vector<std::size_t> tokens;
  std::vector<std::size_t> segments;

  std::size_t size() const { return tokens.size(); }
};

/// Thrown when an input does not fit in the encoder's position table.
class InputTooLongError : public ContractError {
 public:
  using ContractError::ContractError;
};

/// Builds the standard pair input. Both sentences must be nonempty and the
/// wrapped length must not exceed `max_len`.
EncodedInput build_input(std::span<const std::size_t> tokens_a, std::span<const std::size_t> tokens_b,
                         std::size_t max_len);

/// Same layout as build_input but accepts empty sentences; used for
/// rationale-only and rationale-deleted inputs.
EncodedInput wrap_pair(std::span<const std::size_t> tokens_a, std::span<const std::size_t> tokens_b);

/// Several inputs packed row-wise with no padding.
struct PackedBatch {
  std::vector<std::size_t> tokens;
  std::vector<std::size_t> segments;
  std::vector<std::size_t> positions;
  std::vector<SequenceSpan> spans;
  std::vector<std::size_t> cls_rows;

  std::size_t num_sequences() const { return spans.size(); }
  std::size_t num_tokens() const { return tokens.size(); }
};

PackedBatch pack_inputs(std::span<const EncodedInput> inputs);

/// Hidden states of a packed batch. states[0] is the embedding output and
/// states[l] the output of layer l; attentions[l-1] holds the per-sequence
/// [heads, len, len] blocks of layer l concatenated in span order.
struct BatchStates {
  std::vector<Tensor> states;
  std::vector<Buffer> attentions;
  std::vector<SequenceSpan> spans;
  std::vector<std::size_t> cls_rows;
  std::size_t num_heads = 0;

  /// Attention weight of `head` from query `row` to key `col` in a sequence.
  double attention(std::size_t layer, std::size_t sequence, std::size_t head, std::size_t row,
                   std::size_t col) const;
};

/// Single-instance view: states are [seq, d], attentions [heads, seq, seq].
struct LayerStates {
  std::vector<Tensor> states;
  std::vector<Tensor> attentions;
};

class Encoder {
 public:
  /// Registers all encoder parameters in `params` (names prefixed with
  /// `prefix`) and initializes them from `rng`.
  Encoder(const EncoderConfig& config, ParameterSet& params, std::mt19937_64& rng,
          const std::string& prefix = "encoder.");

  const EncoderConfig& config() const { return config_; }
  std::size_t first_param() const { return first_; }
  std::size_t num_params() const { return count_; }

  /// Sum of token, position and segment lookups, then layer norm.
  Tensor embed(std::span<const Tensor> weights, const PackedBatch& batch) const;

  struct LayerOutput {
    Tensor hidden;
    Buffer attention;
  };
  /// One transformer layer (1-based `layer`): h1 = LN(h + MHSA(h)),
  /// h' = LN(h1 + MLP(h1)).
  LayerOutput layer(std::span<const Tensor> weights, const Tensor& hidden, const PackedBatch& batch,
                    std::size_t layer) const;

  /// Runs the embedding and layers 1..num_layers (or only up to `up_to`).
  BatchStates forward(std::span<const Tensor> weights, const PackedBatch& batch) const;
  BatchStates forward(std::span<const Tensor> weights, const PackedBatch& batch, std::size_t up_to) const;

  LayerStates encode(std::span<const Tensor> weights, const EncodedInput& input) const;

 private:
  enum LayerParam : std::size_t {
    kWq, kBq, kWk, kBk, kWv, kBv, kWo, kBo, kLn1Gamma, kLn1Beta,
    kW1, kB1, kW2, kB2, kLn2Gamma, kLn2Beta, kPerLayer
  };
  std::size_t layer_param(std::size_t layer, LayerParam p) const {
    return first_ + 5 + (layer - 1) * kPerLayer + p;
  }

  EncoderConfig config_;
  std::size_t first_ = 0;
  std::size_t count_ = 0;
};

/// Row 0 of states[layer], as a [d_model] vector.
Tensor cls_at(const LayerStates& states, std::size_t layer);

/// [CLS] rows of every sequence at `layer`, as [batch, d_model].
Tensor cls_rows(const BatchStates& states, std::size_t layer);

}  // namespace derc
