#pragma once

#include "derc/encoder.hpp"
#include "derc/instance.hpp"

#include <array>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace derc {

enum class Mode { Baseline, DeRC, DePoE };

std::string_view to_string(Mode mode);
/// Accepts "baseline", "derc" or "depoe" (case-insensitive).
Mode parse_mode(std::string_view text);

struct DercConfig {
  std::size_t l_b = 2;
  Mode mode = Mode::DeRC;
  double alpha = 0.0;
  std::size_t num_labels = 2;

  /// l_b must lie in [1, num_layers) and alpha in [0, 1].
  void validate(std::size_t num_layers) const;
  bool operator==(const DercConfig&) const = default;
};

/// Linear softmax classifier; holds indices into a ParameterSet.
struct Classifier {
  std::size_t weight = 0;  // [K, d]
  std::size_t bias = 0;    // [K]

  /// Registers "<prefix>.weight" (normal init) and "<prefix>.bias" (zeros).
  static Classifier create(ParameterSet& params, const std::string& prefix, std::size_t num_labels,
                           std::size_t d_model, double init_std, std::mt19937_64& rng);
  /// Looks up an existing classifier registered under `prefix`.
  static std::optional<Classifier> find(const ParameterSet& params, const std::string& prefix);

  /// softmax(W h + b) for h of shape [d] or [batch, d].
  Tensor probabilities(std::span<const Tensor> weights, const Tensor& h) const;
};

/// Normalized elementwise product of two expert distributions, with the
/// products floored at 1e-12. Accepts [K] or [batch, K].
Tensor poe_combine(const Tensor& p_b, const Tensor& p_L);

/// Unweighted sum of the two cross entropies.
Tensor loss_total(const Tensor& p_b, const Tensor& p_L, std::size_t label);
Tensor loss_total(const Tensor& p_b, const Tensor& p_L, std::span<const std::size_t> labels);

/// Encoder with a top-layer classifier f_L and, outside Baseline mode, a
/// low-layer classifier f_b on layer l_b.
class DercModel {
 public:
  /// Parameters are initialized from encoder.seed. The encoder and f_L are
  /// registered before f_b, so every mode shares their initial values.
  DercModel(const EncoderConfig& encoder, const DercConfig& config);

  const EncoderConfig& encoder_config() const { return encoder_.config(); }
  const DercConfig& config() const { return config_; }
  void set_alpha(double alpha);
  const Encoder& encoder() const { return encoder_; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }
  const Classifier& top() const { return top_; }
  bool has_low() const { return low_.has_value(); }
  const Classifier& low() const;

  /// p_b = softmax(W_b h_lb + b_b).
  Tensor forward_low(std::span<const Tensor> weights, const Tensor& h_lb) const;
  /// p_L = softmax(W_L (detach(h_lb) + h_L) + b_L).
  Tensor forward_top_train(std::span<const Tensor> weights, const Tensor& h_lb, const Tensor& h_L) const;
  /// softmax(W_L (alpha h_lb + (1 - alpha) h_L) + b_L), computed without a tape.
  Tensor infer(std::span<const Tensor> weights, const Tensor& h_lb, const Tensor& h_L, double alpha) const;

  struct StepOutput {
    Tensor loss;
    /// Distribution trained by the f_b term (absent in Baseline mode).
    std::optional<Tensor> p_low;
    /// Distribution trained by the f_L term: plain, residual or ensemble.
    Tensor p_top;
  };
  /// Mode-specific training objective on a packed batch.
  StepOutput training_step(std::span<const Tensor> weights, const PackedBatch& batch,
                           std::span<const std::size_t> labels) const;

 private:
  DercConfig config_;
  ParameterSet params_;
  std::mt19937_64 rng_;
  Encoder encoder_;
  Classifier top_;
  std::optional<Classifier> low_;
};

/// Per-instance outputs of a frozen model.
struct Predictions {
  std::vector<std::size_t> labels;
  /// [n, K] top-head probabilities at the requested alpha.
  std::vector<double> top;
  /// [n, K] low-head probabilities when f_b exists.
  std::vector<double> low;
  std::size_t num_labels = 2;

  double top_prob(std::size_t i, std::size_t k) const { return top[i * num_labels + k]; }
};

/// Runs inference in chunks of `batch_size` instances.
Predictions predict(const DercModel& model, std::span<const EncodedInput> inputs, double alpha,
                    std::size_t batch_size = 64);

/// [CLS] rows of every layer 0..L for each input, as [n, d] per layer.
std::vector<std::vector<double>> cls_features(const DercModel& model, std::span<const EncodedInput> inputs,
                                              std::size_t batch_size = 64);

std::vector<EncodedInput> encode_instances(std::span<const Instance> instances, std::size_t max_len);

class Adam {
 public:
  explicit Adam(double learning_rate = 3e-4, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : learning_rate_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  /// Updates params[indices[k]] from the gradient of tape node nodes[k].
  void step(ParameterSet& params, std::span<const std::size_t> indices, const Gradients& grads,
            std::span<const NodeId> nodes);

 private:
  double learning_rate_, beta1_, beta2_, eps_;
  std::vector<std::vector<double>> m_, v_;
  std::uint64_t t_ = 0;
};

struct TrainConfig {
  std::size_t epochs = 5;
  std::size_t batch_size = 32;
  double learning_rate = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  std::size_t history_interval = 50;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

struct TrainExample {
  EncodedInput input;
  std::size_t label = 0;
  BiasTag tag = BiasTag::Neutral;
};

std::vector<TrainExample> make_examples(std::span<const Instance> instances, std::size_t max_len);

struct HistoryRow {
  std::size_t step = 0;
  std::string split;  // biased | antibiased | all
  std::string head;   // f_b | f_L, or a probe layer index
  double mean_loss = 0.0;
  double accuracy = 0.0;

  bool operator==(const HistoryRow&) const = default;
};

/// Windowed training statistics. Each row averages the instances seen
/// since the previous sample.
class TrainingHistory {
 public:
  void add(HistoryRow row) { rows_.push_back(std::move(row)); }
  const std::vector<HistoryRow>& rows() const { return rows_; }
  /// Most recent row for the split and head, if any.
  std::optional<HistoryRow> last(std::string_view split, std::string_view head) const;
  void write_csv(std::ostream& out) const;

 private:
  std::vector<HistoryRow> rows_;
};

/// Accumulates per-instance losses into history windows.
class HistoryWindow {
 public:
  explicit HistoryWindow(std::vector<std::string> heads);
  /// Records one instance for head `h` (index into the constructor list).
  void record(std::size_t h, BiasTag tag, double loss, bool correct);
  /// Emits one row per head and nonempty split, then clears the window.
  void flush(std::size_t step, TrainingHistory& history);
  bool empty() const;

 private:
  struct Acc {
    double loss = 0.0;
    std::size_t correct = 0, count = 0;
  };
  std::vector<std::string> heads_;
  std::vector<std::array<Acc, 3>> acc_;
};

/// Raised when the training loss stops being finite.
class DivergenceError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

struct TrainProgress {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double loss = 0.0;
};

/// Adam on the mode's objective, shuffling with cfg.seed each epoch.
TrainingHistory train(DercModel& model, std::span<const TrainExample> data, const TrainConfig& cfg,
                      const std::function<void(const TrainProgress&)>& on_step = {});

}  // namespace derc
