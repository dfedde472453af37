#pragma once

// Experiment pipelines behind the command-line harness. Each command reads
// its inputs, writes its artifacts under the output directory and returns
// the numbers it reported.

#include "derc/checkpoint.hpp"
#include "derc/config.hpp"
#include "derc/interp.hpp"
#include "derc/probe.hpp"

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace derc {

/// Missing or unusable input files.
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SplitAccuracy {
  double all = 0.0;
  double biased = 0.0;
  double antibiased = 0.0;
};

/// Accuracy of `predicted` on the whole split and on its tagged subsets.
/// Empty subsets report NaN.
SplitAccuracy split_accuracy(std::span<const std::size_t> predicted, std::span<const Instance> instances);

struct EvalSummary {
  SplitAccuracy val;
  SplitAccuracy ood;
  /// f_b accuracies when the model has a low head.
  std::optional<SplitAccuracy> val_low;
  std::optional<SplitAccuracy> ood_low;

  nlohmann::json to_json() const;
};

EvalSummary evaluate(const DercModel& model, std::span<const Instance> val, std::span<const Instance> ood,
                     double alpha = 0.0);

/// Argmax predictions of a linear head applied to the [CLS] state of `layer`.
std::vector<std::size_t> head_predictions(const DercModel& model, const Classifier& head, std::size_t layer,
                                          std::span<const EncodedInput> inputs);

struct CommandContext {
  ExperimentConfig config;
  std::filesystem::path out = "runs";
  /// Progress messages; null when quiet.
  std::ostream* log = nullptr;
  std::function<void(const TrainProgress&)> on_step;

  std::filesystem::path data_dir() const;
};

/// Reads train/val/ood JSONL from `dir`.
Dataset load_dataset(const std::filesystem::path& dir, std::ostream* warnings = nullptr);

/// Writes train/val/ood JSONL, vocab.json and summary.json into the data
/// directory and returns the summary.
nlohmann::json cmd_gen_data(const CommandContext& ctx);

struct TrainResult {
  DercModel model;
  TrainingHistory history;
  EvalSummary eval;
};

/// Trains in memory without writing anything.
TrainResult train_model(const ExperimentConfig& config, const Dataset& data,
                        const std::function<void(const TrainProgress&)>& on_step = {});

/// Writes model.ckpt, history.csv, eval.json and a loss chart.
EvalSummary cmd_train(const CommandContext& ctx);

/// Probes a Baseline checkpoint. Writes probe_accuracy.csv,
/// probe_curves.csv, probe_curves_raw.csv, probe.svg and probed.ckpt
/// (the model plus its probe heads).
ProbeReport cmd_probe(const CommandContext& ctx, const std::filesystem::path& checkpoint);

struct LayerSweepRow {
  std::size_t l_b = 0;
  double val_accuracy = 0.0;
  double ood_accuracy = 0.0;
};

/// One DeRC training per l_b with fixed seed and data.
std::vector<LayerSweepRow> cmd_sweep_lb(const CommandContext& ctx);

struct AlphaSweepRow {
  double alpha = 0.0;
  double val_accuracy = 0.0;
  double antibiased_accuracy = 0.0;
};

/// Inference-only sweep of a DeRC checkpoint over the alpha grid.
std::vector<AlphaSweepRow> cmd_sweep_alpha(const CommandContext& ctx, const std::filesystem::path& checkpoint);

/// Interpretability report per checkpoint. The model tag is the file stem,
/// prefixed with the parent directory name when two stems coincide.
std::vector<InterpReport> cmd_interpret(const CommandContext& ctx,
                                        std::span<const std::filesystem::path> checkpoints);

struct HeadGapRow {
  std::string model_tag;
  Mode mode = Mode::Baseline;
  std::size_t low_layer = 0;
  double low_ood_accuracy = 0.0;
  double top_ood_accuracy = 0.0;
  double gap() const { return top_ood_accuracy - low_ood_accuracy; }
};

/// OOD accuracy of the low head (f_b, or a probe for Baseline) and f_L.
std::vector<HeadGapRow> cmd_compare_heads(const CommandContext& ctx,
                                          std::span<const std::filesystem::path> checkpoints);

}  // namespace derc
