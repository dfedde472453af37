#pragma once

// Linear probes on the frozen [CLS] states of every encoder layer.

#include "derc/model.hpp"

#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace derc {

struct ProbeConfig {
  std::size_t epochs = 5;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  double init_std = 0.02;
  std::uint64_t seed = 0;
  /// Steps averaged into each smoothed loss-curve row.
  std::size_t smoothing_window = 50;

  void validate() const;
  bool operator==(const ProbeConfig&) const = default;
};

struct ProbeAccuracy {
  std::size_t layer = 0;
  std::string split;  // biased | val | antibiased
  double accuracy = 0.0;
};

struct ProbeReport {
  /// Three rows per layer 1..L, in the order biased, val, antibiased.
  std::vector<ProbeAccuracy> accuracies;
  /// Loss curves averaged over smoothing windows; head = probe layer.
  TrainingHistory curves;
  /// The same curves, one row per step.
  TrainingHistory raw_curves;
  /// Trained probes, registered as "probe.<layer>.weight" / ".bias".
  ParameterSet heads;

  double accuracy(std::size_t layer, std::string_view split) const;
};

std::string probe_prefix(std::size_t layer);

/// Trains a fresh linear classifier on detached [CLS] states of each layer
/// 1..L. Bias tags are recomputed from the tokens. The model is not touched.
ProbeReport probe_layers(const DercModel& model, std::span<const Instance> train_set,
                         std::span<const Instance> val_set, const ProbeConfig& cfg);

/// Columns layer, split, accuracy.
void write_probe_csv(const ProbeReport& report, std::ostream& out);

}  // namespace derc
