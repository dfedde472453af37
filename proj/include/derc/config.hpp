#pragma once

// Flat JSON experiment configuration and the JSON forms of the component
// configs shared with checkpoints.

#include "derc/data.hpp"
#include "derc/model.hpp"
#include "derc/probe.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace derc {

/// Unreadable, malformed or inconsistent configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void to_json(nlohmann::json& j, const EncoderConfig& c);
void from_json(const nlohmann::json& j, EncoderConfig& c);
void to_json(nlohmann::json& j, const DercConfig& c);
void from_json(const nlohmann::json& j, DercConfig& c);

struct ExperimentConfig {
  std::uint64_t seed = 0;
  /// Directory holding train/val/ood JSONL; empty means "<out>/data".
  std::string data_dir;
  DatasetSpec dataset;
  EncoderConfig encoder;
  DercConfig derc;
  TrainConfig train;
  ProbeConfig probe;
  std::size_t n_perturbations = 5;
  /// Split scored by interpret: val or ood.
  std::string interp_split = "val";
  /// l_b values for sweep-lb; empty means 1..L-1.
  std::vector<std::size_t> sweep_layers;
  /// alpha grid for sweep-alpha; empty means 0, 0.1, ..., 1.
  std::vector<double> alphas;

  /// Reads a flat object. Missing keys keep their defaults; unknown keys
  /// and type mismatches raise ConfigError.
  static ExperimentConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;

  /// Derives the per-stream seeds from `seed` and sizes the vocabulary.
  void resolve();
  /// Validates every component.
  void validate() const;

  std::vector<std::size_t> resolved_sweep_layers() const;
  std::vector<double> resolved_alphas() const;

  /// FNV-1a of the canonical JSON dump.
  std::uint64_t hash() const;
  std::string hash_hex() const;
};

ExperimentConfig load_config(const std::filesystem::path& path);
void save_config(const ExperimentConfig& config, const std::filesystem::path& path);

}  // namespace derc
