#pragma once

// Model checkpoints: one line of JSON header (format version, configs and a
// parameter manifest) followed by the raw parameters as little-endian
// 64-bit doubles.

#include "derc/model.hpp"

#include "json.hpp"

#include <filesystem>
#include <iosfwd>
#include <stdexcept>

namespace derc {

inline constexpr int kCheckpointFormatVersion = 1;

/// Unreadable or inconsistent checkpoint.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Writes every parameter of `model`, including extra heads registered in
/// its ParameterSet. `metadata` is stored verbatim in the header.
void save_checkpoint(const DercModel& model, std::ostream& out, const nlohmann::json& metadata = {});
void save_checkpoint(const DercModel& model, const std::filesystem::path& path,
                     const nlohmann::json& metadata = {});

struct LoadedCheckpoint {
  DercModel model;
  nlohmann::json metadata;
};

/// Rebuilds the model from the stored configs and overwrites its
/// parameters. Header parameters the model does not create (such as probe
/// heads) are appended to its ParameterSet.
LoadedCheckpoint load_checkpoint(std::istream& in);
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace derc
