#pragma once

#include "derc/tensor.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace derc {

/// Ordered collection of named trainable tensors. Index order is the
/// registration order and is stable for the lifetime of a model.
class ParameterSet {
 public:
  std::size_t add(std::string name, Tensor value);

  std::size_t size() const { return values_.size(); }
  const std::string& name(std::size_t i) const { return names_.at(i); }
  const Tensor& value(std::size_t i) const { return values_.at(i); }
  Tensor& value(std::size_t i) { return values_.at(i); }
  std::optional<std::size_t> find(const std::string& name) const;

  /// Registers every parameter as a variable on `tape`.
  std::vector<Tensor> bind(Tape& tape) const;
  /// Parameter handles with no tape association, for inference.
  std::vector<Tensor> constants() const { return values_; }

  std::size_t total_elements() const;

  /// FNV-1a over names, shapes and raw value bytes.
  std::uint64_t checksum() const;
  /// Checksum restricted to parameters whose name starts with `prefix`.
  std::uint64_t checksum(const std::string& prefix) const;

  bool bit_equal(const ParameterSet& other) const;

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
};

}  // namespace derc
