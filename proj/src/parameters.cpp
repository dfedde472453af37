#include "derc/parameters.hpp"

#include <cstring>

namespace derc {

namespace {

constexpr std::uint64_t kFnvOffset = 14695981039346656037ull;
constexpr std::uint64_t kFnvPrime = 1099511628211ull;

void fnv_mix(std::uint64_t& h, const void* data, std::size_t n) {
  const auto* bytes = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= bytes[i];
    h *= kFnvPrime;
  }
}

}  // namespace

std::size_t ParameterSet::add(std::string name, Tensor value) {
  if (find(name)) throw ContractError("duplicate parameter name " + name);
  names_.push_back(std::move(name));
  values_.push_back(std::move(value));
  return values_.size() - 1;
}

std::optional<std::size_t> ParameterSet::find(const std::string& name) const {
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (names_[i] == name) return i;
  }
  return std::nullopt;
}

std::vector<Tensor> ParameterSet::bind(Tape& tape) const {
  std::vector<Tensor> bound;
  bound.reserve(values_.size());
  for (const Tensor& v : values_) bound.push_back(tape.variable(v));
  return bound;
}

std::size_t ParameterSet::total_elements() const {
  std::size_t n = 0;
  for (const Tensor& v : values_) n += v.size();
  return n;
}

std::uint64_t ParameterSet::checksum() const { return checksum(""); }

std::uint64_t ParameterSet::checksum(const std::string& prefix) const {
  std::uint64_t h = kFnvOffset;
  for (std::size_t i = 0; i < values_.size(); ++i) {
    if (names_[i].compare(0, prefix.size(), prefix) != 0) continue;
    fnv_mix(h, names_[i].data(), names_[i].size());
    for (std::size_t d : values_[i].shape()) {
      const auto dim = static_cast<std::uint64_t>(d);
      fnv_mix(h, &dim, sizeof dim);
    }
    const auto vals = values_[i].values();
    fnv_mix(h, vals.data(), vals.size() * sizeof(double));
  }
  return h;
}

bool ParameterSet::bit_equal(const ParameterSet& other) const {
  if (names_ != other.names_) return false;
  for (std::size_t i = 0; i < values_.size(); ++i) {
    const auto a = values_[i].values(), b = other.values_[i].values();
    if (values_[i].shape() != other.values_[i].shape()) return false;
    if (std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) != 0) return false;
  }
  return true;
}

}  // namespace derc
