#pragma once

// Dense row-major tensors of doubles with a define-by-run reverse-mode tape.
//
// A Tensor is a cheap handle: the value buffer is shared and treated as
// immutable once an operation has produced it. Operations whose inputs
// require gradients record a node on the inputs' tape; everything else is
// computed eagerly with no bookkeeping, which is how inference runs.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <new>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace derc {

using Shape = std::vector<std::size_t>;

/// Allocator with 64-byte alignment. Vectorized kernels pick their peeling
/// from the buffer address, so fixed alignment keeps results bit-identical.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlignment{64};
  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlignment)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlignment); }
  friend bool operator==(const AlignedAllocator&, const AlignedAllocator&) { return true; }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;
using NodeId = std::size_t;

std::string shape_to_string(const Shape& shape);
std::size_t shape_size(const Shape& shape);

/// Thrown when operand shapes are incompatible.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Thrown for out-of-range label, token or layer indices.
class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

/// Thrown when a caller violates an operation's precondition.
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Thrown when a computation produces NaN/Inf.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Tape;

class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, Buffer values);
  Tensor(Shape shape, const std::vector<double>& values);
  Tensor(Shape shape, std::initializer_list<double> values);

  static Tensor zeros(Shape shape);
  static Tensor filled(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor vector(std::vector<double> values);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const { return data_->size(); }

  std::span<const double> values() const { return *data_; }
  /// Copy-on-write access; detaches from any buffer shared with a tape.
  std::span<double> mutable_values();

  double operator[](std::size_t i) const { return (*data_)[i]; }
  double at(std::size_t row, std::size_t col) const;
  double item() const;

  std::optional<NodeId> node_id() const { return node_; }
  bool requires_grad() const { return requires_grad_; }
  Tape* tape() const { return tape_; }

  /// Same values, new shape with equal element count. Differentiable.
  Tensor reshape(Shape shape) const;

  /// Plain copy of the values with no tape association.
  Tensor constant() const;

 private:
  friend class Tape;

  Shape shape_;
  std::shared_ptr<Buffer> data_;
  Tape* tape_ = nullptr;
  std::optional<NodeId> node_;
  bool requires_grad_ = false;
};

/// Gradients produced by one backward pass, keyed by tape node.
class Gradients {
 public:
  bool contains(const Tensor& leaf) const;
  const Tensor& of(const Tensor& leaf) const;
  const Tensor& of(NodeId id) const;
  std::size_t size() const { return grads_.size(); }

 private:
  friend class Tape;
  std::unordered_map<NodeId, Tensor> grads_;
};

class Tape {
 public:
  /// Receives the gradient of the node's output and accumulates into parents.
  using BackwardFn = std::function<void(std::span<const double> grad_out, Tape& tape)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Registers a trainable leaf that shares storage with `value`.
  Tensor variable(const Tensor& value);
  /// Registers a gradient-opaque leaf with identical values.
  Tensor leaf_constant(const Tensor& value);

  /// Records an op result. Used by the operation implementations.
  Tensor record(Shape shape, Buffer values, std::vector<NodeId> parents,
                BackwardFn backward);

  /// Gradient accumulation buffer of a node during backward.
  std::span<double> grad_buffer(NodeId id);
  bool needs_grad(NodeId id) const { return nodes_[id].requires_grad; }

  Gradients backward(const Tensor& loss);

  std::size_t num_nodes() const { return nodes_.size(); }

 private:
  struct Node {
    Shape shape;
    std::vector<NodeId> parents;
    BackwardFn backward;
    bool requires_grad = false;
    bool is_variable = false;
  };

  std::vector<Node> nodes_;
  std::vector<Buffer> grads_;
  bool live_ = true;
};

// ---------------------------------------------------------------------------
// Operations. Inputs on a tape that require gradients produce recorded
// results; otherwise results are plain constants.
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
/// x[n,in] * W[out,in]^T + bias[out]. Accepts rank-1 x as a single row.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// x * sigmoid(1.702 x)
Tensor gelu(const Tensor& x);
Tensor softmax(const Tensor& x, std::size_t axis);
/// Normalizes over the last axis with a 1/d variance divisor.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
Tensor clamp_min(const Tensor& x, double floor);
/// Divides each row (last axis) by its sum.
Tensor normalize_rows(const Tensor& x);
Tensor gather_rows(const Tensor& table, std::span<const std::size_t> rows);
Tensor detach(const Tensor& x);

inline constexpr double kProbabilityFloor = 1e-12;

/// -log(max(p[y], 1e-12)) for a probability vector.
Tensor cross_entropy(const Tensor& p, std::size_t label);
/// Mean of per-row cross entropies for a [batch, K] probability matrix.
Tensor cross_entropy(const Tensor& p, std::span<const std::size_t> labels);
/// Per-row losses without gradient tracking.
std::vector<double> cross_entropy_rows(const Tensor& p, std::span<const std::size_t> labels);

/// Row range of one sequence inside a packed [tokens, d] matrix.
struct SequenceSpan {
  std::size_t offset = 0;
  std::size_t length = 0;
};

struct AttentionResult {
  Tensor context;  // [tokens, d]
  /// Concatenated per-sequence [heads, len, len] blocks, in span order.
  Buffer probabilities;
};

/// Scaled dot-product multi-head self-attention over each span independently.
AttentionResult multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                     std::span<const SequenceSpan> spans,
                                     std::size_t num_heads);

Gradients backward(const Tensor& loss);

// ---------------------------------------------------------------------------
// Finite-difference gradient checking.
// ---------------------------------------------------------------------------

/// Scalar-valued function of parameter tensors. Called with tape-bound
/// variables for the analytic pass and with constants for the numeric one.
using ScalarFunction = std::function<Tensor(Tape&, std::span<const Tensor>)>;

struct GradCheckEntry {
  std::size_t param_index = 0;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  bool passed = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> params;
  double max_rel_error = 0.0;
  bool passed = true;
};

/// Relative error |a-n| / max(|a|, |n|, floor); the floor keeps vanishing
/// gradients from turning round-off into large ratios.
inline constexpr double kGradCheckDenominatorFloor = 1e-6;

GradCheckReport grad_check(const ScalarFunction& f, std::span<const Tensor> params,
                           double step = 1e-5, double tol = 1e-4);

bool all_finite(std::span<const double> values);

}  // namespace derc
