#include "derc/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace derc {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;
using StridedMat = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using ConstStridedMat = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

ConstMapMat as_matrix(std::span<const double> v, std::size_t rows, std::size_t cols) {
  return ConstMapMat(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

MapMat as_matrix(std::span<double> v, std::size_t rows, std::size_t cols) {
  return MapMat(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

// Returns the tape an op result must be recorded on, or nullptr when no
// input requires a gradient.
Tape* recording_tape(std::initializer_list<const Tensor*> inputs) {
  Tape* tape = nullptr;
  for (const Tensor* t : inputs) {
    if (!t->requires_grad()) continue;
    if (tape != nullptr && tape != t->tape()) {
      throw ContractError("operands live on different tapes");
    }
    tape = t->tape();
  }
  return tape;
}

std::vector<NodeId> parents_of(std::initializer_list<const Tensor*> inputs) {
  std::vector<NodeId> ids;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) ids.push_back(*t->node_id());
  }
  return ids;
}

bool wants(const Tensor& t, const Tape& tape) {
  return t.requires_grad() && tape.needs_grad(*t.node_id());
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) +
                         " vs " + shape_to_string(b.shape()));
  }
}

void accumulate(std::span<double> dst, std::span<const double> src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

// Splits a shape around `axis` into (outer, axis length, inner) strides.
struct AxisLayout {
  std::size_t outer = 1;
  std::size_t n = 1;
  std::size_t inner = 1;
};

AxisLayout axis_layout(const Shape& shape, std::size_t axis) {
  AxisLayout layout;
  for (std::size_t i = 0; i < axis; ++i) layout.outer *= shape[i];
  layout.n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) layout.inner *= shape[i];
  return layout;
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

constexpr double kGeluScale = 1.702;

}  // namespace

// ---------------------------------------------------------------------------
// Shapes and Tensor
// ---------------------------------------------------------------------------

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Tensor::Tensor() : shape_{0}, data_(std::make_shared<Buffer>()) {}

Tensor::Tensor(Shape shape, const std::vector<double>& values)
    : Tensor(std::move(shape), Buffer(values.begin(), values.end())) {}

Tensor::Tensor(Shape shape, std::initializer_list<double> values) : Tensor(std::move(shape), Buffer(values)) {}

Tensor::Tensor(Shape shape, Buffer values)
    : shape_(std::move(shape)), data_(std::make_shared<Buffer>(std::move(values))) {
  if (shape_size(shape_) != data_->size()) {
    throw DimensionError("tensor shape " + shape_to_string(shape_) + " does not hold " +
                         std::to_string(data_->size()) + " values");
  }
}

Tensor Tensor::zeros(Shape shape) { return filled(std::move(shape), 0.0); }

Tensor Tensor::filled(Shape shape, double value) {
  const std::size_t n = shape_size(shape);
  return Tensor(std::move(shape), Buffer(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor({}, {value}); }

Tensor Tensor::vector(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor({n}, std::move(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
  return Tensor({rows, cols}, std::move(values));
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw IndexError("axis " + std::to_string(axis) + " out of range for shape " +
                     shape_to_string(shape_));
  }
  return shape_[axis];
}

std::span<double> Tensor::mutable_values() {
  if (data_.use_count() > 1) data_ = std::make_shared<Buffer>(*data_);
  return *data_;
}

double Tensor::at(std::size_t row, std::size_t col) const {
  if (rank() != 2) throw DimensionError("at(row, col) needs a matrix, got " + shape_to_string(shape_));
  return (*data_)[row * shape_[1] + col];
}

double Tensor::item() const {
  if (size() != 1) throw ContractError("item() on non-scalar tensor " + shape_to_string(shape_));
  return (*data_)[0];
}

Tensor Tensor::reshape(Shape shape) const {
  if (shape_size(shape) != size()) {
    throw DimensionError("cannot reshape " + shape_to_string(shape_) + " to " +
                         shape_to_string(shape));
  }
  Tape* tape = recording_tape({this});
  if (!tape) {
    Tensor out = *this;
    out.shape_ = std::move(shape);
    out.tape_ = nullptr;
    out.node_.reset();
    out.requires_grad_ = false;
    return out;
  }
  const NodeId src = *node_;
  return tape->record(std::move(shape), *data_, {src},
                      [src](std::span<const double> g, Tape& t) { accumulate(t.grad_buffer(src), g); });
}

Tensor Tensor::constant() const { return Tensor(shape_, *data_); }

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

Tensor Tape::variable(const Tensor& value) {
  Tensor out = value;
  out.tape_ = this;
  out.node_ = nodes_.size();
  out.requires_grad_ = true;
  nodes_.push_back(Node{value.shape(), {}, nullptr, true, true});
  return out;
}

Tensor Tape::leaf_constant(const Tensor& value) {
  Tensor out = value;
  out.tape_ = this;
  out.node_ = nodes_.size();
  out.requires_grad_ = false;
  nodes_.push_back(Node{value.shape(), {}, nullptr, false, false});
  return out;
}

Tensor Tape::record(Shape shape, Buffer values, std::vector<NodeId> parents,
                    BackwardFn backward) {
  Tensor out(std::move(shape), std::move(values));
  out.tape_ = this;
  out.node_ = nodes_.size();
  out.requires_grad_ = true;
  nodes_.push_back(Node{out.shape(), std::move(parents), std::move(backward), true, false});
  return out;
}

std::span<double> Tape::grad_buffer(NodeId id) {
  auto& g = grads_[id];
  if (g.empty()) g.assign(shape_size(nodes_[id].shape), 0.0);
  return g;
}

Gradients Tape::backward(const Tensor& loss) {
  if (loss.size() != 1) {
    throw ContractError("backward needs a scalar loss, got shape " + shape_to_string(loss.shape()));
  }
  Gradients result;
  if (loss.tape() != this && loss.tape() != nullptr) {
    throw ContractError("loss was recorded on a different tape");
  }
  grads_.assign(nodes_.size(), {});
  if (loss.requires_grad()) {
    const NodeId root = *loss.node_id();
    grad_buffer(root)[0] = 1.0;
    for (NodeId id = root + 1; id-- > 0;) {
      const Node& node = nodes_[id];
      if (grads_[id].empty() || !node.backward) continue;
      node.backward(grads_[id], *this);
    }
  }
  for (NodeId id = 0; id < nodes_.size(); ++id) {
    if (!nodes_[id].is_variable) continue;
    Buffer g = grads_[id];
    if (g.empty()) g.assign(shape_size(nodes_[id].shape), 0.0);
    result.grads_.emplace(id, Tensor(nodes_[id].shape, std::move(g)));
  }
  grads_.clear();
  return result;
}

bool Gradients::contains(const Tensor& leaf) const {
  return leaf.node_id() && grads_.count(*leaf.node_id()) > 0;
}

const Tensor& Gradients::of(const Tensor& leaf) const {
  if (!leaf.node_id()) throw ContractError("tensor is not on a tape");
  return of(*leaf.node_id());
}

const Tensor& Gradients::of(NodeId id) const {
  auto it = grads_.find(id);
  if (it == grads_.end()) throw ContractError("no gradient recorded for node " + std::to_string(id));
  return it->second;
}

Gradients backward(const Tensor& loss) {
  if (!loss.tape()) {
    if (loss.size() != 1) throw ContractError("backward needs a scalar loss");
    return {};
  }
  return loss.tape()->backward(loss);
}

// ---------------------------------------------------------------------------
// Elementwise and reductions
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Buffer out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  Tape* tape = recording_tape({&a, &b});
  if (!tape) return Tensor(a.shape(), std::move(out));
  return tape->record(a.shape(), std::move(out), parents_of({&a, &b}),
                      [a, b](std::span<const double> g, Tape& t) {
                        if (wants(a, t)) accumulate(t.grad_buffer(*a.node_id()), g);
                        if (wants(b, t)) accumulate(t.grad_buffer(*b.node_id()), g);
                      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Buffer out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  Tape* tape = recording_tape({&a, &b});
  if (!tape) return Tensor(a.shape(), std::move(out));
  return tape->record(a.shape(), std::move(out), parents_of({&a, &b}),
                      [a, b](std::span<const double> g, Tape& t) {
                        if (wants(a, t)) accumulate(t.grad_buffer(*a.node_id()), g);
                        if (wants(b, t)) {
                          auto gb = t.grad_buffer(*b.node_id());
                          for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
                        }
                      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Buffer out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  Tape* tape = recording_tape({&a, &b});
  if (!tape) return Tensor(a.shape(), std::move(out));
  return tape->record(a.shape(), std::move(out), parents_of({&a, &b}),
                      [a, b](std::span<const double> g, Tape& t) {
                        if (wants(a, t)) {
                          auto ga = t.grad_buffer(*a.node_id());
                          for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * b[i];
                        }
                        if (wants(b, t)) {
                          auto gb = t.grad_buffer(*b.node_id());
                          for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * a[i];
                        }
                      });
}

Tensor scale(const Tensor& a, double factor) {
  Buffer out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * factor;
  Tape* tape = recording_tape({&a});
  if (!tape) return Tensor(a.shape(), std::move(out));
  const NodeId src = *a.node_id();
  return tape->record(a.shape(), std::move(out), {src},
                      [src, factor](std::span<const double> g, Tape& t) {
                        auto ga = t.grad_buffer(src);
                        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * factor;
                      });
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.values()) total += v;
  Tape* tape = recording_tape({&x});
  if (!tape) return Tensor::scalar(total);
  const NodeId src = *x.node_id();
  return tape->record({}, {total}, {src}, [src](std::span<const double> g, Tape& t) {
    for (double& v : t.grad_buffer(src)) v += g[0];
  });
}

Tensor mean(const Tensor& x) {
  if (x.size() == 0) throw ContractError("mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

Tensor gelu(const Tensor& x) {
  Buffer out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * sigmoid(kGeluScale * x[i]);
  Tape* tape = recording_tape({&x});
  if (!tape) return Tensor(x.shape(), std::move(out));
  return tape->record(x.shape(), std::move(out), {*x.node_id()},
                      [x](std::span<const double> g, Tape& t) {
                        auto gx = t.grad_buffer(*x.node_id());
                        for (std::size_t i = 0; i < gx.size(); ++i) {
                          const double s = sigmoid(kGeluScale * x[i]);
                          gx[i] += g[i] * (s + kGeluScale * x[i] * s * (1.0 - s));
                        }
                      });
}

Tensor clamp_min(const Tensor& x, double floor) {
  Buffer out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(x[i], floor);
  Tape* tape = recording_tape({&x});
  if (!tape) return Tensor(x.shape(), std::move(out));
  return tape->record(x.shape(), std::move(out), {*x.node_id()},
                      [x, floor](std::span<const double> g, Tape& t) {
                        auto gx = t.grad_buffer(*x.node_id());
                        for (std::size_t i = 0; i < gx.size(); ++i) {
                          if (x[i] > floor) gx[i] += g[i];
                        }
                      });
}

Tensor normalize_rows(const Tensor& x) {
  if (x.rank() == 0) throw DimensionError("normalize_rows needs rank >= 1");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.size() / n;
  Buffer out(x.size());
  Buffer totals(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < n; ++c) s += x[r * n + c];
    if (!(s > 0.0)) throw NumericalError("normalize_rows: row sum is not positive");
    totals[r] = s;
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] = x[r * n + c] / s;
  }
  Tape* tape = recording_tape({&x});
  if (!tape) return Tensor(x.shape(), std::move(out));
  Tensor y(x.shape(), out);
  return tape->record(x.shape(), std::move(out), {*x.node_id()},
                      [x, y, totals, n, rows](std::span<const double> g, Tape& t) {
                        auto gx = t.grad_buffer(*x.node_id());
                        for (std::size_t r = 0; r < rows; ++r) {
                          double dot = 0.0;
                          for (std::size_t c = 0; c < n; ++c) dot += g[r * n + c] * y[r * n + c];
                          for (std::size_t c = 0; c < n; ++c) {
                            gx[r * n + c] += (g[r * n + c] - dot) / totals[r];
                          }
                        }
                      });
}

Tensor detach(const Tensor& x) {
  if (x.tape()) return x.tape()->leaf_constant(x);
  return x.constant();
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_to_string(a.shape()) + " and " +
                         shape_to_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Buffer out(m * n);
  as_matrix(std::span<double>(out), m, n).noalias() =
      as_matrix(a.values(), m, k) * as_matrix(b.values(), k, n);
  Tape* tape = recording_tape({&a, &b});
  if (!tape) return Tensor({m, n}, std::move(out));
  return tape->record({m, n}, std::move(out), parents_of({&a, &b}),
                      [a, b, m, k, n](std::span<const double> g, Tape& t) {
                        auto G = as_matrix(g, m, n);
                        if (wants(a, t)) {
                          as_matrix(t.grad_buffer(*a.node_id()), m, k).noalias() +=
                              G * as_matrix(b.values(), k, n).transpose();
                        }
                        if (wants(b, t)) {
                          as_matrix(t.grad_buffer(*b.node_id()), k, n).noalias() +=
                              as_matrix(a.values(), m, k).transpose() * G;
                        }
                      });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (weight.rank() != 2 || bias.rank() != 1 || bias.dim(0) != weight.dim(0) || x.rank() == 0 ||
      x.rank() > 2 || x.shape().back() != weight.dim(1)) {
    throw DimensionError("linear: incompatible shapes x" + shape_to_string(x.shape()) + " W" +
                         shape_to_string(weight.shape()) + " b" + shape_to_string(bias.shape()));
  }
  const std::size_t in = weight.dim(1), out_dim = weight.dim(0);
  const std::size_t rows = x.rank() == 1 ? 1 : x.dim(0);
  Shape out_shape = x.rank() == 1 ? Shape{out_dim} : Shape{rows, out_dim};
  Buffer out(rows * out_dim);
  auto Y = as_matrix(std::span<double>(out), rows, out_dim);
  Y.noalias() = as_matrix(x.values(), rows, in) * as_matrix(weight.values(), out_dim, in).transpose();
  Eigen::Map<const Eigen::RowVectorXd> bvec(bias.values().data(), static_cast<Eigen::Index>(out_dim));
  Y.rowwise() += bvec;
  Tape* tape = recording_tape({&x, &weight, &bias});
  if (!tape) return Tensor(std::move(out_shape), std::move(out));
  return tape->record(
      std::move(out_shape), std::move(out), parents_of({&x, &weight, &bias}),
      [x, weight, bias, rows, in, out_dim](std::span<const double> g, Tape& t) {
        auto G = as_matrix(g, rows, out_dim);
        if (wants(x, t)) {
          as_matrix(t.grad_buffer(*x.node_id()), rows, in).noalias() +=
              G * as_matrix(weight.values(), out_dim, in);
        }
        if (wants(weight, t)) {
          as_matrix(t.grad_buffer(*weight.node_id()), out_dim, in).noalias() +=
              G.transpose() * as_matrix(x.values(), rows, in);
        }
        if (wants(bias, t)) {
          auto gb = t.grad_buffer(*bias.node_id());
          Eigen::Map<Eigen::RowVectorXd>(gb.data(), static_cast<Eigen::Index>(out_dim)) +=
              G.colwise().sum();
        }
      });
}

Tensor gather_rows(const Tensor& table, std::span<const std::size_t> rows) {
  if (table.rank() != 2) {
    throw DimensionError("gather_rows: table must be a matrix, got " + shape_to_string(table.shape()));
  }
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  Buffer out(rows.size() * d);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= vocab) {
      throw IndexError("gather_rows: row " + std::to_string(rows[i]) + " out of range for table of " +
                       std::to_string(vocab) + " rows");
    }
    std::copy_n(table.values().begin() + static_cast<std::ptrdiff_t>(rows[i] * d), d,
                out.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  Tape* tape = recording_tape({&table});
  if (!tape) return Tensor({rows.size(), d}, std::move(out));
  const NodeId src = *table.node_id();
  std::vector<std::size_t> index(rows.begin(), rows.end());
  return tape->record({rows.size(), d}, std::move(out), {src},
                      [src, index = std::move(index), d](std::span<const double> g, Tape& t) {
                        auto gt = t.grad_buffer(src);
                        for (std::size_t i = 0; i < index.size(); ++i) {
                          for (std::size_t c = 0; c < d; ++c) gt[index[i] * d + c] += g[i * d + c];
                        }
                      });
}

// ---------------------------------------------------------------------------
// Normalization and probabilities
// ---------------------------------------------------------------------------

Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw IndexError("softmax: axis " + std::to_string(axis) + " invalid for shape " +
                     shape_to_string(x.shape()));
  }
  const AxisLayout L = axis_layout(x.shape(), axis);
  Buffer out(x.size());
  for (std::size_t o = 0; o < L.outer; ++o) {
    for (std::size_t in = 0; in < L.inner; ++in) {
      const std::size_t base = o * L.n * L.inner + in;
      double mx = x[base];
      for (std::size_t j = 1; j < L.n; ++j) mx = std::max(mx, x[base + j * L.inner]);
      double total = 0.0;
      for (std::size_t j = 0; j < L.n; ++j) {
        const double e = std::exp(x[base + j * L.inner] - mx);
        out[base + j * L.inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < L.n; ++j) out[base + j * L.inner] /= total;
    }
  }
  Tape* tape = recording_tape({&x});
  if (!tape) return Tensor(x.shape(), std::move(out));
  Tensor y(x.shape(), out);
  const NodeId src = *x.node_id();
  return tape->record(x.shape(), std::move(out), {src},
                      [src, y, L](std::span<const double> g, Tape& t) {
                        auto gx = t.grad_buffer(src);
                        for (std::size_t o = 0; o < L.outer; ++o) {
                          for (std::size_t in = 0; in < L.inner; ++in) {
                            const std::size_t base = o * L.n * L.inner + in;
                            double dot = 0.0;
                            for (std::size_t j = 0; j < L.n; ++j) {
                              dot += g[base + j * L.inner] * y[base + j * L.inner];
                            }
                            for (std::size_t j = 0; j < L.n; ++j) {
                              const std::size_t p = base + j * L.inner;
                              gx[p] += y[p] * (g[p] - dot);
                            }
                          }
                        }
                      });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() == 0 || gamma.rank() != 1 || beta.rank() != 1 || gamma.dim(0) != x.shape().back() ||
      beta.dim(0) != x.shape().back() || x.shape().back() == 0) {
    throw DimensionError("layer_norm: incompatible shapes x" + shape_to_string(x.shape()) +
                         " gamma" + shape_to_string(gamma.shape()) + " beta" +
                         shape_to_string(beta.shape()));
  }
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.size() / d;
  Buffer out(x.size());
  Buffer xhat(x.size());
  Buffer rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = x.values().data() + r * d;
    double mu = 0.0;
    for (std::size_t c = 0; c < d; ++c) mu += row[c];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<double>(d);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) {
      xhat[r * d + c] = (row[c] - mu) * rstd[r];
      out[r * d + c] = gamma[c] * xhat[r * d + c] + beta[c];
    }
  }
  Tape* tape = recording_tape({&x, &gamma, &beta});
  if (!tape) return Tensor(x.shape(), std::move(out));
  return tape->record(
      x.shape(), std::move(out), parents_of({&x, &gamma, &beta}),
      [x, gamma, beta, xhat = std::move(xhat), rstd = std::move(rstd), rows, d](
          std::span<const double> g, Tape& t) {
        if (wants(x, t)) {
          auto gx = t.grad_buffer(*x.node_id());
          for (std::size_t r = 0; r < rows; ++r) {
            double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
              const double dxh = g[r * d + c] * gamma[c];
              mean_dxhat += dxh;
              mean_dxhat_xhat += dxh * xhat[r * d + c];
            }
            mean_dxhat /= static_cast<double>(d);
            mean_dxhat_xhat /= static_cast<double>(d);
            for (std::size_t c = 0; c < d; ++c) {
              const double dxh = g[r * d + c] * gamma[c];
              gx[r * d + c] += rstd[r] * (dxh - mean_dxhat - xhat[r * d + c] * mean_dxhat_xhat);
            }
          }
        }
        if (wants(gamma, t)) {
          auto gg = t.grad_buffer(*gamma.node_id());
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < d; ++c) gg[c] += g[r * d + c] * xhat[r * d + c];
          }
        }
        if (wants(beta, t)) {
          auto gb = t.grad_buffer(*beta.node_id());
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < d; ++c) gb[c] += g[r * d + c];
          }
        }
      });
}

namespace {

void check_distribution_rows(const Tensor& p, std::size_t rows, std::size_t k) {
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < k; ++c) s += p[r * k + c];
    if (std::abs(s - 1.0) > 1e-9) {
      throw ContractError("cross_entropy: row " + std::to_string(r) +
                          " is not a probability distribution (sum " + std::to_string(s) + ")");
    }
  }
}

}  // namespace

Tensor cross_entropy(const Tensor& p, std::size_t label) {
  if (p.rank() != 1) throw DimensionError("cross_entropy: expected a vector, got " + shape_to_string(p.shape()));
  const std::size_t labels[] = {label};
  return cross_entropy(p.reshape({1, p.dim(0)}), labels);
}

std::vector<double> cross_entropy_rows(const Tensor& p, std::span<const std::size_t> labels) {
  if (p.rank() != 2 || p.dim(0) != labels.size()) {
    throw DimensionError("cross_entropy: " + shape_to_string(p.shape()) + " probabilities for " +
                         std::to_string(labels.size()) + " labels");
  }
  const std::size_t k = p.dim(1);
  std::vector<double> losses(labels.size());
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (labels[r] >= k) {
      throw IndexError("cross_entropy: label " + std::to_string(labels[r]) + " out of range for " +
                       std::to_string(k) + " classes");
    }
    losses[r] = -std::log(std::max(p[r * k + labels[r]], kProbabilityFloor));
  }
  return losses;
}

Tensor cross_entropy(const Tensor& p, std::span<const std::size_t> labels) {
  const std::vector<double> losses = cross_entropy_rows(p, labels);
  const std::size_t rows = labels.size(), k = p.dim(1);
  if (rows == 0) throw ContractError("cross_entropy: empty batch");
  check_distribution_rows(p, rows, k);
  double total = 0.0;
  for (double l : losses) total += l;
  total /= static_cast<double>(rows);
  Tape* tape = recording_tape({&p});
  if (!tape) return Tensor::scalar(total);
  std::vector<std::size_t> y(labels.begin(), labels.end());
  return tape->record({}, {total}, {*p.node_id()},
                      [p, y = std::move(y), k](std::span<const double> g, Tape& t) {
                        auto gp = t.grad_buffer(*p.node_id());
                        const double inv = 1.0 / static_cast<double>(y.size());
                        for (std::size_t r = 0; r < y.size(); ++r) {
                          const double pr = p[r * k + y[r]];
                          if (pr > kProbabilityFloor) gp[r * k + y[r]] -= g[0] * inv / pr;
                        }
                      });
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

AttentionResult multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                     std::span<const SequenceSpan> spans,
                                     std::size_t num_heads) {
  if (q.rank() != 2 || q.shape() != k.shape() || q.shape() != v.shape()) {
    throw DimensionError("attention: q/k/v shapes " + shape_to_string(q.shape()) + ", " +
                         shape_to_string(k.shape()) + ", " + shape_to_string(v.shape()));
  }
  const std::size_t tokens = q.dim(0), d = q.dim(1);
  if (num_heads == 0 || d % num_heads != 0) {
    throw DimensionError("attention: width " + std::to_string(d) + " not divisible by " +
                         std::to_string(num_heads) + " heads");
  }
  const std::size_t dh = d / num_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<std::size_t> prob_offsets(spans.size());
  std::size_t total_probs = 0;
  for (std::size_t s = 0; s < spans.size(); ++s) {
    if (spans[s].length == 0 || spans[s].offset + spans[s].length > tokens) {
      throw DimensionError("attention: span out of range");
    }
    prob_offsets[s] = total_probs;
    total_probs += num_heads * spans[s].length * spans[s].length;
  }

  Buffer context(tokens * d, 0.0);
  Buffer probs(total_probs);
  const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(d));
  for (std::size_t s = 0; s < spans.size(); ++s) {
    const auto n = static_cast<Eigen::Index>(spans[s].length);
    const std::size_t off = spans[s].offset;
    for (std::size_t h = 0; h < num_heads; ++h) {
      const std::size_t base = off * d + h * dh;
      ConstStridedMat Q(q.values().data() + base, n, static_cast<Eigen::Index>(dh), stride);
      ConstStridedMat K(k.values().data() + base, n, static_cast<Eigen::Index>(dh), stride);
      ConstStridedMat V(v.values().data() + base, n, static_cast<Eigen::Index>(dh), stride);
      MapMat A(probs.data() + prob_offsets[s] + h * spans[s].length * spans[s].length, n, n);
      A.noalias() = (Q * K.transpose()) * inv_sqrt;
      for (Eigen::Index r = 0; r < n; ++r) {
        const double mx = A.row(r).maxCoeff();
        A.row(r) = (A.row(r).array() - mx).exp();
        A.row(r) /= A.row(r).sum();
      }
      StridedMat Z(context.data() + base, n, static_cast<Eigen::Index>(dh), stride);
      Z.noalias() = A * V;
    }
  }

  AttentionResult result;
  Tape* tape = recording_tape({&q, &k, &v});
  if (!tape) {
    result.context = Tensor({tokens, d}, std::move(context));
    result.probabilities = std::move(probs);
    return result;
  }
  auto shared_probs = std::make_shared<const Buffer>(probs);
  std::vector<SequenceSpan> span_copy(spans.begin(), spans.end());
  result.context = tape->record(
      {tokens, d}, std::move(context), parents_of({&q, &k, &v}),
      [q, k, v, shared_probs, span_copy = std::move(span_copy), prob_offsets, num_heads, dh, d,
       inv_sqrt](std::span<const double> g, Tape& t) {
        const bool gq = wants(q, t), gk = wants(k, t), gv = wants(v, t);
        double* dq = gq ? t.grad_buffer(*q.node_id()).data() : nullptr;
        double* dk = gk ? t.grad_buffer(*k.node_id()).data() : nullptr;
        double* dv = gv ? t.grad_buffer(*v.node_id()).data() : nullptr;
        const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(d));
        RowMat dA, dS;
        for (std::size_t s = 0; s < span_copy.size(); ++s) {
          const auto n = static_cast<Eigen::Index>(span_copy[s].length);
          const std::size_t off = span_copy[s].offset;
          for (std::size_t h = 0; h < num_heads; ++h) {
            const std::size_t base = off * d + h * dh;
            const auto edh = static_cast<Eigen::Index>(dh);
            ConstStridedMat Q(q.values().data() + base, n, edh, stride);
            ConstStridedMat K(k.values().data() + base, n, edh, stride);
            ConstStridedMat V(v.values().data() + base, n, edh, stride);
            ConstStridedMat dZ(g.data() + base, n, edh, stride);
            ConstMapMat A(shared_probs->data() + prob_offsets[s] +
                              h * span_copy[s].length * span_copy[s].length,
                          n, n);
            if (gv) StridedMat(dv + base, n, edh, stride).noalias() += A.transpose() * dZ;
            if (!gq && !gk) continue;
            dA.noalias() = dZ * V.transpose();
            const Eigen::VectorXd rowdot = (dA.array() * A.array()).rowwise().sum();
            dS = A.array() * (dA.colwise() - rowdot).array();
            dS *= inv_sqrt;
            if (gq) StridedMat(dq + base, n, edh, stride).noalias() += dS * K;
            if (gk) StridedMat(dk + base, n, edh, stride).noalias() += dS.transpose() * Q;
          }
        }
      });
  result.probabilities = std::move(probs);
  return result;
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

GradCheckReport grad_check(const ScalarFunction& f, std::span<const Tensor> params, double step,
                           double tol) {
  if (!(step > 0.0)) throw ContractError("grad_check: step must be positive");
  std::vector<Tensor> base;
  base.reserve(params.size());
  for (const Tensor& p : params) base.push_back(p.constant());

  Tape tape;
  std::vector<Tensor> bound;
  bound.reserve(base.size());
  for (const Tensor& p : base) bound.push_back(tape.variable(p));
  const Tensor loss = f(tape, bound);
  if (loss.size() != 1) throw ContractError("grad_check: function must return a scalar");
  const Gradients grads = tape.backward(loss);

  auto evaluate = [&](const std::vector<Tensor>& values) {
    Tape scratch;
    return f(scratch, values).item();
  };

  GradCheckReport report;
  for (std::size_t i = 0; i < base.size(); ++i) {
    GradCheckEntry entry;
    entry.param_index = i;
    const Tensor& analytic = grads.of(bound[i]);
    for (std::size_t e = 0; e < base[i].size(); ++e) {
      std::vector<Tensor> shifted = base;
      shifted[i] = base[i].constant();
      const double original = base[i][e];
      shifted[i].mutable_values()[e] = original + step;
      const double plus = evaluate(shifted);
      shifted[i].mutable_values()[e] = original - step;
      const double minus = evaluate(shifted);
      const double numeric = (plus - minus) / (2.0 * step);
      const double a = analytic[e];
      const double abs_err = std::abs(a - numeric);
      const double denom = std::max({std::abs(a), std::abs(numeric), kGradCheckDenominatorFloor});
      entry.max_abs_error = std::max(entry.max_abs_error, abs_err);
      entry.max_rel_error = std::max(entry.max_rel_error, abs_err / denom);
    }
    entry.passed = entry.max_rel_error < tol;
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    report.passed = report.passed && entry.passed;
    report.params.push_back(entry);
  }
  return report;
}

bool all_finite(std::span<const double> values) {
  return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

}  // namespace derc
