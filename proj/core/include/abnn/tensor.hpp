#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "abnn/errors.hpp"

namespace abnn {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);

enum class Act { relu, tanh, identity };

class Tape;
class Tensor;

namespace detail {
struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated on demand during backward
  bool requires_grad = false;
  std::vector<Tensor> parents;
  std::function<void(Node&)> backprop;  // pushes this->grad into parents
  Tape* tape = nullptr;
  const char* op = "leaf";
};
}  // namespace detail

/// Dense 64-bit float tensor, row-major, value-semantic handle. Participates
/// in reverse-mode autodiff when created under an active Tape from inputs
/// with requires_grad set.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double v);
  static Tensor from(Shape shape, std::vector<double> values);
  static Tensor scalar(double v);
  static Tensor row_vector(std::vector<double> values);  // shape [n]
  /// Leaf with requires_grad = true.
  static Tensor param(Shape shape, std::vector<double> values);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node()->shape; }
  std::size_t size() const { return node()->value.size(); }
  std::size_t ndim() const { return node()->shape.size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  const std::vector<double>& value() const { return node()->value; }
  /// Direct mutable access to the stored values. Intended for leaf updates
  /// (optimiser steps); mutating an interior node invalidates its graph.
  std::vector<double>& mutable_value() { return node()->value; }
  double scalar_value() const;
  double at(std::size_t i) const { return node()->value[i]; }
  double at2(std::size_t i, std::size_t j) const;

  bool requires_grad() const { return node()->requires_grad; }
  void set_requires_grad(bool b) { node()->requires_grad = b; }

  bool has_grad() const { return !node()->grad.empty(); }
  /// Throws TapeError if no gradient has been computed for this tensor.
  const std::vector<double>& grad() const;
  std::vector<double> grad_or_zeros() const;
  void zero_grad() { node()->grad.clear(); }

  detail::Node* node() const;
  bool same_node(const Tensor& other) const { return node_ == other.node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
  std::shared_ptr<detail::Node> node_;

  friend Tensor make_op(const char* name, Shape shape, std::vector<double> value,
                        std::vector<Tensor> parents,
                        std::function<void(detail::Node&)> backprop);
};

/// Records the forward graph: nodes are appended in creation order, which is
/// a topological order. One backward pass per tape; reuse raises TapeError.
/// A tape is confined to the thread that created it.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Reverse-mode sweep from a scalar loss recorded on this tape.
  void backward(const Tensor& loss);

  std::size_t num_nodes() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  static Tape* active();

 private:
  std::vector<std::shared_ptr<detail::Node>> nodes_;
  Tape* previous_ = nullptr;
  bool consumed_ = false;

  friend Tensor make_op(const char* name, Shape shape, std::vector<double> value,
                        std::vector<Tensor> parents,
                        std::function<void(detail::Node&)> backprop);
};

/// Convenience: backward via the tape the loss was recorded on.
void backward(const Tensor& loss);

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double c);
Tensor add_const(const Tensor& a, double c);
/// Broadcast multiply by a scalar tensor (gradient flows into both).
Tensor mul_scalar(const Tensor& a, const Tensor& s);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor square(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor softplus(const Tensor& a);
/// Pass-through gradient strictly inside (lo, hi), zero outside.
Tensor clamp(const Tensor& a, double lo, double hi);
Tensor activation(const Tensor& a, Act kind);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator*(double c, const Tensor& a) { return scale(a, c); }

// ---- reductions ----
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor sum_rows(const Tensor& a);  // [N x K] -> [N]
Tensor sum_cols(const Tensor& a);  // [N x K] -> [K]
Tensor dot(const Tensor& a, const Tensor& b);

// ---- shape / assembly ----
Tensor reshape(const Tensor& a, Shape shape);
Tensor transpose(const Tensor& a);
Tensor slice1d(const Tensor& a, std::size_t offset, std::size_t len);
Tensor col(const Tensor& a, std::size_t j);
/// Columns [j0, j0+len) of a 2-D tensor.
Tensor cols_range(const Tensor& a, std::size_t j0, std::size_t len);
Tensor stack_cols(const std::vector<Tensor>& cols);
Tensor stack_scalars(const std::vector<Tensor>& scalars);
Tensor concat_cols(const Tensor& a, const Tensor& b);
Tensor concat1d(const Tensor& a, const Tensor& b);
/// Append a constant column of ones (folded bias input).
Tensor append_ones_col(const Tensor& a);
Tensor diag_part(const Tensor& a);
Tensor add_diag_const(const Tensor& a, double c);
Tensor scale_rows(const Tensor& a, const Tensor& v);
Tensor scale_cols(const Tensor& a, const Tensor& v);
/// [C x H x W] -> [(H*W) x C], rows in row-major pixel order.
Tensor channels_to_rows(const Tensor& a);

// ---- linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);
/// Lower-triangular Cholesky factor; reads only the lower triangle of a,
/// which must be symmetric within tolerance. Throws PsdError on failure.
Tensor cholesky(const Tensor& a);
/// cholesky with the additive-jitter retry policy:
/// 1e-6 * mean(diag), escalating x10, at most 3 retries.
Tensor cholesky_jittered(const Tensor& a);
/// Solve L X = B with L lower triangular (lower triangle read only).
Tensor solve_lower(const Tensor& l, const Tensor& b);
/// Solve L^T X = B with L lower triangular.
Tensor solve_lower_t(const Tensor& l, const Tensor& b);
/// Solve A X = B for symmetric positive definite A via Cholesky and two
/// triangular solves.
Tensor solve_psd(const Tensor& a, const Tensor& b);

// ---- convolution (cross-correlation, same zero padding, odd kernel) ----
Tensor conv1d(const Tensor& input, const Tensor& kernels);
Tensor conv2d(const Tensor& input, const Tensor& kernels);

/// log(mean(exp(s_i))) over scalar tensors, computed stably.
Tensor logmeanexp(const std::vector<Tensor>& scalars);

}  // namespace abnn
