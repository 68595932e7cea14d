#include "abnn/tensor.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace abnn {

namespace {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<EMat>;
using MapC = Eigen::Map<const EMat>;

MapC as_mat(const std::vector<double>& v, std::size_t r, std::size_t c) {
  return MapC(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
MapM as_mat(std::vector<double>& v, std::size_t r, std::size_t c) {
  return MapM(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto e : s) n *= e;
  return n;
}

thread_local Tape* g_active_tape = nullptr;

void check_finite(const char* op, const std::vector<double>& v) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw NumericError(std::string(op) + ": produced non-finite value");
    }
  }
}

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

// ---- Tensor basics ----

detail::Node* Tensor::node() const {
  if (!node_) throw ContractError("use of empty Tensor");
  return node_.get();
}

Tensor Tensor::from(Shape shape, std::vector<double> values) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("Tensor::from: " + shape_str(shape) + " does not hold " +
                     std::to_string(values.size()) + " values");
  }
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->value = std::move(values);
  return Tensor(std::move(n));
}

Tensor Tensor::zeros(Shape shape) {
  std::size_t n = shape_numel(shape);
  return from(std::move(shape), std::vector<double>(n, 0.0));
}

Tensor Tensor::full(Shape shape, double v) {
  std::size_t n = shape_numel(shape);
  return from(std::move(shape), std::vector<double>(n, v));
}

Tensor Tensor::scalar(double v) { return from({1}, {v}); }

Tensor Tensor::row_vector(std::vector<double> values) {
  Shape s{values.size()};
  return from(std::move(s), std::move(values));
}

Tensor Tensor::param(Shape shape, std::vector<double> values) {
  Tensor t = from(std::move(shape), std::move(values));
  t.set_requires_grad(true);
  return t;
}

std::size_t Tensor::rows() const {
  if (ndim() != 2) throw ShapeError("rows(): tensor is not 2-D: " + shape_str(shape()));
  return shape()[0];
}

std::size_t Tensor::cols() const {
  if (ndim() != 2) throw ShapeError("cols(): tensor is not 2-D: " + shape_str(shape()));
  return shape()[1];
}

double Tensor::scalar_value() const {
  if (size() != 1) throw ShapeError("scalar_value(): tensor has " + std::to_string(size()) + " elements");
  return node()->value[0];
}

double Tensor::at2(std::size_t i, std::size_t j) const {
  return node()->value[i * cols() + j];
}

const std::vector<double>& Tensor::grad() const {
  if (!has_grad()) throw TapeError("grad(): no gradient present; run backward first");
  return node()->grad;
}

std::vector<double> Tensor::grad_or_zeros() const {
  if (has_grad()) return node()->grad;
  return std::vector<double>(size(), 0.0);
}

// ---- Tape ----

Tape::Tape() {
  previous_ = g_active_tape;
  g_active_tape = this;
}

Tape::~Tape() { g_active_tape = previous_; }

Tape* Tape::active() { return g_active_tape; }

Tensor make_op(const char* name, Shape shape, std::vector<double> value,
               std::vector<Tensor> parents,
               std::function<void(detail::Node&)> backprop) {
  check_finite(name, value);
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = name;
  bool needs_grad = false;
  for (const auto& p : parents) needs_grad = needs_grad || p.requires_grad();
  n->requires_grad = needs_grad;
  n->parents = std::move(parents);
  Tape* tape = Tape::active();
  if (tape && needs_grad) {
    n->tape = tape;
    n->backprop = std::move(backprop);
    tape->nodes_.push_back(n);
  }
  return Tensor(std::move(n));
}

namespace {

std::vector<double>& grad_buf(detail::Node* n) {
  if (n->grad.empty()) n->grad.assign(n->value.size(), 0.0);
  return n->grad;
}

std::vector<double>& grad_buf(const Tensor& t) { return grad_buf(t.node()); }

}  // namespace

void Tape::backward(const Tensor& loss) {
  if (loss.size() != 1) {
    throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  }
  if (consumed_) throw TapeError("backward: tape already consumed");
  if (loss.node()->tape != this) {
    throw TapeError("backward: loss not recorded on this tape");
  }
  consumed_ = true;
  grad_buf(loss.node())[0] = 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    detail::Node* n = it->get();
    if (n->grad.empty() || !n->backprop) continue;
    check_finite(n->op, n->grad);
    n->backprop(*n);
  }
}

void backward(const Tensor& loss) {
  Tape* t = loss.node()->tape;
  if (!t) throw TapeError("backward: loss is not attached to a tape");
  t->backward(loss);
}

// ---- op helpers ----

namespace {

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  }
}

Tensor unary(const char* name, const Tensor& a, std::vector<double> out,
             std::function<double(double x, double y, double g)> dx) {
  // dx(x, y, g): contribution to x-grad given input x, output y, out-grad g.
  Tensor ap = a;
  auto shape = a.shape();
  return make_op(name, shape, std::move(out), {a}, [ap, dx](detail::Node& n) {
    if (!ap.requires_grad()) return;
    auto& ga = grad_buf(ap);
    const auto& x = ap.value();
    for (std::size_t i = 0; i < n.value.size(); ++i) {
      ga[i] += dx(x[i], n.value[i], n.grad[i]);
    }
  });
}

}  // namespace

// ---- elementwise ----

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape("add", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + b.at(i);
  Tensor ap = a, bp = b;
  return make_op("add", a.shape(), std::move(out), {a, b}, [ap, bp](detail::Node& n) {
    if (ap.requires_grad()) {
      auto& g = grad_buf(ap);
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
    }
    if (bp.requires_grad()) {
      auto& g = grad_buf(bp);
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape("sub", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) - b.at(i);
  Tensor ap = a, bp = b;
  return make_op("sub", a.shape(), std::move(out), {a, b}, [ap, bp](detail::Node& n) {
    if (ap.requires_grad()) {
      auto& g = grad_buf(ap);
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
    }
    if (bp.requires_grad()) {
      auto& g = grad_buf(bp);
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] -= n.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape("mul", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * b.at(i);
  Tensor ap = a, bp = b;
  return make_op("mul", a.shape(), std::move(out), {a, b}, [ap, bp](detail::Node& n) {
    if (ap.requires_grad()) {
      auto& g = grad_buf(ap);
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] * bp.at(i);
    }
    if (bp.requires_grad()) {
      auto& g = grad_buf(bp);
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] * ap.at(i);
    }
  });
}

Tensor div(const Tensor& a, const Tensor& b) {
  check_same_shape("div", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) / b.at(i);
  Tensor ap = a, bp = b;
  return make_op("div", a.shape(), std::move(out), {a, b}, [ap, bp](detail::Node& n) {
    if (ap.requires_grad()) {
      auto& g = grad_buf(ap);
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] / bp.at(i);
    }
    if (bp.requires_grad()) {
      auto& g = grad_buf(bp);
      for (std::size_t i = 0; i < n.grad.size(); ++i)
        g[i] -= n.grad[i] * n.value[i] / bp.at(i);
    }
  });
}

Tensor neg(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = -a.at(i);
  return unary("neg", a, std::move(out), [](double, double, double g) { return -g; });
}

Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * a.at(i);
  return unary("scale", a, std::move(out), [c](double, double, double g) { return c * g; });
}

Tensor add_const(const Tensor& a, double c) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + c;
  return unary("add_const", a, std::move(out), [](double, double, double g) { return g; });
}

Tensor mul_scalar(const Tensor& a, const Tensor& s) {
  if (s.size() != 1) throw ShapeError("mul_scalar: scale must be scalar");
  double sv = s.at(0);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sv * a.at(i);
  Tensor ap = a, sp = s;
  return make_op("mul_scalar", a.shape(), std::move(out), {a, s}, [ap, sp](detail::Node& n) {
    if (ap.requires_grad()) {
      auto& g = grad_buf(ap);
      double sv2 = sp.at(0);
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += sv2 * n.grad[i];
    }
    if (sp.requires_grad()) {
      double acc = 0.0;
      for (std::size_t i = 0; i < n.grad.size(); ++i) acc += n.grad[i] * ap.at(i);
      grad_buf(sp)[0] += acc;
    }
  });
}

Tensor exp(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a.at(i));
  return unary("exp", a, std::move(out), [](double, double y, double g) { return g * y; });
}

Tensor log(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(a.at(i));
  return unary("log", a, std::move(out), [](double x, double, double g) { return g / x; });
}

Tensor sqrt(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::sqrt(a.at(i));
  return unary("sqrt", a, std::move(out),
               [](double, double y, double g) { return 0.5 * g / y; });
}

Tensor square(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * a.at(i);
  return unary("square", a, std::move(out),
               [](double x, double, double g) { return 2.0 * x * g; });
}

Tensor tanh(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(a.at(i));
  return unary("tanh", a, std::move(out),
               [](double, double y, double g) { return g * (1.0 - y * y); });
}

Tensor relu(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) > 0.0 ? a.at(i) : 0.0;
  // subgradient at the kink is 0
  return unary("relu", a, std::move(out),
               [](double x, double, double g) { return x > 0.0 ? g : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    double x = a.at(i);
    out[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  }
  return unary("sigmoid", a, std::move(out),
               [](double, double y, double g) { return g * y * (1.0 - y); });
}

Tensor softplus(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    double x = a.at(i);
    out[i] = std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
  }
  return unary("softplus", a, std::move(out), [](double x, double, double g) {
    double s = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    return g * s;
  });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  if (lo > hi) throw ContractError("clamp: lo > hi");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(a.at(i), lo, hi);
  return unary("clamp", a, std::move(out), [lo, hi](double x, double, double g) {
    return (x > lo && x < hi) ? g : 0.0;
  });
}

Tensor activation(const Tensor& a, Act kind) {
  switch (kind) {
    case Act::relu:
      return relu(a);
    case Act::tanh:
      return tanh(a);
    case Act::identity:
      return a;
  }
  throw ContractError("activation: unknown kind");
}

// ---- reductions ----

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a.at(i);
  Tensor ap = a;
  return make_op("sum", {1}, {acc}, {a}, [ap](detail::Node& n) {
    if (!ap.requires_grad()) return;
    auto& g = grad_buf(ap);
    for (auto& v : g) v += n.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw ContractError("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Tensor sum_rows(const Tensor& a) {
  std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(r, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i] += a.at2(i, j);
  Tensor ap = a;
  return make_op("sum_rows", {r}, std::move(out), {a}, [ap, c](detail::Node& n) {
    if (!ap.requires_grad()) return;
    auto& g = grad_buf(ap);
    for (std::size_t i = 0; i < n.grad.size(); ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += n.grad[i];
  });
}

Tensor sum_cols(const Tensor& a) {
  std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(c, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j] += a.at2(i, j);
  Tensor ap = a;
  return make_op("sum_cols", {c}, std::move(out), {a}, [ap, r, c](detail::Node& n) {
    if (!ap.requires_grad()) return;
    auto& g = grad_buf(ap);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += n.grad[j];
  });
}

Tensor dot(const Tensor& a, const Tensor& b) { return sum(mul(a, b)); }

// ---- shape / assembly ----

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                     shape_str(shape));
  }
  Tensor ap = a;
  return make_op("reshape", std::move(shape), a.value(), {a}, [ap](detail::Node& n) {
    if (!ap.requires_grad()) return;
    auto& g = grad_buf(ap);
    for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
  });
}

Tensor transpose(const Tensor& a) {
  std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a.at2(i, j);
  Tensor ap = a;
  return make_op("transpose", {c, r}, std::move(out), {a}, [ap, r, c](detail::Node& n) {
    if (!ap.requires_grad()) return;
    auto& g = grad_buf(ap);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += n.grad[j * r + i];
  });
}

Tensor slice1d(const Tensor& a, std::size_t offset, std::size_t len) {
  if (a.ndim() != 1) throw ShapeError("slice1d: tensor not 1-D");
  if (offset + len > a.size()) throw ShapeError("slice1d: range out of bounds");
  std::vector<double> out(a.value().begin() + offset, a.value().begin() + offset + len);
  Tensor ap = a;
  return make_op("slice1d", {len}, std::move(out), {a}, [ap, offset](detail::Node& n) {
    if (!ap.requires_grad()) return;
    auto& g = grad_buf(ap);
    for (std::size_t i = 0; i < n.grad.size(); ++i) g[offset + i] += n.grad[i];
  });
}

Tensor col(const Tensor& a, std::size_t j) {
  std::size_t r = a.rows(), c = a.cols();
  if (j >= c) throw ShapeError("col: index out of range");
  std::vector<double> out(r);
  for (std::size_t i = 0; i < r; ++i) out[i] = a.at2(i, j);
  Tensor ap = a;
  return make_op("col", {r}, std::move(out), {a}, [ap, j, c](detail::Node& n) {
    if (!ap.requires_grad()) return;
    auto& g = grad_buf(ap);
    for (std::size_t i = 0; i < n.grad.size(); ++i) g[i * c + j] += n.grad[i];
  });
}

Tensor cols_range(const Tensor& a, std::size_t j0, std::size_t len) {
  std::size_t r = a.rows(), c = a.cols();
  if (j0 + len > c) throw ShapeError("cols_range: range out of bounds");
  std::vector<double> out(r * len);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < len; ++j) out[i * len + j] = a.at2(i, j0 + j);
  Tensor ap = a;
  return make_op("cols_range", {r, len}, std::move(out), {a}, [ap, j0, c, len](detail::Node& n) {
    if (!ap.requires_grad()) return;
    auto& g = grad_buf(ap);
    std::size_t r2 = n.shape[0];
    for (std::size_t i = 0; i < r2; ++i)
      for (std::size_t j = 0; j < len; ++j) g[i * c + j0 + j] += n.grad[i * len + j];
  });
}

Tensor stack_cols(const std::vector<Tensor>& cols) {
  if (cols.empty()) throw ContractError("stack_cols: empty list");
  std::size_t r = cols[0].size(), c = cols.size();
  std::vector<double> out(r * c);
  for (std::size_t j = 0; j < c; ++j) {
    if (cols[j].ndim() != 1 || cols[j].size() != r)
      throw ShapeError("stack_cols: column length mismatch");
    for (std::size_t i = 0; i < r; ++i) out[i * c + j] = cols[j].at(i);
  }
  std::vector<Tensor> parents = cols;
  auto copy = cols;
  return make_op("stack_cols", {r, c}, std::move(out), std::move(parents),
                 [copy, r, c](detail::Node& n) {
                   for (std::size_t j = 0; j < c; ++j) {
                     if (!copy[j].requires_grad()) continue;
                     auto& g = grad_buf(copy[j]);
                     for (std::size_t i = 0; i < r; ++i) g[i] += n.grad[i * c + j];
                   }
                 });
}

Tensor stack_scalars(const std::vector<Tensor>& scalars) {
  if (scalars.empty()) throw ContractError("stack_scalars: empty list");
  std::vector<double> out(scalars.size());
  for (std::size_t i = 0; i < scalars.size(); ++i) {
    if (scalars[i].size() != 1) throw ShapeError("stack_scalars: entries must be scalars");
    out[i] = scalars[i].at(0);
  }
  auto copy = scalars;
  return make_op("stack_scalars", {scalars.size()}, std::move(out), scalars,
                 [copy](detail::Node& n) {
                   for (std::size_t i = 0; i < copy.size(); ++i) {
                     if (!copy[i].requires_grad()) continue;
                     grad_buf(copy[i])[0] += n.grad[i];
                   }
                 });
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  std::size_t r = a.rows();
  if (b.rows() != r) throw ShapeError("concat_cols: row count mismatch");
  std::size_t ca = a.cols(), cb = b.cols();
  std::vector<double> out(r * (ca + cb));
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < ca; ++j) out[i * (ca + cb) + j] = a.at2(i, j);
    for (std::size_t j = 0; j < cb; ++j) out[i * (ca + cb) + ca + j] = b.at2(i, j);
  }
  Tensor ap = a, bp = b;
  return make_op("concat_cols", {r, ca + cb}, std::move(out), {a, b},
                 [ap, bp, r, ca, cb](detail::Node& n) {
                   std::size_t c = ca + cb;
                   if (ap.requires_grad()) {
                     auto& g = grad_buf(ap);
                     for (std::size_t i = 0; i < r; ++i)
                       for (std::size_t j = 0; j < ca; ++j) g[i * ca + j] += n.grad[i * c + j];
                   }
                   if (bp.requires_grad()) {
                     auto& g = grad_buf(bp);
                     for (std::size_t i = 0; i < r; ++i)
                       for (std::size_t j = 0; j < cb; ++j)
                         g[i * cb + j] += n.grad[i * c + ca + j];
                   }
                 });
}

Tensor concat1d(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 1 || b.ndim() != 1) throw ShapeError("concat1d: tensors not 1-D");
  std::vector<double> out;
  out.reserve(a.size() + b.size());
  out.insert(out.end(), a.value().begin(), a.value().end());
  out.insert(out.end(), b.value().begin(), b.value().end());
  Tensor ap = a, bp = b;
  std::size_t na = a.size();
  return make_op("concat1d", {a.size() + b.size()}, std::move(out), {a, b},
                 [ap, bp, na](detail::Node& n) {
                   if (ap.requires_grad()) {
                     auto& g = grad_buf(ap);
                     for (std::size_t i = 0; i < na; ++i) g[i] += n.grad[i];
                   }
                   if (bp.requires_grad()) {
                     auto& g = grad_buf(bp);
                     for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[na + i];
                   }
                 });
}

Tensor append_ones_col(const Tensor& a) {
  std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(r * (c + 1));
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[i * (c + 1) + j] = a.at2(i, j);
    out[i * (c + 1) + c] = 1.0;
  }
  Tensor ap = a;
  return make_op("append_ones_col", {r, c + 1}, std::move(out), {a},
                 [ap, r, c](detail::Node& n) {
                   if (!ap.requires_grad()) return;
                   auto& g = grad_buf(ap);
                   for (std::size_t i = 0; i < r; ++i)
                     for (std::size_t j = 0; j < c; ++j)
                       g[i * c + j] += n.grad[i * (c + 1) + j];
                 });
}

Tensor diag_part(const Tensor& a) {
  std::size_t r = a.rows();
  if (a.cols() != r) throw ShapeError("diag_part: matrix not square");
  std::vector<double> out(r);
  for (std::size_t i = 0; i < r; ++i) out[i] = a.at2(i, i);
  Tensor ap = a;
  return make_op("diag_part", {r}, std::move(out), {a}, [ap, r](detail::Node& n) {
    if (!ap.requires_grad()) return;
    auto& g = grad_buf(ap);
    for (std::size_t i = 0; i < r; ++i) g[i * r + i] += n.grad[i];
  });
}

Tensor add_diag_const(const Tensor& a, double c) {
  std::size_t r = a.rows();
  if (a.cols() != r) throw ShapeError("add_diag_const: matrix not square");
  std::vector<double> out = a.value();
  for (std::size_t i = 0; i < r; ++i) out[i * r + i] += c;
  return unary("add_diag_const", a, std::move(out),
               [](double, double, double g) { return g; });
}

Tensor scale_rows(const Tensor& a, const Tensor& v) {
  std::size_t r = a.rows(), c = a.cols();
  if (v.ndim() != 1 || v.size() != r) throw ShapeError("scale_rows: vector length mismatch");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = a.at2(i, j) * v.at(i);
  Tensor ap = a, vp = v;
  return make_op("scale_rows", {r, c}, std::move(out), {a, v},
                 [ap, vp, r, c](detail::Node& n) {
                   if (ap.requires_grad()) {
                     auto& g = grad_buf(ap);
                     for (std::size_t i = 0; i < r; ++i)
                       for (std::size_t j = 0; j < c; ++j)
                         g[i * c + j] += n.grad[i * c + j] * vp.at(i);
                   }
                   if (vp.requires_grad()) {
                     auto& g = grad_buf(vp);
                     for (std::size_t i = 0; i < r; ++i) {
                       double acc = 0.0;
                       for (std::size_t j = 0; j < c; ++j)
                         acc += n.grad[i * c + j] * ap.at2(i, j);
                       g[i] += acc;
                     }
                   }
                 });
}

Tensor scale_cols(const Tensor& a, const Tensor& v) {
  std::size_t r = a.rows(), c = a.cols();
  if (v.ndim() != 1 || v.size() != c) throw ShapeError("scale_cols: vector length mismatch");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = a.at2(i, j) * v.at(j);
  Tensor ap = a, vp = v;
  return make_op("scale_cols", {r, c}, std::move(out), {a, v},
                 [ap, vp, r, c](detail::Node& n) {
                   if (ap.requires_grad()) {
                     auto& g = grad_buf(ap);
                     for (std::size_t i = 0; i < r; ++i)
                       for (std::size_t j = 0; j < c; ++j)
                         g[i * c + j] += n.grad[i * c + j] * vp.at(j);
                   }
                   if (vp.requires_grad()) {
                     auto& g = grad_buf(vp);
                     for (std::size_t j = 0; j < c; ++j) {
                       double acc = 0.0;
                       for (std::size_t i = 0; i < r; ++i)
                         acc += n.grad[i * c + j] * ap.at2(i, j);
                       g[j] += acc;
                     }
                   }
                 });
}

Tensor channels_to_rows(const Tensor& a) {
  if (a.ndim() != 3) throw ShapeError("channels_to_rows: expected [C x H x W]");
  std::size_t C = a.shape()[0], H = a.shape()[1], W = a.shape()[2];
  std::size_t hw = H * W;
  std::vector<double> out(a.size());
  for (std::size_t ch = 0; ch < C; ++ch)
    for (std::size_t p = 0; p < hw; ++p) out[p * C + ch] = a.at(ch * hw + p);
  Tensor ap = a;
  return make_op("channels_to_rows", {hw, C}, std::move(out), {a},
                 [ap, C, hw](detail::Node& n) {
                   if (!ap.requires_grad()) return;
                   auto& g = grad_buf(ap);
                   for (std::size_t ch = 0; ch < C; ++ch)
                     for (std::size_t p = 0; p < hw; ++p)
                       g[ch * hw + p] += n.grad[p * C + ch];
                 });
}

// ---- linear algebra ----

Tensor matmul(const Tensor& a, const Tensor& b) {
  std::size_t m = a.rows(), k = a.cols();
  if (b.rows() != k) {
    throw ShapeError("matmul: inner extents disagree " + shape_str(a.shape()) + " * " +
                     shape_str(b.shape()));
  }
  std::size_t n2 = b.cols();
  std::vector<double> out(m * n2);
  as_mat(out, m, n2) = as_mat(a.value(), m, k) * as_mat(b.value(), k, n2);
  Tensor ap = a, bp = b;
  return make_op("matmul", {m, n2}, std::move(out), {a, b},
                 [ap, bp, m, k, n2](detail::Node& n) {
                   auto gc = as_mat(n.grad, m, n2);
                   if (ap.requires_grad()) {
                     auto& g = grad_buf(ap);
                     as_mat(g, m, k) += gc * as_mat(bp.value(), k, n2).transpose();
                   }
                   if (bp.requires_grad()) {
                     auto& g = grad_buf(bp);
                     as_mat(g, k, n2) += as_mat(ap.value(), m, k).transpose() * gc;
                   }
                 });
}

namespace {

// Raw Cholesky of the lower triangle; returns false on a non-positive pivot.
bool chol_lower(const std::vector<double>& a, std::size_t n, std::vector<double>& l) {
  MapC A(a.data(), n, n);
  EMat LL = A.selfadjointView<Eigen::Lower>();
  Eigen::LLT<EMat> llt(LL);
  if (llt.info() != Eigen::Success) return false;
  EMat L = llt.matrixL();
  l.assign(L.data(), L.data() + n * n);
  return true;
}

void check_symmetric(const char* op, const Tensor& a) {
  std::size_t n = a.rows();
  if (a.cols() != n) throw ShapeError(std::string(op) + ": matrix not square");
  double scale = 1.0;
  for (std::size_t i = 0; i < a.size(); ++i) scale = std::max(scale, std::abs(a.at(i)));
  double tol = 1e-10 * scale;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (std::abs(a.at2(i, j) - a.at2(j, i)) > tol)
        throw ContractError(std::string(op) + ": matrix not symmetric within tolerance");
}

}  // namespace

Tensor cholesky(const Tensor& a) {
  check_symmetric("cholesky", a);
  std::size_t n = a.rows();
  std::vector<double> lv;
  if (!chol_lower(a.value(), n, lv)) {
    throw PsdError("cholesky: matrix not positive definite");
  }
  Tensor ap = a;
  return make_op("cholesky", {n, n}, std::move(lv), {a}, [ap, n](detail::Node& nd) {
    if (!ap.requires_grad()) return;
    // reverse-mode rule for the Cholesky factor: with P the lower triangle of
    // L^T Lbar (diagonal halved), the symmetric sensitivity is
    // K = L^{-T} (P + P^T)/2 L^{-1}; the lower-triangle-read convention then
    // doubles off-diagonal entries.
    MapC L(nd.value.data(), n, n);
    EMat Lbar = MapC(nd.grad.data(), n, n);
    Lbar = Lbar.triangularView<Eigen::Lower>();  // mask structural zeros
    EMat P = (L.transpose() * Lbar).eval();
    EMat Ph = P.triangularView<Eigen::Lower>();
    Ph.diagonal() *= 0.5;
    EMat H = 0.5 * (Ph + Ph.transpose());
    EMat K = L.transpose().triangularView<Eigen::Upper>().solve(H);
    K = L.transpose().triangularView<Eigen::Upper>().solve(K.transpose()).transpose();
    auto& g = grad_buf(ap);
    for (std::size_t i = 0; i < n; ++i) {
      g[i * n + i] += K(i, i);
      for (std::size_t j = 0; j < i; ++j) g[i * n + j] += 2.0 * K(i, j);
    }
  });
}

Tensor cholesky_jittered(const Tensor& a) {
  try {
    return cholesky(a);
  } catch (const PsdError&) {
  }
  std::size_t n = a.rows();
  double diag_mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) diag_mean += a.at2(i, i);
  diag_mean = std::abs(diag_mean) / static_cast<double>(n);
  if (diag_mean == 0.0) diag_mean = 1.0;
  double jitter = 1e-6 * diag_mean;
  for (int attempt = 0; attempt < 3; ++attempt, jitter *= 10.0) {
    try {
      return cholesky(add_diag_const(a, jitter));
    } catch (const PsdError&) {
    }
  }
  throw PsdError("cholesky_jittered: matrix not positive definite after 3 jitter retries");
}

Tensor solve_lower(const Tensor& l, const Tensor& b) {
  std::size_t n = l.rows();
  if (l.cols() != n) throw ShapeError("solve_lower: matrix not square");
  bool vec = b.ndim() == 1;
  std::size_t br = vec ? b.size() : b.rows();
  std::size_t bc = vec ? 1 : b.cols();
  if (br != n) throw ShapeError("solve_lower: dimension mismatch");
  std::vector<double> out(b.size());
  as_mat(out, n, bc) =
      as_mat(l.value(), n, n).triangularView<Eigen::Lower>().solve(as_mat(b.value(), n, bc));
  Tensor lp = l, bp = b;
  return make_op("solve_lower", b.shape(), std::move(out), {l, b},
                 [lp, bp, n, bc](detail::Node& nd) {
                   MapC L(lp.value().data(), n, n);
                   MapC X(nd.value.data(), n, bc);
                   MapC G(nd.grad.data(), n, bc);
                   EMat Bbar = L.transpose().triangularView<Eigen::Upper>().solve(G);
                   if (bp.requires_grad()) {
                     auto& g = grad_buf(bp);
                     as_mat(g, n, bc) += Bbar;
                   }
                   if (lp.requires_grad()) {
                     EMat Lbar = -(Bbar * X.transpose());
                     auto& g = grad_buf(lp);
                     for (std::size_t i = 0; i < n; ++i)
                       for (std::size_t j = 0; j <= i; ++j) g[i * n + j] += Lbar(i, j);
                   }
                 });
}

Tensor solve_lower_t(const Tensor& l, const Tensor& b) {
  std::size_t n = l.rows();
  if (l.cols() != n) throw ShapeError("solve_lower_t: matrix not square");
  bool vec = b.ndim() == 1;
  std::size_t br = vec ? b.size() : b.rows();
  std::size_t bc = vec ? 1 : b.cols();
  if (br != n) throw ShapeError("solve_lower_t: dimension mismatch");
  std::vector<double> out(b.size());
  as_mat(out, n, bc) = as_mat(l.value(), n, n)
                           .transpose()
                           .triangularView<Eigen::Upper>()
                           .solve(as_mat(b.value(), n, bc));
  Tensor lp = l, bp = b;
  return make_op("solve_lower_t", b.shape(), std::move(out), {l, b},
                 [lp, bp, n, bc](detail::Node& nd) {
                   MapC L(lp.value().data(), n, n);
                   MapC X(nd.value.data(), n, bc);
                   MapC G(nd.grad.data(), n, bc);
                   EMat Bbar = L.triangularView<Eigen::Lower>().solve(G);
                   if (bp.requires_grad()) {
                     auto& g = grad_buf(bp);
                     as_mat(g, n, bc) += Bbar;
                   }
                   if (lp.requires_grad()) {
                     EMat Lbar = -(X * Bbar.transpose());
                     auto& g = grad_buf(lp);
                     for (std::size_t i = 0; i < n; ++i)
                       for (std::size_t j = 0; j <= i; ++j) g[i * n + j] += Lbar(i, j);
                   }
                 });
}

Tensor solve_psd(const Tensor& a, const Tensor& b) {
  Tensor l = cholesky(a);
  return solve_lower_t(l, solve_lower(l, b));
}

// ---- convolution ----

Tensor conv1d(const Tensor& input, const Tensor& kernels) {
  if (input.ndim() != 2) throw ShapeError("conv1d: input must be [C_in x L]");
  if (kernels.ndim() != 3) throw ShapeError("conv1d: kernels must be [C_out x C_in x K]");
  std::size_t cin = input.shape()[0], len = input.shape()[1];
  std::size_t cout = kernels.shape()[0], kcin = kernels.shape()[1], K = kernels.shape()[2];
  if (kcin != cin) throw ShapeError("conv1d: channel mismatch");
  if (K % 2 == 0) throw ContractError("conv1d: kernel size must be odd");
  long half = static_cast<long>(K / 2);
  std::vector<double> out(cout * len, 0.0);
  const auto& x = input.value();
  const auto& w = kernels.value();
  for (std::size_t oc = 0; oc < cout; ++oc)
    for (std::size_t ic = 0; ic < cin; ++ic)
      for (std::size_t t = 0; t < len; ++t) {
        double acc = 0.0;
        for (std::size_t k = 0; k < K; ++k) {
          long src = static_cast<long>(t) + static_cast<long>(k) - half;
          if (src < 0 || src >= static_cast<long>(len)) continue;
          acc += x[ic * len + src] * w[(oc * cin + ic) * K + k];
        }
        out[oc * len + t] += acc;
      }
  Tensor xp = input, wp = kernels;
  return make_op("conv1d", {cout, len}, std::move(out), {input, kernels},
                 [xp, wp, cin, cout, len, K, half](detail::Node& nd) {
                   const auto& x = xp.value();
                   const auto& w = wp.value();
                   auto* gx = xp.requires_grad() ? &grad_buf(xp) : nullptr;
                   auto* gw = wp.requires_grad() ? &grad_buf(wp) : nullptr;
                   for (std::size_t oc = 0; oc < cout; ++oc)
                     for (std::size_t ic = 0; ic < cin; ++ic)
                       for (std::size_t t = 0; t < len; ++t) {
                         double g = nd.grad[oc * len + t];
                         if (g == 0.0) continue;
                         for (std::size_t k = 0; k < K; ++k) {
                           long src = static_cast<long>(t) + static_cast<long>(k) - half;
                           if (src < 0 || src >= static_cast<long>(len)) continue;
                           if (gx) (*gx)[ic * len + src] += g * w[(oc * cin + ic) * K + k];
                           if (gw) (*gw)[(oc * cin + ic) * K + k] += g * x[ic * len + src];
                         }
                       }
                 });
}

Tensor conv2d(const Tensor& input, const Tensor& kernels) {
  if (input.ndim() != 3) throw ShapeError("conv2d: input must be [C_in x H x W]");
  if (kernels.ndim() != 4) throw ShapeError("conv2d: kernels must be [C_out x C_in x K x K]");
  std::size_t cin = input.shape()[0], H = input.shape()[1], W = input.shape()[2];
  std::size_t cout = kernels.shape()[0], kcin = kernels.shape()[1];
  std::size_t Kh = kernels.shape()[2], Kw = kernels.shape()[3];
  if (kcin != cin) throw ShapeError("conv2d: channel mismatch");
  if (Kh % 2 == 0 || Kw % 2 == 0) throw ContractError("conv2d: kernel size must be odd");
  long hh = static_cast<long>(Kh / 2), hw = static_cast<long>(Kw / 2);
  std::vector<double> out(cout * H * W, 0.0);
  const auto& x = input.value();
  const auto& w = kernels.value();
  for (std::size_t oc = 0; oc < cout; ++oc)
    for (std::size_t ic = 0; ic < cin; ++ic)
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j) {
          double acc = 0.0;
          for (std::size_t ki = 0; ki < Kh; ++ki) {
            long si = static_cast<long>(i) + static_cast<long>(ki) - hh;
            if (si < 0 || si >= static_cast<long>(H)) continue;
            for (std::size_t kj = 0; kj < Kw; ++kj) {
              long sj = static_cast<long>(j) + static_cast<long>(kj) - hw;
              if (sj < 0 || sj >= static_cast<long>(W)) continue;
              acc += x[(ic * H + si) * W + sj] * w[((oc * cin + ic) * Kh + ki) * Kw + kj];
            }
          }
          out[(oc * H + i) * W + j] += acc;
        }
  Tensor xp = input, wp = kernels;
  return make_op(
      "conv2d", {cout, H, W}, std::move(out), {input, kernels},
      [xp, wp, cin, cout, H, W, Kh, Kw, hh, hw](detail::Node& nd) {
        const auto& x = xp.value();
        const auto& w = wp.value();
        auto* gx = xp.requires_grad() ? &grad_buf(xp) : nullptr;
        auto* gw = wp.requires_grad() ? &grad_buf(wp) : nullptr;
        for (std::size_t oc = 0; oc < cout; ++oc)
          for (std::size_t ic = 0; ic < cin; ++ic)
            for (std::size_t i = 0; i < H; ++i)
              for (std::size_t j = 0; j < W; ++j) {
                double g = nd.grad[(oc * H + i) * W + j];
                if (g == 0.0) continue;
                for (std::size_t ki = 0; ki < Kh; ++ki) {
                  long si = static_cast<long>(i) + static_cast<long>(ki) - hh;
                  if (si < 0 || si >= static_cast<long>(H)) continue;
                  for (std::size_t kj = 0; kj < Kw; ++kj) {
                    long sj = static_cast<long>(j) + static_cast<long>(kj) - hw;
                    if (sj < 0 || sj >= static_cast<long>(W)) continue;
                    if (gx)
                      (*gx)[(ic * H + si) * W + sj] +=
                          g * w[((oc * cin + ic) * Kh + ki) * Kw + kj];
                    if (gw)
                      (*gw)[((oc * cin + ic) * Kh + ki) * Kw + kj] +=
                          g * x[(ic * H + si) * W + sj];
                  }
                }
              }
      });
}

Tensor logmeanexp(const std::vector<Tensor>& scalars) {
  if (scalars.empty()) throw ContractError("logmeanexp: empty list");
  double m = scalars[0].scalar_value();
  for (const auto& s : scalars) m = std::max(m, s.scalar_value());
  Tensor v = stack_scalars(scalars);
  Tensor shifted = exp(add_const(v, -m));
  return add_const(log(mean(shifted)), m);
}

}  // namespace abnn
