#include "splitmeanflow/autodiff.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

#include "splitmeanflow/error.hpp"
#include "splitmeanflow/instrument.hpp"

namespace splitmeanflow {
namespace {

std::pair<Index, Index> matrix_extents(const Shape& shape) {
  if (shape.empty()) throw Error(ErrorCategory::shape_mismatch, "tensor shape must have rank >= 1");
  for (auto e : shape) {
    if (e < 1) throw Error(ErrorCategory::shape_mismatch, "tensor extents must be >= 1, got " + shape_string(shape));
  }
  if (shape.size() == 1) return {shape[0], 1};
  Index rows = std::accumulate(shape.begin(), shape.end() - 1, Index{1}, std::multiplies<>());
  return {rows, shape.back()};
}

[[noreturn]] void shape_error(const char* op, const Tensor& a, const Tensor& b) {
  throw Error(ErrorCategory::shape_mismatch,
              std::string(op) + ": incompatible shapes " + shape_string(a.shape()) + " and " + shape_string(b.shape()));
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) shape_error(op, a, b);
}

Shape matrix_shape(const Matrix& m) { return {m.rows(), m.cols()}; }

Tape* common_tape(std::initializer_list<const Tensor*> operands) {
  Tape* tape = nullptr;
  for (const auto* t : operands) {
    if (!t->grad_tracked()) continue;
    if (tape != nullptr && tape != t->tape()) {
      throw Error(ErrorCategory::invalid_argument, "operands recorded on different tapes");
    }
    tape = t->tape();
  }
  return tape;
}

Tensor emit(Matrix value, Shape shape, std::initializer_list<const Tensor*> operands, Tape::BackwardFn fn) {
  if (Tape* tape = common_tape(operands)) return tape->record(std::move(value), std::move(shape), operands, std::move(fn));
  return Tensor(Shape(shape), std::span<const double>(value.data(), static_cast<std::size_t>(value.size())));
}

Matrix sigmoid(const Matrix& a) { return (1.0 + (-a.array()).exp()).inverse().matrix(); }

}  // namespace

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor() : Tensor(Shape{1}, std::span<const double>()) {}

Tensor::Tensor(Matrix value)
    : value_(std::make_shared<const Matrix>(std::move(value))), shape_{value_->rows(), value_->cols()} {
  matrix_extents(shape_);
}

Tensor::Tensor(Shape shape, std::span<const double> data) : shape_(std::move(shape)) {
  auto [rows, cols] = matrix_extents(shape_);
  Matrix m = Matrix::Zero(rows, cols);
  if (!data.empty()) {
    if (static_cast<Index>(data.size()) != rows * cols) {
      throw Error(ErrorCategory::shape_mismatch, "data length " + std::to_string(data.size()) +
                                                     " does not match shape " + shape_string(shape_));
    }
    std::copy(data.begin(), data.end(), m.data());
  }
  value_ = std::make_shared<const Matrix>(std::move(m));
}

Tensor::Tensor(std::shared_ptr<const Matrix> value, Shape shape, Tape* tape, std::size_t node)
    : value_(std::move(value)), shape_(std::move(shape)), tape_(tape), node_(node) {}

Tensor Tensor::from_vector(const Vector& v) {
  return Tensor(Shape{v.size()}, std::span<const double>(v.data(), static_cast<std::size_t>(v.size())));
}

Tensor Tensor::scalar(double v) { return Tensor(Shape{1}, std::span<const double>(&v, 1)); }

double Tensor::item() const {
  if (size() != 1) throw Error(ErrorCategory::shape_mismatch, "item() on non-scalar tensor " + shape_string(shape_));
  return (*value_)(0, 0);
}

bool GradSink::wants(std::size_t operand) const { return parents_.at(operand) != Tape::constant; }

void GradSink::add(std::size_t operand, const Matrix& grad) {
  auto id = parents_.at(operand);
  if (id != Tape::constant) tape_.accumulate(id, grad);
}

Tensor Tape::leaf(const Tensor& value) {
  Node node;
  node.is_leaf = true;
  node.rows = value.rows();
  node.cols = value.cols();
  nodes_.push_back(std::move(node));
  return Tensor(std::make_shared<const Matrix>(value.value()), value.shape(), this, nodes_.size() - 1);
}

Tensor Tape::record(Matrix value, Shape shape, std::initializer_list<const Tensor*> operands, BackwardFn fn) {
  Node node;
  node.rows = value.rows();
  node.cols = value.cols();
  node.backward = std::move(fn);
  for (const auto* t : operands) node.parents.push_back(t->grad_tracked() ? t->node() : constant);
  nodes_.push_back(std::move(node));
  return Tensor(std::make_shared<const Matrix>(std::move(value)), std::move(shape), this, nodes_.size() - 1);
}

void Tape::accumulate(std::size_t node, const Matrix& grad) {
  auto& g = grads_.at(node);
  if (g.size() == 0) {
    g = grad;
  } else {
    g += grad;
  }
}

Gradients Tape::backward(const Tensor& loss) {
  if (!loss.grad_tracked() || loss.tape() != this) {
    throw Error(ErrorCategory::invalid_argument, "backward: loss is not recorded on this tape");
  }
  if (loss.size() != 1) {
    throw Error(ErrorCategory::shape_mismatch, "backward: loss must be scalar, got " + shape_string(loss.shape()));
  }
  instrument::note_backward();
  grads_.assign(nodes_.size(), Matrix());
  grads_[loss.node()] = Matrix::Ones(1, 1);
  for (std::size_t i = loss.node() + 1; i-- > 0;) {
    auto& node = nodes_[i];
    if (node.is_leaf || grads_[i].size() == 0) continue;
    GradSink sink(*this, node.parents);
    node.backward(grads_[i], sink);
  }
  Gradients out;
  out.tape_ = this;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (nodes_[i].is_leaf && grads_[i].size() != 0) out.grads_.emplace(i, std::move(grads_[i]));
  }
  grads_.clear();
  return out;
}

Gradients backward(const Tensor& loss) {
  if (!loss.grad_tracked()) throw Error(ErrorCategory::invalid_argument, "backward: loss is not grad-tracked");
  return loss.tape()->backward(loss);
}

Tensor Gradients::operator[](const Tensor& leaf) const {
  if (!leaf.grad_tracked() || leaf.tape() != tape_) {
    throw Error(ErrorCategory::invalid_argument, "gradient requested for a tensor that is not a leaf of this tape");
  }
  auto it = grads_.find(leaf.node());
  Matrix g = it == grads_.end() ? Matrix::Zero(leaf.rows(), leaf.cols()) : it->second;
  return Tensor(leaf.shape(), std::span<const double>(g.data(), static_cast<std::size_t>(g.size())));
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  return emit(a.value() + b.value(), a.shape(), {&a, &b}, [](const Matrix& g, GradSink& s) {
    s.add(0, g);
    s.add(1, g);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  return emit(a.value() - b.value(), a.shape(), {&a, &b}, [](const Matrix& g, GradSink& s) {
    s.add(0, g);
    if (s.wants(1)) s.add(1, -g);
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  return emit(a.value().cwiseProduct(b.value()), a.shape(), {&a, &b}, [a, b](const Matrix& g, GradSink& s) {
    if (s.wants(0)) s.add(0, g.cwiseProduct(b.value()));
    if (s.wants(1)) s.add(1, g.cwiseProduct(a.value()));
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) shape_error("matmul", a, b);
  Matrix out = a.value() * b.value();
  Shape shape = matrix_shape(out);
  return emit(std::move(out), std::move(shape), {&a, &b}, [a, b](const Matrix& g, GradSink& s) {
    if (s.wants(0)) s.add(0, g * b.value().transpose());
    if (s.wants(1)) s.add(1, a.value().transpose() * g);
  });
}

Tensor scale(const Tensor& a, double factor) {
  return emit(a.value() * factor, a.shape(), {&a}, [factor](const Matrix& g, GradSink& s) { s.add(0, g * factor); });
}

Tensor relu(const Tensor& a) {
  Matrix out = a.value().cwiseMax(0.0);
  return emit(std::move(out), a.shape(), {&a}, [a](const Matrix& g, GradSink& s) {
    s.add(0, (a.value().array() > 0.0).select(g, 0.0));
  });
}

Tensor silu(const Tensor& a) {
  Matrix sig = sigmoid(a.value());
  Matrix out = a.value().cwiseProduct(sig);
  return emit(std::move(out), a.shape(), {&a}, [a, sig = std::move(sig)](const Matrix& g, GradSink& s) {
    auto d = sig.array() * (1.0 + a.value().array() * (1.0 - sig.array()));
    s.add(0, (g.array() * d).matrix());
  });
}

Tensor sin(const Tensor& a) {
  return emit(a.value().array().sin().matrix(), a.shape(), {&a}, [a](const Matrix& g, GradSink& s) {
    s.add(0, (g.array() * a.value().array().cos()).matrix());
  });
}

Tensor cos(const Tensor& a) {
  return emit(a.value().array().cos().matrix(), a.shape(), {&a}, [a](const Matrix& g, GradSink& s) {
    s.add(0, (-g.array() * a.value().array().sin()).matrix());
  });
}

Tensor square(const Tensor& a) {
  return emit(a.value().array().square().matrix(), a.shape(), {&a}, [a](const Matrix& g, GradSink& s) {
    s.add(0, 2.0 * g.cwiseProduct(a.value()));
  });
}

Tensor sum(const Tensor& a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  Index rows = a.rows(), cols = a.cols();
  return emit(std::move(out), Shape{1}, {&a}, [rows, cols](const Matrix& g, GradSink& s) {
    s.add(0, Matrix::Constant(rows, cols, g(0, 0)));
  });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

Tensor row_norm(const Tensor& a) {
  Vector norms = a.value().rowwise().norm();
  Matrix out = norms;
  return emit(std::move(out), Shape{a.rows()}, {&a}, [a, norms](const Matrix& g, GradSink& s) {
    Matrix d = a.value();
    for (Index i = 0; i < d.rows(); ++i) {
      d.row(i) *= norms(i) > 0.0 ? g(i, 0) / norms(i) : 0.0;
    }
    s.add(0, d);
  });
}

Tensor concat(const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows()) shape_error("concat", a, b);
  Matrix out = concat(a.value(), b.value());
  Index ca = a.cols(), cb = b.cols();
  Shape shape = matrix_shape(out);
  return emit(std::move(out), std::move(shape), {&a, &b}, [ca, cb](const Matrix& g, GradSink& s) {
    if (s.wants(0)) s.add(0, g.leftCols(ca));
    if (s.wants(1)) s.add(1, g.rightCols(cb));
  });
}

Tensor broadcast_rows(const Tensor& row, Index rows) {
  if (row.rows() != 1 || rows < 1) {
    throw Error(ErrorCategory::shape_mismatch,
                "broadcast_rows: expected a single row, got " + shape_string(row.shape()));
  }
  Matrix out = row.value().replicate(rows, 1);
  return emit(std::move(out), Shape{rows, row.cols()}, {&row}, [](const Matrix& g, GradSink& s) {
    s.add(0, g.colwise().sum());
  });
}

Tensor gather_rows(const Tensor& table, std::span<const int> ids) {
  Matrix out = gather_rows(table.value(), ids);
  std::vector<int> kept(ids.begin(), ids.end());
  Index rows = table.rows();
  Shape shape = matrix_shape(out);
  return emit(std::move(out), std::move(shape), {&table}, [kept = std::move(kept), rows](const Matrix& g, GradSink& s) {
    Matrix d = Matrix::Zero(rows, g.cols());
    for (std::size_t i = 0; i < kept.size(); ++i) d.row(kept[i]) += g.row(static_cast<Index>(i));
    s.add(0, d);
  });
}

Tensor stop_gradient(const Tensor& a) {
  return Tensor(a.shape(), a.data());
}

Tensor affine(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  return add(matmul(x, weight), broadcast_rows(bias, x.rows()));
}

Matrix silu(const Matrix& a) { return a.cwiseProduct(sigmoid(a)); }
Matrix sin(const Matrix& a) { return a.array().sin().matrix(); }
Matrix cos(const Matrix& a) { return a.array().cos().matrix(); }

Matrix concat(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw Error(ErrorCategory::shape_mismatch, "concat: incompatible shapes " + shape_string(matrix_shape(a)) +
                                                   " and " + shape_string(matrix_shape(b)));
  }
  Matrix out(a.rows(), a.cols() + b.cols());
  out << a, b;
  return out;
}

Matrix gather_rows(const Matrix& table, std::span<const int> ids) {
  Matrix out(static_cast<Index>(ids.size()), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= table.rows()) {
      throw Error(ErrorCategory::invalid_argument,
                  "gather_rows: id " + std::to_string(ids[i]) + " outside table of " + std::to_string(table.rows()) + " rows");
    }
    out.row(static_cast<Index>(i)) = table.row(ids[i]);
  }
  return out;
}

Matrix affine(const Matrix& x, const Matrix& weight, const Matrix& bias) {
  if (x.cols() != weight.rows() || bias.cols() != weight.cols()) {
    throw Error(ErrorCategory::shape_mismatch, "affine: incompatible shapes " + shape_string(matrix_shape(x)) +
                                                   " and " + shape_string(matrix_shape(weight)));
  }
  Matrix out = x * weight;
  out.rowwise() += bias.row(0);
  return out;
}

}  // namespace splitmeanflow
