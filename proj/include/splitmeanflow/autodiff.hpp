#pragma once

// Small define-by-run tensor engine. A Tensor is an immutable dense value;
// when any operand of a primitive lives on a Tape the result is recorded
// there too, and Tape::backward sweeps the record in reverse once.
//
// Shapes: rank-1 {n} is viewed as an n x 1 column, rank >= 2 as
// (product of leading extents) x (last extent). Storage is row-major.

#include <Eigen/Dense>

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace splitmeanflow {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Matrix = MatrixX<double>;
using Vector = VectorX<double>;
using Index = Eigen::Index;
using Shape = std::vector<Index>;

std::string shape_string(const Shape& shape);

class Tape;

class Tensor {
 public:
  Tensor();  // scalar zero
  explicit Tensor(Matrix value);
  Tensor(Shape shape, std::span<const double> data);

  static Tensor from_vector(const Vector& v);
  static Tensor scalar(double v);

  const Shape& shape() const { return shape_; }
  const Matrix& value() const { return *value_; }
  std::span<const double> data() const { return {value_->data(), static_cast<std::size_t>(value_->size())}; }
  Index rows() const { return value_->rows(); }
  Index cols() const { return value_->cols(); }
  Index size() const { return value_->size(); }

  bool grad_tracked() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  std::size_t node() const { return node_; }

  // Value of a single-element tensor.
  double item() const;

 private:
  friend class Tape;
  Tensor(std::shared_ptr<const Matrix> value, Shape shape, Tape* tape, std::size_t node);

  std::shared_ptr<const Matrix> value_;
  Shape shape_;
  Tape* tape_ = nullptr;
  std::size_t node_ = 0;
};

// Gradient of a scalar loss with respect to tape leaves.
class Gradients {
 public:
  // Zero-filled when the leaf does not influence the loss (including leaves
  // reached only through stop_gradient).
  Tensor operator[](const Tensor& leaf) const;

 private:
  friend class Tape;
  std::unordered_map<std::size_t, Matrix> grads_;
  const Tape* tape_ = nullptr;
};

// Receives the output gradient of one node and forwards per-operand
// contributions. Operands that are constants are never asked for.
class GradSink {
 public:
  bool wants(std::size_t operand) const;
  void add(std::size_t operand, const Matrix& grad);

 private:
  friend class Tape;
  GradSink(Tape& tape, const std::vector<std::size_t>& parents) : tape_(tape), parents_(parents) {}
  Tape& tape_;
  const std::vector<std::size_t>& parents_;
};

class Tape {
 public:
  using BackwardFn = std::function<void(const Matrix& grad_out, GradSink& sink)>;
  static constexpr std::size_t constant = static_cast<std::size_t>(-1);

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Tensor leaf(const Tensor& value);
  Tensor leaf(Matrix value) { return leaf(Tensor(std::move(value))); }

  std::size_t size() const { return nodes_.size(); }
  // Operand node ids of `node`; `constant` marks an untracked operand.
  const std::vector<std::size_t>& parents(std::size_t node) const { return nodes_.at(node).parents; }
  bool is_leaf(std::size_t node) const { return nodes_.at(node).is_leaf; }

  Gradients backward(const Tensor& loss);

  // Appends a node whose operands are `operands` (tracked or not).
  Tensor record(Matrix value, Shape shape, std::initializer_list<const Tensor*> operands, BackwardFn fn);

 private:
  friend class GradSink;
  friend class Gradients;
  struct Node {
    std::vector<std::size_t> parents;
    BackwardFn backward;
    bool is_leaf = false;
    Index rows = 0;
    Index cols = 0;
  };
  void accumulate(std::size_t node, const Matrix& grad);

  std::vector<Node> nodes_;
  std::vector<Matrix> grads_;
};

Gradients backward(const Tensor& loss);

// Primitives. Each checks shapes and throws Error{shape_mismatch} naming both.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor relu(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor sin(const Tensor& a);
Tensor cos(const Tensor& a);
Tensor square(const Tensor& a);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor row_norm(const Tensor& a);  // per-row Euclidean norm, shape {rows}
Tensor concat(const Tensor& a, const Tensor& b);
Tensor broadcast_rows(const Tensor& row, Index rows);
// Rows of `table` selected by `ids`; gradient scatters back.
Tensor gather_rows(const Tensor& table, std::span<const int> ids);
Tensor stop_gradient(const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }

// Dense counterparts so templated model code can run untracked on Matrix.
Matrix silu(const Matrix& a);
Matrix sin(const Matrix& a);
Matrix cos(const Matrix& a);
Matrix concat(const Matrix& a, const Matrix& b);
Matrix gather_rows(const Matrix& table, std::span<const int> ids);
Matrix affine(const Matrix& x, const Matrix& weight, const Matrix& bias);
Tensor affine(const Tensor& x, const Tensor& weight, const Tensor& bias);

}  // namespace splitmeanflow
