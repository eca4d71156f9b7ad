#pragma once

// Forward-mode differentiation. Dual<Scalar> carries one directional
// derivative through closed-form scalar code; DualTensor carries a tangent
// matrix through the same primitive set the tape uses, so a network
// evaluated on DualTensor yields J(x) * tangent alongside f(x).

#include <cmath>
#include <span>
#include <utility>

#include "splitmeanflow/autodiff.hpp"
#include "splitmeanflow/error.hpp"
#include "splitmeanflow/instrument.hpp"

namespace splitmeanflow {

template <typename Scalar>
struct Dual {
  Scalar value{};
  Scalar tangent{};

  constexpr Dual() = default;
  constexpr Dual(Scalar v) : value(v) {}  // NOLINT: constants lift implicitly
  constexpr Dual(Scalar v, Scalar d) : value(v), tangent(d) {}

  friend constexpr Dual operator+(Dual a, Dual b) { return {a.value + b.value, a.tangent + b.tangent}; }
  friend constexpr Dual operator-(Dual a, Dual b) { return {a.value - b.value, a.tangent - b.tangent}; }
  friend constexpr Dual operator-(Dual a) { return {-a.value, -a.tangent}; }
  friend constexpr Dual operator*(Dual a, Dual b) {
    return {a.value * b.value, a.tangent * b.value + a.value * b.tangent};
  }
  friend constexpr Dual operator/(Dual a, Dual b) {
    return {a.value / b.value, (a.tangent * b.value - a.value * b.tangent) / (b.value * b.value)};
  }
};

template <typename Scalar>
Dual<Scalar> exp(Dual<Scalar> a) {
  using std::exp;
  Scalar e = exp(a.value);
  return {e, e * a.tangent};
}

template <typename Scalar>
Dual<Scalar> expm1(Dual<Scalar> a) {
  using std::exp;
  using std::expm1;
  return {expm1(a.value), exp(a.value) * a.tangent};
}

template <typename Scalar>
Dual<Scalar> sin(Dual<Scalar> a) {
  using std::cos;
  using std::sin;
  return {sin(a.value), cos(a.value) * a.tangent};
}

template <typename Scalar>
Dual<Scalar> cos(Dual<Scalar> a) {
  using std::cos;
  using std::sin;
  return {cos(a.value), -sin(a.value) * a.tangent};
}

struct DualTensor {
  Matrix primal;
  Matrix tangent;

  DualTensor() = default;
  DualTensor(Matrix p, Matrix t) : primal(std::move(p)), tangent(std::move(t)) {
    if (primal.rows() != tangent.rows() || primal.cols() != tangent.cols()) {
      throw Error(ErrorCategory::shape_mismatch, "dual tensor: primal " + shape_string({primal.rows(), primal.cols()}) +
                                                     " and tangent " + shape_string({tangent.rows(), tangent.cols()}) +
                                                     " differ");
    }
  }
  // A constant: zero tangent.
  static DualTensor constant(const Matrix& p) { return {p, Matrix::Zero(p.rows(), p.cols())}; }
};

inline DualTensor add(const DualTensor& a, const DualTensor& b) {
  return {a.primal + b.primal, a.tangent + b.tangent};
}
inline DualTensor sub(const DualTensor& a, const DualTensor& b) {
  return {a.primal - b.primal, a.tangent - b.tangent};
}
inline DualTensor mul(const DualTensor& a, const DualTensor& b) {
  return {a.primal.cwiseProduct(b.primal), a.tangent.cwiseProduct(b.primal) + a.primal.cwiseProduct(b.tangent)};
}
inline DualTensor scale(const DualTensor& a, double s) { return {a.primal * s, a.tangent * s}; }
inline DualTensor matmul(const DualTensor& a, const Matrix& b) { return {a.primal * b, a.tangent * b}; }
inline DualTensor matmul(const DualTensor& a, const DualTensor& b) {
  return {a.primal * b.primal, a.tangent * b.primal + a.primal * b.tangent};
}
inline DualTensor square(const DualTensor& a) { return mul(a, a); }

inline DualTensor silu(const DualTensor& a) {
  Matrix sig = (1.0 + (-a.primal.array()).exp()).inverse().matrix();
  Matrix d = (sig.array() * (1.0 + a.primal.array() * (1.0 - sig.array()))).matrix();
  return {a.primal.cwiseProduct(sig), a.tangent.cwiseProduct(d)};
}

inline DualTensor relu(const DualTensor& a) {
  return {a.primal.cwiseMax(0.0), (a.primal.array() > 0.0).select(a.tangent, 0.0)};
}

inline DualTensor sin(const DualTensor& a) {
  return {a.primal.array().sin().matrix(), (a.tangent.array() * a.primal.array().cos()).matrix()};
}

inline DualTensor cos(const DualTensor& a) {
  return {a.primal.array().cos().matrix(), (-a.tangent.array() * a.primal.array().sin()).matrix()};
}

inline DualTensor sum(const DualTensor& a) {
  return {Matrix::Constant(1, 1, a.primal.sum()), Matrix::Constant(1, 1, a.tangent.sum())};
}

inline DualTensor mean(const DualTensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.primal.size())); }

inline DualTensor concat(const DualTensor& a, const DualTensor& b) {
  return {concat(a.primal, b.primal), concat(a.tangent, b.tangent)};
}

inline DualTensor broadcast_rows(const DualTensor& row, Index rows) {
  return {row.primal.replicate(rows, 1), row.tangent.replicate(rows, 1)};
}

inline DualTensor affine(const DualTensor& x, const Matrix& weight, const Matrix& bias) {
  return {affine(x.primal, weight, bias), x.tangent * weight};
}

// Evaluates f on (x, tangent) and returns (f(x), J_f(x) * tangent).
template <typename F>
std::pair<Matrix, Matrix> jvp(F&& f, const Matrix& x, const Matrix& tangent) {
  if (x.rows() != tangent.rows() || x.cols() != tangent.cols()) {
    throw Error(ErrorCategory::shape_mismatch, "jvp: point " + shape_string({x.rows(), x.cols()}) + " and tangent " +
                                                   shape_string({tangent.rows(), tangent.cols()}) + " differ");
  }
  instrument::note_jvp();
  DualTensor out = std::forward<F>(f)(DualTensor(x, tangent));
  return {std::move(out.primal), std::move(out.tangent)};
}

}  // namespace splitmeanflow
