#pragma once

#include <cmath>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "splitmeanflow/autodiff.hpp"
#include "splitmeanflow/dual.hpp"
#include "splitmeanflow/model.hpp"
#include "splitmeanflow/rng.hpp"

namespace splitmeanflow {

// z_t = a(t) x + b(t) eps. Only the linear path exists today.
struct Schedule {
  enum class Kind { linear };
  Kind kind = Kind::linear;

  double a(double t) const { return 1.0 - t; }
  double b(double t) const { return t; }
  double da(double) const { return -1.0; }
  double db(double) const { return 1.0; }
};

// Law of (r, t) and of the split fraction lambda.
struct TimeDistribution {
  enum class Kind { sorted_uniform, lognormal };
  Kind kind = Kind::sorted_uniform;
  double mu = -0.4;  // lognormal: sigmoid(N(mu, sigma))
  double sigma = 1.0;
  double lambda_min = 0.0;
  double lambda_max = 1.0;
};

// Draws (r, t) with r <= t.
std::pair<double, double> sample_times(Rng& rng, const TimeDistribution& dist);

struct FlowSample {
  Vector x;
  Vector eps;
  double t = 0.0;
  double r = 0.0;
  double lambda = 0.0;
  double s = 0.0;  // (1 - lambda) t + lambda r
  Vector z_t;
  std::optional<int> cond;
};

FlowSample make_flow_sample(const Vector& x, const Vector& eps, Rng& rng, const TimeDistribution& dist = {},
                            const Schedule& schedule = {});

// Same construction with explicit times.
FlowSample make_flow_sample(const Vector& x, const Vector& eps, double r, double t, double lambda,
                            const Schedule& schedule = {});

Vector conditional_velocity(const FlowSample& sample, const Schedule& schedule = {});

// Structure-of-arrays batch of flow samples. `boundary[i]` marks rows whose
// r was collapsed onto t for the boundary-condition branch.
struct FlowBatch {
  Matrix x;
  Matrix eps;
  Matrix z_t;
  Vector t;
  Vector r;
  Vector s;
  Vector lambda;
  std::vector<int> cond;  // empty when unlabeled
  std::vector<char> boundary;

  Index size() const { return x.rows(); }
  FlowSample row(Index i) const;
};

FlowBatch make_flow_batch(const Matrix& x, std::span<const int> labels, const Matrix& eps, Rng& time_rng,
                          const TimeDistribution& dist = {}, const Schedule& schedule = {});

// Marks each row as boundary with probability p and sets r = s = t there.
void select_boundary_rows(FlowBatch& batch, double p, Rng& rng);

Matrix conditional_velocity(const FlowBatch& batch, const Schedule& schedule = {});

enum class LossNorm { squared, unsquared };

// Mean over rows of ||pred_i - sg(target_i)||^2 (or the plain norm).
Tensor regression_loss(const Tensor& prediction, const Matrix& target, LossNorm norm = LossNorm::squared);

// Conditional flow matching: v_theta(z_t, t) against eps - x, with
// condition dropout applied per row. Throws Error{poisoned_state} on NaN.
Tensor cfm_loss(const VelocityNet& net, std::span<const Tensor> params, const FlowBatch& batch, double cfg_dropout,
                Rng& rng, LossNorm norm = LossNorm::squared);

// Closed-form velocity fields used as oracles. Each acts per component, so
// its average velocity is written once over a generic scalar.
class AnalyticField {
 public:
  enum class Kind { constant, time_poly, linear_state };

  static AnalyticField constant(Vector c);
  static AnalyticField time_poly();     // v(z, tau) = tau
  static AnalyticField linear_state();  // v(z, tau) = -z

  Kind kind() const { return kind_; }
  // Required state width; 0 when any width works.
  Index dim() const { return kind_ == Kind::constant ? c_.size() : 0; }

  // v(z, tau) for one component.
  template <typename S>
  S instantaneous(S z, S tau, Index component) const;

  // u(z_t, r, t) for one component; r == t gives v.
  template <typename S>
  S average(S z, S r, S t, Index component) const;

  Matrix instantaneous_velocity(const Matrix& z, const Vector& t) const;
  Matrix average_velocity(const Matrix& z, const Vector& r, const Vector& t) const;

  // (u, du/dt) along (dz, dr, dt) = (direction, 0, 1).
  std::pair<Matrix, Matrix> total_derivative(const Matrix& z, const Vector& r, const Vector& t,
                                             const Matrix& direction) const;

 private:
  AnalyticField(Kind kind, Vector c) : kind_(kind), c_(std::move(c)) {}
  void check_width(Index cols) const;

  Kind kind_;
  Vector c_;
};

Matrix analytic_average_velocity(const AnalyticField& field, const Matrix& z_t, const Vector& r, const Vector& t);

template <typename S>
S AnalyticField::instantaneous(S z, S tau, Index component) const {
  switch (kind_) {
    case Kind::constant: return S(c_(component));
    case Kind::time_poly: return tau;
    case Kind::linear_state: return S(0.0) - z;
  }
  return S(0.0);
}

template <typename S>
S AnalyticField::average(S z, S r, S t, Index component) const {
  switch (kind_) {
    case Kind::constant: return S(c_(component));
    case Kind::time_poly: return (t + r) * S(0.5);
    case Kind::linear_state: {
      // Along z_tau = z_t e^{t - tau}: u = -z_t expm1(h) / h with h = t - r.
      using std::abs;
      using std::expm1;
      S h = t - r;
      double hv;
      if constexpr (std::is_same_v<S, double>) {
        hv = h;
      } else {
        hv = h.value;
      }
      S phi = std::abs(hv) < 1e-4 ? S(1.0) + h * (S(0.5) + h * (S(1.0 / 6.0) + h * S(1.0 / 24.0)))
                                  : expm1(h) / h;
      return S(0.0) - z * phi;
    }
  }
  return S(0.0);
}

}  // namespace splitmeanflow
