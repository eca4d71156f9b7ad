#pragma once

#include <concepts>
#include <span>
#include <vector>

#include "splitmeanflow/autodiff.hpp"
#include "splitmeanflow/error.hpp"
#include "splitmeanflow/metrics.hpp"
#include "splitmeanflow/model.hpp"
#include "splitmeanflow/smf.hpp"

namespace splitmeanflow {

template <typename F>
concept InstantaneousVelocityField = requires(const F& f, const Matrix& z, const Vector& t) {
  { f.instantaneous_velocity(z, t) } -> std::convertible_to<Matrix>;
};

// A conditional network evaluated with classifier-free guidance.
struct GuidedField {
  const VelocityNet& net;
  std::vector<int> cond;
  double cfg_scale = 1.0;

  Matrix instantaneous_velocity(const Matrix& z, const Vector& t) const {
    return guided_velocity(net, z, t, cond, cfg_scale);
  }
};

namespace detail {
inline void check_state(const Matrix& z) {
  if (!z.allFinite()) throw Error(ErrorCategory::poisoned_state, "sampler state became non-finite");
}
}  // namespace detail

// Euler on dz/dt = v from t = 1 to t = 0 over n uniform steps:
// z_{t-h} = z_t - h v(z_t, t).
template <InstantaneousVelocityField F>
Matrix euler_sample(const F& field, int n_steps, const Matrix& eps) {
  if (n_steps < 1) throw Error(ErrorCategory::invalid_argument, "euler_sample: n_steps must be >= 1");
  Matrix z = eps;
  const double h = 1.0 / n_steps;
  for (int i = 0; i < n_steps; ++i) {
    const double t = 1.0 - i * h;
    z -= h * field.instantaneous_velocity(z, Vector::Constant(z.rows(), t));
    detail::check_state(z);
  }
  return z;
}

// Uniform grid 1 = t_0 > t_1 > ... > t_k = 0.
std::vector<double> uniform_time_grid(int k);

// Throws unless grid runs strictly downward from 1 to 0.
void check_time_grid(std::span<const double> grid);

// z_{t_{i+1}} = z_{t_i} - (t_i - t_{i+1}) u(z_{t_i}, t_{i+1}, t_i); one
// evaluation per grid interval.
template <AverageVelocityField F>
Matrix few_step_sample(const F& field, std::span<const double> grid, const Matrix& eps) {
  check_time_grid(grid);
  const auto k = grid.size() - 1;
  Matrix z = eps;
  for (std::size_t i = 0; i < k; ++i) {
    const Vector t = Vector::Constant(z.rows(), grid[i]);
    const Vector r = Vector::Constant(z.rows(), grid[i + 1]);
    z -= (grid[i] - grid[i + 1]) * field.average_velocity(z, r, t);
    detail::check_state(z);
  }
  return z;
}

template <AverageVelocityField F>
Matrix few_step_sample(const F& field, int k, const Matrix& eps) {
  if (k < 1) throw Error(ErrorCategory::invalid_argument, "few_step_sample: k must be >= 1");
  const auto grid = uniform_time_grid(k);
  return few_step_sample(field, std::span<const double>(grid), eps);
}

}  // namespace splitmeanflow
