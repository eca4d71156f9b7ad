#include "splitmeanflow/flow.hpp"

#include <algorithm>

#include "splitmeanflow/error.hpp"

namespace splitmeanflow {
namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double draw_time(Rng& rng, const TimeDistribution& dist) {
  switch (dist.kind) {
    case TimeDistribution::Kind::sorted_uniform: return uniform01(rng);
    case TimeDistribution::Kind::lognormal: return sigmoid(dist.mu + dist.sigma * standard_normal(rng));
  }
  return 0.0;
}

double draw_lambda(Rng& rng, const TimeDistribution& dist) {
  return dist.lambda_min + (dist.lambda_max - dist.lambda_min) * uniform01(rng);
}

}  // namespace

std::pair<double, double> sample_times(Rng& rng, const TimeDistribution& dist) {
  double a = draw_time(rng, dist);
  double b = draw_time(rng, dist);
  return {std::min(a, b), std::max(a, b)};
}

FlowSample make_flow_sample(const Vector& x, const Vector& eps, double r, double t, double lambda,
                            const Schedule& schedule) {
  if (x.size() != eps.size()) {
    throw Error(ErrorCategory::shape_mismatch, "flow sample: x [" + std::to_string(x.size()) + "] and eps [" +
                                                   std::to_string(eps.size()) + "] differ");
  }
  if (!(0.0 <= r && r <= t && t <= 1.0) || lambda < 0.0 || lambda > 1.0) {
    throw Error(ErrorCategory::invalid_argument, "flow sample: need 0 <= r <= t <= 1 and lambda in [0, 1]");
  }
  FlowSample out;
  out.x = x;
  out.eps = eps;
  out.t = t;
  out.r = r;
  out.lambda = lambda;
  out.s = (1.0 - lambda) * t + lambda * r;
  out.z_t = schedule.a(t) * x + schedule.b(t) * eps;
  return out;
}

FlowSample make_flow_sample(const Vector& x, const Vector& eps, Rng& rng, const TimeDistribution& dist,
                            const Schedule& schedule) {
  auto [r, t] = sample_times(rng, dist);
  double lambda = draw_lambda(rng, dist);
  return make_flow_sample(x, eps, r, t, lambda, schedule);
}

Vector conditional_velocity(const FlowSample& sample, const Schedule& schedule) {
  return schedule.da(sample.t) * sample.x + schedule.db(sample.t) * sample.eps;
}

FlowSample FlowBatch::row(Index i) const {
  FlowSample out;
  out.x = x.row(i).transpose();
  out.eps = eps.row(i).transpose();
  out.t = t(i);
  out.r = r(i);
  out.lambda = lambda(i);
  out.s = s(i);
  out.z_t = z_t.row(i).transpose();
  if (!cond.empty()) out.cond = cond[static_cast<std::size_t>(i)];
  return out;
}

FlowBatch make_flow_batch(const Matrix& x, std::span<const int> labels, const Matrix& eps, Rng& time_rng,
                          const TimeDistribution& dist, const Schedule& schedule) {
  if (x.rows() != eps.rows() || x.cols() != eps.cols()) {
    throw Error(ErrorCategory::shape_mismatch, "flow batch: x " + shape_string({x.rows(), x.cols()}) + " and eps " +
                                                   shape_string({eps.rows(), eps.cols()}) + " differ");
  }
  if (!labels.empty() && static_cast<Index>(labels.size()) != x.rows()) {
    throw Error(ErrorCategory::shape_mismatch, "flow batch: label count does not match rows");
  }
  const Index n = x.rows();
  FlowBatch batch;
  batch.x = x;
  batch.eps = eps;
  batch.t.resize(n);
  batch.r.resize(n);
  batch.s.resize(n);
  batch.lambda.resize(n);
  batch.z_t.resize(n, x.cols());
  batch.cond.assign(labels.begin(), labels.end());
  batch.boundary.assign(static_cast<std::size_t>(n), 0);
  for (Index i = 0; i < n; ++i) {
    auto [r, t] = sample_times(time_rng, dist);
    double lambda = draw_lambda(time_rng, dist);
    batch.t(i) = t;
    batch.r(i) = r;
    batch.lambda(i) = lambda;
    batch.s(i) = (1.0 - lambda) * t + lambda * r;
    batch.z_t.row(i) = schedule.a(t) * x.row(i) + schedule.b(t) * eps.row(i);
  }
  return batch;
}

void select_boundary_rows(FlowBatch& batch, double p, Rng& rng) {
  for (Index i = 0; i < batch.size(); ++i) {
    bool hit = uniform01(rng) < p;
    batch.boundary[static_cast<std::size_t>(i)] = hit ? 1 : 0;
    if (hit) {
      batch.r(i) = batch.t(i);
      batch.s(i) = batch.t(i);
    }
  }
}

Matrix conditional_velocity(const FlowBatch& batch, const Schedule& schedule) {
  Matrix v(batch.x.rows(), batch.x.cols());
  for (Index i = 0; i < batch.size(); ++i) {
    v.row(i) = schedule.da(batch.t(i)) * batch.x.row(i) + schedule.db(batch.t(i)) * batch.eps.row(i);
  }
  return v;
}

Tensor regression_loss(const Tensor& prediction, const Matrix& target, LossNorm norm) {
  Tensor diff = sub(prediction, stop_gradient(Tensor(target)));
  Tensor per_row_total = norm == LossNorm::squared ? sum(square(diff)) : sum(row_norm(diff));
  Tensor loss = scale(per_row_total, 1.0 / static_cast<double>(prediction.rows()));
  if (!std::isfinite(loss.item())) throw Error(ErrorCategory::poisoned_state, "loss is not finite");
  return loss;
}

Tensor cfm_loss(const VelocityNet& net, std::span<const Tensor> params, const FlowBatch& batch, double cfg_dropout,
                Rng& rng, LossNorm norm) {
  if (cfg_dropout < 0.0 || cfg_dropout > 1.0) {
    throw Error(ErrorCategory::invalid_argument, "cfg_dropout must lie in [0, 1]");
  }
  ForwardMode mode{true, cfg_dropout, &rng};
  Tensor prediction = forward(net, params, batch.z_t, batch.t, batch.t, batch.cond, mode);
  return regression_loss(prediction, conditional_velocity(batch), norm);
}

AnalyticField AnalyticField::constant(Vector c) { return AnalyticField(Kind::constant, std::move(c)); }
AnalyticField AnalyticField::time_poly() { return AnalyticField(Kind::time_poly, Vector()); }
AnalyticField AnalyticField::linear_state() { return AnalyticField(Kind::linear_state, Vector()); }

void AnalyticField::check_width(Index cols) const {
  if (kind_ == Kind::constant && c_.size() != cols) {
    throw Error(ErrorCategory::shape_mismatch, "constant field of width " + std::to_string(c_.size()) +
                                                   " applied to states of width " + std::to_string(cols));
  }
}

Matrix AnalyticField::instantaneous_velocity(const Matrix& z, const Vector& t) const {
  check_width(z.cols());
  Matrix out(z.rows(), z.cols());
  for (Index i = 0; i < z.rows(); ++i) {
    for (Index j = 0; j < z.cols(); ++j) out(i, j) = instantaneous(z(i, j), t(i), j);
  }
  return out;
}

Matrix AnalyticField::average_velocity(const Matrix& z, const Vector& r, const Vector& t) const {
  check_width(z.cols());
  Matrix out(z.rows(), z.cols());
  for (Index i = 0; i < z.rows(); ++i) {
    for (Index j = 0; j < z.cols(); ++j) out(i, j) = average(z(i, j), r(i), t(i), j);
  }
  return out;
}

std::pair<Matrix, Matrix> AnalyticField::total_derivative(const Matrix& z, const Vector& r, const Vector& t,
                                                          const Matrix& direction) const {
  check_width(z.cols());
  using D = Dual<double>;
  Matrix u(z.rows(), z.cols()), dudt(z.rows(), z.cols());
  for (Index i = 0; i < z.rows(); ++i) {
    for (Index j = 0; j < z.cols(); ++j) {
      D out = average(D(z(i, j), direction(i, j)), D(r(i), 0.0), D(t(i), 1.0), j);
      u(i, j) = out.value;
      dudt(i, j) = out.tangent;
    }
  }
  return {u, dudt};
}

Matrix analytic_average_velocity(const AnalyticField& field, const Matrix& z_t, const Vector& r, const Vector& t) {
  return field.average_velocity(z_t, r, t);
}

}  // namespace splitmeanflow
