#pragma once

#include <cmath>
#include <concepts>
#include <filesystem>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "splitmeanflow/autodiff.hpp"
#include "splitmeanflow/data.hpp"
#include "splitmeanflow/flow.hpp"
#include "splitmeanflow/model.hpp"
#include "splitmeanflow/rng.hpp"

namespace splitmeanflow {

// Anything that maps (z, r, t) to an average velocity, row by row.
template <typename F>
concept AverageVelocityField = requires(const F& f, const Matrix& z, const Vector& r, const Vector& t) {
  { f.average_velocity(z, r, t) } -> std::convertible_to<Matrix>;
};

// A network bound to a fixed per-row conditioning, viewed as a field.
struct NetField {
  const VelocityNet& net;
  std::vector<int> cond;

  Matrix average_velocity(const Matrix& z, const Vector& r, const Vector& t) const {
    return forward(net, z, r, t, select(z.rows()));
  }
  Matrix instantaneous_velocity(const Matrix& z, const Vector& t) const {
    return as_instantaneous(net, z, t, select(z.rows()));
  }

 private:
  Conditioning select(Index rows) const {
    if (cond.empty()) return {};
    return Conditioning(cond.data(), static_cast<std::size_t>(rows));
  }
};

enum class MmdEstimator { unbiased, biased };

// Squared MMD with k(x, y) = exp(-|x - y|^2 / (2 bandwidth^2)).
double mmd_rbf(const Matrix& a, const Matrix& b, double bandwidth, MmdEstimator estimator = MmdEstimator::unbiased);

// Median of pairwise distances over the pooled sets (first max_points of each).
double median_pairwise_distance(const Matrix& a, const Matrix& b, Index max_points = 1000);

// Exact W2 between two 1-D empirical measures (any sizes).
double w2_1d(std::span<const double> a, std::span<const double> b);

// (z_t, r, s, t) probes with r <= s <= t, plus optional per-row labels.
struct IscProbes {
  Matrix z_t;
  Vector r;
  Vector s;
  Vector t;
  std::vector<int> cond;

  Index size() const { return z_t.rows(); }
};

// z_t built on the flow path from dataset draws; lambda in [lambda_min, lambda_max].
IscProbes make_isc_probes(const ToyDataset& dataset, Index n, Rng& rng, const TimeDistribution& dist = {});
// z_t ~ N(0, I); used for closed-form fields.
IscProbes make_isc_probes(Index n, Index dim, Rng& rng, const TimeDistribution& dist = {});

struct ResidualStats {
  double mean = 0.0;
  double max = 0.0;
};

enum class IscForm {
  averaged,      // |u(z_t,r,t) - (1-l) u(z_s,r,s) - l u(z_t,s,t)|
  displacement,  // |(t-r) u(z_t,r,t) - (s-r) u(z_s,r,s) - (t-s) u(z_t,s,t)|
};

// z_s comes from the field's own displacement: z_s = z_t - (t - s) u(z_t, s, t).
template <AverageVelocityField F>
ResidualStats isc_residual(const F& field, const IscProbes& probes, IscForm form = IscForm::averaged) {
  const Matrix u_short = field.average_velocity(probes.z_t, probes.s, probes.t);
  const Vector ts = probes.t - probes.s;
  const Vector sr = probes.s - probes.r;
  const Vector tr = probes.t - probes.r;
  const Matrix z_s = probes.z_t - ts.asDiagonal() * u_short;
  const Matrix u_first = field.average_velocity(z_s, probes.r, probes.s);
  const Matrix u_full = field.average_velocity(probes.z_t, probes.r, probes.t);
  ResidualStats stats;
  for (Index i = 0; i < probes.size(); ++i) {
    double norm;
    if (form == IscForm::displacement) {
      norm = (tr(i) * u_full.row(i) - sr(i) * u_first.row(i) - ts(i) * u_short.row(i)).norm();
    } else {
      const double lambda = tr(i) > 0.0 ? ts(i) / tr(i) : 0.0;
      norm = (u_full.row(i) - (1.0 - lambda) * u_first.row(i) - lambda * u_short.row(i)).norm();
    }
    stats.mean += norm;
    stats.max = std::max(stats.max, norm);
  }
  stats.mean /= static_cast<double>(probes.size());
  return stats;
}

struct LimitRow {
  double delta = 0.0;
  double error = 0.0;     // mean |(g(t) - g(s)) / (t - s) - v(z_t, t)|
  double roundoff = 0.0;  // cancellation floor of the quotient at this delta
};

struct LimitTable {
  std::vector<LimitRow> rows;
  double slope = std::numeric_limits<double>::quiet_NaN();  // NaN when every error is at roundoff
  bool exact = false;
};

// Least-squares slope of log(error) against log(delta), skipping rows whose
// error does not exceed their roundoff floor.
double fit_loglog_slope(std::span<const LimitRow> rows);

// Default grid: half-decades from 1e-1 down to 1e-6.
std::vector<double> default_limit_deltas();

// g(tau) = (tau - r) u(z_tau, r, tau) along the field's own trajectory; as
// s = t - delta -> t the difference quotient of g must approach v = u(z_t, t, t).
template <AverageVelocityField F>
LimitTable limit_theorem_check(const F& field, const Matrix& z_t, const Vector& r, const Vector& t,
                               std::span<const double> deltas) {
  LimitTable table;
  const Matrix v = field.average_velocity(z_t, t, t);
  const Matrix g_t = (t - r).asDiagonal() * field.average_velocity(z_t, r, t);
  for (double delta : deltas) {
    const Vector s = (t.array() - delta).matrix();
    const Matrix z_s = z_t - Vector::Constant(t.size(), delta).asDiagonal() * field.average_velocity(z_t, s, t);
    const Matrix g_s = (s - r).asDiagonal() * field.average_velocity(z_s, r, s);
    const Matrix lhs = (g_t - g_s) / delta;
    const double scale = g_t.rowwise().norm().mean() + g_s.rowwise().norm().mean();
    const double floor = 16.0 * std::numeric_limits<double>::epsilon() * scale / delta;
    table.rows.push_back({delta, (lhs - v).rowwise().norm().mean(), floor});
  }
  table.slope = fit_loglog_slope(table.rows);
  table.exact = std::isnan(table.slope);
  return table;
}

// Named scalar results of one evaluation.
struct MetricReport {
  std::string run_id;
  long step = 0;
  double wall_ms = 0.0;
  std::vector<std::pair<std::string, double>> scalars;

  void set(const std::string& name, double value);
  double get(const std::string& name) const;  // NaN when absent
};

// Long-format rows "run_id,step,wall_ms,metric,value"; header written once.
// Throws Error{invalid_argument} if a scalar is not finite.
void append_csv(const MetricReport& report, const std::filesystem::path& path);
void write_summary_json(const MetricReport& report, const std::filesystem::path& path);

}  // namespace splitmeanflow
