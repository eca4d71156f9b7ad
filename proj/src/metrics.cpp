#include "splitmeanflow/metrics.hpp"

#include <algorithm>
#include <fstream>

#include <json.hpp>

#include "splitmeanflow/error.hpp"

namespace splitmeanflow {
namespace {

Matrix squared_distances(const Matrix& a, const Matrix& b) {
  Matrix d = -2.0 * a * b.transpose();
  d.colwise() += a.rowwise().squaredNorm();
  d.rowwise() += b.rowwise().squaredNorm().transpose();
  return d.cwiseMax(0.0);
}

void check_sets(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() == 0 || b.rows() == 0) throw Error(ErrorCategory::invalid_argument, std::string(op) + ": empty point set");
  if (a.cols() != b.cols()) {
    throw Error(ErrorCategory::shape_mismatch, std::string(op) + ": point sets " + shape_string({a.rows(), a.cols()}) +
                                                   " and " + shape_string({b.rows(), b.cols()}) + " differ in dimension");
  }
}

}  // namespace

double mmd_rbf(const Matrix& a, const Matrix& b, double bandwidth, MmdEstimator estimator) {
  check_sets(a, b, "mmd_rbf");
  if (!(bandwidth > 0.0)) throw Error(ErrorCategory::invalid_argument, "mmd_rbf: bandwidth must be positive");
  const double gamma = 1.0 / (2.0 * bandwidth * bandwidth);
  const double m = static_cast<double>(a.rows());
  const double n = static_cast<double>(b.rows());
  const double kaa = (-gamma * squared_distances(a, a).array()).exp().sum();
  const double kbb = (-gamma * squared_distances(b, b).array()).exp().sum();
  const double kab = (-gamma * squared_distances(a, b).array()).exp().sum();
  if (estimator == MmdEstimator::biased) return kaa / (m * m) + kbb / (n * n) - 2.0 * kab / (m * n);
  if (a.rows() < 2 || b.rows() < 2) {
    throw Error(ErrorCategory::invalid_argument, "mmd_rbf: unbiased estimator needs at least two points per set");
  }
  // Diagonal terms are k(x, x) = 1.
  return (kaa - m) / (m * (m - 1.0)) + (kbb - n) / (n * (n - 1.0)) - 2.0 * kab / (m * n);
}

double median_pairwise_distance(const Matrix& a, const Matrix& b, Index max_points) {
  check_sets(a, b, "median_pairwise_distance");
  const Index na = std::min(a.rows(), max_points), nb = std::min(b.rows(), max_points);
  Matrix pooled(na + nb, a.cols());
  pooled << a.topRows(na), b.topRows(nb);
  const Matrix d = squared_distances(pooled, pooled);
  std::vector<double> values;
  values.reserve(static_cast<std::size_t>(d.rows() * (d.rows() - 1) / 2));
  for (Index i = 0; i < d.rows(); ++i) {
    for (Index j = i + 1; j < d.cols(); ++j) values.push_back(std::sqrt(d(i, j)));
  }
  if (values.empty()) return 1.0;
  auto mid = values.begin() + static_cast<std::ptrdiff_t>(values.size() / 2);
  std::nth_element(values.begin(), mid, values.end());
  return *mid > 0.0 ? *mid : 1.0;
}

double w2_1d(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) throw Error(ErrorCategory::invalid_argument, "w2_1d: empty sample");
  std::vector<double> xs(a.begin(), a.end()), ys(b.begin(), b.end());
  std::sort(xs.begin(), xs.end());
  std::sort(ys.begin(), ys.end());
  // Walk the merged quantile grid; breakpoints are i/m and j/n, compared in
  // integers to avoid drift.
  const long long m = static_cast<long long>(xs.size()), n = static_cast<long long>(ys.size());
  long long i = 0, j = 0, q = 0;
  double total = 0.0;
  while (i < m && j < n) {
    const long long next = std::min((i + 1) * n, (j + 1) * m);
    const double diff = xs[static_cast<std::size_t>(i)] - ys[static_cast<std::size_t>(j)];
    total += static_cast<double>(next - q) * diff * diff;
    q = next;
    if ((i + 1) * n == next) ++i;
    if ((j + 1) * m == next) ++j;
  }
  return std::sqrt(total / static_cast<double>(m * n));
}

namespace {

IscProbes fill_times(Matrix z_t, Vector r, Vector t, Rng& rng, const TimeDistribution& dist) {
  IscProbes probes;
  probes.s.resize(t.size());
  for (Index i = 0; i < t.size(); ++i) {
    const double lambda = dist.lambda_min + (dist.lambda_max - dist.lambda_min) * uniform01(rng);
    probes.s(i) = (1.0 - lambda) * t(i) + lambda * r(i);
  }
  probes.z_t = std::move(z_t);
  probes.r = std::move(r);
  probes.t = std::move(t);
  return probes;
}

}  // namespace

IscProbes make_isc_probes(const ToyDataset& dataset, Index n, Rng& rng, const TimeDistribution& dist) {
  DataBatch data = sample_batch(dataset, n, rng);
  Matrix eps = sample_prior(n, dataset.dim(), rng);
  Vector r(n), t(n);
  Matrix z(n, dataset.dim());
  for (Index i = 0; i < n; ++i) {
    auto [ri, ti] = sample_times(rng, dist);
    r(i) = ri;
    t(i) = ti;
    z.row(i) = (1.0 - ti) * data.points.row(i) + ti * eps.row(i);
  }
  IscProbes probes = fill_times(std::move(z), std::move(r), std::move(t), rng, dist);
  if (data.labels) probes.cond = *data.labels;
  return probes;
}

IscProbes make_isc_probes(Index n, Index dim, Rng& rng, const TimeDistribution& dist) {
  Matrix z = sample_prior(n, dim, rng);
  Vector r(n), t(n);
  for (Index i = 0; i < n; ++i) {
    auto [ri, ti] = sample_times(rng, dist);
    r(i) = ri;
    t(i) = ti;
  }
  return fill_times(std::move(z), std::move(r), std::move(t), rng, dist);
}

double fit_loglog_slope(std::span<const LimitRow> rows) {
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  int n = 0;
  for (const auto& row : rows) {
    if (!(row.error > row.roundoff) || !(row.delta > 0.0)) continue;
    const double x = std::log(row.delta), y = std::log(row.error);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
    ++n;
  }
  if (n < 2) return std::numeric_limits<double>::quiet_NaN();
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

std::vector<double> default_limit_deltas() {
  std::vector<double> deltas;
  for (int k = 2; k <= 12; ++k) deltas.push_back(std::pow(10.0, -0.5 * k));
  return deltas;
}

void MetricReport::set(const std::string& name, double value) {
  for (auto& [k, v] : scalars) {
    if (k == name) {
      v = value;
      return;
    }
  }
  scalars.emplace_back(name, value);
}

double MetricReport::get(const std::string& name) const {
  for (const auto& [k, v] : scalars) {
    if (k == name) return v;
  }
  return std::numeric_limits<double>::quiet_NaN();
}

void append_csv(const MetricReport& report, const std::filesystem::path& path) {
  for (const auto& [name, value] : report.scalars) {
    if (!std::isfinite(value)) {
      throw Error(ErrorCategory::invalid_argument, "metric '" + name + "' is not finite");
    }
  }
  const bool fresh = !std::filesystem::exists(path);
  std::ofstream os(path, std::ios::app);
  if (!os) throw Error(ErrorCategory::io, "cannot append to " + path.string());
  os.precision(17);
  if (fresh) os << "run_id,step,wall_ms,metric,value\n";
  for (const auto& [name, value] : report.scalars) {
    os << report.run_id << ',' << report.step << ',' << report.wall_ms << ',' << name << ',' << value << '\n';
  }
}

void write_summary_json(const MetricReport& report, const std::filesystem::path& path) {
  nlohmann::ordered_json j;
  j["run_id"] = report.run_id;
  j["step"] = report.step;
  j["wall_ms"] = report.wall_ms;
  nlohmann::ordered_json metrics = nlohmann::ordered_json::object();
  for (const auto& [name, value] : report.scalars) {
    metrics[name] = std::isfinite(value) ? nlohmann::ordered_json(value) : nlohmann::ordered_json();
  }
  j["metrics"] = metrics;
  std::ofstream os(path);
  if (!os) throw Error(ErrorCategory::io, "cannot write " + path.string());
  os << j.dump(2) << '\n';
}

}  // namespace splitmeanflow
