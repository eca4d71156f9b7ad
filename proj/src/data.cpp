#include "splitmeanflow/data.hpp"

#include <cmath>
#include <fstream>
#include <numbers>

#include "splitmeanflow/error.hpp"

namespace splitmeanflow {

int ToyDataset::num_classes() const {
  if (!labeled) return 0;
  switch (kind) {
    case Kind::gauss_mixture_8: return 8;
    case Kind::two_moons: return 2;
    case Kind::checkerboard: return 8;
    case Kind::one_d_bimodal: return 2;
  }
  return 0;
}

ToyDataset::Kind parse_dataset_kind(std::string_view name) {
  if (name == "gauss_mixture_8") return ToyDataset::Kind::gauss_mixture_8;
  if (name == "two_moons") return ToyDataset::Kind::two_moons;
  if (name == "checkerboard") return ToyDataset::Kind::checkerboard;
  if (name == "one_d_bimodal") return ToyDataset::Kind::one_d_bimodal;
  throw Error(ErrorCategory::config, "unknown dataset '" + std::string(name) + "'");
}

std::string_view dataset_kind_name(ToyDataset::Kind kind) {
  switch (kind) {
    case ToyDataset::Kind::gauss_mixture_8: return "gauss_mixture_8";
    case ToyDataset::Kind::two_moons: return "two_moons";
    case ToyDataset::Kind::checkerboard: return "checkerboard";
    case ToyDataset::Kind::one_d_bimodal: return "one_d_bimodal";
  }
  return "unknown";
}

DataBatch sample_batch(const ToyDataset& dataset, Index n, Rng& rng) {
  if (n < 1) throw Error(ErrorCategory::invalid_argument, "sample_batch: n must be >= 1");
  using std::numbers::pi;
  DataBatch out;
  out.points.resize(n, dataset.dim());
  std::vector<int> labels(static_cast<std::size_t>(n));
  std::uniform_int_distribution<int> pick8(0, 7);
  std::uniform_int_distribution<int> pick2(0, 1);

  for (Index i = 0; i < n; ++i) {
    int label = 0;
    switch (dataset.kind) {
      case ToyDataset::Kind::gauss_mixture_8: {
        label = pick8(rng);
        const double angle = 2.0 * pi * label / 8.0;
        out.points(i, 0) = 2.0 * std::cos(angle) + 0.1 * standard_normal(rng);
        out.points(i, 1) = 2.0 * std::sin(angle) + 0.1 * standard_normal(rng);
        break;
      }
      case ToyDataset::Kind::two_moons: {
        label = pick2(rng);
        const double theta = pi * uniform01(rng);
        if (label == 0) {
          out.points(i, 0) = std::cos(theta);
          out.points(i, 1) = std::sin(theta);
        } else {
          out.points(i, 0) = 1.0 - std::cos(theta);
          out.points(i, 1) = 0.5 - std::sin(theta);
        }
        out.points(i, 0) += dataset.noise * standard_normal(rng);
        out.points(i, 1) += dataset.noise * standard_normal(rng);
        break;
      }
      case ToyDataset::Kind::checkerboard: {
        // Dark cells: (col + row) even on the 4 x 4 grid of unit cells.
        label = pick8(rng);
        const int row = label / 2;
        const int col = 2 * (label % 2) + (row % 2);
        out.points(i, 0) = -2.0 + col + uniform01(rng);
        out.points(i, 1) = -2.0 + row + uniform01(rng);
        break;
      }
      case ToyDataset::Kind::one_d_bimodal: {
        label = pick2(rng);
        out.points(i, 0) = (label == 0 ? -1.0 : 1.0) + 0.2 * standard_normal(rng);
        break;
      }
    }
    labels[static_cast<std::size_t>(i)] = label;
  }
  if (dataset.labeled) out.labels = std::move(labels);
  return out;
}

Matrix sample_prior(Index n, Index dim, Rng& rng) {
  Matrix eps(n, dim);
  for (Index i = 0; i < eps.size(); ++i) eps.data()[i] = standard_normal(rng);
  return eps;
}

void export_csv(const DataBatch& batch, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw Error(ErrorCategory::io, "cannot write " + path.string());
  os.precision(17);
  for (Index j = 0; j < batch.points.cols(); ++j) os << (j ? "," : "") << 'x' << j;
  if (batch.labels) os << ",label";
  os << '\n';
  for (Index i = 0; i < batch.points.rows(); ++i) {
    for (Index j = 0; j < batch.points.cols(); ++j) os << (j ? "," : "") << batch.points(i, j);
    if (batch.labels) os << ',' << (*batch.labels)[static_cast<std::size_t>(i)];
    os << '\n';
  }
}

}  // namespace splitmeanflow
