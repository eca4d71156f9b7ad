#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "splitmeanflow/autodiff.hpp"
#include "splitmeanflow/rng.hpp"

namespace splitmeanflow {

// Exact samplers for low-dimensional toy targets.
//
//   gauss_mixture_8  ring of 8 isotropic Gaussians, radius 2, sigma 0.1;
//                    class = component. Mean norm is 2 + O(sigma^2).
//   two_moons        interleaved half circles plus N(0, noise^2) jitter;
//                    class = moon.
//   checkerboard     uniform on the 8 dark cells of a 4 x 4 board over
//                    [-2, 2]^2; class = cell index.
//   one_d_bimodal    +-1 with sigma 0.2 in one dimension; class = sign.
struct ToyDataset {
  enum class Kind { gauss_mixture_8, two_moons, checkerboard, one_d_bimodal };
  Kind kind = Kind::gauss_mixture_8;
  bool labeled = false;
  double noise = 0.1;  // two_moons jitter

  Index dim() const { return kind == Kind::one_d_bimodal ? 1 : 2; }
  int num_classes() const;  // 0 when unlabeled
};

ToyDataset::Kind parse_dataset_kind(std::string_view name);
std::string_view dataset_kind_name(ToyDataset::Kind kind);

struct DataBatch {
  Matrix points;
  std::optional<std::vector<int>> labels;
};

DataBatch sample_batch(const ToyDataset& dataset, Index n, Rng& rng);

// Draws n rows of N(0, I) in `dim` dimensions.
Matrix sample_prior(Index n, Index dim, Rng& rng);

// CSV snapshot: one row per point, columns x0..x{d-1}[,label].
void export_csv(const DataBatch& batch, const std::filesystem::path& path);

}  // namespace splitmeanflow
