#pragma once

#include <filesystem>
#include <optional>

#include "splitmeanflow/data.hpp"
#include "splitmeanflow/model.hpp"
#include "splitmeanflow/smf.hpp"

namespace splitmeanflow {

// File layout:
//   line 1   UTF-8 JSON header terminated by '\n':
//            {"format", "version", "arch", "schedule", "plan", "dataset",
//             "param_count", "param_bytes", "has_ema"}
//   block    param_count little-endian float64 values in parameter order,
//            followed by the same count for the EMA shadow when has_ema.
inline constexpr int checkpoint_version = 1;
inline constexpr const char* checkpoint_format = "splitmeanflow-checkpoint";

struct Checkpoint {
  VelocityNet net;
  std::optional<VelocityNet> ema;
  TrainPlan plan;
  std::optional<ToyDataset> dataset;
};

// Writes to a sibling temp file, then renames over `path`.
void save_checkpoint(const std::filesystem::path& path, const VelocityNet& net, const VelocityNet* ema,
                     const TrainPlan& plan, const ToyDataset* dataset = nullptr);

// Errors: checkpoint_version, checkpoint_truncated, checkpoint_dimension,
// checkpoint_malformed, io.
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace splitmeanflow
