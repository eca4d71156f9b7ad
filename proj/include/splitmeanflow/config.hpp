#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "splitmeanflow/data.hpp"
#include "splitmeanflow/model.hpp"
#include "splitmeanflow/smf.hpp"

namespace splitmeanflow {

// Everything one CLI run needs. Text form is `key = value` per line, `#`
// starts a comment; see README for the key list.
struct ExperimentConfig {
  std::string run_id = "run";
  std::filesystem::path out = "runs";
  ToyDataset dataset{ToyDataset::Kind::gauss_mixture_8, true, 0.1};
  NetConfig net;
  TrainPlan plan;
  std::filesystem::path teacher;
  std::filesystem::path checkpoint;
  Index sample_count = 2000;
  int k = 1;
  int euler_steps = 10;
  std::string sample_method = "few_step";  // few_step | euler
  std::vector<double> time_grid;           // empty = uniform over k steps
  Index eval_count = 2000;
  double mmd_bandwidth = 0.0;  // 0 = median heuristic

  // data_dim and num_classes follow the dataset.
  NetConfig resolved_net() const;
};

// Throws Error{config} naming the offending key.
void apply_setting(ExperimentConfig& config, std::string_view key, std::string_view value);

ExperimentConfig parse_config(std::istream& in);
ExperimentConfig load_config(const std::filesystem::path& path);

// Same text format; parse_config(render_config(c)) reproduces c.
std::string render_config(const ExperimentConfig& config);

}  // namespace splitmeanflow
