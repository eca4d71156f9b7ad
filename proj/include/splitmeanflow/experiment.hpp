#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "splitmeanflow/config.hpp"
#include "splitmeanflow/error.hpp"
#include "splitmeanflow/flow.hpp"
#include "splitmeanflow/metrics.hpp"
#include "splitmeanflow/smf.hpp"

namespace splitmeanflow {

// <out>/<run_id>/{config, checkpoints/, metrics.csv, samples.csv, summary.json, eval.csv}
struct RunPaths {
  std::filesystem::path root;
  std::filesystem::path config;
  std::filesystem::path checkpoints;
  std::filesystem::path final_checkpoint;
  std::filesystem::path metrics_csv;
  std::filesystem::path samples_csv;
  std::filesystem::path summary_json;
  std::filesystem::path eval_csv;

  static RunPaths of(const ExperimentConfig& config);
  void create() const;
};

// Training log as "step,objective,branch_mix,loss,isc_residual".
void write_training_log(const std::vector<LogRow>& log, const std::filesystem::path& path);

// Held-out data and prior draws shared by every evaluation of one seed, so
// teacher and student are scored on identical inputs.
struct EvalSet {
  DataBatch data;
  Matrix prior;
  std::vector<int> cond;  // held-out labels, empty when unlabeled
  double bandwidth = 1.0;
};

EvalSet make_eval_set(const ExperimentConfig& config);

// MMD of k-step few_step_sample draws against the held-out set.
double few_step_mmd(const VelocityNet& net, const EvalSet& eval, int k);
// MMD of guided Euler draws (n steps, CFG scale w) against the held-out set.
double euler_mmd(const VelocityNet& net, const EvalSet& eval, int n_steps, double w);

// Scores a trained average-velocity network: mmd_k1, mmd_k2, mmd_k<k>,
// isc_residual_mean/max and, with a teacher, teacher_mmd_euler and
// boundary_gap. One-dimensional data adds w2_k1.
MetricReport evaluate_student(const VelocityNet& net, const ExperimentConfig& config, const TeacherHandle* teacher);

// Scores a flow-matching network by guided Euler sampling.
MetricReport evaluate_teacher(const VelocityNet& net, const ExperimentConfig& config);

struct VerifyReport {
  std::string field;
  ResidualStats isc_displacement;
  ResidualStats isc_averaged;
  double meanflow_residual = 0.0;  // max |u - (v - (t - r) du/dt)|
  LimitTable limit;

  bool passed() const;
};

// Closed-form identity and limit checks for one analytic field.
VerifyReport verify_field(const AnalyticField& field, std::string_view name, Index probes, std::uint64_t seed);

// Process exit status for an error category; 0 is success.
int exit_code(ErrorCategory category);
inline constexpr int verification_failed_code = 20;
inline constexpr int unexpected_error_code = 1;

// Whole CLI: parses argv, runs the subcommand, reports "error[<category>]: ..."
// on `err`. Returns the exit status.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace splitmeanflow
