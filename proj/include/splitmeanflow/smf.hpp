#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "splitmeanflow/data.hpp"
#include "splitmeanflow/flow.hpp"
#include "splitmeanflow/instrument.hpp"
#include "splitmeanflow/model.hpp"

namespace splitmeanflow {

enum class TrainMode { from_scratch, distill };
enum class Objective { splitmeanflow, meanflow };

std::string_view objective_name(Objective objective);

// Every knob of one training run.
struct TrainPlan {
  double flow_ratio_p = 0.75;
  double cfg_scale_w = 1.0;
  double cfg_dropout_pretrain = 0.1;
  double cfg_dropout_distill = 0.0;
  Index batch_size = 256;
  long steps = 30000;
  double lr = 1e-4;
  long warmup_steps = 1000;
  double ema_decay = 0.999;
  bool use_ema = true;
  TimeDistribution time_dist{TimeDistribution::Kind::sorted_uniform, -0.4, 1.0, 0.05, 0.95};
  std::uint64_t seed = 0;
  TrainMode mode = TrainMode::from_scratch;
  Objective objective = Objective::splitmeanflow;
  LossNorm loss_norm = LossNorm::squared;
  long log_every = 100;
  Index probe_count = 256;
  double divergence_threshold = 1e3;
  int divergence_patience = 10;

  // Condition dropout in effect for the prediction pass.
  double cfg_dropout() const { return mode == TrainMode::distill ? cfg_dropout_distill : cfg_dropout_pretrain; }

  // Throws Error{invalid_argument|missing_teacher}.
  void validate(bool has_teacher) const;
};

// Frozen flow-matching model supplying guided instantaneous velocities.
class TeacherHandle {
 public:
  TeacherHandle(std::shared_ptr<const VelocityNet> net, double cfg_scale_w);

  const VelocityNet& net() const { return *net_; }
  double cfg_scale() const { return cfg_scale_w_; }

  // v_null + w (v_cond - v_null); one forward when w is 0 or 1 or the net
  // is unconditional.
  Matrix velocity(const Matrix& z, const Vector& t, Conditioning cond) const;

 private:
  std::shared_ptr<const VelocityNet> net_;
  double cfg_scale_w_;
};

// Classifier-free guided v(z_t, t) from any conditional net.
Matrix guided_velocity(const VelocityNet& net, const Matrix& z, const Vector& t, Conditioning cond, double w);

// Target for rows with r == t: the teacher's guided velocity in distill
// mode, the conditional velocity eps - x from scratch. Untracked.
Matrix boundary_target(TrainMode mode, const TeacherHandle* teacher, const Matrix& z_t, const Vector& t,
                       Conditioning cond, const Matrix& x, const Matrix& eps);

// Interval-splitting target, evaluated in eval mode with the student itself:
//   u2 = u(z_t, s, t); z_s = z_t - (t - s) u2; u1 = u(z_s, r, s);
//   target = (1 - lambda) u1 + lambda u2.
Matrix isc_target(const VelocityNet& student, const Matrix& z_t, const Vector& r, const Vector& s, const Vector& t,
                  const Vector& lambda, Conditioning cond = {});

struct StepCounts {
  instrument::PassCounts consistency;
  instrument::PassCounts boundary;
};

struct LossOutput {
  Tensor loss;
  double branch_mix = 0.0;  // fraction of boundary rows
  StepCounts counts;
};

// Mixed objective: boundary rows regress on boundary_target, the rest on
// isc_target; prediction u(z_t, r, t) runs taped in train mode.
LossOutput smf_loss(const VelocityNet& student, std::span<const Tensor> params, const FlowBatch& batch,
                    const TrainPlan& plan, const TeacherHandle* teacher, Rng& dropout_rng);

struct LogRow {
  long step = 0;
  std::string_view objective;
  double branch_mix = 0.0;
  double loss = 0.0;
  double isc_residual = 0.0;
};

struct TrainResult {
  VelocityNet net;
  std::optional<VelocityNet> ema;
  std::vector<LogRow> log;
  std::vector<double> losses;  // one per step
  StepCounts last_step_counts;
  double wall_ms = 0.0;

  // Weights for sampling and evaluation: EMA when kept.
  const VelocityNet& sampling_net() const { return ema ? *ema : net; }
};

struct TrainHooks {
  std::function<void(const LogRow&)> on_log;
};

// Runs plan.steps optimizer steps. Distill mode starts from the teacher's
// weights; otherwise from `init` when given, else a fresh initialization of
// `net_config`. Aborts with Error{divergence} after divergence_patience
// consecutive steps with loss above the threshold or non-finite.
TrainResult train(const TrainPlan& plan, const ToyDataset& dataset, const NetConfig& net_config,
                  const TeacherHandle* teacher = nullptr, const VelocityNet* init = nullptr,
                  const TrainHooks& hooks = {});

// Draws the batch a training step consumes: data, prior, times, boundary mask.
struct BatchStreams {
  Rng data;
  Rng prior;
  Rng times;
  Rng branch;
  Rng dropout;

  explicit BatchStreams(std::uint64_t seed);
};

FlowBatch draw_training_batch(const TrainPlan& plan, const ToyDataset& dataset, BatchStreams& streams);

// Row subsets used to split a batch between branches.
std::vector<Index> rows_where(std::span<const char> mask, bool value);
Matrix take_rows(const Matrix& m, std::span<const Index> rows);
Vector take_rows(const Vector& v, std::span<const Index> rows);
std::vector<int> take_rows(std::span<const int> ids, std::span<const Index> rows);

}  // namespace splitmeanflow
