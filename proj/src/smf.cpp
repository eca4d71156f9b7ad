#include "splitmeanflow/smf.hpp"

#include <chrono>
#include <cmath>

#include "splitmeanflow/error.hpp"
#include "splitmeanflow/meanflow.hpp"
#include "splitmeanflow/metrics.hpp"
#include "splitmeanflow/optim.hpp"

namespace splitmeanflow {

std::string_view objective_name(Objective objective) {
  return objective == Objective::meanflow ? "meanflow" : "splitmeanflow";
}

void TrainPlan::validate(bool has_teacher) const {
  auto fail = [](const std::string& what) { throw Error(ErrorCategory::invalid_argument, "train plan: " + what); };
  if (!(flow_ratio_p > 0.0 && flow_ratio_p <= 1.0)) fail("flow_ratio_p must lie in (0, 1]");
  if (!(cfg_scale_w >= 0.0)) fail("cfg_scale_w must be >= 0");
  if (!(cfg_dropout_pretrain >= 0.0 && cfg_dropout_pretrain <= 1.0)) fail("cfg_dropout_pretrain must lie in [0, 1]");
  if (cfg_dropout_distill != 0.0) fail("cfg_dropout_distill is fixed at 0");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (steps < 0) fail("steps must be >= 0");
  if (!(lr > 0.0)) fail("lr must be positive");
  if (!(ema_decay >= 0.0 && ema_decay < 1.0)) fail("ema_decay must lie in [0, 1)");
  if (!(time_dist.lambda_min >= 0.0 && time_dist.lambda_min <= time_dist.lambda_max && time_dist.lambda_max <= 1.0)) {
    fail("lambda range must satisfy 0 <= min <= max <= 1");
  }
  if (log_every < 1) fail("log_every must be >= 1");
  if (probe_count < 1) fail("probe_count must be >= 1");
  if (mode == TrainMode::distill && !has_teacher) {
    throw Error(ErrorCategory::missing_teacher, "distill mode requires a teacher checkpoint");
  }
}

TeacherHandle::TeacherHandle(std::shared_ptr<const VelocityNet> net, double cfg_scale_w)
    : net_(std::move(net)), cfg_scale_w_(cfg_scale_w) {
  if (!net_) throw Error(ErrorCategory::missing_teacher, "teacher handle needs a network");
}

Matrix TeacherHandle::velocity(const Matrix& z, const Vector& t, Conditioning cond) const {
  instrument::TeacherScope scope;
  return guided_velocity(*net_, z, t, cond, cfg_scale_w_);
}

Matrix guided_velocity(const VelocityNet& net, const Matrix& z, const Vector& t, Conditioning cond, double w) {
  // Without a class the guided combination collapses to the null velocity.
  if (!net.conditional() || cond.empty() || w == 1.0) return as_instantaneous(net, z, t, cond);
  const std::vector<int> null_ids(static_cast<std::size_t>(z.rows()), net.null_class_id());
  Matrix v_null = as_instantaneous(net, z, t, null_ids);
  if (w == 0.0) return v_null;
  Matrix v_cond = as_instantaneous(net, z, t, cond);
  return v_null + w * (v_cond - v_null);
}

Matrix boundary_target(TrainMode mode, const TeacherHandle* teacher, const Matrix& z_t, const Vector& t,
                       Conditioning cond, const Matrix& x, const Matrix& eps) {
  if (mode == TrainMode::distill) {
    if (teacher == nullptr) throw Error(ErrorCategory::missing_teacher, "boundary target needs a teacher in distill mode");
    return teacher->velocity(z_t, t, cond);
  }
  // Linear schedule: a'(t) x + b'(t) eps = -x + eps.
  const Schedule schedule;
  Matrix v(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) v.row(i) = schedule.da(t(i)) * x.row(i) + schedule.db(t(i)) * eps.row(i);
  return v;
}

Matrix isc_target(const VelocityNet& student, const Matrix& z_t, const Vector& r, const Vector& s, const Vector& t,
                  const Vector& lambda, Conditioning cond) {
  const Matrix u2 = forward(student, z_t, s, t, cond);
  const Matrix z_s = z_t - (t - s).asDiagonal() * u2;
  const Matrix u1 = forward(student, z_s, r, s, cond);
  Matrix target = (1.0 - lambda.array()).matrix().asDiagonal() * u1 + lambda.asDiagonal() * u2;
  if (!target.allFinite()) throw Error(ErrorCategory::poisoned_state, "interval-splitting target is not finite");
  return target;
}

std::vector<Index> rows_where(std::span<const char> mask, bool value) {
  std::vector<Index> rows;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if ((mask[i] != 0) == value) rows.push_back(static_cast<Index>(i));
  }
  return rows;
}

Matrix take_rows(const Matrix& m, std::span<const Index> rows) {
  Matrix out(static_cast<Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Index>(i)) = m.row(rows[i]);
  return out;
}

Vector take_rows(const Vector& v, std::span<const Index> rows) {
  Vector out(static_cast<Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) out(static_cast<Index>(i)) = v(rows[i]);
  return out;
}

std::vector<int> take_rows(std::span<const int> ids, std::span<const Index> rows) {
  if (ids.empty()) return {};
  std::vector<int> out;
  out.reserve(rows.size());
  for (auto r : rows) out.push_back(ids[static_cast<std::size_t>(r)]);
  return out;
}

namespace {

void scatter_rows(Matrix& dst, const Matrix& src, std::span<const Index> rows) {
  for (std::size_t i = 0; i < rows.size(); ++i) dst.row(rows[i]) = src.row(static_cast<Index>(i));
}

}  // namespace

LossOutput smf_loss(const VelocityNet& student, std::span<const Tensor> params, const FlowBatch& batch,
                    const TrainPlan& plan, const TeacherHandle* teacher, Rng& dropout_rng) {
  LossOutput out;
  Matrix target(batch.size(), batch.x.cols());
  const auto boundary_rows = rows_where(batch.boundary, true);
  const auto isc_rows = rows_where(batch.boundary, false);

  if (!boundary_rows.empty()) {
    instrument::CountScope scope{&out.counts.boundary};
    const auto cond = take_rows(batch.cond, boundary_rows);
    scatter_rows(target,
                 boundary_target(plan.mode, teacher, take_rows(batch.z_t, boundary_rows),
                                 take_rows(batch.t, boundary_rows), cond, take_rows(batch.x, boundary_rows),
                                 take_rows(batch.eps, boundary_rows)),
                 boundary_rows);
  }
  if (!isc_rows.empty()) {
    instrument::CountScope scope{&out.counts.consistency};
    const auto cond = take_rows(batch.cond, isc_rows);
    scatter_rows(target,
                 isc_target(student, take_rows(batch.z_t, isc_rows), take_rows(batch.r, isc_rows),
                            take_rows(batch.s, isc_rows), take_rows(batch.t, isc_rows),
                            take_rows(batch.lambda, isc_rows), cond),
                 isc_rows);
  }
  {
    instrument::CountScope scope{&out.counts.consistency, &out.counts.boundary};
    ForwardMode mode{true, plan.cfg_dropout(), &dropout_rng};
    Tensor prediction = forward(student, params, batch.z_t, batch.r, batch.t, batch.cond, mode);
    out.loss = regression_loss(prediction, target, plan.loss_norm);
  }
  out.branch_mix = static_cast<double>(boundary_rows.size()) / static_cast<double>(batch.size());
  return out;
}

BatchStreams::BatchStreams(std::uint64_t seed)
    : data(substream(seed, "data")),
      prior(substream(seed, "prior")),
      times(substream(seed, "times")),
      branch(substream(seed, "branch")),
      dropout(substream(seed, "cfg-dropout")) {}

FlowBatch draw_training_batch(const TrainPlan& plan, const ToyDataset& dataset, BatchStreams& streams) {
  DataBatch data = sample_batch(dataset, plan.batch_size, streams.data);
  Matrix eps = sample_prior(plan.batch_size, dataset.dim(), streams.prior);
  std::span<const int> labels;
  if (data.labels) labels = *data.labels;
  FlowBatch batch = make_flow_batch(data.points, labels, eps, streams.times, plan.time_dist);
  select_boundary_rows(batch, plan.flow_ratio_p, streams.branch);
  return batch;
}

TrainResult train(const TrainPlan& plan, const ToyDataset& dataset, const NetConfig& net_config,
                  const TeacherHandle* teacher, const VelocityNet* init, const TrainHooks& hooks) {
  plan.validate(teacher != nullptr);
  const auto started = std::chrono::steady_clock::now();

  VelocityNet student = [&] {
    if (plan.mode == TrainMode::distill) return teacher->net();
    if (init != nullptr) return *init;
    Rng init_rng = substream(plan.seed, "init");
    return VelocityNet::initialized(net_config, init_rng);
  }();
  if (student.config().data_dim != dataset.dim()) {
    throw Error(ErrorCategory::invalid_argument, "network data_dim does not match the dataset dimension");
  }
  if (dataset.labeled && student.config().num_classes != dataset.num_classes()) {
    throw Error(ErrorCategory::invalid_argument, "network num_classes does not match the labeled dataset");
  }

  BatchStreams streams(plan.seed);
  Rng probe_rng = substream(plan.seed, "probes");
  const IscProbes probes = make_isc_probes(dataset, plan.probe_count, probe_rng, plan.time_dist);

  Adam adam(student.parameters());
  std::optional<Ema> ema;
  if (plan.use_ema) ema.emplace(student.parameters(), plan.ema_decay);

  TrainResult result{student, std::nullopt, {}, {}, {}, 0.0};
  result.losses.reserve(static_cast<std::size_t>(plan.steps));
  int bad_steps = 0;
  double window_loss = 0.0, window_mix = 0.0;
  long window = 0;

  for (long step = 0; step < plan.steps; ++step) {
    FlowBatch batch = draw_training_batch(plan, dataset, streams);
    Tape tape;
    const auto leaves = make_leaves(tape, student);
    double loss_value = std::numeric_limits<double>::quiet_NaN();
    try {
      LossOutput out = plan.objective == Objective::splitmeanflow
                           ? smf_loss(student, leaves, batch, plan, teacher, streams.dropout)
                           : meanflow_loss(student, leaves, batch, plan, teacher, streams.dropout);
      loss_value = out.loss.item();
      Gradients grads;
      {
        instrument::CountScope scope{&out.counts.consistency, &out.counts.boundary};
        grads = backward(out.loss);
      }
      std::vector<Matrix> g;
      g.reserve(leaves.size());
      bool finite = true;
      for (const auto& leaf : leaves) {
        g.push_back(grads[leaf].value());
        finite = finite && g.back().allFinite();
      }
      if (finite) {
        adam.step(student.parameters(), g, warmup_lr(plan.lr, step, plan.warmup_steps));
        if (ema) ema->update(student.parameters());
      }
      result.last_step_counts = out.counts;
      window_mix += out.branch_mix;
    } catch (const Error& e) {
      if (e.category() != ErrorCategory::poisoned_state) throw;
    }
    result.losses.push_back(loss_value);
    bad_steps = std::isfinite(loss_value) && loss_value <= plan.divergence_threshold ? 0 : bad_steps + 1;
    if (bad_steps >= plan.divergence_patience) {
      throw Error(ErrorCategory::divergence, "training diverged at step " + std::to_string(step) + " after " +
                                                 std::to_string(bad_steps) + " consecutive bad steps");
    }
    window_loss += loss_value;
    ++window;
    if ((step + 1) % plan.log_every == 0 || step + 1 == plan.steps) {
      LogRow row;
      row.step = step + 1;
      row.objective = objective_name(plan.objective);
      row.branch_mix = window_mix / static_cast<double>(window);
      row.loss = window_loss / static_cast<double>(window);
      row.isc_residual = isc_residual(NetField{student, probes.cond}, probes).mean;
      result.log.push_back(row);
      if (hooks.on_log) hooks.on_log(row);
      window_loss = window_mix = 0.0;
      window = 0;
    }
  }

  result.net = std::move(student);
  if (ema) {
    VelocityNet shadow(result.net.config());
    shadow.parameters() = ema->shadow();
    result.ema = std::move(shadow);
  }
  result.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count();
  return result;
}

}  // namespace splitmeanflow
