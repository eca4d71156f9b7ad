#include "splitmeanflow/meanflow.hpp"

#include "splitmeanflow/error.hpp"

namespace splitmeanflow {

Matrix meanflow_target(const VelocityNet& net, const Matrix& z_t, const Vector& r, const Vector& t, const Matrix& v,
                       Conditioning cond) {
  const Matrix dudt = total_derivative(net, z_t, r, t, v, cond).second;
  Matrix target = v - (t - r).asDiagonal() * dudt;
  if (!target.allFinite()) throw Error(ErrorCategory::poisoned_state, "meanflow target is not finite");
  return target;
}

Matrix meanflow_target(const AnalyticField& field, const Matrix& z_t, const Vector& r, const Vector& t,
                       const Matrix& v) {
  const Matrix dudt = field.total_derivative(z_t, r, t, v).second;
  return v - (t - r).asDiagonal() * dudt;
}

LossOutput meanflow_loss(const VelocityNet& student, std::span<const Tensor> params, const FlowBatch& batch,
                         const TrainPlan& plan, const TeacherHandle* teacher, Rng& dropout_rng) {
  LossOutput out;
  Matrix target(batch.size(), batch.x.cols());
  const auto boundary_rows = rows_where(batch.boundary, true);
  const auto jvp_rows = rows_where(batch.boundary, false);

  auto scatter = [&target](const Matrix& src, std::span<const Index> rows) {
    for (std::size_t i = 0; i < rows.size(); ++i) target.row(rows[i]) = src.row(static_cast<Index>(i));
  };

  if (!boundary_rows.empty()) {
    instrument::CountScope scope{&out.counts.boundary};
    const auto cond = take_rows(batch.cond, boundary_rows);
    scatter(boundary_target(plan.mode, teacher, take_rows(batch.z_t, boundary_rows), take_rows(batch.t, boundary_rows),
                            cond, take_rows(batch.x, boundary_rows), take_rows(batch.eps, boundary_rows)),
            boundary_rows);
  }
  if (!jvp_rows.empty()) {
    instrument::CountScope scope{&out.counts.consistency};
    const auto cond = take_rows(batch.cond, jvp_rows);
    const Matrix z = take_rows(batch.z_t, jvp_rows);
    const Vector t = take_rows(batch.t, jvp_rows);
    const Matrix v = boundary_target(plan.mode, teacher, z, t, cond, take_rows(batch.x, jvp_rows),
                                     take_rows(batch.eps, jvp_rows));
    scatter(meanflow_target(student, z, take_rows(batch.r, jvp_rows), t, v, cond), jvp_rows);
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

}  // namespace splitmeanflow
