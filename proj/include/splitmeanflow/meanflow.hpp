#pragma once

#include "splitmeanflow/flow.hpp"
#include "splitmeanflow/smf.hpp"

namespace splitmeanflow {

// Differential-identity target v - (t - r) du/dt, with du/dt the total
// derivative along (dz, dr, dt) = (v, 0, 1) from one forward-mode pass.
Matrix meanflow_target(const VelocityNet& net, const Matrix& z_t, const Vector& r, const Vector& t, const Matrix& v,
                       Conditioning cond = {});

// Same target for a closed-form field.
Matrix meanflow_target(const AnalyticField& field, const Matrix& z_t, const Vector& r, const Vector& t,
                       const Matrix& v);

// Same branch split as smf_loss; non-boundary rows use meanflow_target with
// v from boundary_target.
LossOutput meanflow_loss(const VelocityNet& student, std::span<const Tensor> params, const FlowBatch& batch,
                         const TrainPlan& plan, const TeacherHandle* teacher, Rng& dropout_rng);

}  // namespace splitmeanflow
