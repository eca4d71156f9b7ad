#include "splitmeanflow/optim.hpp"

#include <algorithm>
#include <cmath>

#include "splitmeanflow/error.hpp"

namespace splitmeanflow {

Adam::Adam(std::span<const Matrix> params, AdamConfig config) : config_(config) {
  for (const auto& p : params) {
    m_.push_back(Matrix::Zero(p.rows(), p.cols()));
    v_.push_back(Matrix::Zero(p.rows(), p.cols()));
  }
}

void Adam::step(std::span<Matrix> params, std::span<const Matrix> grads, double lr) {
  if (params.size() != m_.size() || grads.size() != m_.size()) {
    throw Error(ErrorCategory::invalid_argument, "adam: parameter/gradient count mismatch");
  }
  ++t_;
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    m_[k] = config_.beta1 * m_[k] + (1.0 - config_.beta1) * grads[k];
    v_[k] = config_.beta2 * v_[k] + (1.0 - config_.beta2) * grads[k].cwiseAbs2();
    params[k].array() -= lr * (m_[k].array() / c1) / ((v_[k].array() / c2).sqrt() + config_.eps);
  }
}

Ema::Ema(std::span<const Matrix> params, double decay) : decay_(decay), shadow_(params.begin(), params.end()) {}

void Ema::update(std::span<const Matrix> params) {
  for (std::size_t k = 0; k < params.size(); ++k) shadow_[k] = decay_ * shadow_[k] + (1.0 - decay_) * params[k];
}

double warmup_lr(double lr, long step, long warmup) {
  if (warmup <= 0) return lr;
  return lr * std::min(1.0, static_cast<double>(step + 1) / static_cast<double>(warmup));
}

}  // namespace splitmeanflow
