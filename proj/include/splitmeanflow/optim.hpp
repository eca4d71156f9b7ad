#pragma once

#include <span>
#include <vector>

#include "splitmeanflow/autodiff.hpp"

namespace splitmeanflow {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam(std::span<const Matrix> params, AdamConfig config = {});

  void step(std::span<Matrix> params, std::span<const Matrix> grads, double lr);
  long steps_taken() const { return t_; }

 private:
  AdamConfig config_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  long t_ = 0;
};

// Exponential moving average of parameters: shadow <- d shadow + (1 - d) p.
class Ema {
 public:
  Ema(std::span<const Matrix> params, double decay);

  void update(std::span<const Matrix> params);
  const std::vector<Matrix>& shadow() const { return shadow_; }
  std::vector<Matrix>& shadow() { return shadow_; }

 private:
  double decay_;
  std::vector<Matrix> shadow_;
};

// lr scaled linearly over the first `warmup` steps (step counted from 0).
double warmup_lr(double lr, long step, long warmup);

}  // namespace splitmeanflow
