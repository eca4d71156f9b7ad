#pragma once

#include <span>
#include <type_traits>
#include <vector>

#include "splitmeanflow/autodiff.hpp"
#include "splitmeanflow/dual.hpp"
#include "splitmeanflow/rng.hpp"

namespace splitmeanflow {

struct NetConfig {
  Index data_dim = 2;
  Index hidden_dim = 256;
  int hidden_layers = 3;
  Index time_embed_dim = 16;  // even; sin/cos pairs
  double time_max_frequency = 30.0;
  int num_classes = 0;  // 0 = unconditional
  Index cond_embed_dim = 16;

  friend bool operator==(const NetConfig&, const NetConfig&) = default;
};

// Sinusoidal features [sin(f_i t), cos(f_i t)] with f_i geometric in
// [1, max_frequency].
class TimeEmbedding {
 public:
  TimeEmbedding(Index dim, double max_frequency);

  Index dim() const { return 2 * frequencies_.cols(); }
  const Matrix& frequencies() const { return frequencies_; }  // 1 x dim/2

  template <typename T>
  T apply(const T& times) const;  // times: n x 1 column

 private:
  Matrix frequencies_;
};

// Class ids for a batch. Empty = no condition (null class on conditional nets).
using Conditioning = std::span<const int>;

// u_theta(z, r, t, c): an MLP over [z, emb(r), emb(t), class embedding].
// Parameter layout: [class table (conditional only)], then W_0, b_0, ...,
// W_L, b_L with W_l of shape in x out and b_l a single row.
class VelocityNet {
 public:
  explicit VelocityNet(NetConfig config);  // all parameters zero

  // He-uniform hidden layers, N(0,1) class table, zero final layer.
  static VelocityNet initialized(const NetConfig& config, Rng& rng);

  const NetConfig& config() const { return config_; }
  const TimeEmbedding& embedding() const { return embedding_; }
  bool conditional() const { return config_.num_classes > 0; }
  int null_class_id() const { return config_.num_classes; }
  Index input_width() const;

  std::vector<Matrix>& parameters() { return params_; }
  const std::vector<Matrix>& parameters() const { return params_; }
  std::vector<Shape> parameter_shapes() const;
  Index parameter_count() const;

  // Class ids resolved for a batch of `rows`: validated, or all-null.
  std::vector<int> resolve_condition(Conditioning cond, Index rows) const;

 private:
  NetConfig config_;
  TimeEmbedding embedding_;
  std::vector<Matrix> params_;
};

Index parameter_count(const NetConfig& config);

// Train-mode switches for the taped forward. Evaluation mode is the plain
// Matrix forward, which never drops conditions.
struct ForwardMode {
  bool training = false;
  double cfg_dropout = 0.0;
  Rng* rng = nullptr;
};

// Replaces each id with the null id with probability p.
std::vector<int> apply_condition_dropout(std::span<const int> ids, double p, int null_id, Rng& rng);

// Evaluation-mode forward; throws Error{poisoned_state} on non-finite output.
Matrix forward(const VelocityNet& net, const Matrix& z, const Vector& r, const Vector& t, Conditioning cond = {});

// The model's v(z_t, t): forward with r := t.
Matrix as_instantaneous(const VelocityNet& net, const Matrix& z, const Vector& t, Conditioning cond = {});

// Tape leaves mirroring net.parameters().
std::vector<Tensor> make_leaves(Tape& tape, const VelocityNet& net);

Tensor forward(const VelocityNet& net, std::span<const Tensor> params, const Matrix& z, const Vector& r,
               const Vector& t, Conditioning cond = {}, ForwardMode mode = {});

// Forward-mode evaluation; parameters are constants (zero tangent).
DualTensor forward(const VelocityNet& net, const DualTensor& z, const DualTensor& r, const DualTensor& t,
                   Conditioning cond = {});

// d/dt u along (dz, dr, dt) = (direction, 0, 1): returns (u, du/dt).
std::pair<Matrix, Matrix> total_derivative(const VelocityNet& net, const Matrix& z, const Vector& r,
                                           const Vector& t, const Matrix& direction, Conditioning cond = {});

template <typename T>
T TimeEmbedding::apply(const T& times) const {
  if constexpr (std::is_same_v<T, Tensor>) {
    Tensor phase = matmul(times, Tensor(frequencies_));
    return concat(sin(phase), cos(phase));
  } else if constexpr (std::is_same_v<T, DualTensor>) {
    DualTensor phase = matmul(times, frequencies_);
    return concat(sin(phase), cos(phase));
  } else {
    Matrix phase = times * frequencies_;
    return concat(sin(phase), cos(phase));
  }
}

}  // namespace splitmeanflow
