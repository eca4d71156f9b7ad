#include "splitmeanflow/model.hpp"

#include <cmath>

#include "splitmeanflow/error.hpp"
#include "splitmeanflow/instrument.hpp"

namespace splitmeanflow {
namespace {

std::size_t first_layer_param(const VelocityNet& net) { return net.conditional() ? 1 : 0; }

template <typename T, typename P>
T class_features(const P& table, std::span<const int> ids) {
  if constexpr (std::is_same_v<T, DualTensor>) {
    return DualTensor::constant(gather_rows(table, ids));
  } else {
    return gather_rows(table, ids);
  }
}

template <typename T, typename P>
T mlp(const VelocityNet& net, std::span<const P> params, const T& z, const T& r, const T& t,
      std::span<const int> ids) {
  const auto& emb = net.embedding();
  T h = concat(concat(z, emb.apply(r)), emb.apply(t));
  if (net.conditional()) h = concat(h, class_features<T>(params[0], ids));
  const std::size_t first = first_layer_param(net);
  const std::size_t layers = (params.size() - first) / 2;
  for (std::size_t l = 0; l < layers; ++l) {
    h = affine(h, params[first + 2 * l], params[first + 2 * l + 1]);
    if (l + 1 < layers) h = silu(h);
  }
  return h;
}

void check_inputs(const VelocityNet& net, Index z_rows, Index z_cols, Index r_rows, Index t_rows) {
  if (z_cols != net.config().data_dim || r_rows != z_rows || t_rows != z_rows) {
    throw Error(ErrorCategory::shape_mismatch,
                "velocity net: z " + shape_string({z_rows, z_cols}) + " with r [" + std::to_string(r_rows) +
                    "] and t [" + std::to_string(t_rows) + "] for data_dim " + std::to_string(net.config().data_dim));
  }
}

void check_finite(const Matrix& out) {
  if (!out.allFinite()) throw Error(ErrorCategory::poisoned_state, "velocity net produced a non-finite output");
}

}  // namespace

TimeEmbedding::TimeEmbedding(Index dim, double max_frequency) {
  if (dim < 2 || dim % 2 != 0) {
    throw Error(ErrorCategory::invalid_argument, "time_embed_dim must be even and >= 2");
  }
  const Index half = dim / 2;
  frequencies_.resize(1, half);
  for (Index i = 0; i < half; ++i) {
    double frac = half == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(half - 1);
    frequencies_(0, i) = std::pow(max_frequency, frac);
  }
}

VelocityNet::VelocityNet(NetConfig config)
    : config_(config), embedding_(config.time_embed_dim, config.time_max_frequency) {
  if (config_.data_dim < 1 || config_.hidden_dim < 1 || config_.hidden_layers < 1 || config_.num_classes < 0 ||
      (config_.num_classes > 0 && config_.cond_embed_dim < 1)) {
    throw Error(ErrorCategory::invalid_argument, "velocity net: dimensions must be positive");
  }
  for (const auto& shape : parameter_shapes()) params_.push_back(Matrix::Zero(shape[0], shape[1]));
}

VelocityNet VelocityNet::initialized(const NetConfig& config, Rng& rng) {
  VelocityNet net(config);
  auto& params = net.parameters();
  std::size_t k = 0;
  if (net.conditional()) {
    for (Index i = 0; i < params[0].size(); ++i) params[0].data()[i] = standard_normal(rng);
    k = 1;
  }
  const std::size_t last_weight = params.size() - 2;
  for (; k < params.size(); k += 2) {
    if (k == last_weight) break;  // final layer stays zero
    auto& w = params[k];
    const double bound = std::sqrt(6.0 / static_cast<double>(w.rows()));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (Index i = 0; i < w.size(); ++i) w.data()[i] = dist(rng);
  }
  return net;
}

Index VelocityNet::input_width() const {
  return config_.data_dim + 2 * config_.time_embed_dim + (conditional() ? config_.cond_embed_dim : 0);
}

std::vector<Shape> VelocityNet::parameter_shapes() const {
  std::vector<Shape> shapes;
  if (conditional()) shapes.push_back({config_.num_classes + 1, config_.cond_embed_dim});
  Index in = input_width();
  for (int l = 0; l < config_.hidden_layers; ++l) {
    shapes.push_back({in, config_.hidden_dim});
    shapes.push_back({1, config_.hidden_dim});
    in = config_.hidden_dim;
  }
  shapes.push_back({in, config_.data_dim});
  shapes.push_back({1, config_.data_dim});
  return shapes;
}

Index VelocityNet::parameter_count() const {
  Index n = 0;
  for (const auto& p : params_) n += p.size();
  return n;
}

Index parameter_count(const NetConfig& c) {
  const Index in = c.data_dim + 2 * c.time_embed_dim + (c.num_classes > 0 ? c.cond_embed_dim : 0);
  const Index table = c.num_classes > 0 ? (c.num_classes + 1) * c.cond_embed_dim : 0;
  const Index hidden = (in + 1) * c.hidden_dim + (c.hidden_layers - 1) * (c.hidden_dim + 1) * c.hidden_dim;
  return table + hidden + (c.hidden_dim + 1) * c.data_dim;
}

std::vector<int> VelocityNet::resolve_condition(Conditioning cond, Index rows) const {
  if (!conditional()) return {};
  if (cond.empty()) return std::vector<int>(static_cast<std::size_t>(rows), null_class_id());
  if (static_cast<Index>(cond.size()) != rows) {
    throw Error(ErrorCategory::shape_mismatch, "condition has " + std::to_string(cond.size()) + " ids for " +
                                                   std::to_string(rows) + " rows");
  }
  for (int id : cond) {
    if (id < 0 || id > null_class_id()) {
      throw Error(ErrorCategory::invalid_argument, "class id " + std::to_string(id) + " outside [0, " +
                                                       std::to_string(null_class_id()) + "]");
    }
  }
  return {cond.begin(), cond.end()};
}

std::vector<int> apply_condition_dropout(std::span<const int> ids, double p, int null_id, Rng& rng) {
  std::vector<int> out(ids.begin(), ids.end());
  if (p <= 0.0) return out;
  for (auto& id : out) {
    if (uniform01(rng) < p) id = null_id;
  }
  return out;
}

Matrix forward(const VelocityNet& net, const Matrix& z, const Vector& r, const Vector& t, Conditioning cond) {
  check_inputs(net, z.rows(), z.cols(), r.size(), t.size());
  instrument::note_forward();
  auto ids = net.resolve_condition(cond, z.rows());
  Matrix out = mlp<Matrix, Matrix>(net, net.parameters(), z, Matrix(r), Matrix(t), ids);
  check_finite(out);
  return out;
}

Matrix as_instantaneous(const VelocityNet& net, const Matrix& z, const Vector& t, Conditioning cond) {
  return forward(net, z, t, t, cond);
}

std::vector<Tensor> make_leaves(Tape& tape, const VelocityNet& net) {
  std::vector<Tensor> leaves;
  leaves.reserve(net.parameters().size());
  for (const auto& p : net.parameters()) leaves.push_back(tape.leaf(p));
  return leaves;
}

Tensor forward(const VelocityNet& net, std::span<const Tensor> params, const Matrix& z, const Vector& r,
               const Vector& t, Conditioning cond, ForwardMode mode) {
  check_inputs(net, z.rows(), z.cols(), r.size(), t.size());
  if (params.size() != net.parameters().size()) {
    throw Error(ErrorCategory::invalid_argument, "velocity net: parameter list length mismatch");
  }
  instrument::note_forward();
  auto ids = net.resolve_condition(cond, z.rows());
  if (mode.training && mode.cfg_dropout > 0.0 && net.conditional()) {
    if (mode.rng == nullptr) throw Error(ErrorCategory::invalid_argument, "condition dropout needs an rng");
    ids = apply_condition_dropout(ids, mode.cfg_dropout, net.null_class_id(), *mode.rng);
  }
  Tensor out = mlp<Tensor, Tensor>(net, params, Tensor(z), Tensor::from_vector(r), Tensor::from_vector(t), ids);
  check_finite(out.value());
  return out;
}

DualTensor forward(const VelocityNet& net, const DualTensor& z, const DualTensor& r, const DualTensor& t,
                   Conditioning cond) {
  check_inputs(net, z.primal.rows(), z.primal.cols(), r.primal.rows(), t.primal.rows());
  auto ids = net.resolve_condition(cond, z.primal.rows());
  DualTensor out = mlp<DualTensor, Matrix>(net, net.parameters(), z, r, t, ids);
  check_finite(out.primal);
  check_finite(out.tangent);
  return out;
}

std::pair<Matrix, Matrix> total_derivative(const VelocityNet& net, const Matrix& z, const Vector& r,
                                           const Vector& t, const Matrix& direction, Conditioning cond) {
  const Index n = z.rows(), d = z.cols();
  // Pack (z, r, t) into one row per sample so the generic jvp sees a single input.
  Matrix x(n, d + 2);
  x << z, r, t;
  Matrix tangent(n, d + 2);
  tangent << direction, Vector::Zero(n), Vector::Ones(n);
  return jvp(
      [&](const DualTensor& in) {
        DualTensor zz{in.primal.leftCols(d), in.tangent.leftCols(d)};
        DualTensor rr{in.primal.col(d), in.tangent.col(d)};
        DualTensor tt{in.primal.col(d + 1), in.tangent.col(d + 1)};
        return forward(net, zz, rr, tt, cond);
      },
      x, tangent);
}

}  // namespace splitmeanflow
