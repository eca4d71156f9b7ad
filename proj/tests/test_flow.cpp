#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "splitmeanflow/data.hpp"
#include "splitmeanflow/error.hpp"
#include "splitmeanflow/flow.hpp"
#include "splitmeanflow/metrics.hpp"

using namespace splitmeanflow;

namespace {

Vector vec2(double a, double b) {
  Vector v(2);
  v << a, b;
  return v;
}

// Exact trajectory of the field from t back to r by RK4; u = (z_t - z_r) / (t - r).
Matrix displacement_average(const AnalyticField& field, const Matrix& z, double r, double t) {
  auto f = [&](const Matrix& state, double tau) {
    return field.instantaneous_velocity(state, Vector::Constant(state.rows(), tau));
  };
  const Matrix z_r = oracle::rk4(f, z, t, r, 2000);
  return (z - z_r) / (t - r);
}

}  // namespace

TEST_CASE("the path interpolates data at t = 0 and noise at t = 1") {
  const Vector x = vec2(1.5, -2.0), eps = vec2(0.3, 0.7);
  const FlowSample at0 = make_flow_sample(x, eps, 0.0, 0.0, 0.5);
  const FlowSample at1 = make_flow_sample(x, eps, 0.0, 1.0, 0.5);
  CHECK(at0.z_t == x);
  CHECK(at1.z_t == eps);
  CHECK(conditional_velocity(at0) == eps - x);
}

TEST_CASE("the conditional velocity is the time derivative of the path") {
  const Vector x = vec2(0.4, 1.0), eps = vec2(-1.2, 0.5);
  for (double t : {0.1, 0.5, 0.9}) {
    const double h = 1e-6;
    const Vector fd = (make_flow_sample(x, eps, 0.0, t + h, 0.5).z_t - make_flow_sample(x, eps, 0.0, t - h, 0.5).z_t) /
                      (2 * h);
    CHECK((fd - conditional_velocity(make_flow_sample(x, eps, 0.0, t, 0.5))).norm() < 1e-8);
  }
}

TEST_CASE("the split point lies between r and t") {
  const FlowSample s = make_flow_sample(vec2(0, 0), vec2(1, 1), 0.2, 0.8, 0.25);
  CHECK(s.s == doctest::Approx(0.75 * 0.8 + 0.25 * 0.2));
  CHECK_THROWS_AS(make_flow_sample(vec2(0, 0), vec2(1, 1), 0.9, 0.2, 0.5), Error);
  CHECK_THROWS_AS(make_flow_sample(vec2(0, 0), vec2(1, 1), 0.1, 0.2, 1.5), Error);
  CHECK_THROWS_AS(make_flow_sample(vec2(0, 0), Vector::Zero(3), 0.1, 0.2, 0.5), Error);

  Rng rng(1);
  const TimeDistribution dist{TimeDistribution::Kind::sorted_uniform, -0.4, 1.0, 0.05, 0.95};
  for (int i = 0; i < 2000; ++i) {
    const FlowSample d = make_flow_sample(vec2(0, 0), vec2(1, 1), rng, dist);
    CHECK(d.r <= d.s);
    CHECK(d.s <= d.t);
    CHECK(d.lambda >= 0.05);
    CHECK(d.lambda <= 0.95);
  }
}

TEST_CASE("sorted uniform times put a quarter of the mass on gaps above one half") {
  // For U1, U2 iid uniform, P(|U1 - U2| > 1/2) = 2 * (1/2)^2 / 2 = 1/4.
  Rng rng(2);
  const int n = 200000;
  int wide = 0;
  double mean_t = 0.0;
  for (int i = 0; i < n; ++i) {
    auto [r, t] = sample_times(rng, {});
    REQUIRE(r <= t);
    wide += (t - r) > 0.5;
    mean_t += t;
  }
  const double p = static_cast<double>(wide) / n;
  CHECK(std::abs(p - 0.25) < 4 * std::sqrt(0.25 * 0.75 / n));
  CHECK(mean_t / n == doctest::Approx(2.0 / 3.0).epsilon(0.01));  // E max(U1, U2)
}

TEST_CASE("lognormal times stay inside the unit interval and are ordered") {
  Rng rng(3);
  const TimeDistribution dist{TimeDistribution::Kind::lognormal, -0.4, 1.0, 0.0, 1.0};
  double mean_logit = 0.0;
  const int n = 50000;
  for (int i = 0; i < n; ++i) {
    auto [r, t] = sample_times(rng, dist);
    REQUIRE(r <= t);
    REQUIRE(r > 0.0);
    REQUIRE(t < 1.0);
    mean_logit += std::log(r / (1 - r)) + std::log(t / (1 - t));
  }
  // Sorting does not change the pooled mean of the two logits.
  CHECK(mean_logit / (2.0 * n) == doctest::Approx(-0.4).epsilon(0.03));
}

TEST_CASE("boundary selection hits a fraction p of rows and collapses r onto t") {
  Rng data_rng(4), time_rng(5), branch_rng(6);
  const Index n = 20000;
  const Matrix x = sample_prior(n, 2, data_rng), eps = sample_prior(n, 2, data_rng);
  FlowBatch batch = make_flow_batch(x, {}, eps, time_rng);
  select_boundary_rows(batch, 0.75, branch_rng);
  Index hits = 0;
  for (Index i = 0; i < n; ++i) {
    if (batch.boundary[static_cast<std::size_t>(i)]) {
      ++hits;
      CHECK(batch.r(i) == batch.t(i));
      CHECK(batch.s(i) == batch.t(i));
    }
  }
  CHECK(std::abs(hits / double(n) - 0.75) < 4 * std::sqrt(0.75 * 0.25 / n));
  CHECK(conditional_velocity(batch) == eps - x);
  CHECK(batch.z_t.isApprox((Vector::Ones(n) - batch.t).asDiagonal() * x + batch.t.asDiagonal() * eps));
}

TEST_CASE("closed-form average velocities match the integrated trajectories") {
  Rng rng(7);
  const Matrix z = sample_prior(5, 2, rng);
  const std::vector<AnalyticField> fields{AnalyticField::constant(vec2(0.3, -1.1)), AnalyticField::time_poly(),
                                          AnalyticField::linear_state()};
  for (const auto& field : fields) {
    for (auto [r, t] : {std::pair{0.0, 1.0}, {0.2, 0.7}, {0.5, 0.51}, {0.9, 0.95}}) {
      const Matrix u = field.average_velocity(z, Vector::Constant(5, r), Vector::Constant(5, t));
      CHECK(oracle::relative_error(u, displacement_average(field, z, r, t)) < 1e-9);
    }
  }
}

TEST_CASE("time_poly average velocity matches quadrature of v(tau) = tau") {
  for (auto [r, t] : {std::pair{0.0, 1.0}, {0.13, 0.77}, {0.4, 0.41}}) {
    const double u = oracle::gauss_legendre([](double tau) { return tau; }, r, t) / (t - r);
    const Matrix got = AnalyticField::time_poly().average_velocity(Matrix::Zero(1, 1), Vector::Constant(1, r),
                                                                 Vector::Constant(1, t));
    CHECK(got(0, 0) == doctest::Approx(u).epsilon(1e-14));
  }
}

TEST_CASE("linear_state stays accurate as t - r shrinks") {
  const AnalyticField f = AnalyticField::linear_state();
  Matrix z(1, 1);
  z << 1.7;
  for (double h : {1e-3, 1e-5, 1e-7, 1e-9, 1e-12}) {
    const double exact = -1.7 * std::expm1(h) / h;
    const Matrix u = f.average_velocity(z, Vector::Constant(1, 0.5), Vector::Constant(1, 0.5 + h));
    CHECK(u(0, 0) == doctest::Approx(exact).epsilon(1e-13));
  }
}

TEST_CASE("average velocity at r = t is the instantaneous velocity") {
  Rng rng(8);
  const Matrix z = sample_prior(6, 2, rng);
  const Vector t = Vector::LinSpaced(6, 0.0, 1.0);
  for (const auto& f :
       {AnalyticField::constant(vec2(1, 2)), AnalyticField::time_poly(), AnalyticField::linear_state()}) {
    CHECK(f.average_velocity(z, t, t) == f.instantaneous_velocity(z, t));
    // Approaches v linearly as r -> t.
    const Matrix near = f.average_velocity(z, (t.array() - 1e-6).matrix(), t);
    CHECK((near - f.instantaneous_velocity(z, t)).norm() < 1e-5);
  }
}

TEST_CASE("interval splitting holds exactly for closed-form fields") {
  Rng rng(9);
  const IscProbes probes = make_isc_probes(1000, 2, rng);
  for (const auto& f :
       {AnalyticField::constant(vec2(-0.4, 0.9)), AnalyticField::time_poly(), AnalyticField::linear_state()}) {
    // Independent recomputation with the exact trajectory point z_s.
    double worst = 0.0;
    for (Index i = 0; i < probes.size(); ++i) {
      const Vector r = probes.r.segment(i, 1), s = probes.s.segment(i, 1), t = probes.t.segment(i, 1);
      const Matrix z_t = probes.z_t.row(i);
      const Matrix z_s = z_t - (t(0) - s(0)) * f.average_velocity(z_t, s, t);
      const Matrix lhs = (t(0) - r(0)) * f.average_velocity(z_t, r, t);
      const Matrix rhs = (s(0) - r(0)) * f.average_velocity(z_s, r, s) + (t(0) - s(0)) * f.average_velocity(z_t, s, t);
      worst = std::max(worst, (lhs - rhs).norm());
    }
    CHECK(worst < 1e-10);
    CHECK(isc_residual(f, probes, IscForm::displacement).max < 1e-10);
  }
}

TEST_CASE("analytic total derivative matches finite differences") {
  Rng rng(10);
  const Matrix z = sample_prior(4, 2, rng), dir = sample_prior(4, 2, rng);
  const Vector r = Vector::Constant(4, 0.2), t = Vector::Constant(4, 0.6);
  for (const auto& f :
       {AnalyticField::constant(vec2(1, 2)), AnalyticField::time_poly(), AnalyticField::linear_state()}) {
    auto [u, dudt] = f.total_derivative(z, r, t, dir);
    const double h = 1e-6;
    const Matrix fd = (f.average_velocity(z + h * dir, r, (t.array() + h).matrix()) -
                       f.average_velocity(z - h * dir, r, (t.array() - h).matrix())) /
                      (2 * h);
    CHECK(u == f.average_velocity(z, r, t));
    CHECK((dudt - fd).norm() < 1e-8);
  }
}

TEST_CASE("constant field rejects states of the wrong width") {
  const AnalyticField f = AnalyticField::constant(vec2(1, 2));
  CHECK_THROWS_AS(f.instantaneous_velocity(Matrix::Zero(2, 3), Vector::Zero(2)), Error);
}

TEST_CASE("regression loss is the mean squared row error and ignores target gradients") {
  Matrix pred0(2, 2), target(2, 2);
  pred0 << 1, 2, 3, 4;
  target << 0, 2, 5, 4;
  Tape tape;
  Tensor pred = tape.leaf(pred0);
  Tensor loss = regression_loss(pred, target);
  CHECK(loss.item() == doctest::Approx((1.0 + 4.0) / 2.0));
  CHECK(tape.backward(loss)[pred].value().isApprox(Matrix(pred0 - target)));  // 2 (p - y) / rows
  Tape other;
  Tensor p2 = other.leaf(pred0);
  CHECK(regression_loss(p2, target, LossNorm::unsquared).item() == doctest::Approx((1.0 + 2.0) / 2.0));
}

TEST_CASE("flow matching loss equals its definition on a zero network") {
  NetConfig c;
  c.hidden_dim = 8;
  c.hidden_layers = 1;
  c.time_embed_dim = 4;
  VelocityNet net(c);
  Rng data(11), times(12), drop(13);
  const Matrix x = sample_prior(32, 2, data), eps = sample_prior(32, 2, data);
  const FlowBatch batch = make_flow_batch(x, {}, eps, times);
  Tape tape;
  auto leaves = make_leaves(tape, net);
  const Tensor loss = cfm_loss(net, leaves, batch, 0.0, drop);
  CHECK(loss.item() == doctest::Approx((eps - x).rowwise().squaredNorm().mean()).epsilon(1e-14));
}
