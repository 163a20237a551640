#include <cmath>

#include "doctest.h"
#include "latentctl/errors.hpp"
#include "latentctl/moment.hpp"

using namespace latentctl;

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Tilted mean of sigmoid(x) under N(0,1) by Simpson's rule on [-12, 12].
double tilted_mean(double beta) {
  const int n = 20000;
  const double a = -12.0, h = 24.0 / n;
  double num = 0.0, den = 0.0;
  for (int i = 0; i <= n; ++i) {
    const double x = a + i * h;
    const double w = (i == 0 || i == n) ? 1.0 : (i % 2 ? 4.0 : 2.0);
    const double s = sigmoid(x);
    const double k = w * std::exp(beta * s - 0.5 * x * x);
    num += k * s;
    den += k;
  }
  return num / den;
}

double bisect(double target) {
  double lo = -50.0, hi = 50.0;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    (tilted_mean(mid) < target ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

GeneratorPtr normal1() { return make_linear_gaussian(Tensor::identity(1), Tensor::vector({0.0})); }

}  // namespace

TEST_CASE("moment solver: symmetric target gives beta = 0") {
  const SigmoidModel gamma(1);
  const auto res = solve_moment_beta(*normal1(), gamma, Tensor::vector({0.5}), MomentConfig{});
  CHECK(std::abs(res.beta[0]) < 0.02);
  CHECK(res.converged);
}

TEST_CASE("moment solver matches the quadrature root") {
  const double root = bisect(0.7);
  CHECK(tilted_mean(root) == doctest::Approx(0.7).epsilon(1e-10));
  const SigmoidModel gamma(1);
  const auto res = solve_moment_beta(*normal1(), gamma, Tensor::vector({0.7}), MomentConfig{});
  CHECK(res.converged);
  CHECK(std::abs(res.beta[0] - root) < 0.05);
  CHECK(std::abs(res.estimate[0] - 0.7) <= 1e-4);

  MomentConfig scaled;
  scaled.lambda = 2.0;
  const auto res2 = solve_moment_beta(*normal1(), gamma, Tensor::vector({0.7}), scaled);
  CHECK(res2.beta[0] == 2.0 * res2.beta_raw[0]);
  CHECK(res2.beta_raw[0] == res.beta_raw[0]);
}

TEST_CASE("unreachable moments are reported as unconverged") {
  MomentConfig cfg;
  cfg.max_steps = 300;
  const auto res = solve_moment_beta(*normal1(), SigmoidModel(1), Tensor::vector({1.2}), cfg);
  CHECK_FALSE(res.converged);
  CHECK(res.residual > 0.2);
  CHECK_THROWS_AS(solve_moment_beta(*normal1(), SigmoidModel(1), Tensor::vector({0.5, 0.5}), cfg), DimensionError);
}

TEST_CASE("SNIS estimate") {
  const Tensor f = Tensor::matrix({{1.0, 0.0}, {0.0, 1.0}});
  const Tensor even = snis_estimate(f, Tensor::vector({0.0, 0.0}));
  CHECK(even[0] == 0.5);
  const Tensor tilted = snis_estimate(f, Tensor::vector({std::log(3.0), 0.0}));
  CHECK(tilted[0] == doctest::Approx(0.75));
  MomentConfig cfg;
  cfg.samples = 1001;
  const Tensor feats = moment_features(*normal1(), SigmoidModel(1), cfg);
  CHECK(feats.rows() == 1001);
  // Antithetic pairs: sigmoid(x) + sigmoid(-x) = 1.
  CHECK(feats[0] + feats[501] == doctest::Approx(1.0).epsilon(1e-15));
}
