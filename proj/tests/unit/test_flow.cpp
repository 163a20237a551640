#include <cmath>
#include <numbers>

#include <Eigen/Dense>

#include "doctest.h"
#include "latentctl/errors.hpp"
#include "latentctl/flow.hpp"
#include "latentctl/random.hpp"

using namespace latentctl;

namespace {

FlowStack random_flow(std::size_t d, std::size_t blocks, std::uint64_t seed, double scale = 0.05,
                      bool conditional = false, std::size_t cdim = 0) {
  FlowStack f = init_flow(d, blocks, 16, conditional, cdim, seed);
  randomize_parameters(f, seed + 1000, scale);
  return f;
}

// Central-difference Jacobian of the single-sample forward map.
Eigen::MatrixXd numeric_jacobian(const FlowStack& f, const Tensor& eps, double h) {
  const std::size_t d = f.dim();
  Eigen::MatrixXd j(d, d);
  for (std::size_t c = 0; c < d; ++c) {
    Tensor p = eps, m = eps;
    p[c] += h;
    m[c] -= h;
    const Tensor zp = f.forward(p).z, zm = f.forward(m).z;
    for (std::size_t r = 0; r < d; ++r) j(r, c) = (zp[r] - zm[r]) / (2 * h);
  }
  return j;
}

}  // namespace

TEST_CASE("identity-initialized flow has zero log-det and prior log-density") {
  const FlowStack f = init_flow(2, 8, 64, false, 0, 7);
  Rng rng = make_rng(1);
  const Tensor eps = standard_normal(rng, 50, 2);
  const auto out = f.forward(eps);
  for (double v : out.logdet.values()) CHECK(v == 0.0);
  // Forward is the chain of permutations.
  Tensor chain = eps;
  for (const auto& b : f.blocks()) chain = matmul(chain, b.permutation.transposed());
  CHECK(max_abs_diff(chain, out.z) < 1e-12);
  const Tensor lp = f.log_prob(eps);
  const Tensor ref = standard_normal_log_density(eps);
  CHECK(max_abs_diff(lp, ref) < 1e-12);
  CHECK(f.log_prob(Tensor::zeros(1, 2))[0] == doctest::Approx(-std::log(2 * std::numbers::pi)).epsilon(1e-14));
  CHECK(f.log_prob(Tensor::zeros(1, 2))[0] == doctest::Approx(-1.8379).epsilon(1e-4));
}

TEST_CASE("identity-initialized inverse is the transposed permutation chain") {
  const FlowStack f = init_flow(3, 4, 8, false, 0, 2);
  Rng rng = make_rng(2);
  const Tensor z = standard_normal(rng, 10, 3);
  Tensor chain = z;
  for (std::size_t i = f.blocks().size(); i-- > 0;) chain = matmul(chain, f.blocks()[i].permutation);
  CHECK(max_abs_diff(chain, f.inverse(z).z) < 1e-12);
}

TEST_CASE("permutations are orthogonal") {
  const FlowStack f = init_flow(8, 8, 16, false, 0, 3);
  for (const auto& b : f.blocks()) {
    const Tensor ptp = matmul(b.permutation.transposed(), b.permutation);
    CHECK(max_abs_diff(ptp, Tensor::identity(8)) < 1e-12);
  }
}

TEST_CASE("same seed gives bit-identical parameters") {
  const FlowStack a = init_flow(4, 8, 64, true, 2, 11);
  const FlowStack b = init_flow(4, 8, 64, true, 2, 11);
  CHECK(a.to_checkpoint().to_bytes() == b.to_checkpoint().to_bytes());
  const FlowStack c = init_flow(4, 8, 64, true, 2, 12);
  CHECK(a.to_checkpoint().to_bytes() != c.to_checkpoint().to_bytes());
}

TEST_CASE("contract violations are rejected") {
  CHECK_THROWS_AS(init_flow(1, 8, 64, false, 0, 0), DimensionError);
  CHECK_THROWS_AS(init_flow(2, 0, 64, false, 0, 0), DimensionError);
  const FlowStack cond = init_flow(2, 2, 8, true, 1, 0);
  CHECK_THROWS_AS(cond.forward(Tensor::zeros(1, 2)), DimensionError);
  const Tensor rho2 = Tensor::zeros(1, 2);
  CHECK_THROWS_AS(cond.forward(Tensor::zeros(1, 2), &rho2), DimensionError);
  const Tensor rho1 = Tensor::zeros(1, 1);
  CHECK_NOTHROW(cond.forward(Tensor::zeros(1, 2), &rho1));
  const FlowStack plain = init_flow(2, 2, 8, false, 0, 0);
  CHECK_THROWS_AS(plain.forward(Tensor::zeros(1, 2), &rho1), DimensionError);
  CHECK_THROWS_AS(plain.forward(Tensor::zeros(1, 3)), DimensionError);
}

TEST_CASE("random 8-block stacks round trip") {
  for (std::size_t d : {2u, 8u}) {
    const FlowStack f = random_flow(d, 8, 5 + d);
    Rng rng = make_rng(9, d);
    const Tensor z = standard_normal(rng, 1000, d);
    CHECK(max_abs_diff(f.forward(f.inverse(z).z).z, z) < 1e-10);
    CHECK(max_abs_diff(f.inverse(f.forward(z).z).z, z) < 1e-10);
  }
}

TEST_CASE("round trip with a large coordinate stays accurate") {
  const Tensor z = Tensor::matrix({{50.0, 0.3}, {-50.0, 1.0}, {0.2, 50.0}});
  // Near-identity stack: intermediates stay O(|z|), so the absolute error stays tiny.
  const FlowStack mild = random_flow(2, 8, 21, 0.002);
  CHECK(max_abs_diff(mild.forward(mild.inverse(z).z).z, z) < 1e-8);
  CHECK(max_abs_diff(mild.inverse(mild.forward(z).z).z, z) < 1e-8);
  // Strongly random stack: the clamp keeps every scale finite, and the error
  // stays small relative to the largest intermediate value.
  const FlowStack wild = random_flow(2, 8, 21, 0.05);
  const Tensor back = wild.inverse(z).z;
  double peak = 0.0;
  for (double v : back.values()) peak = std::max(peak, std::abs(v));
  CHECK(back.all_finite());
  CHECK(max_abs_diff(wild.forward(back).z, z) < 1e-8 * std::max(peak, 1.0));
}

TEST_CASE("conditional stack round trips at a fixed condition") {
  const FlowStack f = random_flow(2, 8, 31, 0.05, true, 1);
  const Tensor rho = Tensor::matrix({{0.7}});
  Rng rng = make_rng(4);
  const Tensor eps = standard_normal(rng, 200, 2);
  CHECK(max_abs_diff(f.inverse(f.forward(eps, &rho).z, &rho).z, eps) < 1e-10);
}

TEST_CASE("log-det matches the numerical Jacobian") {
  for (std::size_t d : {2u, 4u}) {
    for (std::uint64_t s = 0; s < 10; ++s) {
      const FlowStack f = random_flow(d, 8, 40 + s);
      Rng rng = make_rng(s, d);
      const Tensor eps = standard_normal(rng, 1, d);
      const double analytic = f.forward(eps).logdet[0];
      const double numeric = std::log(std::abs(numeric_jacobian(f, eps, 1e-6).determinant()));
      CHECK(std::abs(analytic - numeric) < 1e-6);
    }
  }
}

TEST_CASE("forward log-det is the sum of per-block log-dets") {
  const FlowStack f = random_flow(4, 5, 77, 0.1);
  Rng rng = make_rng(5);
  const Tensor eps = standard_normal(rng, 20, 4);
  Tensor x = eps;
  Tensor total = Tensor::zeros(20, 1);
  for (const auto& b : f.blocks()) {
    FlowSpec one = f.spec();
    one.n_blocks = 1;
    const FlowStack single(one, {b});
    const auto r = single.forward(x);
    x = r.z;
    for (std::size_t i = 0; i < 20; ++i) total[i] += r.logdet[i];
  }
  const auto full = f.forward(eps);
  CHECK(max_abs_diff(full.z, x) < 1e-12);
  CHECK(max_abs_diff(full.logdet, total) < 1e-12);
}

TEST_CASE("log-density integrates to one on a grid") {
  const FlowStack f = random_flow(2, 8, 3);
  const std::size_t n = 400;
  const double lo = -6.0, hi = 6.0, h = (hi - lo) / n;
  Tensor pts = Tensor::zeros(n * n, 2);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      pts.at(i * n + j, 0) = lo + (i + 0.5) * h;
      pts.at(i * n + j, 1) = lo + (j + 0.5) * h;
    }
  const Tensor lp = f.log_prob(pts);
  double mass = 0.0;
  for (double v : lp.values()) mass += std::exp(v) * h * h;
  CHECK(mass == doctest::Approx(1.0).epsilon(0.01));
}

TEST_CASE("pushed-forward samples match the flow density") {
  const FlowStack f = random_flow(2, 8, 13);
  Rng rng = make_rng(17);
  const std::size_t n = 1000000, bins = 40;
  const double lo = -5.0, hi = 5.0, w = (hi - lo) / bins;
  const Tensor z = f.forward(standard_normal(rng, n, 2)).z;
  std::vector<double> hist(bins * bins, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    const double a = z.at(r, 0), b = z.at(r, 1);
    if (a < lo || a >= hi || b < lo || b >= hi) continue;
    hist[static_cast<std::size_t>((a - lo) / w) * bins + static_cast<std::size_t>((b - lo) / w)] += 1.0 / n;
  }
  // Reference cell masses from a 5x5 midpoint rule inside each bin.
  const std::size_t sub = 5;
  Tensor pts = Tensor::zeros(bins * bins * sub * sub, 2);
  std::size_t k = 0;
  for (std::size_t i = 0; i < bins; ++i)
    for (std::size_t j = 0; j < bins; ++j)
      for (std::size_t a = 0; a < sub; ++a)
        for (std::size_t b = 0; b < sub; ++b, ++k) {
          pts.at(k, 0) = lo + i * w + (a + 0.5) * w / sub;
          pts.at(k, 1) = lo + j * w + (b + 0.5) * w / sub;
        }
  const Tensor lp = f.log_prob(pts);
  double tv = 0.0;
  for (std::size_t c = 0; c < bins * bins; ++c) {
    double m = 0.0;
    for (std::size_t s = 0; s < sub * sub; ++s) m += std::exp(lp[c * sub * sub + s]) * (w / sub) * (w / sub);
    tv += std::abs(m - hist[c]);
  }
  CHECK(0.5 * tv < 0.02);
}

TEST_CASE("condition gradient matches finite differences") {
  const FlowStack f = random_flow(2, 4, 55, 0.1, true, 2);
  const Tensor eps = Tensor::matrix({{0.3, -0.8}});
  const double err = finite_difference_check(
      [&](Graph& g, Var rho) {
        const auto p = f.bind(g, false);
        const auto out = f.forward(g, p, g.constant(eps), rho);
        return sum(out.z * g.constant(Tensor::matrix({{1.0, 0.7}})));
      },
      Tensor::matrix({{0.2, -0.4}}), 1e-5);
  CHECK(err < 1e-5);
}

TEST_CASE("checkpoint round trip is byte-exact") {
  const FlowStack f = random_flow(3, 4, 8, 0.1, true, 2);
  const auto bytes = f.to_checkpoint().to_bytes();
  const FlowStack g = FlowStack::from_checkpoint(Checkpoint::from_bytes(bytes));
  CHECK(g.to_checkpoint().to_bytes() == bytes);
  auto corrupt = bytes;
  corrupt.pop_back();
  CHECK_THROWS_AS(Checkpoint::from_bytes(corrupt), CheckpointError);
}
