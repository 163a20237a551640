#include <cmath>

#include "doctest.h"
#include "latentctl/errors.hpp"
#include "latentctl/evaluation.hpp"
#include "latentctl/random.hpp"

using namespace latentctl;

namespace {

GeneratorPtr identity2() { return make_linear_gaussian(Tensor::identity(2), Tensor::vector({0.0, 0.0})); }

}  // namespace

TEST_CASE("KL from a flow to a gridded target") {
  const FlowStack f = init_flow(2, 8, 64, false, 0, 0);
  const LatentEBM zero{identity2(), std::make_shared<CompositeEnergy>(), {}};
  const auto g0 = quadrature_grid(zero, {-7, -7}, {7, 7}, {400, 400});
  const auto k0 = kl_flow_to_target(f, g0);
  CHECK(k0.kl < 1e-3);
  CHECK(k0.kl > -1e-6);
  const LatentEBM oracle{identity2(), quadratic_energy(Tensor::vector({2.0, 0.0})), {}};
  const auto g1 = quadrature_grid(oracle, {-7, -7}, {7, 7}, {400, 400});
  // KL(N(0,I) || N((1,0), I/2)) = 0.5 (tr(2I) + 2 - 2 + ln(1/4))
  const double exact = 0.5 * (4.0 + 2.0 - 2.0 + std::log(0.25));
  CHECK(exact == doctest::Approx(1.306853).epsilon(1e-6));
  CHECK(std::abs(kl_flow_to_target(f, g1).kl - exact) < 0.01);
}

TEST_CASE("KL rejects grids that miss the flow's mass") {
  const FlowStack f = init_flow(2, 2, 8, false, 0, 0);
  LatentEBM shifted{make_linear_gaussian(Tensor::identity(2), Tensor::vector({0.0, 0.0})),
                    quadratic_energy(Tensor::vector({0.0, 0.0})), {}};
  DensityGrid g = quadrature_grid(shifted, {-6, -6}, {6, 6}, {64, 64});
  g.lo = {-1, -1};
  g.hi = {1, 1};
  CHECK_THROWS_AS(kl_flow_to_target(f, g), NumericalError);
}

TEST_CASE("moment gap") {
  const auto fixed = std::make_shared<FixedProbabilityClassifier>(2, std::vector<double>{0.3, 0.7});
  const ProbabilitiesModel gamma(fixed);
  Rng rng = make_rng(1);
  const Tensor x = standard_normal(rng, 2000, 2);
  CHECK(moment_gap(x, gamma, gamma(x.row(0))) < 1e-12);
  const Tensor x1 = standard_normal(rng, 100000, 1);
  CHECK(moment_gap(x1, SigmoidModel(1), Tensor::vector({0.5})) < 0.01);
  CHECK_THROWS_AS(moment_gap(standard_normal(rng, 10, 1), SigmoidModel(1), Tensor::vector({0.5})), DimensionError);
}

TEST_CASE("attribute KL") {
  CHECK(attribute_kl({0.8, 0.2}, {0.5, 0.5}, 1000) == doctest::Approx(0.8 * std::log(1.6) + 0.2 * std::log(0.4)));
  CHECK(attribute_kl({0.8, 0.2}, {0.5, 0.5}, 1000) == doctest::Approx(0.1927).epsilon(1e-3));
  CHECK(attribute_kl({0.25, 0.25, 0.25, 0.25}, {0.25, 0.25, 0.25, 0.25}, 100000) < 1e-4);
  CHECK(std::isfinite(attribute_kl({1.0, 0.0}, {0.5, 0.5}, 100)));
  CHECK_THROWS_AS(attribute_kl({1.0}, {0.5, 0.5}, 100), DimensionError);

  // Order and argmax-preserving scale invariance.
  const auto centers = Tensor::matrix({{-1.0, 0.0}, {1.0, 0.0}, {0.0, 2.0}});
  const NearestCenterClassifier sharp(centers, 0.1), soft(centers, 3.0);
  Rng rng = make_rng(2);
  Tensor x = standard_normal(rng, 5000, 2);
  const std::vector<double> ref{0.2, 0.3, 0.5};
  const double a = attribute_kl(x, sharp, ref);
  CHECK(a == attribute_kl(x, soft, ref));
  Tensor reversed = Tensor::zeros(x.rows(), 2);
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t j = 0; j < 2; ++j) reversed.at(r, j) = x.at(x.rows() - 1 - r, j);
  CHECK(a == doctest::Approx(attribute_kl(reversed, sharp, ref)).epsilon(1e-14));
}

TEST_CASE("2D histogram TV distance") {
  Rng rng = make_rng(3);
  const Tensor a = standard_normal(rng, 50000, 2);
  CHECK(tv_distance_2d(a, a) == 0.0);
  Tensor b = a;
  for (double& v : b.storage()) v += 100.0;
  CHECK(tv_distance_2d(a, b) == doctest::Approx(1.0));
  CHECK(tv_distance_2d(a, standard_normal(rng, 50000, 2)) < 0.1);
}

TEST_CASE("latency bench counts gradient calls per sampler") {
  const auto counter = std::make_shared<CountingEnergy>(quadratic_energy(Tensor::vector({2.0, 0.0})));
  const LatentEBM counted{identity2(), counter, {}};
  const LatentEBM target{identity2(), quadratic_energy(Tensor::vector({2.0, 0.0})), {}};
  const FlowStack f = init_flow(2, 2, 8, false, 0, 0);
  const std::vector<BenchSampler> samplers = {
      {"flow", [&](std::size_t n, std::uint64_t seed) {
         Rng rng = make_rng(seed);
         return f.forward(standard_normal(rng, n, 2)).z;
       }},
      {"langevin-50", [&](std::size_t n, std::uint64_t seed) {
         return langevin_sample(counted, {.n_steps = 50, .step_size = 0.05, .seed = seed}, n).samples;
       }},
  };
  const auto rows = latency_bench(samplers, *counter, target, 200, 10, 1);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].gradient_calls_per_sample == 0.0);
  CHECK(rows[1].gradient_calls_per_sample == 50.0);
  CHECK(rows[0].sec_per_sample < rows[1].sec_per_sample);
  CHECK(format_latency_table(rows).find("langevin-50") != std::string::npos);
  CHECK_THROWS_AS(latency_bench(samplers, *counter, target, 10, 5, 1), ConfigError);
}
