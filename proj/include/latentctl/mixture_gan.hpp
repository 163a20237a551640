#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "latentctl/generators.hpp"
#include "latentctl/models.hpp"
#include "latentctl/random.hpp"

namespace latentctl {

struct GanConfig {
  std::size_t steps = 5000;
  std::size_t batch = 256;
  double lr = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  std::size_t hidden = 64;
  std::size_t disc_hidden = 64;
  std::size_t disc_steps = 1;  // discriminator updates per generator update
  std::size_t latent_dim = 2;
  double slope = 0.2;
  /// Std of Gaussian noise added to every discriminator input; 0 disables it.
  double instance_noise = 0.8;
  std::uint64_t seed = 0;
  /// Divergence: discriminator loss below the threshold for this many consecutive steps.
  std::size_t divergence_window = 500;
  double divergence_threshold = 1e-3;
  std::size_t coverage_samples = 100000;

  nlohmann::json to_json() const;
  static GanConfig from_json(const nlohmann::json& j);
};

struct GanReport {
  std::vector<double> coverage;  // Voronoi-cell mass per component
  std::vector<double> d_loss;
  std::vector<double> g_loss;
  double wall_seconds = 0.0;
  std::uint64_t seed = 0;
};

struct GanResult {
  std::shared_ptr<const MlpGenerator> generator;
  GanReport report;
};

Tensor sample_mixture(const MixtureSpec& spec, Rng& rng, std::size_t n);

/// Fraction of rows nearest (Euclidean) to each mean.
std::vector<double> voronoi_coverage(const Tensor& samples, const Tensor& means);

/// Non-saturating GAN with MLP generator (d -> H -> H -> D) and discriminator
/// (D -> H' -> H' -> 1), alternating discriminator and generator steps.
GanResult train_mixture_gan(const MixtureSpec& spec, const GanConfig& cfg);

}  // namespace latentctl
