#include "latentctl/mixture_gan.hpp"

#include <chrono>
#include <cmath>

#include <Eigen/Dense>

#include "latentctl/errors.hpp"
#include "latentctl/optim.hpp"

namespace latentctl {

Tensor sample_mixture(const MixtureSpec& spec, Rng& rng, std::size_t n) {
  spec.validate();
  const std::size_t d = spec.dim();
  std::vector<Eigen::MatrixXd> chol;
  for (const Tensor& c : spec.covariances) {
    Eigen::MatrixXd m(d, d);
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) m(i, j) = c.at(i, j);
    chol.push_back(Eigen::LLT<Eigen::MatrixXd>(m).matrixL());
  }
  std::discrete_distribution<std::size_t> pick(spec.weights.begin(), spec.weights.end());
  std::normal_distribution<double> n01(0.0, 1.0);
  Tensor out = Tensor::zeros(n, d);
  Eigen::VectorXd e(d);
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t c = pick(rng);
    for (std::size_t i = 0; i < d; ++i) e(i) = n01(rng);
    const Eigen::VectorXd x = chol[c] * e;
    for (std::size_t i = 0; i < d; ++i) out.at(r, i) = spec.means.at(c, i) + x(i);
  }
  return out;
}

std::vector<double> voronoi_coverage(const Tensor& samples, const Tensor& means) {
  const std::size_t k = means.rows(), d = means.cols();
  if (samples.cols() != d) throw DimensionError("coverage: sample dimension mismatch");
  std::vector<double> counts(k, 0.0);
  for (std::size_t r = 0; r < samples.rows(); ++r) {
    std::size_t best = 0;
    double best_d = INFINITY;
    for (std::size_t c = 0; c < k; ++c) {
      double s = 0.0;
      for (std::size_t i = 0; i < d; ++i) {
        const double t = samples.at(r, i) - means.at(c, i);
        s += t * t;
      }
      if (s < best_d) {
        best_d = s;
        best = c;
      }
    }
    counts[best] += 1.0;
  }
  for (double& c : counts) c /= static_cast<double>(samples.rows());
  return counts;
}

nlohmann::json GanConfig::to_json() const {
  return {{"steps", steps},
          {"batch", batch},
          {"lr", lr},
          {"beta1", beta1},
          {"beta2", beta2},
          {"hidden", hidden},
          {"disc_hidden", disc_hidden},
          {"disc_steps", disc_steps},
          {"latent_dim", latent_dim},
          {"slope", slope},
          {"instance_noise", instance_noise},
          {"seed", seed},
          {"divergence_window", divergence_window},
          {"divergence_threshold", divergence_threshold},
          {"coverage_samples", coverage_samples}};
}

GanConfig GanConfig::from_json(const nlohmann::json& j) {
  GanConfig c;
  if (!j.is_object()) throw ConfigError("gan config must be an object");
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "steps") c.steps = v.get<std::size_t>();
      else if (key == "batch") c.batch = v.get<std::size_t>();
      else if (key == "lr") c.lr = v.get<double>();
      else if (key == "beta1") c.beta1 = v.get<double>();
      else if (key == "beta2") c.beta2 = v.get<double>();
      else if (key == "hidden") c.hidden = v.get<std::size_t>();
      else if (key == "disc_hidden") c.disc_hidden = v.get<std::size_t>();
      else if (key == "disc_steps") c.disc_steps = v.get<std::size_t>();
      else if (key == "latent_dim") c.latent_dim = v.get<std::size_t>();
      else if (key == "slope") c.slope = v.get<double>();
      else if (key == "instance_noise") c.instance_noise = v.get<double>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "divergence_window") c.divergence_window = v.get<std::size_t>();
      else if (key == "divergence_threshold") c.divergence_threshold = v.get<double>();
      else if (key == "coverage_samples") c.coverage_samples = v.get<std::size_t>();
      else throw ConfigError("unknown gan key '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("gan." + key + ": " + e.what());
    }
  }
  return c;
}

GanResult train_mixture_gan(const MixtureSpec& spec, const GanConfig& cfg) {
  spec.validate();
  if (cfg.batch < 2 || cfg.steps < 1) throw ConfigError("GAN needs batch >= 2 and steps >= 1");
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t d = cfg.latent_dim, D = spec.dim(), H = cfg.hidden;
  Mlp gen = Mlp::init({d, H, H, D}, cfg.seed, cfg.slope);
  Mlp disc = Mlp::init({D, cfg.disc_hidden, cfg.disc_hidden, 1}, cfg.seed + 0x9e3779b97f4a7c15ULL, cfg.slope);
  const OptimizerConfig ocfg{"adam", cfg.lr, cfg.beta1, cfg.beta2, 1e-8};
  Optimizer gopt(ocfg, gen.parameters());
  Optimizer dopt(ocfg, disc.parameters());
  Rng zrng = make_rng(cfg.seed, 0);
  Rng xrng = make_rng(cfg.seed, 1);
  Rng nrng = make_rng(cfg.seed, 3);
  auto noisy = [&](Graph& g, Var x) {
    if (cfg.instance_noise <= 0.0) return x;
    Tensor n = standard_normal(nrng, cfg.batch, D);
    for (double& v : n.storage()) v *= cfg.instance_noise;
    return x + g.constant(std::move(n));
  };

  GanReport report;
  report.seed = cfg.seed;
  std::size_t low_streak = 0;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    for (std::size_t k = 0; k < cfg.disc_steps; ++k) {
      Graph g;
      const auto dp = disc.bind(g, true);
      const auto gp = gen.bind(g, false);
      const Var real = noisy(g, g.constant(sample_mixture(spec, xrng, cfg.batch)));
      const Var fake = noisy(g, gen.apply(g, gp, g.constant(standard_normal(zrng, cfg.batch, d))));
      const Var loss = mean(softplus(-disc.apply(g, dp, real))) + mean(softplus(disc.apply(g, dp, fake)));
      g.backward(loss);
      std::vector<Tensor> grads;
      for (const Var& v : dp) grads.push_back(g.grad(v));
      dopt.step(grads);
      report.d_loss.push_back(loss.value().item());
    }
    {
      Graph g;
      const auto dp = disc.bind(g, false);
      const auto gp = gen.bind(g, true);
      const Var fake = noisy(g, gen.apply(g, gp, g.constant(standard_normal(zrng, cfg.batch, d))));
      const Var loss = mean(softplus(-disc.apply(g, dp, fake)));
      g.backward(loss);
      std::vector<Tensor> grads;
      for (const Var& v : gp) grads.push_back(g.grad(v));
      gopt.step(grads);
      report.g_loss.push_back(loss.value().item());
    }
    low_streak = report.d_loss.back() < cfg.divergence_threshold ? low_streak + 1 : 0;
    if (low_streak >= cfg.divergence_window) {
      throw NumericalError("GAN diverged at step " + std::to_string(step) + ": discriminator loss " +
                           std::to_string(report.d_loss.back()) + " below " +
                           std::to_string(cfg.divergence_threshold) + " for " + std::to_string(low_streak) +
                           " consecutive steps (generator loss " + std::to_string(report.g_loss.back()) + ")");
    }
  }
  auto generator = std::make_shared<const MlpGenerator>(std::move(gen));
  Rng crng = make_rng(cfg.seed, 2);
  report.coverage = voronoi_coverage((*generator)(standard_normal(crng, cfg.coverage_samples, d)), spec.means);
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {generator, report};
}

}  // namespace latentctl
