#include "latentctl/moment.hpp"

#include <cmath>

#include "latentctl/random.hpp"

namespace latentctl {

void MomentConfig::validate() const {
  if (samples < 2) throw ConfigError("moment.samples must be at least 2");
  if (max_steps < 1) throw ConfigError("moment.max_steps must be at least 1");
  if (!(optimizer.lr > 0.0)) throw ConfigError("moment.lr must be positive");
  if (optimizer.kind != "adam" && optimizer.kind != "sgd") throw ConfigError("moment.optimizer must be adam or sgd");
  if (!(tolerance > 0.0)) throw ConfigError("moment.tolerance must be positive");
}

nlohmann::json MomentConfig::to_json() const {
  return {{"samples", samples},   {"max_steps", max_steps},         {"optimizer", optimizer.kind},
          {"lr", optimizer.lr},   {"tolerance", tolerance},         {"plateau_steps", plateau_steps},
          {"lambda", lambda},     {"antithetic", antithetic},       {"seed", seed},
          {"rho", rho}};
}

MomentConfig MomentConfig::from_json(const nlohmann::json& j) {
  MomentConfig c;
  if (!j.is_object()) throw ConfigError("moment config must be an object");
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "samples") c.samples = v.get<std::size_t>();
      else if (key == "max_steps") c.max_steps = v.get<std::size_t>();
      else if (key == "optimizer") c.optimizer.kind = v.get<std::string>();
      else if (key == "lr") c.optimizer.lr = v.get<double>();
      else if (key == "tolerance") c.tolerance = v.get<double>();
      else if (key == "plateau_steps") c.plateau_steps = v.get<std::size_t>();
      else if (key == "lambda") c.lambda = v.get<double>();
      else if (key == "antithetic") c.antithetic = v.get<bool>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "rho") c.rho = v.get<std::vector<double>>();
      else throw ConfigError("unknown moment key '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("moment." + key + ": " + e.what());
    }
  }
  c.validate();
  return c;
}

nlohmann::json MomentResult::to_json() const {
  return {{"beta", beta.storage()},         {"beta_raw", beta_raw.storage()}, {"estimate", estimate.storage()},
          {"residual", residual},           {"converged", converged},         {"steps", steps}};
}

Tensor moment_features(const Generator& g, const Model& gamma, const MomentConfig& cfg) {
  cfg.validate();
  if (gamma.input_dim() != g.output_dim()) throw DimensionError("gamma input must match the generator output");
  if (g.condition_dim() != cfg.rho.size()) throw ConfigError("moment.rho must match the generator condition");
  const std::size_t d = g.latent_dim(), n = cfg.samples;
  Rng rng = make_rng(cfg.seed, 0);
  Tensor eps;
  if (cfg.antithetic) {
    const std::size_t half = (n + 1) / 2;
    const Tensor e = standard_normal(rng, half, d);
    eps = Tensor::zeros(n, d);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < d; ++j) eps.at(r, j) = r < half ? e.at(r, j) : -e.at(r - half, j);
  } else {
    eps = standard_normal(rng, n, d);
  }
  const Tensor rho = Tensor::matrix(1, cfg.rho.size(), cfg.rho);
  return gamma(g(eps, cfg.rho.empty() ? nullptr : &rho));
}

Tensor snis_estimate(const Tensor& features, const Tensor& beta) {
  const std::size_t n = features.rows(), k = features.cols();
  if (beta.size() != k) throw DimensionError("beta length must match the feature count");
  std::vector<double> logits(n);
  double peak = -INFINITY;
  for (std::size_t r = 0; r < n; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += beta[j] * features.at(r, j);
    logits[r] = s;
    peak = std::max(peak, s);
  }
  Tensor est = Tensor::zeros(1, k);
  double z = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    const double w = std::exp(logits[r] - peak);
    z += w;
    for (std::size_t j = 0; j < k; ++j) est[j] += w * features.at(r, j);
  }
  for (double& v : est.storage()) v /= z;
  return est;
}

MomentResult solve_moment_beta(const Tensor& features, const Tensor& mu, const MomentConfig& cfg) {
  cfg.validate();
  const std::size_t k = features.cols();
  if (mu.size() != k) throw DimensionError("mu length must match the number of moment features");
  Tensor beta = Tensor::zeros(k, 1);
  OptimizerConfig ocfg = cfg.optimizer;
  auto opt = std::make_unique<Optimizer>(ocfg, std::vector<Tensor*>{&beta});
  const Tensor mu_row = mu.reshaped(1, k);

  MomentResult res;
  Tensor best = beta;
  double best_residual = INFINITY;
  std::size_t since_best = 0;
  std::size_t step = 0;
  for (; step < cfg.max_steps; ++step) {
    Graph g;
    const Var b = g.input(beta);
    const Var f = g.constant(features);
    const Var w = softmax(transpose(matmul(f, b)));
    const Var loss = sum(square(matmul(w, f) - g.constant(mu_row)));
    const double residual = std::sqrt(loss.value().item());
    if (residual < best_residual) {
      best_residual = residual;
      best = beta;
      since_best = 0;
    } else if (++since_best >= cfg.plateau_steps) {
      // Restart from the best point with half the step size.
      ocfg.lr *= 0.5;
      beta = best;
      opt = std::make_unique<Optimizer>(ocfg, std::vector<Tensor*>{&beta});
      since_best = 0;
      continue;
    }
    if (residual <= cfg.tolerance) break;
    g.backward(loss);
    opt->step({g.grad(b)});
  }
  res.beta_raw = best.reshaped(1, k);
  res.beta = res.beta_raw;
  for (double& v : res.beta.storage()) v *= cfg.lambda;
  res.estimate = snis_estimate(features, res.beta_raw);
  res.residual = best_residual;
  res.converged = best_residual <= cfg.tolerance;
  res.steps = step;
  return res;
}

MomentResult solve_moment_beta(const Generator& g, const Model& gamma, const Tensor& mu, const MomentConfig& cfg) {
  if (gamma.output_dim() != mu.size()) throw DimensionError("mu length must match gamma's output");
  return solve_moment_beta(moment_features(g, gamma, cfg), mu, cfg);
}

ControlResult iterate_control(GeneratorPtr g, const std::vector<ControlStage>& stages, bool keep_partial) {
  if (stages.empty()) throw ConfigError("iterate_control needs at least one stage");
  ControlResult out;
  out.generator = std::move(g);
  for (const ControlStage& st : stages) {
    try {
      StageOutcome oc;
      oc.name = st.name;
      EnergyPtr energy = st.energy;
      if (st.gamma) {
        if (energy) throw ConfigError("stage '" + st.name + "' sets both an energy and a moment constraint");
        MomentResult m = solve_moment_beta(*out.generator, *st.gamma, st.mu, st.moment);
        energy = std::make_shared<MomentEnergy>(m.beta, st.gamma);
        oc.moment = std::move(m);
      }
      if (!energy) throw ConfigError("stage '" + st.name + "' has no energy");
      TrainResult tr = train_flow(*out.generator, *energy, init_flow(st.flow), st.train);
      oc.report = std::move(tr.report);
      out.generator = compose_generator(out.generator, std::move(tr.flow));
      out.stages.push_back(std::move(oc));
    } catch (const std::exception& e) {
      if (!keep_partial) throw;
      out.complete = false;
      out.error = "stage '" + st.name + "': " + e.what();
      break;
    }
  }
  return out;
}

}  // namespace latentctl
