#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "latentctl/energy.hpp"
#include "latentctl/generators.hpp"
#include "latentctl/optim.hpp"
#include "latentctl/training.hpp"

namespace latentctl {

struct MomentConfig {
  std::size_t samples = 100000;
  std::size_t max_steps = 4000;
  OptimizerConfig optimizer{"adam", 0.05, 0.9, 0.999, 1e-8};
  /// Converged once ||SNIS estimate - mu||_2 <= tolerance.
  double tolerance = 1e-4;
  /// Learning rate is halved after this many steps without a new best residual.
  std::size_t plateau_steps = 50;
  /// Post-multiplier applied to the solved beta.
  double lambda = 1.0;
  bool antithetic = true;
  std::uint64_t seed = 0;
  /// Condition passed to a conditional generator.
  std::vector<double> rho;

  void validate() const;
  nlohmann::json to_json() const;
  static MomentConfig from_json(const nlohmann::json& j);
};

struct MomentResult {
  Tensor beta;      // lambda * beta_raw
  Tensor beta_raw;  // minimizer of the residual
  Tensor estimate;  // SNIS estimate of E[gamma] at beta_raw
  double residual = 0.0;
  bool converged = false;
  std::size_t steps = 0;

  nlohmann::json to_json() const;
};

/// gamma(G(eps)) for a cached batch of N latent draws (antithetic pairs when enabled).
Tensor moment_features(const Generator& g, const Model& gamma, const MomentConfig& cfg);

/// sum_i softmax(F beta)_i F_i: the self-normalized reweighted mean of the rows of F.
Tensor snis_estimate(const Tensor& features, const Tensor& beta);

/// Solves for beta with E_{p_G}[exp(beta^T gamma) gamma] / E_{p_G}[exp(beta^T gamma)] = mu.
MomentResult solve_moment_beta(const Generator& g, const Model& gamma, const Tensor& mu, const MomentConfig& cfg);
MomentResult solve_moment_beta(const Tensor& features, const Tensor& mu, const MomentConfig& cfg);

/// One control stage: a fixed energy, or a moment constraint (gamma, mu) whose
/// beta is solved against the generator produced by the previous stages.
struct ControlStage {
  std::string name;
  EnergyPtr energy;
  ModelPtr gamma;
  Tensor mu;
  MomentConfig moment;
  FlowSpec flow;
  TrainConfig train;
};

struct StageOutcome {
  std::string name;
  TrainReport report;
  std::optional<MomentResult> moment;
};

struct ControlResult {
  GeneratorPtr generator;
  std::vector<StageOutcome> stages;
  bool complete = true;
  std::string error;
};

/// Trains one flow per stage against the current composition and composes it.
/// With keep_partial, a failing stage ends the loop and the composition so far is returned.
ControlResult iterate_control(GeneratorPtr g, const std::vector<ControlStage>& stages, bool keep_partial = false);

}  // namespace latentctl
