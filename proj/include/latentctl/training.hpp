#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "latentctl/energy.hpp"
#include "latentctl/errors.hpp"
#include "latentctl/flow.hpp"
#include "latentctl/generators.hpp"
#include "latentctl/optim.hpp"

namespace latentctl {

struct TrainConfig {
  std::size_t batch = 256;
  std::size_t steps = 5000;
  OptimizerConfig optimizer{};
  /// Cosine decay of the learning rate to lr * lr_final over the run (1 keeps it constant).
  double lr_final = 1.0;
  std::uint64_t seed = 0;
  /// Condition prior: rho_j ~ U[rho_lo_j, rho_hi_j]. Equal bounds give a point mass.
  std::vector<double> rho_lo;
  std::vector<double> rho_hi;
  /// Canonical condition; also the fixed condition when train_flow gets a conditional flow.
  std::vector<double> rho0;
  double lambda_id = 0.0;
  double clip_norm = 10.0;
  /// Divergence: loss above factor * max(|initial loss|, 1) for `divergence_window` steps.
  double divergence_factor = 10.0;
  std::size_t divergence_window = 200;
  /// Save the flow every n steps to checkpoint_path (0 disables).
  std::size_t checkpoint_every = 0;
  std::string checkpoint_path;
  /// Class-embedding training: keep h at its initial parameters.
  bool freeze_embedding = false;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

/// Batch means of one step. total = jac + prior + energy.
struct StepLoss {
  double jac = 0.0;
  double prior = 0.0;
  double energy = 0.0;
  double total = 0.0;
  /// Class-embedding runs: the parts of jac and prior that belong to h.
  double embed_jac = 0.0;
  double embed_prior = 0.0;
  double grad_norm = 0.0;
};

struct TrainReport {
  std::vector<StepLoss> steps;
  double final_total = 0.0;  // mean total over the last min(100, steps) steps
  double wall_seconds = 0.0;
  std::uint64_t seed = 0;

  /// Mean total over steps [end - window, end).
  double trailing_mean(std::size_t end, std::size_t window = 100) const;
  nlohmann::json to_json() const;
  void write_csv(const std::string& path) const;
};

/// Training stopped on a non-finite value; carries the parameters of the last finite step.
class TrainingError : public NumericalError {
 public:
  TrainingError(const std::string& what, FlowStack last_good, std::size_t step)
      : NumericalError(what), last_good_(std::move(last_good)), step_(step) {}
  const FlowStack& last_good() const { return last_good_; }
  std::size_t step() const { return step_; }

 private:
  FlowStack last_good_;
  std::size_t step_;
};

struct TrainResult {
  FlowStack flow;
  TrainReport report;
};

struct FlowLoss {
  Var jac, prior, energy, total;
};

/// Batch estimate of the flow objective on fixed draws eps (and condition rho, if any).
FlowLoss flow_objective(Graph& g, const Generator& gen, const Energy& energy, const FlowStack& flow,
                        const std::vector<Var>& params, Var eps, std::optional<Var> rho = {});

/// Minimizes E_eps[-log|det df/deps| - log N(f(eps)) + E(G(f(eps)))].
TrainResult train_flow(const Generator& g, const Energy& energy, const FlowStack& flow, const TrainConfig& cfg);

/// Same objective with rho ~ p_rho drawn every step and E = E_{C_rho}.
TrainResult train_conditional_flow(const Generator& g, const EnergyFamily& family, const FlowStack& flow,
                                   const TrainConfig& cfg);

/// Conditional objective plus lambda_id * (1 - cos(R(x0), R(x))), x0 = G(f(eps, rho0)).
TrainResult train_with_id_energy(const Generator& g, const EnergyFamily& family, const FlowStack& flow,
                                 const Model& embedding, const TrainConfig& cfg);

struct EmbeddingTrainResult {
  FlowStack z_flow;
  FlowStack y_flow;
  TrainReport report;
};

/// Joint training of f on eps and h on xi ~ N(mu_y, sigma_y^2 I) for a
/// class-conditional generator. y = mu_y + sigma_y * h((xi - mu_y) / sigma_y).
EmbeddingTrainResult train_class_embedding_flow(const ClassConditionalGenerator& g, const Energy& energy,
                                                const FlowStack& z_flow, const FlowStack& y_flow,
                                                const TrainConfig& cfg);

/// Samples of (z, y) from the trained pair, concatenated as the generator latent.
Tensor sample_class_embedding(const ClassConditionalGenerator& g, const FlowStack& z_flow, const FlowStack& y_flow,
                              std::size_t n, std::uint64_t seed);

}  // namespace latentctl
