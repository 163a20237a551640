#pragma once

#include <atomic>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "latentctl/autodiff.hpp"
#include "latentctl/generators.hpp"
#include "latentctl/models.hpp"

namespace latentctl {

/// Batched energy E(x): rows x D in, rows x 1 out, differentiable in x.
class Energy {
 public:
  virtual ~Energy() = default;
  virtual Var evaluate(Graph& g, Var x) const = 0;
  virtual nlohmann::json describe() const = 0;

  /// Values without a tape, rows x 1.
  Tensor operator()(const Tensor& x) const;
};

using EnergyPtr = std::shared_ptr<const Energy>;

/// -log P(a|x), with log P floored at log(1e-300). Floor hits are counted.
class ClassifierEnergy final : public Energy {
 public:
  static constexpr double kProbFloor = 1e-300;
  ClassifierEnergy(ModelPtr classifier, std::size_t target);
  Var evaluate(Graph& g, Var x) const override;
  nlohmann::json describe() const override;
  /// Rows whose probability was clamped since construction or reset.
  std::uint64_t clamped() const { return clamped_.load(); }
  void reset_clamped() const { clamped_ = 0; }

 private:
  ModelPtr classifier_;
  std::size_t target_;
  mutable std::atomic<std::uint64_t> clamped_{0};
};

enum class Metric { Euclidean, Angular };
Metric metric_from_string(const std::string& s);
std::string to_string(Metric m);

/// Squared distance d(f(x), target)^2. Angular: geodesic angle on the unit sphere.
/// `target` has one row (shared) or one row per sample.
Var regressor_distance(Graph& g, Var fx, Var target, Metric metric);

class RegressorEnergy final : public Energy {
 public:
  RegressorEnergy(ModelPtr regressor, Tensor target, Metric metric);
  Var evaluate(Graph& g, Var x) const override;
  nlohmann::json describe() const override;
  const Tensor& target() const { return target_; }

 private:
  ModelPtr regressor_;
  Tensor target_;
  Metric metric_;
};

/// 1 - cos(R(x0), R(x)).
class SimilarityEnergy final : public Energy {
 public:
  SimilarityEnergy(ModelPtr embedding, Tensor reference);
  Var evaluate(Graph& g, Var x) const override;
  nlohmann::json describe() const override;

 private:
  ModelPtr embedding_;
  Tensor reference_;
};

/// 1 - cos(R(x0), R(x)) row by row, both sides on the tape.
Var id_energy(Graph& g, const Model& embedding, Var x0, Var x);

/// |<x[l1] - x[l2], u> - s|, where l1 and l2 are index groups of equal size.
class SignedDistanceEnergy final : public Energy {
 public:
  SignedDistanceEnergy(std::size_t input_dim, std::vector<std::size_t> l1, std::vector<std::size_t> l2,
                       std::vector<double> u, double s);
  Var evaluate(Graph& g, Var x) const override;
  nlohmann::json describe() const override;

 private:
  std::size_t input_dim_;
  std::vector<std::size_t> l1_, l2_;
  Tensor projector_;  // D x 1: sum_j u_j (e_{l1_j} - e_{l2_j})
  std::vector<double> u_;
  double s_;
};

/// -beta^T gamma(x).
class MomentEnergy final : public Energy {
 public:
  MomentEnergy(Tensor beta, ModelPtr gamma);
  Var evaluate(Graph& g, Var x) const override;
  nlohmann::json describe() const override;
  const Tensor& beta() const { return beta_; }

 private:
  Tensor beta_;
  ModelPtr gamma_;
};

/// Sum of lambda_i E_i(x); empty means the zero energy.
class CompositeEnergy final : public Energy {
 public:
  CompositeEnergy() = default;
  explicit CompositeEnergy(std::vector<std::pair<double, EnergyPtr>> terms);
  CompositeEnergy& add(double lambda, EnergyPtr e);
  Var evaluate(Graph& g, Var x) const override;
  nlohmann::json describe() const override;
  const std::vector<std::pair<double, EnergyPtr>>& terms() const { return terms_; }
  bool empty() const { return terms_.empty(); }
  /// Same terms with every weight multiplied by c.
  CompositeEnergy scaled(double c) const;

 private:
  std::vector<std::pair<double, EnergyPtr>> terms_;
};

/// 0.5 ||x - target||^2.
std::shared_ptr<CompositeEnergy> quadratic_energy(const Tensor& target);

/// Counts energy evaluations: calls, rows, and rows evaluated on a recording tape.
class CountingEnergy final : public Energy {
 public:
  explicit CountingEnergy(EnergyPtr inner) : inner_(std::move(inner)) {}
  Var evaluate(Graph& g, Var x) const override;
  nlohmann::json describe() const override { return inner_->describe(); }
  std::uint64_t calls() const { return calls_.load(); }
  std::uint64_t rows() const { return rows_.load(); }
  std::uint64_t gradient_rows() const { return grad_rows_.load(); }
  void reset() const;

 private:
  EnergyPtr inner_;
  mutable std::atomic<std::uint64_t> calls_{0}, rows_{0}, grad_rows_{0};
};

/// rho -> E_{C_rho}: fixed terms plus regressor terms whose target is rho.
class EnergyFamily {
 public:
  struct Term {
    double lambda;
    EnergyPtr fixed;       // set for rho-independent terms
    ModelPtr regressor;    // set for rho-targeted terms
    Metric metric = Metric::Euclidean;
  };

  EnergyFamily& add_fixed(double lambda, EnergyPtr e);
  EnergyFamily& add_regressor(double lambda, ModelPtr regressor, Metric metric);

  std::size_t condition_dim() const;
  /// rho has one row per sample (or one shared row).
  Var evaluate(Graph& g, Var x, Var rho) const;
  /// Concrete energy for one condition value; evaluates identically to the family.
  std::shared_ptr<CompositeEnergy> at(const Tensor& rho) const;
  nlohmann::json describe() const;
  const std::vector<Term>& terms() const { return terms_; }

 private:
  std::vector<Term> terms_;
};

/// Unnormalized latent density u(z) = N(z|0,I) exp(-E(G(z))).
struct LatentEBM {
  GeneratorPtr generator;
  EnergyPtr energy;
  std::optional<Tensor> condition;  // for conditional compositions

  std::size_t dim() const { return generator->latent_dim(); }
  Var energy_of(Graph& g, Var z) const;
  Var log_density(Graph& g, Var z) const;

  Tensor energy_values(const Tensor& z, bool allow_infinite = false) const;
  Tensor log_density(const Tensor& z) const;
  /// (log u, d log u / dz) for every row.
  std::pair<Tensor, Tensor> log_density_and_grad(const Tensor& z) const;
};

}  // namespace latentctl
