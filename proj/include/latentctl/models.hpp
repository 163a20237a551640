#pragma once

#include <atomic>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"
#include "latentctl/autodiff.hpp"
#include "latentctl/tensor.hpp"

namespace latentctl {

/// Batched differentiable map R^in -> R^out (one sample per row). Classifiers
/// are models whose outputs are row-wise log-probabilities.
class Model {
 public:
  virtual ~Model() = default;
  virtual std::size_t input_dim() const = 0;
  virtual std::size_t output_dim() const = 0;
  virtual Var apply(Graph& g, Var x) const = 0;
  virtual nlohmann::json describe() const = 0;

  /// Evaluation without a tape.
  Tensor operator()(const Tensor& x) const;
};

using ModelPtr = std::shared_ptr<const Model>;

/// Fully connected network with leaky-ReLU hidden layers and a linear output.
struct Mlp {
  std::vector<Tensor> weights;  // out x in
  std::vector<Tensor> biases;
  double slope = 0.2;

  static Mlp init(const std::vector<std::size_t>& sizes, std::uint64_t seed, double slope,
                  double output_scale = 1.0);
  std::size_t input_dim() const { return weights.front().cols(); }
  std::size_t output_dim() const { return weights.back().rows(); }
  std::vector<Tensor*> parameters();
  std::vector<Var> bind(Graph& g, bool trainable) const;
  Var apply(Graph& g, const std::vector<Var>& params, Var x) const;
};

class IdentityModel final : public Model {
 public:
  explicit IdentityModel(std::size_t dim) : dim_(dim) {}
  std::size_t input_dim() const override { return dim_; }
  std::size_t output_dim() const override { return dim_; }
  Var apply(Graph&, Var x) const override { return x; }
  nlohmann::json describe() const override { return {{"kind", "identity"}, {"dim", dim_}}; }

 private:
  std::size_t dim_;
};

/// x A^T + b.
class LinearModel final : public Model {
 public:
  LinearModel(Tensor a, Tensor b);
  std::size_t input_dim() const override { return a_.cols(); }
  std::size_t output_dim() const override { return a_.rows(); }
  Var apply(Graph& g, Var x) const override;
  nlohmann::json describe() const override;

 private:
  Tensor a_, b_;
};

/// Columns [begin, end) of the input.
class SliceModel final : public Model {
 public:
  SliceModel(std::size_t input_dim, std::size_t begin, std::size_t end);
  std::size_t input_dim() const override { return in_; }
  std::size_t output_dim() const override { return end_ - begin_; }
  Var apply(Graph&, Var x) const override { return slice_cols(x, begin_, end_); }
  nlohmann::json describe() const override;

 private:
  std::size_t in_, begin_, end_;
};

class MlpModel final : public Model {
 public:
  explicit MlpModel(Mlp mlp) : mlp_(std::move(mlp)) {}
  /// Seeded embedding network used by the similarity and ID energies.
  static std::shared_ptr<MlpModel> embedding(std::size_t input_dim, std::size_t hidden, std::size_t output_dim,
                                             std::uint64_t seed);
  std::size_t input_dim() const override { return mlp_.input_dim(); }
  std::size_t output_dim() const override { return mlp_.output_dim(); }
  Var apply(Graph& g, Var x) const override;
  nlohmann::json describe() const override;
  const Mlp& mlp() const { return mlp_; }

 private:
  Mlp mlp_;
};

/// Elementwise logistic function, optionally after an inner model.
class SigmoidModel final : public Model {
 public:
  explicit SigmoidModel(std::size_t dim, ModelPtr inner = nullptr);
  std::size_t input_dim() const override { return inner_ ? inner_->input_dim() : dim_; }
  std::size_t output_dim() const override { return dim_; }
  Var apply(Graph& g, Var x) const override;
  nlohmann::json describe() const override;

 private:
  std::size_t dim_;
  ModelPtr inner_;
};

/// outer(inner(x)).
class ChainModel final : public Model {
 public:
  ChainModel(ModelPtr outer, ModelPtr inner);
  std::size_t input_dim() const override { return inner_->input_dim(); }
  std::size_t output_dim() const override { return outer_->output_dim(); }
  Var apply(Graph& g, Var x) const override { return outer_->apply(g, inner_->apply(g, x)); }
  nlohmann::json describe() const override;

 private:
  ModelPtr outer_, inner_;
};

/// Gaussian mixture in R^D: weights, means (K x D) and covariances.
struct MixtureSpec {
  std::vector<double> weights;
  Tensor means;
  std::vector<Tensor> covariances;

  std::size_t components() const { return weights.size(); }
  std::size_t dim() const { return means.cols(); }
  /// Throws ConfigError unless weights are positive and sum to one and every
  /// covariance is symmetric positive definite.
  void validate() const;
  nlohmann::json to_json() const;
  static MixtureSpec from_json(const nlohmann::json& j);
};

/// Four components at (+-2, +-2) with covariance 0.15 I, weights (0.85, 0.05, 0.05, 0.05).
MixtureSpec default_mixture();

/// Component posteriors under equal priors; ignores the mixture weights.
class FairClassifier final : public Model {
 public:
  explicit FairClassifier(const MixtureSpec& spec);
  std::size_t input_dim() const override { return dim_; }
  std::size_t output_dim() const override { return chol_inv_.size(); }
  Var apply(Graph& g, Var x) const override;
  nlohmann::json describe() const override;

 private:
  std::size_t dim_;
  Tensor means_;
  std::vector<Tensor> chol_inv_;  // L^{-1} with Sigma = L L^T
  std::vector<double> log_norm_;  // -0.5 log det(2 pi Sigma)
};

/// Softmax over -||x - c_k||^2 / temperature.
class NearestCenterClassifier final : public Model {
 public:
  NearestCenterClassifier(Tensor centers, double temperature);
  std::size_t input_dim() const override { return centers_.cols(); }
  std::size_t output_dim() const override { return centers_.rows(); }
  Var apply(Graph& g, Var x) const override;
  nlohmann::json describe() const override;

 private:
  Tensor centers_;
  double temperature_;
};

/// Input-independent class probabilities. Zero entries are kept as the log of
/// the smallest positive double so the tape stays finite.
class FixedProbabilityClassifier final : public Model {
 public:
  FixedProbabilityClassifier(std::size_t input_dim, std::vector<double> probs);
  std::size_t input_dim() const override { return in_; }
  std::size_t output_dim() const override { return log_probs_.size(); }
  Var apply(Graph& g, Var x) const override;
  nlohmann::json describe() const override;

 private:
  std::size_t in_;
  Tensor log_probs_;
};

/// Merges classes of a classifier into groups: log P(group) = logsumexp over members.
class MergedClassifier final : public Model {
 public:
  MergedClassifier(ModelPtr classifier, std::vector<std::vector<std::size_t>> groups);
  std::size_t input_dim() const override { return inner_->input_dim(); }
  std::size_t output_dim() const override { return groups_.size(); }
  Var apply(Graph& g, Var x) const override;
  nlohmann::json describe() const override;

 private:
  ModelPtr inner_;
  std::vector<std::vector<std::size_t>> groups_;
};

/// exp of a classifier's log-probabilities; the feature map gamma of a moment constraint.
class ProbabilitiesModel final : public Model {
 public:
  explicit ProbabilitiesModel(ModelPtr classifier) : inner_(std::move(classifier)) {}
  std::size_t input_dim() const override { return inner_->input_dim(); }
  std::size_t output_dim() const override { return inner_->output_dim(); }
  Var apply(Graph& g, Var x) const override { return exp(inner_->apply(g, x)); }
  nlohmann::json describe() const override { return {{"kind", "probabilities"}, {"classifier", inner_->describe()}}; }

 private:
  ModelPtr inner_;
};

/// Counts rows passed through the wrapped model.
class CountingModel final : public Model {
 public:
  explicit CountingModel(ModelPtr inner) : inner_(std::move(inner)) {}
  std::size_t input_dim() const override { return inner_->input_dim(); }
  std::size_t output_dim() const override { return inner_->output_dim(); }
  Var apply(Graph& g, Var x) const override;
  nlohmann::json describe() const override { return inner_->describe(); }
  std::uint64_t rows() const { return rows_.load(); }
  void reset() const { rows_ = 0; }

 private:
  ModelPtr inner_;
  mutable std::atomic<std::uint64_t> rows_{0};
};

/// Row-wise argmax of a model's outputs.
std::vector<std::size_t> argmax_rows(const Tensor& t);

}  // namespace latentctl
