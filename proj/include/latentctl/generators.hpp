#pragma once

#include <memory>
#include <optional>
#include <string>

#include "latentctl/autodiff.hpp"
#include "latentctl/checkpoint.hpp"
#include "latentctl/flow.hpp"
#include "latentctl/models.hpp"

namespace latentctl {

/// Frozen map G: R^d -> R^D standing in for a pre-trained model.
class Generator {
 public:
  virtual ~Generator() = default;
  virtual std::string kind() const = 0;
  virtual std::size_t latent_dim() const = 0;
  virtual std::size_t output_dim() const = 0;
  /// Size of the condition rho; non-zero only for compositions with a conditional flow.
  virtual std::size_t condition_dim() const { return 0; }
  virtual Var apply(Graph& g, Var z, std::optional<Var> rho = {}) const = 0;
  virtual Checkpoint to_checkpoint() const = 0;

  Tensor operator()(const Tensor& z, const Tensor* rho = nullptr) const;

 protected:
  void check_latent(const Var& z, const std::optional<Var>& rho) const;
};

using GeneratorPtr = std::shared_ptr<const Generator>;

/// G(z) = A z + b.
class LinearGaussianGenerator final : public Generator {
 public:
  LinearGaussianGenerator(Tensor a, Tensor b);
  std::string kind() const override { return "linear-gaussian"; }
  std::size_t latent_dim() const override { return a_.cols(); }
  std::size_t output_dim() const override { return a_.rows(); }
  Var apply(Graph& g, Var z, std::optional<Var> rho = {}) const override;
  Checkpoint to_checkpoint() const override;
  /// True when A lacks full column rank; the target is still defined.
  bool rank_deficient() const { return rank_deficient_; }
  const Tensor& a() const { return a_; }
  const Tensor& b() const { return b_; }

 private:
  Tensor a_, b_;
  bool rank_deficient_ = false;
};

/// G(z) = z + alpha tanh(W z + c).
class WarpedGaussianGenerator final : public Generator {
 public:
  WarpedGaussianGenerator(Tensor w, Tensor c, double alpha = 0.5);
  std::string kind() const override { return "warped-gaussian"; }
  std::size_t latent_dim() const override { return w_.cols(); }
  std::size_t output_dim() const override { return w_.rows(); }
  Var apply(Graph& g, Var z, std::optional<Var> rho = {}) const override;
  Checkpoint to_checkpoint() const override;

 private:
  Tensor w_, c_;
  double alpha_;
};

/// Frozen MLP generator produced by adversarial training.
class MlpGenerator final : public Generator {
 public:
  explicit MlpGenerator(Mlp mlp) : mlp_(std::move(mlp)) {}
  std::string kind() const override { return "mixture-gan"; }
  std::size_t latent_dim() const override { return mlp_.input_dim(); }
  std::size_t output_dim() const override { return mlp_.output_dim(); }
  Var apply(Graph& g, Var z, std::optional<Var> rho = {}) const override;
  Checkpoint to_checkpoint() const override;
  const Mlp& mlp() const { return mlp_; }

 private:
  Mlp mlp_;
};

/// G(z, y) = z + M y. The latent vector is the concatenation [z, y].
class ClassConditionalGenerator final : public Generator {
 public:
  ClassConditionalGenerator(Tensor m, Tensor table);
  std::string kind() const override { return "class-conditional"; }
  std::size_t latent_dim() const override { return z_dim() + embed_dim(); }
  std::size_t output_dim() const override { return m_.rows(); }
  std::size_t z_dim() const { return m_.rows(); }
  std::size_t embed_dim() const { return m_.cols(); }
  std::size_t classes() const { return table_.rows(); }
  Var apply(Graph& g, Var zy, std::optional<Var> rho = {}) const override;
  Var apply(Graph& g, Var z, Var y) const;
  Checkpoint to_checkpoint() const override;

  const Tensor& embedding_table() const { return table_; }
  const Tensor& mixing() const { return m_; }
  /// Column means of the embedding table.
  const Tensor& embedding_mean() const { return mean_; }
  /// Column standard deviations of the embedding table (population).
  const Tensor& embedding_std() const { return std_; }

 private:
  Tensor m_, table_, mean_, std_;
};

/// G(f(eps[, rho])). Holds shared, immutable parts; never mutates them.
class ComposedGenerator final : public Generator {
 public:
  ComposedGenerator(GeneratorPtr inner, std::shared_ptr<const FlowStack> flow);
  std::string kind() const override { return "composed"; }
  std::size_t latent_dim() const override { return flow_->dim(); }
  std::size_t output_dim() const override { return inner_->output_dim(); }
  std::size_t condition_dim() const override { return flow_->condition_dim(); }
  Var apply(Graph& g, Var eps, std::optional<Var> rho = {}) const override;
  Checkpoint to_checkpoint() const override;
  const Generator& inner() const { return *inner_; }
  const FlowStack& flow() const { return *flow_; }
  /// Number of flows between eps and the base generator.
  std::size_t depth() const;

 private:
  GeneratorPtr inner_;
  std::shared_ptr<const FlowStack> flow_;
};

std::shared_ptr<LinearGaussianGenerator> make_linear_gaussian(Tensor a, Tensor b);
std::shared_ptr<WarpedGaussianGenerator> make_warped_gaussian(std::size_t dim, std::uint64_t seed);
std::shared_ptr<ClassConditionalGenerator> make_class_conditional(std::size_t z_dim, std::size_t n_classes,
                                                                  std::size_t embed_dim, std::uint64_t seed);
GeneratorPtr compose_generator(GeneratorPtr g, FlowStack f);
GeneratorPtr compose_generator(GeneratorPtr g, std::shared_ptr<const FlowStack> f);

GeneratorPtr generator_from_checkpoint(const Checkpoint& ck);

}  // namespace latentctl
