#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "latentctl/autodiff.hpp"
#include "latentctl/checkpoint.hpp"
#include "latentctl/tensor.hpp"

namespace latentctl {

struct FlowSpec {
  std::size_t dim = 2;
  std::size_t n_blocks = 8;
  std::size_t hidden_width = 64;
  bool conditional = false;
  std::size_t condition_dim = 0;
  std::uint64_t seed = 0;
};

/// Orthogonal mixing, affine coupling, ActNorm.
struct FlowBlock {
  Tensor permutation;  // d x d, orthogonal, fixed
  Tensor w1, b1;       // hidden x (split + condition_dim)
  Tensor w2, b2;       // 2 (d - split) x hidden; rows [0, d-split) are s, the rest t
  Tensor log_scale;    // ActNorm, length d
  Tensor bias;         // ActNorm, length d
};

struct FlowVars {
  Var z;
  Var logdet;  // rows x 1
};

class FlowStack {
 public:
  static constexpr double kScaleClamp = 5.0;
  static constexpr double kLeakySlope = 0.1;

  FlowStack() = default;
  explicit FlowStack(FlowSpec spec, std::vector<FlowBlock> blocks);

  const FlowSpec& spec() const { return spec_; }
  std::size_t dim() const { return spec_.dim; }
  bool conditional() const { return spec_.conditional; }
  std::size_t condition_dim() const { return spec_.condition_dim; }
  std::size_t split() const { return (spec_.dim + 1) / 2; }
  const std::vector<FlowBlock>& blocks() const { return blocks_; }

  /// Trainable tensors in a fixed order (permutations excluded).
  std::vector<Tensor*> parameters();
  std::vector<const Tensor*> parameters() const;
  std::vector<std::string> parameter_names() const;
  std::size_t parameter_count() const;

  /// Puts every trainable tensor on the tape, as inputs or constants.
  std::vector<Var> bind(Graph& g, bool trainable) const;

  /// Batched z = f(eps[, rho]) with log|det df/deps| per row. `rho` may have
  /// one row, in which case it is shared by the batch.
  FlowVars forward(Graph& g, const std::vector<Var>& params, Var eps, std::optional<Var> rho = {}) const;
  /// Batched eps = f^{-1}(z[, rho]); logdet is log|det df^{-1}/dz| per row.
  FlowVars inverse(Graph& g, const std::vector<Var>& params, Var z, std::optional<Var> rho = {}) const;

  struct Result {
    Tensor z;
    Tensor logdet;
  };
  Result forward(const Tensor& eps, const Tensor* rho = nullptr) const;
  Result inverse(const Tensor& z, const Tensor* rho = nullptr) const;
  /// log N(f^{-1}(z)|0,I) + log|det df^{-1}/dz| per row.
  Tensor log_prob(const Tensor& z, const Tensor* rho = nullptr) const;

  Checkpoint to_checkpoint() const;
  static FlowStack from_checkpoint(const Checkpoint& ck);

 private:
  void check_inputs(const Var& x, const std::optional<Var>& rho) const;
  Var coupling_net(Graph& g, const std::vector<Var>& params, std::size_t block, Var x1,
                   const std::optional<Var>& rho, Var* s_out) const;

  FlowSpec spec_;
  std::vector<FlowBlock> blocks_;
};

/// Identity coupling (zero output layer), unit ActNorm, seeded permutations
/// and hidden weights.
FlowStack init_flow(std::size_t dim, std::size_t n_blocks, std::size_t hidden_width, bool conditional,
                    std::size_t condition_dim, std::uint64_t seed);
FlowStack init_flow(const FlowSpec& spec);

/// Replaces biases, the output layer and ActNorm with N(0, scale^2) draws,
/// giving a non-trivial invertible map for tests.
void randomize_parameters(FlowStack& flow, std::uint64_t seed, double scale);

/// Row-wise log N(x|0,I), rows x 1.
Var standard_normal_log_density(Var x);
Tensor standard_normal_log_density(const Tensor& x);

}  // namespace latentctl
