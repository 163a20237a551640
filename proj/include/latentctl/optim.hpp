#pragma once

#include <string>
#include <vector>

#include "latentctl/tensor.hpp"

namespace latentctl {

struct OptimizerConfig {
  std::string kind = "adam";  // "adam" or "sgd"
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First-order optimizer updating the referenced tensors in place.
class Optimizer {
 public:
  Optimizer(OptimizerConfig cfg, std::vector<Tensor*> params);
  void step(const std::vector<Tensor>& grads);
  std::size_t steps() const { return t_; }
  void set_lr(double lr) { cfg_.lr = lr; }
  const OptimizerConfig& config() const { return cfg_; }

 private:
  OptimizerConfig cfg_;
  std::vector<Tensor*> params_;
  std::vector<Tensor> m_, v_;
  std::size_t t_ = 0;
};

/// Scales grads so their joint L2 norm is at most max_norm; returns the norm before clipping.
double clip_global_norm(std::vector<Tensor>& grads, double max_norm);

}  // namespace latentctl
