#include "latentctl/optim.hpp"

#include <cmath>

#include "latentctl/errors.hpp"

namespace latentctl {

Optimizer::Optimizer(OptimizerConfig cfg, std::vector<Tensor*> params) : cfg_(std::move(cfg)), params_(std::move(params)) {
  if (cfg_.kind != "adam" && cfg_.kind != "sgd") throw ConfigError("unknown optimizer '" + cfg_.kind + "'");
  if (!(cfg_.lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (cfg_.kind == "adam") {
    for (const Tensor* p : params_) {
      m_.emplace_back(p->shape(), 0.0);
      v_.emplace_back(p->shape(), 0.0);
    }
  }
}

void Optimizer::step(const std::vector<Tensor>& grads) {
  if (grads.size() != params_.size()) throw DimensionError("optimizer got the wrong number of gradients");
  ++t_;
  if (cfg_.kind == "sgd") {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      double* p = params_[i]->data();
      const double* g = grads[i].data();
      for (std::size_t k = 0; k < params_[i]->size(); ++k) p[k] -= cfg_.lr * g[k];
    }
    return;
  }
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    double* p = params_[i]->data();
    double* m = m_[i].data();
    double* v = v_[i].data();
    const double* g = grads[i].data();
    for (std::size_t k = 0; k < params_[i]->size(); ++k) {
      m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * g[k];
      v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * g[k] * g[k];
      p[k] -= cfg_.lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + cfg_.eps);
    }
  }
}

double clip_global_norm(std::vector<Tensor>& grads, double max_norm) {
  double sq = 0.0;
  for (const Tensor& g : grads)
    for (double v : g.values()) sq += v * v;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (Tensor& g : grads)
      for (double& v : g.values()) v *= s;
  }
  return norm;
}

}  // namespace latentctl
