#include "latentctl/training.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>

#include "latentctl/random.hpp"

namespace latentctl {

namespace {

constexpr std::uint64_t kEpsStream = 0;
constexpr std::uint64_t kRhoStream = 1;
constexpr std::uint64_t kXiStream = 2;

struct Parts {
  Var jac, prior, energy;
  std::optional<Var> embed_jac, embed_prior;
};

struct Slot {
  FlowStack* flow;
  bool trainable;
};

using Builder = std::function<Parts(Graph&, const std::vector<std::vector<Var>>&)>;

TrainReport run_loop(std::vector<Slot> slots, const Builder& build, const TrainConfig& cfg) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<Tensor*> params;
  for (const Slot& s : slots)
    if (s.trainable)
      for (Tensor* p : s.flow->parameters()) params.push_back(p);
  Optimizer opt(cfg.optimizer, params);

  TrainReport report;
  report.seed = cfg.seed;
  report.steps.reserve(cfg.steps);
  double initial = 0.0;
  std::size_t high_streak = 0;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    StepLoss sl;
    std::vector<Tensor> grads;
    try {
      Graph g;
      std::vector<std::vector<Var>> bound;
      for (const Slot& s : slots) bound.push_back(s.flow->bind(g, s.trainable));
      const Parts p = build(g, bound);
      const Var total = p.jac + p.prior + p.energy;
      sl.jac = p.jac.value().item();
      sl.prior = p.prior.value().item();
      sl.energy = p.energy.value().item();
      sl.total = total.value().item();
      if (p.embed_jac) sl.embed_jac = p.embed_jac->value().item();
      if (p.embed_prior) sl.embed_prior = p.embed_prior->value().item();
      g.backward(total);
      for (std::size_t i = 0; i < slots.size(); ++i)
        if (slots[i].trainable)
          for (const Var& v : bound[i]) grads.push_back(g.grad(v));
    } catch (const NumericalError& e) {
      throw TrainingError("training stopped at step " + std::to_string(step) + ": " + e.what(), *slots[0].flow,
                          step);
    }
    sl.grad_norm = clip_global_norm(grads, cfg.clip_norm);
    if (cfg.lr_final != 1.0) {
      const double c = 0.5 * (1.0 + std::cos(M_PI * static_cast<double>(step) / static_cast<double>(cfg.steps)));
      opt.set_lr(cfg.optimizer.lr * (cfg.lr_final + (1.0 - cfg.lr_final) * c));
    }
    opt.step(grads);
    report.steps.push_back(sl);

    if (step == 0) initial = sl.total;
    high_streak = sl.total > cfg.divergence_factor * std::max(std::abs(initial), 1.0) ? high_streak + 1 : 0;
    if (high_streak >= cfg.divergence_window) {
      throw TrainingError("training diverged at step " + std::to_string(step) + ": loss " +
                              std::to_string(sl.total) + " exceeded " + std::to_string(cfg.divergence_factor) +
                              "x the initial loss " + std::to_string(initial) + " for " +
                              std::to_string(high_streak) + " steps",
                          *slots[0].flow, step);
    }
    if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0) {
      Checkpoint ck;
      ck.kind = "training-snapshot";
      ck.config = {{"step", step + 1}, {"seed", cfg.seed}};
      for (std::size_t i = 0; i < slots.size(); ++i) ck.nest("flow" + std::to_string(i), slots[i].flow->to_checkpoint());
      ck.save(cfg.checkpoint_path);
    }
  }
  report.final_total = report.trailing_mean(report.steps.size());
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

Var shared_row(Graph& g, const std::vector<double>& v) { return g.constant(Tensor::matrix(1, v.size(), v)); }

void check_generator(const Generator& gen, const FlowStack& flow) {
  if (gen.latent_dim() != flow.dim()) {
    throw DimensionError("flow dimension " + std::to_string(flow.dim()) + " does not match generator latent " +
                         std::to_string(gen.latent_dim()));
  }
}

std::optional<Var> generator_condition(const Generator& gen, const std::optional<Var>& rho) {
  if (gen.condition_dim() == 0) return std::nullopt;
  return rho;
}

void check_condition_prior(const FlowStack& flow, const TrainConfig& cfg) {
  if (!flow.conditional()) throw DimensionError("conditional training needs a conditional flow");
  const std::size_t c = flow.condition_dim();
  if (cfg.rho_lo.size() != c || cfg.rho_hi.size() != c) {
    throw ConfigError("condition prior needs " + std::to_string(c) + " bounds per side");
  }
}

// Shared body of the conditional objectives; a null embedding drops the ID term.
TrainResult conditional_impl(const Generator& gen, const EnergyFamily& family, const FlowStack& flow,
                             const Model* embedding, const TrainConfig& cfg) {
  check_generator(gen, flow);
  check_condition_prior(flow, cfg);
  if (family.condition_dim() != 0 && family.condition_dim() != flow.condition_dim()) {
    throw DimensionError("energy family condition size does not match the flow");
  }
  if (embedding && cfg.rho0.size() != flow.condition_dim()) throw ConfigError("rho0 has the wrong size");
  FlowStack out = flow;
  Rng eps_rng = make_rng(cfg.seed, kEpsStream);
  Rng rho_rng = make_rng(cfg.seed, kRhoStream);
  const Builder build = [&](Graph& g, const std::vector<std::vector<Var>>& p) {
    const Var eps = g.constant(standard_normal(eps_rng, cfg.batch, out.dim()));
    const Var rho = g.constant(uniform_box(rho_rng, cfg.batch, cfg.rho_lo, cfg.rho_hi));
    const FlowVars fv = out.forward(g, p[0], eps, rho);
    const Var x = gen.apply(g, fv.z, generator_condition(gen, rho));
    Var energy = mean(family.evaluate(g, x, rho));
    if (embedding) {
      const Var rho0 = shared_row(g, cfg.rho0);
      const FlowVars f0 = out.forward(g, p[0], eps, rho0);
      const Var x0 = gen.apply(g, f0.z, generator_condition(gen, rho0));
      energy = energy + cfg.lambda_id * mean(id_energy(g, *embedding, x0, x));
    }
    return Parts{-mean(fv.logdet), -mean(standard_normal_log_density(fv.z)), energy, {}, {}};
  };
  TrainReport report = run_loop({{&out, true}}, build, cfg);
  return {std::move(out), std::move(report)};
}

}  // namespace

// ---- config -----------------------------------------------------------------

void TrainConfig::validate() const {
  if (batch < 2) throw ConfigError("train.batch must be at least 2");
  if (!(optimizer.lr > 0.0)) throw ConfigError("train.lr must be positive");
  if (optimizer.kind != "adam" && optimizer.kind != "sgd") throw ConfigError("train.optimizer must be adam or sgd");
  if (rho_lo.size() != rho_hi.size()) throw ConfigError("condition prior bounds differ in length");
  for (std::size_t i = 0; i < rho_lo.size(); ++i) {
    if (!(rho_lo[i] <= rho_hi[i])) throw ConfigError("condition prior needs lo <= hi in every dimension");
  }
  if (!(lr_final > 0.0 && lr_final <= 1.0)) throw ConfigError("train.lr_final must be in (0, 1]");
  if (!(clip_norm > 0.0)) throw ConfigError("train.clip_norm must be positive");
  if (checkpoint_every > 0 && checkpoint_path.empty()) throw ConfigError("checkpoint_every needs checkpoint_path");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"batch", batch},
          {"steps", steps},
          {"optimizer", optimizer.kind},
          {"lr", optimizer.lr},
          {"lr_final", lr_final},
          {"beta1", optimizer.beta1},
          {"beta2", optimizer.beta2},
          {"eps", optimizer.eps},
          {"seed", seed},
          {"rho_lo", rho_lo},
          {"rho_hi", rho_hi},
          {"rho0", rho0},
          {"lambda_id", lambda_id},
          {"clip_norm", clip_norm},
          {"divergence_factor", divergence_factor},
          {"divergence_window", divergence_window},
          {"checkpoint_every", checkpoint_every},
          {"checkpoint_path", checkpoint_path},
          {"freeze_embedding", freeze_embedding}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  if (!j.is_object()) throw ConfigError("train config must be an object");
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "batch") c.batch = v.get<std::size_t>();
      else if (key == "steps") c.steps = v.get<std::size_t>();
      else if (key == "optimizer") c.optimizer.kind = v.get<std::string>();
      else if (key == "lr") c.optimizer.lr = v.get<double>();
      else if (key == "lr_final") c.lr_final = v.get<double>();
      else if (key == "beta1") c.optimizer.beta1 = v.get<double>();
      else if (key == "beta2") c.optimizer.beta2 = v.get<double>();
      else if (key == "eps") c.optimizer.eps = v.get<double>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "rho_lo") c.rho_lo = v.get<std::vector<double>>();
      else if (key == "rho_hi") c.rho_hi = v.get<std::vector<double>>();
      else if (key == "rho0") c.rho0 = v.get<std::vector<double>>();
      else if (key == "lambda_id") c.lambda_id = v.get<double>();
      else if (key == "clip_norm") c.clip_norm = v.get<double>();
      else if (key == "divergence_factor") c.divergence_factor = v.get<double>();
      else if (key == "divergence_window") c.divergence_window = v.get<std::size_t>();
      else if (key == "checkpoint_every") c.checkpoint_every = v.get<std::size_t>();
      else if (key == "checkpoint_path") c.checkpoint_path = v.get<std::string>();
      else if (key == "freeze_embedding") c.freeze_embedding = v.get<bool>();
      else throw ConfigError("unknown train key '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("train." + key + ": " + e.what());
    }
  }
  c.validate();
  return c;
}

// ---- report -----------------------------------------------------------------

double TrainReport::trailing_mean(std::size_t end, std::size_t window) const {
  end = std::min(end, steps.size());
  const std::size_t begin = end > window ? end - window : 0;
  if (begin == end) return 0.0;
  double s = 0.0;
  for (std::size_t i = begin; i < end; ++i) s += steps[i].total;
  return s / static_cast<double>(end - begin);
}

nlohmann::json TrainReport::to_json() const {
  nlohmann::json j = {{"steps", steps.size()}, {"final_total", final_total}, {"seed", seed},
                      {"wall_seconds", wall_seconds}};
  if (!steps.empty()) {
    const StepLoss& last = steps.back();
    j["last"] = {{"jac", last.jac}, {"prior", last.prior}, {"energy", last.energy}, {"total", last.total}};
    j["first_total"] = steps.front().total;
  }
  return j;
}

void TrainReport::write_csv(const std::string& path) const {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << "step,jac,prior,energy,total,embed_jac,embed_prior,grad_norm\n" << std::setprecision(17);
  for (std::size_t i = 0; i < steps.size(); ++i) {
    const StepLoss& s = steps[i];
    os << i << ',' << s.jac << ',' << s.prior << ',' << s.energy << ',' << s.total << ',' << s.embed_jac << ','
       << s.embed_prior << ',' << s.grad_norm << '\n';
  }
}

// ---- objectives ---------------------------------------------------------------

FlowLoss flow_objective(Graph& g, const Generator& gen, const Energy& energy, const FlowStack& flow,
                        const std::vector<Var>& params, Var eps, std::optional<Var> rho) {
  const FlowVars fv = flow.forward(g, params, eps, flow.conditional() ? rho : std::nullopt);
  const Var x = gen.apply(g, fv.z, generator_condition(gen, rho));
  FlowLoss l{-mean(fv.logdet), -mean(standard_normal_log_density(fv.z)), mean(energy.evaluate(g, x)), {}};
  l.total = l.jac + l.prior + l.energy;
  return l;
}

TrainResult train_flow(const Generator& gen, const Energy& energy, const FlowStack& flow, const TrainConfig& cfg) {
  check_generator(gen, flow);
  const bool conditioned = flow.conditional() || gen.condition_dim() > 0;
  if (conditioned && cfg.rho0.size() != std::max(flow.condition_dim(), gen.condition_dim())) {
    throw ConfigError("a conditional flow or generator needs rho0 as its fixed condition");
  }
  FlowStack out = flow;
  Rng eps_rng = make_rng(cfg.seed, kEpsStream);
  const Builder build = [&](Graph& g, const std::vector<std::vector<Var>>& p) {
    const Var eps = g.constant(standard_normal(eps_rng, cfg.batch, out.dim()));
    std::optional<Var> rho;
    if (conditioned) rho = shared_row(g, cfg.rho0);
    const FlowLoss l = flow_objective(g, gen, energy, out, p[0], eps, rho);
    return Parts{l.jac, l.prior, l.energy, {}, {}};
  };
  TrainReport report = run_loop({{&out, true}}, build, cfg);
  return {std::move(out), std::move(report)};
}

TrainResult train_conditional_flow(const Generator& gen, const EnergyFamily& family, const FlowStack& flow,
                                   const TrainConfig& cfg) {
  return conditional_impl(gen, family, flow, nullptr, cfg);
}

TrainResult train_with_id_energy(const Generator& gen, const EnergyFamily& family, const FlowStack& flow,
                                 const Model& embedding, const TrainConfig& cfg) {
  if (embedding.input_dim() != gen.output_dim()) throw DimensionError("ID embedding input must match G's output");
  return conditional_impl(gen, family, flow, &embedding, cfg);
}

EmbeddingTrainResult train_class_embedding_flow(const ClassConditionalGenerator& gen, const Energy& energy,
                                                const FlowStack& z_flow, const FlowStack& y_flow,
                                                const TrainConfig& cfg) {
  if (z_flow.dim() != gen.z_dim() || y_flow.dim() != gen.embed_dim()) {
    throw DimensionError("flows must match the generator's latent and embedding sizes");
  }
  if (z_flow.conditional() || y_flow.conditional()) throw DimensionError("class-embedding flows are unconditional");
  const Tensor& mu = gen.embedding_mean();
  const Tensor& sigma = gen.embedding_std();
  double log_sigma_sum = 0.0;
  for (double s : sigma.values()) {
    if (!(s > 0.0)) throw NumericalError("embedding table has a constant column; sigma_y must be positive");
    log_sigma_sum += std::log(s);
  }
  FlowStack f = z_flow, h = y_flow;
  Rng eps_rng = make_rng(cfg.seed, kEpsStream);
  Rng xi_rng = make_rng(cfg.seed, kXiStream);
  const Builder build = [&](Graph& g, const std::vector<std::vector<Var>>& p) {
    const Var eps = g.constant(standard_normal(eps_rng, cfg.batch, f.dim()));
    const Var xi = g.constant(standard_normal(xi_rng, cfg.batch, h.dim()));
    const FlowVars fz = f.forward(g, p[0], eps);
    const FlowVars hy = h.forward(g, p[1], xi);
    const Var y = g.constant(mu) + g.constant(sigma) * hy.z;
    const Var x = gen.apply(g, fz.z, y);
    const Var embed_jac = -mean(hy.logdet);
    // -log N(y | mu, sigma^2) = -log N(h(xi) | 0, I) + sum log sigma
    const Var embed_prior = add_scalar(-mean(standard_normal_log_density(hy.z)), log_sigma_sum);
    const Var jac = -mean(fz.logdet) + embed_jac;
    const Var prior = -mean(standard_normal_log_density(fz.z)) + embed_prior;
    return Parts{jac, prior, mean(energy.evaluate(g, x)), embed_jac, embed_prior};
  };
  TrainReport report = run_loop({{&f, true}, {&h, !cfg.freeze_embedding}}, build, cfg);
  return {std::move(f), std::move(h), std::move(report)};
}

Tensor sample_class_embedding(const ClassConditionalGenerator& gen, const FlowStack& z_flow, const FlowStack& y_flow,
                              std::size_t n, std::uint64_t seed) {
  Rng eps_rng = make_rng(seed, kEpsStream);
  Rng xi_rng = make_rng(seed, kXiStream);
  const Tensor z = z_flow.forward(standard_normal(eps_rng, n, z_flow.dim())).z;
  const Tensor h = y_flow.forward(standard_normal(xi_rng, n, y_flow.dim())).z;
  const std::size_t dz = z.cols(), dy = h.cols();
  Tensor out = Tensor::zeros(n, dz + dy);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t j = 0; j < dz; ++j) out.at(r, j) = z.at(r, j);
    for (std::size_t j = 0; j < dy; ++j)
      out.at(r, dz + j) = gen.embedding_mean()[j] + gen.embedding_std()[j] * h.at(r, j);
  }
  return out;
}

}  // namespace latentctl
