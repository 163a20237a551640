#include "latentctl/energy.hpp"

#include <cmath>

#include "latentctl/errors.hpp"
#include "latentctl/flow.hpp"

namespace latentctl {

namespace {

Var one_minus(Var v) { return add_scalar(neg(v), 1.0); }

void check_unit_rows(const Tensor& t, const char* what) {
  const std::size_t c = t.cols();
  for (std::size_t r = 0; r < t.rows(); ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += t[r * c + j] * t[r * c + j];
    if (std::abs(std::sqrt(s) - 1.0) > 1e-6) {
      throw DimensionError(std::string("angular metric requires unit-norm ") + what + " (row " + std::to_string(r) +
                           " has norm " + std::to_string(std::sqrt(s)) + ")");
    }
  }
}

Tensor as_row(const Tensor& t) { return t.rank() == 2 ? t : t.reshaped(1, t.size()); }

}  // namespace

Tensor Energy::operator()(const Tensor& x) const {
  Graph g(GraphOptions{.record = false});
  return evaluate(g, g.constant(as_row(x))).value();
}

// ---- classifier --------------------------------------------------------------

ClassifierEnergy::ClassifierEnergy(ModelPtr classifier, std::size_t target)
    : classifier_(std::move(classifier)), target_(target) {
  if (target_ >= classifier_->output_dim()) throw DimensionError("classifier target class out of range");
}

Var ClassifierEnergy::evaluate(Graph& g, Var x) const {
  const Var lp = slice_cols(classifier_->apply(g, x), target_, target_ + 1);
  const double floor = std::log(kProbFloor);
  std::uint64_t hits = 0;
  for (double v : lp.value().values())
    if (!(v > floor)) ++hits;
  if (hits) clamped_ += hits;
  return neg(clamp_min(lp, floor));
}

nlohmann::json ClassifierEnergy::describe() const {
  return {{"kind", "classifier"}, {"target", target_}, {"classifier", classifier_->describe()}};
}

// ---- regressor ---------------------------------------------------------------

Metric metric_from_string(const std::string& s) {
  if (s == "euclidean") return Metric::Euclidean;
  if (s == "angular") return Metric::Angular;
  throw ConfigError("unknown metric '" + s + "' (expected euclidean or angular)");
}

std::string to_string(Metric m) { return m == Metric::Euclidean ? "euclidean" : "angular"; }

Var regressor_distance(Graph&, Var fx, Var target, Metric metric) {
  if (fx.cols() != target.cols()) {
    throw DimensionError("regressor output has dimension " + std::to_string(fx.cols()) + " but target has " +
                         std::to_string(target.cols()));
  }
  if (metric == Metric::Euclidean) return sum_rows(square(fx - target));
  check_unit_rows(fx.value(), "regressor outputs");
  check_unit_rows(target.value(), "targets");
  const Var angle = scale(atan2(norm_rows(fx - target), norm_rows(fx + target)), 2.0);
  return square(angle);
}

RegressorEnergy::RegressorEnergy(ModelPtr regressor, Tensor target, Metric metric)
    : regressor_(std::move(regressor)), target_(as_row(target)), metric_(metric) {
  if (target_.cols() != regressor_->output_dim()) throw DimensionError("regressor target dimension mismatch");
  if (metric_ == Metric::Angular) check_unit_rows(target_, "targets");
}

Var RegressorEnergy::evaluate(Graph& g, Var x) const {
  return regressor_distance(g, regressor_->apply(g, x), g.constant(target_), metric_);
}

nlohmann::json RegressorEnergy::describe() const {
  return {{"kind", "regressor"}, {"metric", to_string(metric_)}, {"target", target_.storage()},
          {"regressor", regressor_->describe()}};
}

// ---- similarity --------------------------------------------------------------

SimilarityEnergy::SimilarityEnergy(ModelPtr embedding, Tensor reference)
    : embedding_(std::move(embedding)), reference_(as_row(reference)) {
  if (reference_.rows() != 1 || reference_.cols() != embedding_->input_dim()) {
    throw DimensionError("similarity reference must be a single input row");
  }
}

Var SimilarityEnergy::evaluate(Graph& g, Var x) const {
  const Var ref = embedding_->apply(g, g.constant(reference_));
  return one_minus(cosine_rows(embedding_->apply(g, x), ref));
}

nlohmann::json SimilarityEnergy::describe() const {
  return {{"kind", "similarity"}, {"reference", reference_.storage()}, {"embedding", embedding_->describe()}};
}

Var id_energy(Graph& g, const Model& embedding, Var x0, Var x) {
  return one_minus(cosine_rows(embedding.apply(g, x), embedding.apply(g, x0)));
}

// ---- signed distance ---------------------------------------------------------

SignedDistanceEnergy::SignedDistanceEnergy(std::size_t input_dim, std::vector<std::size_t> l1,
                                           std::vector<std::size_t> l2, std::vector<double> u, double s)
    : input_dim_(input_dim), l1_(std::move(l1)), l2_(std::move(l2)), u_(std::move(u)), s_(s) {
  if (l1_.empty() || l1_.size() != l2_.size() || u_.size() != l1_.size()) {
    throw DimensionError("signed distance: index groups and direction must have equal, non-zero length");
  }
  double n = 0.0;
  for (double v : u_) n += v * v;
  if (std::abs(std::sqrt(n) - 1.0) > 1e-9) throw DimensionError("signed distance direction must be a unit vector");
  projector_ = Tensor::zeros(input_dim_, 1);
  for (std::size_t j = 0; j < l1_.size(); ++j) {
    if (l1_[j] >= input_dim_ || l2_[j] >= input_dim_) {
      throw DimensionError("signed distance index out of range for dimension " + std::to_string(input_dim_));
    }
    projector_[l1_[j]] += u_[j];
    projector_[l2_[j]] -= u_[j];
  }
}

Var SignedDistanceEnergy::evaluate(Graph& g, Var x) const {
  if (x.cols() != input_dim_) throw DimensionError("signed distance input dimension mismatch");
  return abs(add_scalar(matmul(x, g.constant(projector_)), -s_));
}

nlohmann::json SignedDistanceEnergy::describe() const {
  return {{"kind", "signed-distance"}, {"l1", l1_}, {"l2", l2_}, {"u", u_}, {"s", s_}};
}

// ---- moment ------------------------------------------------------------------

MomentEnergy::MomentEnergy(Tensor beta, ModelPtr gamma) : beta_(Tensor({beta.size()}, beta.storage())), gamma_(std::move(gamma)) {
  if (beta_.size() != gamma_->output_dim()) {
    throw DimensionError("moment energy: beta has " + std::to_string(beta_.size()) + " entries but gamma outputs " +
                         std::to_string(gamma_->output_dim()));
  }
}

Var MomentEnergy::evaluate(Graph& g, Var x) const {
  return neg(matmul(gamma_->apply(g, x), g.constant(beta_.reshaped(beta_.size(), 1))));
}

nlohmann::json MomentEnergy::describe() const {
  return {{"kind", "moment"}, {"beta", beta_.storage()}, {"gamma", gamma_->describe()}};
}

// ---- composite ---------------------------------------------------------------

CompositeEnergy::CompositeEnergy(std::vector<std::pair<double, EnergyPtr>> terms) {
  for (auto& [l, e] : terms) add(l, std::move(e));
}

CompositeEnergy& CompositeEnergy::add(double lambda, EnergyPtr e) {
  if (!(lambda >= 0.0)) throw ConfigError("energy weights must be non-negative");
  if (!e) throw ConfigError("null energy term");
  terms_.emplace_back(lambda, std::move(e));
  return *this;
}

Var CompositeEnergy::evaluate(Graph& g, Var x) const {
  if (terms_.empty()) return g.constant(Tensor::zeros(x.rows(), 1));
  Var total = scale(terms_[0].second->evaluate(g, x), terms_[0].first);
  for (std::size_t i = 1; i < terms_.size(); ++i) total = total + scale(terms_[i].second->evaluate(g, x), terms_[i].first);
  return total;
}

nlohmann::json CompositeEnergy::describe() const {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& [l, e] : terms_) arr.push_back({{"lambda", l}, {"energy", e->describe()}});
  return {{"kind", "composite"}, {"terms", arr}};
}

CompositeEnergy CompositeEnergy::scaled(double c) const {
  CompositeEnergy out;
  for (const auto& [l, e] : terms_) out.add(l * c, e);
  return out;
}

std::shared_ptr<CompositeEnergy> quadratic_energy(const Tensor& target) {
  auto c = std::make_shared<CompositeEnergy>();
  c->add(0.5, std::make_shared<RegressorEnergy>(std::make_shared<IdentityModel>(target.size()), target,
                                                Metric::Euclidean));
  return c;
}

// ---- counting ----------------------------------------------------------------

Var CountingEnergy::evaluate(Graph& g, Var x) const {
  ++calls_;
  rows_ += x.rows();
  if (g.recording()) grad_rows_ += x.rows();
  return inner_->evaluate(g, x);
}

void CountingEnergy::reset() const {
  calls_ = 0;
  rows_ = 0;
  grad_rows_ = 0;
}

// ---- family ------------------------------------------------------------------

EnergyFamily& EnergyFamily::add_fixed(double lambda, EnergyPtr e) {
  if (!(lambda >= 0.0)) throw ConfigError("energy weights must be non-negative");
  terms_.push_back({lambda, std::move(e), nullptr, Metric::Euclidean});
  return *this;
}

EnergyFamily& EnergyFamily::add_regressor(double lambda, ModelPtr regressor, Metric metric) {
  if (!(lambda >= 0.0)) throw ConfigError("energy weights must be non-negative");
  if (condition_dim() != 0 && regressor->output_dim() != condition_dim()) {
    throw DimensionError("all conditional terms must share the condition dimension");
  }
  terms_.push_back({lambda, nullptr, std::move(regressor), metric});
  return *this;
}

std::size_t EnergyFamily::condition_dim() const {
  for (const Term& t : terms_)
    if (t.regressor) return t.regressor->output_dim();
  return 0;
}

Var EnergyFamily::evaluate(Graph& g, Var x, Var rho) const {
  if (terms_.empty()) return g.constant(Tensor::zeros(x.rows(), 1));
  auto term = [&](const Term& t) {
    return t.fixed ? t.fixed->evaluate(g, x) : regressor_distance(g, t.regressor->apply(g, x), rho, t.metric);
  };
  Var total = scale(term(terms_[0]), terms_[0].lambda);
  for (std::size_t i = 1; i < terms_.size(); ++i) total = total + scale(term(terms_[i]), terms_[i].lambda);
  return total;
}

std::shared_ptr<CompositeEnergy> EnergyFamily::at(const Tensor& rho) const {
  auto c = std::make_shared<CompositeEnergy>();
  for (const Term& t : terms_) {
    if (t.fixed) c->add(t.lambda, t.fixed);
    else c->add(t.lambda, std::make_shared<RegressorEnergy>(t.regressor, rho, t.metric));
  }
  return c;
}

nlohmann::json EnergyFamily::describe() const {
  nlohmann::json arr = nlohmann::json::array();
  for (const Term& t : terms_) {
    if (t.fixed) arr.push_back({{"lambda", t.lambda}, {"energy", t.fixed->describe()}});
    else
      arr.push_back({{"lambda", t.lambda},
                     {"energy", {{"kind", "regressor"}, {"metric", to_string(t.metric)}, {"target", "rho"},
                                 {"regressor", t.regressor->describe()}}}});
  }
  return {{"kind", "family"}, {"terms", arr}};
}

// ---- latent EBM --------------------------------------------------------------

Var LatentEBM::energy_of(Graph& g, Var z) const {
  std::optional<Var> rho;
  if (condition) rho = g.constant(as_row(*condition));
  const Var x = generator->apply(g, z, rho);
  if (!energy) return g.constant(Tensor::zeros(z.rows(), 1));
  return energy->evaluate(g, x);
}

Var LatentEBM::log_density(Graph& g, Var z) const {
  return standard_normal_log_density(z) - energy_of(g, z);
}

Tensor LatentEBM::energy_values(const Tensor& z, bool allow_infinite) const {
  Graph g(GraphOptions{.record = false, .check_finite = true, .allow_infinite = allow_infinite});
  return energy_of(g, g.constant(as_row(z))).value();
}

Tensor LatentEBM::log_density(const Tensor& z) const {
  Graph g(GraphOptions{.record = false});
  return log_density(g, g.constant(as_row(z))).value();
}

std::pair<Tensor, Tensor> LatentEBM::log_density_and_grad(const Tensor& z) const {
  Graph g;
  const Var zin = g.input(as_row(z));
  const Var ld = log_density(g, zin);
  g.backward(sum(ld));
  return {ld.value(), g.grad(zin)};
}

}  // namespace latentctl
