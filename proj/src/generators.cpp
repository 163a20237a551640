#include "latentctl/generators.hpp"

#include <cmath>

#include <Eigen/Dense>

#include "latentctl/errors.hpp"
#include "latentctl/random.hpp"

namespace latentctl {

namespace {

Eigen::MatrixXd to_eigen(const Tensor& t) {
  Eigen::MatrixXd m(t.rows(), t.cols());
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) m(i, j) = t.at(i, j);
  return m;
}

Tensor as_vector(const Tensor& t) { return Tensor({t.size()}, t.storage()); }

}  // namespace

Tensor Generator::operator()(const Tensor& z, const Tensor* rho) const {
  Graph g(GraphOptions{.record = false});
  std::optional<Var> r;
  if (rho) r = g.constant(rho->rank() == 2 ? *rho : rho->reshaped(1, rho->size()));
  return apply(g, g.constant(z.rank() == 2 ? z : z.reshaped(1, z.size())), r).value();
}

void Generator::check_latent(const Var& z, const std::optional<Var>& rho) const {
  if (z.cols() != latent_dim()) {
    throw DimensionError(kind() + " generator expects latent dimension " + std::to_string(latent_dim()) + ", got " +
                         std::to_string(z.cols()));
  }
  if (condition_dim() == 0 && rho) throw DimensionError(kind() + " generator takes no condition");
  if (condition_dim() > 0 && !rho) throw DimensionError(kind() + " generator requires a condition");
}

// ---- linear ------------------------------------------------------------------

LinearGaussianGenerator::LinearGaussianGenerator(Tensor a, Tensor b) : a_(std::move(a)), b_(as_vector(b)) {
  if (a_.rank() != 2 || b_.size() != a_.rows()) throw DimensionError("linear generator: A is D x d, b has length D");
  Eigen::FullPivLU<Eigen::MatrixXd> lu(to_eigen(a_));
  rank_deficient_ = static_cast<std::size_t>(lu.rank()) < a_.cols();
}

Var LinearGaussianGenerator::apply(Graph& g, Var z, std::optional<Var> rho) const {
  check_latent(z, rho);
  return affine(z, g.constant(a_), g.constant(b_));
}

Checkpoint LinearGaussianGenerator::to_checkpoint() const {
  Checkpoint ck;
  ck.kind = kind();
  ck.config = {{"latent_dim", latent_dim()}, {"output_dim", output_dim()}};
  ck.add("A", a_);
  ck.add("b", b_);
  return ck;
}

std::shared_ptr<LinearGaussianGenerator> make_linear_gaussian(Tensor a, Tensor b) {
  return std::make_shared<LinearGaussianGenerator>(std::move(a), std::move(b));
}

// ---- warped ------------------------------------------------------------------

WarpedGaussianGenerator::WarpedGaussianGenerator(Tensor w, Tensor c, double alpha)
    : w_(std::move(w)), c_(as_vector(c)), alpha_(alpha) {
  if (w_.rank() != 2 || w_.rows() != w_.cols() || c_.size() != w_.rows()) {
    throw DimensionError("warped generator: W must be square and c match it");
  }
}

Var WarpedGaussianGenerator::apply(Graph& g, Var z, std::optional<Var> rho) const {
  check_latent(z, rho);
  return z + alpha_ * tanh(affine(z, g.constant(w_), g.constant(c_)));
}

Checkpoint WarpedGaussianGenerator::to_checkpoint() const {
  Checkpoint ck;
  ck.kind = kind();
  ck.config = {{"dim", latent_dim()}, {"alpha", alpha_}};
  ck.add("W", w_);
  ck.add("c", c_);
  return ck;
}

std::shared_ptr<WarpedGaussianGenerator> make_warped_gaussian(std::size_t dim, std::uint64_t seed) {
  Rng rng = make_rng(seed, 0x57617270);
  Tensor w = standard_normal(rng, dim, dim);
  // Unit spectral norm: with alpha = 0.5 the map is a bi-Lipschitz bijection.
  const double sn = Eigen::JacobiSVD<Eigen::MatrixXd>(to_eigen(w)).singularValues()(0);
  for (double& v : w.values()) v /= sn;
  Tensor c = standard_normal(rng, 1, dim);
  for (double& v : c.values()) v *= 0.5;
  return std::make_shared<WarpedGaussianGenerator>(std::move(w), std::move(c), 0.5);
}

// ---- MLP ---------------------------------------------------------------------

Var MlpGenerator::apply(Graph& g, Var z, std::optional<Var> rho) const {
  check_latent(z, rho);
  return mlp_.apply(g, mlp_.bind(g, false), z);
}

Checkpoint MlpGenerator::to_checkpoint() const {
  Checkpoint ck;
  ck.kind = kind();
  ck.config = {{"layers", mlp_.weights.size()}, {"slope", mlp_.slope}};
  for (std::size_t l = 0; l < mlp_.weights.size(); ++l) {
    ck.add("w" + std::to_string(l), mlp_.weights[l]);
    ck.add("b" + std::to_string(l), mlp_.biases[l]);
  }
  return ck;
}

// ---- class-conditional -------------------------------------------------------

ClassConditionalGenerator::ClassConditionalGenerator(Tensor m, Tensor table) : m_(std::move(m)), table_(std::move(table)) {
  if (m_.rank() != 2 || table_.rank() != 2 || table_.cols() != m_.cols()) {
    throw DimensionError("class-conditional generator: M is D x e and the table K x e");
  }
  if (table_.rows() < 2) throw DimensionError("class-conditional generator needs at least two classes");
  const std::size_t k = table_.rows(), e = table_.cols();
  mean_ = Tensor({e}, 0.0);
  std_ = Tensor({e}, 0.0);
  for (std::size_t j = 0; j < e; ++j) {
    double s = 0.0;
    for (std::size_t r = 0; r < k; ++r) s += table_.at(r, j);
    mean_[j] = s / static_cast<double>(k);
    double v = 0.0;
    for (std::size_t r = 0; r < k; ++r) v += (table_.at(r, j) - mean_[j]) * (table_.at(r, j) - mean_[j]);
    std_[j] = std::sqrt(v / static_cast<double>(k));
  }
}

Var ClassConditionalGenerator::apply(Graph& g, Var zy, std::optional<Var> rho) const {
  check_latent(zy, rho);
  return apply(g, slice_cols(zy, 0, z_dim()), slice_cols(zy, z_dim(), latent_dim()));
}

Var ClassConditionalGenerator::apply(Graph& g, Var z, Var y) const {
  if (z.cols() != z_dim() || y.cols() != embed_dim()) throw DimensionError("class-conditional input dimensions");
  return z + matmul(y, g.constant(m_.transposed()));
}

Checkpoint ClassConditionalGenerator::to_checkpoint() const {
  Checkpoint ck;
  ck.kind = kind();
  ck.config = {{"z_dim", z_dim()}, {"embed_dim", embed_dim()}, {"classes", classes()}};
  ck.add("M", m_);
  ck.add("table", table_);
  return ck;
}

std::shared_ptr<ClassConditionalGenerator> make_class_conditional(std::size_t z_dim, std::size_t n_classes,
                                                                  std::size_t embed_dim, std::uint64_t seed) {
  if (n_classes < 2) throw DimensionError("class-conditional generator needs at least two classes");
  Rng rng = make_rng(seed, 0x436c6173);
  Tensor m = standard_normal(rng, z_dim, embed_dim);
  Tensor table = standard_normal(rng, n_classes, embed_dim);
  return std::make_shared<ClassConditionalGenerator>(std::move(m), std::move(table));
}

// ---- composed ----------------------------------------------------------------

ComposedGenerator::ComposedGenerator(GeneratorPtr inner, std::shared_ptr<const FlowStack> flow)
    : inner_(std::move(inner)), flow_(std::move(flow)) {
  if (!inner_ || !flow_) throw DimensionError("composition needs a generator and a flow");
  if (flow_->dim() != inner_->latent_dim()) {
    throw DimensionError("flow dimension " + std::to_string(flow_->dim()) + " does not match generator latent " +
                         std::to_string(inner_->latent_dim()));
  }
  if (inner_->condition_dim() > 0 && flow_->conditional() && inner_->condition_dim() != flow_->condition_dim()) {
    throw DimensionError("nested conditions must share their dimension");
  }
  if (inner_->condition_dim() > 0 && !flow_->conditional()) {
    throw DimensionError("a conditional generator can only be composed with a conditional flow");
  }
}

Var ComposedGenerator::apply(Graph& g, Var eps, std::optional<Var> rho) const {
  check_latent(eps, rho);
  const auto params = flow_->bind(g, false);
  const Var z = flow_->forward(g, params, eps, flow_->conditional() ? rho : std::nullopt).z;
  return inner_->apply(g, z, inner_->condition_dim() > 0 ? rho : std::nullopt);
}

Checkpoint ComposedGenerator::to_checkpoint() const {
  Checkpoint ck;
  ck.kind = kind();
  ck.nest("inner", inner_->to_checkpoint());
  ck.nest("flow", flow_->to_checkpoint());
  return ck;
}

std::size_t ComposedGenerator::depth() const {
  const auto* c = dynamic_cast<const ComposedGenerator*>(inner_.get());
  return 1 + (c ? c->depth() : 0);
}

GeneratorPtr compose_generator(GeneratorPtr g, FlowStack f) {
  return std::make_shared<ComposedGenerator>(std::move(g), std::make_shared<const FlowStack>(std::move(f)));
}

GeneratorPtr compose_generator(GeneratorPtr g, std::shared_ptr<const FlowStack> f) {
  return std::make_shared<ComposedGenerator>(std::move(g), std::move(f));
}

// ---- loading -----------------------------------------------------------------

GeneratorPtr generator_from_checkpoint(const Checkpoint& ck) {
  try {
    if (ck.kind == "linear-gaussian") return make_linear_gaussian(ck.get("A"), ck.get("b"));
    if (ck.kind == "warped-gaussian") {
      return std::make_shared<WarpedGaussianGenerator>(ck.get("W"), ck.get("c"), ck.config.at("alpha").get<double>());
    }
    if (ck.kind == "mixture-gan") {
      Mlp m;
      m.slope = ck.config.at("slope").get<double>();
      const auto layers = ck.config.at("layers").get<std::size_t>();
      for (std::size_t l = 0; l < layers; ++l) {
        m.weights.push_back(ck.get("w" + std::to_string(l)));
        m.biases.push_back(ck.get("b" + std::to_string(l)));
      }
      return std::make_shared<MlpGenerator>(std::move(m));
    }
    if (ck.kind == "class-conditional") return std::make_shared<ClassConditionalGenerator>(ck.get("M"), ck.get("table"));
    if (ck.kind == "composed") {
      return compose_generator(generator_from_checkpoint(ck.extract("inner")),
                               FlowStack::from_checkpoint(ck.extract("flow")));
    }
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("generator checkpoint header: ") + e.what());
  }
  throw CheckpointError("unknown generator kind '" + ck.kind + "'");
}

}  // namespace latentctl
