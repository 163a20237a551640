#include "latentctl/models.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

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

Tensor from_eigen(const Eigen::MatrixXd& m) {
  Tensor t = Tensor::zeros(m.rows(), m.cols());
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) t.at(i, j) = m(i, j);
  return t;
}

void check_input(const Model& m, const Var& x) {
  if (x.cols() != m.input_dim()) {
    throw DimensionError("model expects inputs of dimension " + std::to_string(m.input_dim()) + ", got " +
                         std::to_string(x.cols()));
  }
}

}  // namespace

Tensor Model::operator()(const Tensor& x) const {
  Graph g(GraphOptions{.record = false});
  return apply(g, g.constant(x.rank() == 2 ? x : x.reshaped(1, x.size()))).value();
}

// ---- Mlp -------------------------------------------------------------------

Mlp Mlp::init(const std::vector<std::size_t>& sizes, std::uint64_t seed, double slope, double output_scale) {
  if (sizes.size() < 2) throw DimensionError("an MLP needs at least input and output sizes");
  Rng rng = make_rng(seed, 0x4d6c70);
  Mlp m;
  m.slope = slope;
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
    Tensor w = standard_normal(rng, sizes[l + 1], sizes[l]);
    double sc = std::sqrt(2.0 / static_cast<double>(sizes[l]));
    if (l + 2 == sizes.size()) sc *= output_scale;
    for (double& v : w.values()) v *= sc;
    m.weights.push_back(std::move(w));
    m.biases.push_back(Tensor({sizes[l + 1]}, 0.0));
  }
  return m;
}

std::vector<Tensor*> Mlp::parameters() {
  std::vector<Tensor*> out;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    out.push_back(&weights[l]);
    out.push_back(&biases[l]);
  }
  return out;
}

std::vector<Var> Mlp::bind(Graph& g, bool trainable) const {
  std::vector<Var> out;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    out.push_back(trainable ? g.input(weights[l]) : g.constant(weights[l]));
    out.push_back(trainable ? g.input(biases[l]) : g.constant(biases[l]));
  }
  return out;
}

Var Mlp::apply(Graph&, const std::vector<Var>& p, Var x) const {
  Var h = x;
  const std::size_t n = weights.size();
  for (std::size_t l = 0; l < n; ++l) {
    h = affine(h, p[2 * l], p[2 * l + 1]);
    if (l + 1 < n) h = leaky_relu(h, slope);
  }
  return h;
}

// ---- simple models -----------------------------------------------------------

LinearModel::LinearModel(Tensor a, Tensor b) : a_(std::move(a)), b_(std::move(b)) {
  if (a_.rank() != 2 || b_.size() != a_.rows()) throw DimensionError("linear model: A must be D x d and b length D");
}

Var LinearModel::apply(Graph& g, Var x) const {
  check_input(*this, x);
  return affine(x, g.constant(a_), g.constant(b_));
}

nlohmann::json LinearModel::describe() const {
  return {{"kind", "linear"}, {"A", a_.storage()}, {"rows", a_.rows()}, {"b", b_.storage()}};
}

SliceModel::SliceModel(std::size_t input_dim, std::size_t begin, std::size_t end)
    : in_(input_dim), begin_(begin), end_(end) {
  if (begin >= end || end > input_dim) throw DimensionError("slice model range out of bounds");
}

nlohmann::json SliceModel::describe() const {
  return {{"kind", "slice"}, {"input_dim", in_}, {"begin", begin_}, {"end", end_}};
}

std::shared_ptr<MlpModel> MlpModel::embedding(std::size_t input_dim, std::size_t hidden, std::size_t output_dim,
                                              std::uint64_t seed) {
  Mlp m = Mlp::init({input_dim, hidden, output_dim}, seed, 0.2);
  // Nonzero biases keep the embedding away from the origin.
  Rng rng = make_rng(seed, 0x62696173);
  for (Tensor& b : m.biases)
    for (double& v : b.values()) v = std::normal_distribution<double>(0.0, 0.5)(rng);
  return std::make_shared<MlpModel>(std::move(m));
}

Var MlpModel::apply(Graph& g, Var x) const {
  check_input(*this, x);
  return mlp_.apply(g, mlp_.bind(g, false), x);
}

nlohmann::json MlpModel::describe() const {
  std::vector<std::size_t> sizes{mlp_.input_dim()};
  for (const auto& w : mlp_.weights) sizes.push_back(w.rows());
  return {{"kind", "mlp"}, {"sizes", sizes}, {"slope", mlp_.slope}};
}

SigmoidModel::SigmoidModel(std::size_t dim, ModelPtr inner) : dim_(dim), inner_(std::move(inner)) {
  if (inner_ && inner_->output_dim() != dim_) throw DimensionError("sigmoid model dimension mismatch");
}

Var SigmoidModel::apply(Graph& g, Var x) const {
  check_input(*this, x);
  return sigmoid(inner_ ? inner_->apply(g, x) : x);
}

nlohmann::json SigmoidModel::describe() const {
  nlohmann::json j = {{"kind", "sigmoid"}, {"dim", dim_}};
  if (inner_) j["inner"] = inner_->describe();
  return j;
}

ChainModel::ChainModel(ModelPtr outer, ModelPtr inner) : outer_(std::move(outer)), inner_(std::move(inner)) {
  if (outer_->input_dim() != inner_->output_dim()) throw DimensionError("chain model dimension mismatch");
}

nlohmann::json ChainModel::describe() const {
  return {{"kind", "chain"}, {"outer", outer_->describe()}, {"inner", inner_->describe()}};
}

// ---- mixtures and classifiers ------------------------------------------------

void MixtureSpec::validate() const {
  const std::size_t k = weights.size();
  if (k == 0) throw ConfigError("mixture needs at least one component");
  if (means.rank() != 2 || means.rows() != k) throw ConfigError("mixture means must be K x D");
  if (covariances.size() != k) throw ConfigError("mixture needs one covariance per component");
  double total = 0.0;
  for (double w : weights) {
    if (!(w > 0.0)) throw ConfigError("mixture weights must be positive");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("mixture weights must sum to 1");
  const std::size_t d = means.cols();
  for (const Tensor& c : covariances) {
    if (c.rows() != d || c.cols() != d) throw ConfigError("covariance must be D x D");
    const Eigen::MatrixXd m = to_eigen(c);
    if ((m - m.transpose()).cwiseAbs().maxCoeff() > 1e-12) throw ConfigError("covariance must be symmetric");
    if (Eigen::LLT<Eigen::MatrixXd>(m).info() != Eigen::Success) {
      throw ConfigError("covariance must be positive definite");
    }
  }
}

nlohmann::json MixtureSpec::to_json() const {
  nlohmann::json comps = nlohmann::json::array();
  for (std::size_t k = 0; k < weights.size(); ++k) {
    std::vector<double> mean(means.data() + k * dim(), means.data() + (k + 1) * dim());
    std::vector<std::vector<double>> cov;
    for (std::size_t i = 0; i < dim(); ++i) {
      cov.emplace_back();
      for (std::size_t j = 0; j < dim(); ++j) cov.back().push_back(covariances[k].at(i, j));
    }
    comps.push_back({{"weight", weights[k]}, {"mean", mean}, {"covariance", cov}});
  }
  return {{"components", comps}};
}

MixtureSpec MixtureSpec::from_json(const nlohmann::json& j) {
  MixtureSpec s;
  try {
    const auto& comps = j.at("components");
    if (!comps.is_array() || comps.empty()) throw ConfigError("mixture.components must be a non-empty list");
    const std::size_t d = comps.at(0).at("mean").size();
    s.means = Tensor::zeros(comps.size(), d);
    for (std::size_t k = 0; k < comps.size(); ++k) {
      const auto& c = comps[k];
      for (const auto& [key, _] : c.items())
        if (key != "weight" && key != "mean" && key != "covariance")
          throw ConfigError("unknown mixture component key '" + key + "'");
      s.weights.push_back(c.at("weight").get<double>());
      const auto mean = c.at("mean").get<std::vector<double>>();
      if (mean.size() != d) throw ConfigError("mixture means differ in dimension");
      for (std::size_t i = 0; i < d; ++i) s.means.at(k, i) = mean[i];
      const auto cov = c.at("covariance").get<std::vector<std::vector<double>>>();
      Tensor t = Tensor::zeros(d, d);
      if (cov.size() != d) throw ConfigError("covariance must be D x D");
      for (std::size_t i = 0; i < d; ++i) {
        if (cov[i].size() != d) throw ConfigError("covariance must be D x D");
        for (std::size_t jj = 0; jj < d; ++jj) t.at(i, jj) = cov[i][jj];
      }
      s.covariances.push_back(t);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("mixture spec: ") + e.what());
  }
  s.validate();
  return s;
}

MixtureSpec default_mixture() {
  MixtureSpec s;
  s.weights = {0.85, 0.05, 0.05, 0.05};
  s.means = Tensor::matrix({{2.0, 2.0}, {-2.0, 2.0}, {-2.0, -2.0}, {2.0, -2.0}});
  Tensor cov = Tensor::identity(2);
  for (double& v : cov.values()) v *= 0.15;
  s.covariances.assign(4, cov);
  return s;
}

FairClassifier::FairClassifier(const MixtureSpec& spec) : dim_(spec.dim()), means_(spec.means) {
  spec.validate();
  for (const Tensor& c : spec.covariances) {
    Eigen::LLT<Eigen::MatrixXd> llt(to_eigen(c));
    const Eigen::MatrixXd l = llt.matrixL();
    const Eigen::MatrixXd linv = l.inverse();
    chol_inv_.push_back(from_eigen(linv));
    double logdet = 0.0;
    for (Eigen::Index i = 0; i < l.rows(); ++i) logdet += 2.0 * std::log(l(i, i));
    log_norm_.push_back(-0.5 * (logdet + static_cast<double>(dim_) * std::log(2.0 * std::numbers::pi)));
  }
}

Var FairClassifier::apply(Graph& g, Var x) const {
  check_input(*this, x);
  std::vector<Var> cols;
  for (std::size_t k = 0; k < chol_inv_.size(); ++k) {
    const Var diff = x - g.constant(means_.row(k));
    const Var u = matmul(diff, g.constant(chol_inv_[k].transposed()));
    cols.push_back(add_scalar(scale(sum_rows(square(u)), -0.5), log_norm_[k]));
  }
  return log_softmax(concat_cols(cols));
}

nlohmann::json FairClassifier::describe() const {
  return {{"kind", "fair"}, {"components", chol_inv_.size()}, {"dim", dim_}};
}

NearestCenterClassifier::NearestCenterClassifier(Tensor centers, double temperature)
    : centers_(std::move(centers)), temperature_(temperature) {
  if (centers_.rank() != 2 || centers_.rows() < 2) throw DimensionError("need at least two class centers");
  if (!(temperature_ > 0.0)) throw ConfigError("classifier temperature must be positive");
}

Var NearestCenterClassifier::apply(Graph& g, Var x) const {
  check_input(*this, x);
  std::vector<Var> cols;
  for (std::size_t k = 0; k < centers_.rows(); ++k)
    cols.push_back(scale(sum_rows(square(x - g.constant(centers_.row(k)))), -1.0 / temperature_));
  return log_softmax(concat_cols(cols));
}

nlohmann::json NearestCenterClassifier::describe() const {
  return {{"kind", "nearest-center"}, {"classes", centers_.rows()}, {"temperature", temperature_}};
}

FixedProbabilityClassifier::FixedProbabilityClassifier(std::size_t input_dim, std::vector<double> probs)
    : in_(input_dim) {
  double total = 0.0;
  for (double p : probs) {
    if (p < 0.0) throw ConfigError("class probabilities must be non-negative");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("class probabilities must sum to 1");
  log_probs_ = Tensor::zeros(1, probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i)
    log_probs_[i] = std::log(std::max(probs[i], std::numeric_limits<double>::denorm_min()));
}

Var FixedProbabilityClassifier::apply(Graph& g, Var x) const {
  check_input(*this, x);
  // Zero-weight dependence on x keeps the output on the tape of x.
  return g.constant(log_probs_) + scale(sum_rows(x), 0.0);
}

nlohmann::json FixedProbabilityClassifier::describe() const {
  return {{"kind", "fixed"}, {"log_probs", log_probs_.storage()}};
}

MergedClassifier::MergedClassifier(ModelPtr classifier, std::vector<std::vector<std::size_t>> groups)
    : inner_(std::move(classifier)), groups_(std::move(groups)) {
  if (groups_.empty()) throw ConfigError("merged classifier needs at least one group");
  for (const auto& grp : groups_) {
    if (grp.empty()) throw ConfigError("empty class group");
    for (std::size_t c : grp)
      if (c >= inner_->output_dim()) throw DimensionError("class index out of range in group");
  }
}

Var MergedClassifier::apply(Graph& g, Var x) const {
  const Var lp = inner_->apply(g, x);
  std::vector<Var> cols;
  for (const auto& grp : groups_) {
    if (grp.size() == 1) {
      cols.push_back(slice_cols(lp, grp[0], grp[0] + 1));
      continue;
    }
    std::vector<Var> members;
    for (std::size_t c : grp) members.push_back(slice_cols(lp, c, c + 1));
    cols.push_back(logsumexp(concat_cols(members)));
  }
  return cols.size() == 1 ? cols[0] : concat_cols(cols);
}

nlohmann::json MergedClassifier::describe() const {
  return {{"kind", "merged"}, {"groups", groups_}, {"classifier", inner_->describe()}};
}

Var CountingModel::apply(Graph& g, Var x) const {
  rows_ += x.rows();
  return inner_->apply(g, x);
}

std::vector<std::size_t> argmax_rows(const Tensor& t) {
  std::vector<std::size_t> out(t.rows());
  const std::size_t c = t.cols();
  for (std::size_t r = 0; r < t.rows(); ++r) {
    const double* row = t.data() + r * c;
    out[r] = static_cast<std::size_t>(std::max_element(row, row + c) - row);
  }
  return out;
}

}  // namespace latentctl
