#include "latentctl/flow.hpp"

#include <cmath>
#include <numbers>

#include "latentctl/errors.hpp"
#include "latentctl/random.hpp"

namespace latentctl {

namespace {

constexpr std::size_t kPerBlock = 6;
const char* const kNames[kPerBlock] = {"w1", "b1", "w2", "b2", "log_scale", "bias"};

template <class Block>
auto* field(Block& b, std::size_t k) {
  decltype(&b.w1) f[kPerBlock] = {&b.w1, &b.b1, &b.w2, &b.b2, &b.log_scale, &b.bias};
  return f[k];
}

}  // namespace

FlowStack::FlowStack(FlowSpec spec, std::vector<FlowBlock> blocks) : spec_(spec), blocks_(std::move(blocks)) {
  if (spec_.dim < 2) throw DimensionError("flow dimension must be at least 2");
  if (blocks_.size() != spec_.n_blocks) throw DimensionError("flow block count does not match spec");
  if (spec_.conditional != (spec_.condition_dim > 0)) {
    throw DimensionError("conditional flows need condition_dim > 0 and vice versa");
  }
}

std::vector<Tensor*> FlowStack::parameters() {
  std::vector<Tensor*> out;
  for (auto& b : blocks_)
    for (std::size_t k = 0; k < kPerBlock; ++k) out.push_back(field(b, k));
  return out;
}

std::vector<const Tensor*> FlowStack::parameters() const {
  std::vector<const Tensor*> out;
  for (const auto& b : blocks_)
    for (std::size_t k = 0; k < kPerBlock; ++k) out.push_back(field(b, k));
  return out;
}

std::vector<std::string> FlowStack::parameter_names() const {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < blocks_.size(); ++i)
    for (std::size_t k = 0; k < kPerBlock; ++k) out.push_back("block" + std::to_string(i) + "/" + kNames[k]);
  return out;
}

std::size_t FlowStack::parameter_count() const {
  std::size_t n = 0;
  for (const Tensor* t : parameters()) n += t->size();
  return n;
}

std::vector<Var> FlowStack::bind(Graph& g, bool trainable) const {
  std::vector<Var> out;
  for (const Tensor* t : parameters()) out.push_back(trainable ? g.input(*t) : g.constant(*t));
  return out;
}

void FlowStack::check_inputs(const Var& x, const std::optional<Var>& rho) const {
  if (x.cols() != spec_.dim) {
    throw DimensionError("flow expects inputs of dimension " + std::to_string(spec_.dim) + ", got " +
                         std::to_string(x.cols()));
  }
  if (spec_.conditional && !rho) throw DimensionError("conditional flow requires a condition");
  if (!spec_.conditional && rho) throw DimensionError("unconditional flow given a condition");
  if (rho) {
    if (rho->cols() != spec_.condition_dim) {
      throw DimensionError("condition has dimension " + std::to_string(rho->cols()) + ", expected " +
                           std::to_string(spec_.condition_dim));
    }
    if (rho->rows() != 1 && rho->rows() != x.rows()) throw DimensionError("condition batch size mismatch");
  }
}

Var FlowStack::coupling_net(Graph& g, const std::vector<Var>& p, std::size_t block, Var x1,
                            const std::optional<Var>& rho, Var* s_out) const {
  (void)g;
  const std::size_t base = block * kPerBlock;
  Var in = x1;
  if (rho) {
    Var r = rho->rows() == x1.rows() ? *rho : repeat_rows(*rho, x1.rows());
    in = concat_cols({x1, r});
  }
  const Var h = leaky_relu(affine(in, p[base + 0], p[base + 1]), kLeakySlope);
  const Var out = affine(h, p[base + 2], p[base + 3]);
  const std::size_t m = spec_.dim - split();
  *s_out = kScaleClamp * tanh(slice_cols(out, 0, m) * (1.0 / kScaleClamp));
  return slice_cols(out, m, 2 * m);
}

FlowVars FlowStack::forward(Graph& g, const std::vector<Var>& p, Var eps, std::optional<Var> rho) const {
  check_inputs(eps, rho);
  const std::size_t h = split(), d = spec_.dim;
  Var x = eps;
  Var logdet = g.constant(Tensor::zeros(eps.rows(), 1));
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    x = matmul(x, g.constant(blocks_[i].permutation.transposed()));
    const Var x1 = slice_cols(x, 0, h);
    const Var x2 = slice_cols(x, h, d);
    Var s;
    const Var t = coupling_net(g, p, i, x1, rho, &s);
    const Var y2 = x2 * exp(s) + t;
    logdet = logdet + sum_rows(s);
    x = concat_cols({x1, y2});
    const Var ls = p[i * kPerBlock + 4];
    x = x * exp(ls) + p[i * kPerBlock + 5];
    logdet = logdet + sum(ls);
  }
  return {x, logdet};
}

FlowVars FlowStack::inverse(Graph& g, const std::vector<Var>& p, Var z, std::optional<Var> rho) const {
  check_inputs(z, rho);
  const std::size_t h = split(), d = spec_.dim;
  Var y = z;
  Var logdet = g.constant(Tensor::zeros(z.rows(), 1));
  for (std::size_t i = blocks_.size(); i-- > 0;) {
    const Var ls = p[i * kPerBlock + 4];
    y = (y - p[i * kPerBlock + 5]) * exp(-ls);
    logdet = logdet - sum(ls);
    const Var y1 = slice_cols(y, 0, h);
    const Var y2 = slice_cols(y, h, d);
    Var s;
    const Var t = coupling_net(g, p, i, y1, rho, &s);
    const Var x2 = (y2 - t) * exp(-s);
    logdet = logdet - sum_rows(s);
    y = matmul(concat_cols({y1, x2}), g.constant(blocks_[i].permutation));
  }
  return {y, logdet};
}

FlowStack::Result FlowStack::forward(const Tensor& eps, const Tensor* rho) const {
  Graph g(GraphOptions{.record = false});
  const auto p = bind(g, false);
  std::optional<Var> r;
  if (rho) r = g.constant(rho->rank() == 2 ? *rho : rho->reshaped(1, rho->size()));
  const FlowVars out = forward(g, p, g.constant(eps.rank() == 2 ? eps : eps.reshaped(1, eps.size())), r);
  return {out.z.value(), out.logdet.value()};
}

FlowStack::Result FlowStack::inverse(const Tensor& z, const Tensor* rho) const {
  Graph g(GraphOptions{.record = false});
  const auto p = bind(g, false);
  std::optional<Var> r;
  if (rho) r = g.constant(rho->rank() == 2 ? *rho : rho->reshaped(1, rho->size()));
  const FlowVars out = inverse(g, p, g.constant(z.rank() == 2 ? z : z.reshaped(1, z.size())), r);
  return {out.z.value(), out.logdet.value()};
}

Tensor FlowStack::log_prob(const Tensor& z, const Tensor* rho) const {
  const Result inv = inverse(z, rho);
  Tensor lp = standard_normal_log_density(inv.z);
  for (std::size_t i = 0; i < lp.size(); ++i) lp[i] += inv.logdet[i];
  return lp;
}

Checkpoint FlowStack::to_checkpoint() const {
  Checkpoint ck;
  ck.kind = "flow";
  ck.config = {{"dim", spec_.dim},
               {"n_blocks", spec_.n_blocks},
               {"hidden_width", spec_.hidden_width},
               {"conditional", spec_.conditional},
               {"condition_dim", spec_.condition_dim},
               {"seed", spec_.seed}};
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const FlowBlock& b = blocks_[i];
    ck.add("block" + std::to_string(i) + "/permutation", b.permutation);
    for (std::size_t k = 0; k < kPerBlock; ++k) ck.add("block" + std::to_string(i) + "/" + kNames[k], *field(b, k));
  }
  return ck;
}

FlowStack FlowStack::from_checkpoint(const Checkpoint& ck) {
  if (ck.kind != "flow") throw CheckpointError("expected a flow checkpoint, found '" + ck.kind + "'");
  FlowSpec spec;
  try {
    spec.dim = ck.config.at("dim").get<std::size_t>();
    spec.n_blocks = ck.config.at("n_blocks").get<std::size_t>();
    spec.hidden_width = ck.config.at("hidden_width").get<std::size_t>();
    spec.conditional = ck.config.at("conditional").get<bool>();
    spec.condition_dim = ck.config.at("condition_dim").get<std::size_t>();
    spec.seed = ck.config.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("flow checkpoint header: ") + e.what());
  }
  std::vector<FlowBlock> blocks(spec.n_blocks);
  for (std::size_t i = 0; i < spec.n_blocks; ++i) {
    blocks[i].permutation = ck.get("block" + std::to_string(i) + "/permutation");
    for (std::size_t k = 0; k < kPerBlock; ++k)
      *field(blocks[i], k) = ck.get("block" + std::to_string(i) + "/" + kNames[k]);
  }
  return FlowStack(spec, std::move(blocks));
}

FlowStack init_flow(const FlowSpec& spec) {
  if (spec.dim < 2) throw DimensionError("flow dimension must be at least 2 (coupling needs a split)");
  if (spec.n_blocks < 1) throw DimensionError("flow needs at least one block");
  if (spec.hidden_width < 1) throw DimensionError("hidden width must be positive");
  if (spec.conditional != (spec.condition_dim > 0)) {
    throw DimensionError("conditional flows need condition_dim > 0 and vice versa");
  }
  Rng rng = make_rng(spec.seed, 0x466c6f77);
  const std::size_t d = spec.dim, h = (d + 1) / 2, m = d - h, H = spec.hidden_width;
  const std::size_t fan_in = h + spec.condition_dim;
  std::vector<FlowBlock> blocks(spec.n_blocks);
  for (auto& b : blocks) {
    b.permutation = random_orthogonal(d, rng);
    b.w1 = standard_normal(rng, H, fan_in);
    const double sc = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (double& v : b.w1.values()) v *= sc;
    b.b1 = Tensor({H}, 0.0);
    b.w2 = Tensor::zeros(2 * m, H);
    b.b2 = Tensor({2 * m}, 0.0);
    b.log_scale = Tensor({d}, 0.0);
    b.bias = Tensor({d}, 0.0);
  }
  return FlowStack(spec, std::move(blocks));
}

FlowStack init_flow(std::size_t dim, std::size_t n_blocks, std::size_t hidden_width, bool conditional,
                    std::size_t condition_dim, std::uint64_t seed) {
  return init_flow(FlowSpec{dim, n_blocks, hidden_width, conditional, condition_dim, seed});
}

void randomize_parameters(FlowStack& flow, std::uint64_t seed, double scale) {
  Rng rng = make_rng(seed, 0x52616e64);
  std::normal_distribution<double> n01(0.0, 1.0);
  const auto params = flow.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (i % kPerBlock == 0) continue;  // hidden weights keep their seeded init
    for (double& v : params[i]->values()) v = scale * n01(rng);
  }
}

Var standard_normal_log_density(Var x) {
  const double c = -0.5 * static_cast<double>(x.cols()) * std::log(2.0 * std::numbers::pi);
  return add_scalar(scale(sum_rows(square(x)), -0.5), c);
}

Tensor standard_normal_log_density(const Tensor& x) {
  const std::size_t R = x.rows(), C = x.cols();
  const double c = -0.5 * static_cast<double>(C) * std::log(2.0 * std::numbers::pi);
  Tensor out = Tensor::zeros(R, 1);
  for (std::size_t r = 0; r < R; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < C; ++j) s += x.at(r, j) * x.at(r, j);
    out[r] = -0.5 * s + c;
  }
  return out;
}

}  // namespace latentctl
