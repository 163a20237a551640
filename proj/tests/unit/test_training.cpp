#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "latentctl/errors.hpp"
#include "latentctl/evaluation.hpp"
#include "latentctl/moment.hpp"
#include "latentctl/random.hpp"
#include "latentctl/training.hpp"

using namespace latentctl;

namespace {

GeneratorPtr identity(std::size_t d) {
  return make_linear_gaussian(Tensor::identity(d), Tensor(std::vector<std::size_t>{d}, 0.0));
}

TrainConfig quick(std::size_t steps, std::uint64_t seed = 0) {
  TrainConfig c;
  c.steps = steps;
  c.batch = 128;
  c.seed = seed;
  c.optimizer.lr = 3e-3;
  return c;
}

// Returns NaN from its n-th call on.
class FailingEnergy final : public Energy {
 public:
  explicit FailingEnergy(int fail_at) : fail_at_(fail_at) {}
  Var evaluate(Graph& g, Var x) const override {
    if (++calls_ >= fail_at_) return g.constant(Tensor::zeros(x.rows(), 1)) + log(add_scalar(0.0 * sum_rows(x), -1));
    return 0.5 * sum_rows(square(x));
  }
  nlohmann::json describe() const override { return "failing"; }

 private:
  int fail_at_;
  mutable int calls_ = 0;
};

// Energy that grows without bound with every call.
class RampEnergy final : public Energy {
 public:
  Var evaluate(Graph&, Var x) const override { return add_scalar(0.5 * sum_rows(square(x)), 50.0 * ++calls_); }
  nlohmann::json describe() const override { return "ramp"; }

 private:
  mutable int calls_ = 0;
};

std::vector<double> totals(const TrainReport& r) {
  std::vector<double> t;
  for (const auto& s : r.steps) t.push_back(s.total);
  return t;
}

}  // namespace

TEST_CASE("zero energy keeps the flow at the prior") {
  TrainConfig c;
  c.steps = 200;
  const auto res = train_flow(*identity(2), CompositeEnergy(), init_flow(2, 4, 32, false, 0, 1), c);
  const LatentEBM prior{identity(2), std::make_shared<CompositeEnergy>(), {}};
  const auto grid = quadrature_grid(prior, {-7, -7}, {7, 7}, {300, 300});
  CHECK(kl_flow_to_target(res.flow, grid).kl < 0.01);
}

TEST_CASE("loss decomposition, determinism and trailing improvement") {
  const auto g = make_warped_gaussian(2, 3);
  const auto e = quadratic_energy(Tensor::vector({1.5, -0.5}));
  const FlowStack f = init_flow(2, 4, 32, false, 0, 2);
  const auto a = train_flow(*g, *e, f, quick(300, 5));
  const auto b = train_flow(*g, *e, f, quick(300, 5));
  CHECK(totals(a.report) == totals(b.report));
  CHECK(a.flow.to_checkpoint().to_bytes() == b.flow.to_checkpoint().to_bytes());
  double worst = 0.0;
  for (const auto& s : a.report.steps) worst = std::max(worst, std::abs(s.total - (s.jac + s.prior + s.energy)));
  CHECK(worst < 1e-9);
  CHECK(a.report.trailing_mean(300) < a.report.trailing_mean(1, 100));
  const auto c = train_flow(*g, *e, f, quick(300, 6));
  CHECK(totals(a.report) != totals(c.report));
  // Input flow is untouched.
  CHECK(f.to_checkpoint().to_bytes() == init_flow(2, 4, 32, false, 0, 2).to_checkpoint().to_bytes());
}

TEST_CASE("objective gradient matches central differences") {
  FlowStack f = init_flow(2, 2, 16, false, 0, 4);
  randomize_parameters(f, 7, 0.05);
  const auto g = make_warped_gaussian(2, 1);
  const auto fc = std::make_shared<FairClassifier>(default_mixture());
  CompositeEnergy e;
  e.add(1.0, std::make_shared<ClassifierEnergy>(fc, 2)).add(0.3, quadratic_energy(Tensor::vector({1.0, 1.0})));
  Rng rng = make_rng(8);
  const Tensor eps = standard_normal(rng, 16, 2);

  auto loss_at = [&](const FlowStack& flow) {
    Graph gr(GraphOptions{.record = false});
    return flow_objective(gr, *g, e, flow, flow.bind(gr, false), gr.constant(eps)).total.value().item();
  };
  Graph gr;
  const auto params = f.bind(gr, true);
  gr.backward(flow_objective(gr, *g, e, f, params, gr.constant(eps)).total);
  double num = 0.0, den = 0.0;
  const double h = 1e-5;
  auto ptrs = f.parameters();
  for (std::size_t i = 0; i < ptrs.size(); ++i) {
    const Tensor grad = gr.grad(params[i]);
    for (std::size_t k = 0; k < ptrs[i]->size(); ++k) {
      const double keep = (*ptrs[i])[k];
      (*ptrs[i])[k] = keep + h;
      const double up = loss_at(f);
      (*ptrs[i])[k] = keep - h;
      const double down = loss_at(f);
      (*ptrs[i])[k] = keep;
      const double fd = (up - down) / (2 * h);
      num += std::pow(grad[k] - fd, 2);
      den += grad[k] * grad[k];
    }
  }
  CHECK(std::sqrt(num / den) < 1e-5);
}

TEST_CASE("non-finite loss stops training with the last good flow") {
  const FlowStack f = init_flow(2, 2, 8, false, 0, 0);
  try {
    (void)train_flow(*identity(2), FailingEnergy(6), f, quick(20));
    FAIL("expected TrainingError");
  } catch (const TrainingError& e) {
    CHECK(e.step() == 5);
    for (const Tensor* p : e.last_good().parameters()) CHECK(p->all_finite());
    CHECK(std::string(e.what()).find("step 5") != std::string::npos);
  }
  TrainConfig c = quick(100);
  c.divergence_window = 10;
  CHECK_THROWS_AS(train_flow(*identity(2), RampEnergy(), f, c), TrainingError);
}

TEST_CASE("train config validation and strict parsing") {
  TrainConfig c;
  c.batch = 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.optimizer.lr = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.rho_lo = {1.0};
  c.rho_hi = {0.0};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  const TrainConfig back = TrainConfig::from_json(quick(10).to_json());
  CHECK(back.to_json() == quick(10).to_json());
  CHECK_THROWS_AS(TrainConfig::from_json({{"stpes", 10}}), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_json({{"steps", "ten"}}), ConfigError);
}

TEST_CASE("checkpoints are written at the configured interval") {
  const auto path = std::filesystem::temp_directory_path() / "latentctl_train_snapshot.bin";
  std::filesystem::remove(path);
  TrainConfig c = quick(10);
  c.checkpoint_every = 5;
  c.checkpoint_path = path.string();
  const auto res = train_flow(*identity(2), *quadratic_energy(Tensor::vector({1.0, 0.0})),
                              init_flow(2, 2, 8, false, 0, 0), c);
  const Checkpoint ck = Checkpoint::load(path.string());
  CHECK(ck.config["step"] == 10);
  CHECK(FlowStack::from_checkpoint(ck.extract("flow0")).to_checkpoint().to_bytes() ==
        res.flow.to_checkpoint().to_bytes());
  std::filesystem::remove(path);
}

TEST_CASE("point-mass condition prior reduces to train_flow") {
  EnergyFamily fam;
  fam.add_regressor(4.0, std::make_shared<IdentityModel>(2), Metric::Euclidean);
  fam.add_fixed(0.5, quadratic_energy(Tensor::vector({0.0, 1.0})));
  const FlowStack f = init_flow(2, 3, 16, true, 2, 3);
  TrainConfig c = quick(60, 9);
  c.rho_lo = c.rho_hi = c.rho0 = {0.4, -0.3};
  const auto cond = train_conditional_flow(*identity(2), fam, f, c);
  const auto plain = train_flow(*identity(2), *fam.at(Tensor::matrix({{0.4, -0.3}})), f, c);
  CHECK(totals(cond.report) == totals(plain.report));
}

TEST_CASE("ID energy with zero weight leaves the conditional trajectory unchanged") {
  EnergyFamily fam;
  fam.add_regressor(2.0, std::make_shared<IdentityModel>(2), Metric::Euclidean);
  const FlowStack f = init_flow(2, 3, 16, true, 2, 3);
  TrainConfig c = quick(60, 2);
  c.rho_lo = {-1, -1};
  c.rho_hi = {1, 1};
  c.rho0 = {0, 0};
  const auto emb = MlpModel::embedding(2, 16, 4, 3);
  const auto cond = train_conditional_flow(*identity(2), fam, f, c);
  const auto with_id = train_with_id_energy(*identity(2), fam, f, *emb, c);
  CHECK(totals(cond.report) == totals(with_id.report));
  c.lambda_id = 1.0;
  const auto active = train_with_id_energy(*identity(2), fam, f, *emb, c);
  CHECK(totals(active.report) != totals(cond.report));
  // At rho = rho0 the controlled sample is x0 itself.
  Rng rng = make_rng(1);
  const Tensor eps = standard_normal(rng, 8, 2);
  const Tensor rho0 = Tensor::matrix({{0.0, 0.0}});
  const Tensor x = active.flow.forward(eps, &rho0).z;
  CHECK(x.storage() == active.flow.forward(eps, &rho0).z.storage());
  CHECK_THROWS_AS(train_conditional_flow(*identity(2), fam, init_flow(2, 2, 8, false, 0, 0), c), DimensionError);
}

TEST_CASE("class-embedding flows: prior optimum and frozen reduction") {
  const auto g = make_class_conditional(2, 3, 2, 5);
  const FlowStack fz = init_flow(2, 3, 16, false, 0, 1), fy = init_flow(2, 3, 16, false, 0, 2);
  const auto zero = train_class_embedding_flow(*g, CompositeEnergy(), fz, fy, quick(1));
  const StepLoss& s0 = zero.report.steps[0];
  CHECK(s0.jac == 0.0);
  CHECK(s0.energy == 0.0);
  // Identity flows: the prior terms are the cross-entropies of the draws themselves.
  Rng eps_rng = make_rng(0, 0), xi_rng = make_rng(0, 2);
  const Tensor eps = standard_normal(eps_rng, 128, 2), xi = standard_normal(xi_rng, 128, 2);
  double pe = 0.0, px = 0.0;
  const Tensor le = standard_normal_log_density(eps), lx = standard_normal_log_density(xi);
  for (std::size_t r = 0; r < 128; ++r) {
    pe -= le[r] / 128;
    px -= lx[r] / 128;
  }
  const double log_sigma = std::log(g->embedding_std()[0]) + std::log(g->embedding_std()[1]);
  CHECK(std::abs(s0.prior - (pe + px + log_sigma)) < 1e-12);

  const Tensor y = sample_class_embedding(*g, fz, fy, 100000, 3).columns(2, 4);
  for (std::size_t j = 0; j < 2; ++j) {
    double m = 0.0, v = 0.0;
    for (std::size_t r = 0; r < y.rows(); ++r) m += y.at(r, j) / y.rows();
    for (std::size_t r = 0; r < y.rows(); ++r) v += std::pow(y.at(r, j) - m, 2) / y.rows();
    CHECK(std::abs(m - g->embedding_mean()[j]) < 0.02);
    CHECK(std::abs(std::sqrt(v) / g->embedding_std()[j] - 1.0) < 0.02);
  }

  // With M = 0 and h frozen, the f-part equals a plain run on z.
  const auto flat = std::make_shared<ClassConditionalGenerator>(Tensor::zeros(2, 2), g->embedding_table());
  const auto e = quadratic_energy(Tensor::vector({1.0, -1.0}));
  TrainConfig c = quick(100, 4);
  c.freeze_embedding = true;
  const auto joint = train_class_embedding_flow(*flat, *e, fz, fy, c);
  const auto plain = train_flow(*identity(2), *e, fz, c);
  double worst = 0.0;
  for (std::size_t i = 0; i < 100; ++i) {
    const StepLoss& a = joint.report.steps[i];
    const StepLoss& b = plain.report.steps[i];
    worst = std::max({worst, std::abs((a.jac - a.embed_jac) - b.jac), std::abs((a.prior - a.embed_prior) - b.prior),
                      std::abs(a.energy - b.energy)});
  }
  CHECK(worst < 1e-9);
  CHECK(joint.y_flow.to_checkpoint().to_bytes() == fy.to_checkpoint().to_bytes());
}

TEST_CASE("class-embedding flow concentrates on a target class") {
  // Orthogonal mixing keeps x-space and y-space nearest-center regions aligned.
  const auto base = make_class_conditional(2, 3, 2, 11);
  Rng qr = make_rng(3);
  Tensor m = random_orthogonal(2, qr);
  for (double& v : m.storage()) v *= 8.0;
  const ClassConditionalGenerator g(m, base->embedding_table());
  const Tensor& table = g.embedding_table();
  const auto clf = std::make_shared<NearestCenterClassifier>(matmul(table, m.transposed()), 0.5);
  const std::size_t target = 1;
  const ClassifierEnergy e(clf, target);
  const NearestCenterClassifier by_embedding(table, 1.0);

  // Rejection-sampling oracle on the joint EBM (envelope 1 since P(a|x) <= 1).
  Rng rng = make_rng(5);
  const std::size_t n = 200000;
  Tensor zy = standard_normal(rng, n, 4);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < 2; ++j)
      zy.at(r, 2 + j) = g.embedding_mean()[j] + g.embedding_std()[j] * zy.at(r, 2 + j);
  const Tensor energy = e(g(zy));
  const auto oracle_labels = argmax_rows(by_embedding(zy.columns(2, 4)));
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  double accepted = 0.0, oracle_hits = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    if (unif(rng) < std::exp(-energy[r])) {
      accepted += 1;
      oracle_hits += oracle_labels[r] == target;
    }
  }
  CHECK(oracle_hits / accepted >= 0.9);

  const auto res = train_class_embedding_flow(g, e, init_flow(2, 4, 32, false, 0, 1), init_flow(2, 4, 32, false, 0, 2),
                                              quick(1500, 1));
  const Tensor y = sample_class_embedding(g, res.z_flow, res.y_flow, 20000, 9).columns(2, 4);
  const auto labels = argmax_rows(by_embedding(y));
  double hit = 0.0;
  for (std::size_t l : labels) hit += l == target;
  CHECK(hit / labels.size() >= 0.9);
}

TEST_CASE("iterate_control composes stages and samples feed-forward") {
  const auto base = make_warped_gaussian(2, 1);
  const auto counting = std::make_shared<CountingEnergy>(quadratic_energy(Tensor::vector({1.0, 0.5})));
  ControlStage st;
  st.name = "only";
  st.energy = counting;
  st.flow = FlowSpec{.dim = 2, .n_blocks = 2, .hidden_width = 16, .seed = 3};
  st.train = quick(50, 2);
  const auto ctl = iterate_control(base, {st});
  const auto direct = train_flow(*base, *counting, init_flow(st.flow), st.train);
  const auto composed = compose_generator(base, direct.flow);
  Rng rng = make_rng(4);
  const Tensor eps = standard_normal(rng, 500, 2);
  counting->reset();
  CHECK((*ctl.generator)(eps).storage() == (*composed)(eps).storage());
  CHECK(counting->calls() == 0);
  CHECK(totals(ctl.stages[0].report) == totals(direct.report));

  ControlStage bad = st;
  bad.name = "broken";
  bad.energy = nullptr;
  CHECK_THROWS_AS(iterate_control(base, {st, bad}), ConfigError);
  const auto partial = iterate_control(base, {st, bad}, true);
  CHECK_FALSE(partial.complete);
  CHECK(partial.stages.size() == 1);
  CHECK(dynamic_cast<const ComposedGenerator&>(*partial.generator).depth() == 1);
  CHECK_THROWS_AS(iterate_control(base, {}), ConfigError);
}
