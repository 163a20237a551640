#include "latentctl/scenarios.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "latentctl/checkpoint.hpp"
#include "latentctl/config.hpp"
#include "latentctl/errors.hpp"
#include "latentctl/evaluation.hpp"
#include "latentctl/io.hpp"
#include "latentctl/mixture_gan.hpp"
#include "latentctl/moment.hpp"
#include "latentctl/samplers.hpp"
#include "latentctl/training.hpp"

namespace latentctl {

using nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string at(const std::string& dir, const std::string& file) { return (std::filesystem::path(dir) / file).string(); }

template <class T>
T seeded(const json& root, const json& section) {
  json j = section;
  j["seed"] = section_seed(root, section);
  return T::from_json(j);
}

FlowSpec flow_spec(const json& root, const json& section, std::size_t dim, std::size_t cdim) {
  return FlowSpec{dim, section.at("n_blocks").get<std::size_t>(), section.at("hidden_width").get<std::size_t>(),
                  cdim > 0, cdim, section_seed(root, section)};
}

json flow_defaults(std::uint64_t seed_offset) {
  return {{"n_blocks", 8}, {"hidden_width", 64}, {"seed", seed_offset}};
}

json train_defaults(std::size_t steps) {
  TrainConfig t;
  t.steps = steps;
  t.lr_final = 0.01;
  json j = t.to_json();
  j["seed"] = nullptr;
  return j;
}

json constant_lr(json train) {
  train["lr_final"] = 1.0;
  return train;
}

struct Moments {
  std::vector<double> mean;
  std::vector<std::vector<double>> cov;
};

Moments sample_moments(const Tensor& x) {
  const std::size_t n = x.rows(), d = x.cols();
  Moments m{std::vector<double>(d, 0.0), std::vector<std::vector<double>>(d, std::vector<double>(d, 0.0))};
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t i = 0; i < d; ++i) m.mean[i] += x.at(r, i);
  for (double& v : m.mean) v /= static_cast<double>(n);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) m.cov[i][j] += (x.at(r, i) - m.mean[i]) * (x.at(r, j) - m.mean[j]);
  for (auto& row : m.cov)
    for (double& v : row) v /= static_cast<double>(n - 1);
  return m;
}

double linf(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// Self-normalized weights exp(-E(G(eps))) over prior draws, summed per argmax label and
/// averaged for the soft outputs of `classifier`.
struct Reweighted {
  std::vector<double> labels;
  std::vector<double> soft;
  double effective_sample_size = 0.0;
};

Reweighted snis_labels(const Generator& g, const Energy& energy, const Model& classifier, const Tensor& eps) {
  const Tensor x = g(eps);
  const Tensor e = energy(x);
  const Tensor logp = classifier(x);
  const std::size_t n = x.rows(), k = logp.cols();
  double emin = INFINITY;
  for (double v : e.values()) emin = std::min(emin, v);
  std::vector<double> w(n);
  double z = 0.0, z2 = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    w[r] = std::exp(-(e.at(r, 0) - emin));
    z += w[r];
    z2 += w[r] * w[r];
  }
  Reweighted out{std::vector<double>(k, 0.0), std::vector<double>(k, 0.0), z * z / z2};
  const auto lab = argmax_rows(logp);
  for (std::size_t r = 0; r < n; ++r) {
    out.labels[lab[r]] += w[r] / z;
    for (std::size_t c = 0; c < k; ++c) out.soft[c] += w[r] / z * std::exp(logp.at(r, c));
  }
  return out;
}

/// Component masses of the flow samples reweighted by u(z) / q(z), q the flow density.
std::vector<double> flow_reweighted_labels(const Generator& g, const Energy& energy, const FlowStack& flow,
                                           const Model& classifier, const Tensor& eps) {
  const FlowStack::Result f = flow.forward(eps);
  const Tensor x = g(f.z);
  const Tensor e = energy(x);
  const Tensor lq = standard_normal_log_density(eps), lz = standard_normal_log_density(f.z);
  std::vector<double> lw(x.rows());
  double top = -INFINITY;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    lw[r] = lz[r] - e.at(r, 0) - (lq[r] - f.logdet[r]);
    top = std::max(top, lw[r]);
  }
  const auto lab = argmax_rows(classifier(x));
  std::vector<double> out(classifier.output_dim(), 0.0);
  double z = 0.0;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const double w = std::exp(lw[r] - top);
    out[lab[r]] += w;
    z += w;
  }
  for (double& v : out) v /= z;
  return out;
}

std::vector<double> uniform_ref(std::size_t k) { return std::vector<double>(k, 1.0 / static_cast<double>(k)); }

GeneratorPtr gan_for(const json& c, const MixtureSpec& mix, const std::string& out, json& metrics) {
  const std::string ck = c.at("gan_checkpoint").get<std::string>();
  if (!ck.empty()) {
    if (!std::filesystem::exists(ck)) throw ConfigError("gan_checkpoint '" + ck + "' does not exist");
    metrics["gan"]["source"] = "checkpoint";
    return generator_from_checkpoint(Checkpoint::load(ck));
  }
  const auto t0 = Clock::now();
  const GanResult gan = train_mixture_gan(mix, seeded<GanConfig>(c, c.at("gan")));
  gan.generator->to_checkpoint().save(at(out, "gan.ckpt"));
  metrics["gan"]["source"] = "trained";
  metrics["gan"]["coverage"] = gan.report.coverage;
  metrics["gan"]["final_d_loss"] = gan.report.d_loss.back();
  metrics["gan"]["final_g_loss"] = gan.report.g_loss.back();
  metrics["timing"]["gan_seconds"] = seconds_since(t0);
  return gan.generator;
}

void save_run(const std::string& out, const std::string& name, const TrainResult& r) {
  r.flow.to_checkpoint().save(at(out, name + "_flow.ckpt"));
  r.report.write_csv(at(out, name + "_trace.csv"));
}

json train_summary(const TrainReport& r) {
  return {{"final_total", r.final_total}, {"steps", r.steps.size()}, {"seed", r.seed}};
}

// ---- gaussian-oracle ----------------------------------------------------------

json gaussian_oracle_defaults() {
  return {{"target", {2.0, 0.0}},
          {"flow", flow_defaults(1)},
          {"train", train_defaults(5000)},
          {"samples", 100000},
          {"langevin", {{"n_steps", 200}, {"step_size", 0.05}, {"seed", nullptr}, {"metropolis", false}, {"chunk", 4096}}},
          {"rejection", [] {
             json r = RejectionConfig{}.to_json();
             r["seed"] = nullptr;
             return r;
           }()},
          {"grid", {{"lo", {-5.0, -6.0}}, {"hi", {7.0, 6.0}}, {"resolution", {256, 256}}}},
          {"tv_bins", 50}};
}

ScenarioResult gaussian_oracle(const json& c, const std::string& out) {
  ScenarioResult res;
  json& m = res.metrics;
  const std::uint64_t seed = c.at("seed").get<std::uint64_t>();
  const auto target = c.at("target").get<std::vector<double>>();
  if (target.size() != 2) throw ConfigError("gaussian-oracle target must be 2-D");
  auto g = make_linear_gaussian(Tensor::identity(2), Tensor::vector({0.0, 0.0}));
  const auto energy = quadratic_energy(Tensor::vector(target));
  const LatentEBM ebm{g, energy, {}};

  auto t0 = Clock::now();
  const TrainResult tr =
      train_flow(*g, *energy, init_flow(flow_spec(c, c.at("flow"), 2, 0)), seeded<TrainConfig>(c, c.at("train")));
  m["timing"]["train_seconds"] = seconds_since(t0);
  save_run(out, "oracle", tr);
  m["train"] = train_summary(tr.report);

  const json& gs = c.at("grid");
  const DensityGrid grid = quadrature_grid(ebm, gs.at("lo").get<std::vector<double>>(), gs.at("hi").get<std::vector<double>>(),
                                           gs.at("resolution").get<std::vector<std::size_t>>());
  grid.write_csv(at(out, "target_grid.csv"));
  const KlResult kl = kl_flow_to_target(tr.flow, grid);
  m["kl"] = kl.kl;
  m["kl_flow_mass"] = kl.flow_mass;

  const std::size_t n = c.at("samples").get<std::size_t>();
  Rng erng = make_rng(seed, 10);
  const Tensor xf = (*g)(tr.flow.forward(standard_normal(erng, n, 2)).z);
  const Moments mo = sample_moments(xf);
  const std::vector<double> mean_ref{target[0] / 2.0, target[1] / 2.0};
  double frob = 0.0;
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      const double d = mo.cov[i][j] - (i == j ? 0.5 : 0.0);
      frob += d * d;
    }
  m["mean"] = mo.mean;
  m["mean_reference"] = mean_ref;
  m["mean_error"] = linf(mo.mean, mean_ref);
  m["cov"] = mo.cov;
  m["cov_error_frobenius"] = std::sqrt(frob);

  t0 = Clock::now();
  const LangevinResult lr = langevin_sample(ebm, seeded<LangevinConfig>(c, c.at("langevin")), n);
  m["timing"]["langevin_seconds"] = seconds_since(t0);
  const Tensor xl = (*g)(lr.samples);
  m["langevin"] = {{"gradient_evaluations", lr.gradient_evaluations}, {"restarts", lr.restarts}};

  t0 = Clock::now();
  const RejectionResult rr = rejection_sample(ebm, seeded<RejectionConfig>(c, c.at("rejection")), n);
  m["timing"]["rejection_seconds"] = seconds_since(t0);
  const Tensor xr = (*g)(rr.samples);
  m["rejection"] = {{"acceptance_rate", rr.acceptance_rate}, {"envelope", rr.envelope}, {"proposals", rr.proposals}};

  const std::size_t bins = c.at("tv_bins").get<std::size_t>();
  m["tv"] = {{"flow_langevin", tv_distance_2d(xf, xl, bins)},
             {"flow_rejection", tv_distance_2d(xf, xr, bins)},
             {"langevin_rejection", tv_distance_2d(xl, xr, bins)}};
  m["samples"] = n;
  write_samples_csv(at(out, "samples_flow.csv"), xf);
  write_samples_csv(at(out, "samples_langevin.csv"), xl);
  write_samples_csv(at(out, "samples_rejection.csv"), xr);
  return res;
}

// ---- appendix-a ----------------------------------------------------------------

json moment_defaults() {
  json j = MomentConfig{}.to_json();
  j["seed"] = nullptr;
  return j;
}

json appendix_a_defaults() {
  json gan = GanConfig{}.to_json();
  gan["seed"] = nullptr;
  return {{"mixture", default_mixture().to_json()},
          {"gan", gan},
          {"gan_checkpoint", ""},
          {"target_component", 2},
          {"control", {{"flow", flow_defaults(1)}, {"train", train_defaults(3000)}}},
          {"debias", {{"flow", flow_defaults(2)}, {"train", constant_lr(train_defaults(2000))}, {"moment", moment_defaults()}}},
          {"samples", 100000},
          {"histogram", {{"lo", {-4.0, -4.0}}, {"hi", {4.0, 4.0}}, {"bins", 80}}},
          {"latent_grid", {{"lo", {-6.0, -6.0}}, {"hi", {6.0, 6.0}}, {"resolution", {200, 200}}}}};
}

ScenarioResult appendix_a(const json& c, const std::string& out) {
  ScenarioResult res;
  json& m = res.metrics;
  const std::uint64_t seed = c.at("seed").get<std::uint64_t>();
  const MixtureSpec mix = mixture_from_config(c);
  const std::size_t k = mix.components();
  const std::size_t target = c.at("target_component").get<std::size_t>();
  if (target >= k) throw ConfigError("target_component out of range");
  const GeneratorPtr gan = gan_for(c, mix, out, m);
  if (gan->output_dim() != 2 || gan->latent_dim() != 2) throw ConfigError("appendix-a expects a 2-D generator");
  auto fair = std::make_shared<FairClassifier>(mix);
  auto gamma = std::make_shared<ProbabilitiesModel>(fair);
  const std::size_t n = c.at("samples").get<std::size_t>();
  const json& hs = c.at("histogram");
  const auto hlo = hs.at("lo").get<std::vector<double>>(), hhi = hs.at("hi").get<std::vector<double>>();
  const auto hbins = hs.at("bins").get<std::size_t>();
  const json& ls = c.at("latent_grid");
  const auto glo = ls.at("lo").get<std::vector<double>>(), ghi = ls.at("hi").get<std::vector<double>>();
  const auto gres = ls.at("resolution").get<std::vector<std::size_t>>();

  // (a) data, (b) generator
  Rng drng = make_rng(seed, 11);
  const Tensor data = sample_mixture(mix, drng, n);
  Rng erng = make_rng(seed, 10);
  const Tensor eps = standard_normal(erng, n, 2);
  const Tensor xg = (*gan)(eps);
  write_samples_csv(at(out, "a_data.csv"), data);
  write_samples_csv(at(out, "b_generator.csv"), {{"z", &eps}, {"x", &xg}});
  write_histogram_csv(at(out, "a_data_hist.csv"), data, hlo, hhi, hbins);
  write_histogram_csv(at(out, "b_generator_hist.csv"), xg, hlo, hhi, hbins);
  const auto pre = label_distribution(xg, *fair);
  m["data_labels"] = label_distribution(data, *fair);
  m["generator_labels"] = pre;
  m["dominant_mass"] = *std::max_element(pre.begin(), pre.end());

  // (c) control toward one component
  auto t0 = Clock::now();
  const auto control_energy = std::make_shared<ClassifierEnergy>(fair, target);
  const json& cc = c.at("control");
  const TrainResult ctl = train_flow(*gan, *control_energy, init_flow(flow_spec(c, cc.at("flow"), 2, 0)),
                                     seeded<TrainConfig>(c, cc.at("train")));
  m["timing"]["control_seconds"] = seconds_since(t0);
  save_run(out, "c_control", ctl);
  const Tensor zc = ctl.flow.forward(eps).z;
  const Tensor xc = (*gan)(zc);
  write_samples_csv(at(out, "c_controlled.csv"), {{"z", &zc}, {"x", &xc}});
  write_histogram_csv(at(out, "c_controlled_hist.csv"), xc, hlo, hhi, hbins);
  const auto lc = label_distribution(xc, *fair);
  const LatentEBM control_ebm{gan, control_energy, {}};
  const DensityGrid cgrid = quadrature_grid(control_ebm, glo, ghi, gres);
  cgrid.write_csv(at(out, "c_latent_grid.csv"));
  m["control"] = {{"target", target},
                  {"labels", lc},
                  {"target_fraction", lc[target]},
                  {"train", train_summary(ctl.report)}};

  // (d) moment constraint toward uniform component mass
  const json& dc = c.at("debias");
  const Tensor mu = Tensor::vector(uniform_ref(k));
  t0 = Clock::now();
  const MomentResult mr = solve_moment_beta(*gan, *gamma, mu, seeded<MomentConfig>(c, dc.at("moment")));
  m["timing"]["moment_seconds"] = seconds_since(t0);
  res.converged = res.converged && mr.converged;
  write_json(at(out, "d_beta.json"), mr.to_json());
  const auto debias_energy = std::make_shared<MomentEnergy>(mr.beta, gamma);
  t0 = Clock::now();
  const TrainResult deb = train_flow(*gan, *debias_energy, init_flow(flow_spec(c, dc.at("flow"), 2, 0)),
                                     seeded<TrainConfig>(c, dc.at("train")));
  m["timing"]["debias_seconds"] = seconds_since(t0);
  save_run(out, "d_debias", deb);
  const Tensor zd = deb.flow.forward(eps).z;
  const Tensor xd = (*gan)(zd);
  write_samples_csv(at(out, "d_debiased.csv"), {{"z", &zd}, {"x", &xd}});
  write_histogram_csv(at(out, "d_debiased_hist.csv"), xd, hlo, hhi, hbins);
  const LatentEBM debias_ebm{gan, debias_energy, {}};
  const DensityGrid dgrid = quadrature_grid(debias_ebm, glo, ghi, gres);
  dgrid.write_csv(at(out, "d_latent_grid.csv"));

  Rng srng = make_rng(seed, 12);
  const Reweighted rw = snis_labels(*gan, *debias_energy, *fair, standard_normal(srng, n, 2));
  const auto ld = label_distribution(xd, *fair);
  const auto ref = uniform_ref(k);
  const double gap_pre = moment_gap(xg, *gamma, mu), gap_post = moment_gap(xd, *gamma, mu);
  m["debias"] = {{"beta", mr.beta.storage()},
                 {"moment_residual", mr.residual},
                 {"moment_converged", mr.converged},
                 {"moment_steps", mr.steps},
                 {"ebm_labels", rw.labels},
                 {"ebm_labels_linf", linf(rw.labels, ref)},
                 {"ebm_moment", rw.soft},
                 {"ebm_moment_linf", linf(rw.soft, ref)},
                 {"ebm_effective_sample_size", rw.effective_sample_size},
                 {"flow_labels", ld},
                 {"flow_labels_linf", linf(ld, ref)},
                 {"flow_reweighted_labels", flow_reweighted_labels(*gan, *debias_energy, deb.flow, *fair, eps)},
                 {"flow_kl_to_target", kl_flow_to_target(deb.flow, dgrid).kl},
                 {"moment_gap_pre", gap_pre},
                 {"moment_gap_post", gap_post},
                 {"moment_gap_ratio", gap_pre / gap_post},
                 {"attribute_kl_pre", attribute_kl(pre, ref, n)},
                 {"attribute_kl_post", attribute_kl(ld, ref, n)},
                 {"train", train_summary(deb.report)}};
  m["samples"] = n;
  return res;
}

// ---- moment-debias ---------------------------------------------------------------

json moment_debias_defaults() {
  return {{"targets", {0.7, 0.5}},
          {"moment", moment_defaults()},
          {"quadrature", {{"lo", -12.0}, {"hi", 12.0}, {"points", 24001}}},
          {"grid", {{"lo", -10.0}, {"hi", 10.0}, {"resolution", 4000}}}};
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// E[sigmoid(x)] under N(x|0,1) exp(beta sigmoid(x)), by Simpson's rule.
double reweighted_sigmoid_mean(double beta, double lo, double hi, std::size_t points) {
  if (points % 2 == 0) ++points;
  const double h = (hi - lo) / static_cast<double>(points - 1);
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < points; ++i) {
    const double x = lo + h * static_cast<double>(i);
    const double w = (i == 0 || i + 1 == points) ? 1.0 : (i % 2 ? 4.0 : 2.0);
    const double s = sigmoid(x);
    const double u = w * std::exp(-0.5 * x * x + beta * s);
    num += u * s;
    den += u;
  }
  return num / den;
}

double bisect_beta(double mu, double lo, double hi, std::size_t points) {
  double a = -60.0, b = 60.0;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (a + b);
    if (reweighted_sigmoid_mean(mid, lo, hi, points) < mu) a = mid;
    else b = mid;
  }
  return 0.5 * (a + b);
}

ScenarioResult moment_debias(const json& c, const std::string& out) {
  ScenarioResult res;
  json& m = res.metrics;
  auto g = make_linear_gaussian(Tensor::identity(1), Tensor::vector({0.0}));
  auto gamma = std::make_shared<SigmoidModel>(1);
  const MomentConfig mc = seeded<MomentConfig>(c, c.at("moment"));
  const json& q = c.at("quadrature");
  const double qlo = q.at("lo").get<double>(), qhi = q.at("hi").get<double>();
  const auto qn = q.at("points").get<std::size_t>();
  const json& gs = c.at("grid");
  m["targets"] = json::array();
  for (double mu : c.at("targets").get<std::vector<double>>()) {
    if (!(mu > 0.0 && mu < 1.0)) throw ConfigError("moment-debias targets must lie in (0, 1)");
    const auto t0 = Clock::now();
    const MomentResult mr = solve_moment_beta(*g, *gamma, Tensor::vector({mu}), mc);
    const double solve_s = seconds_since(t0);
    res.converged = res.converged && mr.converged;
    const double root = bisect_beta(mu, qlo, qhi, qn);
    const LatentEBM ebm{g, std::make_shared<MomentEnergy>(mr.beta, gamma), {}};
    const DensityGrid grid = quadrature_grid(ebm, {gs.at("lo").get<double>()}, {gs.at("hi").get<double>()},
                                             {gs.at("resolution").get<std::size_t>()});
    const auto p = grid.normalized();
    const Tensor mid = grid.midpoints();
    double gm = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) gm += p[i] * grid.cell_volume() * sigmoid(mid.at(i, 0));
    char name[64];
    std::snprintf(name, sizeof name, "grid_mu_%.3f.csv", mu);
    grid.write_csv(at(out, name));
    m["targets"].push_back({{"mu", mu},
                            {"beta", mr.beta[0]},
                            {"beta_raw", mr.beta_raw[0]},
                            {"quadrature_root", root},
                            {"beta_error", std::abs(mr.beta_raw[0] - root)},
                            {"snis_estimate", mr.estimate[0]},
                            {"residual", mr.residual},
                            {"converged", mr.converged},
                            {"steps", mr.steps},
                            {"grid_moment", gm},
                            {"grid_moment_error", std::abs(gm - mu)}});
    m["timing"]["solve_seconds"].push_back(solve_s);
  }
  return res;
}

// ---- conditional-pose-analog -------------------------------------------------------

json conditional_defaults() {
  json ct = train_defaults(4000);
  ct["rho_lo"] = {-1.0, -1.0};
  ct["rho_hi"] = {1.0, 1.0};
  json it = ct;
  it["rho0"] = {0.0, 0.0};
  it["lambda_id"] = 1.0;
  return {{"conditional",
           {{"lambda", 4.0},
            {"flow", flow_defaults(3)},
            {"train", ct},
            {"grid", {-1.0, -0.5, 0.0, 0.5, 1.0}},
            {"samples_per_rho", 10000},
            {"mismatch_pairs", 10000}}},
          {"id",
           {{"dim", 4},
            {"generator_seed", 5},
            {"lambda_pose", 4.0},
            {"embedding", {{"hidden", 16}, {"out", 8}, {"seed", 7}}},
            {"flow", flow_defaults(4)},
            {"train", it},
            {"pairs", 5000},
            {"baseline", true}}}};
}

/// Mean of 1 - cos(a_i, b_i).
double mean_cosine_distance(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t r = 0; r < a.rows(); ++r) {
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t j = 0; j < a.cols(); ++j) {
      ab += a.at(r, j) * b.at(r, j);
      aa += a.at(r, j) * a.at(r, j);
      bb += b.at(r, j) * b.at(r, j);
    }
    s += 1.0 - ab / std::sqrt(aa * bb);
  }
  return s / static_cast<double>(a.rows());
}

json id_pairs(const Generator& composed, const Model& r, std::size_t pairs, std::size_t dim,
              const TrainConfig& tc, std::uint64_t seed) {
  Rng erng = make_rng(seed, 20), rrng = make_rng(seed, 21);
  const Tensor e1 = standard_normal(erng, pairs, dim), e2 = standard_normal(erng, pairs, dim);
  const Tensor ra = uniform_box(rrng, pairs, tc.rho_lo, tc.rho_hi), rb = uniform_box(rrng, pairs, tc.rho_lo, tc.rho_hi);
  const Tensor xa = composed(e1, &ra), xb_same = composed(e1, &rb), xb_diff = composed(e2, &rb);
  const Tensor ea = r(xa);
  const double same = mean_cosine_distance(ea, r(xb_same)), diff = mean_cosine_distance(ea, r(xb_diff));
  double pose = 0.0;
  for (std::size_t i = 0; i < pairs; ++i)
    for (std::size_t j = 0; j < 2; ++j) pose += std::abs(xa.at(i, j) - ra.at(i, j));
  return {{"same_eps_distance", same},
          {"different_eps_distance", diff},
          {"margin", diff / same},
          {"pose_mean_abs_error", pose / static_cast<double>(2 * pairs)}};
}

ScenarioResult conditional_pose(const json& c, const std::string& out) {
  ScenarioResult res;
  json& m = res.metrics;
  const std::uint64_t seed = c.at("seed").get<std::uint64_t>();

  // Part 1: identity generator, x pulled toward rho.
  {
    const json& cc = c.at("conditional");
    const double lambda = cc.at("lambda").get<double>();
    auto g = make_linear_gaussian(Tensor::identity(2), Tensor::vector({0.0, 0.0}));
    EnergyFamily family;
    // squared distance, so lambda/2 gives the energy (lambda/2)||x - rho||^2
    family.add_regressor(0.5 * lambda, std::make_shared<IdentityModel>(2), Metric::Euclidean);
    const TrainConfig tc = seeded<TrainConfig>(c, cc.at("train"));
    const auto t0 = Clock::now();
    const TrainResult tr = train_conditional_flow(*g, family, init_flow(flow_spec(c, cc.at("flow"), 2, 2)), tc);
    m["timing"]["conditional_seconds"] = seconds_since(t0);
    save_run(out, "conditional", tr);
    const auto composed = compose_generator(g, tr.flow);
    const auto grid = cc.at("grid").get<std::vector<double>>();
    const auto per = cc.at("samples_per_rho").get<std::size_t>();
    const double shrink = lambda / (1.0 + lambda);
    Rng erng = make_rng(seed, 30);
    const Tensor eps = standard_normal(erng, per, 2);
    json cells = json::array();
    double worst = 0.0;
    std::ofstream csv(at(out, "conditional_means.csv"));
    csv.precision(17);
    csv << "rho0,rho1,mean0,mean1,analytic0,analytic1\n";
    for (double r0 : grid)
      for (double r1 : grid) {
        const Tensor rho = Tensor::matrix(1, 2, {r0, r1});
        const Moments mo = sample_moments((*composed)(eps, &rho));
        const std::vector<double> ref{shrink * r0, shrink * r1};
        const double err = linf(mo.mean, ref);
        worst = std::max(worst, err);
        cells.push_back({{"rho", {r0, r1}}, {"mean", mo.mean}, {"error", err}});
        csv << r0 << ',' << r1 << ',' << mo.mean[0] << ',' << mo.mean[1] << ',' << ref[0] << ',' << ref[1] << '\n';
      }
    // matched vs mismatched condition
    const auto pairs = cc.at("mismatch_pairs").get<std::size_t>();
    Rng mrng = make_rng(seed, 31);
    const Tensor e2 = standard_normal(mrng, pairs, 2);
    const Tensor ra = uniform_box(mrng, pairs, tc.rho_lo, tc.rho_hi), rb = uniform_box(mrng, pairs, tc.rho_lo, tc.rho_hi);
    const Tensor x = (*composed)(e2, &ra);
    Graph gr(GraphOptions{false, true, false});
    const double matched = mean(family.evaluate(gr, gr.constant(x), gr.constant(ra))).value().item();
    const double mismatched = mean(family.evaluate(gr, gr.constant(x), gr.constant(rb))).value().item();
    m["conditional"] = {{"lambda", lambda},
                        {"shrink", shrink},
                        {"cells", cells},
                        {"max_mean_error", worst},
                        {"matched_energy", matched},
                        {"mismatched_energy", mismatched},
                        {"mismatch_ratio", mismatched / matched},
                        {"train", train_summary(tr.report)}};
  }

  // Part 2: pose on x[0:2], identity embedding on x[2:4].
  {
    const json& ic = c.at("id");
    const auto dim = ic.at("dim").get<std::size_t>();
    if (dim < 4) throw ConfigError("id.dim must be at least 4");
    auto g = make_warped_gaussian(dim, ic.at("generator_seed").get<std::uint64_t>());
    EnergyFamily family;
    family.add_regressor(0.5 * ic.at("lambda_pose").get<double>(), std::make_shared<SliceModel>(dim, 0, 2),
                         Metric::Euclidean);
    const json& es = ic.at("embedding");
    const ModelPtr r = std::make_shared<ChainModel>(
        MlpModel::embedding(dim - 2, es.at("hidden").get<std::size_t>(), es.at("out").get<std::size_t>(),
                            es.at("seed").get<std::uint64_t>()),
        std::make_shared<SliceModel>(dim, 2, dim));
    const TrainConfig tc = seeded<TrainConfig>(c, ic.at("train"));
    const FlowSpec fs = flow_spec(c, ic.at("flow"), dim, 2);
    const auto pairs = ic.at("pairs").get<std::size_t>();
    auto t0 = Clock::now();
    const TrainResult tr = train_with_id_energy(*g, family, init_flow(fs), *r, tc);
    m["timing"]["id_seconds"] = seconds_since(t0);
    save_run(out, "id", tr);
    m["id"] = id_pairs(*compose_generator(g, tr.flow), *r, pairs, dim, tc, seed);
    m["id"]["lambda_id"] = tc.lambda_id;
    m["id"]["train"] = train_summary(tr.report);
    if (ic.at("baseline").get<bool>()) {
      TrainConfig base = tc;
      base.lambda_id = 0.0;
      t0 = Clock::now();
      const TrainResult br = train_with_id_energy(*g, family, init_flow(fs), *r, base);
      m["timing"]["id_baseline_seconds"] = seconds_since(t0);
      save_run(out, "id_baseline", br);
      m["id_baseline"] = id_pairs(*compose_generator(g, br.flow), *r, pairs, dim, tc, seed);
      m["id_baseline"]["lambda_id"] = 0.0;
    }
  }
  return res;
}

// ---- iterative-debias -------------------------------------------------------------

json iterative_defaults() {
  json gan = GanConfig{}.to_json();
  gan["seed"] = nullptr;
  json t2 = train_defaults(3000);
  t2["seed"] = 1;
  return {{"mixture", default_mixture().to_json()},
          {"gan", gan},
          {"gan_checkpoint", ""},
          {"pair", {1, 2}},
          {"select", {{"flow", flow_defaults(11)}, {"train", train_defaults(3000)}}},
          {"debias", {{"flow", flow_defaults(12)}, {"train", t2}, {"moment", moment_defaults()}}},
          {"samples", 100000}};
}

std::vector<double> pair_split(const std::vector<double>& labels, std::size_t a, std::size_t b) {
  const double s = labels[a] + labels[b];
  return {labels[a] / s, labels[b] / s};
}

ScenarioResult iterative_debias(const json& c, const std::string& out) {
  ScenarioResult res;
  json& m = res.metrics;
  const std::uint64_t seed = c.at("seed").get<std::uint64_t>();
  const MixtureSpec mix = mixture_from_config(c);
  const auto pair = c.at("pair").get<std::vector<std::size_t>>();
  const std::size_t k = mix.components();
  if (pair.size() != 2 || pair[0] == pair[1] || pair[0] >= k || pair[1] >= k)
    throw ConfigError("pair must name two distinct components");
  const GeneratorPtr gan = gan_for(c, mix, out, m);

  auto fair = std::make_shared<FairClassifier>(mix);
  std::vector<std::size_t> rest;
  for (std::size_t i = 0; i < k; ++i)
    if (i != pair[0] && i != pair[1]) rest.push_back(i);
  auto selected = std::make_shared<CountingModel>(
      std::make_shared<MergedClassifier>(fair, std::vector<std::vector<std::size_t>>{pair, rest}));
  MixtureSpec sub;
  sub.weights = {0.5, 0.5};
  sub.means = Tensor::zeros(2, mix.dim());
  for (std::size_t i = 0; i < 2; ++i) {
    for (std::size_t j = 0; j < mix.dim(); ++j) sub.means.at(i, j) = mix.means.at(pair[i], j);
    sub.covariances.push_back(mix.covariances[pair[i]]);
  }
  auto attribute = std::make_shared<FairClassifier>(sub);
  auto gamma = std::make_shared<CountingModel>(std::make_shared<ProbabilitiesModel>(attribute));

  ControlStage s1;
  s1.name = "select";
  s1.energy = std::make_shared<ClassifierEnergy>(selected, 0);
  s1.flow = flow_spec(c, c.at("select").at("flow"), gan->latent_dim(), 0);
  s1.train = seeded<TrainConfig>(c, c.at("select").at("train"));
  ControlStage s2;
  s2.name = "debias";
  s2.gamma = gamma;
  s2.mu = Tensor::vector({0.5, 0.5});
  s2.moment = seeded<MomentConfig>(c, c.at("debias").at("moment"));
  s2.flow = flow_spec(c, c.at("debias").at("flow"), gan->latent_dim(), 0);
  s2.train = seeded<TrainConfig>(c, c.at("debias").at("train"));

  auto t0 = Clock::now();
  const ControlResult r1 = iterate_control(gan, {s1});
  m["timing"]["select_seconds"] = seconds_since(t0);
  t0 = Clock::now();
  const ControlResult r2 = iterate_control(r1.generator, {s2});
  m["timing"]["debias_seconds"] = seconds_since(t0);
  r1.stages[0].report.write_csv(at(out, "select_trace.csv"));
  r2.stages[0].report.write_csv(at(out, "debias_trace.csv"));
  r2.generator->to_checkpoint().save(at(out, "final_generator.ckpt"));
  const MomentResult& mr = *r2.stages[0].moment;
  res.converged = mr.converged;

  const std::size_t n = c.at("samples").get<std::size_t>();
  Rng erng = make_rng(seed, 40);
  const Tensor eps = standard_normal(erng, n, gan->latent_dim());
  const Tensor x0 = (*gan)(eps);
  const Tensor x1 = (*r1.generator)(eps);
  selected->reset();
  gamma->reset();
  const Tensor x2 = (*r2.generator)(eps);
  const std::uint64_t sampling_calls = selected->rows() + gamma->rows();
  write_samples_csv(at(out, "stage0_samples.csv"), x0);
  write_samples_csv(at(out, "stage1_samples.csv"), x1);
  write_samples_csv(at(out, "stage2_samples.csv"), x2);

  const auto ref = uniform_ref(2);
  auto stage = [&](const Tensor& x) {
    const auto labels = label_distribution(x, *fair);
    const auto attr = label_distribution(x, *attribute);
    return json{{"labels", labels},
                {"pair_fraction", labels[pair[0]] + labels[pair[1]]},
                {"pair_split", pair_split(labels, pair[0], pair[1])},
                {"attribute", attr},
                {"attribute_kl", attribute_kl(attr, ref, n)}};
  };
  m["pair"] = pair;
  m["generator"] = stage(x0);
  m["stage1"] = stage(x1);
  m["stage1"]["train"] = train_summary(r1.stages[0].report);
  m["final"] = stage(x2);
  m["final"]["train"] = train_summary(r2.stages[0].report);
  m["final"]["pair_fraction_drop"] = m["stage1"]["pair_fraction"].get<double>() - m["final"]["pair_fraction"].get<double>();
  m["moment"] = mr.to_json();
  m["sampling_classifier_rows"] = sampling_calls;
  m["composition_depth"] = 2;
  m["samples"] = n;
  return res;
}

// ---- latency --------------------------------------------------------------------------

json latency_defaults() {
  return {{"generator_seed", 3},
          {"energy", {{"lambda", 4.0}, {"hidden", 128}, {"out", 64}, {"embedding_seed", 9}, {"reference", {1.0, 0.5}}}},
          {"flow", flow_defaults(5)},
          {"train", train_defaults(4000)},
          {"bench", {{"n", 2000}, {"warmup", 10}, {"step_size", 0.05}, {"chunk", 4096}}},
          {"grid", {{"lo", {-6.0, -6.0}}, {"hi", {6.0, 6.0}}, {"resolution", {256, 256}}}}};
}

ScenarioResult latency(const json& c, const std::string& out) {
  ScenarioResult res;
  json& m = res.metrics;
  const std::uint64_t seed = c.at("seed").get<std::uint64_t>();
  auto g = make_warped_gaussian(2, c.at("generator_seed").get<std::uint64_t>());
  const json& ec = c.at("energy");
  auto emb = MlpModel::embedding(2, ec.at("hidden").get<std::size_t>(), ec.at("out").get<std::size_t>(),
                                 ec.at("embedding_seed").get<std::uint64_t>());
  auto sim = std::make_shared<SimilarityEnergy>(emb, Tensor::vector(ec.at("reference").get<std::vector<double>>()));
  auto scaled = std::make_shared<CompositeEnergy>();
  scaled->add(ec.at("lambda").get<double>(), sim);
  auto counter = std::make_shared<CountingEnergy>(scaled);
  const LatentEBM counted{g, counter, {}};
  const LatentEBM plain{g, scaled, {}};

  const auto t0 = Clock::now();
  const TrainResult tr =
      train_flow(*g, *scaled, init_flow(flow_spec(c, c.at("flow"), 2, 0)), seeded<TrainConfig>(c, c.at("train")));
  m["timing"]["train_seconds"] = seconds_since(t0);
  save_run(out, "latency", tr);

  const json& bc = c.at("bench");
  const double step = bc.at("step_size").get<double>();
  const auto chunk = bc.at("chunk").get<std::size_t>();
  const FlowStack& flow = tr.flow;
  auto langevin = [&](std::size_t steps) {
    return BenchSampler{"langevin-" + std::to_string(steps), [&, steps](std::size_t n, std::uint64_t s) {
                          LangevinConfig lc;
                          lc.n_steps = steps;
                          lc.step_size = step;
                          lc.seed = s;
                          lc.chunk = chunk;
                          return langevin_sample(counted, lc, n).samples;
                        }};
  };
  const std::vector<BenchSampler> samplers{
      {"flow",
       [&](std::size_t n, std::uint64_t s) {
         Rng rng = make_rng(s, 0);
         return flow.forward(standard_normal(rng, n, 2)).z;
       }},
      langevin(50), langevin(200)};
  const auto rows = latency_bench(samplers, *counter, plain, bc.at("n").get<std::size_t>(),
                                  bc.at("warmup").get<std::size_t>(), seed);
  std::ofstream(at(out, "latency_table.txt")) << format_latency_table(rows, !c.value("deterministic", false));

  json table = json::array(), timing = json::object();
  for (const BenchRow& r : rows) {
    table.push_back({{"name", r.name},
                     {"n", r.n},
                     {"gradient_calls_per_sample", r.gradient_calls_per_sample},
                     {"energy_calls_per_sample", r.energy_calls_per_sample},
                     {"mean_energy", r.mean_energy}});
    timing[r.name] = {{"sec_per_sample", r.sec_per_sample}, {"amortized", r.amortized}};
  }
  m["samplers"] = table;
  const json& gs = c.at("grid");
  const DensityGrid grid = quadrature_grid(plain, gs.at("lo").get<std::vector<double>>(),
                                           gs.at("hi").get<std::vector<double>>(),
                                           gs.at("resolution").get<std::vector<std::size_t>>());
  const Tensor ge = plain.energy_values(grid.midpoints());
  const auto p = grid.normalized();
  double quad = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) quad += p[i] * grid.cell_volume() * ge[i];
  m["quadrature_mean_energy"] = quad;
  m["flow_kl_to_target"] = kl_flow_to_target(flow, grid).kl;
  m["energy_relative_gap"] = std::abs(rows[0].mean_energy - rows[2].mean_energy) / std::abs(rows[2].mean_energy);
  m["timing"]["bench"] = timing;
  m["timing"]["speedup_vs_langevin50"] = rows[1].sec_per_sample / rows[0].sec_per_sample;
  m["train"] = train_summary(tr.report);
  return res;
}

using Runner = ScenarioResult (*)(const json&, const std::string&);

struct Entry {
  const char* name;
  json (*defaults)();
  Runner run;
};

const std::vector<Entry>& registry() {
  static const std::vector<Entry> r{{"appendix-a", appendix_a_defaults, appendix_a},
                                    {"gaussian-oracle", gaussian_oracle_defaults, gaussian_oracle},
                                    {"moment-debias", moment_debias_defaults, moment_debias},
                                    {"conditional-pose-analog", conditional_defaults, conditional_pose},
                                    {"iterative-debias", iterative_defaults, iterative_debias},
                                    {"latency", latency_defaults, latency}};
  return r;
}

const Entry& find(const std::string& name) {
  for (const Entry& e : registry())
    if (name == e.name) return e;
  std::string known;
  for (const Entry& e : registry()) known += std::string(known.empty() ? "" : ", ") + e.name;
  throw ConfigError("unknown scenario '" + name + "' (known: " + known + ")");
}

}  // namespace

std::vector<std::string> scenario_names() {
  std::vector<std::string> out;
  for (const Entry& e : registry()) out.push_back(e.name);
  return out;
}

json scenario_defaults(const std::string& name) {
  json j = find(name).defaults();
  j["seed"] = 0;
  j["out"] = "runs/" + name;
  j["deterministic"] = false;
  return j;
}

json strip_timing(json metrics) {
  if (metrics.is_object()) {
    metrics.erase("timing");
    for (auto& [k, v] : metrics.items()) v = strip_timing(v);
  } else if (metrics.is_array()) {
    for (auto& v : metrics) v = strip_timing(v);
  }
  return metrics;
}

ScenarioResult run_scenario(const std::string& name, const json& cfg) {
  const Entry& e = find(name);
  const std::string out = cfg.at("out").get<std::string>();
  ensure_directory(out);
  const auto t0 = Clock::now();
  ScenarioResult r = e.run(cfg, out);
  r.metrics["scenario"] = name;
  r.metrics["seed"] = cfg.at("seed");
  r.metrics["converged"] = r.converged;
  r.metrics["timing"]["total_seconds"] = seconds_since(t0);
  const bool deterministic = cfg.value("deterministic", false);
  write_json(at(out, "metrics.json"), deterministic ? strip_timing(r.metrics) : r.metrics);
  json manifest = make_manifest("scenario " + name, cfg);
  std::vector<std::string> files;
  for (const auto& f : std::filesystem::directory_iterator(out))
    if (f.is_regular_file() && f.path().filename() != "manifest.json") files.push_back(f.path().filename().string());
  std::sort(files.begin(), files.end());
  manifest["artifacts"] = files;
  write_json(at(out, "manifest.json"), manifest);
  return r;
}

}  // namespace latentctl
