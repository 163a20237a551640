// End-to-end acceptance run: one PASS/FAIL line per criterion, exit status 1 on any FAIL.
// Usage: acceptance [work-dir]; the lines are also written to <work-dir>/acceptance_report.txt.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <string>

#include <Eigen/Dense>

#include "latentctl/energy.hpp"
#include "latentctl/flow.hpp"
#include "latentctl/generators.hpp"
#include "latentctl/random.hpp"
#include "latentctl/scenarios.hpp"
#include "latentctl/training.hpp"

using namespace latentctl;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int failures = 0;
std::ofstream report_file;

void report(int id, bool ok, const std::string& what, const std::string& detail) {
  if (!ok) ++failures;
  char head[32];
  std::snprintf(head, sizeof head, "%s criterion %2d: ", ok ? "PASS" : "FAIL", id);
  const std::string line = head + what + " | " + detail;
  std::printf("%s\n", line.c_str());
  std::fflush(stdout);
  report_file << line << std::endl;
}

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

// Random stacks at the default width. Scale 0.01 keeps the maps in the range trained
// stacks occupy; much larger scales let the clamped log-scales saturate in every block
// and push N(0,I) draws to |z| ~ 1e10, where double roundoff alone exceeds 1e-10.
FlowStack random_flow(std::size_t d, std::uint64_t seed) {
  FlowSpec spec;
  spec.dim = d;
  spec.seed = seed;
  FlowStack f = init_flow(spec);
  randomize_parameters(f, seed + 1000, 0.01);
  return f;
}

// An 8-block flow trained for a short run against a non-trivial energy.
FlowStack trained_flow(std::size_t d) {
  CompositeEnergy e;
  if (d == 2) {
    e.add(1.0, std::make_shared<ClassifierEnergy>(std::make_shared<FairClassifier>(default_mixture()), 2));
  } else {
    e.add(1.0, quadratic_energy(Tensor(std::vector<std::size_t>{d}, 1.5)));
  }
  TrainConfig cfg;
  cfg.steps = 600;
  cfg.batch = 128;
  cfg.seed = d;
  cfg.optimizer.lr = 3e-3;
  FlowSpec spec;
  spec.dim = d;
  spec.seed = d;
  return train_flow(*make_warped_gaussian(d, 1), e, init_flow(spec), cfg).flow;
}

double round_trip(const FlowStack& f, std::uint64_t stream) {
  Rng rng = make_rng(1, stream);
  const Tensor eps = standard_normal(rng, 1000, f.dim());
  return max_abs_diff(f.inverse(f.forward(eps).z).z, eps);
}

// Criterion 1: worst inverse(forward(eps)) error over d in {2, 8}: ten random stacks and one trained stack each.
double invertibility(const std::vector<FlowStack>& trained) {
  double worst = 0.0;
  for (std::size_t d : {2u, 8u})
    for (std::uint64_t s = 0; s < 10; ++s) worst = std::max(worst, round_trip(random_flow(d, 100 + 7 * d + s), s));
  for (const auto& f : trained) worst = std::max(worst, round_trip(f, 50 + f.dim()));
  return worst;
}

// Criterion 2: worst |analytic - numerical| log|det J| over 100 parameterizations per d.
double logdet_exactness() {
  double worst = 0.0;
  const double h = 1e-6;
  for (std::size_t d : {2u, 4u}) {
    for (std::uint64_t s = 0; s < 100; ++s) {
      const FlowStack f = random_flow(d, 5000 + 131 * d + s);
      Rng rng = make_rng(s, 20 + d);
      const Tensor eps = standard_normal(rng, 1, d);
      Eigen::MatrixXd j(d, d);
      for (std::size_t c = 0; c < d; ++c) {
        Tensor p = eps, m = eps;
        p[c] += h;
        m[c] -= h;
        const Tensor zp = f.forward(p).z, zm = f.forward(m).z;
        for (std::size_t r = 0; r < d; ++r) j(r, c) = (zp[r] - zm[r]) / (2 * h);
      }
      const double numeric = std::log(std::abs(j.determinant()));
      worst = std::max(worst, std::abs(f.forward(eps).logdet[0] - numeric));
    }
  }
  return worst;
}

// Criterion 3: relative L2 error of the training-loss gradient against central differences.
double gradient_check() {
  FlowStack f = init_flow(2, 2, 16, false, 0, 4);
  randomize_parameters(f, 7, 0.05);
  const auto gen = make_warped_gaussian(2, 1);
  const auto fc = std::make_shared<FairClassifier>(default_mixture());
  CompositeEnergy e;
  e.add(1.0, std::make_shared<ClassifierEnergy>(fc, 2)).add(0.3, quadratic_energy(Tensor::vector({1.0, 1.0})));
  Rng rng = make_rng(8);
  const Tensor eps = standard_normal(rng, 16, 2);
  auto loss_at = [&](const FlowStack& flow) {
    Graph g(GraphOptions{.record = false});
    return flow_objective(g, *gen, e, flow, flow.bind(g, false), g.constant(eps)).total.value().item();
  };
  Graph g;
  const auto params = f.bind(g, true);
  g.backward(flow_objective(g, *gen, e, f, params, g.constant(eps)).total);
  double num = 0.0, den = 0.0;
  const double step = 1e-5;
  auto ptrs = f.parameters();
  for (std::size_t i = 0; i < ptrs.size(); ++i) {
    const Tensor grad = g.grad(params[i]);
    for (std::size_t k = 0; k < ptrs[i]->size(); ++k) {
      const double keep = (*ptrs[i])[k];
      (*ptrs[i])[k] = keep + step;
      const double up = loss_at(f);
      (*ptrs[i])[k] = keep - step;
      const double down = loss_at(f);
      (*ptrs[i])[k] = keep;
      const double fd = (up - down) / (2 * step);
      num += std::pow(grad[k] - fd, 2);
      den += grad[k] * grad[k];
    }
  }
  return std::sqrt(num / den);
}

struct Run {
  json metrics;
  double seconds = 0.0;
  std::string out;
};

Run run(const std::string& name, const std::string& out, const std::map<std::string, json>& set = {}) {
  json cfg = scenario_defaults(name);
  cfg["out"] = out;
  cfg["deterministic"] = true;
  for (const auto& [k, v] : set) cfg[k] = v;
  const auto t0 = Clock::now();
  Run r{run_scenario(name, cfg).metrics, 0.0, out};
  r.seconds = since(t0);
  std::printf("  ran %s in %.1f s\n", name.c_str(), r.seconds);
  std::fflush(stdout);
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Same metrics (timing removed) and byte-identical artifacts; manifests differ in their output path.
std::string compare_runs(const Run& a, const Run& b) {
  if (strip_timing(a.metrics).dump() != strip_timing(b.metrics).dump()) return "metrics differ";
  std::size_t files = 0;
  for (const auto& f : fs::directory_iterator(a.out)) {
    const std::string name = f.path().filename().string();
    if (name == "manifest.json" || !f.is_regular_file()) continue;
    const fs::path other = fs::path(b.out) / name;
    if (!fs::exists(other) || slurp(f.path()) != slurp(other)) return "artifact " + name + " differs";
    ++files;
  }
  return "identical (" + std::to_string(files) + " artifacts)";
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::path("acceptance_runs");
  fs::remove_all(work);
  fs::create_directories(work);
  report_file.open(work / "acceptance_report.txt");
  const std::string a = (work / "a").string(), b = (work / "b").string();
  std::vector<std::string> determinism;

  {
    const std::vector<FlowStack> trained = {trained_flow(2), trained_flow(8)};
    auto t0 = Clock::now();
    const double err = invertibility(trained);
    const double t = since(t0);
    report(1, err < 1e-10 && t < 10, "8-block round trip, d in {2,8}, 1000 draws, random and trained stacks",
           "max error " + fmt("%.3g", err) + ", " + fmt("%.2f s", t));
    determinism.push_back(invertibility({trained_flow(2), trained_flow(8)}) == err ? "" : "invertibility");

    t0 = Clock::now();
    const double ld = logdet_exactness();
    const double t2 = since(t0);
    report(2, ld < 1e-6 && t2 < 30, "analytic vs numerical log|det J|, d in {2,4}, 100 flows each",
           "max error " + fmt("%.3g", ld) + ", " + fmt("%.2f s", t2));
    determinism.push_back(logdet_exactness() == ld ? "" : "logdet");

    t0 = Clock::now();
    const double gc = gradient_check();
    const double t3 = since(t0);
    report(3, gc < 1e-5 && t3 < 10, "loss gradient vs central differences, 2 blocks, d=2",
           "relative error " + fmt("%.3g", gc) + ", " + fmt("%.2f s", t3));
    determinism.push_back(gradient_check() == gc ? "" : "gradient");
  }

  const Run go = run("gaussian-oracle", a + "/gaussian-oracle");
  {
    const json& m = go.metrics;
    const double kl = m["kl"], me = m["mean_error"], ce = m["cov_error_frobenius"];
    report(4, kl < 0.05 && me < 0.05 && ce < 0.05 && go.seconds < 300,
           "flow vs N((1,0), I/2): KL, mean, covariance",
           "KL " + fmt("%.3g", kl) + ", mean error " + fmt("%.3g", me) + ", cov error " + fmt("%.3g", ce) + ", " +
               fmt("%.1f s", go.seconds));
    const double t1 = m["tv"]["flow_langevin"], t2 = m["tv"]["flow_rejection"], t3 = m["tv"]["langevin_rejection"];
    report(5, std::max({t1, t2, t3}) < 0.1 && go.seconds < 600, "pairwise 2D-histogram TV, 1e5 samples",
           "flow/langevin " + fmt("%.4f", t1) + ", flow/rejection " + fmt("%.4f", t2) + ", langevin/rejection " +
               fmt("%.4f", t3));
  }

  const Run aa = run("appendix-a", a + "/appendix-a");
  const std::string gan = aa.out + "/gan.ckpt";
  {
    const json& m = aa.metrics;
    const double tf = m["control"]["target_fraction"], linf = m["debias"]["ebm_labels_linf"];
    const double dom = m["dominant_mass"];
    const bool trained = m["gan"]["source"] == "trained";
    report(6, trained && tf >= 0.95 && linf < 0.02 && dom > 0.70 && aa.seconds < 900,
           "mixture: control to one component, de-bias to uniform",
           "target fraction " + fmt("%.4f", tf) + ", uniform L-inf " + fmt("%.4f", linf) + ", pre dominant mass " +
               fmt("%.4f", dom) + ", " + fmt("%.1f s", aa.seconds) + (trained ? " incl. GAN" : " (GAN not trained)"));
  }

  const Run md = run("moment-debias", a + "/moment-debias");
  {
    const json& t = md.metrics["targets"];
    const double e7 = t[0]["beta_error"], b5 = t[1]["beta"];
    const bool ok = t[0]["mu"] == 0.7 && t[1]["mu"] == 0.5 && e7 < 0.05 && std::abs(b5) < 0.02 && md.seconds < 120;
    report(7, ok, "1D sigmoid moment solver",
           "mu=0.7 |beta - root| " + fmt("%.4f", e7) + ", mu=0.5 |beta| " + fmt("%.3g", std::abs(b5)) + ", " +
               fmt("%.1f s", md.seconds));
  }

  const Run cp = run("conditional-pose-analog", a + "/conditional-pose-analog");
  {
    const double err = cp.metrics["conditional"]["max_mean_error"];
    report(8, err < 0.1 && cp.seconds < 600, "conditional mean vs 0.8 rho on a 5x5 grid",
           "max error " + fmt("%.4f", err) + ", " + fmt("%.1f s", cp.seconds));
    const json& id = cp.metrics["id"];
    const double same = id["same_eps_distance"], diff = id["different_eps_distance"], margin = id["margin"];
    report(9, same < diff && margin >= 2.0 && cp.seconds < 600, "ID energy: same-eps vs different-eps distance",
           "same " + fmt("%.4f", same) + ", different " + fmt("%.4f", diff) + ", margin " + fmt("%.1fx", margin));
  }

  const Run it = run("iterative-debias", a + "/iterative-debias", {{"gan_checkpoint", gan}});
  {
    const json& m = it.metrics;
    const double kl = m["final"]["attribute_kl"];
    const double s1 = m["stage1"]["pair_fraction"], fin = m["final"]["pair_fraction"];
    report(10, kl < 0.01 && s1 >= 0.95 && s1 - fin <= 0.05 && it.seconds < 1200, "select then de-bias",
           "attribute KL " + fmt("%.3g", kl) + ", pair fraction stage 1 " + fmt("%.4f", s1) + " -> final " +
               fmt("%.4f", fin) + ", " + fmt("%.1f s", it.seconds));
  }

  const Run lat = run("latency", a + "/latency");
  {
    const json& m = lat.metrics;
    double flow_grad = -1, flow_energy = -1, l50_grad = -1;
    for (const auto& row : m["samplers"]) {
      if (row["name"] == "flow") {
        flow_grad = row["gradient_calls_per_sample"];
        flow_energy = row["energy_calls_per_sample"];
      }
      if (row["name"] == "langevin-50") l50_grad = row["gradient_calls_per_sample"];
    }
    const double speed = m["timing"]["speedup_vs_langevin50"], gap = m["energy_relative_gap"];
    report(11, speed >= 20 && gap < 0.05 && flow_grad == 0 && flow_energy == 0 && l50_grad == 50 && lat.seconds < 300,
           "flow vs Langevin latency and energy parity",
           "speedup " + fmt("%.1fx", speed) + ", energy gap " + fmt("%.4f", gap) + ", flow gradient calls " +
               fmt("%g", flow_grad) + ", langevin-50 gradient calls " + fmt("%g", l50_grad) + ", " +
               fmt("%.1f s", lat.seconds));
  }

  {
    std::string detail;
    bool ok = true;
    for (const auto& d : determinism)
      if (!d.empty()) {
        ok = false;
        detail += d + " differs; ";
      }
    const std::vector<std::pair<std::string, const Run*>> runs = {
        {"gaussian-oracle", &go}, {"appendix-a", &aa},     {"moment-debias", &md},
        {"conditional-pose-analog", &cp}, {"iterative-debias", &it}, {"latency", &lat}};
    for (const auto& [name, first] : runs) {
      std::map<std::string, json> set;
      if (name == "iterative-debias") set["gan_checkpoint"] = gan;
      const std::string verdict = compare_runs(*first, run(name, b + "/" + name, set));
      if (verdict.rfind("identical", 0) != 0) ok = false;
      detail += name + ": " + verdict + "; ";
    }
    report(12, ok, "same-seed reruns are bit-identical (timings excluded)", "criteria 1-3 recomputed; " + detail);
  }

  std::printf("%s: %d criteria failed\n", failures ? "FAIL" : "PASS", failures);
  report_file << (failures ? "FAIL" : "PASS") << ": " << failures << " criteria failed" << std::endl;
  return failures ? 1 : 0;
}
