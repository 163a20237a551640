#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "latentctl/checkpoint.hpp"
#include "latentctl/config.hpp"
#include "latentctl/errors.hpp"
#include "latentctl/evaluation.hpp"
#include "latentctl/io.hpp"
#include "latentctl/moment.hpp"
#include "latentctl/samplers.hpp"
#include "latentctl/scenarios.hpp"
#include "latentctl/training.hpp"

using namespace latentctl;
using nlohmann::json;

namespace {

constexpr int kExitOther = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;
constexpr int kExitUnconverged = 4;

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool deterministic = false;

  void attach(CLI::App* app) {
    app->add_option("--config", config, "JSON config file (strict: unknown keys are errors)");
    app->add_option("--set", sets, "Override a dotted key, e.g. train.lr=1e-3 (repeatable)");
    app->add_option("--seed", seed, "Master seed");
    app->add_option("--out", out, "Output directory");
    app->add_flag("--deterministic", deterministic, "Omit wall-clock fields from written artifacts");
  }

  json load(json defaults) const {
    LoadOptions o;
    if (!config.empty()) o.config_path = config;
    o.overrides = sets;
    o.seed = seed;
    if (!out.empty()) o.out = out;
    json cfg = load_config(std::move(defaults), o);
    if (deterministic) cfg["deterministic"] = true;
    return cfg;
  }
};

std::string path_in(const json& cfg, const std::string& file) {
  return (std::filesystem::path(cfg.at("out").get<std::string>()) / file).string();
}

void begin(const std::string& command, const json& cfg) {
  ensure_directory(cfg.at("out").get<std::string>());
  write_json(path_in(cfg, "manifest.json"), make_manifest(command, cfg));
}

json report_json(const TrainReport& r, const json& cfg) {
  json j = r.to_json();
  if (cfg.value("deterministic", false)) j.erase("wall_seconds");
  return j;
}

template <class T>
T seeded(const json& cfg, const json& section) {
  json j = section;
  j["seed"] = section_seed(cfg, section);
  return T::from_json(j);
}

std::size_t output_dim_checked(const GeneratorPtr& g) {
  if (g->condition_dim() > 0) throw ConfigError("generator needs a condition; compose with an unconditional flow");
  return g->output_dim();
}

void finish_training(const json& cfg, const GeneratorPtr& g, const TrainResult& r) {
  r.flow.to_checkpoint().save(path_in(cfg, "flow.ckpt"));
  g->to_checkpoint().save(path_in(cfg, "generator.ckpt"));
  compose_generator(g, r.flow)->to_checkpoint().save(path_in(cfg, "composed.ckpt"));
  r.report.write_csv(path_in(cfg, "train_trace.csv"));
  write_json(path_in(cfg, "report.json"), report_json(r.report, cfg));
  std::cout << "final loss " << r.report.final_total << " over " << r.report.steps.size() << " steps -> "
            << cfg.at("out").get<std::string>() << "\n";
}

int cmd_train(const json& cfg) {
  begin("train", cfg);
  const GeneratorPtr g = build_generator(cfg);
  const auto energy = build_energy(cfg.at("energies"), mixture_from_config(cfg), output_dim_checked(g));
  const TrainResult r =
      train_flow(*g, *energy, build_flow(cfg, g->latent_dim(), 0), seeded<TrainConfig>(cfg, cfg.at("train")));
  finish_training(cfg, g, r);
  return 0;
}

int cmd_train_conditional(const json& cfg, bool with_id) {
  begin(with_id ? "train-id" : "train-conditional", cfg);
  const GeneratorPtr g = build_generator(cfg);
  const std::size_t D = output_dim_checked(g);
  const EnergyFamily family = build_energy_family(cfg.at("energies"), mixture_from_config(cfg), D);
  const FlowStack flow = build_flow(cfg, g->latent_dim(), family.condition_dim());
  const TrainConfig tc = seeded<TrainConfig>(cfg, cfg.at("train"));
  if (tc.rho_lo.size() != family.condition_dim())
    throw ConfigError("train.rho_lo/rho_hi must have length " + std::to_string(family.condition_dim()));
  TrainResult r = with_id ? train_with_id_energy(*g, family, flow, *build_embedding(cfg.at("id").at("embedding"), D), tc)
                          : train_conditional_flow(*g, family, flow, tc);
  finish_training(cfg, g, r);
  return 0;
}

int cmd_solve_beta(const json& cfg) {
  begin("solve-beta", cfg);
  const GeneratorPtr g = build_generator(cfg);
  const ModelPtr gamma = build_gamma(cfg.at("moment").at("gamma"), mixture_from_config(cfg), output_dim_checked(g));
  const auto mu = cfg.at("moment").at("mu").get<std::vector<double>>();
  if (mu.size() != gamma->output_dim())
    throw ConfigError("moment.mu must have length " + std::to_string(gamma->output_dim()));
  const MomentResult r =
      solve_moment_beta(*g, *gamma, Tensor::vector(mu), seeded<MomentConfig>(cfg, cfg.at("moment").at("solver")));
  write_json(path_in(cfg, "beta.json"), r.to_json());
  std::cout << r.to_json().dump() << "\n";
  if (!r.converged) {
    std::cerr << "moment solver stopped at residual " << r.residual << " after " << r.steps << " steps\n";
    return kExitUnconverged;
  }
  return 0;
}

int cmd_iterate(const json& cfg) {
  begin("iterate", cfg);
  const GeneratorPtr g = build_generator(cfg);
  const MixtureSpec mix = mixture_from_config(cfg);
  const std::size_t D = output_dim_checked(g);
  const json& list = cfg.at("stages");
  if (!list.is_array() || list.empty()) throw ConfigError("iterate needs a non-empty 'stages' array");
  std::vector<ControlStage> stages;
  for (std::size_t i = 0; i < list.size(); ++i) {
    const json& s = list[i];
    const std::string where = "stages." + std::to_string(i);
    if (!s.is_object()) throw ConfigError(where + " must be an object");
    for (const auto& [key, v] : s.items())
      if (key != "name" && key != "energies" && key != "gamma" && key != "mu" && key != "train" && key != "flow")
        throw ConfigError("unknown key '" + key + "' in " + where);
    ControlStage st;
    st.name = s.value("name", where);
    if (s.contains("energies")) st.energy = build_energy(s["energies"], mix, D);
    if (s.contains("mu")) {
      st.gamma = build_gamma(s.value("gamma", cfg.at("moment").at("gamma")), mix, D);
      st.mu = Tensor::vector(s["mu"].get<std::vector<double>>());
    }
    json train = cfg.at("train");
    if (s.contains("train")) merge_strict(train, s["train"], where + ".train");
    json flow = cfg.at("flow");
    if (s.contains("flow")) merge_strict(flow, s["flow"], where + ".flow");
    st.train = seeded<TrainConfig>(cfg, train);
    st.moment = seeded<MomentConfig>(cfg, cfg.at("moment").at("solver"));
    st.flow = FlowSpec{g->latent_dim(), flow.at("n_blocks").get<std::size_t>(), flow.at("hidden_width").get<std::size_t>(),
                       false, 0, section_seed(cfg, flow) + i};
    stages.push_back(std::move(st));
  }
  const ControlResult r = iterate_control(g, stages, true);
  json report = json::array();
  bool converged = true;
  for (const StageOutcome& s : r.stages) {
    json j = {{"name", s.name}, {"train", report_json(s.report, cfg)}};
    if (s.moment) {
      j["moment"] = s.moment->to_json();
      converged = converged && s.moment->converged;
    }
    report.push_back(j);
    s.report.write_csv(path_in(cfg, "stage_" + s.name + "_trace.csv"));
  }
  r.generator->to_checkpoint().save(path_in(cfg, "composed.ckpt"));
  write_json(path_in(cfg, "report.json"), {{"stages", report}, {"complete", r.complete}, {"error", r.error}});
  if (!r.complete) {
    std::cerr << "iteration stopped: " << r.error << "\n";
    return kExitNumerical;
  }
  std::cout << "composed " << r.stages.size() << " stages -> " << path_in(cfg, "composed.ckpt") << "\n";
  return converged ? 0 : kExitUnconverged;
}

std::optional<Tensor> condition_row(const json& rho, std::size_t cdim) {
  if (cdim == 0) return std::nullopt;
  const auto v = rho.get<std::vector<double>>();
  if (v.size() != cdim) throw ConfigError("sample.rho must have length " + std::to_string(cdim));
  return Tensor::matrix(1, cdim, v);
}

int cmd_sample(const json& cfg) {
  begin("sample", cfg);
  const GeneratorPtr g = build_generator(cfg);
  const json& sc = cfg.at("sample");
  const std::size_t n = sc.at("n").get<std::size_t>();
  const std::string sampler = sc.at("sampler").get<std::string>();
  const std::uint64_t seed = cfg.at("seed").get<std::uint64_t>();
  Tensor z;
  if (sampler == "flow") {
    const std::string ck = cfg.at("flow").at("checkpoint").get<std::string>();
    if (ck.empty()) std::cerr << "note: no flow.checkpoint given; sampling an untrained flow\n";
    const FlowStack flow = ck.empty() ? build_flow(cfg, g->latent_dim(), 0) : FlowStack::from_checkpoint(Checkpoint::load(ck));
    if (flow.dim() != g->latent_dim()) throw ConfigError("flow dimension does not match the generator latent");
    const std::size_t cdim = flow.condition_dim();
    Rng rng = make_rng(seed, 0);
    const Tensor eps = standard_normal(rng, n, g->latent_dim());
    const auto rho = condition_row(sc.at("rho"), cdim);
    Tensor rows;
    if (rho) {
      std::vector<double> v;
      for (std::size_t i = 0; i < n; ++i) v.insert(v.end(), rho->values().begin(), rho->values().end());
      rows = Tensor::matrix(n, cdim, std::move(v));
    }
    z = flow.forward(eps, rho ? &rows : nullptr).z;
  } else {
    const LatentEBM ebm{g, build_energy(cfg.at("energies"), mixture_from_config(cfg), output_dim_checked(g)), {}};
    if (sampler == "langevin") {
      const LangevinResult r = langevin_sample(ebm, seeded<LangevinConfig>(cfg, sc.at("langevin")), n);
      z = r.samples;
      std::cout << "gradient evaluations " << r.gradient_evaluations << ", restarts " << r.restarts << "\n";
    } else if (sampler == "rejection") {
      const RejectionResult r = rejection_sample(ebm, seeded<RejectionConfig>(cfg, sc.at("rejection")), n);
      z = r.samples;
      std::cout << "acceptance rate " << r.acceptance_rate << ", envelope " << r.envelope << "\n";
    } else {
      throw ConfigError("sample.sampler must be flow, langevin or rejection");
    }
  }
  const Tensor x = (*g)(z);
  write_samples_csv(path_in(cfg, "samples.csv"), {{"z", &z}, {"x", &x}});
  std::cout << "wrote " << n << " samples -> " << path_in(cfg, "samples.csv") << "\n";
  return 0;
}

int cmd_eval(const json& cfg) {
  begin("eval", cfg);
  const GeneratorPtr g = build_generator(cfg);
  const MixtureSpec mix = mixture_from_config(cfg);
  const std::size_t D = output_dim_checked(g), d = g->latent_dim();
  const auto energy = build_energy(cfg.at("energies"), mix, D);
  const FlowStack flow = build_flow(cfg, d, 0);
  const json& ec = cfg.at("eval");
  const std::uint64_t seed = cfg.at("seed").get<std::uint64_t>();
  json report = json::object();

  const std::string csv = ec.at("samples_csv").get<std::string>();
  Tensor x;
  if (!csv.empty()) {
    x = read_samples_csv(csv);
    if (x.cols() != D) throw ConfigError("eval.samples_csv must have " + std::to_string(D) + " columns");
    report["source"] = csv;
  } else {
    const std::size_t n = ec.at("samples").get<std::size_t>();
    Rng rng = make_rng(seed, 0);
    x = (*g)(flow.forward(standard_normal(rng, n, d)).z);
    report["source"] = "flow";
    if (d <= 3) {
      const LatentEBM ebm{g, energy, {}};
      const DensityGrid grid = quadrature_grid(ebm, ec.at("grid_lo").get<std::vector<double>>(),
                                               ec.at("grid_hi").get<std::vector<double>>(),
                                               ec.at("resolution").get<std::vector<std::size_t>>());
      const KlResult kl = kl_flow_to_target(flow, grid);
      report["kl"] = {{"value", kl.kl}, {"flow_mass", kl.flow_mass}, {"method", "midpoint quadrature"},
                      {"cells", grid.cells()}};
    }
  }
  report["samples"] = x.rows();
  const Tensor e = (*energy)(x);
  double me = 0.0;
  for (double v : e.values()) me += v;
  report["mean_energy"] = me / static_cast<double>(x.rows());
  const auto mu = cfg.at("moment").at("mu").get<std::vector<double>>();
  if (!mu.empty()) {
    const ModelPtr gamma = build_gamma(cfg.at("moment").at("gamma"), mix, D);
    report["moment_gap"] = moment_gap(x, *gamma, Tensor::vector(mu));
  }
  const auto ref = ec.at("reference").get<std::vector<double>>();
  if (!ref.empty()) {
    const ModelPtr clf = build_gamma(ec.at("classifier"), mix, D);
    const auto labels = label_distribution(x, *clf);
    report["labels"] = labels;
    report["attribute_kl"] = attribute_kl(labels, ref, x.rows());
  }
  write_json(path_in(cfg, "eval.json"), report);
  std::cout << report.dump(2) << "\n";
  return 0;
}

int cmd_bench(const json& cfg) {
  begin("bench", cfg);
  const GeneratorPtr g = build_generator(cfg);
  const auto energy = build_energy(cfg.at("energies"), mixture_from_config(cfg), output_dim_checked(g));
  auto counter = std::make_shared<CountingEnergy>(energy);
  const LatentEBM counted{g, counter, {}}, plain{g, energy, {}};
  const FlowStack flow = build_flow(cfg, g->latent_dim(), 0);
  const json& bc = cfg.at("bench");
  const double step = bc.at("step_size").get<double>();
  const std::size_t d = g->latent_dim();
  std::vector<BenchSampler> samplers{{"flow", [&](std::size_t n, std::uint64_t s) {
                                        Rng rng = make_rng(s, 0);
                                        return flow.forward(standard_normal(rng, n, d)).z;
                                      }}};
  for (std::size_t steps : bc.at("langevin_steps").get<std::vector<std::size_t>>())
    samplers.push_back({"langevin-" + std::to_string(steps), [&, steps](std::size_t n, std::uint64_t s) {
                          LangevinConfig lc;
                          lc.n_steps = steps;
                          lc.step_size = step;
                          lc.seed = s;
                          return langevin_sample(counted, lc, n).samples;
                        }});
  const auto rows = latency_bench(samplers, *counter, plain, bc.at("n").get<std::size_t>(),
                                  bc.at("warmup").get<std::size_t>(), cfg.at("seed").get<std::uint64_t>());
  const bool timing = !cfg.value("deterministic", false);
  const std::string table = format_latency_table(rows, timing);
  std::ofstream(path_in(cfg, "latency_table.txt")) << table;
  json j = json::array();
  for (const BenchRow& r : rows) {
    json row = r.to_json();
    if (!timing) {
      row.erase("sec_per_sample");
      row.erase("amortized");
    }
    j.push_back(row);
  }
  write_json(path_in(cfg, "bench.json"), j);
  std::cout << table;
  return 0;
}

int cmd_scenario(const std::string& name, const Common& common) {
  const json cfg = common.load(scenario_defaults(name));
  const ScenarioResult r = run_scenario(name, cfg);
  std::cout << r.metrics.dump(2) << "\n";
  return r.converged ? 0 : kExitUnconverged;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Latent-space energy control with invertible flows"};
  app.require_subcommand(1);
  Common common;
  std::string scenario;
  std::vector<std::pair<std::string, CLI::App*>> subs;
  auto add = [&](const std::string& name, const std::string& help) {
    CLI::App* s = app.add_subcommand(name, help);
    common.attach(s);
    subs.emplace_back(name, s);
    return s;
  };
  add("train", "Train a flow against a fixed energy");
  add("train-conditional", "Train a conditional flow over a condition prior");
  add("train-id", "Conditional training with the identity-preserving energy");
  add("solve-beta", "Solve the moment-constraint coefficients");
  add("iterate", "Run control stages sequentially and compose them");
  add("sample", "Draw samples with a flow, Langevin dynamics or rejection sampling");
  add("eval", "Evaluate a flow: quadrature KL, moment gap, attribute KL");
  add("bench", "Latency of flow sampling against Langevin dynamics");
  add("scenario", "Run a packaged scenario")->add_option("name", scenario, "Scenario name")->required();
  app.add_subcommand("list-scenarios", "Print scenario names");
  app.add_subcommand("print-config", "Print the default experiment config");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (app.got_subcommand("list-scenarios")) {
      for (const auto& n : scenario_names()) std::cout << n << "\n";
      return 0;
    }
    if (app.got_subcommand("print-config")) {
      std::cout << experiment_defaults().dump(2) << "\n";
      return 0;
    }
    if (app.got_subcommand("scenario")) return cmd_scenario(scenario, common);
    const json cfg = common.load(experiment_defaults());
    for (const auto& [name, sub] : subs) {
      if (!sub->parsed()) continue;
      if (name == "train") return cmd_train(cfg);
      if (name == "train-conditional") return cmd_train_conditional(cfg, false);
      if (name == "train-id") return cmd_train_conditional(cfg, true);
      if (name == "solve-beta") return cmd_solve_beta(cfg);
      if (name == "iterate") return cmd_iterate(cfg);
      if (name == "sample") return cmd_sample(cfg);
      if (name == "eval") return cmd_eval(cfg);
      if (name == "bench") return cmd_bench(cfg);
    }
    return kExitOther;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DimensionError& e) {
    std::cerr << "dimension error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitOther;
  }
}
