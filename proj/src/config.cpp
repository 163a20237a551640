#include "latentctl/config.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>

#include "latentctl/checkpoint.hpp"
#include "latentctl/errors.hpp"
#include "latentctl/io.hpp"
#include "latentctl/mixture_gan.hpp"
#include "latentctl/moment.hpp"
#include "latentctl/samplers.hpp"
#include "latentctl/training.hpp"

namespace latentctl {

using nlohmann::json;

std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string config_hash(const json& cfg) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(cfg.dump())));
  return buf;
}

std::string code_version() {
#ifdef LATENTCTL_GIT_REV
  return LATENTCTL_VERSION "+" LATENTCTL_GIT_REV;
#else
  return "unknown";
#endif
}

namespace {

bool compatible(const json& base, const json& value) {
  if (base.is_null()) return true;
  if (base.is_number()) return value.is_number();
  return base.type() == value.type();
}

std::string type_name(const json& j) { return j.type_name(); }

}  // namespace

void merge_strict(json& base, const json& user, const std::string& where) {
  if (!user.is_object()) throw ConfigError((where.empty() ? "config" : where) + " must be an object");
  for (const auto& [key, value] : user.items()) {
    const std::string path = where.empty() ? key : where + "." + key;
    if (!base.contains(key)) throw ConfigError("unknown config key '" + path + "'");
    json& slot = base[key];
    if (!compatible(slot, value))
      throw ConfigError("config key '" + path + "' expects " + type_name(slot) + ", got " + type_name(value));
    if (slot.is_object() && value.is_object()) merge_strict(slot, value, path);
    else slot = value;
  }
}

void apply_override(json& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string path = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::exception&) {
    value = text;
  }
  json* node = &cfg;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (node->is_object()) {
      if (!node->contains(key)) throw ConfigError("unknown config key '" + path + "'");
      node = &(*node)[key];
    } else if (node->is_array()) {
      std::size_t idx = 0;
      try {
        std::size_t used = 0;
        idx = std::stoul(key, &used);
        if (used != key.size()) throw std::invalid_argument(key);
      } catch (const std::exception&) {
        throw ConfigError("override '" + path + "': '" + key + "' is not an array index");
      }
      if (idx >= node->size()) throw ConfigError("override '" + path + "': index out of range");
      node = &(*node)[idx];
    } else {
      throw ConfigError("override '" + path + "' descends into a scalar");
    }
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  if (!compatible(*node, value))
    throw ConfigError("config key '" + path + "' expects " + type_name(*node) + ", got " + type_name(value));
  if (node->is_object()) merge_strict(*node, value, path);
  else *node = value;
}

json load_config(json defaults, const LoadOptions& opts) {
  if (opts.config_path) merge_strict(defaults, read_json(*opts.config_path));
  for (const std::string& o : opts.overrides) apply_override(defaults, o);
  if (opts.seed) defaults["seed"] = *opts.seed;
  if (opts.out) defaults["out"] = *opts.out;
  return defaults;
}

json make_manifest(const std::string& command, const json& cfg) {
  return {{"command", command},
          {"config_hash", config_hash(cfg)},
          {"code_version", code_version()},
          {"seed", cfg.value("seed", json())},
          {"config", cfg}};
}

json experiment_defaults() {
  json train = TrainConfig{}.to_json();
  train["seed"] = nullptr;
  json gan = GanConfig{}.to_json();
  gan["seed"] = nullptr;
  json solver = MomentConfig{}.to_json();
  solver["seed"] = nullptr;
  json langevin = LangevinConfig{}.to_json();
  langevin["seed"] = nullptr;
  json rejection = RejectionConfig{}.to_json();
  rejection["seed"] = nullptr;
  return {
      {"seed", 0},
      {"out", "runs/latest"},
      {"deterministic", false},
      {"generator",
       {{"kind", "linear-gaussian"},
        {"dim", 2},
        {"a", nullptr},
        {"b", nullptr},
        {"classes", 4},
        {"embed_dim", 2},
        {"seed", nullptr},
        {"checkpoint", ""},
        {"gan", gan}}},
      {"mixture", default_mixture().to_json()},
      {"energies", json::array()},
      {"flow", {{"n_blocks", 8}, {"hidden_width", 64}, {"seed", nullptr}, {"checkpoint", ""}}},
      {"train", train},
      {"id", {{"embedding", {{"slice", json::array()}, {"hidden", 16}, {"out", 8}, {"seed", 0}}}}},
      {"moment", {{"gamma", {{"kind", "fair-mixture"}}}, {"mu", json::array()}, {"solver", solver}}},
      {"stages", json::array()},
      {"sample",
       {{"n", 10000},
        {"sampler", "flow"},
        {"rho", json::array()},
        {"langevin", langevin},
        {"rejection", rejection}}},
      {"eval",
       {{"samples", 100000},
        {"grid_lo", {-6.0, -6.0}},
        {"grid_hi", {6.0, 6.0}},
        {"resolution", {256, 256}},
        {"classifier", {{"kind", "fair-mixture"}}},
        {"reference", json::array()},
        {"samples_csv", ""}}},
      {"bench", {{"n", 2000}, {"warmup", 10}, {"langevin_steps", {50, 200}}, {"step_size", 0.02}}},
  };
}

std::uint64_t section_seed(const json& cfg, const json& section) {
  if (section.contains("seed") && !section["seed"].is_null()) return section["seed"].get<std::uint64_t>();
  return cfg.at("seed").get<std::uint64_t>();
}

MixtureSpec mixture_from_config(const json& cfg) {
  try {
    return MixtureSpec::from_json(cfg.at("mixture"));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("mixture: ") + e.what());
  }
}

namespace {

Tensor matrix_from_json(const json& j, const std::string& what) {
  if (!j.is_array() || j.empty()) throw ConfigError(what + " must be a non-empty array of rows");
  const std::size_t rows = j.size(), cols = j[0].size();
  std::vector<double> v;
  for (const json& row : j) {
    if (!row.is_array() || row.size() != cols) throw ConfigError(what + " rows must have equal length");
    for (const json& x : row) v.push_back(x.get<double>());
  }
  return Tensor::matrix(rows, cols, std::move(v));
}

std::vector<double> vec(const json& j, const std::string& what) {
  try {
    return j.get<std::vector<double>>();
  } catch (const json::exception&) {
    throw ConfigError(what + " must be an array of numbers");
  }
}

void allowed_keys(const json& j, const std::vector<std::string>& keys, const std::string& what) {
  if (!j.is_object()) throw ConfigError(what + " must be an object");
  for (const auto& [key, v] : j.items())
    if (std::find(keys.begin(), keys.end(), key) == keys.end())
      throw ConfigError("unknown key '" + key + "' in " + what);
}

ModelPtr slice_or_identity(const json& spec, std::size_t dim, const std::string& what) {
  if (!spec.contains("slice") || spec["slice"].empty()) return std::make_shared<IdentityModel>(dim);
  const auto s = spec["slice"].get<std::vector<std::size_t>>();
  if (s.size() != 2) throw ConfigError(what + ".slice must be [begin, end]");
  if (!(s[0] < s[1] && s[1] <= dim)) throw ConfigError(what + ".slice out of range for output dim " + std::to_string(dim));
  return std::make_shared<SliceModel>(dim, s[0], s[1]);
}

std::vector<std::vector<std::size_t>> groups_of(const json& spec) {
  if (!spec.contains("groups")) return {};
  return spec["groups"].get<std::vector<std::vector<std::size_t>>>();
}

ModelPtr mixture_classifier(const json& spec, const MixtureSpec& mixture, std::size_t output_dim,
                            const std::string& what) {
  if (mixture.dim() != output_dim)
    throw ConfigError(what + ": mixture dimension " + std::to_string(mixture.dim()) + " != generator output " +
                      std::to_string(output_dim));
  ModelPtr clf = std::make_shared<FairClassifier>(mixture);
  const auto groups = groups_of(spec);
  if (!groups.empty()) clf = std::make_shared<MergedClassifier>(clf, groups);
  return clf;
}

struct Term {
  double lambda;
  EnergyPtr energy;           // fixed term
  ModelPtr regressor;         // conditional term
  Metric metric = Metric::Euclidean;
};

Term build_term(const json& t, const MixtureSpec& mixture, std::size_t D, std::size_t index) {
  const std::string what = "energies." + std::to_string(index);
  if (!t.is_object() || !t.contains("kind")) throw ConfigError(what + " needs a 'kind'");
  const std::string kind = t["kind"].get<std::string>();
  const double lambda = t.value("lambda", 1.0);
  try {
    if (kind == "quadratic") {
      allowed_keys(t, {"kind", "lambda", "target"}, what);
      const auto target = vec(t.at("target"), what + ".target");
      if (target.size() != D) throw ConfigError(what + ".target must have length " + std::to_string(D));
      return {lambda, quadratic_energy(Tensor::vector(target)), nullptr};
    }
    if (kind == "classifier") {
      allowed_keys(t, {"kind", "lambda", "target", "groups"}, what);
      return {lambda,
              std::make_shared<ClassifierEnergy>(mixture_classifier(t, mixture, D, what), t.at("target").get<std::size_t>()),
              nullptr};
    }
    if (kind == "regressor") {
      allowed_keys(t, {"kind", "lambda", "target", "slice", "metric", "conditional"}, what);
      ModelPtr reg = slice_or_identity(t, D, what);
      const Metric metric = metric_from_string(t.value("metric", std::string("euclidean")));
      if (t.value("conditional", false)) return {lambda, nullptr, reg, metric};
      const auto target = vec(t.at("target"), what + ".target");
      return {lambda, std::make_shared<RegressorEnergy>(reg, Tensor::vector(target), metric), nullptr};
    }
    if (kind == "signed-distance") {
      allowed_keys(t, {"kind", "lambda", "l1", "l2", "u", "s"}, what);
      return {lambda,
              std::make_shared<SignedDistanceEnergy>(D, t.at("l1").get<std::vector<std::size_t>>(),
                                                     t.at("l2").get<std::vector<std::size_t>>(), vec(t.at("u"), what + ".u"),
                                                     t.value("s", 0.0)),
              nullptr};
    }
    if (kind == "moment") {
      allowed_keys(t, {"kind", "lambda", "beta", "gamma"}, what);
      const ModelPtr gamma = build_gamma(t.value("gamma", json{{"kind", "fair-mixture"}}), mixture, D);
      const auto beta = vec(t.at("beta"), what + ".beta");
      return {lambda, std::make_shared<MomentEnergy>(Tensor::vector(beta), gamma), nullptr};
    }
    if (kind == "similarity") {
      allowed_keys(t, {"kind", "lambda", "embedding", "reference"}, what);
      const ModelPtr r = build_embedding(t.at("embedding"), D);
      const auto ref = vec(t.at("reference"), what + ".reference");
      if (ref.size() != D) throw ConfigError(what + ".reference must be a point of length " + std::to_string(D));
      return {lambda, std::make_shared<SimilarityEnergy>(r, Tensor::vector(ref)), nullptr};
    }
  } catch (const json::exception& e) {
    throw ConfigError(what + ": " + e.what());
  } catch (const DimensionError& e) {
    throw ConfigError(what + ": " + e.what());
  }
  throw ConfigError(what + ": unknown energy kind '" + kind + "'");
}

}  // namespace

GeneratorPtr build_generator(const json& cfg) {
  const json& gen = cfg.at("generator");
  const std::string kind = gen.at("kind").get<std::string>();
  const std::string ck = gen.at("checkpoint").get<std::string>();
  if (!ck.empty()) {
    if (!std::filesystem::exists(ck)) throw ConfigError("generator.checkpoint '" + ck + "' does not exist");
    return generator_from_checkpoint(Checkpoint::load(ck));
  }
  const std::size_t dim = gen.at("dim").get<std::size_t>();
  const std::uint64_t seed = section_seed(cfg, gen);
  if (kind == "linear-gaussian") {
    Tensor a = gen["a"].is_null() ? Tensor::identity(dim) : matrix_from_json(gen["a"], "generator.a");
    Tensor b = gen["b"].is_null() ? Tensor::vector(std::vector<double>(a.rows(), 0.0))
                                  : Tensor::vector(vec(gen["b"], "generator.b"));
    return make_linear_gaussian(std::move(a), std::move(b));
  }
  if (kind == "warped-gaussian") return make_warped_gaussian(dim, seed);
  if (kind == "class-conditional")
    return make_class_conditional(dim, gen.at("classes").get<std::size_t>(), gen.at("embed_dim").get<std::size_t>(), seed);
  if (kind == "mixture-gan") {
    GanConfig gc = GanConfig::from_json(gen.at("gan"));
    gc.seed = section_seed(cfg, gen.at("gan"));
    return train_mixture_gan(mixture_from_config(cfg), gc).generator;
  }
  throw ConfigError("unknown generator kind '" + kind + "'");
}

ModelPtr build_gamma(const json& spec, const MixtureSpec& mixture, std::size_t output_dim) {
  if (!spec.is_object() || !spec.contains("kind")) throw ConfigError("gamma needs a 'kind'");
  const std::string kind = spec["kind"].get<std::string>();
  if (kind == "fair-mixture") {
    allowed_keys(spec, {"kind", "groups"}, "gamma");
    return std::make_shared<ProbabilitiesModel>(mixture_classifier(spec, mixture, output_dim, "gamma"));
  }
  if (kind == "sigmoid") {
    allowed_keys(spec, {"kind", "slice"}, "gamma");
    ModelPtr inner = slice_or_identity(spec, output_dim, "gamma");
    return std::make_shared<SigmoidModel>(inner->output_dim(), inner);
  }
  throw ConfigError("unknown gamma kind '" + kind + "'");
}

ModelPtr build_embedding(const json& spec, std::size_t output_dim) {
  allowed_keys(spec, {"slice", "hidden", "out", "seed"}, "embedding");
  ModelPtr in = slice_or_identity(spec, output_dim, "embedding");
  auto mlp = MlpModel::embedding(in->output_dim(), spec.value("hidden", 16), spec.value("out", 8),
                                 spec.value("seed", std::uint64_t{0}));
  if (in->output_dim() == output_dim && !(spec.contains("slice") && !spec["slice"].empty())) return mlp;
  return std::make_shared<ChainModel>(mlp, in);
}

std::shared_ptr<CompositeEnergy> build_energy(const json& terms, const MixtureSpec& mixture, std::size_t D) {
  if (!terms.is_array()) throw ConfigError("energies must be an array");
  auto out = std::make_shared<CompositeEnergy>();
  for (std::size_t i = 0; i < terms.size(); ++i) {
    Term t = build_term(terms[i], mixture, D, i);
    if (t.regressor)
      throw ConfigError("energies." + std::to_string(i) + " is conditional; use a conditional command");
    out->add(t.lambda, t.energy);
  }
  return out;
}

EnergyFamily build_energy_family(const json& terms, const MixtureSpec& mixture, std::size_t D) {
  if (!terms.is_array()) throw ConfigError("energies must be an array");
  EnergyFamily family;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    Term t = build_term(terms[i], mixture, D, i);
    if (t.regressor) family.add_regressor(t.lambda, t.regressor, t.metric);
    else family.add_fixed(t.lambda, t.energy);
  }
  if (family.condition_dim() == 0) throw ConfigError("conditional training needs a regressor term with conditional=true");
  return family;
}

FlowStack build_flow(const json& cfg, std::size_t dim, std::size_t condition_dim) {
  const json& f = cfg.at("flow");
  const std::string ck = f.at("checkpoint").get<std::string>();
  if (!ck.empty()) {
    if (!std::filesystem::exists(ck)) throw ConfigError("flow.checkpoint '" + ck + "' does not exist");
    FlowStack flow = FlowStack::from_checkpoint(Checkpoint::load(ck));
    if (flow.dim() != dim || flow.condition_dim() != condition_dim)
      throw ConfigError("flow.checkpoint has dim " + std::to_string(flow.dim()) + "/" +
                        std::to_string(flow.condition_dim()) + ", expected " + std::to_string(dim) + "/" +
                        std::to_string(condition_dim));
    return flow;
  }
  return init_flow(FlowSpec{dim, f.at("n_blocks").get<std::size_t>(), f.at("hidden_width").get<std::size_t>(),
                            condition_dim > 0, condition_dim, section_seed(cfg, f)});
}

}  // namespace latentctl
