#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "latentctl/config.hpp"
#include "latentctl/errors.hpp"
#include "latentctl/io.hpp"
#include "latentctl/random.hpp"
#include "latentctl/scenarios.hpp"

using namespace latentctl;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string temp_path(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "latentctl_unit";
  fs::create_directories(dir);
  return (dir / name).string();
}

}  // namespace

TEST_CASE("FNV-1a reference values and stable config hashes") {
  CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
  CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
  const json a = {{"b", 1}, {"a", {1, 2}}};
  const json b = json::parse(R"({"a":[1,2],"b":1})");
  CHECK(config_hash(a) == config_hash(b));
  CHECK(config_hash(a).size() == 16);
  CHECK(config_hash(a) != config_hash(json{{"b", 2}, {"a", {1, 2}}}));
}

TEST_CASE("strict merge rejects unknown keys and wrong types") {
  json base = {{"train", {{"lr", 0.001}, {"steps", 100}}}, {"name", "x"}, {"free", nullptr}};
  merge_strict(base, json{{"train", {{"lr", 1}}}});
  CHECK(base["train"]["lr"] == 1);
  CHECK(base["train"]["steps"] == 100);
  merge_strict(base, json{{"free", {{"anything", true}}}});
  CHECK(base["free"]["anything"] == true);
  CHECK_THROWS_AS(merge_strict(base, json{{"trian", {{"lr", 1}}}}), ConfigError);
  CHECK_THROWS_AS(merge_strict(base, json{{"train", {{"lr", "fast"}}}}), ConfigError);
  CHECK_THROWS_AS(merge_strict(base, json{{"name", 3}}), ConfigError);
}

TEST_CASE("dotted overrides") {
  json cfg = {{"train", {{"lr", 0.001}}}, {"energies", {{{"weight", 1.0}}}}, {"tag", "a"}};
  apply_override(cfg, "train.lr=1e-3");
  CHECK(cfg["train"]["lr"] == 1e-3);
  apply_override(cfg, "energies.0.weight=2.5");
  CHECK(cfg["energies"][0]["weight"] == 2.5);
  apply_override(cfg, "tag=hello");
  CHECK(cfg["tag"] == "hello");
  CHECK_THROWS_AS(apply_override(cfg, "train.lrr=1"), ConfigError);
  CHECK_THROWS_AS(apply_override(cfg, "train.lr"), ConfigError);
  CHECK_THROWS_AS(apply_override(cfg, "energies.3.weight=1"), ConfigError);
}

TEST_CASE("load order: defaults, file, overrides, flags") {
  const std::string path = temp_path("cfg.json");
  write_json(path, json{{"seed", 3}, {"train", {{"steps", 50}}}});
  LoadOptions opts;
  opts.config_path = path;
  opts.overrides = {"train.steps=70"};
  opts.seed = 9;
  opts.out = "elsewhere";
  const json cfg = load_config(experiment_defaults(), opts);
  CHECK(cfg["train"]["steps"] == 70);
  CHECK(cfg["seed"] == 9);
  CHECK(cfg["out"] == "elsewhere");
  const json m = make_manifest("train", cfg);
  CHECK(m["config_hash"] == config_hash(cfg));
  CHECK(m["seed"] == 9);
  CHECK(m["command"] == "train");
  CHECK(m["code_version"] == code_version());

  opts.config_path = temp_path("missing.json");
  CHECK_THROWS_AS(load_config(experiment_defaults(), opts), ConfigError);
}

TEST_CASE("section seeds inherit the top-level seed") {
  const json cfg = {{"seed", 11}};
  CHECK(section_seed(cfg, json{{"seed", nullptr}}) == 11);
  CHECK(section_seed(cfg, json{{"seed", 4}}) == 4);
}

TEST_CASE("energy terms are validated per kind") {
  const json cfg = experiment_defaults();
  const MixtureSpec mix = mixture_from_config(cfg);
  const json good = json::parse(R"([{"kind":"quadratic","lambda":1.0,"target":[2.0,0.0]}])");
  const auto e = build_energy(good, mix, 2);
  CHECK((*e)(Tensor::matrix({{2.0, 0.0}}))[0] == doctest::Approx(0.0));
  const json bad = json::parse(R"([{"kind":"quadratic","lambda":1.0,"target":[2.0,0.0],"class":1}])");
  CHECK_THROWS_AS(build_energy(bad, mix, 2), ConfigError);
  CHECK_THROWS_AS(build_energy(json::parse(R"([{"kind":"nope"}])"), mix, 2), ConfigError);
  CHECK_THROWS_AS(build_energy_family(good, mix, 2), ConfigError);
}

TEST_CASE("sample CSV round trip is exact") {
  Rng rng = make_rng(5);
  const Tensor x = standard_normal(rng, 40, 3);
  const std::string path = temp_path("s.csv");
  write_samples_csv(path, x, "x");
  CHECK(max_abs_diff(read_samples_csv(path), x) == 0.0);
  const Tensor z = standard_normal(rng, 40, 2);
  write_samples_csv(path, {{"z", &z}, {"x", &x}});
  const Tensor both = read_samples_csv(path);
  CHECK(both.rows() == 40);
  CHECK(both.cols() == 5);
  CHECK(both.at(7, 1) == z.at(7, 1));
  CHECK(both.at(7, 4) == x.at(7, 2));
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  CHECK(header == "z0,z1,x0,x1,x2");
}

TEST_CASE("histogram CSV integrates to one") {
  Rng rng = make_rng(6);
  const Tensor x = standard_normal(rng, 5000, 2);
  const std::string path = temp_path("h.csv");
  write_histogram_csv(path, x, {-8, -8}, {8, 8}, 16);
  const Tensor h = read_samples_csv(path);
  CHECK(h.rows() == 256);
  double mass = 0.0;
  for (std::size_t r = 0; r < h.rows(); ++r) mass += h.at(r, 2);
  CHECK(mass * 1.0 * 1.0 == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("malformed JSON is a config error") {
  const std::string path = temp_path("bad.json");
  std::ofstream(path) << "{\"a\": ";
  CHECK_THROWS_AS(read_json(path), ConfigError);
}

TEST_CASE("scenario registry") {
  CHECK(scenario_names().size() == 6);
  for (const auto& n : scenario_names()) CHECK(scenario_defaults(n)["seed"] == 0);
  CHECK_THROWS_AS(scenario_defaults("nope"), ConfigError);
  const json m = {{"a", 1}, {"timing", {{"t", 2}}}, {"rows", {{{"timing", 1}, {"b", 2}}}}};
  CHECK(strip_timing(m) == json{{"a", 1}, {"rows", {{{"b", 2}}}}});
}

TEST_CASE("moment-debias scenario is seed-deterministic") {
  json cfg = scenario_defaults("moment-debias");
  cfg["out"] = temp_path("md1");
  const json a = run_scenario("moment-debias", cfg).metrics;
  cfg["out"] = temp_path("md2");
  const json b = run_scenario("moment-debias", cfg).metrics;
  CHECK(strip_timing(a).dump() == strip_timing(b).dump());
  CHECK(std::abs(a["targets"][1]["beta"].get<double>()) < 0.02);
  CHECK(fs::exists(fs::path(temp_path("md1")) / "manifest.json"));
}
