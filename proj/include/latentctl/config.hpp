#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "latentctl/energy.hpp"
#include "latentctl/flow.hpp"
#include "latentctl/generators.hpp"
#include "latentctl/models.hpp"

namespace latentctl {

std::uint64_t fnv1a64(const std::string& bytes);
/// FNV-1a of the canonical (sorted-key, compact) dump, as 16 hex digits.
std::string config_hash(const nlohmann::json& cfg);
/// Source revision baked in at configure time.
std::string code_version();

/// Overlays `user` on `base`. Every key of `user` must exist in `base` with a
/// compatible type (numbers interchangeable; a null in `base` accepts anything);
/// objects merge recursively, everything else is replaced.
void merge_strict(nlohmann::json& base, const nlohmann::json& user, const std::string& where = "");
/// Applies `dotted.path=value`; the path must exist. The value is parsed as JSON
/// when possible and taken as a string otherwise. Array elements use numeric keys.
void apply_override(nlohmann::json& cfg, const std::string& assignment);

struct LoadOptions {
  std::optional<std::string> config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
};

/// defaults <- config file <- --set overrides <- --seed / --out.
nlohmann::json load_config(nlohmann::json defaults, const LoadOptions& opts);

/// Run manifest: command, config hash, code version, seed, full config.
nlohmann::json make_manifest(const std::string& command, const nlohmann::json& cfg);

/// Defaults of the experiment document used by the train/sample/eval/bench commands.
nlohmann::json experiment_defaults();

/// A section's "seed", or the top-level seed when the section leaves it null.
std::uint64_t section_seed(const nlohmann::json& cfg, const nlohmann::json& section);

MixtureSpec mixture_from_config(const nlohmann::json& cfg);

/// Generator from cfg["generator"]. A mixture-gan without a checkpoint is trained
/// here (deterministic in its seed).
GeneratorPtr build_generator(const nlohmann::json& cfg);

/// Model producing gamma(x) for moment constraints from a gamma spec.
ModelPtr build_gamma(const nlohmann::json& spec, const MixtureSpec& mixture, std::size_t output_dim);

/// Embedding network R from an embedding spec.
ModelPtr build_embedding(const nlohmann::json& spec, std::size_t output_dim);

/// Sum of the configured terms. Conditional regressor terms are rejected.
std::shared_ptr<CompositeEnergy> build_energy(const nlohmann::json& terms, const MixtureSpec& mixture,
                                              std::size_t output_dim);

/// Fixed terms plus conditional regressor terms (target = rho).
EnergyFamily build_energy_family(const nlohmann::json& terms, const MixtureSpec& mixture, std::size_t output_dim);

/// Flow from cfg["flow"]: loaded from its checkpoint when set, otherwise freshly initialized.
FlowStack build_flow(const nlohmann::json& cfg, std::size_t dim, std::size_t condition_dim);

}  // namespace latentctl
