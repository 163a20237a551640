#pragma once

#include <string>
#include <vector>

#include "json.hpp"

namespace latentctl {

/// appendix-a, gaussian-oracle, moment-debias, conditional-pose-analog, iterative-debias, latency.
std::vector<std::string> scenario_names();

/// Default configuration of a scenario; throws ConfigError for an unknown name.
nlohmann::json scenario_defaults(const std::string& name);

struct ScenarioResult {
  /// Every reported number. Wall-clock values live under "timing" only.
  nlohmann::json metrics;
  /// False when a solver inside the scenario stopped without reaching its tolerance.
  bool converged = true;
};

/// Runs a scenario end to end and writes its artifacts (samples, grids, traces,
/// checkpoints, metrics.json, manifest.json) under cfg["out"].
ScenarioResult run_scenario(const std::string& name, const nlohmann::json& cfg);

/// The metrics without their "timing" entries, for bit-identical comparisons.
nlohmann::json strip_timing(nlohmann::json metrics);

}  // namespace latentctl
