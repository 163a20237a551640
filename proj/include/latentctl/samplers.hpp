#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "latentctl/energy.hpp"
#include "latentctl/random.hpp"

namespace latentctl {

struct LangevinConfig {
  std::size_t n_steps = 200;
  double step_size = 0.05;
  std::uint64_t seed = 0;
  /// Metropolis-adjusted (MALA) instead of unadjusted dynamics.
  bool metropolis = false;
  /// Chains advanced together; chunk c draws from RNG stream c, so results
  /// depend on the chunk size but not on scheduling.
  std::size_t chunk = 4096;

  void validate() const;
  nlohmann::json to_json() const;
  static LangevinConfig from_json(const nlohmann::json& j);
};

struct LangevinResult {
  Tensor samples;
  std::uint64_t gradient_evaluations = 0;  // rows evaluated with a gradient
  std::size_t restarts = 0;
  double acceptance_rate = 1.0;  // MALA only
  double wall_seconds = 0.0;
};

/// n independent chains from N(0,I): z += (eta/2) grad log u(z) + sqrt(eta) xi.
/// A chain that produces a non-finite value is restarted once from a fresh draw.
LangevinResult langevin_sample(const LatentEBM& ebm, const LangevinConfig& cfg, std::size_t n);

struct RejectionConfig {
  /// Envelope M >= sup exp(-E(G(z))); 0 estimates it from prior draws.
  double envelope = 0.0;
  std::size_t estimate_draws = 1000000;
  double safety = 1.5;
  std::size_t round = 16384;
  std::uint64_t max_proposals = 200000000;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static RejectionConfig from_json(const nlohmann::json& j);
};

struct RejectionResult {
  Tensor samples;
  double acceptance_rate = 0.0;
  double envelope = 0.0;
  bool envelope_estimated = false;
  std::uint64_t proposals = 0;
};

/// Proposes z ~ N(0,I) and accepts with probability exp(-E(G(z))) / M.
RejectionResult rejection_sample(const LatentEBM& ebm, const RejectionConfig& cfg, std::size_t n);

/// Midpoint-rule tabulation of u(z) = N(z|0,I) exp(-E(G(z))) on a box.
struct DensityGrid {
  std::vector<double> lo, hi;
  std::vector<std::size_t> resolution;
  std::vector<double> values;  // row-major, last dimension fastest
  double z = 0.0;              // sum of values times cell volume

  std::size_t dim() const { return lo.size(); }
  std::size_t cells() const;
  double cell_volume() const;
  double width(std::size_t axis) const { return (hi[axis] - lo[axis]) / static_cast<double>(resolution[axis]); }
  /// Cell midpoints, one row per cell in storage order.
  Tensor midpoints() const;
  /// values / z: a density integrating to one over the box.
  std::vector<double> normalized() const;
  /// Cell index of a point, or -1 outside the box.
  long long locate(const double* point) const;
  void write_csv(const std::string& path) const;
};

DensityGrid quadrature_grid(const LatentEBM& ebm, const std::vector<double>& lo, const std::vector<double>& hi,
                            const std::vector<std::size_t>& resolution);

}  // namespace latentctl
