#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "latentctl/energy.hpp"
#include "latentctl/flow.hpp"
#include "latentctl/samplers.hpp"

namespace latentctl {

/// A metric value together with how it was estimated.
struct EvalReport {
  std::string metric;
  double value = 0.0;
  std::string method;
  std::size_t samples = 0;
  std::uint64_t seed = 0;
  double wall_seconds = 0.0;

  nlohmann::json to_json() const;
};

struct KlResult {
  double kl = 0.0;
  double flow_mass = 0.0;  // flow probability inside the grid
};

/// sum over cells of vol * p_f log(p_f / p_target), p_target = grid.values / grid.z.
KlResult kl_flow_to_target(const FlowStack& flow, const DensityGrid& grid, const Tensor* rho = nullptr);

/// || mean_i gamma(x_i) - mu ||_2.
double moment_gap(const Tensor& samples, const Model& gamma, const Tensor& mu);

/// Fraction of samples whose argmax label is k.
std::vector<double> label_distribution(const Tensor& samples, const Model& classifier);

/// KL(empirical || reference) with empty categories set to 1/(2n) before renormalizing.
double attribute_kl(const std::vector<double>& empirical, const std::vector<double>& reference, std::size_t n);
double attribute_kl(const Tensor& samples, const Model& classifier, const std::vector<double>& reference);

/// Total variation between 2D histograms over the pooled bounding box.
double tv_distance_2d(const Tensor& a, const Tensor& b, std::size_t bins = 50);

struct BenchSampler {
  std::string name;
  /// Draws n latent samples.
  std::function<Tensor(std::size_t n, std::uint64_t seed)> draw;
};

struct BenchRow {
  std::string name;
  std::size_t n = 0;
  double sec_per_sample = 0.0;  // median of 5 batch timings
  double gradient_calls_per_sample = 0.0;
  double energy_calls_per_sample = 0.0;
  double mean_energy = 0.0;  // over all 5 timed batches
  /// Per-sample time is below 1 microsecond, so only the batch average is meaningful.
  bool amortized = false;

  nlohmann::json to_json() const;
};

/// Times every sampler on n samples after `warmup` discarded ones. `counter`
/// must be the energy instance the samplers evaluate; `target` scores the
/// samples of every repetition and is not counted.
std::vector<BenchRow> latency_bench(const std::vector<BenchSampler>& samplers, const CountingEnergy& counter,
                                    const LatentEBM& target, std::size_t n, std::size_t warmup, std::uint64_t seed);

/// Plain-text table; without `timing` the wall-clock columns are left out so the text is reproducible.
std::string format_latency_table(const std::vector<BenchRow>& rows, bool timing = true);

}  // namespace latentctl
