#include "latentctl/evaluation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <sstream>

#include "latentctl/errors.hpp"

namespace latentctl {

nlohmann::json EvalReport::to_json() const {
  return {{"metric", metric}, {"value", value}, {"method", method}, {"samples", samples}, {"seed", seed},
          {"wall_seconds", wall_seconds}};
}

KlResult kl_flow_to_target(const FlowStack& flow, const DensityGrid& grid, const Tensor* rho) {
  if (grid.dim() != flow.dim()) throw DimensionError("grid and flow dimensions differ");
  const Tensor mid = grid.midpoints();
  const Tensor lq = flow.log_prob(mid, rho);
  const double vol = grid.cell_volume();
  const double log_z = std::log(grid.z);
  KlResult out;
  for (std::size_t i = 0; i < grid.cells(); ++i) {
    const double q = std::exp(lq[i]);
    if (q == 0.0) continue;
    out.flow_mass += q * vol;
    const double lp = std::log(grid.values[i]) - log_z;
    out.kl += vol * q * (lq[i] - lp);
  }
  if (out.flow_mass < 1.0 - 1e-4) {
    throw NumericalError("grid holds only " + std::to_string(out.flow_mass) +
                         " of the flow's mass; widen the bounds");
  }
  return out;
}

double moment_gap(const Tensor& samples, const Model& gamma, const Tensor& mu) {
  if (samples.rows() < 1000) throw DimensionError("moment_gap needs at least 1000 samples");
  const Tensor f = gamma(samples);
  if (f.cols() != mu.size()) throw DimensionError("mu length must match gamma's output");
  double s = 0.0;
  for (std::size_t j = 0; j < f.cols(); ++j) {
    double m = 0.0;
    for (std::size_t r = 0; r < f.rows(); ++r) m += f.at(r, j);
    const double t = m / static_cast<double>(f.rows()) - mu[j];
    s += t * t;
  }
  return std::sqrt(s);
}

std::vector<double> label_distribution(const Tensor& samples, const Model& classifier) {
  const auto labels = argmax_rows(classifier(samples));
  std::vector<double> out(classifier.output_dim(), 0.0);
  for (std::size_t l : labels) out[l] += 1.0;
  for (double& v : out) v /= static_cast<double>(labels.size());
  return out;
}

double attribute_kl(const std::vector<double>& empirical, const std::vector<double>& reference, std::size_t n) {
  if (empirical.size() != reference.size()) throw DimensionError("label count differs from the reference");
  if (n == 0) throw DimensionError("attribute_kl needs samples");
  std::vector<double> p(empirical);
  const double floor = 1.0 / (2.0 * static_cast<double>(n));
  double total = 0.0;
  for (double& v : p) {
    if (v == 0.0) v = floor;
    total += v;
  }
  double kl = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    const double pk = p[k] / total;
    kl += pk * std::log(pk / reference[k]);
  }
  return kl;
}

double attribute_kl(const Tensor& samples, const Model& classifier, const std::vector<double>& reference) {
  if (classifier.output_dim() != reference.size()) throw DimensionError("label count differs from the reference");
  return attribute_kl(label_distribution(samples, classifier), reference, samples.rows());
}

double tv_distance_2d(const Tensor& a, const Tensor& b, std::size_t bins) {
  if (a.cols() != 2 || b.cols() != 2) throw DimensionError("tv_distance_2d needs 2D samples");
  double lo[2] = {INFINITY, INFINITY}, hi[2] = {-INFINITY, -INFINITY};
  for (const Tensor* t : {&a, &b})
    for (std::size_t r = 0; r < t->rows(); ++r)
      for (std::size_t j = 0; j < 2; ++j) {
        lo[j] = std::min(lo[j], t->at(r, j));
        hi[j] = std::max(hi[j], t->at(r, j));
      }
  auto hist = [&](const Tensor& t) {
    std::vector<double> h(bins * bins, 0.0);
    for (std::size_t r = 0; r < t.rows(); ++r) {
      std::size_t k[2];
      for (std::size_t j = 0; j < 2; ++j) {
        const double w = (hi[j] - lo[j]) / static_cast<double>(bins);
        k[j] = w > 0 ? std::min(static_cast<std::size_t>((t.at(r, j) - lo[j]) / w), bins - 1) : 0;
      }
      h[k[0] * bins + k[1]] += 1.0 / static_cast<double>(t.rows());
    }
    return h;
  };
  const auto ha = hist(a), hb = hist(b);
  double tv = 0.0;
  for (std::size_t i = 0; i < ha.size(); ++i) tv += std::abs(ha[i] - hb[i]);
  return 0.5 * tv;
}

nlohmann::json BenchRow::to_json() const {
  return {{"name", name},
          {"n", n},
          {"sec_per_sample", sec_per_sample},
          {"gradient_calls_per_sample", gradient_calls_per_sample},
          {"energy_calls_per_sample", energy_calls_per_sample},
          {"mean_energy", mean_energy},
          {"amortized", amortized}};
}

std::vector<BenchRow> latency_bench(const std::vector<BenchSampler>& samplers, const CountingEnergy& counter,
                                    const LatentEBM& target, std::size_t n, std::size_t warmup, std::uint64_t seed) {
  if (warmup < 10) throw ConfigError("latency_bench needs at least 10 warmup samples");
  if (n < 1) throw ConfigError("latency_bench needs samples");
  std::vector<BenchRow> rows;
  for (const BenchSampler& s : samplers) {
    BenchRow row;
    row.name = s.name;
    row.n = n;
    (void)s.draw(warmup, seed + 1000);
    std::vector<double> times;
    double energy_sum = 0.0;
    std::size_t energy_rows = 0;
    for (std::size_t rep = 0; rep < 5; ++rep) {
      const std::uint64_t grad0 = counter.gradient_rows(), rows0 = counter.rows();
      const auto t0 = std::chrono::steady_clock::now();
      Tensor z = s.draw(n, seed + rep);
      const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      times.push_back(dt / static_cast<double>(n));
      if (rep == 0) {
        row.gradient_calls_per_sample =
            static_cast<double>(counter.gradient_rows() - grad0) / static_cast<double>(n);
        row.energy_calls_per_sample = static_cast<double>(counter.rows() - rows0) / static_cast<double>(n);
      }
      for (double v : target.energy_values(z).values()) energy_sum += v;
      energy_rows += z.rows();
    }
    std::sort(times.begin(), times.end());
    row.sec_per_sample = times[2];
    row.amortized = row.sec_per_sample < 1e-6;
    row.mean_energy = energy_sum / static_cast<double>(energy_rows);
    rows.push_back(row);
  }
  return rows;
}

std::string format_latency_table(const std::vector<BenchRow>& rows, bool timing) {
  std::ostringstream os;
  os << std::left << std::setw(16) << "sampler" << std::right;
  if (timing) os << std::setw(16) << "sec/sample";
  os << std::setw(14) << "grad calls" << std::setw(14) << "energy" << '\n';
  for (const BenchRow& r : rows) {
    os << std::left << std::setw(16) << r.name << std::right;
    if (timing) os << std::setw(16) << std::scientific << std::setprecision(3) << r.sec_per_sample;
    os << std::setw(14) << std::fixed << std::setprecision(1) << r.gradient_calls_per_sample << std::setw(14)
       << std::setprecision(4) << r.mean_energy << (timing && r.amortized ? "  (batch-amortized)" : "") << '\n';
  }
  return os.str();
}

}  // namespace latentctl
