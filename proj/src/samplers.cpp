#include "latentctl/samplers.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>

#include "latentctl/errors.hpp"

namespace latentctl {

namespace {

constexpr std::uint64_t kRestartStreams = 1ULL << 40;

struct ChainStats {
  std::uint64_t grad_rows = 0;
  std::uint64_t proposals = 0;
  std::uint64_t accepted = 0;
};

bool row_finite(const Tensor& t, std::size_t r) {
  for (std::size_t j = 0; j < t.cols(); ++j)
    if (!std::isfinite(t.at(r, j))) return false;
  return true;
}

Tensor gather(const Tensor& t, const std::vector<std::size_t>& rows) {
  Tensor out = Tensor::zeros(rows.size(), t.cols());
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) out.at(i, j) = t.at(rows[i], j);
  return out;
}

// log u and its gradient on the live rows; rows that fail become dead.
void evaluate(const LatentEBM& ebm, const Tensor& z, std::vector<char>& dead, Tensor& lv, Tensor& grad,
              ChainStats& stats) {
  std::vector<std::size_t> live;
  for (std::size_t r = 0; r < z.rows(); ++r)
    if (!dead[r]) live.push_back(r);
  if (live.empty()) return;
  const bool all = live.size() == z.rows();
  const Tensor sub = all ? z : gather(z, live);
  auto scatter = [&](std::size_t i, const Tensor& l, const Tensor& g, std::size_t src) {
    lv[live[i]] = l[src];
    for (std::size_t j = 0; j < z.cols(); ++j) grad.at(live[i], j) = g.at(src, j);
  };
  try {
    const auto [l, g] = ebm.log_density_and_grad(sub);
    stats.grad_rows += live.size();
    for (std::size_t i = 0; i < live.size(); ++i) scatter(i, l, g, i);
    return;
  } catch (const NumericalError&) {
  }
  for (std::size_t i = 0; i < live.size(); ++i) {
    try {
      const auto [l, g] = ebm.log_density_and_grad(sub.row(i));
      stats.grad_rows += 1;
      scatter(i, l, g, 0);
    } catch (const NumericalError&) {
      dead[live[i]] = 1;
    }
  }
}

Tensor run_chains(const LatentEBM& ebm, const LangevinConfig& cfg, Rng& rng, std::size_t m, std::vector<char>& dead,
                  ChainStats& stats) {
  const std::size_t d = ebm.dim();
  const double eta = cfg.step_size, root = std::sqrt(eta);
  Tensor z = standard_normal(rng, m, d);
  Tensor lv = Tensor::zeros(m, 1), grad = Tensor::zeros(m, d);
  dead.assign(m, 0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  if (cfg.metropolis) evaluate(ebm, z, dead, lv, grad, stats);
  for (std::size_t t = 0; t < cfg.n_steps; ++t) {
    if (!cfg.metropolis) evaluate(ebm, z, dead, lv, grad, stats);
    const Tensor xi = standard_normal(rng, m, d);
    Tensor prop = z;
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t j = 0; j < d; ++j) prop.at(r, j) = z.at(r, j) + 0.5 * eta * grad.at(r, j) + root * xi.at(r, j);
    if (!cfg.metropolis) {
      for (std::size_t r = 0; r < m; ++r) {
        if (dead[r]) continue;
        if (!row_finite(prop, r)) dead[r] = 1;
        else
          for (std::size_t j = 0; j < d; ++j) z.at(r, j) = prop.at(r, j);
      }
      continue;
    }
    Tensor plv = Tensor::zeros(m, 1), pgrad = Tensor::zeros(m, d);
    std::vector<char> pdead = dead;
    for (std::size_t r = 0; r < m; ++r)
      if (!pdead[r] && !row_finite(prop, r)) pdead[r] = 1;
    evaluate(ebm, prop, pdead, plv, pgrad, stats);
    for (std::size_t r = 0; r < m; ++r) {
      const double u = unif(rng);
      if (dead[r]) continue;
      if (pdead[r]) {
        dead[r] = 1;
        continue;
      }
      // log q(a | b) = -|a - b - (eta/2) grad(b)|^2 / (2 eta)
      double fwd = 0.0, bwd = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double a = prop.at(r, j) - z.at(r, j) - 0.5 * eta * grad.at(r, j);
        const double b = z.at(r, j) - prop.at(r, j) - 0.5 * eta * pgrad.at(r, j);
        fwd += a * a;
        bwd += b * b;
      }
      const double log_alpha = plv[r] - lv[r] + (fwd - bwd) / (2.0 * eta);
      ++stats.proposals;
      if (std::log(u) < log_alpha) {
        ++stats.accepted;
        for (std::size_t j = 0; j < d; ++j) {
          z.at(r, j) = prop.at(r, j);
          grad.at(r, j) = pgrad.at(r, j);
        }
        lv[r] = plv[r];
      }
    }
  }
  return z;
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

}  // namespace

// ---- Langevin -------------------------------------------------------------------

void LangevinConfig::validate() const {
  if (!(step_size > 0.0)) throw ConfigError("langevin.step_size must be positive");
  if (n_steps < 1) throw ConfigError("langevin.n_steps must be at least 1");
  if (chunk < 1) throw ConfigError("langevin.chunk must be at least 1");
}

nlohmann::json LangevinConfig::to_json() const {
  return {{"n_steps", n_steps}, {"step_size", step_size}, {"seed", seed}, {"metropolis", metropolis},
          {"chunk", chunk}};
}

LangevinConfig LangevinConfig::from_json(const nlohmann::json& j) {
  LangevinConfig c;
  if (!j.is_object()) throw ConfigError("langevin config must be an object");
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "n_steps") c.n_steps = v.get<std::size_t>();
      else if (key == "step_size") c.step_size = v.get<double>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "metropolis") c.metropolis = v.get<bool>();
      else if (key == "chunk") c.chunk = v.get<std::size_t>();
      else throw ConfigError("unknown langevin key '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("langevin." + key + ": " + e.what());
    }
  }
  c.validate();
  return c;
}

LangevinResult langevin_sample(const LatentEBM& ebm, const LangevinConfig& cfg, std::size_t n) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t d = ebm.dim();
  LangevinResult res;
  res.samples = Tensor::zeros(n, d);
  ChainStats stats;
  std::vector<std::size_t> failed;
  for (std::size_t c = 0, begin = 0; begin < n; ++c, begin += cfg.chunk) {
    const std::size_t m = std::min(cfg.chunk, n - begin);
    Rng rng = make_rng(cfg.seed, c);
    std::vector<char> dead;
    const Tensor z = run_chains(ebm, cfg, rng, m, dead, stats);
    for (std::size_t r = 0; r < m; ++r) {
      if (dead[r]) failed.push_back(begin + r);
      for (std::size_t j = 0; j < d; ++j) res.samples.at(begin + r, j) = z.at(r, j);
    }
  }
  if (!failed.empty()) {
    Rng rng = make_rng(cfg.seed, kRestartStreams);
    std::vector<char> dead;
    const Tensor z = run_chains(ebm, cfg, rng, failed.size(), dead, stats);
    for (std::size_t i = 0; i < failed.size(); ++i) {
      if (dead[i]) {
        throw NumericalError("Langevin chain " + std::to_string(failed[i]) +
                             " produced a non-finite value again after a restart; reduce the step size");
      }
      for (std::size_t j = 0; j < d; ++j) res.samples.at(failed[i], j) = z.at(i, j);
    }
    res.restarts = failed.size();
  }
  res.gradient_evaluations = stats.grad_rows;
  if (cfg.metropolis && stats.proposals > 0)
    res.acceptance_rate = static_cast<double>(stats.accepted) / static_cast<double>(stats.proposals);
  res.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

// ---- rejection -------------------------------------------------------------------

nlohmann::json RejectionConfig::to_json() const {
  return {{"envelope", envelope}, {"estimate_draws", estimate_draws}, {"safety", safety}, {"round", round},
          {"max_proposals", max_proposals}, {"seed", seed}};
}

RejectionConfig RejectionConfig::from_json(const nlohmann::json& j) {
  RejectionConfig c;
  if (!j.is_object()) throw ConfigError("rejection config must be an object");
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "envelope") c.envelope = v.get<double>();
      else if (key == "estimate_draws") c.estimate_draws = v.get<std::size_t>();
      else if (key == "safety") c.safety = v.get<double>();
      else if (key == "round") c.round = v.get<std::size_t>();
      else if (key == "max_proposals") c.max_proposals = v.get<std::uint64_t>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else throw ConfigError("unknown rejection key '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("rejection." + key + ": " + e.what());
    }
  }
  if (c.envelope < 0.0 || c.round < 1 || !(c.safety >= 1.0)) throw ConfigError("invalid rejection settings");
  return c;
}

RejectionResult rejection_sample(const LatentEBM& ebm, const RejectionConfig& cfg, std::size_t n) {
  const std::size_t d = ebm.dim();
  RejectionResult res;
  res.envelope = cfg.envelope;
  if (cfg.envelope == 0.0) {
    // Heuristic, not a bound: max over prior draws times a safety factor.
    Rng rng = make_rng(cfg.seed, 1);
    double best = 0.0;
    for (std::size_t done = 0; done < cfg.estimate_draws; done += cfg.round) {
      const std::size_t m = std::min(cfg.round, cfg.estimate_draws - done);
      const Tensor e = ebm.energy_values(standard_normal(rng, m, d), true);
      for (double v : e.values()) best = std::max(best, std::exp(-v));
    }
    if (!(best > 0.0)) throw NumericalError("envelope estimate is zero: every prior draw has infinite energy");
    res.envelope = cfg.safety * best;
    res.envelope_estimated = true;
  }
  const double m_env = res.envelope;
  Rng rng = make_rng(cfg.seed, 0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<double> kept;
  kept.reserve(n * d);
  std::size_t accepted = 0;
  while (accepted < n) {
    if (res.proposals >= cfg.max_proposals) {
      throw NumericalError("rejection sampling reached " + std::to_string(res.proposals) + " proposals with " +
                           std::to_string(accepted) + " accepted; review lambda or the envelope M");
    }
    const Tensor z = standard_normal(rng, cfg.round, d);
    const Tensor e = ebm.energy_values(z, true);
    std::size_t examined = 0;
    for (std::size_t r = 0; r < z.rows() && accepted < n; ++r, ++examined) {
      const double u = unif(rng);
      const double p = std::exp(-e[r]);
      if (p > m_env * (1.0 + 1e-12)) {
        throw NumericalError("envelope violated: exp(-E) = " + std::to_string(p) + " exceeds M = " +
                             std::to_string(m_env));
      }
      if (u * m_env < p) {
        for (std::size_t j = 0; j < d; ++j) kept.push_back(z.at(r, j));
        ++accepted;
      }
    }
    res.proposals += examined;
    if (res.proposals >= 1000000 && static_cast<double>(accepted) / static_cast<double>(res.proposals) < 1e-5) {
      throw NumericalError("rejection acceptance rate below 1e-5 after " + std::to_string(res.proposals) +
                           " proposals; review lambda or the envelope M");
    }
  }
  res.samples = Tensor::matrix(n, d, std::move(kept));
  res.acceptance_rate = static_cast<double>(accepted) / static_cast<double>(res.proposals);
  return res;
}

// ---- quadrature -----------------------------------------------------------------------

std::size_t DensityGrid::cells() const {
  std::size_t n = 1;
  for (std::size_t r : resolution) n *= r;
  return n;
}

double DensityGrid::cell_volume() const {
  double v = 1.0;
  for (std::size_t a = 0; a < dim(); ++a) v *= width(a);
  return v;
}

Tensor DensityGrid::midpoints() const {
  const std::size_t d = dim();
  Tensor out = Tensor::zeros(cells(), d);
  for (std::size_t i = 0; i < cells(); ++i) {
    std::size_t rem = i;
    for (std::size_t a = d; a-- > 0;) {
      const std::size_t k = rem % resolution[a];
      rem /= resolution[a];
      out.at(i, a) = lo[a] + (static_cast<double>(k) + 0.5) * width(a);
    }
  }
  return out;
}

std::vector<double> DensityGrid::normalized() const {
  std::vector<double> out(values);
  for (double& v : out) v /= z;
  return out;
}

long long DensityGrid::locate(const double* point) const {
  long long idx = 0;
  for (std::size_t a = 0; a < dim(); ++a) {
    if (point[a] < lo[a] || point[a] >= hi[a]) return -1;
    const auto k = std::min(static_cast<std::size_t>((point[a] - lo[a]) / width(a)), resolution[a] - 1);
    idx = idx * static_cast<long long>(resolution[a]) + static_cast<long long>(k);
  }
  return idx;
}

void DensityGrid::write_csv(const std::string& path) const {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << std::setprecision(17) << "# Z=" << z;
  for (std::size_t a = 0; a < dim(); ++a)
    os << " axis" << a << "=[" << lo[a] << "," << hi[a] << "]x" << resolution[a];
  os << '\n';
  for (std::size_t a = 0; a < dim(); ++a) os << 'z' << a << ',';
  os << "density\n";
  const Tensor mid = midpoints();
  for (std::size_t i = 0; i < cells(); ++i) {
    for (std::size_t a = 0; a < dim(); ++a) os << mid.at(i, a) << ',';
    os << values[i] / z << '\n';
  }
}

DensityGrid quadrature_grid(const LatentEBM& ebm, const std::vector<double>& lo, const std::vector<double>& hi,
                            const std::vector<std::size_t>& resolution) {
  const std::size_t d = ebm.dim();
  if (d > 3) throw DimensionError("quadrature grids support at most 3 latent dimensions, got " + std::to_string(d));
  if (lo.size() != d || hi.size() != d || resolution.size() != d) {
    throw DimensionError("grid bounds and resolution need one entry per latent dimension");
  }
  double prior_mass = 1.0;
  for (std::size_t a = 0; a < d; ++a) {
    if (resolution[a] < 32) throw ConfigError("grid resolution must be at least 32 per dimension");
    if (!(lo[a] < hi[a])) throw ConfigError("grid bounds need lo < hi");
    prior_mass *= normal_cdf(hi[a]) - normal_cdf(lo[a]);
  }
  if (prior_mass < 1.0 - 1e-6) {
    throw ConfigError("grid bounds cover only " + std::to_string(prior_mass) + " of the prior mass");
  }
  DensityGrid grid{lo, hi, resolution, {}, 0.0};
  const Tensor mid = grid.midpoints();
  grid.values.resize(grid.cells());
  constexpr std::size_t kChunk = 65536;
  for (std::size_t begin = 0; begin < grid.cells(); begin += kChunk) {
    const std::size_t m = std::min(kChunk, grid.cells() - begin);
    Tensor z = Tensor::zeros(m, d);
    std::copy(mid.data() + begin * d, mid.data() + (begin + m) * d, z.data());
    const Tensor e = ebm.energy_values(z, true);
    const Tensor lp = standard_normal_log_density(z);
    for (std::size_t i = 0; i < m; ++i) grid.values[begin + i] = std::exp(lp[i] - e[i]);
  }
  double sum = 0.0;
  for (double v : grid.values) sum += v;
  grid.z = sum * grid.cell_volume();
  if (!(grid.z > 0.0)) throw NumericalError("quadrature normalizer is zero on the grid");
  return grid;
}

}  // namespace latentctl
