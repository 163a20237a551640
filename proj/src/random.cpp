#include "latentctl/random.hpp"

#include <Eigen/Dense>

#include "latentctl/errors.hpp"

namespace latentctl {

Rng make_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  return Rng(seq);
}

Tensor standard_normal(Rng& rng, std::size_t rows, std::size_t cols) {
  std::normal_distribution<double> n01(0.0, 1.0);
  Tensor t = Tensor::zeros(rows, cols);
  for (double& v : t.values()) v = n01(rng);
  return t;
}

Tensor uniform(Rng& rng, std::size_t rows, std::size_t cols, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t = Tensor::zeros(rows, cols);
  for (double& v : t.values()) v = u(rng);
  return t;
}

Tensor uniform_box(Rng& rng, std::size_t rows, const std::vector<double>& lo,
                   const std::vector<double>& hi) {
  if (lo.size() != hi.size()) throw DimensionError("uniform_box bounds differ in length");
  const std::size_t p = lo.size();
  Tensor t = Tensor::zeros(rows, p);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < p; ++j) t.at(r, j) = lo[j] + (hi[j] - lo[j]) * u01(rng);
  return t;
}

Tensor random_orthogonal(std::size_t n, Rng& rng) {
  const Tensor g = standard_normal(rng, n, n);
  Eigen::MatrixXd a(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) a(i, j) = g.at(i, j);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  Eigen::MatrixXd q = qr.householderQ();
  const Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (std::size_t j = 0; j < n; ++j)
    if (r(j, j) < 0) q.col(j) *= -1.0;
  Tensor out = Tensor::zeros(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) = q(i, j);
  return out;
}

}  // namespace latentctl
