#pragma once

#include <cstdint>
#include <random>

#include "latentctl/tensor.hpp"

namespace latentctl {

using Rng = std::mt19937_64;

/// Independent generator for (seed, stream); streams never share state.
Rng make_rng(std::uint64_t seed, std::uint64_t stream = 0);

Tensor standard_normal(Rng& rng, std::size_t rows, std::size_t cols);
Tensor uniform(Rng& rng, std::size_t rows, std::size_t cols, double lo, double hi);
/// Rows drawn uniformly from the box [lo_j, hi_j]; lo_j == hi_j gives a point mass.
Tensor uniform_box(Rng& rng, std::size_t rows, const std::vector<double>& lo,
                   const std::vector<double>& hi);

/// Orthogonal n x n matrix from the QR factorization of a Gaussian matrix,
/// with column signs fixed so the factorization is unique.
Tensor random_orthogonal(std::size_t n, Rng& rng);

}  // namespace latentctl
