#pragma once

#include <cstddef>
#include <iosfwd>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace stochdd {

/// One-dimensional Gauss–Hermite rule for the standard Gaussian measure.
/// Weights sum to one; nodes are increasing and symmetric about zero.
struct QuadratureRule1D {
    std::vector<double> nodes;
    std::vector<double> weights;

    std::size_t order() const noexcept { return nodes.size(); }
};

QuadratureRule1D gauss_hermite_1d(std::size_t order);

/// Merged Smolyak grid for the d-dimensional standard Gaussian measure.
///
/// The grid combines tensor products of Gauss–Hermite rules with 1D order
/// m(i) = i over all multi-indices with max(d, l) ≤ |i| ≤ d+l−1. Coincident nodes
/// are merged and their weights summed; points are sorted lexicographically.
struct SparseGrid {
    std::size_t dim = 0;
    std::size_t level = 0;
    Eigen::MatrixXd points;  // Q × dim
    Eigen::VectorXd weights; // Q

    std::size_t size() const noexcept { return static_cast<std::size_t>(weights.size()); }
};

SparseGrid smolyak_grid(std::size_t dim, std::size_t level);

/// Σ_q values_q w_q.
double integrate(const SparseGrid& grid, std::span<const double> values);

/// CSV dump: header line `dim,level`, a line with the two values, then one
/// row `x_1,...,x_d,w` per point in 17-significant-digit decimal.
void write_grid_csv(std::ostream& out, const SparseGrid& grid);

} // namespace stochdd
