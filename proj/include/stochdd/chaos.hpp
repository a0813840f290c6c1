#pragma once

#include <cstddef>
#include <iosfwd>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "stochdd/quadrature.hpp"

namespace stochdd {

using MultiIndex = std::vector<unsigned>;

/// Total-degree multi-index set, graded by degree and ordered within a degree
/// by descending lexicographic exponent tuple: (1,0),(0,1),(2,0),(1,1),(0,2),...
/// The first entry is always the zero index.
class MultiIndexSet {
public:
    MultiIndexSet() = default;
    MultiIndexSet(std::size_t dim, unsigned order);

    std::size_t dim() const noexcept { return dim_; }
    unsigned order() const noexcept { return order_; }
    std::size_t size() const noexcept { return indices_.size(); }
    /// Number of terms excluding the constant, (d+p)!/(d!p!) − 1.
    std::size_t nonzero_count() const noexcept { return indices_.empty() ? 0 : indices_.size() - 1; }
    const MultiIndex& operator[](std::size_t i) const { return indices_[i]; }
    const std::vector<MultiIndex>& indices() const noexcept { return indices_; }

    /// Rebuilds a set from an explicit index list (used when reading files).
    static MultiIndexSet from_indices(std::size_t dim, unsigned order, std::vector<MultiIndex> indices);

private:
    std::size_t dim_ = 0;
    unsigned order_ = 0;
    std::vector<MultiIndex> indices_;
};

MultiIndexSet multi_index_set(std::size_t dim, unsigned order);

/// Orthonormal multivariate Hermite polynomial ∏_k He_{α_k}(x_k)/√(α_k!).
double hermite_eval(const MultiIndex& index, std::span<const double> point);

/// Basis evaluation matrix Ψ with Ψ(q, i) = ψ_i(points.row(q)); points is M × d.
Eigen::MatrixXd basis_matrix(const MultiIndexSet& basis, const Eigen::MatrixXd& points);

/// Polynomial chaos expansion of a field over n_dof degrees of freedom.
/// Row 0 of `coefficients` is the mean u_0(x); row i the coefficient of ψ_i.
struct PCExpansion {
    MultiIndexSet basis;
    Eigen::MatrixXd coefficients; // N+1 × n_dof
    Eigen::MatrixXd dof_coords;   // n_dof × spatial dim, may be empty

    std::size_t n_dof() const noexcept { return static_cast<std::size_t>(coefficients.cols()); }
};

/// Non-intrusive spectral projection: u_i = Σ_q u(ξ_q) ψ_i(ξ_q) w_q.
/// `samples` is Q × n_dof, one row per grid point.
PCExpansion nisp_project(const SparseGrid& grid, const Eigen::MatrixXd& samples, const MultiIndexSet& basis);

/// Same projection returning only the coefficient matrix (N+1 × columns of `samples`).
Eigen::MatrixXd nisp_coefficients(const SparseGrid& grid, const Eigen::MatrixXd& samples,
                                  const MultiIndexSet& basis);

/// Streaming form of the projection for when the samples do not fit in memory.
class NispAccumulator {
public:
    NispAccumulator(const SparseGrid& grid, const MultiIndexSet& basis, std::size_t n_dof);

    /// Adds the sample u(ξ_q) for grid point q.
    void add(std::size_t q, const Eigen::VectorXd& sample);
    PCExpansion finish(Eigen::MatrixXd dof_coords = {}) &&;

private:
    const SparseGrid* grid_;
    MultiIndexSet basis_;
    Eigen::MatrixXd psi_; // Q × N
    Eigen::MatrixXd coefficients_;
};

Eigen::VectorXd pce_mean(const PCExpansion& pce);
Eigen::VectorXd pce_std(const PCExpansion& pce);

/// Evaluates the expansion at each row of `xi_draws` (M × d); returns M × n_dof.
Eigen::MatrixXd pce_sample(const PCExpansion& pce, const Eigen::MatrixXd& xi_draws);

/// File layout: first line is a JSON object with keys dim, order, n_dof,
/// indices and dof_coords; each following line is one coefficient row written
/// as comma-separated 17-significant-digit decimals.
void write_pce(std::ostream& out, const PCExpansion& pce);
PCExpansion read_pce(std::istream& in);

} // namespace stochdd
