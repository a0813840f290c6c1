#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "stochdd/chaos.hpp"
#include "stochdd/cost.hpp"
#include "stochdd/domain_decomposition.hpp"
#include "stochdd/quadrature.hpp"

namespace stochdd {

class StochasticProblem;

/// Order-one chaos truncation u_0(x) + Σ_i u_i(x) ξ_i of the nodal solution.
struct GaussianPart {
    Eigen::VectorXd u0; // n_nodes
    Eigen::MatrixXd ui; // d × n_nodes
    std::size_t level = 0;

    std::size_t dim() const noexcept { return static_cast<std::size_t>(ui.rows()); }
};

/// Solves the full problem on a level-`level` sparse grid in d dimensions and
/// projects onto the order-one basis. Solves are charged to Phase::GaussianPart.
GaussianPart gaussian_part(const StochasticProblem& problem, std::size_t level, CostLedger* ledger = nullptr);

/// C_ij = Σ_k u_k(x_i) u_k(x_j) on the closure (interior then interface) of subdomain s.
Eigen::MatrixXd solution_covariance(const GaussianPart& gp, const Partition& p, std::size_t s);

struct HilbertKL {
    Eigen::VectorXd mu;  // d eigenvalues, non-increasing
    Eigen::MatrixXd phi; // d × closure size, weighted-orthonormal
};

/// Weighted eigenpairs of a subdomain covariance (same conventions as kl_solve).
HilbertKL hilbert_kl(const Eigen::MatrixXd& cov, const Eigen::VectorXd& node_weights, std::size_t d);

/// Per-subdomain rotation η = A ξ of the Gaussian inputs.
struct AdaptedBasis {
    std::size_t s = 0;
    Eigen::MatrixXd a;  // d × d, orthogonal
    std::size_t r = 0;  // retained dimension
    Eigen::VectorXd mu;
    Eigen::MatrixXd phi;
};

/// Rows a_i = μ_i^{−1/2} Σ_k w_k φ_i(x_k) u(x_k) for μ_i > 1e-12·μ_1, then
/// modified Gram–Schmidt. Remaining rows are completed against seeded random
/// vectors. Throws InvalidArgument when every μ_i is numerically zero.
AdaptedBasis adaptation_matrix(const GaussianPart& gp, const HilbertKL& kl, const Eigen::VectorXd& closure_weights,
                               const Partition& p, std::size_t s, std::size_t r, std::uint64_t seed = 0);

/// Covariance, Hilbert-KL and adaptation matrix for subdomain s in one call.
/// `node_weights` are the global mesh node weights.
AdaptedBasis adapt_subdomain(const GaussianPart& gp, const Partition& p, std::size_t s,
                             const Eigen::VectorXd& node_weights, std::size_t r, std::uint64_t seed = 0);

/// ξ_q = (first r rows of A)ᵀ η_q for each row of `eta` (Q × r); returns Q × d.
Eigen::MatrixXd map_collocation(const AdaptedBasis& basis, const Eigen::MatrixXd& eta);

/// Transfers chaos coefficients from the η^{s′} basis to the η^s basis:
/// points η^{s′} = (A_{s′}A_sᵀ)[:r,:r] η^s of `grid` (in η^s), evaluation of
/// the source expansion there, and projection onto `target`. Columns of
/// `coeffs` are independent entries (matrix entries or vector components).
Eigen::MatrixXd project_between_bases(const Eigen::MatrixXd& coeffs, const MultiIndexSet& source,
                                      const Eigen::MatrixXd& a_source, const Eigen::MatrixXd& a_target, std::size_t r,
                                      const SparseGrid& grid, const MultiIndexSet& target);

struct AdaptedSolveOptions {
    std::size_t level = 5;
    unsigned order = 3;
    std::size_t max_outer = 5; // outer coefficient-lag iterations for nonlinear problems
    double tol = 0.0;          // stop when the max nodal increment drops below tol
    /// Starting iterate for nonlinear problems: u_0 + Σ_i u_i ξ_i at each
    /// collocation point instead of the problem's initial state.
    const GaussianPart* initial = nullptr;
};

struct AdaptedSolution {
    SparseGrid grid;                      // level-l grid in r dimensions
    std::vector<PCExpansion> pce;         // per subdomain, over Partition::closure(s), basis in η^s
    std::vector<double> outer_residuals;  // max nodal increment per outer iteration (nonlinear only)
};

/// Per-subdomain reduced solve with inter-basis projection of the Schur
/// blocks and a non-iterative interface solve at every collocation point.
/// Interior solves, interface solves and projection flops are charged to the
/// ledger.
AdaptedSolution adapted_subdomain_solve(const StochasticProblem& problem, const Partition& p,
                                        std::span<const AdaptedBasis> bases, const AdaptedSolveOptions& options,
                                        CostLedger* ledger = nullptr);

/// Writes A_s as CSV rows.
void write_adapted_basis(std::ostream& matrix_out, std::ostream& eigen_out, const AdaptedBasis& basis);

} // namespace stochdd
