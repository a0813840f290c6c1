#pragma once

#include <cstddef>
#include <iosfwd>
#include <memory>
#include <span>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include "stochdd/cost.hpp"
#include "stochdd/pde.hpp"

namespace stochdd {

class StochasticProblem;

/// Non-overlapping cell partition of a structured mesh into kx × ky blocks.
/// Subdomain s = jy·kx + ix. Node sets refer to global node ids and exclude
/// the fixed (Dirichlet) nodes given at construction.
struct Partition {
    std::size_t kx = 1, ky = 1;
    std::vector<int> cell_owner;                   // per cell
    std::vector<std::vector<int>> cells;           // per subdomain
    std::vector<std::vector<int>> interior;        // I_s, sorted
    std::vector<int> interface;                    // Γ, sorted
    std::vector<std::vector<int>> interface_local; // Γ_s as positions in `interface` (R_s)
    std::vector<int> node_owner;                   // lowest subdomain whose closure holds the node

    std::size_t n_sub() const noexcept { return cells.size(); }
    std::size_t n_interface() const noexcept { return interface.size(); }
    /// Interior followed by interface nodes of subdomain s (global ids).
    std::vector<int> closure(std::size_t s) const;
};

/// Layout for a subdomain count: 1→(1,1), 2→(2,1), 3→(3,1), 4→(4,1),
/// 8→(4,2), 15→(5,3), 27→(9,3). One-dimensional meshes use (n, 1) for any n.
std::pair<std::size_t, std::size_t> partition_preset(std::size_t n_sub, int mesh_dimension);

/// Throws InvalidArgument if kx does not divide nx or ky does not divide ny.
Partition partition_mesh(const Mesh& mesh, std::size_t kx, std::size_t ky, std::span<const int> fixed_nodes = {});
Partition partition_mesh(const Mesh& mesh, std::size_t n_sub, std::span<const int> fixed_nodes = {});

/// CSV `node,subdomain,interface` with the owning subdomain and a 0/1 flag.
void write_partition_csv(std::ostream& out, const Partition& p);

/// Blocks of one subdomain's stiffness and load, assembled from its own
/// elements. Interior rows and columns follow Partition::interior[s];
/// interface ones follow Partition::interface_local[s].
struct SubdomainSystem {
    std::size_t s = 0;
    bool symmetric = true;
    Eigen::SparseMatrix<double> k_ii;
    Eigen::SparseMatrix<double> k_ig;
    Eigen::SparseMatrix<double> k_gi;
    Eigen::MatrixXd k_gg;
    Eigen::VectorXd f_i;
    Eigen::VectorXd f_g;
};

/// Builds subdomain s's blocks. Dirichlet values are lifted into the loads;
/// a nodal load on an interface node goes to the node's owning subdomain only.
SubdomainSystem extract_subdomain(const ElementSystem& es, const Partition& p, std::size_t s);

/// Factorization of K_II reused for the Schur complement and interior recovery.
class InteriorSolver {
public:
    InteriorSolver(const Eigen::SparseMatrix<double>& k_ii, bool symmetric);
    ~InteriorSolver();
    InteriorSolver(InteriorSolver&&) noexcept;
    InteriorSolver& operator=(InteriorSolver&&) noexcept;

    Eigen::MatrixXd solve(const Eigen::MatrixXd& rhs) const;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

struct SchurLocal {
    Eigen::MatrixXd s;  // |Γ_s| × |Γ_s|
    Eigen::VectorXd g;  // |Γ_s|
    std::shared_ptr<const InteriorSolver> interior;
};

/// S = K_ΓΓ − K_ΓI K_II⁻¹ K_IΓ and g = f_Γ − K_ΓI K_II⁻¹ f_I.
/// Throws NumericFailure when K_II is singular.
SchurLocal local_schur(const SubdomainSystem& sub);

/// S_Γ = Σ_s R_sᵀ S^s R_s and g_Γ = Σ_s R_sᵀ g^s.
std::pair<Eigen::MatrixXd, Eigen::VectorXd> assemble_global_schur(std::span<const SchurLocal> locals, const Partition& p);

/// Dense interface solve with a relative residual check.
Eigen::VectorXd solve_interface(const Eigen::MatrixXd& s_gamma, const Eigen::VectorXd& g_gamma);

/// u_I = K_II⁻¹(f_I − K_IΓ R_s u_Γ).
Eigen::VectorXd recover_interior(const SubdomainSystem& sub, const SchurLocal& local, const Eigen::VectorXd& u_gamma,
                                 const Partition& p);

/// One relaxed Neumann–Neumann update
/// u ← u + θ (Σ_s R_sᵀ (S^s)⁺ R_s)(g_Γ − S_Γ u). Local pseudo-inverses drop
/// singular values below 1e-12·‖S^s‖.
Eigen::VectorXd nn_richardson_step(std::span<const SchurLocal> locals, const Partition& p,
                                   const Eigen::VectorXd& u_gamma, double theta);

/// Scatter subdomain values into a global nodal vector. `values[s]` follows
/// Partition::closure(s); each node takes the value of its owning subdomain.
/// Nodes outside every closure (Dirichlet nodes) keep `base`.
Eigen::VectorXd gather_nodal(const Partition& p, std::span<const Eigen::VectorXd> values, const Eigen::VectorXd& base);

struct DDSolution {
    Eigen::VectorXd u;       // nodal
    Eigen::VectorXd u_gamma; // interface values
};

/// Non-iterative Schur solve of a deterministic system. Charges one interior
/// solve per subdomain and one interface solve to `ledger` when given.
DDSolution solve_dd(const ElementSystem& es, const Partition& p, CostLedger* ledger = nullptr);

struct NonlinearDDResult {
    Eigen::VectorXd u;
    std::vector<double> residuals; // global nonlinear residual after each outer iteration
};

/// Outer coefficient-lag loop around solve_dd: freeze the coefficients at the
/// current iterate, solve, re-evaluate. Stops once the global nonlinear
/// residual is below `tol`; throws NonConvergence with the history otherwise.
NonlinearDDResult nonlinear_dd_solve(const StochasticProblem& problem, std::span<const double> xi,
                                     const Partition& p, std::size_t max_outer, double tol,
                                     CostLedger* ledger = nullptr);

/// Dirichlet node ids of the problem's element system.
std::vector<int> fixed_nodes(const ElementSystem& es);

} // namespace stochdd
