#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

namespace stochdd {

enum BoundaryTag : std::uint8_t { kInterior = 0, kLeft = 1, kRight = 2, kBottom = 4, kTop = 8 };

/// Structured mesh of [0, lx] (1D, two-node elements) or [0, lx]×[0, ly]
/// (2D, bilinear quadrilaterals). Node (i, j) has index j·(nx+1) + i and cell
/// (i, j) has index j·nx + i; quadrilateral nodes run counter-clockwise from
/// the lower-left corner. In 1D, kLeft marks x = 0 and kRight marks x = lx.
struct Mesh {
    int dimension = 1;
    std::size_t nx = 0, ny = 0;
    double lx = 0.0, ly = 0.0;
    Eigen::MatrixXd coords;                // n_nodes × dimension
    std::vector<std::vector<int>> cells;   // node ids per cell
    std::vector<std::uint8_t> boundary;    // BoundaryTag bitmask per node

    std::size_t n_nodes() const noexcept { return static_cast<std::size_t>(coords.rows()); }
    std::size_t n_cells() const noexcept { return cells.size(); }
    double hx() const noexcept { return lx / static_cast<double>(nx); }
    double hy() const noexcept { return dimension == 2 ? ly / static_cast<double>(ny) : 1.0; }
    int node(std::size_t i, std::size_t j = 0) const noexcept { return static_cast<int>(j * (nx + 1) + i); }

    /// Cell centroids, n_cells × dimension.
    Eigen::MatrixXd cell_centers() const;
    /// Trapezoid (1D) or lumped cell-area (2D) quadrature weights per node.
    Eigen::VectorXd node_weights() const;
    /// Cell length (1D) or area (2D).
    Eigen::VectorXd cell_weights() const;
    /// Index of the node at `point` within `tol`, if any.
    std::optional<int> find_node(std::span<const double> point, double tol = 1e-9) const;
};

Mesh make_mesh_1d(double length, std::size_t n_elements);
Mesh make_mesh_2d(double lx, double ly, std::size_t nx, std::size_t ny);

/// One element's dense contribution.
struct ElementMatrix {
    int cell = -1;
    std::vector<int> nodes;
    Eigen::MatrixXd ke;
    Eigen::VectorXd fe;
};

/// Unassembled discrete problem: element contributions, nodal point loads and
/// Dirichlet values. Drives both global assembly and subdomain extraction.
struct ElementSystem {
    std::size_t n_nodes = 0;
    bool symmetric = true;
    std::vector<ElementMatrix> elements;
    std::vector<std::pair<int, double>> nodal_loads;
    std::vector<std::pair<int, double>> dirichlet;
};

/// Assembled system on free (non-Dirichlet) dofs after row/column elimination.
struct LinearSystem {
    Eigen::SparseMatrix<double> K;
    Eigen::VectorXd f;
    bool symmetric = true;
    std::vector<int> node_to_dof; // −1 for Dirichlet nodes
    std::vector<int> dof_to_node;
    std::vector<std::pair<int, double>> dirichlet;

    std::size_t n_dof() const noexcept { return static_cast<std::size_t>(f.size()); }
    std::size_t n_nodes() const noexcept { return node_to_dof.size(); }
    /// Nodal vector from free-dof values plus Dirichlet data.
    Eigen::VectorXd expand(const Eigen::VectorXd& u_free) const;
    /// Free-dof restriction of a nodal vector.
    Eigen::VectorXd restrict_nodal(const Eigen::VectorXd& u_nodal) const;
};

LinearSystem assemble(const ElementSystem& es);

/// Direct sparse solve (LDLᵀ when symmetric, LU otherwise). Throws
/// NumericFailure when the factorization fails or ‖Ku−f‖ > 1e-10·max(‖f‖, 1).
Eigen::VectorXd solve_linear(const LinearSystem& system);

/// Same solve on raw blocks.
Eigen::VectorXd solve_sparse(const Eigen::SparseMatrix<double>& K, const Eigen::VectorXd& f, bool symmetric);

/// Nodal CSV `x[,y],u`.
void write_solution_csv(std::ostream& out, const Mesh& mesh, const Eigen::VectorXd& u_nodal);

// ---------------------------------------------------------------- diffusion

struct PointSink {
    double x = 0.0, y = 0.0;
    double magnitude = -1.0;
};

struct DiffusionBC {
    double left = 50.0;  // u at x = 0
    double right = 25.0; // u at x = lx
};

/// −∇·(a∇u) = f on a 2D structured mesh with Dirichlet data on x = 0 and
/// x = lx, natural zero flux on y = 0 and y = ly, and an optional nodal
/// point load. `a_nodes` is interpolated to the 2×2 Gauss points.
ElementSystem diffusion_2d_elements(const Mesh& mesh, const Eigen::VectorXd& a_nodes,
                                   const std::optional<PointSink>& sink, const DiffusionBC& bc,
                                   std::span<const int> cells = {});
LinearSystem assemble_diffusion_2d(const Mesh& mesh, const Eigen::VectorXd& a_nodes,
                                   const std::optional<PointSink>& sink, const DiffusionBC& bc);

/// 1D −(a u')' = 0 with u(0) = left, u(L) = right and optional nodal loads;
/// `a_cells` holds one coefficient per element.
ElementSystem poisson_1d_elements(const Mesh& mesh, const Eigen::VectorXd& a_cells, double left, double right,
                                  std::span<const std::pair<int, double>> loads = {});

// ---------------------------------------------------------- linear Richards

struct GardnerLayer {
    double ks_mean = 1.0; // m/d
    double alpha = 1.0;   // 1/m
    double theta_s = 0.45;
};

/// Layer k occupies [top_{k−1}, top_k) with top_{−1} = 0.
struct GardnerModel {
    std::vector<GardnerLayer> layers;
    std::vector<double> layer_tops;

    std::size_t layer_of(double z) const;
};

struct RichardsLinearBC {
    double theta0 = 0.4; // θ(0)
    double q = 0.01;     // (K dψ/dθ dθ/dz)(L) = −q
};

/// Saturation form of the Gardner–Russo problem, (Dθ')' + (vθ)' = 0 with
/// D = K_s/(αθ_s) and v = K_s/θ_s per element.
ElementSystem richards_linear_elements(const Mesh& mesh, const GardnerModel& model, const Eigen::VectorXd& ks_cells,
                                       const RichardsLinearBC& bc, std::span<const int> cells = {});
LinearSystem assemble_richards_linear_1d(const Mesh& mesh, const GardnerModel& model,
                                         const Eigen::VectorXd& ks_cells, const RichardsLinearBC& bc);

/// Conservative flux Dθ' + vθ at an interior node evaluated from the elements
/// on each side (first: elements left of the node, second: right).
std::pair<double, double> richards_linear_node_flux(const Mesh& mesh, const GardnerModel& model,
                                                    const Eigen::VectorXd& ks_cells, const Eigen::VectorXd& theta,
                                                    int node);

// ------------------------------------------------------- nonlinear Richards

struct VanGenuchtenModel {
    double n = 1.3954;
    double alpha = 0.0104; // 1/cm
    double theta_r = 0.106;
    double theta_s = 0.4686;
    double ks = 0.5458; // cm/h

    double m() const noexcept { return 1.0 - 1.0 / n; }
};

struct VgValues {
    double se = 1.0;
    double k = 0.0;
};

VgValues vg_conductivity(const VanGenuchtenModel& model, double psi);

/// Relative conductivity K/K_s at ψ.
double vg_relative_conductivity(const VanGenuchtenModel& model, double psi);

/// dK/dψ. Zero for ψ ≥ 0; unbounded as ψ → 0⁻.
double vg_conductivity_derivative(const VanGenuchtenModel& model, double psi);

/// Linearization used by the nonlinear Richards iteration.
/// Picard freezes K at the iterate; Newton also differentiates each element's K.
enum class Linearization { Picard, Newton };

struct RichardsNonlinearBC {
    double psi_bottom = 0.0;
    double psi_top = -0.35;
};

/// Picard-linearized element system for (K(ψ)(ψ' + 1))' = 0 with K frozen at
/// `psi_nodal`. Each element takes K at its upstream node (the upper one for
/// downward flow), which keeps the discrete flux monotone in the heads.
ElementSystem richards_nonlinear_elements(const Mesh& mesh, const VanGenuchtenModel& model,
                                          const Eigen::VectorXd& ks_cells, const RichardsNonlinearBC& bc,
                                          const Eigen::VectorXd& psi_nodal, std::span<const int> cells = {});

/// Newton-linearized element system at `psi_nodal`: element Jacobian J_e and
/// load J_e ψ_e − r_e(ψ_e), so the linear solve returns the Newton update.
/// Nonsymmetric.
ElementSystem richards_newton_elements(const Mesh& mesh, const VanGenuchtenModel& model, const Eigen::VectorXd& ks_cells,
                                       const RichardsNonlinearBC& bc, const Eigen::VectorXd& psi_nodal,
                                       std::span<const int> cells = {});

struct NonlinearSolution {
    Eigen::VectorXd psi;           // nodal
    std::size_t iterations = 0;    // linear solves performed
    std::vector<double> residuals; // ‖F(ψ^k)‖ after each update
};

/// Linear initial guess between the boundary heads.
Eigen::VectorXd richards_initial_guess(const Mesh& mesh, const RichardsNonlinearBC& bc);

/// Residual ‖K(ψ)ψ − f(ψ)‖₂ on free dofs.
double richards_nonlinear_residual(const Mesh& mesh, const VanGenuchtenModel& model, const Eigen::VectorXd& ks_cells,
                                   const RichardsNonlinearBC& bc, const Eigen::VectorXd& psi_nodal);

/// Heads on the nodes of `n_cells` consecutive cells starting at
/// `first_cell`, with the end heads fixed, taken straight from the element
/// equations: every element of the run carries the same flux q, so the heads
/// are marched upward for a trial q and q is root-found until the upper head
/// matches. Only downward-draining runs (q > 0, i.e. psi_high > psi_low minus
/// the run length) are handled; otherwise nullopt. Unlike Newton, this does
/// not stall on the infinite slope of K just below saturation.
std::optional<Eigen::VectorXd> richards_flux_march(const Mesh& mesh, const VanGenuchtenModel& model,
                                                   const Eigen::VectorXd& ks_cells, std::size_t first_cell,
                                                   std::size_t n_cells, double psi_low, double psi_high);

/// Picard (or Newton) iteration until the nonlinear residual drops below
/// `tol`. Throws NonConvergence with the residual history after `max_iters`
/// solves. Newton steps that raise the residual are halved, up to 20 times;
/// when Newton stalls or runs out of iterations the flux march supplies the
/// solution, followed by a few Newton steps if it misses `tol`.
NonlinearSolution solve_richards_nonlinear_1d(const Mesh& mesh, const VanGenuchtenModel& model,
                                              const Eigen::VectorXd& ks_cells, const RichardsNonlinearBC& bc,
                                              double tol, std::size_t max_iters,
                                              std::optional<Eigen::VectorXd> initial = std::nullopt,
                                              Linearization linearization = Linearization::Picard);

} // namespace stochdd
