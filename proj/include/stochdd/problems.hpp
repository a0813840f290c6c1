#pragma once

#include <cstddef>
#include <optional>
#include <span>

#include <Eigen/Dense>

#include "stochdd/cost.hpp"
#include "stochdd/pde.hpp"
#include "stochdd/random_field.hpp"

namespace stochdd {

/// A family of deterministic discrete problems indexed by ξ ∈ R^d.
class StochasticProblem {
public:
    virtual ~StochasticProblem() = default;

    virtual const Mesh& mesh() const = 0;
    virtual std::size_t stochastic_dim() const = 0;
    virtual bool is_nonlinear() const { return false; }

    /// Element system at ξ restricted to `cells` (all cells when empty).
    /// Nonlinear problems freeze their coefficients at the nodal `state`;
    /// a null state means initial_state().
    virtual ElementSystem elements(std::span<const double> xi, const Eigen::VectorXd* state,
                                   std::span<const int> cells = {}) const = 0;

    /// Starting iterate for nonlinear problems (nodal); zeros otherwise.
    virtual Eigen::VectorXd initial_state() const;

    /// Full-domain nodal solution at ξ. Each linear solve is charged to
    /// `ledger` under `phase` when a ledger is given.
    virtual Eigen::VectorXd solve(std::span<const double> xi, CostLedger* ledger, Phase phase) const;

    /// ‖K(state)u − f(state)‖ on free dofs with u = state.
    double residual(std::span<const double> xi, const Eigen::VectorXd& state) const;

    /// Number of free dofs of the global system.
    std::size_t n_free() const;

    /// `state` with the `interior` nodes re-solved on the element patch
    /// `cells`; every other node keeps its value and acts as a Dirichlet
    /// datum. Linear solves are charged to `ledger` under `phase`. Throws
    /// NonConvergence when the patch problem cannot be solved.
    virtual Eigen::VectorXd solve_local(std::span<const double> xi, const Eigen::VectorXd& state,
                                        std::span<const int> cells, std::span<const int> interior,
                                        CostLedger* ledger, Phase phase) const;

protected:
    struct LocalNewton {
        Eigen::VectorXd state;
        std::size_t iterations = 0;
        bool converged = false;
    };
    /// Newton on the patch (a single solve for linear problems), halving
    /// steps that raise the interior residual; gives up on stagnation.
    LocalNewton local_newton(std::span<const double> xi, const Eigen::VectorXd& state, std::span<const int> cells,
                             std::span<const int> interior, double tol, std::size_t max_iters) const;
};

class DiffusionProblem2D final : public StochasticProblem {
public:
    /// `log_a` is a KL expansion over mesh nodes; a = exp(g).
    DiffusionProblem2D(Mesh mesh, KLExpansion log_a, DiffusionBC bc, std::optional<PointSink> sink);

    const Mesh& mesh() const override { return mesh_; }
    std::size_t stochastic_dim() const override { return log_a_.dim(); }
    ElementSystem elements(std::span<const double> xi, const Eigen::VectorXd* state,
                           std::span<const int> cells = {}) const override;
    const KLExpansion& field() const noexcept { return log_a_; }

private:
    Mesh mesh_;
    KLExpansion log_a_;
    DiffusionBC bc_;
    std::optional<PointSink> sink_;
};

class RichardsLinearProblem final : public StochasticProblem {
public:
    /// `log_ks` is a KL expansion over cells; K_s = exp(g).
    RichardsLinearProblem(Mesh mesh, GardnerModel model, KLExpansion log_ks, RichardsLinearBC bc);

    const Mesh& mesh() const override { return mesh_; }
    std::size_t stochastic_dim() const override { return log_ks_.dim(); }
    ElementSystem elements(std::span<const double> xi, const Eigen::VectorXd* state,
                           std::span<const int> cells = {}) const override;
    const GardnerModel& model() const noexcept { return model_; }
    const KLExpansion& field() const noexcept { return log_ks_; }

private:
    Mesh mesh_;
    GardnerModel model_;
    KLExpansion log_ks_;
    RichardsLinearBC bc_;
};

/// elements() returns the Newton-linearized system at the state by default,
/// so outer loops around it are Newton iterations; Picard lags K only.
class RichardsNonlinearProblem final : public StochasticProblem {
public:
    RichardsNonlinearProblem(Mesh mesh, VanGenuchtenModel model, KLExpansion log_ks, RichardsNonlinearBC bc,
                             double tol = 1e-10, std::size_t max_iters = 100,
                             Linearization linearization = Linearization::Newton);

    const Mesh& mesh() const override { return mesh_; }
    std::size_t stochastic_dim() const override { return log_ks_.dim(); }
    bool is_nonlinear() const override { return true; }
    ElementSystem elements(std::span<const double> xi, const Eigen::VectorXd* state,
                           std::span<const int> cells = {}) const override;
    Eigen::VectorXd initial_state() const override;
    Eigen::VectorXd solve(std::span<const double> xi, CostLedger* ledger, Phase phase) const override;
    /// Newton first; the flux march takes over when it stalls. `cells` must
    /// be a contiguous run.
    Eigen::VectorXd solve_local(std::span<const double> xi, const Eigen::VectorXd& state, std::span<const int> cells,
                                std::span<const int> interior, CostLedger* ledger, Phase phase) const override;
    const KLExpansion& field() const noexcept { return log_ks_; }
    Linearization linearization() const noexcept { return linearization_; }

private:
    Mesh mesh_;
    VanGenuchtenModel model_;
    KLExpansion log_ks_;
    RichardsNonlinearBC bc_;
    double tol_;
    std::size_t max_iters_;
    Linearization linearization_;
};

} // namespace stochdd
