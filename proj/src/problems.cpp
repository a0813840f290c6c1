#include "stochdd/problems.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>
#include <vector>

#include <Eigen/SparseLU>
#include <fmt/format.h>

#include "stochdd/error.hpp"

namespace stochdd {

Eigen::VectorXd StochasticProblem::initial_state() const {
    return Eigen::VectorXd::Zero(static_cast<Eigen::Index>(mesh().n_nodes()));
}

Eigen::VectorXd StochasticProblem::solve(std::span<const double> xi, CostLedger* ledger, Phase phase) const {
    const auto sys = assemble(elements(xi, nullptr));
    Eigen::VectorXd u = solve_linear(sys);
    if (ledger) ledger->record_solve(phase, sys.n_dof());
    return sys.expand(u);
}

double StochasticProblem::residual(std::span<const double> xi, const Eigen::VectorXd& state) const {
    const auto sys = assemble(elements(xi, &state));
    return (sys.K * sys.restrict_nodal(state) - sys.f).norm();
}

std::size_t StochasticProblem::n_free() const {
    const auto es = elements(std::vector<double>(stochastic_dim(), 0.0), nullptr);
    return es.n_nodes - es.dirichlet.size();
}

namespace {

// Element residual K(u)u − f(u) on the interior nodes, with `pos` mapping a
// global node id to its interior slot.
Eigen::VectorXd interior_residual(const ElementSystem& es, const Eigen::VectorXd& u,
                                  const std::unordered_map<int, Eigen::Index>& pos) {
    Eigen::VectorXd r = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(pos.size()));
    for (const auto& e : es.elements) {
        for (std::size_t a = 0; a < e.nodes.size(); ++a) {
            const auto it = pos.find(e.nodes[a]);
            if (it == pos.end()) continue;
            double v = -e.fe(static_cast<Eigen::Index>(a));
            for (std::size_t b = 0; b < e.nodes.size(); ++b)
                v += e.ke(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) * u(e.nodes[b]);
            r(it->second) += v;
        }
    }
    for (const auto& [n, v] : es.nodal_loads) {
        if (const auto it = pos.find(n); it != pos.end()) r(it->second) -= v;
    }
    return r;
}

} // namespace

StochasticProblem::LocalNewton StochasticProblem::local_newton(std::span<const double> xi, const Eigen::VectorXd& state,
                                                               std::span<const int> cells, std::span<const int> interior,
                                                               double tol, std::size_t max_iters) const {
    LocalNewton out{state, 0, false};
    const auto n = static_cast<Eigen::Index>(interior.size());
    if (n == 0) {
        out.converged = true;
        return out;
    }
    std::unordered_map<int, Eigen::Index> pos;
    for (Eigen::Index k = 0; k < n; ++k) pos.emplace(interior[static_cast<std::size_t>(k)], k);

    Eigen::VectorXd& u = out.state;
    auto es = elements(xi, &u, cells);
    double res = interior_residual(es, u, pos).norm();
    std::vector<double> history{res};
    while (out.iterations < max_iters) {
        if (res < tol) {
            out.converged = true;
            return out;
        }
        // Linearized patch system K_II δ = −R_I at the current coefficients.
        std::vector<Eigen::Triplet<double>> trip;
        for (const auto& e : es.elements) {
            for (std::size_t a = 0; a < e.nodes.size(); ++a) {
                const auto ia = pos.find(e.nodes[a]);
                if (ia == pos.end()) continue;
                for (std::size_t b = 0; b < e.nodes.size(); ++b) {
                    const auto ib = pos.find(e.nodes[b]);
                    if (ib != pos.end())
                        trip.emplace_back(ia->second, ib->second,
                                          e.ke(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)));
                }
            }
        }
        Eigen::SparseMatrix<double> k(n, n);
        k.setFromTriplets(trip.begin(), trip.end());
        Eigen::SparseLU<Eigen::SparseMatrix<double>> lu(k);
        if (lu.info() != Eigen::Success) return out;
        const Eigen::VectorXd delta = lu.solve(-interior_residual(es, u, pos));
        ++out.iterations;

        double step = 1.0;
        Eigen::VectorXd trial = u;
        double trial_res = res;
        for (int halvings = 0; halvings <= 20; ++halvings, step *= 0.5) {
            for (Eigen::Index k2 = 0; k2 < n; ++k2) trial(interior[static_cast<std::size_t>(k2)]) = u(interior[static_cast<std::size_t>(k2)]) + step * delta(k2);
            es = elements(xi, &trial, cells);
            trial_res = interior_residual(es, trial, pos).norm();
            if (std::isfinite(trial_res) && trial_res < res) break;
        }
        if (!(std::isfinite(trial_res) && trial_res < res)) return out;
        u = trial;
        res = trial_res;
        history.push_back(res);
        // Stagnation: five steps that did not halve the residual.
        constexpr std::size_t window = 5;
        if (history.size() > window + 4 && res > 0.5 * history[history.size() - 1 - window]) return out;
    }
    out.converged = res < tol;
    return out;
}

Eigen::VectorXd StochasticProblem::solve_local(std::span<const double> xi, const Eigen::VectorXd& state,
                                               std::span<const int> cells, std::span<const int> interior,
                                               CostLedger* ledger, Phase phase) const {
    const double scale = std::max(1.0, state.cwiseAbs().maxCoeff());
    auto sol = local_newton(xi, state, cells, interior, 1e-10 * scale, is_nonlinear() ? 100 : 1);
    if (ledger && sol.iterations > 0) ledger->record_solve(phase, interior.size(), sol.iterations);
    // A linear patch is solved by its single step whatever the residual says.
    if (!sol.converged && is_nonlinear()) throw NonConvergence("solve_local: patch Newton did not converge", {});
    return sol.state;
}

DiffusionProblem2D::DiffusionProblem2D(Mesh mesh, KLExpansion log_a, DiffusionBC bc, std::optional<PointSink> sink)
    : mesh_(std::move(mesh)), log_a_(std::move(log_a)), bc_(bc), sink_(sink) {
    detail::require(static_cast<std::size_t>(log_a_.mean.size()) == mesh_.n_nodes(),
                    "DiffusionProblem2D: field must live on mesh nodes");
}

ElementSystem DiffusionProblem2D::elements(std::span<const double> xi, const Eigen::VectorXd*,
                                           std::span<const int> cells) const {
    return diffusion_2d_elements(mesh_, evaluate_field(log_a_, xi), sink_, bc_, cells);
}

RichardsLinearProblem::RichardsLinearProblem(Mesh mesh, GardnerModel model, KLExpansion log_ks, RichardsLinearBC bc)
    : mesh_(std::move(mesh)), model_(std::move(model)), log_ks_(std::move(log_ks)), bc_(bc) {
    detail::require(static_cast<std::size_t>(log_ks_.mean.size()) == mesh_.n_cells(),
                    "RichardsLinearProblem: field must live on mesh cells");
}

ElementSystem RichardsLinearProblem::elements(std::span<const double> xi, const Eigen::VectorXd*,
                                              std::span<const int> cells) const {
    return richards_linear_elements(mesh_, model_, evaluate_field(log_ks_, xi), bc_, cells);
}

RichardsNonlinearProblem::RichardsNonlinearProblem(Mesh mesh, VanGenuchtenModel model, KLExpansion log_ks,
                                                   RichardsNonlinearBC bc, double tol, std::size_t max_iters,
                                                   Linearization linearization)
    : mesh_(std::move(mesh)), model_(model), log_ks_(std::move(log_ks)), bc_(bc), tol_(tol), max_iters_(max_iters),
      linearization_(linearization) {
    detail::require(static_cast<std::size_t>(log_ks_.mean.size()) == mesh_.n_cells(),
                    "RichardsNonlinearProblem: field must live on mesh cells");
}

ElementSystem RichardsNonlinearProblem::elements(std::span<const double> xi, const Eigen::VectorXd* state,
                                                 std::span<const int> cells) const {
    const Eigen::VectorXd psi = state ? *state : initial_state();
    // K_s = exp(g) multiplies the van Genuchten relative conductivity.
    const Eigen::VectorXd ks = evaluate_field(log_ks_, xi);
    if (linearization_ == Linearization::Newton) return richards_newton_elements(mesh_, model_, ks, bc_, psi, cells);
    return richards_nonlinear_elements(mesh_, model_, ks, bc_, psi, cells);
}

Eigen::VectorXd RichardsNonlinearProblem::initial_state() const { return richards_initial_guess(mesh_, bc_); }

Eigen::VectorXd RichardsNonlinearProblem::solve(std::span<const double> xi, CostLedger* ledger, Phase phase) const {
    const auto sol = solve_richards_nonlinear_1d(mesh_, model_, evaluate_field(log_ks_, xi), bc_, tol_, max_iters_,
                                                 std::nullopt, linearization_);
    if (ledger && sol.iterations > 0) ledger->record_solve(phase, mesh_.n_nodes() - 2, sol.iterations);
    return sol.psi;
}

Eigen::VectorXd RichardsNonlinearProblem::solve_local(std::span<const double> xi, const Eigen::VectorXd& state,
                                                      std::span<const int> cells, std::span<const int> interior,
                                                      CostLedger* ledger, Phase phase) const {
    auto sol = local_newton(xi, state, cells, interior, tol_, max_iters_);
    if (ledger && sol.iterations > 0) ledger->record_solve(phase, interior.size(), sol.iterations);
    if (sol.converged || cells.empty()) return sol.state;

    const auto [lo, hi] = std::minmax_element(cells.begin(), cells.end());
    detail::require(static_cast<std::size_t>(*hi - *lo + 1) == cells.size(),
                    "RichardsNonlinearProblem::solve_local: cells must be contiguous");
    const int first = mesh_.cells[static_cast<std::size_t>(*lo)].front();
    const int last = mesh_.cells[static_cast<std::size_t>(*hi)].back();
    const auto heads = richards_flux_march(mesh_, model_, evaluate_field(log_ks_, xi), static_cast<std::size_t>(*lo),
                                           cells.size(), state(first), state(last));
    if (!heads) throw NonConvergence("RichardsNonlinearProblem::solve_local: upward flow across the patch", {});
    Eigen::VectorXd out = state;
    out.segment(first, heads->size()) = *heads;
    // Polish the marched heads to the Newton tolerance.
    sol = local_newton(xi, out, cells, interior, tol_, 5);
    if (ledger && sol.iterations > 0) ledger->record_solve(phase, interior.size(), sol.iterations);
    return sol.converged ? sol.state : out;
}

} // namespace stochdd
