#include "stochdd/basis_adaptation.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <random>

#include <fmt/format.h>

#include "stochdd/error.hpp"
#include "stochdd/problems.hpp"
#include "stochdd/random_field.hpp"

namespace stochdd {

namespace {

constexpr int kMaxHalvings = 30;

std::span<const double> row_span(const Eigen::MatrixXd& rowmajor_copy, Eigen::Index q, Eigen::Index cols) {
    return {rowmajor_copy.data() + q * cols, static_cast<std::size_t>(cols)};
}

// Points stored row-major so each collocation point is a contiguous span.
Eigen::MatrixXd to_row_major_storage(const Eigen::MatrixXd& pts) {
    Eigen::MatrixXd t = pts.transpose();
    return t;
}

Eigen::VectorXd restrict(const Eigen::VectorXd& v, const std::vector<int>& nodes) {
    Eigen::VectorXd out(static_cast<Eigen::Index>(nodes.size()));
    for (std::size_t k = 0; k < nodes.size(); ++k) out(static_cast<Eigen::Index>(k)) = v(nodes[k]);
    return out;
}

// Flatten a square matrix column-major into a row of a sample matrix.
void store_flat(Eigen::MatrixXd& samples, Eigen::Index q, const Eigen::MatrixXd& m) {
    samples.row(q) = Eigen::Map<const Eigen::RowVectorXd>(m.data(), m.size());
}

Eigen::MatrixXd unflatten(const Eigen::RowVectorXd& row, Eigen::Index n) {
    return Eigen::Map<const Eigen::MatrixXd>(row.data(), n, n);
}

} // namespace

GaussianPart gaussian_part(const StochasticProblem& problem, std::size_t level, CostLedger* ledger) {
    const std::size_t d = problem.stochastic_dim();
    const SparseGrid grid = smolyak_grid(d, level);
    const auto basis = multi_index_set(d, 1);
    const auto n = static_cast<Eigen::Index>(problem.mesh().coords.rows());
    const auto pts = to_row_major_storage(grid.points);
    const auto dd = static_cast<Eigen::Index>(d);

    NispAccumulator acc(grid, basis, static_cast<std::size_t>(n));
    for (Eigen::Index q = 0; q < grid.points.rows(); ++q) {
        const Eigen::VectorXd u = problem.solve(row_span(pts, q, dd), ledger, Phase::GaussianPart);
        acc.add(static_cast<std::size_t>(q), u);
    }
    const PCExpansion pce = std::move(acc).finish(problem.mesh().coords);

    GaussianPart gp;
    gp.level = level;
    gp.u0 = pce.coefficients.row(0).transpose();
    gp.ui.resize(dd, n);
    // Order-one basis is graded: index k+1 is the linear term in some ξ_i.
    for (std::size_t k = 1; k < basis.size(); ++k) {
        const auto& idx = basis[k];
        const auto i = static_cast<Eigen::Index>(std::find(idx.begin(), idx.end(), 1u) - idx.begin());
        gp.ui.row(i) = pce.coefficients.row(static_cast<Eigen::Index>(k));
    }
    return gp;
}

Eigen::MatrixXd solution_covariance(const GaussianPart& gp, const Partition& p, std::size_t s) {
    detail::require(s < p.n_sub(), "solution_covariance: subdomain out of range");
    const auto nodes = p.closure(s);
    Eigen::MatrixXd us(gp.ui.rows(), static_cast<Eigen::Index>(nodes.size()));
    for (std::size_t k = 0; k < nodes.size(); ++k) us.col(static_cast<Eigen::Index>(k)) = gp.ui.col(nodes[k]);
    return us.transpose() * us;
}

HilbertKL hilbert_kl(const Eigen::MatrixXd& cov, const Eigen::VectorXd& node_weights, std::size_t d) {
    KLExpansion kl = kl_solve(cov, node_weights, d);
    return {std::move(kl.eigenvalues), std::move(kl.eigenfunctions)};
}

AdaptedBasis adaptation_matrix(const GaussianPart& gp, const HilbertKL& kl, const Eigen::VectorXd& closure_weights,
                               const Partition& p, std::size_t s, std::size_t r, std::uint64_t seed) {
    const auto d = gp.ui.rows();
    detail::require(r >= 1 && static_cast<Eigen::Index>(r) <= d, "adaptation_matrix: need 1 <= r <= d");
    detail::require(kl.mu.size() == d && kl.phi.rows() == d, "adaptation_matrix: need d Hilbert-KL pairs");
    const auto nodes = p.closure(s);
    const auto m = static_cast<Eigen::Index>(nodes.size());
    detail::require(kl.phi.cols() == m && closure_weights.size() == m, "adaptation_matrix: closure size mismatch");

    const double mu1 = kl.mu(0);
    if (!(mu1 > 0.0) || !std::isfinite(mu1)) {
        throw InvalidArgument(fmt::format("adaptation_matrix: subdomain {} has a degenerate (zero) solution covariance", s));
    }

    Eigen::MatrixXd us(d, m);
    for (Eigen::Index k = 0; k < m; ++k) us.col(k) = gp.ui.col(nodes[static_cast<std::size_t>(k)]);

    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(d, d);
    Eigen::Index filled = 0;
    auto orthonormalize_into = [&](Eigen::VectorXd v) {
        for (int pass = 0; pass < 2; ++pass) {
            for (Eigen::Index j = 0; j < filled; ++j) v -= a.row(j).dot(v) * a.row(j).transpose();
        }
        const double nv = v.norm();
        if (nv < 1e-10) return false;
        a.row(filled++) = (v / nv).transpose();
        return true;
    };

    const Eigen::MatrixXd weighted_phi = kl.phi * closure_weights.asDiagonal();
    for (Eigen::Index i = 0; i < d && kl.mu(i) > 1e-12 * mu1; ++i) {
        const Eigen::VectorXd row = (us * weighted_phi.row(i).transpose()) / std::sqrt(kl.mu(i));
        orthonormalize_into(row);
    }

    std::mt19937_64 rng(seed ^ (0x9E3779B97F4A7C15ULL * (static_cast<std::uint64_t>(s) + 1)));
    std::normal_distribution<double> normal;
    while (filled < d) {
        Eigen::VectorXd v(d);
        for (Eigen::Index i = 0; i < d; ++i) v(i) = normal(rng);
        orthonormalize_into(std::move(v));
    }

    AdaptedBasis out;
    out.s = s;
    out.a = std::move(a);
    out.r = r;
    out.mu = kl.mu;
    out.phi = kl.phi;
    return out;
}

AdaptedBasis adapt_subdomain(const GaussianPart& gp, const Partition& p, std::size_t s,
                             const Eigen::VectorXd& node_weights, std::size_t r, std::uint64_t seed) {
    const auto nodes = p.closure(s);
    const Eigen::VectorXd w = restrict(node_weights, nodes);
    const Eigen::MatrixXd cov = solution_covariance(gp, p, s);
    const HilbertKL kl = hilbert_kl(cov, w, gp.dim());
    return adaptation_matrix(gp, kl, w, p, s, r, seed);
}

Eigen::MatrixXd map_collocation(const AdaptedBasis& basis, const Eigen::MatrixXd& eta) {
    const auto r = eta.cols();
    detail::require(r >= 1 && r <= basis.a.rows(), "map_collocation: retained dimension exceeds d");
    return eta * basis.a.topRows(r);
}

Eigen::MatrixXd project_between_bases(const Eigen::MatrixXd& coeffs, const MultiIndexSet& source,
                                      const Eigen::MatrixXd& a_source, const Eigen::MatrixXd& a_target, std::size_t r,
                                      const SparseGrid& grid, const MultiIndexSet& target) {
    const auto ri = static_cast<Eigen::Index>(r);
    detail::require(source.dim() == r && target.dim() == r && grid.dim == r,
                    "project_between_bases: bases and grid must live in r dimensions");
    detail::require(a_source.rows() == a_target.rows() && a_source.rows() >= ri,
                    "project_between_bases: adaptation matrices must share d >= r");
    detail::require(static_cast<std::size_t>(coeffs.rows()) == source.size(),
                    "project_between_bases: one coefficient row per source basis function");
    const Eigen::MatrixXd t = (a_source * a_target.transpose()).topLeftCorner(ri, ri);
    const Eigen::MatrixXd src_pts = grid.points * t.transpose();
    const Eigen::MatrixXd samples = basis_matrix(source, src_pts) * coeffs;
    return nisp_coefficients(grid, samples, target);
}

AdaptedSolution adapted_subdomain_solve(const StochasticProblem& problem, const Partition& p,
                                        std::span<const AdaptedBasis> bases, const AdaptedSolveOptions& options,
                                        CostLedger* ledger) {
    const std::size_t nd = p.n_sub();
    detail::require(bases.size() == nd, "adapted_subdomain_solve: one adapted basis per subdomain");
    const std::size_t r = bases[0].r;
    for (const auto& b : bases) {
        detail::require(b.r == r, "adapted_subdomain_solve: all subdomains must share r");
        detail::require(static_cast<std::size_t>(b.a.rows()) == problem.stochastic_dim(),
                        "adapted_subdomain_solve: adaptation matrix size must equal d");
    }
    const bool nonlinear = problem.is_nonlinear();
    detail::require(!nonlinear || options.max_outer >= 1, "adapted_subdomain_solve: max_outer must be >= 1");

    AdaptedSolution out;
    out.grid = smolyak_grid(r, options.level);
    const SparseGrid& grid = out.grid;
    const auto basis = multi_index_set(r, options.order);
    const auto nq = grid.points.rows();
    const Eigen::MatrixXd psi_own = basis_matrix(basis, grid.points);
    const auto n_terms = basis.size();
    const auto n_gamma = static_cast<Eigen::Index>(p.n_interface());

    const auto d = static_cast<Eigen::Index>(problem.stochastic_dim());
    std::vector<Eigen::MatrixXd> xi(nd);      // row-major storage: d × Q
    std::vector<std::vector<int>> closure(nd);
    for (std::size_t s = 0; s < nd; ++s) {
        xi[s] = to_row_major_storage(map_collocation(bases[s], grid.points));
        closure[s] = p.closure(s);
    }

    // Nonlinear problems iterate on the interface values: each subdomain is
    // solved exactly for its current interface data, and the projected Schur
    // blocks of the linearization at that local solution give a Newton update
    // of the interface. Per-(s, q) closure iterates warm-start the local solves.
    const Eigen::VectorXd state0 = problem.initial_state();
    std::vector<Eigen::MatrixXd> iterate;
    if (nonlinear) {
        iterate.resize(nd);
        for (std::size_t s = 0; s < nd; ++s) {
            if (options.initial) {
                const auto& gp = *options.initial;
                detail::require(gp.ui.rows() == d && gp.ui.cols() == state0.size(),
                                "adapted_subdomain_solve: initial Gaussian part does not match the problem");
                Eigen::MatrixXd us(d, static_cast<Eigen::Index>(closure[s].size()));
                Eigen::VectorXd u0(static_cast<Eigen::Index>(closure[s].size()));
                for (std::size_t k = 0; k < closure[s].size(); ++k) {
                    us.col(static_cast<Eigen::Index>(k)) = gp.ui.col(closure[s][k]);
                    u0(static_cast<Eigen::Index>(k)) = gp.u0(closure[s][k]);
                }
                // xi[s] is d × Q, so each column is one collocation point.
                iterate[s] = (us.transpose() * xi[s]).colwise() + u0;
            } else {
                iterate[s] = restrict(state0, closure[s]).replicate(1, nq);
            }
        }
    }
    auto full_state = [&](std::size_t s, const Eigen::VectorXd& closure_values) {
        Eigen::VectorXd state = state0;
        for (std::size_t k = 0; k < closure[s].size(); ++k) state(closure[s][k]) = closure_values(static_cast<Eigen::Index>(k));
        return state;
    };
    // Accepted interface values per (s, q), the fallback when an update
    // leaves the set where the local problem is solvable.
    // The problem's own initial state is taken to be admissible.
    std::vector<Eigen::MatrixXd> accepted(nd);
    if (nonlinear) {
        for (std::size_t s = 0; s < nd; ++s) {
            const auto n_gs = static_cast<Eigen::Index>(p.interface_local[s].size());
            accepted[s] = restrict(state0, closure[s]).tail(n_gs).replicate(1, nq);
        }
    }
    // Re-solves the interior of (s, q) for the interface values held in its
    // iterate and stores the result back. A failing local solve halves the
    // interface update towards the last accepted values.
    auto local_solve = [&](std::size_t s, Eigen::Index q) {
        const auto x = row_span(xi[s], q, d);
        const auto n_gs = static_cast<Eigen::Index>(p.interface_local[s].size());
        for (int halvings = 0;; ++halvings) {
            try {
                const Eigen::VectorXd state = problem.solve_local(x, full_state(s, iterate[s].col(q)), p.cells[s],
                                                                  p.interior[s], ledger, Phase::SubdomainInterior);
                iterate[s].col(q) = restrict(state, closure[s]);
                accepted[s].col(q) = iterate[s].col(q).tail(n_gs);
                return;
            } catch (const NonConvergence&) {
                if (halvings == kMaxHalvings) throw;
            }
            auto gamma = iterate[s].col(q).tail(n_gs);
            gamma = 0.5 * (gamma + accepted[s].col(q));
        }
    };
    auto element_system = [&](std::size_t s, Eigen::Index q) {
        const auto x = row_span(xi[s], q, d);
        if (!nonlinear) return problem.elements(x, nullptr, p.cells[s]);
        const Eigen::VectorXd state = full_state(s, iterate[s].col(q));
        return problem.elements(x, &state, p.cells[s]);
    };

    const std::size_t n_outer = nonlinear ? options.max_outer : 1;
    std::vector<Eigen::MatrixXd> closure_samples(nd);
    for (std::size_t outer = 0; outer < n_outer; ++outer) {
        // Pass 1: local Schur data at each subdomain's own collocation points.
        std::vector<Eigen::MatrixXd> s_samples(nd), g_samples(nd);
        std::vector<Eigen::MatrixXd> s_coeffs(nd), g_coeffs(nd);
        for (std::size_t s = 0; s < nd; ++s) {
            const auto ng = static_cast<Eigen::Index>(p.interface_local[s].size());
            s_samples[s].resize(nq, ng * ng);
            g_samples[s].resize(nq, ng);
            for (Eigen::Index q = 0; q < nq; ++q) {
                if (nonlinear) local_solve(s, q);
                const auto es = element_system(s, q);
                const auto sub = extract_subdomain(es, p, s);
                const auto local = local_schur(sub);
                if (ledger && !p.interior[s].empty()) ledger->record_solve(Phase::SubdomainInterior, p.interior[s].size());
                store_flat(s_samples[s], q, local.s);
                g_samples[s].row(q) = local.g.transpose();
            }
            if (nd > 1) {
                s_coeffs[s] = nisp_coefficients(grid, s_samples[s], basis);
                g_coeffs[s] = nisp_coefficients(grid, g_samples[s], basis);
            }
        }

        // Pass 2: bring every other subdomain's Schur data into η^s, solve the
        // interface at each point of η^s and recover the interior.
        double increment = 0.0;
        for (std::size_t s = 0; s < nd; ++s) {
            std::vector<Eigen::MatrixXd> s_at(nd), g_at(nd);
            for (std::size_t o = 0; o < nd; ++o) {
                if (o == s) {
                    s_at[o] = s_samples[o];
                    g_at[o] = g_samples[o];
                    continue;
                }
                const Eigen::MatrixXd cs = project_between_bases(s_coeffs[o], basis, bases[o].a, bases[s].a, r, grid, basis);
                const Eigen::MatrixXd cg = project_between_bases(g_coeffs[o], basis, bases[o].a, bases[s].a, r, grid, basis);
                s_at[o] = psi_own * cs;
                g_at[o] = psi_own * cg;
                if (ledger) {
                    ledger->record_flops(Phase::Projection, projection_pair_flops(static_cast<std::size_t>(nq), n_terms,
                                                                                 p.interface_local[o].size()));
                }
            }
            if (ledger) {
                for (std::size_t o = 0; o < nd; ++o) {
                    const auto ng = static_cast<std::uint64_t>(p.interface_local[o].size());
                    ledger->record_flops(Phase::Projection, static_cast<std::uint64_t>(nq) * (ng * ng + ng));
                }
            }

            closure_samples[s].resize(nq, static_cast<Eigen::Index>(closure[s].size()));
            const auto n_int = static_cast<Eigen::Index>(p.interior[s].size());
            const auto& rl = p.interface_local[s];
            for (Eigen::Index q = 0; q < nq; ++q) {
                std::vector<SchurLocal> locals(nd);
                for (std::size_t o = 0; o < nd; ++o) {
                    const auto ng = static_cast<Eigen::Index>(p.interface_local[o].size());
                    locals[o].s = unflatten(s_at[o].row(q), ng);
                    locals[o].g = g_at[o].row(q).transpose();
                }
                Eigen::VectorXd u_gamma = Eigen::VectorXd::Zero(n_gamma);
                if (n_gamma > 0) {
                    const auto [s_gamma, g_gamma] = assemble_global_schur(locals, p);
                    u_gamma = solve_interface(s_gamma, g_gamma);
                    if (ledger) ledger->record_solve(Phase::Interface, p.n_interface());
                }
                if (nonlinear) {
                    // New interface data only; the interior follows from the
                    // next local solve.
                    for (std::size_t a = 0; a < rl.size(); ++a) {
                        double& v = iterate[s](n_int + static_cast<Eigen::Index>(a), q);
                        increment = std::max(increment, std::abs(u_gamma(rl[a]) - v));
                        v = u_gamma(rl[a]);
                    }
                    continue;
                }
                // The interior factorization from pass 1 is recomputed here rather than kept.
                const auto es = element_system(s, q);
                const auto sub = extract_subdomain(es, p, s);
                SchurLocal own = local_schur(sub);
                const Eigen::VectorXd ui = recover_interior(sub, own, u_gamma, p);
                auto row = closure_samples[s].row(q);
                row.head(n_int) = ui.transpose();
                for (std::size_t a = 0; a < rl.size(); ++a) row(n_int + static_cast<Eigen::Index>(a)) = u_gamma(rl[a]);
            }
        }

        if (nonlinear) {
            out.outer_residuals.push_back(increment);
            if (increment < options.tol) break;
        }
    }
    if (nonlinear) {
        // Interiors consistent with the final interface values.
        for (std::size_t s = 0; s < nd; ++s) {
            for (Eigen::Index q = 0; q < nq; ++q) local_solve(s, q);
            closure_samples[s] = iterate[s].transpose();
        }
    }

    const auto& coords = problem.mesh().coords;
    out.pce.reserve(nd);
    for (std::size_t s = 0; s < nd; ++s) {
        Eigen::MatrixXd sub_coords(static_cast<Eigen::Index>(closure[s].size()), coords.cols());
        for (std::size_t k = 0; k < closure[s].size(); ++k) sub_coords.row(static_cast<Eigen::Index>(k)) = coords.row(closure[s][k]);
        out.pce.push_back(nisp_project(grid, closure_samples[s], basis));
        out.pce.back().dof_coords = std::move(sub_coords);
    }
    return out;
}

void write_adapted_basis(std::ostream& matrix_out, std::ostream& eigen_out, const AdaptedBasis& basis) {
    write_matrix_csv(matrix_out, basis.a);
    write_eigenvalues_csv(eigen_out, basis.mu);
}

} // namespace stochdd
