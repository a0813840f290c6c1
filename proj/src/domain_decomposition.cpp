#include "stochdd/domain_decomposition.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <set>
#include <variant>

#include <Eigen/SparseCholesky>
#include <Eigen/SparseLU>
#include <fmt/format.h>

#include "stochdd/error.hpp"
#include "stochdd/problems.hpp"

namespace stochdd {

std::vector<int> Partition::closure(std::size_t s) const {
    std::vector<int> out = interior[s];
    for (int pos : interface_local[s]) out.push_back(interface[static_cast<std::size_t>(pos)]);
    return out;
}

std::pair<std::size_t, std::size_t> partition_preset(std::size_t n_sub, int mesh_dimension) {
    if (mesh_dimension == 1) {
        detail::require(n_sub >= 1, "partition_preset: need at least one subdomain");
        return {n_sub, 1};
    }
    switch (n_sub) {
    case 1: return {1, 1};
    case 2: return {2, 1};
    case 3: return {3, 1};
    case 4: return {4, 1};
    case 8: return {4, 2};
    case 15: return {5, 3};
    case 27: return {9, 3};
    default: throw InvalidArgument(fmt::format("partition_preset: no layout for {} subdomains", n_sub));
    }
}

Partition partition_mesh(const Mesh& mesh, std::size_t n_sub, std::span<const int> fixed) {
    const auto [kx, ky] = partition_preset(n_sub, mesh.dimension);
    return partition_mesh(mesh, kx, ky, fixed);
}

Partition partition_mesh(const Mesh& mesh, std::size_t kx, std::size_t ky, std::span<const int> fixed) {
    const std::size_t ny = mesh.dimension == 1 ? 1 : mesh.ny;
    detail::require(kx >= 1 && ky >= 1, "partition_mesh: layout must be positive");
    detail::require(mesh.nx % kx == 0 && ny % ky == 0,
                    fmt::format("partition_mesh: layout ({}, {}) does not divide the {}x{} cell grid", kx, ky, mesh.nx, ny));
    Partition p;
    p.kx = kx;
    p.ky = ky;
    const std::size_t n_sub = kx * ky;
    const std::size_t bx = mesh.nx / kx, by = ny / ky;
    p.cell_owner.resize(mesh.n_cells());
    p.cells.assign(n_sub, {});
    for (std::size_t j = 0; j < ny; ++j) {
        for (std::size_t i = 0; i < mesh.nx; ++i) {
            const std::size_t c = j * mesh.nx + i;
            const auto s = static_cast<int>((j / by) * kx + i / bx);
            p.cell_owner[c] = s;
            p.cells[static_cast<std::size_t>(s)].push_back(static_cast<int>(c));
        }
    }

    std::vector<char> is_fixed(mesh.n_nodes(), 0);
    for (int n : fixed) is_fixed[static_cast<std::size_t>(n)] = 1;
    std::vector<std::set<int>> touching(mesh.n_nodes());
    for (std::size_t c = 0; c < mesh.n_cells(); ++c) {
        for (int n : mesh.cells[c]) touching[static_cast<std::size_t>(n)].insert(p.cell_owner[c]);
    }
    p.interior.assign(n_sub, {});
    p.interface_local.assign(n_sub, {});
    p.node_owner.assign(mesh.n_nodes(), -1);
    for (std::size_t n = 0; n < mesh.n_nodes(); ++n) {
        if (!touching[n].empty()) p.node_owner[n] = *touching[n].begin();
        if (is_fixed[n]) continue;
        if (touching[n].size() == 1) {
            p.interior[static_cast<std::size_t>(*touching[n].begin())].push_back(static_cast<int>(n));
        } else {
            const int pos = static_cast<int>(p.interface.size());
            p.interface.push_back(static_cast<int>(n));
            for (int s : touching[n]) p.interface_local[static_cast<std::size_t>(s)].push_back(pos);
        }
    }
    return p;
}

void write_partition_csv(std::ostream& out, const Partition& p) {
    std::vector<char> on_gamma(p.node_owner.size(), 0);
    for (int n : p.interface) on_gamma[static_cast<std::size_t>(n)] = 1;
    out << "node,subdomain,interface\n";
    for (std::size_t n = 0; n < p.node_owner.size(); ++n) {
        out << n << ',' << p.node_owner[n] << ',' << static_cast<int>(on_gamma[n]) << '\n';
    }
}

std::vector<int> fixed_nodes(const ElementSystem& es) {
    std::vector<int> out;
    out.reserve(es.dirichlet.size());
    for (const auto& d : es.dirichlet) out.push_back(d.first);
    return out;
}

SubdomainSystem extract_subdomain(const ElementSystem& es, const Partition& p, std::size_t s) {
    detail::require(s < p.n_sub(), "extract_subdomain: subdomain index out of range");
    // Local numbering: −1 unknown, otherwise 2·index + (0 interior | 1 interface).
    const std::size_t nn = es.n_nodes;
    std::vector<int> code(nn, -1);
    const auto& inter = p.interior[s];
    const auto& gam = p.interface_local[s];
    for (std::size_t k = 0; k < inter.size(); ++k) code[static_cast<std::size_t>(inter[k])] = static_cast<int>(2 * k);
    for (std::size_t k = 0; k < gam.size(); ++k) {
        code[static_cast<std::size_t>(p.interface[static_cast<std::size_t>(gam[k])])] = static_cast<int>(2 * k + 1);
    }
    std::vector<double> fixed(nn, 0.0);
    std::vector<char> is_fixed(nn, 0);
    for (const auto& [n, v] : es.dirichlet) {
        fixed[static_cast<std::size_t>(n)] = v;
        is_fixed[static_cast<std::size_t>(n)] = 1;
    }

    SubdomainSystem sub;
    sub.s = s;
    sub.symmetric = es.symmetric;
    const auto ni = static_cast<Eigen::Index>(inter.size());
    const auto ng = static_cast<Eigen::Index>(gam.size());
    sub.f_i = Eigen::VectorXd::Zero(ni);
    sub.f_g = Eigen::VectorXd::Zero(ng);
    sub.k_gg = Eigen::MatrixXd::Zero(ng, ng);
    std::vector<Eigen::Triplet<double>> tii, tig, tgi;
    for (const auto& el : es.elements) {
        if (p.cell_owner[static_cast<std::size_t>(el.cell)] != static_cast<int>(s)) continue;
        for (std::size_t a = 0; a < el.nodes.size(); ++a) {
            const int ca = code[static_cast<std::size_t>(el.nodes[a])];
            if (ca < 0) continue;
            const int ra = ca / 2;
            const bool a_gamma = ca % 2 == 1;
            double rhs = el.fe.size() > 0 ? el.fe(static_cast<Eigen::Index>(a)) : 0.0;
            for (std::size_t b = 0; b < el.nodes.size(); ++b) {
                const double v = el.ke(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b));
                const auto nb = static_cast<std::size_t>(el.nodes[b]);
                const int cb = code[nb];
                if (cb < 0) {
                    if (is_fixed[nb]) rhs -= v * fixed[nb];
                    continue;
                }
                const int rb = cb / 2;
                const bool b_gamma = cb % 2 == 1;
                if (!a_gamma && !b_gamma) {
                    tii.emplace_back(ra, rb, v);
                } else if (!a_gamma) {
                    tig.emplace_back(ra, rb, v);
                } else if (!b_gamma) {
                    tgi.emplace_back(ra, rb, v);
                } else {
                    sub.k_gg(ra, rb) += v;
                }
            }
            (a_gamma ? sub.f_g(ra) : sub.f_i(ra)) += rhs;
        }
    }
    for (const auto& [n, v] : es.nodal_loads) {
        const int c = code[static_cast<std::size_t>(n)];
        if (c < 0 || p.node_owner[static_cast<std::size_t>(n)] != static_cast<int>(s)) continue;
        (c % 2 == 1 ? sub.f_g(c / 2) : sub.f_i(c / 2)) += v;
    }
    sub.k_ii.resize(ni, ni);
    sub.k_ii.setFromTriplets(tii.begin(), tii.end());
    sub.k_ig.resize(ni, ng);
    sub.k_ig.setFromTriplets(tig.begin(), tig.end());
    sub.k_gi.resize(ng, ni);
    sub.k_gi.setFromTriplets(tgi.begin(), tgi.end());
    return sub;
}

struct InteriorSolver::Impl {
    std::variant<Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>>, Eigen::SparseLU<Eigen::SparseMatrix<double>>> f;
    Eigen::Index n = 0;
};

InteriorSolver::InteriorSolver(const Eigen::SparseMatrix<double>& k_ii, bool symmetric) : impl_(std::make_unique<Impl>()) {
    impl_->n = k_ii.rows();
    if (impl_->n == 0) return;
    bool ok = false;
    if (symmetric) {
        auto& ldlt = impl_->f.emplace<0>();
        ldlt.compute(k_ii);
        ok = ldlt.info() == Eigen::Success && (ldlt.vectorD().array().abs() > 0.0).all();
    } else {
        auto& lu = impl_->f.emplace<1>();
        lu.analyzePattern(k_ii);
        lu.factorize(k_ii);
        ok = lu.info() == Eigen::Success;
    }
    if (!ok) throw NumericFailure("interior block factorization failed (singular K_II)");
}

InteriorSolver::~InteriorSolver() = default;
InteriorSolver::InteriorSolver(InteriorSolver&&) noexcept = default;
InteriorSolver& InteriorSolver::operator=(InteriorSolver&&) noexcept = default;

Eigen::MatrixXd InteriorSolver::solve(const Eigen::MatrixXd& rhs) const {
    if (impl_->n == 0) return Eigen::MatrixXd(0, rhs.cols());
    return std::visit([&](const auto& solver) -> Eigen::MatrixXd { return solver.solve(rhs); }, impl_->f);
}

SchurLocal local_schur(const SubdomainSystem& sub) {
    SchurLocal out;
    auto solver = std::make_shared<InteriorSolver>(sub.k_ii, sub.symmetric);
    const Eigen::MatrixXd kig = Eigen::MatrixXd(sub.k_ig);
    Eigen::MatrixXd rhs(kig.rows(), kig.cols() + 1);
    rhs << kig, sub.f_i;
    const Eigen::MatrixXd x = solver->solve(rhs);
    if (!x.allFinite()) throw NumericFailure("local_schur: non-finite interior solve");
    const Eigen::MatrixXd kgi_x = sub.k_gi * x;
    out.s = sub.k_gg - kgi_x.leftCols(kig.cols());
    out.g = sub.f_g - kgi_x.col(kig.cols());
    out.interior = std::move(solver);
    return out;
}

std::pair<Eigen::MatrixXd, Eigen::VectorXd> assemble_global_schur(std::span<const SchurLocal> locals, const Partition& p) {
    detail::require(locals.size() == p.n_sub(), "assemble_global_schur: one local complement per subdomain");
    const auto n = static_cast<Eigen::Index>(p.n_interface());
    Eigen::MatrixXd s = Eigen::MatrixXd::Zero(n, n);
    Eigen::VectorXd g = Eigen::VectorXd::Zero(n);
    for (std::size_t k = 0; k < locals.size(); ++k) {
        const auto& r = p.interface_local[k];
        detail::require(static_cast<std::size_t>(locals[k].s.rows()) == r.size(), "assemble_global_schur: size mismatch");
        for (std::size_t a = 0; a < r.size(); ++a) {
            g(r[a]) += locals[k].g(static_cast<Eigen::Index>(a));
            for (std::size_t b = 0; b < r.size(); ++b) s(r[a], r[b]) += locals[k].s(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b));
        }
    }
    return {s, g};
}

Eigen::VectorXd solve_interface(const Eigen::MatrixXd& s_gamma, const Eigen::VectorXd& g_gamma) {
    detail::require(s_gamma.rows() == s_gamma.cols() && s_gamma.rows() == g_gamma.size(), "solve_interface: size mismatch");
    if (g_gamma.size() == 0) return {};
    const Eigen::PartialPivLU<Eigen::MatrixXd> lu(s_gamma);
    const Eigen::VectorXd u = lu.solve(g_gamma);
    const double res = (s_gamma * u - g_gamma).norm();
    const double scale = s_gamma.norm() * u.norm() + g_gamma.norm();
    if (!u.allFinite() || res > 1e-10 * std::max(scale, 1e-300) || lu.rcond() < 1e-15) {
        throw NumericFailure(fmt::format("solve_interface: singular interface system (rcond {:.2e})", lu.rcond()));
    }
    return u;
}

Eigen::VectorXd recover_interior(const SubdomainSystem& sub, const SchurLocal& local, const Eigen::VectorXd& u_gamma,
                                 const Partition& p) {
    detail::require(static_cast<std::size_t>(u_gamma.size()) == p.n_interface(), "recover_interior: u_gamma length");
    const auto& r = p.interface_local[sub.s];
    Eigen::VectorXd ug(static_cast<Eigen::Index>(r.size()));
    for (std::size_t a = 0; a < r.size(); ++a) ug(static_cast<Eigen::Index>(a)) = u_gamma(r[a]);
    const Eigen::VectorXd rhs = sub.f_i - sub.k_ig * ug;
    return local.interior->solve(rhs);
}

Eigen::VectorXd nn_richardson_step(std::span<const SchurLocal> locals, const Partition& p, const Eigen::VectorXd& u_gamma,
                                   double theta) {
    const auto [s, g] = assemble_global_schur(locals, p);
    const Eigen::VectorXd residual = g - s * u_gamma;
    Eigen::VectorXd update = Eigen::VectorXd::Zero(u_gamma.size());
    for (std::size_t k = 0; k < locals.size(); ++k) {
        const auto& r = p.interface_local[k];
        if (r.empty()) continue;
        const Eigen::JacobiSVD<Eigen::MatrixXd> svd(locals[k].s, Eigen::ComputeThinU | Eigen::ComputeThinV);
        const auto& sv = svd.singularValues();
        const double cutoff = 1e-12 * sv(0);
        Eigen::VectorXd rl(static_cast<Eigen::Index>(r.size()));
        for (std::size_t a = 0; a < r.size(); ++a) rl(static_cast<Eigen::Index>(a)) = residual(r[a]);
        Eigen::VectorXd coef = svd.matrixU().transpose() * rl;
        for (Eigen::Index i = 0; i < coef.size(); ++i) coef(i) = sv(i) > cutoff ? coef(i) / sv(i) : 0.0;
        const Eigen::VectorXd z = svd.matrixV() * coef;
        for (std::size_t a = 0; a < r.size(); ++a) update(r[a]) += z(static_cast<Eigen::Index>(a));
    }
    return u_gamma + theta * update;
}

Eigen::VectorXd gather_nodal(const Partition& p, std::span<const Eigen::VectorXd> values, const Eigen::VectorXd& base) {
    detail::require(values.size() == p.n_sub(), "gather_nodal: one value vector per subdomain");
    Eigen::VectorXd out = base;
    for (std::size_t s = 0; s < p.n_sub(); ++s) {
        const auto nodes = p.closure(s);
        detail::require(static_cast<std::size_t>(values[s].size()) == nodes.size(), "gather_nodal: closure length mismatch");
        for (std::size_t k = 0; k < nodes.size(); ++k) {
            if (p.node_owner[static_cast<std::size_t>(nodes[k])] == static_cast<int>(s)) {
                out(nodes[k]) = values[s](static_cast<Eigen::Index>(k));
            }
        }
    }
    return out;
}

DDSolution solve_dd(const ElementSystem& es, const Partition& p, CostLedger* ledger) {
    std::vector<SubdomainSystem> subs;
    std::vector<SchurLocal> locals;
    subs.reserve(p.n_sub());
    locals.reserve(p.n_sub());
    for (std::size_t s = 0; s < p.n_sub(); ++s) {
        subs.push_back(extract_subdomain(es, p, s));
        locals.push_back(local_schur(subs.back()));
        if (ledger && !p.interior[s].empty()) ledger->record_solve(Phase::SubdomainInterior, p.interior[s].size());
    }
    const auto [s_gamma, g_gamma] = assemble_global_schur(locals, p);
    DDSolution out;
    out.u_gamma = solve_interface(s_gamma, g_gamma);
    if (ledger && p.n_interface() > 0) ledger->record_solve(Phase::Interface, p.n_interface());

    Eigen::VectorXd base = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(es.n_nodes));
    for (const auto& [n, v] : es.dirichlet) base(n) = v;
    std::vector<Eigen::VectorXd> values(p.n_sub());
    for (std::size_t s = 0; s < p.n_sub(); ++s) {
        const Eigen::VectorXd ui = recover_interior(subs[s], locals[s], out.u_gamma, p);
        const auto& r = p.interface_local[s];
        values[s].resize(ui.size() + static_cast<Eigen::Index>(r.size()));
        values[s].head(ui.size()) = ui;
        for (std::size_t a = 0; a < r.size(); ++a) values[s](ui.size() + static_cast<Eigen::Index>(a)) = out.u_gamma(r[a]);
    }
    out.u = gather_nodal(p, values, base);
    return out;
}

NonlinearDDResult nonlinear_dd_solve(const StochasticProblem& problem, std::span<const double> xi, const Partition& p,
                                     std::size_t max_outer, double tol, CostLedger* ledger) {
    detail::require(tol > 0.0, "nonlinear_dd_solve: tol must be positive");
    NonlinearDDResult out;
    out.u = problem.initial_state();
    if (problem.residual(xi, out.u) < tol) return out;
    for (std::size_t it = 0; it < max_outer; ++it) {
        const auto es = problem.elements(xi, &out.u);
        out.u = solve_dd(es, p, ledger).u;
        out.residuals.push_back(problem.residual(xi, out.u));
        if (out.residuals.back() < tol) return out;
    }
    throw NonConvergence(fmt::format("nonlinear_dd_solve: residual {:.3e} after {} outer iterations",
                                     out.residuals.empty() ? problem.residual(xi, out.u) : out.residuals.back(), max_outer),
                         out.residuals);
}

} // namespace stochdd
