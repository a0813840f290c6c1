#include "stochdd/pde.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

#include <Eigen/SparseCholesky>
#include <boost/math/tools/roots.hpp>
#include <Eigen/SparseLU>
#include <fmt/format.h>

#include "stochdd/error.hpp"

namespace stochdd {

// ------------------------------------------------------------------- mesh

Mesh make_mesh_1d(double length, std::size_t n_elements) {
    detail::require(length > 0.0 && n_elements >= 1, "make_mesh_1d: positive length and element count required");
    Mesh m;
    m.dimension = 1;
    m.nx = n_elements;
    m.lx = length;
    m.coords.resize(static_cast<Eigen::Index>(n_elements + 1), 1);
    for (std::size_t i = 0; i <= n_elements; ++i) {
        m.coords(static_cast<Eigen::Index>(i), 0) = length * static_cast<double>(i) / static_cast<double>(n_elements);
    }
    m.cells.reserve(n_elements);
    for (std::size_t i = 0; i < n_elements; ++i) m.cells.push_back({static_cast<int>(i), static_cast<int>(i + 1)});
    m.boundary.assign(n_elements + 1, kInterior);
    m.boundary.front() = kLeft;
    m.boundary.back() = kRight;
    return m;
}

Mesh make_mesh_2d(double lx, double ly, std::size_t nx, std::size_t ny) {
    detail::require(lx > 0.0 && ly > 0.0 && nx >= 1 && ny >= 1, "make_mesh_2d: positive extents and counts required");
    Mesh m;
    m.dimension = 2;
    m.nx = nx;
    m.ny = ny;
    m.lx = lx;
    m.ly = ly;
    const std::size_t nn = (nx + 1) * (ny + 1);
    m.coords.resize(static_cast<Eigen::Index>(nn), 2);
    m.boundary.assign(nn, kInterior);
    for (std::size_t j = 0; j <= ny; ++j) {
        for (std::size_t i = 0; i <= nx; ++i) {
            const auto id = static_cast<Eigen::Index>(m.node(i, j));
            m.coords(id, 0) = lx * static_cast<double>(i) / static_cast<double>(nx);
            m.coords(id, 1) = ly * static_cast<double>(j) / static_cast<double>(ny);
            std::uint8_t tag = kInterior;
            if (i == 0) tag |= kLeft;
            if (i == nx) tag |= kRight;
            if (j == 0) tag |= kBottom;
            if (j == ny) tag |= kTop;
            m.boundary[static_cast<std::size_t>(id)] = tag;
        }
    }
    m.cells.reserve(nx * ny);
    for (std::size_t j = 0; j < ny; ++j) {
        for (std::size_t i = 0; i < nx; ++i) {
            m.cells.push_back({m.node(i, j), m.node(i + 1, j), m.node(i + 1, j + 1), m.node(i, j + 1)});
        }
    }
    return m;
}

Eigen::MatrixXd Mesh::cell_centers() const {
    Eigen::MatrixXd c(static_cast<Eigen::Index>(n_cells()), dimension);
    for (std::size_t e = 0; e < n_cells(); ++e) {
        Eigen::RowVectorXd sum = Eigen::RowVectorXd::Zero(dimension);
        for (int v : cells[e]) sum += coords.row(v);
        c.row(static_cast<Eigen::Index>(e)) = sum / static_cast<double>(cells[e].size());
    }
    return c;
}

Eigen::VectorXd Mesh::cell_weights() const {
    return Eigen::VectorXd::Constant(static_cast<Eigen::Index>(n_cells()), dimension == 1 ? hx() : hx() * hy());
}

Eigen::VectorXd Mesh::node_weights() const {
    Eigen::VectorXd w = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n_nodes()));
    const double share = dimension == 1 ? hx() / 2.0 : hx() * hy() / 4.0;
    for (const auto& c : cells) {
        for (int v : c) w(v) += share;
    }
    return w;
}

std::optional<int> Mesh::find_node(std::span<const double> point, double tol) const {
    detail::require(static_cast<int>(point.size()) == dimension, "find_node: point dimension mismatch");
    for (Eigen::Index i = 0; i < coords.rows(); ++i) {
        bool hit = true;
        for (int k = 0; k < dimension; ++k) hit = hit && std::abs(coords(i, k) - point[static_cast<std::size_t>(k)]) <= tol;
        if (hit) return static_cast<int>(i);
    }
    return std::nullopt;
}

// --------------------------------------------------------------- assembly

Eigen::VectorXd LinearSystem::expand(const Eigen::VectorXd& u_free) const {
    detail::require(static_cast<std::size_t>(u_free.size()) == n_dof(), "expand: free-dof vector length mismatch");
    Eigen::VectorXd u(static_cast<Eigen::Index>(n_nodes()));
    for (std::size_t i = 0; i < n_nodes(); ++i) {
        if (node_to_dof[i] >= 0) u(static_cast<Eigen::Index>(i)) = u_free(node_to_dof[i]);
    }
    for (const auto& [node, value] : dirichlet) u(node) = value;
    return u;
}

Eigen::VectorXd LinearSystem::restrict_nodal(const Eigen::VectorXd& u_nodal) const {
    detail::require(static_cast<std::size_t>(u_nodal.size()) == n_nodes(), "restrict_nodal: nodal length mismatch");
    Eigen::VectorXd u(static_cast<Eigen::Index>(n_dof()));
    for (std::size_t d = 0; d < dof_to_node.size(); ++d) u(static_cast<Eigen::Index>(d)) = u_nodal(dof_to_node[d]);
    return u;
}

LinearSystem assemble(const ElementSystem& es) {
    LinearSystem sys;
    sys.symmetric = es.symmetric;
    sys.dirichlet = es.dirichlet;
    const std::size_t nn = es.n_nodes;
    std::vector<double> fixed(nn, 0.0);
    std::vector<char> is_fixed(nn, 0);
    for (const auto& [node, value] : es.dirichlet) {
        detail::require(node >= 0 && static_cast<std::size_t>(node) < nn, "assemble: Dirichlet node out of range");
        is_fixed[static_cast<std::size_t>(node)] = 1;
        fixed[static_cast<std::size_t>(node)] = value;
    }
    sys.node_to_dof.assign(nn, -1);
    for (std::size_t i = 0; i < nn; ++i) {
        if (!is_fixed[i]) {
            sys.node_to_dof[i] = static_cast<int>(sys.dof_to_node.size());
            sys.dof_to_node.push_back(static_cast<int>(i));
        }
    }
    const auto n = static_cast<Eigen::Index>(sys.dof_to_node.size());
    sys.f = Eigen::VectorXd::Zero(n);
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(es.elements.size() * 16);
    for (const auto& el : es.elements) {
        const auto k = el.nodes.size();
        for (std::size_t a = 0; a < k; ++a) {
            const int ra = sys.node_to_dof[static_cast<std::size_t>(el.nodes[a])];
            if (ra < 0) continue;
            if (el.fe.size() > 0) sys.f(ra) += el.fe(static_cast<Eigen::Index>(a));
            for (std::size_t b = 0; b < k; ++b) {
                const double v = el.ke(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b));
                const auto nb = static_cast<std::size_t>(el.nodes[b]);
                const int cb = sys.node_to_dof[nb];
                if (cb >= 0) {
                    trip.emplace_back(ra, cb, v);
                } else {
                    sys.f(ra) -= v * fixed[nb];
                }
            }
        }
    }
    for (const auto& [node, value] : es.nodal_loads) {
        const int r = sys.node_to_dof[static_cast<std::size_t>(node)];
        if (r >= 0) sys.f(r) += value;
    }
    sys.K.resize(n, n);
    sys.K.setFromTriplets(trip.begin(), trip.end());
    sys.K.makeCompressed();
    return sys;
}

Eigen::VectorXd solve_sparse(const Eigen::SparseMatrix<double>& K, const Eigen::VectorXd& f, bool symmetric) {
    detail::require(K.rows() == K.cols() && K.rows() == f.size(), "solve_linear: dimension mismatch");
    if (f.size() == 0) return {};
    Eigen::VectorXd u;
    if (symmetric) {
        Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> ldlt(K);
        if (ldlt.info() != Eigen::Success) throw NumericFailure("solve_linear: LDLT factorization failed");
        u = ldlt.solve(f);
    } else {
        Eigen::SparseLU<Eigen::SparseMatrix<double>> lu;
        lu.analyzePattern(K);
        lu.factorize(K);
        if (lu.info() != Eigen::Success) throw NumericFailure("solve_linear: LU factorization failed");
        u = lu.solve(f);
    }
    const double res = (K * u - f).norm();
    if (!std::isfinite(res) || res > 1e-10 * std::max(f.norm(), 1.0)) {
        throw NumericFailure(fmt::format("solve_linear: residual {:.3e} too large (singular system?)", res));
    }
    return u;
}

Eigen::VectorXd solve_linear(const LinearSystem& system) { return solve_sparse(system.K, system.f, system.symmetric); }

void write_solution_csv(std::ostream& out, const Mesh& mesh, const Eigen::VectorXd& u_nodal) {
    detail::require(static_cast<std::size_t>(u_nodal.size()) == mesh.n_nodes(), "write_solution_csv: length mismatch");
    out << (mesh.dimension == 1 ? "x,u\n" : "x,y,u\n");
    for (std::size_t i = 0; i < mesh.n_nodes(); ++i) {
        const auto r = static_cast<Eigen::Index>(i);
        if (mesh.dimension == 1) {
            out << fmt::format("{:.17g},{:.17g}\n", mesh.coords(r, 0), u_nodal(r));
        } else {
            out << fmt::format("{:.17g},{:.17g},{:.17g}\n", mesh.coords(r, 0), mesh.coords(r, 1), u_nodal(r));
        }
    }
}

namespace {

std::vector<int> all_cells(const Mesh& mesh, std::span<const int> cells) {
    if (!cells.empty()) return {cells.begin(), cells.end()};
    std::vector<int> all(mesh.n_cells());
    std::iota(all.begin(), all.end(), 0);
    return all;
}

Eigen::Matrix2d line_stiffness(double h) {
    Eigen::Matrix2d k;
    k << 1.0, -1.0, -1.0, 1.0;
    return k / h;
}

// Q1 shape data at the 2×2 Gauss points of an hx × hy rectangle.
struct Q1Data {
    std::array<Eigen::Matrix4d, 4> stiffness; // per Gauss point, weight and Jacobian included
    std::array<Eigen::Vector4d, 4> shape;     // N_a at each Gauss point
};

Q1Data q1_data(double hx, double hy) {
    const double g = 1.0 / std::sqrt(3.0);
    const std::array<double, 4> xa{-1, 1, 1, -1}, ya{-1, -1, 1, 1};
    const std::array<double, 4> gx{-g, g, g, -g}, gy{-g, -g, g, g};
    const double det = hx * hy / 4.0;
    Q1Data d;
    for (int q = 0; q < 4; ++q) {
        Eigen::Matrix<double, 2, 4> grad;
        for (int a = 0; a < 4; ++a) {
            d.shape[q](a) = 0.25 * (1 + xa[a] * gx[q]) * (1 + ya[a] * gy[q]);
            grad(0, a) = 0.25 * xa[a] * (1 + ya[a] * gy[q]) * 2.0 / hx;
            grad(1, a) = 0.25 * ya[a] * (1 + xa[a] * gx[q]) * 2.0 / hy;
        }
        d.stiffness[q] = grad.transpose() * grad * det;
    }
    return d;
}

} // namespace

// -------------------------------------------------------------- diffusion

ElementSystem diffusion_2d_elements(const Mesh& mesh, const Eigen::VectorXd& a_nodes,
                                   const std::optional<PointSink>& sink, const DiffusionBC& bc,
                                   std::span<const int> cells) {
    detail::require(mesh.dimension == 2, "diffusion_2d: mesh must be two-dimensional");
    detail::require(static_cast<std::size_t>(a_nodes.size()) == mesh.n_nodes(), "diffusion_2d: one coefficient per node");
    detail::require((a_nodes.array() > 0.0).all(), "diffusion_2d: coefficient must be positive");
    ElementSystem es;
    es.n_nodes = mesh.n_nodes();
    es.symmetric = true;
    const Q1Data q1 = q1_data(mesh.hx(), mesh.hy());
    const auto list = all_cells(mesh, cells);
    es.elements.reserve(list.size());
    for (int c : list) {
        ElementMatrix el;
        el.cell = c;
        el.nodes = mesh.cells[static_cast<std::size_t>(c)];
        Eigen::Vector4d an;
        for (int a = 0; a < 4; ++a) an(a) = a_nodes(el.nodes[static_cast<std::size_t>(a)]);
        Eigen::Matrix4d ke = Eigen::Matrix4d::Zero();
        for (int q = 0; q < 4; ++q) ke += q1.shape[q].dot(an) * q1.stiffness[q];
        el.ke = ke;
        es.elements.push_back(std::move(el));
    }
    if (sink) {
        const std::vector<double> p{sink->x, sink->y};
        const auto node = mesh.find_node(p);
        if (!node) throw InvalidArgument("diffusion_2d: point sink must coincide with a mesh node");
        es.nodal_loads.emplace_back(*node, sink->magnitude);
    }
    for (std::size_t i = 0; i < mesh.n_nodes(); ++i) {
        if (mesh.boundary[i] & kLeft) {
            es.dirichlet.emplace_back(static_cast<int>(i), bc.left);
        } else if (mesh.boundary[i] & kRight) {
            es.dirichlet.emplace_back(static_cast<int>(i), bc.right);
        }
    }
    return es;
}

LinearSystem assemble_diffusion_2d(const Mesh& mesh, const Eigen::VectorXd& a_nodes,
                                   const std::optional<PointSink>& sink, const DiffusionBC& bc) {
    return assemble(diffusion_2d_elements(mesh, a_nodes, sink, bc));
}

ElementSystem poisson_1d_elements(const Mesh& mesh, const Eigen::VectorXd& a_cells, double left, double right,
                                  std::span<const std::pair<int, double>> loads) {
    detail::require(mesh.dimension == 1, "poisson_1d: mesh must be one-dimensional");
    detail::require(static_cast<std::size_t>(a_cells.size()) == mesh.n_cells(), "poisson_1d: one coefficient per cell");
    detail::require((a_cells.array() > 0.0).all(), "poisson_1d: coefficient must be positive");
    ElementSystem es;
    es.n_nodes = mesh.n_nodes();
    const double h = mesh.hx();
    for (std::size_t c = 0; c < mesh.n_cells(); ++c) {
        ElementMatrix el;
        el.cell = static_cast<int>(c);
        el.nodes = mesh.cells[c];
        el.ke = a_cells(static_cast<Eigen::Index>(c)) * line_stiffness(h);
        es.elements.push_back(std::move(el));
    }
    es.nodal_loads.assign(loads.begin(), loads.end());
    es.dirichlet = {{0, left}, {static_cast<int>(mesh.n_nodes() - 1), right}};
    return es;
}

// -------------------------------------------------------- linear Richards

std::size_t GardnerModel::layer_of(double z) const {
    for (std::size_t k = 0; k < layer_tops.size(); ++k) {
        if (z < layer_tops[k]) return k;
    }
    return layers.size() - 1;
}

namespace {

void check_gardner(const Mesh& mesh, const GardnerModel& model, const Eigen::VectorXd& ks_cells) {
    detail::require(mesh.dimension == 1, "richards_linear: mesh must be one-dimensional");
    detail::require(!model.layers.empty() && model.layer_tops.size() + 1 >= model.layers.size(),
                    "richards_linear: each layer needs a top position (the last may be omitted)");
    detail::require(static_cast<std::size_t>(ks_cells.size()) == mesh.n_cells(), "richards_linear: one K_s per cell");
    detail::require((ks_cells.array() > 0.0).all(), "richards_linear: K_s must be positive");
    for (const auto& l : model.layers) {
        detail::require(l.alpha > 0.0 && l.theta_s > 0.0 && l.theta_s <= 1.0, "richards_linear: invalid layer parameters");
    }
}

// Element flux coefficients (D, v) for cell c.
std::pair<double, double> gardner_coefficients(const Mesh& mesh, const GardnerModel& model,
                                               const Eigen::VectorXd& ks_cells, std::size_t c) {
    const auto& nodes = mesh.cells[c];
    const double mid = 0.5 * (mesh.coords(nodes[0], 0) + mesh.coords(nodes[1], 0));
    const auto& layer = model.layers[model.layer_of(mid)];
    const double ks = ks_cells(static_cast<Eigen::Index>(c));
    return {ks / (layer.alpha * layer.theta_s), ks / layer.theta_s};
}

Eigen::Matrix2d gardner_element(double d, double v, double h) {
    // ∫(Dθ' + vθ) w' over one element.
    Eigen::Matrix2d adv;
    adv << -0.5, -0.5, 0.5, 0.5;
    return d * line_stiffness(h) + v * adv;
}

} // namespace

ElementSystem richards_linear_elements(const Mesh& mesh, const GardnerModel& model, const Eigen::VectorXd& ks_cells,
                                       const RichardsLinearBC& bc, std::span<const int> cells) {
    check_gardner(mesh, model, ks_cells);
    ElementSystem es;
    es.n_nodes = mesh.n_nodes();
    es.symmetric = false;
    const double h = mesh.hx();
    const auto top_cell = static_cast<int>(mesh.n_cells() - 1);
    for (int c : all_cells(mesh, cells)) {
        const auto [d, v] = gardner_coefficients(mesh, model, ks_cells, static_cast<std::size_t>(c));
        ElementMatrix el;
        el.cell = c;
        el.nodes = mesh.cells[static_cast<std::size_t>(c)];
        Eigen::Matrix2d ke = gardner_element(d, v, h);
        Eigen::Vector2d fe = Eigen::Vector2d::Zero();
        if (c == top_cell) {
            // Boundary term −(Dθ' + vθ)w at z = L with Dθ'(L) = −q.
            ke(1, 1) -= v;
            fe(1) = -bc.q;
        }
        el.ke = ke;
        el.fe = fe;
        es.elements.push_back(std::move(el));
    }
    es.dirichlet = {{0, bc.theta0}};
    return es;
}

LinearSystem assemble_richards_linear_1d(const Mesh& mesh, const GardnerModel& model, const Eigen::VectorXd& ks_cells,
                                         const RichardsLinearBC& bc) {
    return assemble(richards_linear_elements(mesh, model, ks_cells, bc));
}

std::pair<double, double> richards_linear_node_flux(const Mesh& mesh, const GardnerModel& model,
                                                    const Eigen::VectorXd& ks_cells, const Eigen::VectorXd& theta,
                                                    int node) {
    check_gardner(mesh, model, ks_cells);
    detail::require(node > 0 && static_cast<std::size_t>(node) + 1 < mesh.n_nodes(),
                    "richards_linear_node_flux: node must be interior");
    const double h = mesh.hx();
    // With a hat test function at the node, ∫_left F w' = F(z−) and ∫_right F w' = −F(z+)
    // for the exact flux F; the discrete versions are the conservative one-sided fluxes.
    auto side = [&](std::size_t c, int local) {
        const auto [d, v] = gardner_coefficients(mesh, model, ks_cells, c);
        const Eigen::Matrix2d ke = gardner_element(d, v, h);
        const auto& nodes = mesh.cells[c];
        const Eigen::Vector2d t(theta(nodes[0]), theta(nodes[1]));
        return ke.row(local).dot(t);
    };
    const double left = side(static_cast<std::size_t>(node - 1), 1);
    const double right = -side(static_cast<std::size_t>(node), 0);
    return {left, right};
}

// ----------------------------------------------------- nonlinear Richards

namespace {

// Upstream node of a two-node element: the upper node while the flow runs
// downward (ψ' + 1 ≥ 0), the lower one otherwise. Taking K there keeps the
// element flux monotone in both heads even where dK/dψ is unbounded.
int upstream_local(double p0, double p1, double h) { return (p1 - p0) / h + 1.0 >= 0.0 ? 1 : 0; }

} // namespace

VgValues vg_conductivity(const VanGenuchtenModel& model, double psi) {
    if (psi >= 0.0) return {1.0, model.ks};
    const double m = model.m();
    const double t = std::pow(model.alpha * std::abs(psi), model.n);
    const double se = std::pow(1.0 + t, -m);
    // 1 − Se^{1/m} = t/(1+t), written without the cancellation near saturation.
    const double inner = 1.0 - std::pow(t / (1.0 + t), m);
    return {se, model.ks * std::sqrt(se) * inner * inner};
}

double vg_relative_conductivity(const VanGenuchtenModel& model, double psi) {
    return vg_conductivity(model, psi).k / model.ks;
}

double vg_conductivity_derivative(const VanGenuchtenModel& model, double psi) {
    if (psi >= 0.0) return 0.0;
    const double m = model.m();
    const double n = model.n;
    const double s = model.alpha * std::abs(psi);
    const double t = std::pow(s, n);
    const double se = std::pow(1.0 + t, -m);
    const double dt = n * std::pow(s, n - 1.0) * model.alpha; // dt/d|ψ|; d|ψ|/dψ = −1
    const double dse = m * std::pow(1.0 + t, -m - 1.0) * dt;
    const double ratio = t / (1.0 + t); // 1 − Se^{1/m}
    const double b = 1.0 - std::pow(ratio, m);
    const double db = m * std::pow(ratio, m - 1.0) * dt / ((1.0 + t) * (1.0 + t));
    return model.ks * (0.5 / std::sqrt(se) * dse * b * b + 2.0 * std::sqrt(se) * b * db);
}

ElementSystem richards_nonlinear_elements(const Mesh& mesh, const VanGenuchtenModel& model,
                                          const Eigen::VectorXd& ks_cells, const RichardsNonlinearBC& bc,
                                          const Eigen::VectorXd& psi_nodal, std::span<const int> cells) {
    detail::require(mesh.dimension == 1, "richards_nonlinear: mesh must be one-dimensional");
    detail::require(static_cast<std::size_t>(ks_cells.size()) == mesh.n_cells(), "richards_nonlinear: one K_s per cell");
    detail::require(static_cast<std::size_t>(psi_nodal.size()) == mesh.n_nodes(), "richards_nonlinear: nodal head length");
    detail::require(model.n > 1.0 && model.ks > 0.0 && model.theta_r >= 0.0 && model.theta_r < model.theta_s,
                    "richards_nonlinear: invalid van Genuchten parameters");
    ElementSystem es;
    es.n_nodes = mesh.n_nodes();
    es.symmetric = true;
    const double h = mesh.hx();
    for (int c : all_cells(mesh, cells)) {
        const auto& nodes = mesh.cells[static_cast<std::size_t>(c)];
        const double p0 = psi_nodal(nodes[0]), p1 = psi_nodal(nodes[1]);
        const double k = ks_cells(c) * vg_relative_conductivity(model, upstream_local(p0, p1, h) ? p1 : p0);
        ElementMatrix el;
        el.cell = c;
        el.nodes = nodes;
        el.ke = k * line_stiffness(h);
        // ∫Kψ'w' = −∫K w'.
        el.fe = Eigen::Vector2d(k, -k);
        es.elements.push_back(std::move(el));
    }
    es.dirichlet = {{0, bc.psi_bottom}, {static_cast<int>(mesh.n_nodes() - 1), bc.psi_top}};
    return es;
}

ElementSystem richards_newton_elements(const Mesh& mesh, const VanGenuchtenModel& model, const Eigen::VectorXd& ks_cells,
                                       const RichardsNonlinearBC& bc, const Eigen::VectorXd& psi_nodal,
                                       std::span<const int> cells) {
    ElementSystem es = richards_nonlinear_elements(mesh, model, ks_cells, bc, psi_nodal, cells);
    es.symmetric = false;
    const double h = mesh.hx();
    const Eigen::Matrix2d a = line_stiffness(h);
    const Eigen::Vector2d g(1.0, -1.0);
    for (auto& el : es.elements) {
        const Eigen::Vector2d pe(psi_nodal(el.nodes[0]), psi_nodal(el.nodes[1]));
        const int up = upstream_local(pe(0), pe(1), h);
        const double dk = ks_cells(el.cell) / model.ks * vg_conductivity_derivative(model, pe(up));
        // r_e = K(ψ_up)(Aψ_e − g); J_e = K A + (Aψ_e − g)·K' e_upᵀ.
        const Eigen::Vector2d flux = a * pe - g;
        Eigen::RowVector2d e_up = Eigen::RowVector2d::Zero();
        e_up(up) = 1.0;
        const Eigen::Matrix2d jac = el.ke + flux * dk * e_up;
        const Eigen::Vector2d r = el.ke * pe - el.fe;
        el.fe = jac * pe - r;
        el.ke = jac;
    }
    return es;
}

Eigen::VectorXd richards_initial_guess(const Mesh& mesh, const RichardsNonlinearBC& bc) {
    const Eigen::ArrayXd t = mesh.coords.col(0).array() / mesh.lx;
    return (bc.psi_bottom + (bc.psi_top - bc.psi_bottom) * t).matrix();
}

double richards_nonlinear_residual(const Mesh& mesh, const VanGenuchtenModel& model, const Eigen::VectorXd& ks_cells,
                                   const RichardsNonlinearBC& bc, const Eigen::VectorXd& psi_nodal) {
    const auto sys = assemble(richards_nonlinear_elements(mesh, model, ks_cells, bc, psi_nodal));
    return (sys.K * sys.restrict_nodal(psi_nodal) - sys.f).norm();
}

namespace {

constexpr std::size_t kPolishSteps = 5;
constexpr std::size_t kStallWindow = 5;

// Upper head of one element carrying flux q > 0 from lower head p0. The flux
// is zero at p0 − h and increases with the upper head, so the root is unique.
double march_element(double ks, const VanGenuchtenModel& model, double h, double p0, double q) {
    auto excess = [&](double p1) {
        return ks * vg_relative_conductivity(model, p1) * ((p1 - p0) / h + 1.0) - q;
    };
    const double lo = p0 - h;
    double width = 2.0 * h;
    double hi = lo + width;
    double f_hi = excess(hi);
    for (int k = 0; f_hi < 0.0; ++k) {
        if (k == 200) throw NumericFailure("richards_flux_march: cannot bracket an element head");
        width *= 2.0;
        hi = lo + width;
        f_hi = excess(hi);
    }
    std::uintmax_t iters = 200;
    const auto [a, b] = boost::math::tools::toms748_solve(excess, lo, hi, -q, f_hi,
                                                          boost::math::tools::eps_tolerance<double>(52), iters);
    return 0.5 * (a + b);
}

} // namespace

std::optional<Eigen::VectorXd> richards_flux_march(const Mesh& mesh, const VanGenuchtenModel& model,
                                                   const Eigen::VectorXd& ks_cells, std::size_t first_cell,
                                                   std::size_t n_cells, double psi_low, double psi_high) {
    detail::require(mesh.dimension == 1, "richards_flux_march: mesh must be one-dimensional");
    detail::require(n_cells >= 1 && first_cell + n_cells <= mesh.n_cells(), "richards_flux_march: cell run out of range");
    detail::require(static_cast<std::size_t>(ks_cells.size()) == mesh.n_cells(), "richards_flux_march: one K_s per cell");
    const double h = mesh.hx();
    const double length = h * static_cast<double>(n_cells);
    // q → 0 gives the hydrostatic head psi_low − length at the top.
    if (!(psi_high > psi_low - length)) return std::nullopt;

    const auto n = static_cast<Eigen::Index>(n_cells);
    Eigen::VectorXd psi(n + 1);
    auto mismatch = [&](double q) {
        psi(0) = psi_low;
        for (Eigen::Index i = 0; i < n; ++i) {
            psi(i + 1) = march_element(ks_cells(static_cast<Eigen::Index>(first_cell) + i), model, h, psi(i), q);
        }
        return psi(n) - psi_high;
    };
    double q_hi = ks_cells.segment(static_cast<Eigen::Index>(first_cell), n).maxCoeff();
    double f_hi = mismatch(q_hi);
    for (int k = 0; f_hi < 0.0; ++k) {
        if (k == 200) return std::nullopt;
        q_hi *= 2.0;
        f_hi = mismatch(q_hi);
    }
    std::uintmax_t iters = 200;
    const auto [a, b] = boost::math::tools::toms748_solve(mismatch, 0.0, q_hi, psi_low - length - psi_high, f_hi,
                                                          boost::math::tools::eps_tolerance<double>(52), iters);
    mismatch(0.5 * (a + b));
    psi(n) = psi_high;
    return psi;
}

NonlinearSolution solve_richards_nonlinear_1d(const Mesh& mesh, const VanGenuchtenModel& model,
                                              const Eigen::VectorXd& ks_cells, const RichardsNonlinearBC& bc,
                                              double tol, std::size_t max_iters, std::optional<Eigen::VectorXd> initial,
                                              Linearization linearization) {
    detail::require(tol > 0.0, "solve_richards_nonlinear_1d: tol must be positive");
    NonlinearSolution out;
    out.psi = initial ? *initial : richards_initial_guess(mesh, bc);
    out.psi(0) = bc.psi_bottom;
    out.psi(static_cast<Eigen::Index>(mesh.n_nodes()) - 1) = bc.psi_top;
    double res = richards_nonlinear_residual(mesh, model, ks_cells, bc, out.psi);
    if (res < tol) return out;
    const bool newton = linearization == Linearization::Newton;
    auto iterate = [&](std::size_t limit) {
        while (out.iterations < limit) {
            const auto es = newton ? richards_newton_elements(mesh, model, ks_cells, bc, out.psi)
                                   : richards_nonlinear_elements(mesh, model, ks_cells, bc, out.psi);
            const auto sys = assemble(es);
            Eigen::VectorXd next = sys.expand(solve_linear(sys));
            ++out.iterations;
            double next_res = richards_nonlinear_residual(mesh, model, ks_cells, bc, next);
            if (newton) {
                const Eigen::VectorXd step = next - out.psi;
                for (int halvings = 0; halvings < 20 && !(next_res < res); ++halvings) {
                    next = out.psi + std::ldexp(1.0, -(halvings + 1)) * step;
                    next_res = richards_nonlinear_residual(mesh, model, ks_cells, bc, next);
                }
                if (!(next_res < res)) return false; // stalled: no descent along the Newton step
            }
            out.psi = std::move(next);
            res = next_res;
            out.residuals.push_back(res);
            if (res < tol) return true;
            // Newton crawling along the kink of K: less than a halving over the last few steps.
            const auto nr = out.residuals.size();
            if (newton && nr >= kStallWindow + 4 && res > 0.5 * out.residuals[nr - 1 - kStallWindow]) return false;
        }
        return false;
    };
    if (iterate(max_iters)) return out;
    if (newton) {
        if (auto marched = richards_flux_march(mesh, model, ks_cells, 0, mesh.n_cells(), bc.psi_bottom, bc.psi_top)) {
            out.psi = std::move(*marched);
            res = richards_nonlinear_residual(mesh, model, ks_cells, bc, out.psi);
            out.residuals.push_back(res);
            if (res < tol || iterate(out.iterations + kPolishSteps)) return out;
        }
    }
    const double last = out.residuals.empty() ? richards_nonlinear_residual(mesh, model, ks_cells, bc, out.psi)
                                              : out.residuals.back();
    throw NonConvergence(
        fmt::format("solve_richards_nonlinear_1d: residual {:.3e} after {} iterations", last, out.iterations),
        out.residuals.empty() ? std::vector<double>{last} : out.residuals);
}

} // namespace stochdd
