// Acceptance suite: one PASS/FAIL line per criterion.
//
//   stochdd_acceptance                       run every criterion
//   stochdd_acceptance --only 6 --only 7     run a subset
//   stochdd_acceptance --prepare-desk        only produce the shared 2D run
//
// Criteria 6-8 read the outputs of one desk-scale 2D run stored under the
// work directory; they produce it first when it is missing.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <json.hpp>

#include "stochdd/basis_adaptation.hpp"
#include "stochdd/chaos.hpp"
#include "stochdd/cost.hpp"
#include "stochdd/domain_decomposition.hpp"
#include "stochdd/problems.hpp"
#include "stochdd/experiments.hpp"
#include "stochdd/pde.hpp"
#include "stochdd/quadrature.hpp"
#include "stochdd/random_field.hpp"
#include "support/oracles.hpp"

namespace fs = std::filesystem;
using namespace stochdd;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

struct Context {
    fs::path workdir;
    bool verbose = false;
};

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw std::runtime_error("cannot read " + p.string());
    std::vector<std::vector<std::string>> rows;
    std::string line;
    std::getline(in, line); // header
    while (std::getline(in, line)) {
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (!cells.empty()) rows.push_back(cells);
    }
    return rows;
}

std::vector<double> read_eigenvalues(const fs::path& p) {
    std::vector<double> out;
    for (const auto& row : read_csv(p)) out.push_back(std::stod(row.at(1)));
    return out;
}

double rel_max(const Eigen::VectorXd& a, const Eigen::VectorXd& ref) {
    return (a - ref).cwiseAbs().maxCoeff() / ref.cwiseAbs().maxCoeff();
}

// ------------------------------------------------------------ 1: grid sizes

Outcome grid_counts(const Context&) {
    // Published point counts of the Gauss-Hermite Smolyak grids.
    const std::vector<std::tuple<std::size_t, std::size_t, std::size_t>> cases{
        {10, 2, 21}, {40, 2, 81}, {5, 5, 781}, {10, 5, 8761}, {15, 5, 39941}};
    Outcome o{true, {}};
    for (const auto& [d, l, expect] : cases) {
        const std::size_t got = smolyak_grid(d, l).size();
        o.pass = o.pass && got == expect;
        o.detail += fmt::format("{}({},{})={}{}", o.detail.empty() ? "" : " ", d, l, got, got == expect ? "" : fmt::format("!={}", expect));
    }
    return o;
}

// ------------------------------------------------------- 2: Gram identity

Outcome gram_identity(const Context&) {
    double worst = 0.0;
    for (std::size_t d = 1; d <= 3; ++d) {
        for (unsigned p = 1; p <= 3; ++p) {
            // Level p+1 integrates total degree 2p+1 exactly.
            const auto grid = smolyak_grid(d, p + 1);
            const auto basis = multi_index_set(d, p);
            const Eigen::MatrixXd psi = basis_matrix(basis, grid.points);
            const Eigen::MatrixXd gram = psi.transpose() * grid.weights.asDiagonal() * psi;
            const auto n = gram.rows();
            worst = std::max(worst, (gram - Eigen::MatrixXd::Identity(n, n)).cwiseAbs().maxCoeff());
        }
    }
    return {worst < 1e-9, fmt::format("max |G - I| = {:.2e} over d<=3, p<=3 (tol 1e-9)", worst)};
}

// ------------------------------------------------------------ 3: isometry

Outcome isometry(const Context&) {
    auto cfg = default_config(ProblemKind::Diffusion2D);
    const auto setup = make_problem(cfg);
    const auto gp = gaussian_part(*setup.problem, cfg.gaussian_level);
    const auto fixed = fixed_nodes(setup.problem->elements(std::vector<double>(cfg.dim, 0.0), nullptr));
    const Eigen::VectorXd w = setup.mesh.node_weights();
    double worst = 0.0;
    std::size_t count = 0;
    for (std::size_t nd : cfg.subdomains) {
        const auto p = partition_mesh(setup.mesh, nd, fixed);
        for (std::size_t s = 0; s < nd; ++s) {
            const auto b = adapt_subdomain(gp, p, s, w, cfg.reduced_dims.back(), cfg.seed + 3);
            const Eigen::MatrixXd e = b.a * b.a.transpose() - Eigen::MatrixXd::Identity(b.a.rows(), b.a.rows());
            worst = std::max(worst, e.cwiseAbs().rowwise().sum().maxCoeff());
            ++count;
        }
    }
    return {worst < 1e-8, fmt::format("max ||A A^T - I||_inf = {:.2e} over {} subdomains, N_D in {{3, 8}} (tol 1e-8)",
                                      worst, count)};
}

// ----------------------------------------------------- 4: exact recovery

// Full-dimensional pipeline on one subdomain against the full reference. The
// two runs use differently rotated Smolyak grids, so they agree only up to
// the grid's integration error; level 4 is the first level where that drops
// under the tolerance, and the level-3 figure is reported alongside.
std::pair<double, double> full_dimension_errors(const Context& ctx, std::size_t level) {
    auto cfg = default_config(ProblemKind::Diffusion2D);
    cfg.dim = 4;
    cfg.level = level;
    cfg.dd_level = level;
    cfg.subdomains = {1};
    cfg.reduced_dims = {4};
    cfg.eps_samples = 1000;
    cfg.pdf_samples = 1000;
    cfg.output_dir = (ctx.workdir / fmt::format("recovery-l{}", level)).string();
    const auto res = run_experiment(cfg);
    return {res.cases.at(0).mu_e, res.cases.at(0).sigma_e};
}

Outcome exact_recovery(const Context& ctx) {
    const auto [m3, s3] = full_dimension_errors(ctx, 3);
    const auto [m4, s4] = full_dimension_errors(ctx, 4);
    return {m4 < 1e-6 && s4 < 1e-6,
            fmt::format("d=4, r=d, N_D=1, relative L2 (tol 1e-6): level 4 mean {:.1e}, std {:.1e}; level 3 mean {:.1e}, "
                        "std {:.1e}",
                        m4, s4, m3, s3)};
}

// ---------------------------------------------- 5: DD versus monolithic LU

Outcome dd_equivalence(const Context&) {
    std::mt19937_64 rng(5);
    std::normal_distribution<double> normal;
    auto draw = [&](std::size_t d) {
        std::vector<double> xi(d);
        for (auto& x : xi) x = normal(rng);
        return xi;
    };
    auto check = [](const StochasticProblem& prob, std::span<const double> xi, std::size_t nd) {
        const auto es = prob.elements(xi, nullptr);
        const auto sys = assemble(es);
        const Eigen::VectorXd mono = sys.expand(solve_linear(sys));
        const auto p = partition_mesh(prob.mesh(), nd, fixed_nodes(es));
        return rel_max(solve_dd(es, p).u, mono);
    };

    Outcome o{true, {}};
    auto lin = default_config(ProblemKind::RichardsLinear1D);
    const auto lin_setup = make_problem(lin);
    const double e1 = check(*lin_setup.problem, draw(lin.dim), 2);
    o.pass = e1 < 1e-10;
    o.detail = fmt::format("1D/2: {:.1e}", e1);

    auto diff = default_config(ProblemKind::Diffusion2D);
    for (std::size_t nd : {3u, 8u, 15u, 27u}) {
        // 96 columns cannot be split 5 or 9 ways; those layouts use 180x24.
        auto c = diff;
        if (nd == 15 || nd == 27) c.cells = {180, 24};
        const auto setup = make_problem(c);
        const double e = check(*setup.problem, draw(c.dim), nd);
        o.pass = o.pass && e < 1e-10;
        o.detail += fmt::format(", 2D/{}: {:.1e}", nd, e);
    }
    o.detail = "max nodal relative difference " + o.detail + " (tol 1e-10)";
    return o;
}

// --------------------------------------------- 6-8: desk 2D diffusion run

fs::path desk_dir(const Context& ctx) { return ctx.workdir / "desk-2d"; }

void ensure_desk_run(const Context& ctx, bool force = false) {
    const fs::path dir = desk_dir(ctx);
    if (!force && fs::exists(dir / "table.csv") && fs::exists(dir / "ledger.json")) return;
    auto cfg = default_config(ProblemKind::Diffusion2D);
    cfg.output_dir = dir.string();
    run_experiment(cfg, ctx.verbose ? &std::cerr : nullptr);
}

struct TableRow {
    std::size_t nd, r;
    double mu, sigma, cr;
};

std::vector<TableRow> desk_table(const Context& ctx) {
    ensure_desk_run(ctx);
    std::vector<TableRow> rows;
    for (const auto& c : read_csv(desk_dir(ctx) / "table.csv")) {
        rows.push_back({std::stoul(c.at(0)), std::stoul(c.at(1)), std::stod(c.at(2)), std::stod(c.at(3)), std::stod(c.at(4))});
    }
    return rows;
}

Outcome desk_accuracy(const Context& ctx) {
    std::map<std::size_t, TableRow> nd3;
    for (const auto& row : desk_table(ctx)) {
        if (row.nd == 3) nd3[row.r] = row;
    }
    if (!nd3.contains(3) || !nd3.contains(4) || !nd3.contains(5)) return {false, "N_D=3 rows for r=3,4,5 missing"};
    const bool mu_ok = nd3[3].mu <= 3.0;
    const bool mono = nd3[4].sigma <= nd3[3].sigma && nd3[5].sigma <= nd3[4].sigma;
    const bool sig_ok = nd3[5].sigma <= 5.0;
    return {mu_ok && mono && sig_ok,
            fmt::format("N_D=3: mu_e(r=3) = {:.2f}% (<=3), sigma_e r=3,4,5 = {:.2f}, {:.2f}, {:.2f}% (non-increasing, "
                        "last <=5)",
                        nd3[3].mu, nd3[3].sigma, nd3[4].sigma, nd3[5].sigma)};
}

// Flops of one ledger phase from its solve histogram plus its exact extra flops.
double phase_flops(const nlohmann::json& phase) {
    std::uint64_t x3 = 0;
    for (const auto& [n, count] : phase.at("histogram").items()) {
        x3 += count.get<std::uint64_t>() * oracle::lu_flops_x3(std::stoull(n));
    }
    double solves = static_cast<double>(x3) / 3.0;
    // Projection flops are recorded directly rather than as solves.
    if (phase.at("histogram").empty()) solves = phase.at("flops").get<double>();
    return solves;
}

double ledger_total(const nlohmann::json& ledger, bool include_reference) {
    double t = 0.0;
    for (const auto& [name, phase] : ledger.at("phases").items()) {
        if (name == "reference" && !include_reference) continue;
        t += phase_flops(phase);
    }
    return t;
}

Outcome desk_cost(const Context& ctx) {
    const auto rows = desk_table(ctx);
    std::ifstream in(desk_dir(ctx) / "ledger.json");
    const auto j = nlohmann::json::parse(in);
    const double ref = ledger_total(j.at("reference"), true);
    Outcome o{!rows.empty(), {}};
    double lo = 1e300, worst_mismatch = 0.0;
    for (const auto& c : j.at("cases")) {
        // Recompute the ratio from the instrumented solve histograms.
        const double cr = ref / ledger_total(c.at("ledger"), false);
        worst_mismatch = std::max(worst_mismatch, std::abs(cr - c.at("CR").get<double>()) / cr);
        lo = std::min(lo, cr);
        o.pass = o.pass && cr > 50.0;
        o.detail += fmt::format("{}({},{})={:.0f}", o.detail.empty() ? "" : " ", c.at("N_D").get<std::size_t>(), c.at("r").get<std::size_t>(), cr);
    }
    o.pass = o.pass && worst_mismatch < 1e-12;
    o.detail = fmt::format("min CR {:.1f} (>50); ", lo) + o.detail +
               fmt::format("; ledger vs table mismatch {:.1e}", worst_mismatch);
    return o;
}

Outcome eigen_decay(const Context& ctx) {
    ensure_desk_run(ctx);
    const auto input = read_eigenvalues(desk_dir(ctx) / "eigs_input.csv");
    const double ref_ratio = input.at(4) / input.at(0);
    Outcome o{true, fmt::format("input lambda5/lambda1 = {:.3e}; subdomains:", ref_ratio)};
    for (std::size_t s = 0; s < 3; ++s) {
        const auto mu = read_eigenvalues(desk_dir(ctx) / "nd3" / fmt::format("eigs_{}.csv", s));
        const double ratio = mu.at(4) / mu.at(0);
        o.pass = o.pass && ratio < ref_ratio;
        o.detail += fmt::format(" {:.3e}", ratio);
    }
    return o;
}

// ----------------------------------------------------------- 9: KL oracle

Outcome kl_oracle(const Context&) {
    const double length = 10.0, corr = 2.5, variance = 1.0;
    const auto mesh = make_mesh_1d(length, 999);
    const CovarianceKernel kernel{KernelType::Exponential, variance, {corr}};
    const auto kl = kl_solve(assemble_covariance(mesh.coords, kernel), mesh.node_weights(), 5);
    const auto exact = oracle::exponential_kernel_eigenvalues(length, corr, variance, 5);
    double worst = 0.0;
    for (std::size_t i = 0; i < 5; ++i) worst = std::max(worst, std::abs(kl.eigenvalues(static_cast<Eigen::Index>(i)) - exact[i]) / exact[i]);
    return {worst < 0.01, fmt::format("1000 nodes, first 5 modes: max relative error {:.2e} (tol 1e-2)", worst)};
}

// ------------------------------------------------------ 10: nonlinear run

Outcome nonlinear_pipeline(const Context& ctx) {
    auto cfg = default_config(ProblemKind::RichardsNonlinear1D);
    cfg.reference = ReferenceMethod::MonteCarlo;
    cfg.reference_samples = 2000;
    cfg.tol = 0.0; // run all outer iterations
    cfg.output_dir = (ctx.workdir / "nonlinear-1d").string();
    const auto res = run_experiment(cfg, ctx.verbose ? &std::cerr : nullptr);
    const auto& c = res.cases.at(0);
    bool mono = c.outer_residuals.size() == cfg.max_outer;
    std::string hist;
    for (std::size_t i = 0; i < c.outer_residuals.size(); ++i) {
        if (i > 0) mono = mono && c.outer_residuals[i] < c.outer_residuals[i - 1];
        hist += fmt::format("{}{:.2e}", i ? " " : "", c.outer_residuals[i]);
    }
    const bool acc = c.mu_e <= 0.02 && c.sigma_e <= 0.10;
    return {mono && acc, fmt::format("outer increments [{}] ({}); vs 2000-sample MC: mean {:.3g}% (<=2), std {:.3g}% (<=10)",
                                     hist, mono ? "decreasing" : "not decreasing", 100 * c.mu_e, 100 * c.sigma_e)};
}

// ------------------------------------------------------- 11: linear Richards

Outcome linear_richards(const Context& ctx) {
    auto cfg = default_config(ProblemKind::RichardsLinear1D);
    const auto setup = make_problem(cfg);
    const auto& prob = dynamic_cast<const RichardsLinearProblem&>(*setup.problem);
    const auto& model = prob.model();
    const Mesh& mesh = setup.mesh;

    // Deterministic problem with K_s at each layer's mean.
    const Eigen::MatrixXd centers = mesh.cell_centers();
    Eigen::VectorXd ks(static_cast<Eigen::Index>(mesh.n_cells()));
    for (Eigen::Index c = 0; c < ks.size(); ++c) ks(c) = model.layers[model.layer_of(centers(c, 0))].ks_mean;
    const auto sys = assemble_richards_linear_1d(mesh, model, ks, cfg.linear_bc);
    const Eigen::VectorXd theta = sys.expand(solve_linear(sys));
    const std::vector<double> z{model.layer_tops.at(0)};
    const auto node = mesh.find_node(z);
    if (!node) return {false, "layer interface is not a mesh node"};
    const auto [below, above] = richards_linear_node_flux(mesh, model, ks, theta, *node);
    const double jump = std::abs(below - above);
    // θ is nodal, so continuity reduces to both layers' elements sharing the
    // interface node; check the one-sided element traces anyway.
    const auto& left_cell = mesh.cells[static_cast<std::size_t>(*node - 1)];
    const auto& right_cell = mesh.cells[static_cast<std::size_t>(*node)];
    const double theta_gap = std::abs(theta(left_cell[1]) - theta(right_cell[0]));

    cfg.reference = ReferenceMethod::MonteCarlo;
    cfg.reference_samples = 2000;
    cfg.output_dir = (ctx.workdir / "linear-1d").string();
    const auto res = run_experiment(cfg, ctx.verbose ? &std::cerr : nullptr);
    const auto& c = res.cases.at(0);
    return {jump < 1e-8 && theta_gap == 0.0 && c.mu_e <= 0.02,
            fmt::format("mean problem: flux jump at z={} {:.1e} (tol 1e-8), theta gap {:.1e}; N_D={}, r={} vs 2000-sample "
                        "MC mean {:.3g}% (<=2)",
                        z[0], jump, theta_gap, c.n_sub, c.r, 100 * c.mu_e)};
}

// ------------------------------------------------------- 12: cost formulas

Outcome cost_formulas(const Context&) {
    std::mt19937_64 rng(12);
    std::uniform_int_distribution<std::uint64_t> size(1, 3000), count(1, 27), points(1, 40000), terms(1, 1000),
        gamma(1, 80);
    auto exact = [](double got, long double expect) {
        return got == static_cast<double>(expect);
    };
    int ok = 0, total = 0;
    for (int t = 0; t < 5; ++t) {
        const std::uint64_t n = size(rng);
        ok += exact(flops_lu(n), static_cast<long double>(oracle::lu_flops_x3(n)) / 3.0L);
        ++total;
    }
    for (int t = 0; t < 5; ++t) {
        const std::uint64_t q = points(rng), ng = gamma(rng);
        std::vector<std::size_t> interiors(count(rng));
        std::uint64_t x3 = 0;
        for (auto& n : interiors) {
            n = size(rng);
            x3 += oracle::lu_flops_x3(n) + oracle::lu_flops_x3(ng);
        }
        ok += exact(cost_dd(q, interiors, ng), static_cast<long double>(q * x3) / 3.0L);
        ++total;
    }
    for (int t = 0; t < 5; ++t) {
        const std::uint64_t nd = count(rng), q = points(rng), big_n = terms(rng), ng = gamma(rng);
        // Integer arithmetic: every term is a whole number of flops.
        const std::uint64_t matrix = nd * ((nd - 1) * q * big_n * (2 * ng * ng - 1) + nd * q * ng * ng);
        const std::uint64_t vector = nd * ((nd - 1) * q * big_n * (2 * ng - 1) + nd * q * ng);
        ok += exact(cost_projection(nd, q, big_n, ng), static_cast<long double>(matrix + vector));
        ++total;
    }
    return {ok == total, fmt::format("{}/{} randomized tuples reproduced exactly (flops_lu, cost_dd, cost_projection)", ok, total)};
}

struct Criterion {
    int id;
    const char* name;
    std::function<Outcome(const Context&)> run;
};

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance checks"};
    std::vector<int> only;
    std::string workdir = "acceptance_out";
    bool prepare = false, verbose = false;
    app.add_option("--only", only, "Run only these criteria (repeatable)")->check(CLI::Range(1, 12));
    app.add_option("--workdir", workdir, "Directory for experiment outputs");
    app.add_flag("--prepare-desk", prepare, "Recompute the shared 2D desk run and exit");
    app.add_flag("-v,--verbose", verbose, "Progress lines from the experiment runs");
    CLI11_PARSE(app, argc, argv);

    const Context ctx{workdir, verbose};
    fs::create_directories(ctx.workdir);
    if (prepare) {
        ensure_desk_run(ctx, true);
        std::cout << "desk run written to " << desk_dir(ctx).string() << '\n';
        return 0;
    }

    const std::vector<Criterion> all{
        {1, "sparse-grid point counts", grid_counts},
        {2, "chaos Gram matrix", gram_identity},
        {3, "adaptation isometry", isometry},
        {4, "exact recovery at r = d", exact_recovery},
        {5, "DD equals monolithic LU", dd_equivalence},
        {6, "desk 2D accuracy", desk_accuracy},
        {7, "desk 2D cost ratio", desk_cost},
        {8, "eigenvalue decay", eigen_decay},
        {9, "KL against analytic spectrum", kl_oracle},
        {10, "nonlinear Richards pipeline", nonlinear_pipeline},
        {11, "linear Richards", linear_richards},
        {12, "cost formulas", cost_formulas},
    };
    const std::set<int> selected(only.begin(), only.end());
    int failed = 0;
    for (const auto& c : all) {
        if (!selected.empty() && !selected.contains(c.id)) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run(ctx);
        } catch (const std::exception& e) {
            o = {false, std::string("error: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (!o.pass) ++failed;
        std::cout << fmt::format("criterion {:2d} {} {}: {} [{:.1f} s]", c.id, o.pass ? "PASS" : "FAIL", c.name, o.detail, secs)
                  << std::endl;
    }
    return failed == 0 ? 0 : 1;
}
