#include "stochdd/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <numeric>
#include <ostream>
#include <random>
#include <set>
#include <sstream>

#include <fmt/format.h>
#include <json.hpp>

#include "stochdd/error.hpp"
#include "stochdd/quadrature.hpp"

namespace stochdd {

using nlohmann::json;

namespace {

// Seed offsets so that each random stream is independent of the others.
constexpr std::uint64_t kEpsSeedOffset = 1;
constexpr std::uint64_t kPdfSeedOffset = 2;
constexpr std::uint64_t kCompletionSeedOffset = 3;
constexpr std::size_t kBatch = 1000;

Eigen::MatrixXd standard_normal_draws(std::mt19937_64& rng, std::size_t rows, std::size_t cols) {
    std::normal_distribution<double> normal;
    Eigen::MatrixXd out(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    // Row by row so that a draw does not depend on the batch size.
    for (Eigen::Index i = 0; i < out.rows(); ++i) {
        for (Eigen::Index j = 0; j < out.cols(); ++j) out(i, j) = normal(rng);
    }
    return out;
}

// ---------------------------------------------------------------- config IO

std::string_view kernel_name(KernelType k) {
    return k == KernelType::SquaredExponential ? "squared-exponential" : "exponential";
}

KernelType parse_kernel(const std::string& s) {
    if (s == "squared-exponential") return KernelType::SquaredExponential;
    if (s == "exponential") return KernelType::Exponential;
    throw InvalidArgument(fmt::format("config: field.kernel must be squared-exponential or exponential, got '{}'", s));
}

void check_keys(const json& obj, std::string_view section, std::initializer_list<std::string_view> allowed) {
    if (!obj.is_object()) throw InvalidArgument(fmt::format("config: '{}' must be an object", section));
    for (const auto& [key, value] : obj.items()) {
        if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
            throw InvalidArgument(fmt::format("config: unknown key '{}{}{}'", section, section.empty() ? "" : ".", key));
        }
    }
}

template <typename T>
T get_as(const json& obj, std::string_view section, const std::string& key) {
    try {
        return obj.at(key).get<T>();
    } catch (const json::exception&) {
        throw InvalidArgument(fmt::format("config: '{}.{}' has the wrong type", section, key));
    }
}

template <typename T>
void read_if(const json& obj, std::string_view section, const std::string& key, T& target) {
    if (obj.contains(key)) target = get_as<T>(obj, section, key);
}

std::size_t get_count(const json& obj, std::string_view section, const std::string& key) {
    const json& v = obj.at(key);
    if (!v.is_number_integer() || v.get<long long>() < 0) {
        throw InvalidArgument(fmt::format("config: '{}.{}' must be a non-negative integer", section, key));
    }
    return v.get<std::size_t>();
}

void read_count(const json& obj, std::string_view section, const std::string& key, std::size_t& target) {
    if (obj.contains(key)) target = get_count(obj, section, key);
}

std::vector<std::size_t> get_counts(const json& obj, std::string_view section, const std::string& key) {
    const json& v = obj.at(key);
    if (!v.is_array()) throw InvalidArgument(fmt::format("config: '{}.{}' must be an array", section, key));
    std::vector<std::size_t> out;
    for (const auto& e : v) {
        if (!e.is_number_integer() || e.get<long long>() < 1) {
            throw InvalidArgument(fmt::format("config: '{}.{}' entries must be positive integers", section, key));
        }
        out.push_back(e.get<std::size_t>());
    }
    return out;
}

json sink_json(const std::optional<PointSink>& sink) {
    if (!sink) return nullptr;
    return {{"x", sink->x}, {"y", sink->y}, {"magnitude", sink->magnitude}};
}

json ledger_json(const CostLedger& ledger) {
    json phases = json::object();
    for (std::size_t i = 0; i < kPhaseCount; ++i) {
        const auto ph = static_cast<Phase>(i);
        json hist = json::object();
        for (const auto& [n, count] : ledger.histogram(ph)) hist[std::to_string(n)] = count;
        phases[std::string(phase_name(ph))] = {
            {"flops", ledger.flops(ph)}, {"solves", ledger.solve_count(ph)}, {"histogram", hist}};
    }
    return {{"phases", phases}, {"total_flops", ledger.total()}, {"total_solves", ledger.total_solves()}};
}

// ------------------------------------------------------------ small helpers

Eigen::VectorXd dirichlet_base(const StochasticProblem& prob) {
    const auto es = prob.elements(std::vector<double>(prob.stochastic_dim(), 0.0), nullptr);
    Eigen::VectorXd base = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(es.n_nodes));
    for (const auto& [n, v] : es.dirichlet) base(n) = v;
    return base;
}

double stencil_value(const ProbeStencil& st, const Eigen::VectorXd& u) {
    double v = 0.0;
    for (std::size_t k = 0; k < st.nodes.size(); ++k) v += st.weights[k] * u(st.nodes[k]);
    return v;
}

template <typename F>
auto in_phase(const char* name, F&& fn) {
    try {
        return fn();
    } catch (const ExperimentError&) {
        throw;
    } catch (const std::exception& e) {
        throw ExperimentError(name, e.what());
    }
}

std::string case_label(std::size_t nd, std::size_t r) { return fmt::format("nd{}_r{}", nd, r); }

void write_nodal_csv(const std::filesystem::path& path, const Mesh& mesh, const std::vector<std::string>& labels,
                     const std::vector<const Eigen::VectorXd*>& columns) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error(fmt::format("cannot open '{}' for writing", path.string()));
    out << (mesh.dimension == 2 ? "node,x,y" : "node,z");
    for (const auto& l : labels) out << ',' << l;
    out << '\n';
    for (std::size_t i = 0; i < mesh.n_nodes(); ++i) {
        const auto ii = static_cast<Eigen::Index>(i);
        out << i;
        for (Eigen::Index c = 0; c < mesh.coords.cols(); ++c) out << fmt::format(",{:.17g}", mesh.coords(ii, c));
        for (const auto* col : columns) out << fmt::format(",{:.17g}", (*col)(ii));
        out << '\n';
    }
}

} // namespace

// ------------------------------------------------------------------ config

std::string_view problem_name(ProblemKind kind) {
    switch (kind) {
    case ProblemKind::RichardsLinear1D: return "richards-linear-1d";
    case ProblemKind::RichardsNonlinear1D: return "richards-nonlinear-1d";
    case ProblemKind::Diffusion2D: return "diffusion-2d";
    }
    return "unknown";
}

ProblemKind parse_problem_name(std::string_view name) {
    for (auto k : {ProblemKind::RichardsLinear1D, ProblemKind::RichardsNonlinear1D, ProblemKind::Diffusion2D}) {
        if (problem_name(k) == name) return k;
    }
    throw InvalidArgument(fmt::format("config: unknown problem '{}'", name));
}

ExperimentConfig default_config(ProblemKind kind) {
    ExperimentConfig c;
    c.problem = kind;
    switch (kind) {
    case ProblemKind::Diffusion2D:
        c.length = {240.0, 60.0};
        c.cells = {96, 24};
        c.kernel = KernelType::SquaredExponential;
        c.correlation = {24.0, 20.0};
        c.mean = 5.0;
        c.sigma = 2.5;
        c.sink = PointSink{120.0, 30.0, -1.0};
        c.dim = 10;
        c.order = 3;
        c.level = 5;
        c.subdomains = {3, 8};
        c.reduced_dims = {3, 4, 5};
        c.dd_level = 5;
        c.max_outer = 1;
        c.probe = {24.0, 45.0};
        c.output_dir = "out/diffusion-2d";
        break;
    case ProblemKind::RichardsLinear1D:
        c.length = {10.0};
        c.cells = {400};
        c.kernel = KernelType::SquaredExponential;
        // With a top condition on the capillary flux alone, within-layer
        // variation of K_s is amplified by about exp(α(L − z)) going down;
        // a field correlated over the whole column keeps every sample
        // well posed.
        c.correlation = {10.0};
        c.cov = 0.1;
        c.layers = {{6.0, 1.0, 2.0, 0.45}, {10.0, 10.0, 1.0, 0.45}};
        c.dim = 15;
        c.level = 5;
        c.subdomains = {4};
        c.reduced_dims = {5};
        c.max_outer = 1;
        c.probe = {6.0};
        c.output_dir = "out/richards-linear-1d";
        break;
    case ProblemKind::RichardsNonlinear1D:
        c.length = {10.0};
        c.cells = {400};
        c.kernel = KernelType::SquaredExponential;
        c.correlation = {2.5};
        c.mean = VanGenuchtenModel{}.ks;
        c.cov = 0.1;
        c.dim = 15;
        c.level = 5;
        c.subdomains = {4};
        c.reduced_dims = {5};
        c.max_outer = 5;
        c.probe = {5.0};
        c.output_dir = "out/richards-nonlinear-1d";
        break;
    }
    return c;
}

ExperimentConfig parse_config(std::string_view json_text) {
    json root;
    try {
        root = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw InvalidArgument(fmt::format("config: malformed JSON ({})", e.what()));
    }
    check_keys(root, "", {"problem", "seed", "mesh", "field", "soil", "boundary", "stochastic", "reference", "dd", "outputs"});
    if (!root.contains("problem")) throw InvalidArgument("config: 'problem' is required");
    ExperimentConfig c = default_config(parse_problem_name(get_as<std::string>(root, "", "problem")));
    if (root.contains("seed")) {
        if (!root["seed"].is_number_unsigned()) throw InvalidArgument("config: 'seed' must be a non-negative integer");
        c.seed = root["seed"].get<std::uint64_t>();
    }

    if (root.contains("mesh")) {
        const json& m = root["mesh"];
        check_keys(m, "mesh", {"length", "cells"});
        read_if(m, "mesh", "length", c.length);
        if (m.contains("cells")) c.cells = get_counts(m, "mesh", "cells");
    }

    if (root.contains("field")) {
        const json& f = root["field"];
        check_keys(f, "field", {"kernel", "correlation", "mean", "sigma", "cov", "square_sigma"});
        if (f.contains("kernel")) c.kernel = parse_kernel(get_as<std::string>(f, "field", "kernel"));
        read_if(f, "field", "correlation", c.correlation);
        read_if(f, "field", "mean", c.mean);
        read_if(f, "field", "square_sigma", c.square_sigma);
        if (f.contains("sigma") && f.contains("cov")) throw InvalidArgument("config: give field.sigma or field.cov, not both");
        if (f.contains("sigma")) {
            c.sigma = get_as<double>(f, "field", "sigma");
            c.cov.reset();
        }
        if (f.contains("cov")) {
            c.cov = get_as<double>(f, "field", "cov");
            c.sigma.reset();
        }
    }

    if (root.contains("soil")) {
        const json& s = root["soil"];
        switch (c.problem) {
        case ProblemKind::RichardsLinear1D: {
            check_keys(s, "soil", {"layers"});
            if (s.contains("layers")) {
                if (!s["layers"].is_array()) throw InvalidArgument("config: 'soil.layers' must be an array");
                c.layers.clear();
                for (const auto& l : s["layers"]) {
                    check_keys(l, "soil.layers[]", {"top", "ks", "alpha", "theta_s"});
                    SoilLayer layer;
                    read_if(l, "soil.layers[]", "top", layer.top);
                    read_if(l, "soil.layers[]", "ks", layer.ks);
                    read_if(l, "soil.layers[]", "alpha", layer.alpha);
                    read_if(l, "soil.layers[]", "theta_s", layer.theta_s);
                    c.layers.push_back(layer);
                }
            }
            break;
        }
        case ProblemKind::RichardsNonlinear1D:
            check_keys(s, "soil", {"n", "alpha", "theta_r", "theta_s"});
            read_if(s, "soil", "n", c.van_genuchten.n);
            read_if(s, "soil", "alpha", c.van_genuchten.alpha);
            read_if(s, "soil", "theta_r", c.van_genuchten.theta_r);
            read_if(s, "soil", "theta_s", c.van_genuchten.theta_s);
            break;
        case ProblemKind::Diffusion2D:
            check_keys(s, "soil", {});
            break;
        }
    }

    if (root.contains("boundary")) {
        const json& b = root["boundary"];
        switch (c.problem) {
        case ProblemKind::Diffusion2D:
            check_keys(b, "boundary", {"left", "right", "sink"});
            read_if(b, "boundary", "left", c.diffusion_bc.left);
            read_if(b, "boundary", "right", c.diffusion_bc.right);
            if (b.contains("sink")) {
                if (b["sink"].is_null()) {
                    c.sink.reset();
                } else {
                    check_keys(b["sink"], "boundary.sink", {"x", "y", "magnitude"});
                    PointSink sink = c.sink.value_or(PointSink{});
                    read_if(b["sink"], "boundary.sink", "x", sink.x);
                    read_if(b["sink"], "boundary.sink", "y", sink.y);
                    read_if(b["sink"], "boundary.sink", "magnitude", sink.magnitude);
                    c.sink = sink;
                }
            }
            break;
        case ProblemKind::RichardsLinear1D:
            check_keys(b, "boundary", {"theta0", "q"});
            read_if(b, "boundary", "theta0", c.linear_bc.theta0);
            read_if(b, "boundary", "q", c.linear_bc.q);
            break;
        case ProblemKind::RichardsNonlinear1D:
            check_keys(b, "boundary", {"psi_bottom", "psi_top"});
            read_if(b, "boundary", "psi_bottom", c.nonlinear_bc.psi_bottom);
            read_if(b, "boundary", "psi_top", c.nonlinear_bc.psi_top);
            break;
        }
    }

    if (root.contains("stochastic")) {
        const json& s = root["stochastic"];
        check_keys(s, "stochastic", {"dim", "order", "level"});
        read_count(s, "stochastic", "dim", c.dim);
        if (s.contains("order")) c.order = static_cast<unsigned>(get_count(s, "stochastic", "order"));
        read_count(s, "stochastic", "level", c.level);
    }

    if (root.contains("reference")) {
        const json& r = root["reference"];
        check_keys(r, "reference", {"method", "samples"});
        if (r.contains("method")) {
            const auto m = get_as<std::string>(r, "reference", "method");
            if (m == "sparse-grid") {
                c.reference = ReferenceMethod::SparseGrid;
            } else if (m == "monte-carlo") {
                c.reference = ReferenceMethod::MonteCarlo;
            } else {
                throw InvalidArgument(fmt::format("config: reference.method must be sparse-grid or monte-carlo, got '{}'", m));
            }
        }
        read_count(r, "reference", "samples", c.reference_samples);
    }

    if (root.contains("dd")) {
        const json& d = root["dd"];
        check_keys(d, "dd", {"subdomains", "reduced_dims", "level", "order", "gaussian_level", "max_outer", "tol"});
        if (d.contains("subdomains")) c.subdomains = get_counts(d, "dd", "subdomains");
        if (d.contains("reduced_dims")) c.reduced_dims = get_counts(d, "dd", "reduced_dims");
        read_count(d, "dd", "level", c.dd_level);
        if (d.contains("order")) c.dd_order = static_cast<unsigned>(get_count(d, "dd", "order"));
        read_count(d, "dd", "gaussian_level", c.gaussian_level);
        read_count(d, "dd", "max_outer", c.max_outer);
        read_if(d, "dd", "tol", c.tol);
    }

    if (root.contains("outputs")) {
        const json& o = root["outputs"];
        check_keys(o, "outputs", {"dir", "eps_samples", "pdf_samples", "pdf_points", "probe"});
        read_if(o, "outputs", "dir", c.output_dir);
        read_count(o, "outputs", "eps_samples", c.eps_samples);
        read_count(o, "outputs", "pdf_samples", c.pdf_samples);
        read_count(o, "outputs", "pdf_points", c.pdf_points);
        read_if(o, "outputs", "probe", c.probe);
    }

    validate_config(c);
    return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw InvalidArgument(fmt::format("config: cannot read '{}'", path.string()));
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_config(buf.str());
}

std::string config_to_json(const ExperimentConfig& c) {
    json j;
    j["problem"] = std::string(problem_name(c.problem));
    j["seed"] = c.seed;
    j["mesh"] = {{"length", c.length}, {"cells", c.cells}};
    j["field"] = {{"kernel", std::string(kernel_name(c.kernel))},
                  {"correlation", c.correlation},
                  {"mean", c.mean},
                  {"square_sigma", c.square_sigma}};
    if (c.sigma) j["field"]["sigma"] = *c.sigma;
    if (c.cov) j["field"]["cov"] = *c.cov;
    switch (c.problem) {
    case ProblemKind::Diffusion2D:
        j["boundary"] = {{"left", c.diffusion_bc.left}, {"right", c.diffusion_bc.right}, {"sink", sink_json(c.sink)}};
        break;
    case ProblemKind::RichardsLinear1D: {
        json layers = json::array();
        for (const auto& l : c.layers) layers.push_back({{"top", l.top}, {"ks", l.ks}, {"alpha", l.alpha}, {"theta_s", l.theta_s}});
        j["soil"] = {{"layers", layers}};
        j["boundary"] = {{"theta0", c.linear_bc.theta0}, {"q", c.linear_bc.q}};
        break;
    }
    case ProblemKind::RichardsNonlinear1D:
        j["soil"] = {{"n", c.van_genuchten.n},
                     {"alpha", c.van_genuchten.alpha},
                     {"theta_r", c.van_genuchten.theta_r},
                     {"theta_s", c.van_genuchten.theta_s}};
        j["boundary"] = {{"psi_bottom", c.nonlinear_bc.psi_bottom}, {"psi_top", c.nonlinear_bc.psi_top}};
        break;
    }
    j["stochastic"] = {{"dim", c.dim}, {"order", c.order}, {"level", c.level}};
    j["reference"] = {{"method", c.reference == ReferenceMethod::SparseGrid ? "sparse-grid" : "monte-carlo"},
                      {"samples", c.reference_samples}};
    j["dd"] = {{"subdomains", c.subdomains}, {"reduced_dims", c.reduced_dims}, {"level", c.dd_level},
               {"order", c.dd_order}, {"gaussian_level", c.gaussian_level}, {"max_outer", c.max_outer}, {"tol", c.tol}};
    j["outputs"] = {{"dir", c.output_dir}, {"eps_samples", c.eps_samples}, {"pdf_samples", c.pdf_samples},
                    {"pdf_points", c.pdf_points}, {"probe", c.probe}};
    return j.dump(2);
}

void validate_config(const ExperimentConfig& c) {
    const std::size_t sd = c.problem == ProblemKind::Diffusion2D ? 2 : 1;
    detail::require(c.length.size() == sd, fmt::format("config: mesh.length needs {} entries", sd));
    detail::require(c.cells.size() == sd, fmt::format("config: mesh.cells needs {} entries", sd));
    detail::require(c.correlation.size() == sd, fmt::format("config: field.correlation needs {} entries", sd));
    detail::require(c.probe.size() == sd, fmt::format("config: outputs.probe needs {} entries", sd));
    for (double l : c.length) detail::require(l > 0.0, "config: mesh.length must be positive");
    for (auto n : c.cells) detail::require(n >= 1, "config: mesh.cells must be positive");
    for (double l : c.correlation) detail::require(l > 0.0, "config: field.correlation must be positive");
    detail::require(c.mean > 0.0, "config: field.mean must be positive");
    detail::require(c.sigma.has_value() != c.cov.has_value(), "config: exactly one of field.sigma and field.cov is required");
    if (c.sigma) detail::require(*c.sigma > 0.0, "config: field.sigma must be positive");
    if (c.cov) detail::require(*c.cov > 0.0, "config: field.cov must be positive");
    detail::require(c.dim >= 1, "config: stochastic.dim must be positive");
    detail::require(c.level >= 1 && c.dd_level >= 1 && c.gaussian_level >= 1, "config: sparse-grid levels must be >= 1");
    detail::require(c.reference == ReferenceMethod::SparseGrid || c.reference_samples >= 1,
                    "config: reference.samples must be positive for monte-carlo");
    detail::require(!c.subdomains.empty() && !c.reduced_dims.empty(), "config: dd.subdomains and dd.reduced_dims must be non-empty");
    for (auto r : c.reduced_dims) {
        detail::require(r >= 1 && r <= c.dim, fmt::format("config: dd.reduced_dims entry {} must lie in [1, stochastic.dim]", r));
    }
    detail::require(c.max_outer >= 1, "config: dd.max_outer must be >= 1");
    detail::require(c.tol >= 0.0, "config: dd.tol must be non-negative");
    detail::require(c.pdf_points >= 2, "config: outputs.pdf_points must be >= 2");
    detail::require(!c.output_dir.empty(), "config: outputs.dir must be non-empty");
    switch (c.problem) {
    case ProblemKind::Diffusion2D:
        break;
    case ProblemKind::RichardsLinear1D: {
        detail::require(!c.layers.empty(), "config: soil.layers must be non-empty");
        double prev = 0.0;
        for (const auto& l : c.layers) {
            detail::require(l.top > prev, "config: soil.layers tops must increase");
            detail::require(l.ks > 0.0 && l.alpha > 0.0 && l.theta_s > 0.0, "config: soil.layers values must be positive");
            prev = l.top;
        }
        detail::require(std::abs(prev - c.length[0]) <= 1e-12 * c.length[0], "config: the last layer top must equal mesh.length");
        detail::require(c.linear_bc.theta0 > 0.0, "config: boundary.theta0 must be positive");
        break;
    }
    case ProblemKind::RichardsNonlinear1D: {
        const auto& vg = c.van_genuchten;
        detail::require(vg.n > 1.0 && vg.alpha > 0.0 && vg.theta_r >= 0.0 && vg.theta_r < vg.theta_s,
                        "config: invalid van Genuchten soil parameters");
        break;
    }
    }
}

// ------------------------------------------------------------------ setup

ProblemSetup make_problem(const ExperimentConfig& c) {
    validate_config(c);
    ProblemSetup out;
    switch (c.problem) {
    case ProblemKind::Diffusion2D: {
        out.mesh = make_mesh_2d(c.length[0], c.length[1], c.cells[0], c.cells[1]);
        const auto lp = c.sigma ? lognormal_params(c.mean, *c.sigma, c.square_sigma) : lognormal_params_from_cov(c.mean, *c.cov);
        const CovarianceKernel kernel{c.kernel, lp.sigma_g * lp.sigma_g, c.correlation};
        out.field = kl_solve(assemble_covariance(out.mesh.coords, kernel), out.mesh.node_weights(), c.dim);
        out.field.mean = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(out.mesh.n_nodes()), lp.g0);
        out.problem = std::make_unique<DiffusionProblem2D>(out.mesh, out.field, c.diffusion_bc, c.sink);
        break;
    }
    case ProblemKind::RichardsLinear1D: {
        out.mesh = make_mesh_1d(c.length[0], c.cells[0]);
        GardnerModel model;
        for (std::size_t k = 0; k < c.layers.size(); ++k) {
            model.layers.push_back({c.layers[k].ks, c.layers[k].alpha, c.layers[k].theta_s});
            if (k + 1 < c.layers.size()) model.layer_tops.push_back(c.layers[k].top);
        }
        const Eigen::MatrixXd centers = out.mesh.cell_centers();
        std::vector<int> layer(out.mesh.n_cells());
        std::vector<CovarianceKernel> kernels;
        std::vector<LogNormalParams> params;
        for (const auto& l : c.layers) {
            params.push_back(c.sigma ? lognormal_params(l.ks, *c.sigma, c.square_sigma) : lognormal_params_from_cov(l.ks, *c.cov));
            kernels.push_back({c.kernel, params.back().sigma_g * params.back().sigma_g, c.correlation});
        }
        Eigen::VectorXd mean(static_cast<Eigen::Index>(out.mesh.n_cells()));
        for (std::size_t i = 0; i < out.mesh.n_cells(); ++i) {
            const auto k = model.layer_of(centers(static_cast<Eigen::Index>(i), 0));
            layer[i] = static_cast<int>(k);
            mean(static_cast<Eigen::Index>(i)) = params[k].g0;
        }
        out.field = kl_solve(assemble_layered_covariance(centers, layer, kernels), out.mesh.cell_weights(), c.dim);
        out.field.mean = mean;
        out.problem = std::make_unique<RichardsLinearProblem>(out.mesh, model, out.field, c.linear_bc);
        break;
    }
    case ProblemKind::RichardsNonlinear1D: {
        out.mesh = make_mesh_1d(c.length[0], c.cells[0]);
        const auto lp = c.sigma ? lognormal_params(c.mean, *c.sigma, c.square_sigma) : lognormal_params_from_cov(c.mean, *c.cov);
        const CovarianceKernel kernel{c.kernel, lp.sigma_g * lp.sigma_g, c.correlation};
        out.field = kl_solve(assemble_covariance(out.mesh.cell_centers(), kernel), out.mesh.cell_weights(), c.dim);
        out.field.mean = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(out.mesh.n_cells()), lp.g0);
        VanGenuchtenModel vg = c.van_genuchten;
        // K_s enters through the field; the model's own K_s only scales relative conductivity.
        vg.ks = c.mean;
        out.problem = std::make_unique<RichardsNonlinearProblem>(out.mesh, vg, out.field, c.nonlinear_bc);
        break;
    }
    }
    return out;
}

// ---------------------------------------------------------------- metrics

double rel_error_mean(const Eigen::VectorXd& ref, const Eigen::VectorXd& approx) {
    detail::require(ref.size() == approx.size() && ref.size() > 0, "rel_error: fields must have equal, non-zero length");
    const double peak = ref.cwiseAbs().maxCoeff();
    detail::require(peak > 0.0, "rel_error: the reference field is identically zero");
    return ((ref - approx) / peak).norm() / std::sqrt(static_cast<double>(ref.size()));
}

double rel_error_std(const Eigen::VectorXd& ref, const Eigen::VectorXd& approx) { return rel_error_mean(ref, approx); }

MonteCarloResult mc_reference(const StochasticProblem& problem, std::size_t m, std::uint64_t seed, CostLedger* ledger,
                              const SampleObserver& observer) {
    detail::require(m >= 1, "mc_reference: need at least one sample");
    const std::size_t d = problem.stochastic_dim();
    std::mt19937_64 rng(seed);
    MonteCarloResult out;
    const auto n = static_cast<Eigen::Index>(problem.mesh().n_nodes());
    out.mean = Eigen::VectorXd::Zero(n);
    Eigen::VectorXd m2 = Eigen::VectorXd::Zero(n);
    for (std::size_t k = 0; k < m; ++k) {
        const Eigen::VectorXd xi = standard_normal_draws(rng, 1, d).row(0).transpose();
        const Eigen::VectorXd u = problem.solve(std::span<const double>(xi.data(), d), ledger, Phase::Reference);
        ++out.samples;
        const Eigen::VectorXd delta = u - out.mean;
        out.mean += delta / static_cast<double>(out.samples);
        m2 += delta.cwiseProduct(u - out.mean);
        if (observer) observer(xi, u);
    }
    out.std = (m2 / static_cast<double>(out.samples)).cwiseMax(0.0).cwiseSqrt();
    return out;
}

Eigen::MatrixXd evaluate_reduced(const ReducedView& red, const Eigen::MatrixXd& xi) {
    const Partition& p = *red.partition;
    detail::require(red.bases.size() == p.n_sub() && red.pce.size() == p.n_sub(),
                    "evaluate_reduced: one basis and one expansion per subdomain");
    Eigen::MatrixXd out = red.base.transpose().replicate(xi.rows(), 1);
    for (std::size_t s = 0; s < p.n_sub(); ++s) {
        const auto& b = red.bases[s];
        detail::require(b.a.cols() == xi.cols(), "evaluate_reduced: draws must have d columns");
        const auto r = static_cast<Eigen::Index>(b.r);
        const Eigen::MatrixXd eta = xi * b.a.topRows(r).transpose();
        const Eigen::MatrixXd vals = basis_matrix(red.pce[s].basis, eta) * red.pce[s].coefficients;
        const auto nodes = p.closure(s);
        for (std::size_t k = 0; k < nodes.size(); ++k) {
            if (p.node_owner[static_cast<std::size_t>(nodes[k])] == static_cast<int>(s)) {
                out.col(nodes[k]) = vals.col(static_cast<Eigen::Index>(k));
            }
        }
    }
    return out;
}

std::pair<Eigen::VectorXd, Eigen::VectorXd> reduced_moments(const ReducedView& red) {
    const Partition& p = *red.partition;
    std::vector<Eigen::VectorXd> means, stds;
    for (std::size_t s = 0; s < p.n_sub(); ++s) {
        means.push_back(pce_mean(red.pce[s]));
        stds.push_back(pce_std(red.pce[s]));
    }
    return {gather_nodal(p, means, red.base), gather_nodal(p, stds, Eigen::VectorXd::Zero(red.base.size()))};
}

Eigen::MatrixXd expected_sq_error_fields(const PCExpansion& full, std::span<const ReducedView> reduced, std::size_t m,
                                         std::uint64_t seed) {
    detail::require(m >= 1, "expected_sq_error_field: need at least one draw");
    const std::size_t d = full.basis.dim();
    const auto n = static_cast<Eigen::Index>(full.n_dof());
    Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(n, static_cast<Eigen::Index>(reduced.size()));
    std::mt19937_64 rng(seed);
    for (std::size_t done = 0; done < m;) {
        const std::size_t batch = std::min(kBatch, m - done);
        const Eigen::MatrixXd xi = standard_normal_draws(rng, batch, d);
        const Eigen::MatrixXd u_full = basis_matrix(full.basis, xi) * full.coefficients;
        for (std::size_t c = 0; c < reduced.size(); ++c) {
            const Eigen::MatrixXd diff = u_full - evaluate_reduced(reduced[c], xi);
            acc.col(static_cast<Eigen::Index>(c)) += diff.array().square().colwise().sum().transpose().matrix();
        }
        done += batch;
    }
    return acc / static_cast<double>(m);
}

Eigen::VectorXd expected_sq_error_field(const PCExpansion& full, const ReducedView& reduced, std::size_t m,
                                        std::uint64_t seed) {
    return expected_sq_error_fields(full, std::span(&reduced, 1), m, seed).col(0);
}

ProbeStencil probe_stencil(const Mesh& mesh, std::span<const double> point) {
    detail::require(point.size() == static_cast<std::size_t>(mesh.dimension), "probe_stencil: point dimension mismatch");
    auto locate = [](double x, double length, std::size_t n, const char* axis) {
        detail::require(x >= 0.0 && x <= length, fmt::format("probe_stencil: {} coordinate outside the mesh", axis));
        const double h = length / static_cast<double>(n);
        const auto i = std::min(static_cast<std::size_t>(x / h), n - 1);
        const double t = std::clamp((x - static_cast<double>(i) * h) / h, 0.0, 1.0);
        return std::pair{i, t};
    };
    ProbeStencil st;
    const auto [i, tx] = locate(point[0], mesh.lx, mesh.nx, "x");
    if (mesh.dimension == 1) {
        st.nodes = {mesh.node(i), mesh.node(i + 1)};
        st.weights = {1.0 - tx, tx};
        return st;
    }
    const auto [j, ty] = locate(point[1], mesh.ly, mesh.ny, "y");
    st.nodes = {mesh.node(i, j), mesh.node(i + 1, j), mesh.node(i, j + 1), mesh.node(i + 1, j + 1)};
    st.weights = {(1 - tx) * (1 - ty), tx * (1 - ty), (1 - tx) * ty, tx * ty};
    return st;
}

double silverman_bandwidth(std::span<const double> samples) {
    detail::require(samples.size() >= 2, "silverman_bandwidth: need at least two samples");
    const auto n = static_cast<double>(samples.size());
    const double mean = std::accumulate(samples.begin(), samples.end(), 0.0) / n;
    double ss = 0.0;
    for (double x : samples) ss += (x - mean) * (x - mean);
    const double sd = std::sqrt(ss / (n - 1.0));
    std::vector<double> sorted(samples.begin(), samples.end());
    std::sort(sorted.begin(), sorted.end());
    auto quantile = [&](double q) {
        const double pos = q * (n - 1.0);
        const auto lo = static_cast<std::size_t>(pos);
        const auto hi = std::min(lo + 1, sorted.size() - 1);
        return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
    };
    const double iqr = quantile(0.75) - quantile(0.25);
    double spread = iqr > 0.0 ? std::min(sd, iqr / 1.34) : sd;
    // Degenerate samples: fall back to a width tied to the magnitude.
    if (!(spread > 0.0)) spread = 1e-12 * std::max(1.0, std::abs(mean));
    return 0.9 * spread * std::pow(n, -0.2);
}

Eigen::VectorXd kde(std::span<const double> samples, const Eigen::VectorXd& at, double bandwidth) {
    detail::require(!samples.empty(), "kde: no samples");
    detail::require(bandwidth > 0.0, "kde: bandwidth must be positive");
    const double norm = 1.0 / (static_cast<double>(samples.size()) * bandwidth * std::sqrt(2.0 * std::numbers::pi));
    Eigen::VectorXd out = Eigen::VectorXd::Zero(at.size());
    for (Eigen::Index k = 0; k < at.size(); ++k) {
        double sum = 0.0;
        for (double x : samples) {
            const double z = (at(k) - x) / bandwidth;
            sum += std::exp(-0.5 * z * z);
        }
        out(k) = sum * norm;
    }
    return out;
}

// ------------------------------------------------------------------ runner

namespace {

struct CaseData {
    std::size_t partition_index = 0;
    std::vector<AdaptedBasis> bases;
    AdaptedSolution solution;
};

} // namespace

ExperimentResult run_experiment(const ExperimentConfig& cfg, std::ostream* log) {
    auto note = [&](const std::string& line) {
        if (log) *log << line << std::endl;
    };
    in_phase("config", [&] {
        validate_config(cfg);
        return 0;
    });
    ExperimentResult result;
    ProblemSetup setup = in_phase("setup", [&] { return make_problem(cfg); });
    const StochasticProblem& prob = *setup.problem;
    const Mesh& mesh = setup.mesh;
    const std::size_t d = cfg.dim;
    const Eigen::VectorXd base = dirichlet_base(prob);
    const auto fixed = fixed_nodes(prob.elements(std::vector<double>(d, 0.0), nullptr));
    const ProbeStencil probe = in_phase("setup", [&] { return probe_stencil(mesh, cfg.probe); });
    result.input_eigenvalues = setup.field.eigenvalues;
    note(fmt::format("{}: {} nodes, d = {}, lambda_1 = {:.4g}", problem_name(cfg.problem), mesh.n_nodes(), d,
                     setup.field.eigenvalues(0)));

    const GaussianPart gp = in_phase("gaussian-part", [&] {
        return gaussian_part(prob, cfg.gaussian_level, &result.gaussian_ledger);
    });
    note(fmt::format("gaussian part: {} solves", result.gaussian_ledger.total_solves()));

    // Reduced solves for every (subdomain count, r).
    std::vector<Partition> partitions;
    std::vector<CaseData> cases;
    const std::size_t r_max = *std::max_element(cfg.reduced_dims.begin(), cfg.reduced_dims.end());
    for (std::size_t nd : cfg.subdomains) {
        partitions.push_back(in_phase("partition", [&] { return partition_mesh(mesh, nd, fixed); }));
        const Partition& p = partitions.back();
        std::vector<AdaptedBasis> full_bases;
        std::vector<Eigen::VectorXd> eigs;
        in_phase("adaptation", [&] {
            for (std::size_t s = 0; s < nd; ++s) {
                full_bases.push_back(adapt_subdomain(gp, p, s, mesh.node_weights(), r_max, cfg.seed + kCompletionSeedOffset));
                eigs.push_back(full_bases.back().mu);
            }
            return 0;
        });
        result.subdomain_eigenvalues.push_back(std::move(eigs));
        for (std::size_t r : cfg.reduced_dims) {
            CaseData cd;
            cd.partition_index = partitions.size() - 1;
            cd.bases = full_bases;
            for (auto& b : cd.bases) b.r = r;
            CaseResult cr;
            cr.n_sub = nd;
            cr.r = r;
            cr.ledger = result.gaussian_ledger;
            AdaptedSolveOptions opt;
            opt.level = cfg.dd_level;
            opt.order = cfg.dd_order;
            opt.max_outer = cfg.max_outer;
            opt.tol = cfg.tol;
            opt.initial = prob.is_nonlinear() ? &gp : nullptr;
            cd.solution = in_phase("reduced-solve", [&] { return adapted_subdomain_solve(prob, p, cd.bases, opt, &cr.ledger); });
            cr.outer_residuals = cd.solution.outer_residuals;
            note(fmt::format("reduced solve N_D = {}, r = {}: {} points per subdomain, {} solves{}", nd, r,
                             cd.solution.grid.points.rows(), cr.ledger.total_solves(),
                             cr.outer_residuals.empty() ? std::string()
                                                        : fmt::format(", last outer increment {:.3e}", cr.outer_residuals.back())));
            cases.push_back(std::move(cd));
            result.cases.push_back(std::move(cr));
        }
    }
    auto view_of = [&](std::size_t c) {
        ReducedView v;
        v.partition = &partitions[cases[c].partition_index];
        v.bases = cases[c].bases;
        v.pce = cases[c].solution.pce;
        v.base = base;
        return v;
    };
    std::vector<ReducedView> views;
    for (std::size_t c = 0; c < cases.size(); ++c) views.push_back(view_of(c));

    // Reference, ε(x) and probe samples.
    std::vector<double> ref_probe;
    std::vector<Eigen::VectorXd> eps(cases.size(), Eigen::VectorXd::Zero(static_cast<Eigen::Index>(mesh.n_nodes())));
    if (cfg.reference == ReferenceMethod::SparseGrid) {
        const PCExpansion full = in_phase("reference", [&] {
            const SparseGrid grid = smolyak_grid(d, cfg.level);
            const auto basis = multi_index_set(d, cfg.order);
            note(fmt::format("reference: {} sparse-grid solves, {} chaos terms", grid.points.rows(), basis.size()));
            NispAccumulator acc(grid, basis, mesh.n_nodes());
            const Eigen::MatrixXd pts = grid.points.transpose();
            for (Eigen::Index q = 0; q < grid.points.rows(); ++q) {
                const std::span<const double> xi(pts.data() + q * pts.rows(), d);
                acc.add(static_cast<std::size_t>(q), prob.solve(xi, &result.reference_ledger, Phase::Reference));
            }
            return std::move(acc).finish(mesh.coords);
        });
        result.ref_mean = pce_mean(full);
        result.ref_std = pce_std(full);
        in_phase("error-field", [&] {
            const Eigen::MatrixXd e = expected_sq_error_fields(full, views, cfg.eps_samples, cfg.seed + kEpsSeedOffset);
            for (std::size_t c = 0; c < cases.size(); ++c) eps[c] = e.col(static_cast<Eigen::Index>(c));
            return 0;
        });
        in_phase("pdf", [&] {
            Eigen::VectorXd probe_coeffs = Eigen::VectorXd::Zero(full.coefficients.rows());
            for (std::size_t k = 0; k < probe.nodes.size(); ++k) probe_coeffs += probe.weights[k] * full.coefficients.col(probe.nodes[k]);
            std::mt19937_64 rng(cfg.seed + kPdfSeedOffset);
            for (std::size_t done = 0; done < cfg.pdf_samples;) {
                const std::size_t batch = std::min(kBatch, cfg.pdf_samples - done);
                const Eigen::VectorXd v = basis_matrix(full.basis, standard_normal_draws(rng, batch, d)) * probe_coeffs;
                ref_probe.insert(ref_probe.end(), v.data(), v.data() + v.size());
                done += batch;
            }
            return 0;
        });
    } else {
        const auto mc = in_phase("reference", [&] {
            note(fmt::format("reference: {} Monte Carlo solves", cfg.reference_samples));
            return mc_reference(prob, cfg.reference_samples, cfg.seed, &result.reference_ledger,
                                [&](const Eigen::VectorXd& xi, const Eigen::VectorXd& u) {
                                    ref_probe.push_back(stencil_value(probe, u));
                                    const Eigen::MatrixXd row = xi.transpose();
                                    for (std::size_t c = 0; c < cases.size(); ++c) {
                                        eps[c] += (evaluate_reduced(views[c], row).row(0).transpose() - u).array().square().matrix();
                                    }
                                });
        });
        result.ref_mean = mc.mean;
        result.ref_std = mc.std;
        for (auto& e : eps) e /= static_cast<double>(mc.samples);
    }

    // Metrics.
    const double ref_flops = result.reference_ledger.total();
    for (std::size_t c = 0; c < cases.size(); ++c) {
        auto& cr = result.cases[c];
        auto [mean, sd] = reduced_moments(views[c]);
        cr.mean = std::move(mean);
        cr.std = std::move(sd);
        cr.eps = eps[c];
        cr.mu_e = in_phase("metrics", [&] { return rel_error_mean(result.ref_mean, cr.mean); });
        cr.sigma_e = in_phase("metrics", [&] { return rel_error_std(result.ref_std, cr.std); });
        cr.cost_ratio = in_phase("metrics", [&] { return cost_ratio(ref_flops, cr.ledger.approximate_total()); });
        note(fmt::format("N_D = {}, r = {}: mu_e = {:.3f}%, sigma_e = {:.3f}%, CR = {:.1f}", cr.n_sub, cr.r, 100 * cr.mu_e,
                         100 * cr.sigma_e, cr.cost_ratio));
    }

    // Outputs.
    in_phase("output", [&] {
        const std::filesystem::path dir(cfg.output_dir);
        std::filesystem::create_directories(dir);
        std::vector<std::string> labels{"reference"};
        std::vector<const Eigen::VectorXd*> mean_cols{&result.ref_mean}, std_cols{&result.ref_std}, eps_cols;
        std::vector<std::string> eps_labels;
        for (const auto& cr : result.cases) {
            labels.push_back(case_label(cr.n_sub, cr.r));
            eps_labels.push_back(case_label(cr.n_sub, cr.r));
            mean_cols.push_back(&cr.mean);
            std_cols.push_back(&cr.std);
            eps_cols.push_back(&cr.eps);
        }
        write_nodal_csv(dir / "mean.csv", mesh, labels, mean_cols);
        write_nodal_csv(dir / "std.csv", mesh, labels, std_cols);
        write_nodal_csv(dir / "eps.csv", mesh, eps_labels, eps_cols);

        {
            std::ofstream out(dir / "eigs_input.csv");
            write_eigenvalues_csv(out, result.input_eigenvalues);
        }
        for (std::size_t k = 0; k < cfg.subdomains.size(); ++k) {
            const auto sub = dir / fmt::format("nd{}", cfg.subdomains[k]);
            std::filesystem::create_directories(sub);
            const auto& bases = cases[k * cfg.reduced_dims.size()].bases;
            for (std::size_t s = 0; s < bases.size(); ++s) {
                std::ofstream a(sub / fmt::format("basis_{}.csv", s));
                std::ofstream e(sub / fmt::format("eigs_{}.csv", s));
                write_adapted_basis(a, e, bases[s]);
                if (k == 0) {
                    std::ofstream top(dir / fmt::format("eigs_{}.csv", s));
                    write_eigenvalues_csv(top, bases[s].mu);
                }
            }
        }

        // Probe densities on a shared grid.
        std::vector<std::vector<double>> samples{ref_probe};
        {
            std::mt19937_64 rng(cfg.seed + kPdfSeedOffset);
            std::vector<std::vector<double>> approx(cases.size());
            for (std::size_t done = 0; done < cfg.pdf_samples;) {
                const std::size_t batch = std::min(kBatch, cfg.pdf_samples - done);
                const Eigen::MatrixXd xi = standard_normal_draws(rng, batch, d);
                for (std::size_t c = 0; c < cases.size(); ++c) {
                    const Eigen::MatrixXd u = evaluate_reduced(views[c], xi);
                    for (Eigen::Index q = 0; q < u.rows(); ++q) approx[c].push_back(stencil_value(probe, u.row(q).transpose()));
                }
                done += batch;
            }
            for (auto& a : approx) samples.push_back(std::move(a));
        }
        std::ofstream pdf(dir / "pdf_probe.csv");
        pdf << "u";
        for (const auto& l : labels) pdf << ',' << l;
        pdf << '\n';
        if (cfg.pdf_samples >= 2 && ref_probe.size() >= 2) {
            double lo = std::numeric_limits<double>::infinity(), hi = -lo, h_max = 0.0;
            std::vector<double> bw;
            for (const auto& s : samples) {
                bw.push_back(silverman_bandwidth(s));
                h_max = std::max(h_max, bw.back());
                lo = std::min(lo, *std::min_element(s.begin(), s.end()));
                hi = std::max(hi, *std::max_element(s.begin(), s.end()));
            }
            const Eigen::VectorXd at = Eigen::VectorXd::LinSpaced(static_cast<Eigen::Index>(cfg.pdf_points), lo - 3 * h_max, hi + 3 * h_max);
            std::vector<Eigen::VectorXd> dens;
            for (std::size_t k = 0; k < samples.size(); ++k) dens.push_back(kde(samples[k], at, bw[k]));
            for (Eigen::Index i = 0; i < at.size(); ++i) {
                pdf << fmt::format("{:.17g}", at(i));
                for (const auto& dv : dens) pdf << fmt::format(",{:.17g}", dv(i));
                pdf << '\n';
            }
        }

        std::ofstream table(dir / "table.csv");
        table << "N_D,r,mu_e_pct,sigma_e_pct,CR\n";
        for (const auto& cr : result.cases) {
            table << fmt::format("{},{},{:.17g},{:.17g},{:.17g}\n", cr.n_sub, cr.r, 100 * cr.mu_e, 100 * cr.sigma_e, cr.cost_ratio);
        }

        json lj;
        lj["config"] = json::parse(config_to_json(cfg));
        lj["seed"] = cfg.seed;
        lj["rng"] = "mt19937_64";
        lj["reference"] = ledger_json(result.reference_ledger);
        lj["gaussian_part"] = ledger_json(result.gaussian_ledger);
        json jc = json::array();
        for (const auto& cr : result.cases) {
            jc.push_back({{"N_D", cr.n_sub},
                          {"r", cr.r},
                          {"mu_e_pct", 100 * cr.mu_e},
                          {"sigma_e_pct", 100 * cr.sigma_e},
                          {"CR", cr.cost_ratio},
                          {"outer_residuals", cr.outer_residuals},
                          {"ledger", ledger_json(cr.ledger)}});
        }
        lj["cases"] = jc;
        std::ofstream lf(dir / "ledger.json");
        lf << lj.dump(2) << '\n';
        return 0;
    });
    note(fmt::format("outputs written to {}", cfg.output_dir));
    return result;
}

std::string render_report(const std::filesystem::path& dir) {
    std::ifstream lf(dir / "ledger.json");
    if (!lf) throw InvalidArgument(fmt::format("report: '{}' has no ledger.json", dir.string()));
    json lj;
    try {
        lj = json::parse(lf);
    } catch (const json::parse_error& e) {
        throw InvalidArgument(fmt::format("report: ledger.json is malformed ({})", e.what()));
    }
    std::ifstream tf(dir / "table.csv");
    if (!tf) throw InvalidArgument(fmt::format("report: '{}' has no table.csv", dir.string()));

    std::ostringstream out;
    const auto& cfg = lj.at("config");
    out << fmt::format("problem {}  d = {}  seed {}\n", cfg.at("problem").get<std::string>(),
                       cfg.at("stochastic").at("dim").get<std::size_t>(), lj.at("seed").get<std::uint64_t>());
    out << fmt::format("reference: {}, {} solves, {:.4e} flops\n", cfg.at("reference").at("method").get<std::string>(),
                       lj.at("reference").at("total_solves").get<std::uint64_t>(),
                       lj.at("reference").at("total_flops").get<double>());
    out << fmt::format("{:>5} {:>4} {:>10} {:>12} {:>10} {:>10}\n", "N_D", "r", "mu_e[%]", "sigma_e[%]", "CR", "solves");
    std::string line;
    std::getline(tf, line); // header
    std::size_t row = 0;
    const auto& cases = lj.at("cases");
    while (std::getline(tf, line)) {
        if (line.empty()) continue;
        std::stringstream ls(line);
        std::string f[5];
        for (auto& field : f) std::getline(ls, field, ',');
        const auto solves = row < cases.size() ? cases[row].at("ledger").at("total_solves").get<std::uint64_t>() : 0;
        out << fmt::format("{:>5} {:>4} {:>10.3f} {:>12.3f} {:>10.1f} {:>10}\n", f[0], f[1], std::stod(f[2]), std::stod(f[3]),
                           std::stod(f[4]), solves);
        ++row;
    }
    return out.str();
}

} // namespace stochdd
