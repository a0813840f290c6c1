#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "stochdd/basis_adaptation.hpp"
#include "stochdd/chaos.hpp"
#include "stochdd/cost.hpp"
#include "stochdd/domain_decomposition.hpp"
#include "stochdd/pde.hpp"
#include "stochdd/problems.hpp"
#include "stochdd/random_field.hpp"

namespace stochdd {

enum class ProblemKind { RichardsLinear1D, RichardsNonlinear1D, Diffusion2D };
enum class ReferenceMethod { SparseGrid, MonteCarlo };

std::string_view problem_name(ProblemKind kind);
ProblemKind parse_problem_name(std::string_view name);

/// One Gardner layer occupying (previous top, top].
struct SoilLayer {
    double top = 10.0;
    double ks = 1.0;
    double alpha = 1.0;
    double theta_s = 0.45;
};

struct ExperimentConfig {
    ProblemKind problem = ProblemKind::Diffusion2D;
    std::uint64_t seed = 20240521;

    // mesh
    std::vector<double> length;       // {L} or {Lx, Ly}
    std::vector<std::size_t> cells;   // {n} or {nx, ny}

    // log-normal field
    KernelType kernel = KernelType::SquaredExponential;
    std::vector<double> correlation;  // one length per spatial axis
    double mean = 5.0;                // a0 (diffusion) or mean K_s (nonlinear Richards)
    std::optional<double> sigma;      // σ_a of the log-normal coefficient
    std::optional<double> cov;        // coefficient of variation (alternative to sigma)
    bool square_sigma = false;

    // soil
    std::vector<SoilLayer> layers;    // linear Richards
    VanGenuchtenModel van_genuchten;  // nonlinear Richards; ks is replaced by `mean`

    // boundary data
    DiffusionBC diffusion_bc;
    std::optional<PointSink> sink;
    RichardsLinearBC linear_bc;
    RichardsNonlinearBC nonlinear_bc;

    // full stochastic model and reference
    std::size_t dim = 10;
    unsigned order = 3;
    std::size_t level = 5;
    ReferenceMethod reference = ReferenceMethod::SparseGrid;
    std::size_t reference_samples = 2000;

    // reduced solve
    std::vector<std::size_t> subdomains;
    std::vector<std::size_t> reduced_dims;
    std::size_t dd_level = 5;
    unsigned dd_order = 3;
    std::size_t gaussian_level = 2;
    std::size_t max_outer = 5;
    double tol = 1e-10;

    // outputs
    std::string output_dir = "out";
    std::size_t eps_samples = 10000;
    std::size_t pdf_samples = 100000;
    std::size_t pdf_points = 128;
    std::vector<double> probe;
};

/// Published setup for each problem family; see README for the values that
/// are not fixed by the source experiments.
ExperimentConfig default_config(ProblemKind kind);

/// Parses a JSON config. `problem` selects the defaults that the remaining
/// keys override. Unknown keys, wrong types and invalid values throw
/// InvalidArgument naming the offending key.
ExperimentConfig parse_config(std::string_view json_text);
ExperimentConfig load_config(const std::filesystem::path& path);
std::string config_to_json(const ExperimentConfig& cfg);
void validate_config(const ExperimentConfig& cfg);

/// Mesh, input field and problem built from a config.
struct ProblemSetup {
    Mesh mesh;
    KLExpansion field;
    std::unique_ptr<StochasticProblem> problem;
};
ProblemSetup make_problem(const ExperimentConfig& cfg);

/// ‖(ref − approx)/max|ref|‖₂ / √n. Normalizing by the largest magnitude
/// keeps the measure usable for fields that are non-positive everywhere
/// (pressure heads); an identically zero reference is rejected.
double rel_error_mean(const Eigen::VectorXd& ref, const Eigen::VectorXd& approx);
double rel_error_std(const Eigen::VectorXd& ref, const Eigen::VectorXd& approx);

/// Welford mean and standard deviation (population form) over M draws of ξ.
struct MonteCarloResult {
    Eigen::VectorXd mean;
    Eigen::VectorXd std;
    std::size_t samples = 0;
};
using SampleObserver = std::function<void(const Eigen::VectorXd& xi, const Eigen::VectorXd& u)>;
MonteCarloResult mc_reference(const StochasticProblem& problem, std::size_t m, std::uint64_t seed,
                              CostLedger* ledger = nullptr, const SampleObserver& observer = {});

/// A reduced solution: one expansion per subdomain over Partition::closure(s)
/// in that subdomain's η variables. `base` supplies nodes outside every
/// closure (Dirichlet values).
struct ReducedView {
    const Partition* partition = nullptr;
    std::span<const AdaptedBasis> bases;
    std::span<const PCExpansion> pce;
    Eigen::VectorXd base;
};

/// Nodal values of the reduced solution at each row of `xi` (M × d); M × n_nodes.
Eigen::MatrixXd evaluate_reduced(const ReducedView& reduced, const Eigen::MatrixXd& xi);

/// Global mean and std of a reduced solution, owner-gathered.
std::pair<Eigen::VectorXd, Eigen::VectorXd> reduced_moments(const ReducedView& reduced);

/// Monte Carlo estimate of E[(u(x, ξ) − ũ(x, η(ξ)))²] from M shared draws.
Eigen::VectorXd expected_sq_error_field(const PCExpansion& full, const ReducedView& reduced, std::size_t m,
                                        std::uint64_t seed);

/// Several reduced solutions against one full expansion with the same draws;
/// returns n_nodes × n_cases.
Eigen::MatrixXd expected_sq_error_fields(const PCExpansion& full, std::span<const ReducedView> reduced,
                                         std::size_t m, std::uint64_t seed);

/// Linear (1D) or bilinear (2D) interpolation weights at a point.
struct ProbeStencil {
    std::vector<int> nodes;
    std::vector<double> weights;
};
ProbeStencil probe_stencil(const Mesh& mesh, std::span<const double> point);

/// Gaussian kernel density with Silverman's rule-of-thumb bandwidth.
double silverman_bandwidth(std::span<const double> samples);
Eigen::VectorXd kde(std::span<const double> samples, const Eigen::VectorXd& at, double bandwidth);

struct CaseResult {
    std::size_t n_sub = 0;
    std::size_t r = 0;
    double mu_e = 0.0;    // fractions, not percent
    double sigma_e = 0.0;
    double cost_ratio = 0.0;
    CostLedger ledger;    // Gaussian part plus this case's reduced solve
    std::vector<double> outer_residuals;
    Eigen::VectorXd mean, std, eps;
};

struct ExperimentResult {
    Eigen::VectorXd ref_mean, ref_std;
    CostLedger reference_ledger;
    CostLedger gaussian_ledger;
    Eigen::VectorXd input_eigenvalues;
    std::vector<std::vector<Eigen::VectorXd>> subdomain_eigenvalues; // [subdomain-count index][s]
    std::vector<CaseResult> cases;
};

/// Raised by run_experiment; `phase` names the pipeline stage that failed.
class ExperimentError : public std::runtime_error {
public:
    ExperimentError(std::string phase, const std::string& what)
        : std::runtime_error(phase + ": " + what), phase_(std::move(phase)) {}
    const std::string& phase() const noexcept { return phase_; }

private:
    std::string phase_;
};

/// Reference solve, Gaussian part, adapted reduced solves for every
/// (subdomain count, r) pair, metrics and output files under
/// cfg.output_dir. Progress lines go to `log` when given.
ExperimentResult run_experiment(const ExperimentConfig& cfg, std::ostream* log = nullptr);

/// Table of stored results (table.csv plus ledger.json) as aligned text.
std::string render_report(const std::filesystem::path& dir);

} // namespace stochdd
