#pragma once

#include <cstddef>
#include <iosfwd>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace stochdd {

enum class KernelType { SquaredExponential, Exponential };

/// Stationary covariance kernel. `lengths` holds one correlation length per
/// spatial axis.
///   squared-exponential: σ² exp(−Σ_k (x_k−y_k)²/l_k²)
///   exponential:         σ² exp(−(Σ_k (x_k−y_k)²/l_k²)^{1/2})
struct CovarianceKernel {
    KernelType type = KernelType::SquaredExponential;
    double variance = 1.0;
    std::vector<double> lengths{1.0};

    double operator()(std::span<const double> x, std::span<const double> y) const;
};

struct LogNormalParams {
    double g0 = 0.0;
    double sigma_g = 0.0;
};

/// Gaussian parameters of a log-normal coefficient with mean a0 and spread
/// sigma_a, in the form σ_g = √ln(1 + s/a0²), g0 = ln(a0/√(1 + s/a0²)).
/// By default s = sigma_a; with `square_sigma` set, s = sigma_a² (the
/// moment-matching identity for a standard deviation sigma_a).
LogNormalParams lognormal_params(double a0, double sigma_a, bool square_sigma = false);

/// Gaussian parameters for a log-normal coefficient with coefficient of variation `cov`:
/// σ_g² = ln(1 + cov²), g0 = ln(mean) − σ_g²/2.
LogNormalParams lognormal_params_from_cov(double mean, double cov);

/// Dense covariance matrix M_ij = C(x_i, x_j); `coords` is n × spatial dim.
Eigen::MatrixXd assemble_covariance(const Eigen::MatrixXd& coords, const CovarianceKernel& kernel);

/// Block-diagonal covariance for piecewise-stationary fields: entries couple
/// only points with the same layer id; layer k uses kernels[k].
Eigen::MatrixXd assemble_layered_covariance(const Eigen::MatrixXd& coords, std::span<const int> layer,
                                            const std::vector<CovarianceKernel>& kernels);

/// Truncated KL expansion g(x, ξ) = g_0(x) + Σ_i √λ_i g_i(x) ξ_i.
struct KLExpansion {
    Eigen::VectorXd mean;           // g_0 at each dof
    Eigen::VectorXd eigenvalues;    // λ_1 ≥ … ≥ λ_d
    Eigen::MatrixXd eigenfunctions; // d × n_dof, orthonormal in the weighted inner product

    std::size_t dim() const noexcept { return static_cast<std::size_t>(eigenvalues.size()); }
    std::size_t n_dof() const noexcept { return static_cast<std::size_t>(eigenfunctions.cols()); }
};

/// Top-d eigenpairs of the weighted (Nyström) problem Σ_j C_ij w_j g(x_j) = λ g(x_i).
/// Eigenfunctions satisfy Σ_k w_k g_i(x_k) g_j(x_k) = δ_ij and have their
/// largest-magnitude entry positive. Round-off negative eigenvalues are
/// clamped to zero. The returned mean is zero.
KLExpansion kl_solve(const Eigen::MatrixXd& cov, const Eigen::VectorXd& node_weights, std::size_t d);

/// g_0 + Σ_i √λ_i g_i ξ_i.
Eigen::VectorXd evaluate_log_field(const KLExpansion& kl, std::span<const double> xi);

/// exp of the log field; strictly positive for finite ξ.
Eigen::VectorXd evaluate_field(const KLExpansion& kl, std::span<const double> xi);

/// Eigenvalue CSV: header `index,eigenvalue`, one row per mode.
void write_eigenvalues_csv(std::ostream& out, const Eigen::VectorXd& eigenvalues);

/// Eigenfunction CSV: one row per mode, one column per dof.
void write_matrix_csv(std::ostream& out, const Eigen::MatrixXd& m);

} // namespace stochdd
