#include "stochdd/random_field.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include <fmt/format.h>
#include <lapacke.h>

#include "stochdd/error.hpp"

namespace stochdd {

double CovarianceKernel::operator()(std::span<const double> x, std::span<const double> y) const {
    detail::require(x.size() == y.size() && x.size() == lengths.size(),
                    "CovarianceKernel: point dimension must match the number of correlation lengths");
    double r2 = 0.0;
    for (std::size_t k = 0; k < x.size(); ++k) {
        const double t = (x[k] - y[k]) / lengths[k];
        r2 += t * t;
    }
    return type == KernelType::SquaredExponential ? variance * std::exp(-r2) : variance * std::exp(-std::sqrt(r2));
}

LogNormalParams lognormal_params(double a0, double sigma_a, bool square_sigma) {
    detail::require(a0 > 0.0 && sigma_a > 0.0, "lognormal_params: arguments must be positive");
    const double s = square_sigma ? sigma_a * sigma_a : sigma_a;
    const double ratio = 1.0 + s / (a0 * a0);
    return {std::log(a0 / std::sqrt(ratio)), std::sqrt(std::log(ratio))};
}

LogNormalParams lognormal_params_from_cov(double mean, double cov) {
    detail::require(mean > 0.0 && cov > 0.0, "lognormal_params_from_cov: arguments must be positive");
    const double var_g = std::log1p(cov * cov);
    return {std::log(mean) - 0.5 * var_g, std::sqrt(var_g)};
}

namespace {

void check_kernel(const CovarianceKernel& kernel, Eigen::Index spatial_dim) {
    detail::require(kernel.variance > 0.0, "covariance kernel: variance must be positive");
    detail::require(static_cast<Eigen::Index>(kernel.lengths.size()) == spatial_dim,
                    "covariance kernel: one correlation length per spatial axis is required");
    for (double l : kernel.lengths) detail::require(l > 0.0, "covariance kernel: correlation lengths must be positive");
}

} // namespace

Eigen::MatrixXd assemble_covariance(const Eigen::MatrixXd& coords, const CovarianceKernel& kernel) {
    check_kernel(kernel, coords.cols());
    const auto n = coords.rows();
    Eigen::MatrixXd m(n, n);
    std::vector<double> xi(static_cast<std::size_t>(coords.cols())), xj(xi.size());
    for (Eigen::Index j = 0; j < n; ++j) {
        for (Eigen::Index k = 0; k < coords.cols(); ++k) xj[k] = coords(j, k);
        for (Eigen::Index i = j; i < n; ++i) {
            for (Eigen::Index k = 0; k < coords.cols(); ++k) xi[k] = coords(i, k);
            m(i, j) = m(j, i) = kernel(xi, xj);
        }
    }
    return m;
}

Eigen::MatrixXd assemble_layered_covariance(const Eigen::MatrixXd& coords, std::span<const int> layer,
                                            const std::vector<CovarianceKernel>& kernels) {
    detail::require(static_cast<Eigen::Index>(layer.size()) == coords.rows(),
                    "assemble_layered_covariance: one layer id per point is required");
    for (const auto& k : kernels) check_kernel(k, coords.cols());
    const auto n = coords.rows();
    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(n, n);
    std::vector<double> xi(static_cast<std::size_t>(coords.cols())), xj(xi.size());
    for (Eigen::Index j = 0; j < n; ++j) {
        const int lj = layer[static_cast<std::size_t>(j)];
        detail::require(lj >= 0 && static_cast<std::size_t>(lj) < kernels.size(),
                        "assemble_layered_covariance: layer id out of range");
        for (Eigen::Index k = 0; k < coords.cols(); ++k) xj[k] = coords(j, k);
        for (Eigen::Index i = j; i < n; ++i) {
            if (layer[static_cast<std::size_t>(i)] != lj) continue;
            for (Eigen::Index k = 0; k < coords.cols(); ++k) xi[k] = coords(i, k);
            m(i, j) = m(j, i) = kernels[static_cast<std::size_t>(lj)](xi, xj);
        }
    }
    return m;
}

KLExpansion kl_solve(const Eigen::MatrixXd& cov, const Eigen::VectorXd& node_weights, std::size_t d) {
    const auto n = cov.rows();
    detail::require(cov.cols() == n, "kl_solve: covariance must be square");
    detail::require(node_weights.size() == n, "kl_solve: one weight per dof is required");
    detail::require(d >= 1 && static_cast<Eigen::Index>(d) <= n, "kl_solve: need 1 <= d <= n_dof");
    detail::require((node_weights.array() > 0.0).all(), "kl_solve: node weights must be positive");

    // Symmetric form B = W^{1/2} C W^{1/2}; g = W^{-1/2} y for eigenvectors y of B.
    const Eigen::VectorXd sw = node_weights.cwiseSqrt();
    Eigen::MatrixXd b = sw.asDiagonal() * cov * sw.asDiagonal();

    const auto di = static_cast<lapack_int>(d);
    const auto ni = static_cast<lapack_int>(n);
    lapack_int found = 0;
    Eigen::VectorXd w(n);
    Eigen::MatrixXd z(n, static_cast<Eigen::Index>(d));
    std::vector<lapack_int> support(2 * d);
    const lapack_int info = LAPACKE_dsyevr(LAPACK_COL_MAJOR, 'V', 'I', 'L', ni, b.data(), ni, 0.0, 0.0, ni - di + 1,
                                           ni, 0.0, &found, w.data(), z.data(), ni, support.data());
    if (info != 0 || found != di) {
        throw NumericFailure(fmt::format("kl_solve: eigensolver failed (info={}, found={})", info, found));
    }

    KLExpansion kl;
    kl.mean = Eigen::VectorXd::Zero(n);
    kl.eigenvalues.resize(di);
    kl.eigenfunctions.resize(di, n);
    // LAPACK returns ascending order; reverse so λ_1 is the largest.
    for (lapack_int k = 0; k < di; ++k) {
        const lapack_int src = di - 1 - k;
        kl.eigenvalues(k) = std::max(w(src), 0.0);
        Eigen::VectorXd g = z.col(src).cwiseQuotient(sw);
        Eigen::Index arg = 0;
        g.cwiseAbs().maxCoeff(&arg);
        if (g(arg) < 0.0) g = -g;
        kl.eigenfunctions.row(k) = g.transpose();
    }
    return kl;
}

Eigen::VectorXd evaluate_log_field(const KLExpansion& kl, std::span<const double> xi) {
    detail::require(xi.size() == kl.dim(), "evaluate_field: xi length must equal the KL dimension");
    Eigen::VectorXd g = kl.mean;
    for (std::size_t i = 0; i < xi.size(); ++i) {
        const auto k = static_cast<Eigen::Index>(i);
        g += (std::sqrt(kl.eigenvalues(k)) * xi[i]) * kl.eigenfunctions.row(k).transpose();
    }
    return g;
}

Eigen::VectorXd evaluate_field(const KLExpansion& kl, std::span<const double> xi) {
    return evaluate_log_field(kl, xi).array().exp().matrix();
}

void write_eigenvalues_csv(std::ostream& out, const Eigen::VectorXd& eigenvalues) {
    out << "index,eigenvalue\n";
    for (Eigen::Index i = 0; i < eigenvalues.size(); ++i) out << fmt::format("{},{:.17g}\n", i + 1, eigenvalues(i));
}

void write_matrix_csv(std::ostream& out, const Eigen::MatrixXd& m) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
            if (j > 0) out << ',';
            out << fmt::format("{:.17g}", m(i, j));
        }
        out << '\n';
    }
}

} // namespace stochdd
