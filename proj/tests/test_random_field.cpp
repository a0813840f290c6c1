#include <cmath>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "stochdd/error.hpp"
#include "stochdd/random_field.hpp"
#include "support/oracles.hpp"

using namespace stochdd;

namespace {

Eigen::MatrixXd line_nodes(std::size_t n, double length) {
    Eigen::MatrixXd x(static_cast<Eigen::Index>(n), 1);
    for (std::size_t i = 0; i < n; ++i) x(static_cast<Eigen::Index>(i), 0) = length * i / (n - 1.0);
    return x;
}

Eigen::VectorXd trapezoid_weights(std::size_t n, double length) {
    const double h = length / (n - 1.0);
    Eigen::VectorXd w = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(n), h);
    w(0) = w(static_cast<Eigen::Index>(n) - 1) = 0.5 * h;
    return w;
}

} // namespace

TEST(Kernel, SymmetricAndDiagonal) {
    CovarianceKernel k{KernelType::SquaredExponential, 2.0, {3.0, 1.5}};
    const std::vector<double> x{1.0, 2.0}, y{-0.5, 4.0};
    EXPECT_EQ(k(x, y), k(y, x));
    EXPECT_EQ(k(x, x), 2.0);
    EXPECT_NEAR(k(x, y), 2.0 * std::exp(-(1.5 * 1.5) / 9.0 - 4.0 / 2.25), 1e-15);
}

TEST(LognormalParams, PublishedSetting) {
    const auto p = lognormal_params(5.0, 2.5);
    EXPECT_NEAR(p.sigma_g, std::sqrt(std::log(1.1)), 1e-15);
    EXPECT_NEAR(p.sigma_g, 0.308723468178765, 1e-14);
    EXPECT_NEAR(p.g0, std::log(5.0 / std::sqrt(1.1)), 1e-15);
    EXPECT_NEAR(p.g0, 1.561782822531938, 1e-14);
}

TEST(LognormalParams, SquaredVariantAndLimits) {
    const auto p = lognormal_params(5.0, 2.5, true);
    EXPECT_NEAR(p.sigma_g, std::sqrt(std::log(1.25)), 1e-15);
    const auto tiny = lognormal_params(1.0, 1e-14);
    EXPECT_LT(tiny.sigma_g, 1e-6);
    EXPECT_LT(std::abs(tiny.g0), 1e-12);
    EXPECT_THROW(lognormal_params(0.0, 1.0), InvalidArgument);
    EXPECT_THROW(lognormal_params(1.0, -1.0), InvalidArgument);
}

TEST(LognormalParams, FromCoefficientOfVariation) {
    // Moment check: E[exp(g)] = exp(g0 + σ²/2), CoV² = exp(σ²) − 1.
    const auto p = lognormal_params_from_cov(0.5458, 0.1);
    EXPECT_NEAR(std::exp(p.g0 + 0.5 * p.sigma_g * p.sigma_g), 0.5458, 1e-14);
    EXPECT_NEAR(std::sqrt(std::exp(p.sigma_g * p.sigma_g) - 1.0), 0.1, 1e-14);
}

TEST(Covariance, ExponentialThreeNodes) {
    const auto x = line_nodes(3, 1.0);
    const auto m = assemble_covariance(x, {KernelType::Exponential, 1.0, {0.7}});
    EXPECT_NEAR(m(0, 1), std::exp(-0.5 / 0.7), 1e-15);
    EXPECT_NEAR(m(0, 2), std::exp(-1.0 / 0.7), 1e-15);
    EXPECT_NEAR(m(1, 2), std::exp(-0.5 / 0.7), 1e-15);
    for (int i = 0; i < 3; ++i) EXPECT_EQ(m(i, i), 1.0);
    EXPECT_TRUE(m.isApprox(m.transpose(), 0.0));
}

TEST(Covariance, CoincidentNodes) {
    Eigen::MatrixXd x(3, 2);
    x << 0, 0, 1, 2, 1, 2;
    const auto m = assemble_covariance(x, {KernelType::SquaredExponential, 1.3, {1.0, 1.0}});
    EXPECT_TRUE((m.row(1).array() == m.row(2).array()).all());
}

TEST(Covariance, LayeredIsBlockDiagonal) {
    const auto x = line_nodes(6, 5.0);
    const std::vector<int> layer{0, 0, 0, 1, 1, 1};
    const auto m = assemble_layered_covariance(
        x, layer, {{KernelType::SquaredExponential, 1.0, {2.0}}, {KernelType::SquaredExponential, 4.0, {1.0}}});
    EXPECT_EQ(m.block(0, 3, 3, 3).cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ(m(0, 0), 1.0);
    EXPECT_EQ(m(5, 5), 4.0);
}

TEST(KL, ExponentialKernelAnalytic) {
    const std::size_t n = 1000;
    const auto x = line_nodes(n, 1.0);
    const auto kl = kl_solve(assemble_covariance(x, {KernelType::Exponential, 1.0, {1.0}}), trapezoid_weights(n, 1.0), 5);
    const auto exact = oracle::exponential_kernel_eigenvalues(1.0, 1.0, 1.0, 5);
    for (int i = 0; i < 5; ++i) EXPECT_NEAR(kl.eigenvalues(i), exact[i], 0.01 * exact[i]) << i;
}

TEST(KL, OrthonormalSortedAndSigned) {
    const std::size_t n = 200;
    const auto x = line_nodes(n, 2.0);
    const auto w = trapezoid_weights(n, 2.0);
    const auto kl = kl_solve(assemble_covariance(x, {KernelType::SquaredExponential, 1.0, {0.5}}), w, 8);
    const Eigen::MatrixXd gram = kl.eigenfunctions * w.asDiagonal() * kl.eigenfunctions.transpose();
    EXPECT_LT((gram - Eigen::MatrixXd::Identity(8, 8)).cwiseAbs().maxCoeff(), 1e-8);
    for (int i = 0; i + 1 < 8; ++i) EXPECT_GE(kl.eigenvalues(i), kl.eigenvalues(i + 1));
    for (int i = 0; i < 8; ++i) {
        Eigen::Index arg;
        kl.eigenfunctions.row(i).cwiseAbs().maxCoeff(&arg);
        EXPECT_GT(kl.eigenfunctions(i, arg), 0.0);
    }
    // Trace bound: Σλ ≤ σ²|D|.
    EXPECT_LE(kl.eigenvalues.sum(), 2.0 * (1.0 + 1e-6));
}

TEST(KL, FullReconstruction) {
    const std::size_t n = 40;
    Eigen::MatrixXd x(static_cast<Eigen::Index>(n), 2);
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(0.0, 3.0);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = u(rng);
    Eigen::VectorXd w(static_cast<Eigen::Index>(n));
    for (Eigen::Index i = 0; i < w.size(); ++i) w(i) = 0.1 + u(rng);
    const auto c = assemble_covariance(x, {KernelType::Exponential, 1.5, {1.0, 2.0}});
    const auto kl = kl_solve(c, w, n);
    const Eigen::MatrixXd rec = kl.eigenfunctions.transpose() * kl.eigenvalues.asDiagonal() * kl.eigenfunctions;
    EXPECT_LT((rec - c).norm() / c.norm(), 1e-6);
}

TEST(KL, MonotoneTruncationEnergy) {
    const std::size_t n = 100;
    const auto x = line_nodes(n, 1.0);
    const auto c = assemble_covariance(x, {KernelType::SquaredExponential, 1.0, {0.3}});
    const auto w = trapezoid_weights(n, 1.0);
    double prev = 0.0;
    for (std::size_t d = 1; d <= 6; ++d) {
        const double e = kl_solve(c, w, d).eigenvalues.sum();
        EXPECT_GE(e, prev);
        prev = e;
    }
}

TEST(KL, Preconditions) {
    const Eigen::MatrixXd c = Eigen::MatrixXd::Identity(3, 3);
    EXPECT_THROW(kl_solve(c, Eigen::VectorXd::Ones(3), 4), InvalidArgument);
    EXPECT_THROW(kl_solve(c, Eigen::VectorXd::Zero(3), 1), InvalidArgument);
}

TEST(Field, Evaluation) {
    KLExpansion kl;
    kl.mean = Eigen::VectorXd::Constant(4, 0.3);
    kl.eigenvalues = Eigen::VectorXd::Constant(1, 0.49);
    kl.eigenfunctions = Eigen::MatrixXd(1, 4);
    kl.eigenfunctions << 1.0, -2.0, 0.5, 0.0;
    const std::vector<double> zero{0.0}, one{1.0};
    const auto a0 = evaluate_field(kl, zero);
    for (int i = 0; i < 4; ++i) EXPECT_NEAR(a0(i), std::exp(0.3), 1e-15);
    const auto a1 = evaluate_field(kl, one);
    for (int i = 0; i < 4; ++i) EXPECT_NEAR(std::log(a1(i)) - 0.3, 0.7 * kl.eigenfunctions(0, i), 1e-12);
    const std::vector<double> bad{1.0, 2.0};
    EXPECT_THROW(evaluate_field(kl, bad), InvalidArgument);

    kl.eigenvalues(0) = 0.0;
    const std::vector<double> big{50.0};
    const auto flat = evaluate_field(kl, big);
    for (int i = 0; i < 4; ++i) EXPECT_EQ(flat(i), std::exp(0.3));
}

TEST(Field, PositiveForExtremeDraws) {
    const std::size_t n = 50;
    const auto x = line_nodes(n, 1.0);
    auto kl = kl_solve(assemble_covariance(x, {KernelType::SquaredExponential, 0.5, {0.2}}), trapezoid_weights(n, 1.0), 5);
    kl.mean.setConstant(1.0);
    const std::vector<double> xi{8.0, -8.0, 8.0, -8.0, 8.0};
    EXPECT_GT(evaluate_field(kl, xi).minCoeff(), 0.0);
}
