#include <cmath>
#include <random>
#include <sstream>
#include <vector>

#include <gtest/gtest.h>

#include "stochdd/chaos.hpp"
#include "stochdd/error.hpp"

using namespace stochdd;

namespace {

// Independent oracle: explicit probabilists' Hermite polynomials up to degree 4.
double he_explicit(unsigned n, double x) {
    switch (n) {
    case 0: return 1.0;
    case 1: return x;
    case 2: return x * x - 1.0;
    case 3: return x * x * x - 3.0 * x;
    case 4: return x * x * x * x - 6.0 * x * x + 3.0;
    default: ADD_FAILURE() << "degree too high for oracle"; return 0.0;
    }
}

double factorial(unsigned n) { return n <= 1 ? 1.0 : n * factorial(n - 1); }

unsigned binomial(unsigned n, unsigned k) {
    unsigned long long r = 1;
    for (unsigned i = 1; i <= k; ++i) r = r * (n - k + i) / i;
    return static_cast<unsigned>(r);
}

} // namespace

TEST(MultiIndexSet, CountFormula) {
    EXPECT_EQ(multi_index_set(10, 3).nonzero_count(), 285u);
    for (unsigned d = 1; d <= 6; ++d) {
        for (unsigned p = 0; p <= 4; ++p) {
            EXPECT_EQ(multi_index_set(d, p).nonzero_count(), binomial(d + p, p) - 1u);
        }
    }
}

TEST(MultiIndexSet, SmallCases) {
    const auto s1 = multi_index_set(1, 1);
    ASSERT_EQ(s1.size(), 2u);
    EXPECT_EQ(s1[0], MultiIndex({0}));
    EXPECT_EQ(s1[1], MultiIndex({1}));

    const auto s2 = multi_index_set(2, 2);
    const std::vector<MultiIndex> expected{{0, 0}, {1, 0}, {0, 1}, {2, 0}, {1, 1}, {0, 2}};
    EXPECT_EQ(s2.indices(), expected);
}

TEST(MultiIndexSet, GradedAndUnique) {
    const auto s = multi_index_set(4, 3);
    for (std::size_t i = 1; i < s.size(); ++i) {
        unsigned a = 0, b = 0;
        for (auto v : s[i - 1]) a += v;
        for (auto v : s[i]) b += v;
        EXPECT_LE(a, b);
        if (a == b) EXPECT_GT(s[i - 1], s[i]);
    }
}

TEST(HermiteEval, Examples) {
    const std::vector<double> p3(3, 0.7);
    EXPECT_EQ(hermite_eval({0, 0, 0}, p3), 1.0);
    const std::vector<double> zero{0.0};
    EXPECT_NEAR(hermite_eval({2}, zero), -0.7071067811865476, 1e-15);
    const std::vector<double> p{2.0, 3.0};
    EXPECT_NEAR(hermite_eval({1, 1}, p), 6.0, 1e-14);
}

TEST(HermiteEval, MatchesExplicitPolynomials) {
    std::mt19937_64 rng(7);
    std::normal_distribution<double> nd;
    const auto set = multi_index_set(3, 4);
    for (int t = 0; t < 20; ++t) {
        std::vector<double> x{nd(rng), nd(rng), nd(rng)};
        for (const auto& idx : set.indices()) {
            double oracle = 1.0;
            for (std::size_t k = 0; k < 3; ++k) oracle *= he_explicit(idx[k], x[k]) / std::sqrt(factorial(idx[k]));
            EXPECT_NEAR(hermite_eval(idx, x), oracle, 1e-12 * std::max(1.0, std::abs(oracle)));
        }
    }
}

TEST(HermiteEval, LengthMismatch) {
    const std::vector<double> x{1.0};
    EXPECT_THROW(hermite_eval({1, 0}, x), InvalidArgument);
}

TEST(BasisMatrix, AgreesWithPointwise) {
    const auto set = multi_index_set(2, 3);
    Eigen::MatrixXd pts(3, 2);
    pts << 0.1, -0.4, 1.3, 2.2, -0.9, 0.0;
    const auto psi = basis_matrix(set, pts);
    for (Eigen::Index q = 0; q < 3; ++q) {
        const std::vector<double> x{pts(q, 0), pts(q, 1)};
        for (std::size_t i = 0; i < set.size(); ++i) {
            EXPECT_NEAR(psi(q, static_cast<Eigen::Index>(i)), hermite_eval(set[i], x), 1e-14);
        }
    }
}

TEST(Gram, IdentityOnExactGrid) {
    // Level p+1 integrates every product ψ_iψ_j with total degree ≤ 2p.
    for (unsigned d = 1; d <= 3; ++d) {
        for (unsigned p = 0; p <= 3; ++p) {
            const auto grid = smolyak_grid(d, p + 1);
            const auto set = multi_index_set(d, p);
            const auto psi = basis_matrix(set, grid.points);
            const Eigen::MatrixXd gram = psi.transpose() * grid.weights.asDiagonal() * psi;
            const auto n = static_cast<Eigen::Index>(set.size());
            EXPECT_LT((gram - Eigen::MatrixXd::Identity(n, n)).cwiseAbs().maxCoeff(), 1e-9) << d << "," << p;
        }
    }
}

TEST(Nisp, UnitVectorRecovery) {
    const auto grid = smolyak_grid(3, 3);
    const auto set = multi_index_set(3, 2);
    const auto psi = basis_matrix(set, grid.points);
    for (Eigen::Index k = 0; k < psi.cols(); ++k) {
        const auto pce = nisp_project(grid, psi.col(k), set);
        Eigen::VectorXd e = Eigen::VectorXd::Zero(psi.cols());
        e(k) = 1.0;
        EXPECT_LT((pce.coefficients.col(0) - e).cwiseAbs().maxCoeff(), 1e-10);
    }
}

TEST(Nisp, ConstantAndLinear) {
    const auto grid = smolyak_grid(2, 2);
    const auto set = multi_index_set(2, 1);
    Eigen::MatrixXd c = Eigen::MatrixXd::Constant(static_cast<Eigen::Index>(grid.size()), 1, 4.5);
    const auto pc = nisp_project(grid, c, set);
    EXPECT_NEAR(pc.coefficients(0, 0), 4.5, 1e-12);
    EXPECT_NEAR(pc.coefficients(1, 0), 0.0, 1e-12);
    EXPECT_NEAR(pc.coefficients(2, 0), 0.0, 1e-12);

    Eigen::MatrixXd lin = (3.0 + 2.0 * grid.points.col(0).array()).matrix();
    const auto pl = nisp_project(grid, lin, set);
    EXPECT_NEAR(pl.coefficients(0, 0), 3.0, 1e-12);
    EXPECT_NEAR(pl.coefficients(1, 0), 2.0, 1e-12);
    EXPECT_NEAR(pl.coefficients(2, 0), 0.0, 1e-12);
}

TEST(Nisp, DimensionMismatch) {
    const auto grid = smolyak_grid(2, 2);
    EXPECT_THROW(nisp_project(grid, Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(grid.size()), 1), multi_index_set(3, 1)),
                 InvalidArgument);
    EXPECT_THROW(nisp_project(grid, Eigen::MatrixXd::Zero(3, 1), multi_index_set(2, 1)), InvalidArgument);
}

TEST(Nisp, Linearity) {
    const auto grid = smolyak_grid(3, 3);
    const auto set = multi_index_set(3, 2);
    std::mt19937_64 rng(3);
    std::normal_distribution<double> nd;
    Eigen::MatrixXd s1(static_cast<Eigen::Index>(grid.size()), 4), s2(static_cast<Eigen::Index>(grid.size()), 4);
    for (Eigen::Index i = 0; i < s1.size(); ++i) {
        s1.data()[i] = nd(rng);
        s2.data()[i] = nd(rng);
    }
    const auto lhs = nisp_project(grid, 1.5 * s1 - 0.25 * s2, set).coefficients;
    const Eigen::MatrixXd rhs = 1.5 * nisp_project(grid, s1, set).coefficients - 0.25 * nisp_project(grid, s2, set).coefficients;
    EXPECT_LT((lhs - rhs).cwiseAbs().maxCoeff(), 1e-13);
}

TEST(Nisp, SampleRoundTrip) {
    const auto grid = smolyak_grid(3, 4);
    const auto set = multi_index_set(3, 3);
    std::mt19937_64 rng(11);
    std::normal_distribution<double> nd;
    PCExpansion pce;
    pce.basis = set;
    pce.coefficients.resize(static_cast<Eigen::Index>(set.size()), 5);
    for (Eigen::Index i = 0; i < pce.coefficients.size(); ++i) pce.coefficients.data()[i] = nd(rng);
    const auto samples = pce_sample(pce, grid.points);
    const auto back = nisp_project(grid, samples, set);
    EXPECT_LT((back.coefficients - pce.coefficients).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Nisp, AccumulatorMatchesBatch) {
    const auto grid = smolyak_grid(2, 3);
    const auto set = multi_index_set(2, 2);
    Eigen::MatrixXd s(static_cast<Eigen::Index>(grid.size()), 3);
    for (Eigen::Index q = 0; q < s.rows(); ++q) {
        s(q, 0) = std::exp(grid.points(q, 0));
        s(q, 1) = grid.points(q, 1) * grid.points(q, 0);
        s(q, 2) = 1.0;
    }
    NispAccumulator acc(grid, set, 3);
    for (std::size_t q = 0; q < grid.size(); ++q) acc.add(q, s.row(static_cast<Eigen::Index>(q)).transpose());
    const auto a = std::move(acc).finish();
    const auto b = nisp_project(grid, s, set);
    EXPECT_LT((a.coefficients - b.coefficients).cwiseAbs().maxCoeff(), 1e-13);
}

TEST(Moments, MeanAndStd) {
    PCExpansion pce;
    pce.basis = multi_index_set(2, 1);
    pce.coefficients.resize(3, 2);
    pce.coefficients << 5, 0, 0, 3, 0, 4;
    const auto m = pce_mean(pce);
    const auto s = pce_std(pce);
    EXPECT_EQ(m(0), 5.0);
    EXPECT_EQ(s(0), 0.0);
    EXPECT_NEAR(s(1), 5.0, 1e-15);
}

TEST(Moments, MonteCarloAgreement) {
    PCExpansion pce;
    pce.basis = multi_index_set(2, 2);
    pce.coefficients.resize(6, 1);
    pce.coefficients << 1.0, 0.5, -0.3, 0.2, 0.1, -0.4;
    const int m = 100000;
    std::mt19937_64 rng(2024);
    std::normal_distribution<double> nd;
    Eigen::MatrixXd xi(m, 2);
    for (Eigen::Index i = 0; i < xi.size(); ++i) xi.data()[i] = nd(rng);
    const Eigen::VectorXd y = pce_sample(pce, xi).col(0);
    const double mean = y.mean();
    const double var = (y.array() - mean).square().sum() / (m - 1);
    const double sd = pce_std(pce)(0);
    EXPECT_NEAR(mean, pce_mean(pce)(0), 3.0 * sd / std::sqrt(m));
    // Var of the sample variance needs the fourth moment; a 5% band is wide enough for 1e5 draws.
    EXPECT_NEAR(var, sd * sd, 0.05 * sd * sd);
}

TEST(Sample, Examples) {
    PCExpansion pce;
    pce.basis = multi_index_set(3, 1);
    pce.coefficients.resize(4, 1);
    pce.coefficients << 3, 2, 0, 0;
    Eigen::MatrixXd x(2, 3);
    x << 0, 0, 0, 1, 0.4, -2;
    const auto y = pce_sample(pce, x);
    EXPECT_EQ(y(0, 0), 3.0);
    EXPECT_NEAR(y(1, 0), 5.0, 1e-15);
    EXPECT_THROW(pce_sample(pce, Eigen::MatrixXd::Zero(1, 2)), InvalidArgument);
}

TEST(Serialization, BitExactRoundTrip) {
    PCExpansion pce;
    pce.basis = multi_index_set(3, 2);
    pce.coefficients.resize(static_cast<Eigen::Index>(pce.basis.size()), 4);
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(-1e3, 1e3);
    for (Eigen::Index i = 0; i < pce.coefficients.size(); ++i) pce.coefficients.data()[i] = u(rng) / 3.0;
    pce.coefficients(0, 0) = 1e-300;
    pce.coefficients(1, 1) = -0.0;
    pce.dof_coords.resize(4, 1);
    pce.dof_coords << 0.0, 0.1, 0.2, 1.0 / 3.0;
    std::stringstream ss;
    write_pce(ss, pce);
    const auto back = read_pce(ss);
    EXPECT_EQ(back.basis.indices(), pce.basis.indices());
    EXPECT_EQ(back.basis.order(), 2u);
    EXPECT_TRUE((back.coefficients.array() == pce.coefficients.array()).all());
    EXPECT_TRUE((back.dof_coords.array() == pce.dof_coords.array()).all());
}
