#include "stochdd/quadrature.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <ostream>

#include <fmt/format.h>

#include "stochdd/error.hpp"

namespace stochdd {

namespace {

constexpr double kMergeTolerance = 1e-12;

std::int64_t binomial(std::int64_t n, std::int64_t k) {
    if (k < 0 || k > n) return 0;
    std::int64_t result = 1;
    for (std::int64_t i = 1; i <= k; ++i) result = result * (n - k + i) / i;
    return result;
}

// Visits every composition of `total` into `parts` positive integers.
template <typename Fn>
void for_each_composition(std::size_t total, std::size_t parts, std::vector<std::size_t>& scratch,
                          std::size_t pos, Fn&& fn) {
    if (pos + 1 == parts) {
        scratch[pos] = total;
        fn(scratch);
        return;
    }
    const std::size_t remaining = parts - pos - 1;
    for (std::size_t v = 1; v + remaining <= total; ++v) {
        scratch[pos] = v;
        for_each_composition(total - v, parts, scratch, pos + 1, fn);
    }
}

} // namespace

QuadratureRule1D gauss_hermite_1d(std::size_t order) {
    detail::require(order >= 1, "gauss_hermite_1d: order must be >= 1");

    // Golub–Welsch on the Jacobi matrix of the probabilists' Hermite recurrence.
    const auto n = static_cast<Eigen::Index>(order);
    Eigen::MatrixXd jacobi = Eigen::MatrixXd::Zero(n, n);
    for (Eigen::Index k = 1; k < n; ++k) {
        jacobi(k, k - 1) = jacobi(k - 1, k) = std::sqrt(static_cast<double>(k));
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(jacobi);
    if (eig.info() != Eigen::Success) throw NumericFailure("gauss_hermite_1d: eigen-decomposition failed");

    QuadratureRule1D rule;
    rule.nodes.resize(order);
    rule.weights.resize(order);
    for (Eigen::Index k = 0; k < n; ++k) {
        rule.nodes[k] = eig.eigenvalues()(k);
        const double v0 = eig.eigenvectors()(0, k);
        rule.weights[k] = v0 * v0;
    }

    // Enforce exact symmetry and normalization.
    for (std::size_t k = 0; k < order / 2; ++k) {
        const std::size_t m = order - 1 - k;
        const double x = 0.5 * (rule.nodes[m] - rule.nodes[k]);
        const double w = 0.5 * (rule.weights[m] + rule.weights[k]);
        rule.nodes[k] = -x;
        rule.nodes[m] = x;
        rule.weights[k] = rule.weights[m] = w;
    }
    if (order % 2 == 1) rule.nodes[order / 2] = 0.0;
    double total = 0.0;
    for (double w : rule.weights) total += w;
    for (double& w : rule.weights) w /= total;
    return rule;
}

SparseGrid smolyak_grid(std::size_t dim, std::size_t level) {
    detail::require(dim >= 1, "smolyak_grid: dim must be >= 1");
    detail::require(level >= 1, "smolyak_grid: level must be >= 1");

    const std::size_t q = dim + level - 1;
    const std::size_t max_order = level; // largest 1D order appearing

    // Canonical ids for distinct 1D node values across all orders, in increasing value.
    std::vector<QuadratureRule1D> rules;
    std::vector<double> values;
    for (std::size_t m = 1; m <= max_order; ++m) {
        rules.push_back(gauss_hermite_1d(m));
        values.insert(values.end(), rules.back().nodes.begin(), rules.back().nodes.end());
    }
    std::sort(values.begin(), values.end());
    std::vector<double> canonical;
    for (double v : values) {
        if (canonical.empty() || v - canonical.back() > kMergeTolerance) canonical.push_back(v);
    }
    auto id_of = [&](double v) {
        auto it = std::lower_bound(canonical.begin(), canonical.end(), v - kMergeTolerance);
        return static_cast<std::uint16_t>(it - canonical.begin());
    };
    std::vector<std::vector<std::uint16_t>> node_ids(max_order);
    for (std::size_t m = 0; m < max_order; ++m) {
        for (double v : rules[m].nodes) node_ids[m].push_back(id_of(v));
    }

    std::map<std::vector<std::uint16_t>, double> merged;
    std::vector<std::size_t> index(dim);
    std::vector<std::uint16_t> key(dim);
    std::vector<std::size_t> digit(dim);

    // Only |i| in [max(d, l), d+l−1] carries a nonzero combination coefficient.
    const std::size_t lowest = std::max(dim, level);
    for (std::size_t total = lowest; total <= q; ++total) {
        const auto sign = ((q - total) % 2 == 0) ? 1.0 : -1.0;
        const double coefficient =
            sign * static_cast<double>(binomial(static_cast<std::int64_t>(dim) - 1,
                                                static_cast<std::int64_t>(q - total)));
        if (coefficient == 0.0) continue;
        for_each_composition(total, dim, index, 0, [&](const std::vector<std::size_t>& orders) {
            // Odometer over the tensor product of 1D rules.
            std::fill(digit.begin(), digit.end(), 0);
            while (true) {
                double w = coefficient;
                for (std::size_t k = 0; k < dim; ++k) {
                    const auto& rule = rules[orders[k] - 1];
                    w *= rule.weights[digit[k]];
                    key[k] = node_ids[orders[k] - 1][digit[k]];
                }
                merged[key] += w;
                std::size_t k = dim;
                while (k > 0) {
                    --k;
                    if (++digit[k] < orders[k]) break;
                    digit[k] = 0;
                    if (k == 0) return;
                }
            }
        });
    }

    SparseGrid grid;
    grid.dim = dim;
    grid.level = level;
    grid.points.resize(static_cast<Eigen::Index>(merged.size()), static_cast<Eigen::Index>(dim));
    grid.weights.resize(static_cast<Eigen::Index>(merged.size()));
    Eigen::Index row = 0;
    for (const auto& [ids, w] : merged) {
        for (std::size_t k = 0; k < dim; ++k) grid.points(row, static_cast<Eigen::Index>(k)) = canonical[ids[k]];
        grid.weights(row) = w;
        ++row;
    }
    return grid;
}

double integrate(const SparseGrid& grid, std::span<const double> values) {
    detail::require(values.size() == grid.size(), "integrate: values length must equal the grid point count");
    double sum = 0.0;
    for (std::size_t q = 0; q < values.size(); ++q) sum += values[q] * grid.weights(static_cast<Eigen::Index>(q));
    return sum;
}

void write_grid_csv(std::ostream& out, const SparseGrid& grid) {
    out << "dim,level\n" << grid.dim << ',' << grid.level << '\n';
    for (Eigen::Index q = 0; q < grid.points.rows(); ++q) {
        for (Eigen::Index k = 0; k < grid.points.cols(); ++k) out << fmt::format("{:.17g},", grid.points(q, k));
        out << fmt::format("{:.17g}\n", grid.weights(q));
    }
}

} // namespace stochdd
