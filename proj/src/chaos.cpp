#include "stochdd/chaos.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>

#include <fmt/format.h>
#include <json.hpp>

#include "stochdd/error.hpp"

namespace stochdd {

namespace {

void append_degree(std::size_t dim, unsigned degree, std::vector<MultiIndex>& out) {
    // Descending lexicographic enumeration of exponent tuples of a fixed total degree.
    MultiIndex current(dim, 0);
    std::function<void(std::size_t, unsigned)> rec = [&](std::size_t k, unsigned remaining) {
        if (k + 1 == dim) {
            current[k] = remaining;
            out.push_back(current);
            return;
        }
        for (unsigned v = remaining + 1; v-- > 0;) {
            current[k] = v;
            rec(k + 1, remaining - v);
        }
    };
    rec(0, degree);
}

// He_n(x)/sqrt(n!) for n = 0..max_degree, via the three-term recurrence.
void normalized_hermite(double x, unsigned max_degree, double* out) {
    out[0] = 1.0;
    if (max_degree == 0) return;
    out[1] = x;
    // Normalized recurrence: h_{n+1} = (x h_n − √n h_{n−1}) / √(n+1).
    for (unsigned n = 1; n < max_degree; ++n) {
        out[n + 1] = (x * out[n] - std::sqrt(static_cast<double>(n)) * out[n - 1]) /
                     std::sqrt(static_cast<double>(n + 1));
    }
}

} // namespace

MultiIndexSet::MultiIndexSet(std::size_t dim, unsigned order) : dim_(dim), order_(order) {
    detail::require(dim >= 1, "multi_index_set: dim must be >= 1");
    for (unsigned p = 0; p <= order; ++p) append_degree(dim, p, indices_);
}

MultiIndexSet MultiIndexSet::from_indices(std::size_t dim, unsigned order, std::vector<MultiIndex> indices) {
    MultiIndexSet set;
    set.dim_ = dim;
    set.order_ = order;
    for (const auto& idx : indices) {
        detail::require(idx.size() == dim, "MultiIndexSet: index length does not match dim");
    }
    set.indices_ = std::move(indices);
    return set;
}

MultiIndexSet multi_index_set(std::size_t dim, unsigned order) { return MultiIndexSet(dim, order); }

double hermite_eval(const MultiIndex& index, std::span<const double> point) {
    detail::require(index.size() == point.size(), "hermite_eval: index and point lengths differ");
    double value = 1.0;
    std::vector<double> table;
    for (std::size_t k = 0; k < index.size(); ++k) {
        if (index[k] == 0) continue;
        table.resize(index[k] + 1);
        normalized_hermite(point[k], index[k], table.data());
        value *= table[index[k]];
    }
    return value;
}

Eigen::MatrixXd basis_matrix(const MultiIndexSet& basis, const Eigen::MatrixXd& points) {
    detail::require(static_cast<std::size_t>(points.cols()) == basis.dim(),
                    "basis_matrix: point dimension does not match the basis");
    const auto m = points.rows();
    const auto d = static_cast<Eigen::Index>(basis.dim());
    const unsigned p = basis.order();
    Eigen::MatrixXd psi(m, static_cast<Eigen::Index>(basis.size()));
    std::vector<double> table(static_cast<std::size_t>(d) * (p + 1));
    for (Eigen::Index q = 0; q < m; ++q) {
        for (Eigen::Index k = 0; k < d; ++k) normalized_hermite(points(q, k), p, &table[k * (p + 1)]);
        for (std::size_t i = 0; i < basis.size(); ++i) {
            double v = 1.0;
            const auto& idx = basis[i];
            for (Eigen::Index k = 0; k < d; ++k) {
                if (idx[k] != 0) v *= table[k * (p + 1) + idx[k]];
            }
            psi(q, static_cast<Eigen::Index>(i)) = v;
        }
    }
    return psi;
}

Eigen::MatrixXd nisp_coefficients(const SparseGrid& grid, const Eigen::MatrixXd& samples,
                                  const MultiIndexSet& basis) {
    detail::require(grid.dim == basis.dim(), "nisp_project: grid and basis dimensions differ");
    detail::require(static_cast<std::size_t>(samples.rows()) == grid.size(),
                    "nisp_project: sample rows must equal the grid point count");
    const Eigen::MatrixXd psi = basis_matrix(basis, grid.points);
    return (psi.transpose() * grid.weights.asDiagonal()) * samples;
}

PCExpansion nisp_project(const SparseGrid& grid, const Eigen::MatrixXd& samples, const MultiIndexSet& basis) {
    PCExpansion pce;
    pce.basis = basis;
    pce.coefficients = nisp_coefficients(grid, samples, basis);
    return pce;
}

NispAccumulator::NispAccumulator(const SparseGrid& grid, const MultiIndexSet& basis, std::size_t n_dof)
    : grid_(&grid), basis_(basis) {
    detail::require(grid.dim == basis.dim(), "NispAccumulator: grid and basis dimensions differ");
    psi_ = basis_matrix(basis, grid.points);
    coefficients_ = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(basis.size()), static_cast<Eigen::Index>(n_dof));
}

void NispAccumulator::add(std::size_t q, const Eigen::VectorXd& sample) {
    detail::require(q < grid_->size(), "NispAccumulator: point index out of range");
    detail::require(sample.size() == coefficients_.cols(), "NispAccumulator: sample length mismatch");
    const auto row = static_cast<Eigen::Index>(q);
    const double w = grid_->weights(row);
    coefficients_.noalias() += (w * psi_.row(row).transpose()) * sample.transpose();
}

PCExpansion NispAccumulator::finish(Eigen::MatrixXd dof_coords) && {
    PCExpansion pce;
    pce.basis = std::move(basis_);
    pce.coefficients = std::move(coefficients_);
    pce.dof_coords = std::move(dof_coords);
    return pce;
}

Eigen::VectorXd pce_mean(const PCExpansion& pce) { return pce.coefficients.row(0).transpose(); }

Eigen::VectorXd pce_std(const PCExpansion& pce) {
    const auto n = pce.coefficients.rows();
    if (n <= 1) return Eigen::VectorXd::Zero(pce.coefficients.cols());
    return pce.coefficients.bottomRows(n - 1).colwise().squaredNorm().cwiseSqrt().transpose();
}

Eigen::MatrixXd pce_sample(const PCExpansion& pce, const Eigen::MatrixXd& xi_draws) {
    detail::require(static_cast<std::size_t>(xi_draws.cols()) == pce.basis.dim(),
                    "pce_sample: draw dimension does not match the basis");
    return basis_matrix(pce.basis, xi_draws) * pce.coefficients;
}

void write_pce(std::ostream& out, const PCExpansion& pce) {
    nlohmann::json header;
    header["dim"] = pce.basis.dim();
    header["order"] = pce.basis.order();
    header["n_dof"] = pce.n_dof();
    header["indices"] = pce.basis.indices();
    auto coords = nlohmann::json::array();
    for (Eigen::Index i = 0; i < pce.dof_coords.rows(); ++i) {
        auto row = nlohmann::json::array();
        for (Eigen::Index k = 0; k < pce.dof_coords.cols(); ++k) row.push_back(pce.dof_coords(i, k));
        coords.push_back(std::move(row));
    }
    header["dof_coords"] = std::move(coords);
    out << header.dump() << '\n';
    for (Eigen::Index i = 0; i < pce.coefficients.rows(); ++i) {
        for (Eigen::Index j = 0; j < pce.coefficients.cols(); ++j) {
            if (j > 0) out << ',';
            out << fmt::format("{:.17g}", pce.coefficients(i, j));
        }
        out << '\n';
    }
}

PCExpansion read_pce(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) throw InvalidArgument("read_pce: missing header line");
    const auto header = nlohmann::json::parse(line);
    const auto dim = header.at("dim").get<std::size_t>();
    const auto order = header.at("order").get<unsigned>();
    const auto n_dof = header.at("n_dof").get<std::size_t>();
    auto indices = header.at("indices").get<std::vector<MultiIndex>>();

    PCExpansion pce;
    pce.basis = MultiIndexSet::from_indices(dim, order, std::move(indices));
    const auto& coords = header.at("dof_coords");
    if (!coords.empty()) {
        pce.dof_coords.resize(static_cast<Eigen::Index>(coords.size()), static_cast<Eigen::Index>(coords[0].size()));
        for (std::size_t i = 0; i < coords.size(); ++i) {
            for (std::size_t k = 0; k < coords[i].size(); ++k) {
                pce.dof_coords(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = coords[i][k].get<double>();
            }
        }
    }
    pce.coefficients.resize(static_cast<Eigen::Index>(pce.basis.size()), static_cast<Eigen::Index>(n_dof));
    for (Eigen::Index i = 0; i < pce.coefficients.rows(); ++i) {
        if (!std::getline(in, line)) throw InvalidArgument("read_pce: truncated coefficient block");
        std::istringstream row(line);
        std::string cell;
        for (Eigen::Index j = 0; j < pce.coefficients.cols(); ++j) {
            if (!std::getline(row, cell, ',')) throw InvalidArgument("read_pce: short coefficient row");
            pce.coefficients(i, j) = std::stod(cell);
        }
    }
    return pce;
}

} // namespace stochdd
