#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <mutex>
#include <span>
#include <string_view>

namespace stochdd {

/// Flop model of a dense LU solve: (2/3)n³ + 2n².
double flops_lu(std::size_t n);

/// Exact integer 3·flops_lu(n) = 2n³ + 6n², used for bit-exact accumulation.
std::uint64_t flops_lu_x3(std::size_t n);

/// Q_ref · flops_lu(n).
double cost_reference(std::size_t q_ref, std::size_t n);

/// Q_η · Σ_s (flops_lu(n_I^s) + flops_lu(n_Γ)); n_Γ = 0 contributes nothing.
double cost_dd(std::size_t q_eta, std::span<const std::size_t> interior_sizes, std::size_t n_gamma);

/// Flops of the inter-basis projection of Schur matrices and vectors:
/// N_D{(N_D−1)QN(2n_Γ²−1) + N_D Q n_Γ²} + N_D{(N_D−1)QN(2n_Γ−1) + N_D Q n_Γ}.
double cost_projection(std::size_t n_d, std::size_t q_eta, std::size_t n_terms, std::size_t n_gamma);

/// Integer form of cost_projection for one (source, target) subdomain pair with
/// source interface size `n_gamma`: QN(2n²−1) + QN(2n−1). The N_D Q (n² + n)
/// evaluation term is charged by the caller once per subdomain.
std::uint64_t projection_pair_flops(std::size_t q_eta, std::size_t n_terms, std::size_t n_gamma);

/// ref / approx.
double cost_ratio(double ref_flops, double approx_flops);

enum class Phase : std::size_t { Reference = 0, GaussianPart, SubdomainInterior, Interface, Projection };
inline constexpr std::size_t kPhaseCount = 5;

std::string_view phase_name(Phase p);

/// Thread-safe flop ledger. Linear solves are recorded by size in per-phase
/// histograms; projections are recorded as exact flop counts. Totals are
/// therefore independent of the order in which records arrive.
class CostLedger {
public:
    CostLedger() = default;
    CostLedger(const CostLedger& other);
    CostLedger& operator=(const CostLedger& other);

    void record_solve(Phase phase, std::size_t n, std::uint64_t count = 1);
    void record_flops(Phase phase, std::uint64_t flops);

    double flops(Phase phase) const;
    double total() const;
    std::uint64_t solve_count(Phase phase) const;
    std::uint64_t total_solves() const;
    std::map<std::size_t, std::uint64_t> histogram(Phase phase) const;

    /// Everything except the reference phase.
    double approximate_total() const;

    void merge(const CostLedger& other);

private:
    mutable std::mutex mutex_;
    std::array<std::map<std::size_t, std::uint64_t>, kPhaseCount> solves_{};
    std::array<std::uint64_t, kPhaseCount> extra_{};
};

} // namespace stochdd
