#include "stochdd/cost.hpp"

#include "stochdd/error.hpp"

namespace stochdd {

std::uint64_t flops_lu_x3(std::size_t n) {
    const auto m = static_cast<std::uint64_t>(n);
    return 2 * m * m * m + 6 * m * m;
}

double flops_lu(std::size_t n) {
    detail::require(n >= 1, "flops_lu: n must be positive");
    return static_cast<double>(flops_lu_x3(n)) / 3.0;
}

double cost_reference(std::size_t q_ref, std::size_t n) {
    detail::require(q_ref >= 1 && n >= 1, "cost_reference: arguments must be positive");
    return static_cast<double>(static_cast<std::uint64_t>(q_ref) * flops_lu_x3(n)) / 3.0;
}

double cost_dd(std::size_t q_eta, std::span<const std::size_t> interior_sizes, std::size_t n_gamma) {
    detail::require(q_eta >= 1 && !interior_sizes.empty(), "cost_dd: arguments must be positive");
    std::uint64_t per_point = 0;
    for (std::size_t n_i : interior_sizes) per_point += flops_lu_x3(n_i) + flops_lu_x3(n_gamma);
    return static_cast<double>(static_cast<std::uint64_t>(q_eta) * per_point) / 3.0;
}

double cost_projection(std::size_t n_d, std::size_t q_eta, std::size_t n_terms, std::size_t n_gamma) {
    detail::require(n_d >= 1 && q_eta >= 1 && n_terms >= 1 && n_gamma >= 1,
                    "cost_projection: arguments must be positive");
    const double nd = static_cast<double>(n_d), q = static_cast<double>(q_eta), big_n = static_cast<double>(n_terms),
                 ng = static_cast<double>(n_gamma);
    const double matrix = nd * ((nd - 1.0) * q * big_n * (2.0 * ng * ng - 1.0) + nd * q * ng * ng);
    const double vector = nd * ((nd - 1.0) * q * big_n * (2.0 * ng - 1.0) + nd * q * ng);
    return matrix + vector;
}

std::uint64_t projection_pair_flops(std::size_t q_eta, std::size_t n_terms, std::size_t n_gamma) {
    const auto q = static_cast<std::uint64_t>(q_eta);
    const auto big_n = static_cast<std::uint64_t>(n_terms);
    const auto ng = static_cast<std::uint64_t>(n_gamma);
    if (ng == 0) return 0;
    return q * big_n * (2 * ng * ng - 1) + q * big_n * (2 * ng - 1);
}

double cost_ratio(double ref_flops, double approx_flops) {
    if (!(approx_flops > 0.0)) throw InvalidArgument("cost_ratio: approximate cost must be positive");
    return ref_flops / approx_flops;
}

std::string_view phase_name(Phase p) {
    switch (p) {
    case Phase::Reference: return "reference";
    case Phase::GaussianPart: return "gaussian_part";
    case Phase::SubdomainInterior: return "subdomain_interior";
    case Phase::Interface: return "interface";
    case Phase::Projection: return "projection";
    }
    return "unknown";
}

void CostLedger::record_solve(Phase phase, std::size_t n, std::uint64_t count) {
    std::lock_guard lock(mutex_);
    solves_[static_cast<std::size_t>(phase)][n] += count;
}

void CostLedger::record_flops(Phase phase, std::uint64_t flops) {
    std::lock_guard lock(mutex_);
    extra_[static_cast<std::size_t>(phase)] += flops;
}

double CostLedger::flops(Phase phase) const {
    std::lock_guard lock(mutex_);
    const auto i = static_cast<std::size_t>(phase);
    // Sum 3·flops as integers so the total is exact, then divide once.
    std::uint64_t x3 = 0;
    for (const auto& [n, count] : solves_[i]) x3 += count * flops_lu_x3(n);
    return static_cast<double>(x3) / 3.0 + static_cast<double>(extra_[i]);
}

double CostLedger::total() const {
    double t = 0.0;
    for (std::size_t i = 0; i < kPhaseCount; ++i) t += flops(static_cast<Phase>(i));
    return t;
}

double CostLedger::approximate_total() const {
    double t = 0.0;
    for (std::size_t i = 0; i < kPhaseCount; ++i) {
        if (static_cast<Phase>(i) != Phase::Reference) t += flops(static_cast<Phase>(i));
    }
    return t;
}

std::uint64_t CostLedger::solve_count(Phase phase) const {
    std::lock_guard lock(mutex_);
    std::uint64_t c = 0;
    for (const auto& [n, count] : solves_[static_cast<std::size_t>(phase)]) c += count;
    return c;
}

std::uint64_t CostLedger::total_solves() const {
    std::uint64_t c = 0;
    for (std::size_t i = 0; i < kPhaseCount; ++i) c += solve_count(static_cast<Phase>(i));
    return c;
}

std::map<std::size_t, std::uint64_t> CostLedger::histogram(Phase phase) const {
    std::lock_guard lock(mutex_);
    return solves_[static_cast<std::size_t>(phase)];
}

CostLedger::CostLedger(const CostLedger& other) {
    std::lock_guard lock(other.mutex_);
    solves_ = other.solves_;
    extra_ = other.extra_;
}

CostLedger& CostLedger::operator=(const CostLedger& other) {
    if (&other == this) return *this;
    std::scoped_lock lock(mutex_, other.mutex_);
    solves_ = other.solves_;
    extra_ = other.extra_;
    return *this;
}

void CostLedger::merge(const CostLedger& other) {
    if (&other == this) return;
    std::scoped_lock lock(mutex_, other.mutex_);
    for (std::size_t i = 0; i < kPhaseCount; ++i) {
        for (const auto& [n, count] : other.solves_[i]) solves_[i][n] += count;
        extra_[i] += other.extra_[i];
    }
}

} // namespace stochdd
