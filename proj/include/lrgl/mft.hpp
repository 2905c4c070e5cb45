#pragma once

#include <iosfwd>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lrgl/hydro.hpp"

namespace lrgl {

// Costates and drives (p, H, dV) are nodal vectors over all M+1 nodes with zero ends.

// Solves −ℬ_Φ H = p at interior nodes; p has M−1 entries.
std::vector<double> solve_poisson(const WeakFormAssembly& w, const CoarseModel& coarse, const GridProfile& profile,
                                  std::span<const double> p);

// ⟨Ψ, (−ℬ_Φ)⁻¹Ψ⟩.
double sobolev_norm(const WeakFormAssembly& w, const CoarseModel& coarse, const GridProfile& profile,
                    std::span<const double> psi);

struct RateResult {
    static constexpr double infinite = std::numeric_limits<double>::infinity();

    double value = 0.0;                     // ∫𝕃 dt by the trapezoid rule
    double value_mobility = 0.0;            // ¼∫⟨−ℬH,H⟩ dt with the solved drives
    std::vector<double> times;
    std::vector<double> lagrangian;         // 𝕃(Φ_t, ∂_tΦ_t)
    std::vector<std::vector<double>> drives;
    bool boundary_ok = true;
    std::string diagnostic;
};

// Paths must keep the bath values of the model at both ends, otherwise the value is +∞.
RateResult rate_functional(const WeakFormAssembly& w, const CoarseModel& coarse, const HydroTrajectory& path);

double hamiltonian(const WeakFormAssembly& w, const CoarseModel& coarse, const GridProfile& profile,
                   std::span<const double> p);
// 𝕃(Φ, ξ) = ¼‖ξ − 𝒜(Φ)‖²₋₁ for an interior velocity ξ.
double lagrangian(const WeakFormAssembly& w, const CoarseModel& coarse, const GridProfile& profile,
                  std::span<const double> velocity);
// ξ* = 𝒜(Φ) − 2ℬ_Φ p, the maximiser of ⟨ξ,p⟩ − 𝕃(Φ,ξ).
Interior legendre_velocity(const WeakFormAssembly& w, const CoarseModel& coarse, const GridProfile& profile,
                           std::span<const double> p);

// ⟨dV, ℬ_Φ(−S′(Φ) + dV)⟩.
double hj_residual(const WeakFormAssembly& w, const CoarseModel& coarse, std::span<const double> dv,
                   const GridProfile& profile);

// S(Φ) − S(Φ_ss) − S′(Φ_ss)(Φ − Φ_ss), without the mobility check.
double additive_quasipotential_density(const CoarseModel& coarse, double density, double stationary);

struct QuasiPotentialValue {
    double value = 0.0;
    std::vector<double> integrand;
    std::optional<double> hj_residual;
};

// Constant mobility only; the residual is filled when weights are supplied.
QuasiPotentialValue quasipotential_additive(const CoarseModel& coarse, const GridProfile& profile,
                                            const GridProfile& stationary, const WeakFormAssembly* w = nullptr);

struct LyapunovReport {
    std::vector<double> values;
    double max_increase = 0.0;
    std::vector<std::size_t> violations;  // record indices k with V_k − V_{k−1} > tolerance
    bool monotone() const { return violations.empty(); }
};

LyapunovReport lyapunov_check(const CoarseModel& coarse, const HydroTrajectory& trajectory,
                              const GridProfile& stationary, double tolerance = 1e-8);

// (1/h)∂ℍ/∂Φ_m at interior nodes by central differences of the pair terms touching m.
struct HamiltonianGradient {
    Interior values;
    double noise = 0.0;  // max gap between steps ε and 2ε, relative to the largest entry
};

HamiltonianGradient hamiltonian_gradient(const WeakFormAssembly& w, const CoarseModel& coarse,
                                         const GridProfile& profile, std::span<const double> p, double epsilon = 1e-6);

struct CharacteristicsStep {
    GridProfile profile;
    std::vector<double> costate;
    std::string warning;
};

// One explicit step of Φ̇ = 𝒜 − 2ℬ_Φ p, ṗ = −δℍ/δΦ.
CharacteristicsStep characteristics_step(const WeakFormAssembly& w, const CoarseModel& coarse,
                                         const GridProfile& profile, std::span<const double> p, double dt);

void write_rate_json(std::ostream& out, const RateResult& r);
void write_quasipotential_json(std::ostream& out, const QuasiPotentialValue& v);
// One row per recorded time: t, then H at every node.
void write_drives_csv(std::ostream& out, const RateResult& r, const std::string& meta);

} // namespace lrgl
