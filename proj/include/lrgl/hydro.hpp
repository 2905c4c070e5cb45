#pragma once

#include <cstddef>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "lrgl/model.hpp"
#include "lrgl/sde.hpp"
#include "lrgl/thermo.hpp"

namespace lrgl {

// Uniform nodes u_j = j/M, j = 0..M.
class Grid {
public:
    explicit Grid(std::size_t cells);

    std::size_t cells() const { return cells_; }
    std::size_t nodes() const { return cells_ + 1; }
    double spacing() const { return 1.0 / static_cast<double>(cells_); }
    double node(std::size_t j) const { return static_cast<double>(j) / static_cast<double>(cells_); }

private:
    std::size_t cells_;
};

// Nodal values including the two Dirichlet ends.
struct GridProfile {
    std::vector<double> values;

    static GridProfile from_function(const Grid& grid, const std::function<double(double)>& f);
    static GridProfile affine(const Grid& grid, double left, double right);

    double left() const { return values.front(); }
    double right() const { return values.back(); }
    std::size_t size() const { return values.size(); }
};

// ∬_{[a,b]×[c,d]} |v−u|^(−1−γ) for disjoint intervals b ≤ c.
double cell_pair_integral(double gamma, double a, double b, double c, double d);

// Pair weights of the dual-cell weak form: for f linear across a cell pair,
// ½∬K(v−u)(f(v)−f(u))(g(v)−g(u)) = Σ_{i<k} W_ik (f_k−f_i)(g_k−g_i).
// Self-cell moments are shared onto the neighbouring pairs.
struct WeakFormAssembly {
    Grid grid{8};
    KernelSpec kernel;
    Eigen::MatrixXd weights;  // symmetric, zero diagonal
    std::vector<double> row_sums;

    double operator()(std::size_t i, std::size_t k) const { return weights(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)); }
};

WeakFormAssembly assemble_weights(const Grid& grid, const KernelSpec& kernel);

// Binary sidecar keyed by (M, kernel); a mismatching file is rebuilt.
void save_assembly(const WeakFormAssembly& w, const std::string& path);
WeakFormAssembly load_assembly(const std::string& path);
WeakFormAssembly cached_assembly(const Grid& grid, const KernelSpec& kernel, const std::string& directory);
std::string assembly_key(const Grid& grid, const KernelSpec& kernel);

// Interior vectors have M−1 entries, for nodes 1..M−1.
using Interior = std::vector<double>;

// B(Φ_i, Φ_k) at every node pair.
Eigen::MatrixXd nodal_mobility(const CoarseModel& coarse, const GridProfile& profile);

// Nodal 𝒜 from the weak form against hat functions, divided by the hat mass h.
Interior apply_A(const WeakFormAssembly& w, const CoarseModel& coarse, const GridProfile& profile);
// Same stencil from the averaged drift A(Φ,Φ′) instead of B·ΔS′.
Interior apply_A_by_quadrature(const WeakFormAssembly& w, const ModelSpec& model, const ThermoTable& thermo,
                               const GridProfile& profile);
// ℬ_Φ H for H vanishing at both ends.
Interior apply_B(const WeakFormAssembly& w, const CoarseModel& coarse, const GridProfile& profile,
                 std::span<const double> drive);
// Stencil without the boundary restriction on H.
Interior apply_B_unrestricted(const WeakFormAssembly& w, const CoarseModel& coarse, const GridProfile& profile,
                              std::span<const double> field);
// ½Σ_{i,k} W_ik B_ik (H_k−H_i)², which equals ⟨−ℬ_Φ H, H⟩.
double mobility_form(const WeakFormAssembly& w, const CoarseModel& coarse, const GridProfile& profile,
                     std::span<const double> drive);

// ⟨f,g⟩ = h Σ_interior f_j g_j.
double pairing(const Grid& grid, std::span<const double> f, std::span<const double> g);

struct HydroTrajectory {
    std::vector<double> times;
    std::vector<GridProfile> profiles;
};

struct EvolveOptions {
    double dt = 0.0;  // zero selects 0.9 of the explicit bound
    std::size_t record_stride = 1;
    DriveField drive;
};

// Explicit Euler with frozen Dirichlet rows for ∂_tΦ = 𝒜(Φ) − ℬ_Φ H.
double explicit_time_step_bound(const WeakFormAssembly& w, const CoarseModel& coarse, const GridProfile& profile);
HydroTrajectory evolve(const WeakFormAssembly& w, const CoarseModel& coarse, const GridProfile& initial, double horizon,
                       const EvolveOptions& options = {});

struct StationaryReport {
    GridProfile profile;
    double residual = 0.0;  // max weak residual |⟨𝒜, G_j⟩|
    std::size_t iterations = 0;
    bool used_fallback = false;
};

StationaryReport solve_stationary(const WeakFormAssembly& w, const CoarseModel& coarse, double left, double right,
                                  double tolerance = 1e-11);

// Net flux to the right across u, summed over all pairs straddling it.
double macroscopic_current(const WeakFormAssembly& w, const CoarseModel& coarse, const GridProfile& profile, double u);

// ((2−γ)/2)·∬K(v−u)(G(v)−G(u))(H(v)−H(u)); tends to ∫G′H′ as γ → 2.
double diffusive_limit_form(const WeakFormAssembly& w, std::span<const double> g, std::span<const double> h);

double diffusion_coefficient(const ModelSpec& model, const ThermoTable& thermo, double density);

// Monomial g = Π_j φ(j)^e_j on a window starting at site 0.
struct WindowMonomial {
    std::vector<int> exponents;
};

// All φ(0)^a φ(1)^b, 0 ≤ a,b ≤ max_power, modulo shifts; `window` ∈ {1,2}.
std::vector<WindowMonomial> monomial_basis(std::size_t window, int max_power);

struct GreenKuboResult {
    double upper_bound = 0.0;  // S″·min ⟨β(1−(∂₁−∂₂)ζ_g)²⟩
    double diffusion = 0.0;    // D(Φ), the g = 0 value
    std::vector<double> coefficients;
    bool regularized = false;
};

GreenKuboResult green_kubo_upper(const ModelSpec& model, const ThermoTable& thermo, double density,
                                 const std::vector<WindowMonomial>& basis);

void write_profile_csv(std::ostream& out, const Grid& grid, const GridProfile& profile, const std::string& meta);

} // namespace lrgl
