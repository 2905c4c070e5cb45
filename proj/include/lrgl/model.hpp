#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

namespace lrgl {

enum class FieldDomain { real_line, positive_half_line };

struct Interval {
    double lo = -std::numeric_limits<double>::infinity();
    double hi = std::numeric_limits<double>::infinity();

    bool contains_open(double x) const { return x > lo && x < hi; }
    bool bounded_below() const { return lo > -std::numeric_limits<double>::infinity(); }
    bool bounded_above() const { return hi < std::numeric_limits<double>::infinity(); }
};

struct PotentialSpec {
    enum class Family { quadratic, quartic, bem_log, polynomial };

    Family family = Family::quadratic;
    // Power-series coefficients: U(φ) = Σ_k coefficients[k]·φ^k. Unused for bem_log.
    std::vector<double> coefficients{0.0, 0.0, 0.5};
    FieldDomain domain = FieldDomain::real_line;

    static PotentialSpec quadratic(double c);
    static PotentialSpec quartic(double c4, double c2);
    static PotentialSpec bem_log();
    static PotentialSpec polynomial(std::vector<double> coefficients, FieldDomain domain);

    bool in_domain(double phi) const;
    // Chemical potentials for which exp(−U(φ) − λφ) is integrable over the domain.
    Interval admissible_lambda() const;
    // Range of means ⟨φ⟩ reachable by varying λ over the admissible interval.
    Interval achievable_mean() const;
    std::string describe() const;
};

struct PotentialValue {
    double value;
    double slope;
};

PotentialValue eval_potential(const PotentialSpec& spec, double phi);
double potential_slope(const PotentialSpec& spec, double phi);
double potential_curvature(const PotentialSpec& spec, double phi);

struct MobilitySpec {
    enum class Family { constant, product, polynomial };

    Family family = Family::constant;
    double scale = 1.0;  // b0 for constant, c for product
    // Symmetric coefficient matrix, β(φ,φ′) = Σ_ab coefficients[a][b]·φ^a·φ′^b.
    std::vector<std::vector<double>> coefficients;
    // Declared uniform lower bound; zero means only strict positivity is enforced.
    double lower_bound = 0.0;

    static MobilitySpec constant(double b0);
    static MobilitySpec product(double c);
    static MobilitySpec polynomial(std::vector<std::vector<double>> coefficients, double lower_bound);

    bool is_constant() const { return family == Family::constant; }
    // Degree of β in each slot.
    std::size_t degree() const;
    std::string describe() const;
};

struct MobilityValue {
    double value;
    double d1;
    double d2;
};

MobilityValue eval_mobility(const MobilitySpec& spec, double phi, double phi_other);

// Unchecked evaluation for inner loops; callers guarantee positivity separately.
double mobility_raw(const MobilitySpec& spec, double phi, double phi_other);
double mobility_d1_raw(const MobilitySpec& spec, double phi, double phi_other);

struct KernelSpec {
    enum class Kind { power_law, nearest_neighbor, mixed };

    Kind kind = Kind::power_law;
    double gamma = 1.5;
    double amplitude = 0.0;  // a in the mixed kernel
    bool allow_gamma_edge = false;

    static KernelSpec power_law(double gamma);
    static KernelSpec nearest_neighbor();
    static KernelSpec mixed(double amplitude, double gamma);

    void validate() const;
    bool has_power_law() const { return kind != Kind::nearest_neighbor; }
    // Exponent in the macroscopic time scale t·n^θ.
    double time_exponent() const { return kind == Kind::nearest_neighbor ? 2.0 : gamma; }
    std::string describe() const;
};

double kernel_value(const KernelSpec& spec, std::int64_t z, std::size_t n);
// Real-argument power law |z|^(−1−γ), zero at the origin.
double power_law_kernel(double gamma, double z);

struct ModelSpec {
    PotentialSpec potential;
    MobilitySpec mobility;
    KernelSpec kernel;
    double bath_left = 0.0;
    double bath_right = 0.0;

    static ModelSpec gaussian_additive(double gamma, double left, double right);
    static ModelSpec bem(double gamma, double left, double right);

    // BEM structure: U = ½ log φ with β = c·φ·φ′.
    bool is_bem() const;
    void validate() const;
    std::string describe() const;
};

double eval_alpha(const ModelSpec& spec, double phi, double phi_other);

} // namespace lrgl
