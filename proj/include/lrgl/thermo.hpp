#pragma once

#include <cstddef>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "lrgl/model.hpp"

namespace lrgl {

struct QuadratureSpec {
    // Truncate where the log-density falls this far below its maximum (e^-46 ≈ 1e-20).
    double log_cut = 46.0;
    std::size_t scan_points = 4001;
    std::size_t min_panels = 8;
    std::size_t max_panels = 4096;
    double tolerance = 1e-10;
};

// Normalized quadrature rule for the single-site Gibbs law ν_λ ∝ exp(−U(φ) − λφ).
struct GibbsRule {
    double lambda = 0.0;
    double log_partition = 0.0;
    std::vector<double> nodes;    // field values φ
    std::vector<double> weights;  // sum to one
    double lower = 0.0;           // truncation bounds in the integration variable
    double upper = 0.0;

    template <class F>
    double expect(F&& f) const {
        double acc = 0.0;
        for (std::size_t k = 0; k < nodes.size(); ++k) acc += weights[k] * f(nodes[k]);
        return acc;
    }
    double mean() const;
    // Central moments of order 2 and 3.
    double variance() const;
    double third_central() const;
    double raw_moment(int order) const;
};

class ThermoTable {
public:
    explicit ThermoTable(const ModelSpec& model, QuadratureSpec quad = {});

    const ModelSpec& model() const { return model_; }
    const QuadratureSpec& quadrature() const { return quad_; }
    Interval admissible_lambda() const { return lambda_range_; }
    Interval achievable_mean() const { return mean_range_; }

    GibbsRule rule(double lambda) const;
    double log_partition(double lambda) const { return rule(lambda).log_partition; }
    double free_energy(double lambda) const { return -log_partition(lambda); }
    double mean(double lambda) const { return rule(lambda).mean(); }

    // λ(Φ) by safeguarded Newton on F′(λ) = Φ; `hint` seeds the iteration.
    double chemical_potential(double density) const;
    double chemical_potential(double density, double hint) const;
    GibbsRule rule_at_density(double density) const;
    GibbsRule rule_at_density(double density, double hint) const;

    double entropy(double density) const;
    double entropy_slope(double density) const { return -chemical_potential(density); }
    double entropy_curvature(double density) const { return 1.0 / variance(density); }
    double variance(double density) const { return rule_at_density(density).variance(); }

    double bath_lambda_left() const { return lambda_left_; }
    double bath_lambda_right() const { return lambda_right_; }

    // Quantile of ν_Φ, built from a fine CDF table in the integration variable.
    class Sampler {
    public:
        double quantile(double u) const;
        double cdf(double phi) const;

    private:
        friend class ThermoTable;
        bool squared_ = false;
        double lower_ = 0.0, step_ = 0.0;
        std::vector<double> cdf_, density_;
    };
    Sampler sampler(double density) const;

    // Rows Φ, λ, S, S′, S″, σ on the supplied densities.
    void write_csv(std::ostream& out, std::span<const double> densities, const std::string& meta) const;

private:
    double log_density(double y, double lambda) const;
    void bracket_support(double lambda, double& lo, double& hi, double& gmax) const;

    ModelSpec model_;
    QuadratureSpec quad_;
    Interval lambda_range_;
    Interval mean_range_;
    double lambda_left_ = 0.0;
    double lambda_right_ = 0.0;
};

struct CoarseCoefficients {
    double drift;     // A(Φ,Φ′)
    double mobility;  // B(Φ,Φ′)
};

double coarse_A(const ModelSpec& model, const ThermoTable& thermo, double density, double density_other);
double coarse_B(const ModelSpec& model, const ThermoTable& thermo, double density, double density_other);
CoarseCoefficients coarse_coefficients(const ModelSpec& model, const ThermoTable& thermo, double density,
                                       double density_other);
double einstein_residual(const ModelSpec& model, const ThermoTable& thermo, std::span<const double> densities);

// Cubic Hermite interpolant on a uniform grid.
class HermiteTable {
public:
    HermiteTable() = default;
    HermiteTable(double lo, double step, std::vector<double> values, std::vector<double> slopes);
    double operator()(double x) const;
    double derivative(double x) const;

private:
    double lo_ = 0.0, step_ = 1.0;
    std::vector<double> values_, slopes_;
};

// Tabulated entropy derivatives and coarse mobility over a density window, for the grid solvers.
class CoarseModel {
public:
    CoarseModel(const ModelSpec& model, const ThermoTable& thermo, Interval window, std::size_t intervals = 2048);

    const ModelSpec& model() const { return model_; }
    Interval window() const { return window_; }

    double entropy(double density) const;
    double entropy_slope(double density) const;
    double entropy_curvature(double density) const;
    double variance(double density) const { return 1.0 / entropy_curvature(density); }
    double lambda_left() const { return lambda_left_; }
    double lambda_right() const { return lambda_right_; }

    bool constant_mobility() const { return model_.mobility.is_constant(); }
    double mobility(double density, double density_other) const;
    // ∂B/∂(first slot).
    double mobility_d1(double density, double density_other) const;

private:
    void check(double density) const;
    double moment(std::size_t order, double density) const;
    double moment_slope(std::size_t order, double density) const;

    ModelSpec model_;
    Interval window_;
    double lambda_left_ = 0.0, lambda_right_ = 0.0;
    HermiteTable entropy_, slope_, curvature_;
    std::vector<HermiteTable> moments_;
};

} // namespace lrgl
