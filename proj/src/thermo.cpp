#include "lrgl/thermo.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <ostream>
#include <sstream>

#include <boost/math/quadrature/gauss.hpp>

#include "lrgl/error.hpp"

namespace lrgl {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

struct PanelRule {
    std::array<double, 16> x;  // on [0,1]
    std::array<double, 16> w;
};

const PanelRule& panel_rule() {
    static const PanelRule rule = [] {
        using G = boost::math::quadrature::gauss<double, 16>;
        PanelRule r{};
        const auto& a = G::abscissa();
        const auto& wt = G::weights();
        std::size_t k = 0;
        for (std::size_t i = 0; i < a.size(); ++i) {
            r.x[k] = 0.5 * (1.0 - a[i]);
            r.w[k++] = 0.5 * wt[i];
            r.x[k] = 0.5 * (1.0 + a[i]);
            r.w[k++] = 0.5 * wt[i];
        }
        return r;
    }();
    return rule;
}

std::string fmt_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

} // namespace

double GibbsRule::mean() const {
    return expect([](double p) { return p; });
}

double GibbsRule::raw_moment(int order) const {
    return expect([order](double p) { return std::pow(p, order); });
}

double GibbsRule::variance() const {
    const double m = mean();
    return expect([m](double p) { return (p - m) * (p - m); });
}

double GibbsRule::third_central() const {
    const double m = mean();
    return expect([m](double p) {
        const double d = p - m;
        return d * d * d;
    });
}

ThermoTable::ThermoTable(const ModelSpec& model, QuadratureSpec quad) : model_(model), quad_(quad) {
    model_.validate();
    lambda_range_ = model_.potential.admissible_lambda();
    mean_range_ = model_.potential.achievable_mean();

    // Probe quadrature near the ends of the admissible interval.
    std::vector<double> probes;
    if (lambda_range_.bounded_below()) {
        const double lo = lambda_range_.lo;
        const double scale = std::max(1.0, std::abs(lo));
        probes = {lo + 1e-3 * scale, lo + scale, lo + 10.0 * scale};
    } else {
        probes = {-5.0, 0.0, 5.0};
    }
    for (double lam : probes) {
        const GibbsRule r = rule(lam);
        if (!std::isfinite(r.log_partition) || !std::isfinite(r.mean()))
            throw DomainError("Gibbs family of " + model_.potential.describe() + " is not integrable at lambda=" +
                              fmt_double(lam));
    }
    lambda_left_ = chemical_potential(model_.bath_left);
    lambda_right_ = chemical_potential(model_.bath_right);
}

double ThermoTable::log_density(double y, double lambda) const {
    const PotentialSpec& u = model_.potential;
    if (u.domain == FieldDomain::real_line) return -eval_potential(u, y).value - lambda * y;
    if (u.family == PotentialSpec::Family::bem_log) {
        // φ = y² absorbs the φ^(−1/2) singularity: 2y·φ^(−1/2) = 2.
        return std::log(2.0) - lambda * y * y;
    }
    if (!(y > 0.0)) return -kInf;
    const double phi = y * y;
    return -eval_potential(u, phi).value - lambda * phi + std::log(2.0 * y);
}

void ThermoTable::bracket_support(double lambda, double& lo, double& hi, double& gmax) const {
    const bool half = model_.potential.domain == FieldDomain::positive_half_line;
    const double cut = quad_.log_cut;
    double a = half ? 0.0 : -1.0;
    double b = 1.0;

    auto scan_max = [&](double l, double r, std::size_t pts) {
        double best = -kInf;
        for (std::size_t i = 0; i < pts; ++i) {
            const double y = l + (r - l) * static_cast<double>(i) / static_cast<double>(pts - 1);
            best = std::max(best, log_density(y, lambda));
        }
        return best;
    };

    for (int iter = 0;; ++iter) {
        if (iter > 80 || (b - a) > 1e15)
            throw DomainError("Gibbs density of " + model_.potential.describe() + " not integrable at lambda=" +
                              fmt_double(lambda));
        gmax = scan_max(a, b, 257);
        bool grown = false;
        const double width = b - a;
        if (!half && log_density(a, lambda) > gmax - cut) {
            a -= width;
            grown = true;
        }
        if (log_density(b, lambda) > gmax - cut) {
            b += width;
            grown = true;
        }
        if (!grown) break;
    }

    // Zoom onto the region above the cut, rescanning while it keeps shrinking.
    for (int zoom = 0; zoom < 8; ++zoom) {
        const std::size_t pts = quad_.scan_points;
        std::vector<double> g(pts);
        const double step = (b - a) / static_cast<double>(pts - 1);
        gmax = -kInf;
        for (std::size_t i = 0; i < pts; ++i) {
            g[i] = log_density(a + step * static_cast<double>(i), lambda);
            gmax = std::max(gmax, g[i]);
        }
        if (!std::isfinite(gmax)) throw ConvergenceError("Gibbs density has no finite maximum");
        std::size_t first = 0, last = pts - 1;
        while (first < pts && !(g[first] > gmax - cut)) ++first;
        while (last > first && !(g[last] > gmax - cut)) --last;
        const double na = a + step * static_cast<double>(first > 0 ? first - 1 : 0);
        const double nb = a + step * static_cast<double>(std::min(last + 1, pts - 1));
        const bool shrunk = (nb - na) < 0.25 * (b - a);
        a = na;
        b = nb;
        if (!shrunk) break;
    }
    lo = a;
    hi = b;
}

GibbsRule ThermoTable::rule(double lambda) const {
    if (!lambda_range_.contains_open(lambda))
        throw DomainError("chemical potential " + fmt_double(lambda) + " outside the admissible interval");
    double lo = 0.0, hi = 0.0, gmax = 0.0;
    bracket_support(lambda, lo, hi, gmax);
    const bool squared = model_.potential.domain == FieldDomain::positive_half_line;
    const PanelRule& pr = panel_rule();

    std::vector<double> y, w;
    double z_prev = 0.0, m_prev = 0.0, change = kInf;
    for (std::size_t panels = quad_.min_panels; panels <= quad_.max_panels; panels *= 2) {
        const double h = (hi - lo) / static_cast<double>(panels);
        y.clear();
        w.clear();
        double z = 0.0, m = 0.0;
        for (std::size_t p = 0; p < panels; ++p) {
            const double base = lo + h * static_cast<double>(p);
            for (std::size_t k = 0; k < 16; ++k) {
                const double yy = base + h * pr.x[k];
                const double ww = h * pr.w[k] * std::exp(log_density(yy, lambda) - gmax);
                const double phi = squared ? yy * yy : yy;
                y.push_back(phi);
                w.push_back(ww);
                z += ww;
                m += ww * phi;
            }
        }
        if (panels > quad_.min_panels) {
            const double scale = std::abs(m) + z * (std::abs(hi) + std::abs(lo)) * 1e-3;
            change = std::max(std::abs(z - z_prev) / z, std::abs(m - m_prev) / scale);
            if (change <= 1e-13) break;
        }
        z_prev = z;
        m_prev = m;
    }
    if (!(change <= quad_.tolerance))
        throw ConvergenceError("Gibbs quadrature did not converge at lambda=" + fmt_double(lambda));

    GibbsRule r;
    r.lambda = lambda;
    r.lower = lo;
    r.upper = hi;
    double z = 0.0;
    for (double v : w) z += v;
    r.log_partition = std::log(z) + gmax;
    const double floor = 1e-30;
    for (std::size_t k = 0; k < w.size(); ++k) {
        const double wn = w[k] / z;
        if (wn > floor) {
            r.nodes.push_back(y[k]);
            r.weights.push_back(wn);
        }
    }
    double total = 0.0;
    for (double v : r.weights) total += v;
    for (double& v : r.weights) v /= total;
    return r;
}

GibbsRule ThermoTable::rule_at_density(double density, double hint) const {
    if (!mean_range_.contains_open(density))
        throw RangeError("density " + fmt_double(density) + " outside the achievable mean range");
    const Interval adm = lambda_range_;
    double lambda = hint;
    if (!adm.contains_open(lambda)) {
        if (adm.bounded_below())
            lambda = adm.lo + std::max(1.0, std::abs(adm.lo));
        else
            lambda = 0.0;
    }
    // Bracket [a,b] with mean(a) ≥ Φ ≥ mean(b); the mean decreases in λ.
    double a = adm.lo, b = adm.hi;
    bool have_a = false, have_b = false;
    const double tol = 1e-14 * std::max(1.0, std::abs(density));
    for (int iter = 0; iter < 300; ++iter) {
        GibbsRule r = rule(lambda);
        const double m = r.mean();
        const double v = r.variance();
        const double gap = m - density;
        if (std::abs(gap) <= tol) return r;
        if (gap > 0.0) {
            a = lambda;
            have_a = true;
        } else {
            b = lambda;
            have_b = true;
        }
        double next = lambda + gap / v;
        const bool inside = next > a && next < b;
        if (!inside) {
            if (have_a && have_b) {
                next = 0.5 * (a + b);
            } else if (have_a) {
                next = a + 2.0 * std::max(1.0, std::abs(a));
                if (std::isfinite(b)) next = std::min(next, 0.5 * (a + b));
            } else {
                next = std::isfinite(a) ? 0.5 * (a + b) : b - 2.0 * std::max(1.0, std::abs(b));
            }
        }
        if (have_a && have_b && (b - a) <= 4e-16 * std::max(1.0, std::abs(lambda))) return r;
        if (next == lambda) return r;
        lambda = next;
    }
    throw ConvergenceError("chemical potential inversion did not converge for density " + fmt_double(density));
}

GibbsRule ThermoTable::rule_at_density(double density) const {
    return rule_at_density(density, std::numeric_limits<double>::quiet_NaN());
}

double ThermoTable::chemical_potential(double density) const { return rule_at_density(density).lambda; }

double ThermoTable::chemical_potential(double density, double hint) const {
    return rule_at_density(density, hint).lambda;
}

double ThermoTable::entropy(double density) const {
    const GibbsRule r = rule_at_density(density);
    return -r.log_partition - r.lambda * density;
}

ThermoTable::Sampler ThermoTable::sampler(double density) const {
    const double lambda = chemical_potential(density);
    double lo = 0.0, hi = 0.0, gmax = 0.0;
    bracket_support(lambda, lo, hi, gmax);
    constexpr std::size_t cells = 8192;
    const PanelRule& pr = panel_rule();
    Sampler s;
    s.squared_ = model_.potential.domain == FieldDomain::positive_half_line;
    s.lower_ = lo;
    s.step_ = (hi - lo) / static_cast<double>(cells);
    s.cdf_.assign(cells + 1, 0.0);
    s.density_.assign(cells + 1, 0.0);
    for (std::size_t i = 0; i <= cells; ++i)
        s.density_[i] = std::exp(log_density(lo + s.step_ * static_cast<double>(i), lambda) - gmax);
    for (std::size_t i = 0; i < cells; ++i) {
        double acc = 0.0;
        for (std::size_t k = 0; k < 16; ++k)
            acc += pr.w[k] * std::exp(log_density(lo + s.step_ * (static_cast<double>(i) + pr.x[k]), lambda) - gmax);
        s.cdf_[i + 1] = s.cdf_[i] + acc * s.step_;
    }
    const double total = s.cdf_.back();
    for (double& c : s.cdf_) c /= total;
    for (double& d : s.density_) d /= total;
    return s;
}

double ThermoTable::Sampler::quantile(double u) const {
    if (!(u > 0.0 && u < 1.0)) throw DomainError("quantile level must lie in (0,1)");
    const auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
    std::size_t i = static_cast<std::size_t>(std::max<std::ptrdiff_t>(it - cdf_.begin() - 1, 0));
    if (i + 1 >= cdf_.size()) i = cdf_.size() - 2;
    // Invert the Hermite interpolant of the CDF on cell i by safeguarded Newton.
    const double c0 = cdf_[i], c1 = cdf_[i + 1];
    const double d0 = density_[i] * step_, d1 = density_[i + 1] * step_;
    auto eval = [&](double t) {
        const double t2 = t * t, t3 = t2 * t;
        return (2 * t3 - 3 * t2 + 1) * c0 + (t3 - 2 * t2 + t) * d0 + (-2 * t3 + 3 * t2) * c1 + (t3 - t2) * d1;
    };
    auto slope = [&](double t) {
        const double t2 = t * t;
        return (6 * t2 - 6 * t) * c0 + (3 * t2 - 4 * t + 1) * d0 + (-6 * t2 + 6 * t) * c1 + (3 * t2 - 2 * t) * d1;
    };
    double lo = 0.0, hi = 1.0;
    double t = c1 > c0 ? (u - c0) / (c1 - c0) : 0.5;
    for (int iter = 0; iter < 60; ++iter) {
        const double f = eval(t) - u;
        if (f > 0.0) hi = t; else lo = t;
        const double df = slope(t);
        double next = df > 0.0 ? t - f / df : 0.5 * (lo + hi);
        if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
        if (std::abs(next - t) < 1e-15) {
            t = next;
            break;
        }
        t = next;
    }
    const double y = lower_ + step_ * (static_cast<double>(i) + t);
    return squared_ ? y * y : y;
}

double ThermoTable::Sampler::cdf(double phi) const {
    const double y = squared_ ? (phi > 0.0 ? std::sqrt(phi) : 0.0) : phi;
    const double pos = (y - lower_) / step_;
    if (pos <= 0.0) return 0.0;
    if (pos >= static_cast<double>(cdf_.size() - 1)) return 1.0;
    const auto i = static_cast<std::size_t>(pos);
    const double t = pos - static_cast<double>(i);
    const double t2 = t * t, t3 = t2 * t;
    return (2 * t3 - 3 * t2 + 1) * cdf_[i] + (t3 - 2 * t2 + t) * density_[i] * step_ +
           (-2 * t3 + 3 * t2) * cdf_[i + 1] + (t3 - t2) * density_[i + 1] * step_;
}

void ThermoTable::write_csv(std::ostream& out, std::span<const double> densities, const std::string& meta) const {
    out << "# " << meta << "\n";
    out << "Phi,lambda,S,S_prime,S_second,sigma\n";
    out.precision(17);
    double hint = std::numeric_limits<double>::quiet_NaN();
    for (double phi : densities) {
        const GibbsRule r = rule_at_density(phi, hint);
        hint = r.lambda;
        const double sigma = r.variance();
        out << phi << ',' << r.lambda << ',' << (-r.log_partition - r.lambda * phi) << ',' << -r.lambda << ','
            << 1.0 / sigma << ',' << sigma << '\n';
    }
}

namespace {

double tensor_alpha(const ModelSpec& model, const GibbsRule& r1, const GibbsRule& r2) {
    std::vector<double> slope2(r2.nodes.size());
    for (std::size_t j = 0; j < r2.nodes.size(); ++j) slope2[j] = potential_slope(model.potential, r2.nodes[j]);
    double acc = 0.0;
    for (std::size_t i = 0; i < r1.nodes.size(); ++i) {
        const double p = r1.nodes[i];
        const double s1 = potential_slope(model.potential, p);
        double row = 0.0;
        for (std::size_t j = 0; j < r2.nodes.size(); ++j) {
            const double q = r2.nodes[j];
            const double b = mobility_raw(model.mobility, p, q);
            const double d1 = mobility_d1_raw(model.mobility, p, q);
            const double d2 = mobility_d1_raw(model.mobility, q, p);
            row += r2.weights[j] * (-(b * (s1 - slope2[j])) + (d1 - d2));
        }
        acc += r1.weights[i] * row;
    }
    return acc;
}

double tensor_beta(const ModelSpec& model, const GibbsRule& r1, const GibbsRule& r2) {
    double acc = 0.0;
    for (std::size_t i = 0; i < r1.nodes.size(); ++i) {
        double row = 0.0;
        for (std::size_t j = 0; j < r2.nodes.size(); ++j)
            row += r2.weights[j] * mobility_raw(model.mobility, r1.nodes[i], r2.nodes[j]);
        acc += r1.weights[i] * row;
    }
    return acc;
}

} // namespace

CoarseCoefficients coarse_coefficients(const ModelSpec& model, const ThermoTable& thermo, double density,
                                       double density_other) {
    const GibbsRule r1 = thermo.rule_at_density(density);
    const GibbsRule r2 = thermo.rule_at_density(density_other);
    // Symmetrized so antisymmetry of A and symmetry of B hold bit-exactly.
    const double a = 0.5 * (tensor_alpha(model, r1, r2) - tensor_alpha(model, r2, r1));
    const double b = 0.5 * (tensor_beta(model, r1, r2) + tensor_beta(model, r2, r1));
    if (!(b > 0.0)) throw PositivityError("coarse mobility is not positive");
    return {a, b};
}

double coarse_A(const ModelSpec& model, const ThermoTable& thermo, double density, double density_other) {
    const GibbsRule r1 = thermo.rule_at_density(density);
    const GibbsRule r2 = thermo.rule_at_density(density_other);
    return 0.5 * (tensor_alpha(model, r1, r2) - tensor_alpha(model, r2, r1));
}

double coarse_B(const ModelSpec& model, const ThermoTable& thermo, double density, double density_other) {
    return coarse_coefficients(model, thermo, density, density_other).mobility;
}

double einstein_residual(const ModelSpec& model, const ThermoTable& thermo, std::span<const double> densities) {
    std::vector<GibbsRule> rules;
    rules.reserve(densities.size());
    for (double d : densities) rules.push_back(thermo.rule_at_density(d));
    double worst = 0.0;
    for (std::size_t i = 0; i < rules.size(); ++i) {
        for (std::size_t k = 0; k < rules.size(); ++k) {
            const double a = 0.5 * (tensor_alpha(model, rules[i], rules[k]) - tensor_alpha(model, rules[k], rules[i]));
            const double b = 0.5 * (tensor_beta(model, rules[i], rules[k]) + tensor_beta(model, rules[k], rules[i]));
            // S′ = −λ.
            const double einstein = (rules[i].lambda - rules[k].lambda) * b;
            worst = std::max(worst, std::abs(a - einstein));
        }
    }
    return worst;
}

HermiteTable::HermiteTable(double lo, double step, std::vector<double> values, std::vector<double> slopes)
    : lo_(lo), step_(step), values_(std::move(values)), slopes_(std::move(slopes)) {}

double HermiteTable::operator()(double x) const {
    double pos = (x - lo_) / step_;
    const double last = static_cast<double>(values_.size() - 1);
    pos = std::clamp(pos, 0.0, last);
    auto i = static_cast<std::size_t>(pos);
    if (i + 1 >= values_.size()) i = values_.size() - 2;
    const double t = pos - static_cast<double>(i);
    const double t2 = t * t, t3 = t2 * t;
    return (2 * t3 - 3 * t2 + 1) * values_[i] + (t3 - 2 * t2 + t) * step_ * slopes_[i] +
           (-2 * t3 + 3 * t2) * values_[i + 1] + (t3 - t2) * step_ * slopes_[i + 1];
}

double HermiteTable::derivative(double x) const {
    double pos = (x - lo_) / step_;
    const double last = static_cast<double>(values_.size() - 1);
    pos = std::clamp(pos, 0.0, last);
    auto i = static_cast<std::size_t>(pos);
    if (i + 1 >= values_.size()) i = values_.size() - 2;
    const double t = pos - static_cast<double>(i);
    const double t2 = t * t;
    return ((6 * t2 - 6 * t) * values_[i] + (-6 * t2 + 6 * t) * values_[i + 1]) / step_ +
           (3 * t2 - 4 * t + 1) * slopes_[i] + (3 * t2 - 2 * t) * slopes_[i + 1];
}

CoarseModel::CoarseModel(const ModelSpec& model, const ThermoTable& thermo, Interval window, std::size_t intervals)
    : model_(model), window_(window), lambda_left_(thermo.bath_lambda_left()), lambda_right_(thermo.bath_lambda_right()) {
    if (!(window.lo < window.hi) || !thermo.achievable_mean().contains_open(window.lo) ||
        !thermo.achievable_mean().contains_open(window.hi))
        throw RangeError("density window outside the achievable mean range");
    if (intervals < 2) throw DomainError("coarse table needs at least two intervals");
    const std::size_t nodes = intervals + 1;
    const double step = (window.hi - window.lo) / static_cast<double>(intervals);
    const std::size_t degree = model.mobility.family == MobilitySpec::Family::polynomial ? model.mobility.degree() : 0;

    std::vector<double> s(nodes), s1(nodes), s2(nodes), s3(nodes);
    std::vector<std::vector<double>> m(degree + 1, std::vector<double>(nodes)), dm(degree + 1, std::vector<double>(nodes));
    double hint = std::numeric_limits<double>::quiet_NaN();
    for (std::size_t i = 0; i < nodes; ++i) {
        const double phi = i + 1 == nodes ? window.hi : window.lo + step * static_cast<double>(i);
        const GibbsRule r = thermo.rule_at_density(phi, hint);
        hint = r.lambda;
        const double mean = r.mean();
        const double var = r.variance();
        const double k3 = r.third_central();
        s[i] = -r.log_partition - r.lambda * phi;
        s1[i] = -r.lambda;
        s2[i] = 1.0 / var;
        s3[i] = -k3 / (var * var * var);
        for (std::size_t a = 0; a <= degree; ++a) {
            const double ma = r.expect([a](double p) { return std::pow(p, static_cast<int>(a)); });
            const double cov = r.expect([a, mean](double p) { return std::pow(p, static_cast<int>(a)) * (p - mean); });
            m[a][i] = ma;
            dm[a][i] = cov / var;
        }
    }
    entropy_ = HermiteTable(window.lo, step, s, s1);
    slope_ = HermiteTable(window.lo, step, s1, s2);
    curvature_ = HermiteTable(window.lo, step, s2, s3);
    for (std::size_t a = 0; a <= degree; ++a) moments_.emplace_back(window.lo, step, m[a], dm[a]);
}

void CoarseModel::check(double density) const {
    if (!(density >= window_.lo && density <= window_.hi)) {
        throw RangeError("density " + fmt_double(density) + " outside the tabulated window [" +
                         fmt_double(window_.lo) + ", " + fmt_double(window_.hi) + "]");
    }
}

double CoarseModel::entropy(double density) const {
    check(density);
    return entropy_(density);
}

double CoarseModel::entropy_slope(double density) const {
    check(density);
    return slope_(density);
}

double CoarseModel::entropy_curvature(double density) const {
    check(density);
    return curvature_(density);
}

double CoarseModel::moment(std::size_t order, double density) const { return moments_[order](density); }

double CoarseModel::moment_slope(std::size_t order, double density) const {
    return moments_[order].derivative(density);
}

double CoarseModel::mobility(double density, double density_other) const {
    const MobilitySpec& mob = model_.mobility;
    switch (mob.family) {
    case MobilitySpec::Family::constant: return mob.scale;
    case MobilitySpec::Family::product: return mob.scale * (density * density_other);
    case MobilitySpec::Family::polynomial: {
        check(density);
        check(density_other);
        double fwd = 0.0, bwd = 0.0;
        const auto& c = mob.coefficients;
        for (std::size_t a = 0; a < c.size(); ++a) {
            const double ma = moment(a, density), na = moment(a, density_other);
            for (std::size_t b = 0; b < c.size(); ++b) {
                fwd += c[a][b] * ma * moment(b, density_other);
                bwd += c[a][b] * na * moment(b, density);
            }
        }
        return 0.5 * (fwd + bwd);
    }
    }
    return 0.0;
}

double CoarseModel::mobility_d1(double density, double density_other) const {
    const MobilitySpec& mob = model_.mobility;
    switch (mob.family) {
    case MobilitySpec::Family::constant: return 0.0;
    case MobilitySpec::Family::product: return mob.scale * density_other;
    case MobilitySpec::Family::polynomial: {
        double acc = 0.0;
        const auto& c = mob.coefficients;
        for (std::size_t a = 0; a < c.size(); ++a)
            for (std::size_t b = 0; b < c.size(); ++b)
                acc += c[a][b] * 0.5 *
                       (moment_slope(a, density) * moment(b, density_other) +
                        moment(a, density_other) * moment_slope(b, density));
        return acc;
    }
    }
    return 0.0;
}

} // namespace lrgl
