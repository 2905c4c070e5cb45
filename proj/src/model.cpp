#include "lrgl/model.hpp"

#include <cmath>
#include <sstream>

#include "lrgl/error.hpp"

namespace lrgl {

namespace {

std::vector<double> trimmed(std::vector<double> c) {
    while (!c.empty() && c.back() == 0.0) c.pop_back();
    return c;
}

double horner(const std::vector<double>& c, double x) {
    double acc = 0.0;
    for (auto it = c.rbegin(); it != c.rend(); ++it) acc = acc * x + *it;
    return acc;
}

double horner_slope(const std::vector<double>& c, double x) {
    double acc = 0.0;
    for (std::size_t k = c.size(); k-- > 1;) acc = acc * x + static_cast<double>(k) * c[k];
    return acc;
}

double horner_curvature(const std::vector<double>& c, double x) {
    double acc = 0.0;
    for (std::size_t k = c.size(); k-- > 2;) acc = acc * x + static_cast<double>(k * (k - 1)) * c[k];
    return acc;
}

// Σ_ab c[a][b] x^a y^b and its derivative in x.
double bivariate(const std::vector<std::vector<double>>& c, double x, double y) {
    double acc = 0.0;
    for (std::size_t a = c.size(); a-- > 0;) acc = acc * x + horner(c[a], y);
    return acc;
}

double bivariate_dx(const std::vector<std::vector<double>>& c, double x, double y) {
    double acc = 0.0;
    for (std::size_t a = c.size(); a-- > 1;) acc = acc * x + static_cast<double>(a) * horner(c[a], y);
    return acc;
}

void check_domain(const PotentialSpec& spec, double phi) {
    if (!spec.in_domain(phi)) {
        std::ostringstream os;
        os << "field value " << phi << " outside the domain of potential " << spec.describe();
        throw DomainError(os.str());
    }
}

} // namespace

PotentialSpec PotentialSpec::quadratic(double c) {
    if (!(c > 0.0)) throw DomainError("quadratic potential needs c > 0");
    return {Family::quadratic, {0.0, 0.0, c}, FieldDomain::real_line};
}

PotentialSpec PotentialSpec::quartic(double c4, double c2) {
    if (!(c4 > 0.0)) throw DomainError("quartic potential needs c4 > 0");
    return {Family::quartic, {0.0, 0.0, c2, 0.0, c4}, FieldDomain::real_line};
}

PotentialSpec PotentialSpec::bem_log() { return {Family::bem_log, {}, FieldDomain::positive_half_line}; }

PotentialSpec PotentialSpec::polynomial(std::vector<double> coefficients, FieldDomain domain) {
    return {Family::polynomial, trimmed(std::move(coefficients)), domain};
}

bool PotentialSpec::in_domain(double phi) const {
    if (!std::isfinite(phi)) return false;
    return domain == FieldDomain::real_line || phi > 0.0;
}

Interval PotentialSpec::admissible_lambda() const {
    constexpr double inf = std::numeric_limits<double>::infinity();
    if (family == Family::bem_log) return {0.0, inf};
    const auto c = trimmed(coefficients);
    const std::size_t degree = c.empty() ? 0 : c.size() - 1;
    const double lead = c.empty() ? 0.0 : c.back();
    if (domain == FieldDomain::real_line) {
        if (degree >= 2 && degree % 2 == 0 && lead > 0.0) return {-inf, inf};
        return {0.0, 0.0};
    }
    if (degree >= 2) return lead > 0.0 ? Interval{-inf, inf} : Interval{0.0, 0.0};
    if (degree == 1) return {-lead, inf};
    return {0.0, inf};
}

Interval PotentialSpec::achievable_mean() const {
    constexpr double inf = std::numeric_limits<double>::infinity();
    const Interval lam = admissible_lambda();
    if (!(lam.lo < lam.hi)) return {0.0, 0.0};
    if (domain == FieldDomain::real_line) return {-inf, inf};
    return {0.0, inf};
}

std::string PotentialSpec::describe() const {
    std::ostringstream os;
    switch (family) {
    case Family::quadratic: os << "quadratic(c=" << coefficients.at(2) << ")"; break;
    case Family::quartic: os << "quartic(c4=" << coefficients.at(4) << ", c2=" << coefficients.at(2) << ")"; break;
    case Family::bem_log: os << "bem_log"; break;
    case Family::polynomial:
        os << "polynomial[";
        for (std::size_t k = 0; k < coefficients.size(); ++k) os << (k ? "," : "") << coefficients[k];
        os << "]" << (domain == FieldDomain::real_line ? "" : " on (0,inf)");
        break;
    }
    return os.str();
}

PotentialValue eval_potential(const PotentialSpec& spec, double phi) {
    check_domain(spec, phi);
    if (spec.family == PotentialSpec::Family::bem_log) return {0.5 * std::log(phi), 0.5 / phi};
    return {horner(spec.coefficients, phi), horner_slope(spec.coefficients, phi)};
}

double potential_slope(const PotentialSpec& spec, double phi) {
    if (spec.family == PotentialSpec::Family::bem_log) return 0.5 / phi;
    return horner_slope(spec.coefficients, phi);
}

double potential_curvature(const PotentialSpec& spec, double phi) {
    if (spec.family == PotentialSpec::Family::bem_log) return -0.5 / (phi * phi);
    return horner_curvature(spec.coefficients, phi);
}

MobilitySpec MobilitySpec::constant(double b0) {
    if (!(b0 > 0.0)) throw DomainError("constant mobility needs b0 > 0");
    MobilitySpec m;
    m.family = Family::constant;
    m.scale = b0;
    m.lower_bound = b0;
    return m;
}

MobilitySpec MobilitySpec::product(double c) {
    if (!(c > 0.0)) throw DomainError("product mobility needs c > 0");
    MobilitySpec m;
    m.family = Family::product;
    m.scale = c;
    return m;
}

MobilitySpec MobilitySpec::polynomial(std::vector<std::vector<double>> coefficients, double lower_bound) {
    const std::size_t d = coefficients.size();
    if (d == 0) throw DomainError("polynomial mobility needs coefficients");
    for (const auto& row : coefficients)
        if (row.size() != d) throw DomainError("polynomial mobility coefficients must form a square matrix");
    for (std::size_t a = 0; a < d; ++a)
        for (std::size_t b = 0; b < a; ++b)
            if (coefficients[a][b] != coefficients[b][a])
                throw DomainError("polynomial mobility coefficients must be symmetric");
    if (lower_bound < 0.0) throw DomainError("mobility lower bound must be non-negative");
    MobilitySpec m;
    m.family = Family::polynomial;
    m.coefficients = std::move(coefficients);
    m.lower_bound = lower_bound;
    return m;
}

std::size_t MobilitySpec::degree() const {
    switch (family) {
    case Family::constant: return 0;
    case Family::product: return 1;
    case Family::polynomial: return coefficients.size() - 1;
    }
    return 0;
}

std::string MobilitySpec::describe() const {
    std::ostringstream os;
    switch (family) {
    case Family::constant: os << "constant(" << scale << ")"; break;
    case Family::product: os << "product(" << scale << ")"; break;
    case Family::polynomial: os << "polynomial(degree " << degree() << ", lower bound " << lower_bound << ")"; break;
    }
    return os.str();
}

double mobility_raw(const MobilitySpec& spec, double phi, double phi_other) {
    switch (spec.family) {
    case MobilitySpec::Family::constant: return spec.scale;
    case MobilitySpec::Family::product: return spec.scale * (phi * phi_other);
    case MobilitySpec::Family::polynomial:
        // Averaging both orders makes the result bit-symmetric.
        return 0.5 * (bivariate(spec.coefficients, phi, phi_other) + bivariate(spec.coefficients, phi_other, phi));
    }
    return 0.0;
}

double mobility_d1_raw(const MobilitySpec& spec, double phi, double phi_other) {
    switch (spec.family) {
    case MobilitySpec::Family::constant: return 0.0;
    case MobilitySpec::Family::product: return spec.scale * phi_other;
    case MobilitySpec::Family::polynomial: {
        // ∂₁ of the symmetrized form; ∂₂β(φ,φ′) is obtained as ∂₁β(φ′,φ).
        double acc = 0.0;
        const auto& c = spec.coefficients;
        for (std::size_t a = c.size(); a-- > 0;) {
            double col = 0.0;
            for (std::size_t b = c.size(); b-- > 1;) col = col * phi + static_cast<double>(b) * c[a][b];
            acc = acc * phi_other + col;
        }
        return 0.5 * (bivariate_dx(spec.coefficients, phi, phi_other) + acc);
    }
    }
    return 0.0;
}

MobilityValue eval_mobility(const MobilitySpec& spec, double phi, double phi_other) {
    const double value = mobility_raw(spec, phi, phi_other);
    if (!(value > 0.0) || value < spec.lower_bound) {
        std::ostringstream os;
        os << "mobility " << spec.describe() << " is " << value << " at (" << phi << ", " << phi_other
           << "), below its positivity bound";
        throw PositivityError(os.str());
    }
    return {value, mobility_d1_raw(spec, phi, phi_other), mobility_d1_raw(spec, phi_other, phi)};
}

KernelSpec KernelSpec::power_law(double gamma) {
    KernelSpec k;
    k.kind = Kind::power_law;
    k.gamma = gamma;
    return k;
}

KernelSpec KernelSpec::nearest_neighbor() {
    KernelSpec k;
    k.kind = Kind::nearest_neighbor;
    k.gamma = 2.0;
    return k;
}

KernelSpec KernelSpec::mixed(double amplitude, double gamma) {
    KernelSpec k;
    k.kind = Kind::mixed;
    k.amplitude = amplitude;
    k.gamma = gamma;
    return k;
}

void KernelSpec::validate() const {
    if (kind == Kind::nearest_neighbor) return;
    if (!(gamma > 0.0 && gamma < 2.0)) throw DomainError("kernel exponent must lie in (0,2)");
    if (gamma == 1.0 && !allow_gamma_edge)
        throw DomainError("kernel exponent 1 is excluded unless explicitly allowed");
    if (kind == Kind::mixed && !(amplitude > 0.0)) throw DomainError("mixed kernel needs a > 0");
}

std::string KernelSpec::describe() const {
    std::ostringstream os;
    switch (kind) {
    case Kind::power_law: os << "power-law(gamma=" << gamma << ")"; break;
    case Kind::nearest_neighbor: os << "nearest-neighbor"; break;
    case Kind::mixed: os << "mixed(a=" << amplitude << ", gamma=" << gamma << ")"; break;
    }
    return os.str();
}

double power_law_kernel(double gamma, double z) {
    if (z == 0.0) return 0.0;
    return std::pow(std::abs(z), -(1.0 + gamma));
}

double kernel_value(const KernelSpec& spec, std::int64_t z, std::size_t n) {
    if (n < 2) throw DomainError("kernel evaluation needs a lattice of at least two sites");
    if (z == 0) return 0.0;
    const double dist = static_cast<double>(z < 0 ? -z : z);
    switch (spec.kind) {
    case KernelSpec::Kind::power_law: return power_law_kernel(spec.gamma, dist);
    case KernelSpec::Kind::nearest_neighbor: return dist == 1.0 ? 1.0 : 0.0;
    case KernelSpec::Kind::mixed: {
        const double local = dist == 1.0 ? spec.amplitude * std::pow(static_cast<double>(n), 2.0 - spec.gamma) : 0.0;
        return local + power_law_kernel(spec.gamma, dist);
    }
    }
    return 0.0;
}

ModelSpec ModelSpec::gaussian_additive(double gamma, double left, double right) {
    return {PotentialSpec::quadratic(0.5), MobilitySpec::constant(1.0), KernelSpec::power_law(gamma), left, right};
}

ModelSpec ModelSpec::bem(double gamma, double left, double right) {
    return {PotentialSpec::bem_log(), MobilitySpec::product(4.0), KernelSpec::power_law(gamma), left, right};
}

bool ModelSpec::is_bem() const {
    return potential.family == PotentialSpec::Family::bem_log && mobility.family == MobilitySpec::Family::product;
}

void ModelSpec::validate() const {
    kernel.validate();
    const Interval lam = potential.admissible_lambda();
    if (!(lam.lo < lam.hi))
        throw DomainError("potential " + potential.describe() + " has no admissible chemical potential");
    if (mobility.family == MobilitySpec::Family::product && potential.domain == FieldDomain::real_line)
        throw DomainError("product mobility is only positive on the half-line");
    const Interval means = potential.achievable_mean();
    for (double bath : {bath_left, bath_right}) {
        if (!means.contains_open(bath)) {
            std::ostringstream os;
            os << "bath density " << bath << " outside the achievable mean range of " << potential.describe();
            throw RangeError(os.str());
        }
    }
}

std::string ModelSpec::describe() const {
    std::ostringstream os;
    os << "U=" << potential.describe() << ", beta=" << mobility.describe() << ", K=" << kernel.describe()
       << ", baths=(" << bath_left << ", " << bath_right << ")";
    return os.str();
}

double eval_alpha(const ModelSpec& spec, double phi, double phi_other) {
    check_domain(spec.potential, phi);
    check_domain(spec.potential, phi_other);
    const MobilityValue b = eval_mobility(spec.mobility, phi, phi_other);
    const double force = potential_slope(spec.potential, phi) - potential_slope(spec.potential, phi_other);
    return -(b.value * force) + (b.d1 - b.d2);
}

} // namespace lrgl
