#include "lrgl/mft.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <sstream>

#include <json.hpp>

#include "lrgl/error.hpp"

namespace lrgl {

namespace {

void check_nodal(const WeakFormAssembly& w, std::span<const double> v, const char* what) {
    if (v.size() != w.grid.nodes()) throw ValidationError(std::string(what) + " must be given at every node");
    if (v.front() != 0.0 || v.back() != 0.0) throw ValidationError(std::string(what) + " must vanish at both ends");
}

void check_interior(const WeakFormAssembly& w, std::span<const double> v, const char* what) {
    if (v.size() + 1 != w.grid.cells()) throw ValidationError(std::string(what) + " must have one entry per interior node");
}

std::span<const double> interior_of(std::span<const double> nodal) { return nodal.subspan(1, nodal.size() - 2); }

double trapezoid(const Grid& grid, std::span<const double> f) {
    double acc = 0.5 * (f.front() + f.back());
    for (std::size_t j = 1; j + 1 < f.size(); ++j) acc += f[j];
    return acc * grid.spacing();
}

bool same_value(double a, double b) { return std::abs(a - b) <= 1e-12 * std::max(1.0, std::abs(b)); }

} // namespace

std::vector<double> solve_poisson(const WeakFormAssembly& w, const CoarseModel& coarse, const GridProfile& profile,
                                  std::span<const double> p) {
    check_interior(w, p, "Poisson source");
    const std::size_t m = w.grid.cells();
    const Eigen::MatrixXd b = nodal_mobility(coarse, profile);
    const auto n = static_cast<Eigen::Index>(m - 1);
    Eigen::MatrixXd stiff = Eigen::MatrixXd::Zero(n, n);
    Eigen::VectorXd rhs(n);
    for (std::size_t j = 1; j < m; ++j) {
        const auto r = static_cast<Eigen::Index>(j - 1);
        for (std::size_t i = 0; i <= m; ++i) {
            if (i == j) continue;
            const double c = w(i, j) * b(i, j);
            stiff(r, r) += c;
            if (i >= 1 && i < m) stiff(r, static_cast<Eigen::Index>(i - 1)) -= c;
        }
        rhs[r] = w.grid.spacing() * p[j - 1];
    }
    const Eigen::LLT<Eigen::MatrixXd> llt(stiff);
    if (llt.info() != Eigen::Success) throw DegeneracyError("fractional Poisson matrix is not positive definite");
    const Eigen::VectorXd h = llt.solve(rhs);
    if (!h.allFinite()) throw DegeneracyError("fractional Poisson solve produced non-finite values");
    const double resid = (stiff * h - rhs).cwiseAbs().maxCoeff();
    if (resid > 1e-10 * std::max(1.0, rhs.cwiseAbs().maxCoeff() + stiff.cwiseAbs().maxCoeff() * h.cwiseAbs().maxCoeff()))
        throw DegeneracyError("fractional Poisson residual " + std::to_string(resid) + " is too large");
    std::vector<double> out(m + 1, 0.0);
    for (std::size_t j = 1; j < m; ++j) out[j] = h[static_cast<Eigen::Index>(j - 1)];
    return out;
}

double sobolev_norm(const WeakFormAssembly& w, const CoarseModel& coarse, const GridProfile& profile,
                    std::span<const double> psi) {
    const std::vector<double> h = solve_poisson(w, coarse, profile, psi);
    return pairing(w.grid, psi, interior_of(h));
}

RateResult rate_functional(const WeakFormAssembly& w, const CoarseModel& coarse, const HydroTrajectory& path) {
    const std::size_t steps = path.profiles.size();
    if (steps < 2 || path.times.size() != steps) throw ValidationError("rate functional needs at least two timed profiles");
    for (std::size_t k = 1; k < steps; ++k)
        if (!(path.times[k] > path.times[k - 1])) throw ValidationError("path times must increase");

    RateResult out;
    out.times = path.times;
    const double left = coarse.model().bath_left, right = coarse.model().bath_right;
    for (std::size_t k = 0; k < steps; ++k) {
        const GridProfile& p = path.profiles[k];
        if (p.values.size() != w.grid.nodes()) throw ValidationError("profile size differs from the grid");
        if (!same_value(p.left(), left) || !same_value(p.right(), right)) {
            std::ostringstream os;
            os << "boundary values (" << p.left() << ", " << p.right() << ") at t = " << path.times[k]
               << " differ from the bath densities (" << left << ", " << right << ")";
            out.value = out.value_mobility = RateResult::infinite;
            out.boundary_ok = false;
            out.diagnostic = os.str();
            out.lagrangian.clear();
            return out;
        }
    }

    const std::size_t m = w.grid.cells();
    std::vector<double> alt(steps);
    for (std::size_t k = 0; k < steps; ++k) {
        const std::size_t lo = k == 0 ? 0 : k - 1, hi = k + 1 == steps ? k : k + 1;
        const double span = path.times[hi] - path.times[lo];
        const Interior a = apply_A(w, coarse, path.profiles[k]);
        Interior psi(m - 1);
        for (std::size_t j = 1; j < m; ++j)
            psi[j - 1] = (path.profiles[hi].values[j] - path.profiles[lo].values[j]) / span - a[j - 1];
        std::vector<double> h = solve_poisson(w, coarse, path.profiles[k], psi);
        out.lagrangian.push_back(0.25 * pairing(w.grid, psi, interior_of(h)));
        alt[k] = 0.25 * mobility_form(w, coarse, path.profiles[k], h);
        out.drives.push_back(std::move(h));
    }
    for (std::size_t k = 1; k < steps; ++k) {
        const double dt = path.times[k] - path.times[k - 1];
        out.value += 0.5 * dt * (out.lagrangian[k] + out.lagrangian[k - 1]);
        out.value_mobility += 0.5 * dt * (alt[k] + alt[k - 1]);
    }
    const double gap = std::abs(out.value - out.value_mobility);
    if (gap > 1e-9 * std::max(std::abs(out.value), std::abs(out.value_mobility)) && gap > 1e-300) {
        std::ostringstream os;
        os << "the two rate expressions disagree: " << out.value << " vs " << out.value_mobility;
        throw NumericalError(os.str(), 0);
    }
    return out;
}

double hamiltonian(const WeakFormAssembly& w, const CoarseModel& coarse, const GridProfile& profile,
                   std::span<const double> p) {
    check_nodal(w, p, "costate");
    const Interior a = apply_A(w, coarse, profile);
    return pairing(w.grid, a, interior_of(p)) + mobility_form(w, coarse, profile, p);
}

double lagrangian(const WeakFormAssembly& w, const CoarseModel& coarse, const GridProfile& profile,
                  std::span<const double> velocity) {
    check_interior(w, velocity, "velocity");
    Interior psi = apply_A(w, coarse, profile);
    for (std::size_t j = 0; j < psi.size(); ++j) psi[j] = velocity[j] - psi[j];
    return 0.25 * sobolev_norm(w, coarse, profile, psi);
}

Interior legendre_velocity(const WeakFormAssembly& w, const CoarseModel& coarse, const GridProfile& profile,
                           std::span<const double> p) {
    Interior a = apply_A(w, coarse, profile);
    const Interior bp = apply_B(w, coarse, profile, p);
    for (std::size_t j = 0; j < a.size(); ++j) a[j] -= 2.0 * bp[j];
    return a;
}

double hj_residual(const WeakFormAssembly& w, const CoarseModel& coarse, std::span<const double> dv,
                   const GridProfile& profile) {
    check_nodal(w, dv, "quasi-potential derivative");
    if (profile.values.size() != w.grid.nodes()) throw ValidationError("profile size differs from the grid");
    std::vector<double> field(dv.size());
    for (std::size_t j = 0; j < dv.size(); ++j) field[j] = dv[j] - coarse.entropy_slope(profile.values[j]);
    const Interior b = apply_B_unrestricted(w, coarse, profile, field);
    return pairing(w.grid, interior_of(dv), b);
}

double additive_quasipotential_density(const CoarseModel& coarse, double density, double stationary) {
    return coarse.entropy(density) - coarse.entropy(stationary) -
           coarse.entropy_slope(stationary) * (density - stationary);
}

QuasiPotentialValue quasipotential_additive(const CoarseModel& coarse, const GridProfile& profile,
                                            const GridProfile& stationary, const WeakFormAssembly* w) {
    if (!coarse.constant_mobility())
        throw DomainError("the additive quasi-potential formula needs a constant mobility, got " +
                          coarse.model().mobility.describe());
    if (profile.values.size() != stationary.values.size()) throw ValidationError("profiles on different grids");
    if (profile.values.size() < 2) throw ValidationError("profile needs at least two nodes");
    if (!same_value(profile.left(), stationary.left()) || !same_value(profile.right(), stationary.right()))
        throw ValidationError("quasi-potential needs matching boundary values");
    QuasiPotentialValue out;
    out.integrand.resize(profile.values.size());
    for (std::size_t j = 0; j < profile.values.size(); ++j)
        out.integrand[j] = additive_quasipotential_density(coarse, profile.values[j], stationary.values[j]);
    const Grid grid(profile.values.size() - 1);
    out.value = trapezoid(grid, out.integrand);
    if (w != nullptr) {
        std::vector<double> dv(profile.values.size(), 0.0);
        for (std::size_t j = 1; j + 1 < dv.size(); ++j)
            dv[j] = coarse.entropy_slope(profile.values[j]) - coarse.entropy_slope(stationary.values[j]);
        out.hj_residual = hj_residual(*w, coarse, dv, profile);
    }
    return out;
}

LyapunovReport lyapunov_check(const CoarseModel& coarse, const HydroTrajectory& trajectory,
                              const GridProfile& stationary, double tolerance) {
    LyapunovReport out;
    for (std::size_t k = 0; k < trajectory.profiles.size(); ++k) {
        out.values.push_back(quasipotential_additive(coarse, trajectory.profiles[k], stationary).value);
        if (k == 0) continue;
        const double rise = out.values[k] - out.values[k - 1];
        out.max_increase = std::max(out.max_increase, rise);
        if (rise > tolerance) out.violations.push_back(k);
    }
    return out;
}

namespace {

// Pair terms of ℍ = Σ_{i<k} W B [(s_i − s_k)(p_k − p_i) + (p_k − p_i)²] that involve node m, with Φ_m = x.
double local_hamiltonian(const WeakFormAssembly& w, const CoarseModel& coarse, const GridProfile& profile,
                         std::span<const double> p, std::size_t m, double x) {
    const double sm = coarse.entropy_slope(x);
    const bool constant = coarse.constant_mobility();
    const double b0 = constant ? coarse.mobility(x, x) : 0.0;
    double acc = 0.0;
    for (std::size_t i = 0; i < profile.values.size(); ++i) {
        if (i == m) continue;
        const double wi = w(i, m);
        if (wi == 0.0) continue;
        const double phi = profile.values[i];
        const double b = constant ? b0 : (i < m ? coarse.mobility(phi, x) : coarse.mobility(x, phi));
        const double dp = p[m] - p[i];
        acc += wi * b * ((coarse.entropy_slope(phi) - sm) * dp + dp * dp);
    }
    return acc;
}

} // namespace

HamiltonianGradient hamiltonian_gradient(const WeakFormAssembly& w, const CoarseModel& coarse,
                                         const GridProfile& profile, std::span<const double> p, double epsilon) {
    check_nodal(w, p, "costate");
    if (profile.values.size() != w.grid.nodes()) throw ValidationError("profile size differs from the grid");
    if (!(epsilon > 0.0)) throw ValidationError("finite-difference step must be positive");
    const std::size_t m = w.grid.cells();
    const double inv_h = static_cast<double>(m);
    HamiltonianGradient out;
    out.values.resize(m - 1);
    double scale = 0.0, gap = 0.0;
    for (std::size_t j = 1; j < m; ++j) {
        const double x = profile.values[j];
        auto diff = [&](double e) {
            return (local_hamiltonian(w, coarse, profile, p, j, x + e) -
                    local_hamiltonian(w, coarse, profile, p, j, x - e)) / (2.0 * e);
        };
        const double g1 = diff(epsilon), g2 = diff(2.0 * epsilon);
        out.values[j - 1] = g1 * inv_h;
        scale = std::max(scale, std::abs(g1));
        gap = std::max(gap, std::abs(g1 - g2));
    }
    out.noise = scale > 0.0 ? gap / scale : gap;
    return out;
}

CharacteristicsStep characteristics_step(const WeakFormAssembly& w, const CoarseModel& coarse,
                                         const GridProfile& profile, std::span<const double> p, double dt) {
    if (!(dt > 0.0)) throw ValidationError("time step must be positive");
    const Interior velocity = legendre_velocity(w, coarse, profile, p);
    const HamiltonianGradient grad = hamiltonian_gradient(w, coarse, profile, p);
    CharacteristicsStep out{profile, std::vector<double>(p.begin(), p.end()), {}};
    for (std::size_t j = 1; j + 1 < out.costate.size(); ++j) {
        out.profile.values[j] += dt * velocity[j - 1];
        out.costate[j] -= dt * grad.values[j - 1];
    }
    if (grad.noise > 1e-4) {
        std::ostringstream os;
        os << "linearisation noise " << grad.noise << " in the costate update";
        out.warning = os.str();
    }
    return out;
}

void write_rate_json(std::ostream& out, const RateResult& r) {
    nlohmann::json j;
    j["I"] = std::isfinite(r.value) ? nlohmann::json(r.value) : nlohmann::json("inf");
    j["I_mobility"] = std::isfinite(r.value_mobility) ? nlohmann::json(r.value_mobility) : nlohmann::json("inf");
    j["boundary_ok"] = r.boundary_ok;
    j["diagnostic"] = r.diagnostic;
    j["times"] = r.times;
    j["lagrangian"] = r.lagrangian;
    j["drives"] = r.drives;
    out << j.dump(2) << '\n';
}

void write_quasipotential_json(std::ostream& out, const QuasiPotentialValue& v) {
    nlohmann::json j;
    j["V"] = v.value;
    j["integrand"] = v.integrand;
    j["hj_residual"] = v.hj_residual ? nlohmann::json(*v.hj_residual) : nlohmann::json(nullptr);
    out << j.dump(2) << '\n';
}

void write_drives_csv(std::ostream& out, const RateResult& r, const std::string& meta) {
    if (r.drives.empty()) throw ValidationError("no drives to write");
    const std::size_t nodes = r.drives.front().size();
    out << "# " << meta << "\nt";
    for (std::size_t j = 0; j < nodes; ++j) out << ",H_" << j;
    out << '\n';
    out.precision(17);
    for (std::size_t k = 0; k < r.drives.size(); ++k) {
        out << r.times[k];
        for (double v : r.drives[k]) out << ',' << v;
        out << '\n';
    }
}

} // namespace lrgl
