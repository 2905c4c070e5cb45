#include "lrgl/sde.hpp"

#include <algorithm>
#include <array>
#include <exception>
#include <mutex>
#include <atomic>
#include <chrono>
#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>
#include <thread>

#include "lrgl/error.hpp"
#include "lrgl/rng.hpp"

namespace lrgl {

double FieldState::volume() const {
    double acc = 0.0;
    for (double v : phi) acc += v;
    return acc;
}

double BemState::energy() const {
    double acc = 0.0;
    for (double w : omega) acc += w * w;
    return acc;
}

DriveField DriveField::analytic(std::function<double(double, double)> h) {
    DriveField d;
    d.eval_ = std::move(h);
    return d;
}

DriveField DriveField::tabulated(std::vector<double> times, std::vector<std::vector<double>> values) {
    if (times.empty() || times.size() != values.size()) throw ValidationError("drive table shape mismatch");
    for (std::size_t k = 1; k < times.size(); ++k)
        if (!(times[k] > times[k - 1])) throw ValidationError("drive table times must increase");
    const std::size_t nodes = values.front().size();
    if (nodes < 2) throw ValidationError("drive table needs at least two nodes");
    for (const auto& row : values)
        if (row.size() != nodes) throw ValidationError("drive table rows differ in length");
    DriveField d;
    d.horizon_ = times.back();
    auto t_ptr = std::make_shared<const std::vector<double>>(std::move(times));
    auto v_ptr = std::make_shared<const std::vector<std::vector<double>>>(std::move(values));
    d.eval_ = [t_ptr, v_ptr](double t, double u) {
        const auto& ts = *t_ptr;
        const auto& vs = *v_ptr;
        auto row_at = [&](std::size_t k) {
            const std::size_t m = vs[k].size() - 1;
            const double pos = std::clamp(u, 0.0, 1.0) * static_cast<double>(m);
            const std::size_t j = std::min(static_cast<std::size_t>(pos), m - 1);
            const double f = pos - static_cast<double>(j);
            return (1.0 - f) * vs[k][j] + f * vs[k][j + 1];
        };
        if (ts.size() == 1 || t <= ts.front()) return row_at(0);
        if (t >= ts.back()) return row_at(ts.size() - 1);
        const auto it = std::upper_bound(ts.begin(), ts.end(), t);
        const std::size_t k = static_cast<std::size_t>(it - ts.begin()) - 1;
        const double f = (t - ts[k]) / (ts[k + 1] - ts[k]);
        return (1.0 - f) * row_at(k) + f * row_at(k + 1);
    };
    return d;
}

DriveField DriveField::read_csv(std::istream& in) {
    std::string line;
    bool header = false;
    std::vector<double> times;
    std::vector<std::vector<double>> values;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        if (!header) {
            header = true;
            continue;
        }
        std::stringstream ss(line);
        std::string cell;
        std::vector<double> row;
        while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
        if (row.size() < 3) throw ValidationError("drive CSV row too short");
        times.push_back(row.front());
        values.emplace_back(row.begin() + 1, row.end());
    }
    return tabulated(std::move(times), std::move(values));
}

StepTally::StepTally(std::size_t n, bool currents, bool weight)
    : flow(currents ? n + 1 : 0, 0.0), drift_flow(currents ? n + 1 : 0, 0.0), track_currents(currents),
      track_weight(weight) {}

Lattice::Lattice(const KernelSpec& kernel, std::size_t n, double cutoff) : kernel_(kernel), n_(n) {
    kernel_.validate();
    if (n < 2) throw DomainError("lattice needs at least two sites");
    by_distance_.assign(n, 0.0);
    double total = 0.0, kept = 0.0;
    for (std::size_t d = 1; d < n; ++d) {
        const double k = kernel_value(kernel_, static_cast<std::int64_t>(d), n);
        const double weight = k * static_cast<double>(n - d);
        total += weight;
        if (k > 0.0 && k >= cutoff) {
            by_distance_[d] = k;
            reach_ = d;
            kept += weight;
        }
    }
    for (std::size_t d = reach_ + 1; d < n; ++d) by_distance_[d] = 0.0;
    truncated_ = total > 0.0 ? (total - kept) / total : 0.0;
    std::vector<double> prefix(n, 0.0);
    for (std::size_t d = 1; d < n; ++d) prefix[d] = prefix[d - 1] + by_distance_[d];
    for (std::size_t x = 0; x < n; ++x)
        max_row_sum_ = std::max(max_row_sum_, prefix[x] + prefix[n - 1 - x]);
}

double Lattice::micro_time(double macro) const {
    return macro * std::pow(static_cast<double>(n_), kernel_.time_exponent());
}

double Lattice::macro_time(double micro) const {
    return micro / std::pow(static_cast<double>(n_), kernel_.time_exponent());
}

namespace {

struct ConstantMobility {
    double b0;
    double beta(double, double) const { return b0; }
    double alpha(double, double, double sx, double sy, double) const { return -(b0 * (sx - sy)); }
    double root(double) const { return 1.0; }
};

struct ProductMobility {
    double c;
    double beta(double px, double py) const { return c * (px * py); }
    double alpha(double px, double py, double sx, double sy, double b) const {
        return -(b * (sx - sy)) + (c * py - c * px);
    }
    double root(double b) const { return std::sqrt(b); }
};

struct PolynomialMobility {
    const MobilitySpec* spec;
    double beta(double px, double py) const { return mobility_raw(*spec, px, py); }
    double alpha(double px, double py, double sx, double sy, double b) const {
        return -(b * (sx - sy)) + (mobility_d1_raw(*spec, px, py) - mobility_d1_raw(*spec, py, px));
    }
    double root(double b) const { return std::sqrt(b); }
};

struct SweepArgs {
    std::span<const double> phi;
    std::span<const double> slope;
    std::span<const double> drive;
    const Lattice* lattice;
    std::span<const double> amp;  // √(2·K(d)·dt·scale)
    double dt;
    const RngContext* rng;
    std::span<double> delta;
    StepTally* tally;
    double lower_bound;
};

template <class Mob, bool Drive, bool Tally>
void pair_sweep(const Mob& mob, const SweepArgs& a) {
    const std::size_t n = a.phi.size();
    const std::size_t reach = a.lattice->reach();
    const double dt = a.dt;
    double term_noise = 0.0, term_quad = 0.0;
    double min_beta = std::numeric_limits<double>::infinity();
    double* flow = Tally ? a.tally->flow.data() : nullptr;
    double* dflow = Tally ? a.tally->drift_flow.data() : nullptr;
    for (std::size_t x = 0; x + 1 < n; ++x) {
        CounterStream stream(a.rng->key, a.rng->step, static_cast<std::uint32_t>(x), a.rng->sub);
        const double px = a.phi[x];
        const double sx = a.slope[x];
        const double hx = Drive ? a.drive[x] : 0.0;
        const std::size_t ymax = std::min(n - 1, x + reach);
        double acc = 0.0;
        for (std::size_t y = x + 1; y <= ymax; ++y) {
            const std::size_t d = y - x;
            const double k = a.lattice->kernel_at(d);
            const double py = a.phi[y];
            const double b = mob.beta(px, py);
            min_beta = std::min(min_beta, b);
            double drift = k * mob.alpha(px, py, a.slope[x], a.slope[y], b);
            (void)sx;
            double g = 0.0;
            if constexpr (Drive) {
                g = hx - a.drive[y];
                drift += k * b * g;
            }
            const double noise = a.amp[d] * mob.root(b) * stream.normal();
            const double inc = drift * dt + noise;
            acc += inc;
            a.delta[y] -= inc;
            if constexpr (Tally) {
                flow[x] -= inc;
                flow[y] += inc;
                dflow[x] -= drift * dt;
                dflow[y] += drift * dt;
            }
            if constexpr (Drive) {
                term_noise += g * (k * b * g * dt + noise);
                term_quad += 2.0 * k * b * g * g;
            }
        }
        a.delta[x] += acc;
    }
    if (!(min_beta > 0.0) || min_beta < a.lower_bound)
        throw PositivityError("mobility left its positivity bound during a bulk step");
    if constexpr (Drive) {
        if (a.tally && a.tally->track_weight) a.tally->log_weight += -0.5 * term_noise + dt / 8.0 * term_quad;
    }
}

template <class Mob>
void dispatch_sweep(const Mob& mob, const SweepArgs& a, bool drive, bool tally) {
    if (drive && tally) pair_sweep<Mob, true, true>(mob, a);
    else if (drive) pair_sweep<Mob, true, false>(mob, a);
    else if (tally) pair_sweep<Mob, false, true>(mob, a);
    else pair_sweep<Mob, false, false>(mob, a);
}

std::string describe_site(std::size_t x, double v) {
    std::ostringstream os;
    os << "site " << (x + 1) << " value " << v;
    return os.str();
}

} // namespace

GlIntegrator::GlIntegrator(const ModelSpec& model, const Lattice& lattice, BoundaryMode boundary, double lambda_left,
                           double lambda_right)
    : model_(model), lattice_(lattice), boundary_(boundary), lambda_left_(lambda_left), lambda_right_(lambda_right) {}

std::vector<double> GlIntegrator::bulk_drift(std::span<const double> phi, std::span<const double> drive_sites) const {
    const std::size_t n = phi.size();
    std::vector<double> out(n, 0.0);
    const bool drive = !drive_sites.empty();
    for (std::size_t x = 0; x < n; ++x) {
        for (std::size_t y = 0; y < n; ++y) {
            if (y == x) continue;
            const std::size_t d = x > y ? x - y : y - x;
            const double k = lattice_.kernel_at(d);
            if (k == 0.0) continue;
            out[x] += k * eval_alpha(model_, phi[x], phi[y]);
            if (drive)
                out[x] -= k * eval_mobility(model_.mobility, phi[x], phi[y]).value * (drive_sites[y] - drive_sites[x]);
        }
    }
    return out;
}

std::vector<double> GlIntegrator::bath_drift(std::span<const double> phi, std::span<const double> drive_sites) const {
    const std::size_t n = phi.size();
    std::vector<double> out(n, 0.0);
    if (boundary_ != BoundaryMode::baths) return out;
    const bool drive = !drive_sites.empty();
    out[0] += -(lambda_left_ + eval_potential(model_.potential, phi[0]).slope) + (drive ? drive_sites[0] : 0.0);
    out[n - 1] +=
        -(lambda_right_ + eval_potential(model_.potential, phi[n - 1]).slope) + (drive ? drive_sites[n - 1] : 0.0);
    return out;
}

void GlIntegrator::bulk_increments(std::span<const double> phi, double dt, std::span<const double> drive_sites,
                                   const RngContext& rng, std::span<double> delta, StepTally* tally) const {
    const std::size_t n = phi.size();
    if (n != lattice_.size()) throw ValidationError("state size differs from the lattice size");
    std::vector<double> slope(n);
    for (std::size_t x = 0; x < n; ++x) {
        if (!model_.potential.in_domain(phi[x])) throw DomainError("bulk step from " + describe_site(x, phi[x]));
        slope[x] = potential_slope(model_.potential, phi[x]);
    }
    const MobilitySpec& mob = model_.mobility;
    const double scale = mob.family == MobilitySpec::Family::constant ? mob.scale : 1.0;
    std::vector<double> amp(lattice_.reach() + 1, 0.0);
    for (std::size_t d = 1; d <= lattice_.reach(); ++d) amp[d] = std::sqrt(2.0 * lattice_.kernel_at(d) * scale * dt);
    SweepArgs args{phi, slope, drive_sites, &lattice_, amp, dt, &rng, delta, tally, mob.lower_bound};
    const bool drive = !drive_sites.empty();
    const bool currents = tally && tally->track_currents;
    switch (mob.family) {
    case MobilitySpec::Family::constant: dispatch_sweep(ConstantMobility{mob.scale}, args, drive, currents); break;
    case MobilitySpec::Family::product: dispatch_sweep(ProductMobility{mob.scale}, args, drive, currents); break;
    case MobilitySpec::Family::polynomial: dispatch_sweep(PolynomialMobility{&mob}, args, drive, currents); break;
    }
}

void GlIntegrator::bath_increments(std::span<const double> phi, double dt, std::span<const double> drive_sites,
                                   const RngContext& rng, std::span<double> delta, StepTally* tally) const {
    if (boundary_ != BoundaryMode::baths) return;
    const std::size_t n = phi.size();
    const bool drive = !drive_sites.empty();
    const double amp = std::sqrt(2.0 * dt);
    const std::array<std::size_t, 2> sites{0, n - 1};
    const std::array<double, 2> lambdas{lambda_left_, lambda_right_};
    for (std::size_t side = 0; side < 2; ++side) {
        const std::size_t x = sites[side];
        CounterStream stream(rng.key, rng.step, static_cast<std::uint32_t>(n + side), rng.sub);
        const double h = drive ? drive_sites[x] : 0.0;
        const double drift = -(lambdas[side] + eval_potential(model_.potential, phi[x]).slope) + h;
        const double noise = amp * stream.normal();
        delta[x] += drift * dt + noise;
        if (drive && tally && tally->track_weight)
            tally->log_weight += -0.5 * h * (h * dt + noise) + dt / 8.0 * 2.0 * h * h;
    }
}

double GlIntegrator::stable_dt(std::span<const double> phi, double c_stab) const {
    double lo = *std::min_element(phi.begin(), phi.end());
    double hi = *std::max_element(phi.begin(), phi.end());
    const double pad = 0.1 * std::max(hi - lo, 1e-3 * std::max(1.0, std::max(std::abs(lo), std::abs(hi))));
    lo -= pad;
    hi += pad;
    if (model_.potential.domain == FieldDomain::positive_half_line) lo = std::max(lo, 0.05 * std::max(hi, 1e-3));
    double sup_alpha = 0.0, sup_curv = 0.0;
    constexpr int pts = 24;
    for (int i = 0; i <= pts; ++i) {
        const double a = lo + (hi - lo) * i / pts;
        sup_curv = std::max(sup_curv, std::abs(potential_curvature(model_.potential, a)));
        for (int j = 0; j <= pts; ++j) {
            const double b = lo + (hi - lo) * j / pts;
            const double h = 1e-6 * std::max(1.0, std::max(std::abs(a), std::abs(b)));
            const double da = (eval_alpha(model_, a + h, b) - eval_alpha(model_, a - h, b)) / (2 * h);
            const double db = (eval_alpha(model_, a, b + h) - eval_alpha(model_, a, b - h)) / (2 * h);
            sup_alpha = std::max(sup_alpha, std::abs(da) + std::abs(db));
        }
    }
    double rate = lattice_.max_row_sum() * sup_alpha;
    if (boundary_ == BoundaryMode::baths) rate = std::max(rate, sup_curv);
    return c_stab / std::max(rate, 1e-300);
}

FieldState step_bulk(const FieldState& state, const ModelSpec& model, const Lattice& lattice, double dt,
                     const DriveField& drive, const RngContext& rng) {
    GlIntegrator integ(model, lattice, BoundaryMode::free, 0.0, 0.0);
    const std::size_t n = state.size();
    std::vector<double> h;
    if (drive.active()) {
        h.resize(n);
        const double t = lattice.macro_time(state.time);
        for (std::size_t x = 0; x < n; ++x) h[x] = drive(t, static_cast<double>(x + 1) / static_cast<double>(n));
    }
    std::vector<double> delta(n, 0.0);
    integ.bulk_increments(state.phi, dt, h, rng, delta, nullptr);
    FieldState out = state;
    for (std::size_t x = 0; x < n; ++x) out.phi[x] += delta[x];
    out.time += dt;
    return out;
}

FieldState step_baths(const FieldState& state, const ModelSpec& model, const ThermoTable& thermo, double dt,
                      const RngContext& rng) {
    const std::size_t n = state.size();
    if (n < 2) throw ValidationError("bath step needs at least two sites");
    const Lattice lattice(model.kernel, n);
    GlIntegrator integ(model, lattice, BoundaryMode::baths, thermo.bath_lambda_left(), thermo.bath_lambda_right());
    std::vector<double> delta(n, 0.0);
    integ.bath_increments(state.phi, dt, {}, rng, delta, nullptr);
    FieldState out = state;
    for (std::size_t x = 0; x < n; ++x) out.phi[x] += delta[x];
    out.time += dt;
    return out;
}

namespace {

// Site-wise ν_Φ draws; closed forms for the Gaussian and BEM families.
class SiteSampler {
public:
    SiteSampler(const ThermoTable& thermo, std::span<const double> densities) : thermo_(thermo) {
        const ModelSpec& m = thermo.model();
        gaussian_ = m.potential.family == PotentialSpec::Family::quadratic;
        bem_ = m.potential.family == PotentialSpec::Family::bem_log;
        densities_.assign(densities.begin(), densities.end());
        if (gaussian_ || bem_) return;
        std::vector<double> unique = densities_;
        std::sort(unique.begin(), unique.end());
        unique.erase(std::unique(unique.begin(), unique.end()), unique.end());
        for (double d : unique) samplers_.emplace_back(d, thermo.sampler(d));
    }

    // Returns φ; for BEM also the signed amplitude ω with φ = ω².
    double draw(std::size_t site, CounterStream& stream, double* omega = nullptr) const {
        const double density = densities_[site];
        if (gaussian_) {
            const double c = thermo_.model().potential.coefficients.at(2);
            return density + stream.normal() / std::sqrt(2.0 * c);
        }
        if (bem_) {
            const double w = std::sqrt(density) * stream.normal();
            if (omega) *omega = w;
            return w * w;
        }
        const auto it = std::lower_bound(samplers_.begin(), samplers_.end(), density,
                                         [](const auto& p, double v) { return p.first < v; });
        return it->second.quantile(stream.uniform());
    }

private:
    const ThermoTable& thermo_;
    bool gaussian_ = false, bem_ = false;
    std::vector<double> densities_;
    std::vector<std::pair<double, ThermoTable::Sampler>> samplers_;
};

std::vector<double> site_drive(const DriveField& drive, double macro_t, std::size_t n) {
    std::vector<double> h(n);
    for (std::size_t x = 0; x < n; ++x) h[x] = drive(macro_t, static_cast<double>(x + 1) / static_cast<double>(n));
    return h;
}

} // namespace

FieldState sample_equilibrium(const ThermoTable& thermo, double density, std::size_t n, std::uint64_t seed) {
    if (!thermo.achievable_mean().contains_open(density)) throw RangeError("density outside the achievable range");
    const std::vector<double> densities(n, density);
    const SiteSampler sampler(thermo, densities);
    FieldState out;
    out.phi.resize(n);
    const std::uint64_t key = replica_key(seed, 0);
    for (std::size_t x = 0; x < n; ++x) {
        CounterStream stream(key, 0, static_cast<std::uint32_t>(x), CounterStream::init_code);
        out.phi[x] = sampler.draw(x, stream);
    }
    return out;
}

std::vector<double> empirical_profile(const FieldState& state, std::size_t bins) {
    const std::size_t n = state.size();
    if (bins == 0 || bins > n) throw ValidationError("bin count must lie in [1, n]");
    std::vector<double> sum(bins, 0.0), count(bins, 0.0);
    for (std::size_t x = 0; x < n; ++x) {
        const std::size_t b = std::min(bins - 1, x * bins / n);
        sum[b] += state.phi[x];
        count[b] += 1.0;
    }
    for (std::size_t b = 0; b < bins; ++b) sum[b] /= count[b];
    return sum;
}

double empirical_pairing(const FieldState& state, const std::function<double(double)>& g) {
    const std::size_t n = state.size();
    double acc = 0.0;
    for (std::size_t x = 0; x < n; ++x) acc += state.phi[x] * g(static_cast<double>(x + 1) / static_cast<double>(n));
    return acc / static_cast<double>(n);
}

double stable_time_step(const SimConfig& config, const ThermoTable& thermo) {
    const Lattice lattice(config.model.kernel, config.n, config.kernel_cutoff);
    std::vector<double> probe(config.n);
    if (config.initial.kind == InitialCondition::Kind::explicit_state) {
        probe = config.initial.state;
    } else {
        // Typical spread of the local equilibrium around the profile.
        for (std::size_t x = 0; x < config.n; ++x) {
            const double u = static_cast<double>(x + 1) / static_cast<double>(config.n);
            const double phi = config.initial.profile(u);
            const double sd = std::sqrt(thermo.variance(phi));
            probe[x] = phi + ((x % 2 == 0) ? 3.0 : -3.0) * sd;
            if (config.model.potential.domain == FieldDomain::positive_half_line) probe[x] = std::max(probe[x], 0.05 * phi);
        }
        probe.push_back(config.model.bath_left);
        probe.push_back(config.model.bath_right);
    }
    if (config.model.is_bem()) {
        // Rotations are unconditionally stable; bound the rate of energy exchange instead.
        return config.c_stab / lattice.max_row_sum();
    }
    GlIntegrator integ(config.model, lattice, config.boundary, thermo.bath_lambda_left(), thermo.bath_lambda_right());
    return integ.stable_dt(probe, config.c_stab);
}

namespace {

struct RunPlan {
    double dt;
    std::size_t steps;
    double micro_horizon;
    std::vector<std::size_t> record_steps;
};

RunPlan plan_run(const SimConfig& config, const ThermoTable& thermo, const Lattice& lattice) {
    if (config.n < 2) throw ValidationError("lattice needs at least two sites");
    if (!(config.horizon > 0.0)) throw ValidationError("horizon must be positive");
    if (config.bins == 0 || config.bins > config.n) throw ValidationError("bins must lie in [1, n]");
    for (std::size_t c : config.current_cuts)
        if (c < 1 || c >= config.n) throw ValidationError("current cuts must be interior");
    if (config.model.is_bem() && config.drive.active())
        throw ValidationError("drive tilting is not available for the rotation dynamics");
    RunPlan plan{};
    plan.micro_horizon = lattice.micro_time(config.horizon);
    const double bound = stable_time_step(config, thermo);
    const double requested = config.dt > 0.0 ? config.dt : bound;
    plan.steps = static_cast<std::size_t>(std::ceil(plan.micro_horizon / requested - 1e-9));
    plan.steps = std::max<std::size_t>(plan.steps, 1);
    plan.dt = plan.micro_horizon / static_cast<double>(plan.steps);
    if (!config.model.is_bem() && plan.dt > bound * (1.0 + 1e-9)) {
        std::ostringstream os;
        os << "time step " << plan.dt << " exceeds the stability bound " << bound;
        throw ValidationError(os.str());
    }
    if (config.drive.active() && config.drive.horizon() < config.horizon * (1.0 - 1e-12))
        throw ValidationError("drive table ends before the simulation horizon");
    plan.record_steps.push_back(0);
    if (config.record_every > 0.0) {
        for (std::size_t r = 1;; ++r) {
            const double t = config.record_every * static_cast<double>(r);
            if (t > config.horizon * (1.0 + 1e-12)) break;
            const auto k = static_cast<std::size_t>(std::llround(lattice.micro_time(t) / plan.dt));
            plan.record_steps.push_back(std::min(k, plan.steps));
        }
    }
    plan.record_steps.push_back(plan.steps);
    std::sort(plan.record_steps.begin(), plan.record_steps.end());
    plan.record_steps.erase(std::unique(plan.record_steps.begin(), plan.record_steps.end()), plan.record_steps.end());
    return plan;
}

class ReplicaRunner {
public:
    ReplicaRunner(const SimConfig& config, const ThermoTable& thermo, const Lattice& lattice, const RunPlan& plan,
                  const SiteSampler& sampler, std::size_t replica)
        : config_(config), lattice_(lattice), plan_(plan), replica_(replica),
          integ_(config.model, lattice, config.boundary, thermo.bath_lambda_left(), thermo.bath_lambda_right()),
          key_(replica_key(config.seed, replica)), tally_(config.n, !config.current_cuts.empty(), config.drive.active()),
          scratch_(config.n, !config.current_cuts.empty(), config.drive.active()), sampler_(sampler) {}

    PathRecord run() {
        const std::size_t n = config_.n;
        bem_ = config_.model.is_bem();
        initialise();
        PathRecord rec;
        rec.seed = config_.seed;
        rec.replica = replica_;
        rec.config_hash = config_.config_hash;
        rec.current_cuts = config_.current_cuts;
        rec.dt = plan_.dt;
        rec.micro_horizon = plan_.micro_horizon;
        std::size_t next_record = 0;
        if (config_.keep_trace && !bem_) {
            rec.trace.times.push_back(0.0);
            rec.trace.states.push_back(phi_);
        }
        for (std::size_t k = 0; k <= plan_.steps; ++k) {
            if (next_record < plan_.record_steps.size() && plan_.record_steps[next_record] == k) {
                record(rec, k);
                ++next_record;
            }
            if (k == plan_.steps) break;
            if (bem_) bem_advance(k);
            else advance(k, static_cast<double>(k) * plan_.dt, plan_.dt, 1, 0, rec);
        }
        rec.steps = plan_.steps;
        rec.halvings = halvings_;
        rec.final_state.phi = phi_;
        rec.final_state.time = plan_.micro_horizon;
        (void)n;
        return rec;
    }

private:
    void initialise() {
        const std::size_t n = config_.n;
        phi_.assign(n, 0.0);
        if (bem_) omega_.assign(n, 0.0);
        switch (config_.initial.kind) {
        case InitialCondition::Kind::explicit_state:
            if (config_.initial.state.size() != n) throw ValidationError("explicit initial state has the wrong size");
            phi_ = config_.initial.state;
            if (bem_)
                for (std::size_t x = 0; x < n; ++x) omega_[x] = std::sqrt(std::max(phi_[x], 0.0));
            break;
        case InitialCondition::Kind::deterministic:
            for (std::size_t x = 0; x < n; ++x) {
                phi_[x] = config_.initial.profile(static_cast<double>(x + 1) / static_cast<double>(n));
                if (bem_) omega_[x] = std::sqrt(std::max(phi_[x], 0.0));
            }
            break;
        case InitialCondition::Kind::local_equilibrium:
            for (std::size_t x = 0; x < n; ++x) {
                CounterStream stream(key_, 0, static_cast<std::uint32_t>(x), CounterStream::init_code);
                phi_[x] = sampler_.draw(x, stream, bem_ ? &omega_[x] : nullptr);
            }
            break;
        }
        for (std::size_t x = 0; x < n; ++x)
            if (!config_.model.potential.in_domain(phi_[x]) && !(bem_ && phi_[x] == 0.0))
                throw DomainError("initial state leaves the potential domain at site " + std::to_string(x + 1));
    }

    void record(PathRecord& rec, std::size_t k) {
        FieldState s;
        s.phi = phi_;
        rec.times.push_back(lattice_.macro_time(static_cast<double>(k) * plan_.dt));
        rec.profiles.push_back(empirical_profile(s, config_.bins));
        rec.volume.push_back(s.volume());
        if (!config_.current_cuts.empty()) {
            std::vector<double> cum(config_.n, 0.0), dcum(config_.n, 0.0);
            double a = 0.0, b = 0.0;
            for (std::size_t c = 0; c + 1 < config_.n; ++c) {
                a += tally_.flow[c];
                b += tally_.drift_flow[c];
                cum[c] = a;
                dcum[c] = b;
            }
            std::vector<double> row, drow;
            for (std::size_t cut : config_.current_cuts) {
                row.push_back(cum[cut - 1]);
                drow.push_back(dcum[cut - 1]);
            }
            rec.currents.push_back(std::move(row));
            rec.drift_currents.push_back(std::move(drow));
        }
        rec.log_weight.push_back(tally_.log_weight);
    }

    void advance(std::size_t step, double t0, double dt, std::uint32_t sub, int depth, PathRecord& rec) {
        const std::size_t n = config_.n;
        std::vector<double> h;
        if (config_.drive.active()) h = site_drive(config_.drive, lattice_.macro_time(t0), n);
        delta_.assign(n, 0.0);
        scratch_.log_weight = 0.0;
        if (scratch_.track_currents) {
            std::fill(scratch_.flow.begin(), scratch_.flow.end(), 0.0);
            std::fill(scratch_.drift_flow.begin(), scratch_.drift_flow.end(), 0.0);
        }
        const RngContext ctx{key_, step, sub};
        integ_.bulk_increments(phi_, dt, h, ctx, delta_, &scratch_);
        integ_.bath_increments(phi_, dt, h, ctx, delta_, &scratch_);

        bool ok = true;
        for (std::size_t x = 0; x < n; ++x) {
            const double v = phi_[x] + delta_[x];
            if (!std::isfinite(v)) throw NumericalError("non-finite field at " + describe_site(x, v), step);
            if (!config_.model.potential.in_domain(v)) ok = false;
        }
        if (!ok) {
            if (depth >= 20) throw NumericalError("field left the potential domain after 20 halvings", step);
            ++halvings_;
            advance(step, t0, 0.5 * dt, 2 * sub, depth + 1, rec);
            advance(step, t0 + 0.5 * dt, 0.5 * dt, 2 * sub + 1, depth + 1, rec);
            return;
        }
        for (std::size_t x = 0; x < n; ++x) phi_[x] += delta_[x];
        if (tally_.track_currents) {
            for (std::size_t c = 0; c <= n; ++c) {
                tally_.flow[c] += scratch_.flow[c];
                tally_.drift_flow[c] += scratch_.drift_flow[c];
            }
        }
        tally_.log_weight += scratch_.log_weight;
        if (config_.keep_trace) {
            rec.trace.times.push_back(t0 + dt);
            rec.trace.states.push_back(phi_);
        }
    }

    void bem_advance(std::size_t step) {
        const std::size_t n = config_.n;
        const double dt = plan_.dt;
        BemState s;
        s.omega = std::move(omega_);
        const RngContext ctx{key_, step, 1};
        bem_step_inplace(s, lattice_, dt, ctx, tally_.track_currents ? &tally_ : nullptr);
        omega_ = std::move(s.omega);
        if (config_.boundary == BoundaryMode::baths) {
            // Ornstein–Uhlenbeck baths on ω, reversible for ν_Φ after squaring.
            const std::array<std::size_t, 2> sites{0, n - 1};
            const std::array<double, 2> lambdas{integ_lambda(0), integ_lambda(1)};
            for (std::size_t side = 0; side < 2; ++side) {
                CounterStream stream(key_, step, static_cast<std::uint32_t>(n + side), 1);
                double& w = omega_[sites[side]];
                w += -lambdas[side] * w * dt + std::sqrt(dt) * stream.normal();
            }
        }
        for (std::size_t x = 0; x < n; ++x) phi_[x] = omega_[x] * omega_[x];
    }

    double integ_lambda(int side) const {
        return side == 0 ? 0.5 / config_.model.bath_left : 0.5 / config_.model.bath_right;
    }

    const SimConfig& config_;
    const Lattice& lattice_;
    const RunPlan& plan_;
    std::size_t replica_;
    GlIntegrator integ_;
    std::uint64_t key_;
    StepTally tally_, scratch_;
    const SiteSampler& sampler_;
    std::vector<double> phi_, omega_, delta_;
    std::size_t halvings_ = 0;
    bool bem_ = false;
};

std::vector<double> initial_densities(const SimConfig& config) {
    std::vector<double> d(config.n, 1.0);
    if (config.initial.kind == InitialCondition::Kind::local_equilibrium)
        for (std::size_t x = 0; x < config.n; ++x)
            d[x] = config.initial.profile(static_cast<double>(x + 1) / static_cast<double>(config.n));
    return d;
}

} // namespace

PathRecord simulate_replica(const SimConfig& config, const ThermoTable& thermo, std::size_t replica) {
    const Lattice lattice(config.model.kernel, config.n, config.kernel_cutoff);
    const RunPlan plan = plan_run(config, thermo, lattice);
    const std::vector<double> densities = initial_densities(config);
    const SiteSampler sampler(thermo, densities);
    ReplicaRunner runner(config, thermo, lattice, plan, sampler, replica);
    return runner.run();
}

SimulationResult simulate(const SimConfig& config, const ThermoTable& thermo) {
    const auto start = std::chrono::steady_clock::now();
    const Lattice lattice(config.model.kernel, config.n, config.kernel_cutoff);
    const RunPlan plan = plan_run(config, thermo, lattice);
    const std::vector<double> densities = initial_densities(config);
    const SiteSampler sampler(thermo, densities);

    SimulationResult result;
    result.replicas.resize(config.replicas);
    result.dt = plan.dt;
    result.steps = plan.steps;
    result.truncated_fraction = lattice.truncated_fraction();

    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto worker = [&] {
        for (;;) {
            const std::size_t r = next.fetch_add(1);
            if (r >= config.replicas) return;
            try {
                ReplicaRunner runner(config, thermo, lattice, plan, sampler, r);
                result.replicas[r] = runner.run();
            } catch (...) {
                std::lock_guard<std::mutex> lock(failure_mutex);
                if (!failure) failure = std::current_exception();
                next.store(config.replicas);
                return;
            }
        }
    };
    const std::size_t threads = std::max<std::size_t>(1, std::min(config.threads, config.replicas));
    if (threads == 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t i = 0; i < threads; ++i) pool.emplace_back(worker);
    }
    if (failure) std::rethrow_exception(failure);
    result.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return result;
}

std::vector<std::vector<double>> mean_profiles(const SimulationResult& result) {
    if (result.replicas.empty()) return {};
    std::vector<std::vector<double>> out = result.replicas.front().profiles;
    for (std::size_t r = 1; r < result.replicas.size(); ++r)
        for (std::size_t k = 0; k < out.size(); ++k)
            for (std::size_t b = 0; b < out[k].size(); ++b) out[k][b] += result.replicas[r].profiles[k][b];
    const double inv = 1.0 / static_cast<double>(result.replicas.size());
    for (auto& row : out)
        for (double& v : row) v *= inv;
    return out;
}

double log_radon_nikodym(const ModelSpec& model, const ThermoTable& thermo, const Lattice& lattice,
                         BoundaryMode boundary, const PathTrace& trace, const DriveField& drive) {
    if (!drive.active()) return 0.0;
    if (trace.times.size() != trace.states.size() || trace.times.size() < 2)
        throw ValidationError("trace needs matching times and states");
    const double end = lattice.macro_time(trace.times.back());
    if (drive.horizon() < end * (1.0 - 1e-12)) throw ValidationError("drive time grid ends before the recorded path");
    GlIntegrator integ(model, lattice, boundary, thermo.bath_lambda_left(), thermo.bath_lambda_right());
    const std::size_t n = lattice.size();
    double total = 0.0;
    for (std::size_t k = 0; k + 1 < trace.times.size(); ++k) {
        const double dt = trace.times[k + 1] - trace.times[k];
        if (!(dt > 0.0)) throw ValidationError("trace times must increase");
        const auto& phi = trace.states[k];
        const auto& next = trace.states[k + 1];
        const std::vector<double> h = site_drive(drive, lattice.macro_time(trace.times[k]), n);
        const std::vector<double> bulk = integ.bulk_drift(phi);
        const std::vector<double> bath = integ.bath_drift(phi);
        // −½ Σ H·(Δφ − b dt) + (dt/8)·Hᵀ a H with a the noise covariance rate.
        double linear = 0.0, quad = 0.0;
        for (std::size_t x = 0; x < n; ++x) linear += h[x] * ((next[x] - phi[x]) - (bulk[x] + bath[x]) * dt);
        for (std::size_t x = 0; x < n; ++x)
            for (std::size_t y = x + 1; y < n; ++y) {
                const double kk = lattice.kernel_at(y - x);
                if (kk == 0.0) continue;
                const double g = h[x] - h[y];
                quad += 2.0 * kk * eval_mobility(model.mobility, phi[x], phi[y]).value * g * g;
            }
        if (boundary == BoundaryMode::baths) quad += 2.0 * h[0] * h[0] + 2.0 * h[n - 1] * h[n - 1];
        total += -0.5 * linear + dt / 8.0 * quad;
    }
    return total;
}

double generator_apply(const ModelSpec& model, const ThermoTable& thermo, const Lattice& lattice,
                       BoundaryMode boundary, const CylinderFunction& f, const FieldState& state) {
    const std::size_t n = state.size();
    const std::size_t k = f.sites.size();
    std::vector<double> local(k), grad(k, 0.0), hess(k * k, 0.0);
    std::vector<long> index(n, -1);
    for (std::size_t i = 0; i < k; ++i) {
        if (f.sites[i] >= n) throw ValidationError("cylinder function site outside the lattice");
        local[i] = state.phi[f.sites[i]];
        index[f.sites[i]] = static_cast<long>(i);
    }
    f.gradient(local, grad);
    f.hessian(local, hess);
    auto h2 = [&](long i, long j) { return (i < 0 || j < 0) ? 0.0 : hess[static_cast<std::size_t>(i) * k + j]; };
    auto g1 = [&](long i) { return i < 0 ? 0.0 : grad[static_cast<std::size_t>(i)]; };

    double acc = 0.0;
    for (std::size_t x = 0; x < n; ++x) {
        for (std::size_t y = x + 1; y < n; ++y) {
            const long ix = index[x], iy = index[y];
            if (ix < 0 && iy < 0) continue;
            const double kk = lattice.kernel_at(y - x);
            if (kk == 0.0) continue;
            const double a = eval_alpha(model, state.phi[x], state.phi[y]);
            const double b = eval_mobility(model.mobility, state.phi[x], state.phi[y]).value;
            // Both orderings of the pair: α antisymmetric, β symmetric.
            acc += kk * (a * (g1(ix) - g1(iy)) + b * (h2(ix, ix) - 2.0 * h2(ix, iy) + h2(iy, iy)));
        }
    }
    if (boundary == BoundaryMode::baths) {
        const std::array<std::size_t, 2> sites{0, n - 1};
        const std::array<double, 2> lambdas{thermo.bath_lambda_left(), thermo.bath_lambda_right()};
        for (std::size_t side = 0; side < 2; ++side) {
            const long i = index[sites[side]];
            if (i < 0) continue;
            const double slope = eval_potential(model.potential, state.phi[sites[side]]).slope;
            acc += -(lambdas[side] + slope) * g1(i) + h2(i, i);
        }
    }
    return acc;
}

void bem_step_inplace(BemState& state, const Lattice& lattice, double dt, const RngContext& rng, StepTally* tally) {
    const std::size_t n = state.omega.size();
    if (n != lattice.size()) throw ValidationError("state size differs from the lattice size");
    if (!(dt > 0.0)) throw ValidationError("time step must be positive");
    const std::size_t reach = lattice.reach();
    std::vector<double> amp(reach + 1, 0.0);
    for (std::size_t d = 1; d <= reach; ++d) amp[d] = std::sqrt(2.0 * lattice.kernel_at(d) * dt);
    double* w = state.omega.data();
    long double before_total = 0.0L;
    for (std::size_t x = 0; x < n; ++x) before_total += static_cast<long double>(w[x]) * w[x];
    for (std::size_t x = 0; x + 1 < n; ++x) {
        CounterStream stream(rng.key, rng.step, static_cast<std::uint32_t>(x), rng.sub);
        const std::size_t ymax = std::min(n - 1, x + reach);
        for (std::size_t y = x + 1; y <= ymax; ++y) {
            const double theta = amp[y - x] * stream.normal();
            const double c = std::cos(theta), s = std::sin(theta);
            const double a = w[x], b = w[y];
            w[x] = c * a - s * b;
            w[y] = s * a + c * b;
            if (tally && tally->track_currents) {
                const double inc = w[x] * w[x] - a * a;
                const double expected = 2.0 * lattice.kernel_at(y - x) * (b * b - a * a) * dt;
                tally->flow[x] -= inc;
                tally->flow[y] += inc;
                tally->drift_flow[x] -= expected;
                tally->drift_flow[y] += expected;
            }
        }
    }
    // Rounding in the rotations drifts Σω² by O(eps) per pair; undo it once per step.
    long double after_total = 0.0L;
    for (std::size_t x = 0; x < n; ++x) after_total += static_cast<long double>(w[x]) * w[x];
    if (after_total > 0.0L) {
        const long double fix = std::sqrt(before_total / after_total);
        for (std::size_t x = 0; x < n; ++x) w[x] = static_cast<double>(w[x] * fix);
    }
    state.time += dt;
}

BemState bem_step(const BemState& state, const Lattice& lattice, double dt, const RngContext& rng) {
    BemState out = state;
    bem_step_inplace(out, lattice, dt, rng);
    return out;
}

FieldState bem_energy_map(const BemState& state) {
    FieldState out;
    out.time = state.time;
    out.phi.resize(state.omega.size());
    for (std::size_t x = 0; x < state.omega.size(); ++x) out.phi[x] = state.omega[x] * state.omega[x];
    return out;
}

void write_path_csv(std::ostream& out, const PathRecord& record, const std::string& meta) {
    out << "# " << meta << "\n";
    out << "t";
    const std::size_t bins = record.profiles.empty() ? 0 : record.profiles.front().size();
    for (std::size_t b = 0; b < bins; ++b) out << ",phi_" << b;
    out << ",volume";
    for (std::size_t c : record.current_cuts) out << ",J_" << c << ",Jdrift_" << c;
    out << ",log_rn\n";
    out.precision(17);
    for (std::size_t k = 0; k < record.times.size(); ++k) {
        out << record.times[k];
        for (double v : record.profiles[k]) out << ',' << v;
        out << ',' << record.volume[k];
        for (std::size_t c = 0; c < record.current_cuts.size(); ++c)
            out << ',' << record.currents[k][c] << ',' << record.drift_currents[k][c];
        out << ',' << record.log_weight[k] << '\n';
    }
}

} // namespace lrgl
