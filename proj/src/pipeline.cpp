#include "lrgl/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

#include "lrgl/error.hpp"
#include "lrgl/mft.hpp"
#include "lrgl/rng.hpp"

namespace lrgl {

using nlohmann::json;

namespace {

struct KindName {
    ExperimentKind kind;
    const char* name;
};

constexpr KindName kind_names[] = {
    {ExperimentKind::thermo_table, "thermo-table"},
    {ExperimentKind::simulate, "simulate"},
    {ExperimentKind::hydro_evolve, "hydro-evolve"},
    {ExperimentKind::hydrostatic, "hydrostatic"},
    {ExperimentKind::hydro_vs_sde, "hydro-vs-sde"},
    {ExperimentKind::rate_functional, "rate-functional"},
    {ExperimentKind::quasi_potential, "quasi-potential"},
    {ExperimentKind::diffusive_limit, "diffusive-limit"},
    {ExperimentKind::green_kubo, "green-kubo"},
    {ExperimentKind::bem_consistency, "bem-consistency"},
};

template <class T>
T get_or(const json& block, const char* key, T fallback) {
    if (!block.is_object() || !block.contains(key)) return fallback;
    try {
        return block.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ValidationError(std::string("config field '") + key + "': " + e.what());
    }
}

bool uses_hydro(ExperimentKind k) {
    return k == ExperimentKind::hydro_evolve || k == ExperimentKind::hydrostatic || k == ExperimentKind::hydro_vs_sde ||
           k == ExperimentKind::rate_functional || k == ExperimentKind::quasi_potential;
}

bool uses_sde(ExperimentKind k) {
    return k == ExperimentKind::simulate || k == ExperimentKind::hydro_vs_sde || k == ExperimentKind::bem_consistency;
}

// Base profile (affine between the baths, or a constant) plus amplitude·sin(πu).
std::function<double(double)> initial_profile(const json& numerics, const ModelSpec& model) {
    const json block = numerics.value("initial", json::object());
    const std::string base = get_or<std::string>(block, "base", "affine");
    const double amplitude = get_or(block, "amplitude", 0.0);
    const double left = model.bath_left, right = model.bath_right;
    if (base == "affine")
        return [=](double u) { return left + (right - left) * u + amplitude * std::sin(std::numbers::pi * u); };
    if (base == "constant") {
        const double value = get_or(block, "value", 0.5 * (left + right));
        return [=](double u) { return value + amplitude * std::sin(std::numbers::pi * u); };
    }
    throw ValidationError("initial.base must be 'affine' or 'constant', got '" + base + "'");
}

DriveField drive_from(const json& numerics) {
    const double a = get_or(numerics, "drive_amplitude", 0.0);
    if (a == 0.0) return {};
    return DriveField::analytic([a](double, double u) { return a * std::sin(std::numbers::pi * u); });
}

Interval window_for(const json& numerics, const ThermoTable& thermo, std::initializer_list<double> extra) {
    if (numerics.contains("window")) {
        const auto w = get_or<std::vector<double>>(numerics, "window", {});
        if (w.size() != 2 || !(w[0] < w[1])) throw ValidationError("numerics.window must be [lo, hi] with lo < hi");
        return {w[0], w[1]};
    }
    return default_window(thermo, extra);
}

std::pair<double, double> range_of(const std::function<double(double)>& f) {
    double lo = f(0.0), hi = lo;
    for (int k = 1; k <= 256; ++k) {
        const double v = f(k / 256.0);
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    return {lo, hi};
}

GridProfile pinned_profile(const Grid& grid, const std::function<double(double)>& f, const ModelSpec& model) {
    GridProfile p = GridProfile::from_function(grid, f);
    p.values.front() = model.bath_left;
    p.values.back() = model.bath_right;
    return p;
}

std::string meta_line(const ExperimentConfig& c, const std::string& extra = {}) {
    std::string s = "config_hash=" + c.hash + " kind=" + kind_name(c.kind) + " version=" + toolkit_version;
    if (!extra.empty()) s += " " + extra;
    return s;
}

// JSON outputs carry the same provenance fields as the CSV meta line.
std::string stamped_json(const std::string& body, const ExperimentConfig& c) {
    json j = json::parse(body);
    j["config_hash"] = c.hash;
    j["experiment"] = kind_name(c.kind);
    j["toolkit_version"] = toolkit_version;
    return j.dump(2);
}

class OutputDir {
public:
    OutputDir(std::filesystem::path dir, RunOutcome& outcome) : dir_(std::move(dir)), outcome_(outcome) {}

    std::ofstream open(const std::string& name) {
        const auto path = dir_ / name;
        std::ofstream out(path);
        if (!out) throw ValidationError("cannot write " + path.string());
        out.precision(17);
        outcome_.files.push_back(path);
        return out;
    }

private:
    std::filesystem::path dir_;
    RunOutcome& outcome_;
};

class StageTimer {
public:
    StageTimer(RunOutcome& outcome, std::string name)
        : outcome_(outcome), name_(std::move(name)), start_(std::chrono::steady_clock::now()) {}
    ~StageTimer() {
        outcome_.stages[name_] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    RunOutcome& outcome_;
    std::string name_;
    std::chrono::steady_clock::time_point start_;
};

WeakFormAssembly weights_for(const json& numerics, const Grid& grid, const KernelSpec& kernel) {
    const std::string cache = get_or<std::string>(numerics, "cache_dir", "");
    return cache.empty() ? assemble_weights(grid, kernel) : cached_assembly(grid, kernel, cache);
}

std::vector<double> bin_average(const Grid& grid, const GridProfile& p, std::size_t bins) {
    const std::size_t m = grid.cells();
    if (bins == 0 || m % bins != 0) throw ValidationError("hydrodynamic cells must be a multiple of the bin count");
    const std::size_t per = m / bins;
    std::vector<double> out(bins, 0.0);
    for (std::size_t b = 0; b < bins; ++b) {
        double acc = 0.0;
        for (std::size_t j = b * per; j < (b + 1) * per; ++j) acc += 0.5 * (p.values[j] + p.values[j + 1]);
        out[b] = acc / static_cast<double>(per);
    }
    return out;
}

std::vector<double> linspace(double lo, double hi, std::size_t count) {
    std::vector<double> v(count);
    for (std::size_t k = 0; k < count; ++k)
        v[k] = count == 1 ? lo : lo + (hi - lo) * static_cast<double>(k) / static_cast<double>(count - 1);
    return v;
}

SimConfig sim_config(const ExperimentConfig& c, std::size_t threads) {
    SimConfig s;
    const json& num = c.numerics;
    s.model = c.model;
    s.n = get_or<std::size_t>(num, "n", 64);
    s.dt = get_or(num, "dt", 0.0);
    s.horizon = get_or(num, "T", 0.1);
    s.seed = c.seed;
    const std::string boundary = get_or<std::string>(num, "boundary", "baths");
    if (boundary != "baths" && boundary != "free") throw ValidationError("numerics.boundary must be 'baths' or 'free'");
    s.boundary = boundary == "free" ? BoundaryMode::free : BoundaryMode::baths;
    s.drive = drive_from(num);
    s.replicas = get_or<std::size_t>(num, "replicas", 1);
    s.record_every = get_or(num, "record_every", 0.0);
    s.bins = get_or<std::size_t>(num, "bins", 16);
    s.current_cuts = get_or<std::vector<std::size_t>>(num, "cuts", {s.n / 4, s.n / 2, 3 * s.n / 4});
    s.c_stab = get_or(num, "c_stab", 0.1);
    s.kernel_cutoff = get_or(num, "kernel_cutoff", 0.0);
    s.initial.kind = InitialCondition::Kind::local_equilibrium;
    s.initial.profile = initial_profile(num, c.model);
    s.threads = std::max<std::size_t>(1, threads);
    s.config_hash = c.hash;
    return s;
}

// ---- pipelines ----

void run_thermo_table(const ExperimentConfig& c, OutputDir& out, RunOutcome& outcome) {
    ThermoTable thermo(c.model, c.quadrature);
    std::vector<double> densities = get_or<std::vector<double>>(c.numerics, "densities", {});
    if (densities.empty()) {
        const Interval w = default_window(thermo);
        densities = linspace(w.lo, w.hi, get_or<std::size_t>(c.numerics, "points", 17));
    }
    {
        StageTimer t(outcome, "thermo_table");
        auto f = out.open("thermo.csv");
        thermo.write_csv(f, densities, meta_line(c));
    }
    if (c.model.is_bem()) {
        double lam = 0.0, sig = 0.0;
        for (double phi : densities) {
            lam = std::max(lam, std::abs(2.0 * phi * thermo.chemical_potential(phi) - 1.0));
            sig = std::max(sig, std::abs(thermo.variance(phi) - 2.0 * phi * phi) / std::max(1.0, 2.0 * phi * phi));
        }
        outcome.checks["bem_lambda_closed_form"] = lam <= 1e-8;
        outcome.checks["bem_variance_closed_form"] = sig <= 1e-7;
    }
}

void run_simulate(const ExperimentConfig& c, OutputDir& out, RunOutcome& outcome, std::size_t threads) {
    ThermoTable thermo(c.model, c.quadrature);
    const SimConfig s = sim_config(c, threads);
    SimulationResult r;
    {
        StageTimer t(outcome, "simulate");
        r = simulate(s, thermo);
    }
    for (const PathRecord& rec : r.replicas) {
        std::ostringstream name;
        name << "path_r" << std::setw(3) << std::setfill('0') << rec.replica << ".csv";
        auto f = out.open(name.str());
        write_path_csv(f, rec, meta_line(c, "replica=" + std::to_string(rec.replica)));
    }
    const auto mean = mean_profiles(r);
    auto f = out.open("mean_profile.csv");
    f << "# " << meta_line(c) << "\nt";
    for (std::size_t b = 0; b < s.bins; ++b) f << ",bin_" << b;
    f << '\n';
    const auto& times = r.replicas.front().times;
    for (std::size_t k = 0; k < mean.size(); ++k) {
        f << times[k];
        for (double v : mean[k]) f << ',' << v;
        f << '\n';
    }
    if (s.boundary == BoundaryMode::free) {
        double drift = 0.0;
        for (const PathRecord& rec : r.replicas)
            drift = std::max(drift, std::abs(rec.volume.back() - rec.volume.front()) /
                                        std::max(1.0, std::abs(rec.volume.front())));
        outcome.checks["volume_conserved"] = drift <= 1e-12;
    }
}

void run_hydro_evolve(const ExperimentConfig& c, OutputDir& out, RunOutcome& outcome) {
    ThermoTable thermo(c.model, c.quadrature);
    const auto init = initial_profile(c.numerics, c.model);
    const auto [lo, hi] = range_of(init);
    const CoarseModel coarse(c.model, thermo, window_for(c.numerics, thermo, {lo, hi}));
    const Grid grid(get_or<std::size_t>(c.numerics, "M", 64));
    const WeakFormAssembly w = weights_for(c.numerics, grid, c.model.kernel);
    const GridProfile p0 = pinned_profile(grid, init, c.model);
    const double horizon = get_or(c.numerics, "T", 0.1);
    EvolveOptions opts;
    opts.dt = get_or(c.numerics, "dt", 0.0);
    opts.drive = drive_from(c.numerics);
    const double dt = opts.dt > 0.0 ? opts.dt : 0.9 * explicit_time_step_bound(w, coarse, p0);
    const double every = get_or(c.numerics, "record_every", 0.0);
    const std::size_t steps = static_cast<std::size_t>(std::ceil(horizon / dt - 1e-9));
    opts.record_stride = every > 0.0 ? std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(every / dt)))
                                     : std::max<std::size_t>(1, steps);
    HydroTrajectory tr;
    {
        StageTimer t(outcome, "evolve");
        tr = evolve(w, coarse, p0, horizon, opts);
    }
    for (std::size_t k = 0; k < tr.profiles.size(); ++k) {
        std::ostringstream name, t;
        name << "profile_" << std::setw(4) << std::setfill('0') << k << ".csv";
        t.precision(17);
        t << "t=" << tr.times[k];
        auto f = out.open(name.str());
        write_profile_csv(f, grid, tr.profiles[k], meta_line(c, t.str()));
    }
}

void run_hydrostatic(const ExperimentConfig& c, OutputDir& out, RunOutcome& outcome) {
    ThermoTable thermo(c.model, c.quadrature);
    const CoarseModel coarse(c.model, thermo, window_for(c.numerics, thermo, {}));
    const Grid grid(get_or<std::size_t>(c.numerics, "M", 64));
    const WeakFormAssembly w = weights_for(c.numerics, grid, c.model.kernel);
    StationaryReport ss;
    {
        StageTimer t(outcome, "solve_stationary");
        ss = solve_stationary(w, coarse, c.model.bath_left, c.model.bath_right);
    }
    {
        auto f = out.open("stationary.csv");
        write_profile_csv(f, grid, ss.profile, meta_line(c));
    }
    auto f = out.open("stationary_current.csv");
    f << "# " << meta_line(c) << "\nu,J\n";
    std::vector<double> currents;
    for (double u : {0.125, 0.25, 0.5, 0.75, 0.875}) {
        currents.push_back(macroscopic_current(w, coarse, ss.profile, u));
        f << u << ',' << currents.back() << '\n';
    }
    const auto [jmin, jmax] = std::minmax_element(currents.begin(), currents.end());
    outcome.checks["residual_below_tolerance"] = ss.residual <= 1e-10;
    outcome.checks["current_constant"] = *jmax - *jmin <= 1e-9 * std::max(1.0, std::abs(*jmax));
}

void run_hydro_vs_sde(const ExperimentConfig& c, OutputDir& out, RunOutcome& outcome, std::size_t threads) {
    ThermoTable thermo(c.model, c.quadrature);
    HydroSdeSetup s;
    s.model = c.model;
    s.sizes = get_or<std::vector<std::size_t>>(c.numerics, "sizes", {128, 256, 512});
    s.replicas = get_or<std::size_t>(c.numerics, "replicas", 100);
    s.horizon = get_or(c.numerics, "T", 0.5);
    s.bins = get_or<std::size_t>(c.numerics, "bins", 16);
    s.cells = get_or<std::size_t>(c.numerics, "M", 256);
    s.initial = initial_profile(c.numerics, c.model);
    s.seed = c.seed;
    s.threads = std::max<std::size_t>(1, threads);
    s.c_stab = get_or(c.numerics, "c_stab", 0.1);
    std::vector<HydroSdeRow> rows;
    {
        StageTimer t(outcome, "hydro_vs_sde");
        rows = hydro_vs_sde(s, thermo);
    }
    auto f = out.open("hydro_vs_sde.csv");
    f << "# " << meta_line(c) << "\nn,L1\n";
    for (const auto& r : rows) f << r.n << ',' << r.l1 << '\n';
    auto g = out.open("hydro_vs_sde_profiles.csv");
    g << "# " << meta_line(c) << "\nn,bin,empirical,hydro\n";
    for (const auto& r : rows)
        for (std::size_t b = 0; b < r.empirical.size(); ++b)
            g << r.n << ',' << b << ',' << r.empirical[b] << ',' << r.hydro[b] << '\n';
    bool decreasing = true;
    for (std::size_t k = 1; k < rows.size(); ++k) decreasing = decreasing && rows[k].l1 < rows[k - 1].l1;
    outcome.checks["l1_decreasing"] = decreasing;
}

void run_rate_functional(const ExperimentConfig& c, OutputDir& out, RunOutcome& outcome) {
    ThermoTable thermo(c.model, c.quadrature);
    const auto init = initial_profile(c.numerics, c.model);
    const auto [lo, hi] = range_of(init);
    const CoarseModel coarse(c.model, thermo, window_for(c.numerics, thermo, {lo, hi}));
    const Grid grid(get_or<std::size_t>(c.numerics, "M", 64));
    const WeakFormAssembly w = weights_for(c.numerics, grid, c.model.kernel);
    const double horizon = get_or(c.numerics, "T", 0.05);
    EvolveOptions opts;
    opts.dt = get_or(c.numerics, "dt", 1e-5);
    opts.drive = drive_from(c.numerics);
    HydroTrajectory tr;
    RateResult r;
    {
        StageTimer t(outcome, "evolve");
        tr = evolve(w, coarse, pinned_profile(grid, init, c.model), horizon, opts);
    }
    {
        StageTimer t(outcome, "rate_functional");
        r = rate_functional(w, coarse, tr);
    }
    {
        std::ostringstream body;
        write_rate_json(body, r);
        auto f = out.open("rate.json");
        f << stamped_json(body.str(), c) << '\n';
    }
    auto f = out.open("drives.csv");
    write_drives_csv(f, r, meta_line(c));
    outcome.checks["forms_agree"] = std::abs(r.value - r.value_mobility) <= 1e-9 * std::abs(r.value) || r.value == 0.0;
    if (!opts.drive.active()) outcome.checks["vanishes_on_hydrodynamics"] = r.value <= 1e-8 * horizon;
}

void run_quasi_potential(const ExperimentConfig& c, OutputDir& out, RunOutcome& outcome) {
    ThermoTable thermo(c.model, c.quadrature);
    if (!c.model.mobility.is_constant())
        throw DomainError("quasi-potential experiment needs a constant mobility");
    const double amplitude = get_or(c.numerics, "amplitude", 0.3);
    const double lo = std::min(c.model.bath_left, c.model.bath_right) - std::abs(amplitude);
    const double hi = std::max(c.model.bath_left, c.model.bath_right) + std::abs(amplitude);
    const CoarseModel coarse(c.model, thermo, window_for(c.numerics, thermo, {lo, hi}));
    const Grid grid(get_or<std::size_t>(c.numerics, "M", 48));
    const WeakFormAssembly w = weights_for(c.numerics, grid, c.model.kernel);
    const StationaryReport ss = solve_stationary(w, coarse, c.model.bath_left, c.model.bath_right);
    GridProfile start = ss.profile;
    for (std::size_t j = 1; j < grid.cells(); ++j) start.values[j] += amplitude * std::sin(std::numbers::pi * grid.node(j));
    EvolveOptions opts;
    opts.dt = get_or(c.numerics, "dt", 0.0);
    HydroTrajectory tr;
    {
        StageTimer t(outcome, "evolve");
        tr = evolve(w, coarse, start, get_or(c.numerics, "T", 2.0), opts);
    }
    const LyapunovReport rep = lyapunov_check(coarse, tr, ss.profile);
    {
        auto f = out.open("lyapunov.csv");
        f << "# " << meta_line(c) << "\nt,V\n";
        for (std::size_t k = 0; k < rep.values.size(); ++k) f << tr.times[k] << ',' << rep.values[k] << '\n';
    }
    std::ostringstream body;
    write_quasipotential_json(body, quasipotential_additive(coarse, start, ss.profile, &w));
    auto f = out.open("quasipotential.json");
    f << stamped_json(body.str(), c) << '\n';
    outcome.checks["lyapunov_monotone"] = rep.monotone();
}

void run_diffusive_limit(const ExperimentConfig& c, OutputDir& out, RunOutcome& outcome) {
    ThermoTable thermo(c.model, c.quadrature);
    const Grid grid(get_or<std::size_t>(c.numerics, "M", 512));
    const auto gammas = get_or<std::vector<double>>(c.numerics, "gammas", {1.5, 1.9, 1.99});
    std::vector<double> g(grid.nodes());
    for (std::size_t j = 0; j < g.size(); ++j) g[j] = grid.node(j) * (1.0 - grid.node(j));
    std::vector<double> errors;
    {
        StageTimer t(outcome, "bilinear_forms");
        auto f = out.open("diffusive_limit.csv");
        f << "# " << meta_line(c) << "\ngamma,value,abs_error\n";
        for (double gamma : gammas) {
            const WeakFormAssembly w = assemble_weights(grid, KernelSpec::power_law(gamma));
            const double v = diffusive_limit_form(w, g, g);
            errors.push_back(std::abs(v - 1.0 / 3.0));
            f << gamma << ',' << v << ',' << errors.back() << '\n';
        }
    }
    bool trend = true;
    for (std::size_t k = 1; k < errors.size(); ++k) trend = trend && errors[k] < errors[k - 1];
    outcome.checks["error_decreasing_in_gamma"] = trend;

    std::vector<double> densities = get_or<std::vector<double>>(c.numerics, "densities", {});
    if (densities.empty()) {
        const Interval w = default_window(thermo);
        densities = linspace(w.lo, w.hi, 9);
    }
    auto f = out.open("diffusion.csv");
    f << "# " << meta_line(c) << "\nPhi,D\n";
    double bem_gap = 0.0;
    for (double phi : densities) {
        const double d = diffusion_coefficient(c.model, thermo, phi);
        bem_gap = std::max(bem_gap, std::abs(d - 2.0));
        f << phi << ',' << d << '\n';
    }
    if (c.model.is_bem() && c.model.mobility.scale == 4.0) outcome.checks["bem_diffusion_equals_two"] = bem_gap <= 1e-7;
}

void run_green_kubo(const ExperimentConfig& c, OutputDir& out, RunOutcome& outcome) {
    ThermoTable thermo(c.model, c.quadrature);
    const double density = get_or(c.numerics, "density", 1.0);
    const auto bases = get_or<std::vector<std::vector<int>>>(c.numerics, "bases", {{1, 1}, {1, 2}, {2, 1}, {2, 2}});
    auto f = out.open("green_kubo.csv");
    f << "# " << meta_line(c) << "\nwindow,max_power,upper_bound,D,gap,regularized\n";
    bool holds = true;
    StageTimer t(outcome, "green_kubo");
    for (const auto& b : bases) {
        if (b.size() != 2 || b[0] < 1 || b[1] < 0) throw ValidationError("each basis entry must be [window, max_power]");
        const GreenKuboResult r =
            green_kubo_upper(c.model, thermo, density, monomial_basis(static_cast<std::size_t>(b[0]), b[1]));
        holds = holds && r.upper_bound <= r.diffusion + 1e-10;
        f << b[0] << ',' << b[1] << ',' << r.upper_bound << ',' << r.diffusion << ',' << r.diffusion - r.upper_bound
          << ',' << (r.regularized ? 1 : 0) << '\n';
    }
    outcome.checks["bound_holds"] = holds;
}

void run_bem_consistency(const ExperimentConfig& c, OutputDir& out, RunOutcome& outcome) {
    if (!c.model.is_bem()) throw ValidationError("bem-consistency needs the BEM model (bem_log potential, product mobility)");
    ThermoTable thermo(c.model, c.quadrature);
    const std::size_t n = get_or<std::size_t>(c.numerics, "n", 8);
    const double dt = get_or(c.numerics, "dt", 1e-3);
    std::vector<BemDriftRow> rows;
    {
        StageTimer t(outcome, "drift_check");
        rows = bem_drift_check(c.model, thermo, n, dt, get_or<std::size_t>(c.numerics, "samples", 200000), c.seed);
    }
    auto f = out.open("bem_consistency.csv");
    f << "# " << meta_line(c) << "\nobservable,mc_drift,standard_error,generator,z\n";
    bool within = true;
    for (const auto& r : rows) {
        within = within && std::abs(r.z()) <= 3.0;
        f << r.observable << ',' << r.drift << ',' << r.standard_error << ',' << r.generator << ',' << r.z() << '\n';
    }
    const std::size_t steps = get_or<std::size_t>(c.numerics, "energy_steps", 10000);
    const double drift = bem_energy_drift(c.model, get_or<std::size_t>(c.numerics, "energy_n", 64), steps,
                                          get_or(c.numerics, "energy_dt", 0.01), c.seed);
    auto g = out.open("bem_energy.csv");
    g << "# " << meta_line(c) << "\nsteps,relative_drift\n" << steps << ',' << drift << '\n';
    outcome.checks["drift_within_3se"] = within;
    outcome.checks["energy_conserved"] = drift <= 1e-14;
}

} // namespace

ExperimentKind parse_kind(const std::string& name) {
    for (const auto& k : kind_names)
        if (name == k.name) return k.kind;
    throw ValidationError("unknown experiment kind '" + name + "'");
}

std::string kind_name(ExperimentKind kind) {
    for (const auto& k : kind_names)
        if (kind == k.kind) return k.name;
    return "unknown";
}

ModelSpec parse_model(const json& block) {
    if (!block.is_object()) throw ValidationError("model block must be an object");
    ModelSpec m;
    const std::string preset = get_or<std::string>(block, "preset", "");
    const double left = get_or(block, "bath_left", 0.0), right = get_or(block, "bath_right", 0.0);
    const double gamma = get_or(block, "gamma", 1.5);
    if (preset == "gaussian_additive") {
        m = ModelSpec::gaussian_additive(gamma, left, right);
    } else if (preset == "bem") {
        m = ModelSpec::bem(gamma, left, right);
    } else if (!preset.empty()) {
        throw ValidationError("unknown model preset '" + preset + "'");
    } else {
        m.bath_left = left;
        m.bath_right = right;
        const json pot = block.value("potential", json::object());
        const std::string pf = get_or<std::string>(pot, "family", "quadratic");
        if (pf == "quadratic") m.potential = PotentialSpec::quadratic(get_or(pot, "c", 0.5));
        else if (pf == "quartic") m.potential = PotentialSpec::quartic(get_or(pot, "c4", 0.25), get_or(pot, "c2", 0.5));
        else if (pf == "bem_log") m.potential = PotentialSpec::bem_log();
        else if (pf == "polynomial") {
            const std::string dom = get_or<std::string>(pot, "domain", "real");
            if (dom != "real" && dom != "half_line") throw ValidationError("potential.domain must be 'real' or 'half_line'");
            m.potential = PotentialSpec::polynomial(get_or<std::vector<double>>(pot, "coefficients", {}),
                                                    dom == "real" ? FieldDomain::real_line : FieldDomain::positive_half_line);
        } else
            throw ValidationError("unknown potential family '" + pf + "'");

        const json mob = block.value("mobility", json::object());
        const std::string mf = get_or<std::string>(mob, "family", "constant");
        if (mf == "constant") m.mobility = MobilitySpec::constant(get_or(mob, "b0", 1.0));
        else if (mf == "product") m.mobility = MobilitySpec::product(get_or(mob, "c", 4.0));
        else if (mf == "polynomial")
            m.mobility = MobilitySpec::polynomial(get_or<std::vector<std::vector<double>>>(mob, "coefficients", {}),
                                                  get_or(mob, "lower_bound", 0.0));
        else
            throw ValidationError("unknown mobility family '" + mf + "'");
        m.kernel = KernelSpec::power_law(gamma);
    }
    if (block.contains("kernel")) {
        const json& k = block.at("kernel");
        const std::string kind = get_or<std::string>(k, "kind", "power_law");
        if (kind == "power_law") m.kernel = KernelSpec::power_law(get_or(k, "gamma", gamma));
        else if (kind == "nearest_neighbor") m.kernel = KernelSpec::nearest_neighbor();
        else if (kind == "mixed") m.kernel = KernelSpec::mixed(get_or(k, "amplitude", 1.0), get_or(k, "gamma", gamma));
        else throw ValidationError("unknown kernel kind '" + kind + "'");
        m.kernel.allow_gamma_edge = get_or(k, "allow_gamma_edge", false);
    }
    m.validate();
    return m;
}

QuadratureSpec parse_quadrature(const json& numerics) {
    QuadratureSpec q;
    const json block = numerics.value("quadrature", json::object());
    q.tolerance = get_or(block, "tolerance", q.tolerance);
    q.log_cut = get_or(block, "log_cut", q.log_cut);
    q.max_panels = get_or(block, "max_panels", q.max_panels);
    q.scan_points = get_or(block, "scan_points", q.scan_points);
    return q;
}

std::string hash_json(const json& j) {
    std::uint64_t h = 14695981039346656037ull;
    for (unsigned char ch : j.dump()) {
        h ^= ch;
        h *= 1099511628211ull;
    }
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

ExperimentConfig parse_config(json source, std::optional<std::uint64_t> seed) {
    if (!source.is_object()) throw ValidationError("config must be a JSON object");
    if (seed) source["seed"] = *seed;
    ExperimentConfig c;
    if (!source.contains("experiment")) throw ValidationError("config needs an 'experiment' field");
    c.kind = parse_kind(get_or<std::string>(source, "experiment", ""));
    if (!source.contains("model")) throw ValidationError("config needs a 'model' block");
    c.model = parse_model(source.at("model"));
    c.numerics = source.value("numerics", json::object());
    if (!c.numerics.is_object()) throw ValidationError("numerics block must be an object");
    c.quadrature = parse_quadrature(c.numerics);
    c.seed = get_or<std::uint64_t>(source, "seed", 1);
    c.output = get_or<std::string>(source, "output", "out");
    c.hash = hash_json(source);
    c.source = std::move(source);
    return c;
}

ExperimentConfig load_config(const std::filesystem::path& path, std::optional<std::uint64_t> seed) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot read config " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ValidationError("config " + path.string() + " is not valid JSON: " + e.what());
    }
    return parse_config(std::move(j), seed);
}

Interval default_window(const ThermoTable& thermo, std::initializer_list<double> extra) {
    const ModelSpec& m = thermo.model();
    double lo = std::min(m.bath_left, m.bath_right), hi = std::max(m.bath_left, m.bath_right);
    for (double v : extra) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    const double smallest = lo;
    const double largest = hi;
    const double span = std::max(hi - lo, 0.5);
    lo -= 0.5 * span;
    hi += 0.5 * span;
    const Interval ach = thermo.achievable_mean();
    if (ach.bounded_below()) lo = std::max(lo, ach.lo + 0.25 * std::max(smallest - ach.lo, 1e-3));
    if (ach.bounded_above()) hi = std::min(hi, ach.hi - 0.25 * std::max(ach.hi - largest, 1e-3));
    return {lo, hi};
}

ValidationReport validate_config(const json& source) {
    ValidationReport rep;
    auto fail = [&](const std::string& what) {
        rep.ok = false;
        rep.lines.push_back("FAIL " + what);
    };
    ExperimentConfig c;
    try {
        c = parse_config(source);
    } catch (const std::exception& e) {
        fail(e.what());
        return rep;
    }
    rep.lines.push_back("experiment " + kind_name(c.kind) + ", config hash " + c.hash);
    rep.lines.push_back("model " + c.model.describe());
    try {
        ThermoTable thermo(c.model, c.quadrature);
        const Interval lam = thermo.admissible_lambda();
        std::ostringstream os;
        os << "admissible lambda interval (" << lam.lo << ", " << lam.hi << ")";
        rep.lines.push_back(os.str());
        if (c.model.is_bem()) rep.lines.push_back("BEM model: simulated in omega coordinates (phi = omega^2, planar rotations)");

        if (uses_sde(c.kind) && c.kind != ExperimentKind::bem_consistency && c.kind != ExperimentKind::hydro_vs_sde) {
            const SimConfig s = sim_config(c, 1);
            const double bound = stable_time_step(s, thermo);
            std::ostringstream b;
            b << "SDE stability bound dt <= " << bound << " (c_stab " << s.c_stab << ")";
            rep.lines.push_back(b.str());
            if (s.dt > bound * (1.0 + 1e-9) && !c.model.is_bem()) {
                std::ostringstream e;
                e << "dt " << s.dt << " exceeds the SDE stability bound " << bound;
                fail(e.str());
            }
        }
        if (uses_hydro(c.kind)) {
            const std::size_t m = get_or<std::size_t>(c.numerics, "M", c.kind == ExperimentKind::hydro_vs_sde ? 256 : 64);
            const Grid grid(m);
            std::ostringstream mem;
            mem << "estimated memory for W: " << static_cast<double>((m + 1) * (m + 1) * sizeof(double)) / 1048576.0
                << " MiB";
            rep.lines.push_back(mem.str());
            const auto init = initial_profile(c.numerics, c.model);
            const auto [lo, hi] = range_of(init);
            const CoarseModel coarse(c.model, thermo, window_for(c.numerics, thermo, {lo, hi}));
            const WeakFormAssembly w = assemble_weights(grid, c.model.kernel);
            const double bound = explicit_time_step_bound(w, coarse, pinned_profile(grid, init, c.model));
            std::ostringstream b;
            b << "hydrodynamic explicit bound dt <= " << bound;
            rep.lines.push_back(b.str());
            const double dt = get_or(c.numerics, "dt", 0.0);
            if (c.kind != ExperimentKind::hydro_vs_sde && dt > bound * (1.0 + 1e-9)) {
                std::ostringstream e;
                e << "dt " << dt << " exceeds the hydrodynamic stability bound " << bound;
                fail(e.str());
            }
        }
        if (c.kind == ExperimentKind::quasi_potential && !c.model.mobility.is_constant())
            fail("quasi-potential experiment needs a constant mobility");
        if (c.kind == ExperimentKind::bem_consistency && !c.model.is_bem()) fail("bem-consistency needs the BEM model");
    } catch (const std::exception& e) {
        fail(e.what());
    }
    if (rep.ok) rep.lines.push_back("PASS");
    return rep;
}

RunOutcome run_experiment(const ExperimentConfig& config, const std::filesystem::path& out_dir, std::size_t threads) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec || !std::filesystem::is_directory(out_dir))
        throw ValidationError("output directory " + out_dir.string() + " is not writable");
    {
        const auto probe = out_dir / ".write_probe";
        std::ofstream p(probe);
        if (!p) throw ValidationError("output directory " + out_dir.string() + " is not writable");
        p.close();
        std::filesystem::remove(probe, ec);
    }
    RunOutcome outcome;
    OutputDir out(out_dir, outcome);
    switch (config.kind) {
    case ExperimentKind::thermo_table: run_thermo_table(config, out, outcome); break;
    case ExperimentKind::simulate: run_simulate(config, out, outcome, threads); break;
    case ExperimentKind::hydro_evolve: run_hydro_evolve(config, out, outcome); break;
    case ExperimentKind::hydrostatic: run_hydrostatic(config, out, outcome); break;
    case ExperimentKind::hydro_vs_sde: run_hydro_vs_sde(config, out, outcome, threads); break;
    case ExperimentKind::rate_functional: run_rate_functional(config, out, outcome); break;
    case ExperimentKind::quasi_potential: run_quasi_potential(config, out, outcome); break;
    case ExperimentKind::diffusive_limit: run_diffusive_limit(config, out, outcome); break;
    case ExperimentKind::green_kubo: run_green_kubo(config, out, outcome); break;
    case ExperimentKind::bem_consistency: run_bem_consistency(config, out, outcome); break;
    }
    return outcome;
}

void write_manifest(const std::filesystem::path& out_dir, const ExperimentConfig& config, const RunOutcome& outcome,
                    double wall_seconds, const std::string& started) {
    json j;
    j["config_hash"] = config.hash;
    j["experiment"] = kind_name(config.kind);
    j["toolkit_version"] = toolkit_version;
    j["started"] = started;
    j["wall_seconds"] = wall_seconds;
    j["stages"] = outcome.stages;
    j["checks"] = outcome.checks;
    bool all = true;
    for (const auto& [name, ok] : outcome.checks.items()) all = all && ok.get<bool>();
    j["all_checks_pass"] = all;
    std::vector<std::string> files;
    for (const auto& f : outcome.files) files.push_back(f.filename().string());
    j["files"] = files;
    const auto final_path = out_dir / "manifest.json";
    const auto tmp = out_dir / "manifest.json.tmp";
    {
        std::ofstream out(tmp);
        if (!out) throw ValidationError("cannot write " + tmp.string());
        out << j.dump(2) << '\n';
    }
    std::filesystem::rename(tmp, final_path);
}

std::vector<HydroSdeRow> hydro_vs_sde(const HydroSdeSetup& setup, const ThermoTable& thermo) {
    const auto [lo, hi] = range_of(setup.initial);
    const CoarseModel coarse(setup.model, thermo, default_window(thermo, {lo, hi}));
    const Grid grid(setup.cells);
    const WeakFormAssembly w = assemble_weights(grid, setup.model.kernel);
    const HydroTrajectory tr = evolve(w, coarse, pinned_profile(grid, setup.initial, setup.model), setup.horizon);
    const std::vector<double> hydro = bin_average(grid, tr.profiles.back(), setup.bins);

    std::vector<HydroSdeRow> rows;
    for (std::size_t n : setup.sizes) {
        SimConfig c;
        c.model = setup.model;
        c.n = n;
        c.horizon = setup.horizon;
        c.seed = setup.seed;
        c.replicas = setup.replicas;
        c.bins = setup.bins;
        c.c_stab = setup.c_stab;
        c.threads = setup.threads;
        c.initial.kind = InitialCondition::Kind::local_equilibrium;
        c.initial.profile = setup.initial;
        const SimulationResult r = simulate(c, thermo);
        HydroSdeRow row;
        row.n = n;
        row.seconds = r.wall_seconds;
        row.empirical = mean_profiles(r).back();
        row.hydro = hydro;
        for (std::size_t b = 0; b < hydro.size(); ++b) row.l1 += std::abs(row.empirical[b] - hydro[b]);
        row.l1 /= static_cast<double>(hydro.size());
        rows.push_back(std::move(row));
    }
    return rows;
}

namespace {

std::vector<double> bem_start(std::size_t n) {
    std::vector<double> omega(n);
    for (std::size_t x = 0; x < n; ++x)
        omega[x] = (x % 2 == 0 ? 1.0 : -1.0) * std::sqrt(0.4 + 1.6 * static_cast<double>(x) / static_cast<double>(n));
    return omega;
}

} // namespace

std::vector<BemDriftRow> bem_drift_check(const ModelSpec& model, const ThermoTable& thermo, std::size_t n, double dt,
                                         std::size_t samples, std::uint64_t seed) {
    if (n < 6) throw ValidationError("bem drift check needs at least six sites");
    if (samples < 2) throw ValidationError("bem drift check needs at least two samples");
    const Lattice lattice(model.kernel, n);
    const BemState start{bem_start(n), 0.0};
    const FieldState phi0 = bem_energy_map(start);

    std::vector<std::pair<std::string, CylinderFunction>> fs;
    fs.push_back({"phi(0)",
                  {{0},
                   [](std::span<const double> v) { return v[0]; },
                   [](std::span<const double>, std::span<double> g) { g[0] = 1.0; },
                   [](std::span<const double>, std::span<double> h) { h[0] = 0.0; }}});
    fs.push_back({"phi(1)*phi(n-2)",
                  {{1, n - 2},
                   [](std::span<const double> v) { return v[0] * v[1]; },
                   [](std::span<const double> v, std::span<double> g) {
                       g[0] = v[1];
                       g[1] = v[0];
                   },
                   [](std::span<const double>, std::span<double> h) {
                       h[0] = 0.0;
                       h[1] = 1.0;
                       h[2] = 1.0;
                       h[3] = 0.0;
                   }}});
    fs.push_back({"phi(2)^2",
                  {{2},
                   [](std::span<const double> v) { return v[0] * v[0]; },
                   [](std::span<const double> v, std::span<double> g) { g[0] = 2.0 * v[0]; },
                   [](std::span<const double>, std::span<double> h) { h[0] = 2.0; }}});

    auto eval = [](const CylinderFunction& f, const std::vector<double>& phi) {
        std::vector<double> v;
        for (std::size_t s : f.sites) v.push_back(phi[s]);
        return f.value(v);
    };
    std::vector<double> base, sum(fs.size(), 0.0), sum2(fs.size(), 0.0);
    for (const auto& [name, f] : fs) base.push_back(eval(f, phi0.phi));
    for (std::size_t s = 0; s < samples; ++s) {
        BemState st = start;
        bem_step_inplace(st, lattice, dt, RngContext{replica_key(seed, s), 0, 1});
        const FieldState phi = bem_energy_map(st);
        for (std::size_t k = 0; k < fs.size(); ++k) {
            const double d = (eval(fs[k].second, phi.phi) - base[k]) / dt;
            sum[k] += d;
            sum2[k] += d * d;
        }
    }
    std::vector<BemDriftRow> rows;
    const double count = static_cast<double>(samples);
    for (std::size_t k = 0; k < fs.size(); ++k) {
        BemDriftRow r;
        r.observable = fs[k].first;
        r.drift = sum[k] / count;
        r.standard_error = std::sqrt(std::max(0.0, sum2[k] / count - r.drift * r.drift) / (count - 1.0));
        r.generator = generator_apply(model, thermo, lattice, BoundaryMode::free, fs[k].second, phi0);
        rows.push_back(r);
    }
    return rows;
}

double bem_energy_drift(const ModelSpec& model, std::size_t n, std::size_t steps, double dt, std::uint64_t seed) {
    const Lattice lattice(model.kernel, n);
    BemState st{bem_start(n), 0.0};
    const double e0 = st.energy();
    const std::uint64_t key = replica_key(seed, 0);
    for (std::size_t k = 0; k < steps; ++k) bem_step_inplace(st, lattice, dt, RngContext{key, k, 1});
    return std::abs(st.energy() - e0) / e0;
}

} // namespace lrgl
