#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lrgl/model.hpp"
#include "lrgl/thermo.hpp"

namespace lrgl {

struct FieldState {
    std::vector<double> phi;
    double time = 0.0;  // microscopic

    std::size_t size() const { return phi.size(); }
    double volume() const;
};

struct BemState {
    std::vector<double> omega;
    double time = 0.0;

    double energy() const;
};

enum class BoundaryMode { free, baths };

// Macroscopic drive H(t,u); empty means H ≡ 0.
class DriveField {
public:
    DriveField() = default;
    static DriveField analytic(std::function<double(double, double)> h);
    // Values on times × uniform nodes u_j = j/M, interpolated bilinearly; defined up to times.back().
    static DriveField tabulated(std::vector<double> times, std::vector<std::vector<double>> values);
    static DriveField read_csv(std::istream& in);

    bool active() const { return static_cast<bool>(eval_); }
    double horizon() const { return horizon_; }
    double operator()(double t, double u) const { return eval_ ? eval_(t, u) : 0.0; }

private:
    std::function<double(double, double)> eval_;
    double horizon_ = std::numeric_limits<double>::infinity();
};

// Noise address for one (sub)step.
struct RngContext {
    std::uint64_t key = 0;
    std::uint64_t step = 0;
    std::uint32_t sub = 1;
};

// Per-lattice precomputation of kernel values by distance.
class Lattice {
public:
    Lattice(const KernelSpec& kernel, std::size_t n, double cutoff = 0.0);

    std::size_t size() const { return n_; }
    const KernelSpec& kernel() const { return kernel_; }
    double kernel_at(std::size_t distance) const { return by_distance_[distance]; }
    std::size_t reach() const { return reach_; }
    double max_row_sum() const { return max_row_sum_; }
    // Fraction of the total pair weight dropped by the cutoff.
    double truncated_fraction() const { return truncated_; }
    // Microscopic duration of a macroscopic time span: t·n^θ.
    double micro_time(double macro) const;
    double macro_time(double micro) const;

private:
    KernelSpec kernel_;
    std::size_t n_;
    std::vector<double> by_distance_;
    std::size_t reach_ = 0;
    double max_row_sum_ = 0.0;
    double truncated_ = 0.0;
};

// Per-step accumulators for cut currents and the Girsanov weight.
struct StepTally {
    std::vector<double> flow;        // difference array over cuts, noise included
    std::vector<double> drift_flow;  // deterministic part only
    double log_weight = 0.0;         // log dQ_0/dQ_H
    bool track_currents = false;
    bool track_weight = false;

    explicit StepTally(std::size_t n = 0, bool currents = false, bool weight = false);
};

// Euler–Maruyama engine for the open Ginzburg–Landau lattice.
class GlIntegrator {
public:
    GlIntegrator(const ModelSpec& model, const Lattice& lattice, BoundaryMode boundary, double lambda_left,
                 double lambda_right);

    const ModelSpec& model() const { return model_; }
    const Lattice& lattice() const { return lattice_; }
    BoundaryMode boundary() const { return boundary_; }

    // Deterministic drift per unit micro-time, without the drive and with it.
    std::vector<double> bulk_drift(std::span<const double> phi, std::span<const double> drive_sites = {}) const;
    std::vector<double> bath_drift(std::span<const double> phi, std::span<const double> drive_sites = {}) const;

    // Increments from a snapshot, added into `delta`.
    void bulk_increments(std::span<const double> phi, double dt, std::span<const double> drive_sites,
                         const RngContext& rng, std::span<double> delta, StepTally* tally) const;
    void bath_increments(std::span<const double> phi, double dt, std::span<const double> drive_sites,
                         const RngContext& rng, std::span<double> delta, StepTally* tally) const;

    // dt ≤ c_stab / (max_x Σ_y K · sup|∂α|), with the bath curvature folded in.
    double stable_dt(std::span<const double> phi, double c_stab) const;

private:
    ModelSpec model_;
    const Lattice& lattice_;
    BoundaryMode boundary_;
    double lambda_left_, lambda_right_;
};

FieldState step_bulk(const FieldState& state, const ModelSpec& model, const Lattice& lattice, double dt,
                     const DriveField& drive, const RngContext& rng);
FieldState step_baths(const FieldState& state, const ModelSpec& model, const ThermoTable& thermo, double dt,
                      const RngContext& rng);

// i.i.d. draws from ν_Φ for every site.
FieldState sample_equilibrium(const ThermoTable& thermo, double density, std::size_t n, std::uint64_t seed);

struct InitialCondition {
    enum class Kind { local_equilibrium, deterministic, explicit_state };
    Kind kind = Kind::local_equilibrium;
    std::function<double(double)> profile = [](double) { return 1.0; };
    std::vector<double> state;
};

struct SimConfig {
    ModelSpec model;
    std::size_t n = 64;
    double dt = 0.0;  // requested micro step; zero selects the stability bound
    double horizon = 0.1;  // macroscopic T
    std::uint64_t seed = 1;
    BoundaryMode boundary = BoundaryMode::baths;
    DriveField drive;
    std::size_t replicas = 1;
    double record_every = 0.0;  // macroscopic stride; zero records only start and end
    std::size_t bins = 16;
    std::vector<std::size_t> current_cuts;  // cut between sites x and x+1 (1-based x)
    double c_stab = 0.1;
    double kernel_cutoff = 0.0;
    InitialCondition initial;
    bool keep_trace = false;
    std::size_t threads = 1;
    std::string config_hash;
};

struct PathTrace {
    std::vector<double> times;  // microscopic
    std::vector<std::vector<double>> states;
};

struct PathRecord {
    std::vector<double> times;  // macroscopic
    std::vector<std::vector<double>> profiles;
    std::vector<double> volume;
    std::vector<std::size_t> current_cuts;
    std::vector<std::vector<double>> currents;        // integrated, per record and cut
    std::vector<std::vector<double>> drift_currents;  // deterministic part of the same
    std::vector<double> log_weight;
    std::uint64_t seed = 0;
    std::size_t replica = 0;
    std::string config_hash;
    FieldState final_state;
    PathTrace trace;
    std::size_t steps = 0;
    std::size_t halvings = 0;
    double dt = 0.0;
    double micro_horizon = 0.0;
};

struct SimulationResult {
    std::vector<PathRecord> replicas;
    double wall_seconds = 0.0;
    double dt = 0.0;
    std::size_t steps = 0;
    double truncated_fraction = 0.0;
};

// Stability-limited step for the configuration's initial state.
double stable_time_step(const SimConfig& config, const ThermoTable& thermo);

SimulationResult simulate(const SimConfig& config, const ThermoTable& thermo);
PathRecord simulate_replica(const SimConfig& config, const ThermoTable& thermo, std::size_t replica);

// Replica-averaged binned profile at each record time.
std::vector<std::vector<double>> mean_profiles(const SimulationResult& result);

// Block averages on `bins` uniform cells, or pairings (1/n)Σφ(x)G(x/n).
std::vector<double> empirical_profile(const FieldState& state, std::size_t bins);
double empirical_pairing(const FieldState& state, const std::function<double(double)>& g);

// log dQ_0/dQ_H recomputed from a full-resolution trace.
double log_radon_nikodym(const ModelSpec& model, const ThermoTable& thermo, const Lattice& lattice,
                         BoundaryMode boundary, const PathTrace& trace, const DriveField& drive);

// Smooth local observable with analytic partials; `sites` are 0-based.
struct CylinderFunction {
    std::vector<std::size_t> sites;
    std::function<double(std::span<const double>)> value;
    std::function<void(std::span<const double>, std::span<double>)> gradient;
    std::function<void(std::span<const double>, std::span<double>)> hessian;  // row-major k×k
};

double generator_apply(const ModelSpec& model, const ThermoTable& thermo, const Lattice& lattice,
                       BoundaryMode boundary, const CylinderFunction& f, const FieldState& state);

// Random planar rotations of every pair; conserves Σω².
BemState bem_step(const BemState& state, const Lattice& lattice, double dt, const RngContext& rng);
void bem_step_inplace(BemState& state, const Lattice& lattice, double dt, const RngContext& rng,
                      StepTally* tally = nullptr);
FieldState bem_energy_map(const BemState& state);

void write_path_csv(std::ostream& out, const PathRecord& record, const std::string& meta);

} // namespace lrgl
