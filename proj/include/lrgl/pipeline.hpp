#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <initializer_list>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "lrgl/hydro.hpp"
#include "lrgl/model.hpp"
#include "lrgl/sde.hpp"
#include "lrgl/thermo.hpp"

namespace lrgl {

inline constexpr const char* toolkit_version = "0.1.0";

enum class ExperimentKind {
    thermo_table,
    simulate,
    hydro_evolve,
    hydrostatic,
    hydro_vs_sde,
    rate_functional,
    quasi_potential,
    diffusive_limit,
    green_kubo,
    bem_consistency,
};

ExperimentKind parse_kind(const std::string& name);
std::string kind_name(ExperimentKind kind);

ModelSpec parse_model(const nlohmann::json& block);
QuadratureSpec parse_quadrature(const nlohmann::json& numerics);

struct ExperimentConfig {
    ExperimentKind kind = ExperimentKind::thermo_table;
    ModelSpec model;
    QuadratureSpec quadrature;
    nlohmann::json numerics = nlohmann::json::object();
    std::uint64_t seed = 1;
    std::string output = "out";
    std::string hash;  // FNV-1a of the canonical JSON after overrides
    nlohmann::json source;
};

// Fills the hash; `seed` overrides the file value when set.
ExperimentConfig parse_config(nlohmann::json source, std::optional<std::uint64_t> seed = std::nullopt);
ExperimentConfig load_config(const std::filesystem::path& path, std::optional<std::uint64_t> seed = std::nullopt);
std::string hash_json(const nlohmann::json& j);

struct ValidationReport {
    bool ok = true;
    std::vector<std::string> lines;
};

ValidationReport validate_config(const nlohmann::json& source);

struct RunOutcome {
    std::vector<std::filesystem::path> files;
    nlohmann::json checks = nlohmann::json::object();  // name → bool
    nlohmann::json stages = nlohmann::json::object();  // name → seconds
};

RunOutcome run_experiment(const ExperimentConfig& config, const std::filesystem::path& out_dir, std::size_t threads);

void write_manifest(const std::filesystem::path& out_dir, const ExperimentConfig& config, const RunOutcome& outcome,
                    double wall_seconds, const std::string& started);

// Replica-averaged binned SDE profile against the binned hydrodynamic profile at time T.
struct HydroSdeRow {
    std::size_t n = 0;
    double l1 = 0.0;
    double seconds = 0.0;
    std::vector<double> empirical;
    std::vector<double> hydro;
};

struct HydroSdeSetup {
    ModelSpec model;
    std::vector<std::size_t> sizes{128, 256, 512};
    std::size_t replicas = 100;
    double horizon = 0.5;
    std::size_t bins = 16;
    std::size_t cells = 256;
    std::function<double(double)> initial = [](double u) { return u; };
    std::uint64_t seed = 1;
    std::size_t threads = 1;
    double c_stab = 0.1;
};

std::vector<HydroSdeRow> hydro_vs_sde(const HydroSdeSetup& setup, const ThermoTable& thermo);

// One-step Monte Carlo drift of cylinder observables under ω rotations, against the generator of φ = ω².
struct BemDriftRow {
    std::string observable;
    double drift = 0.0;
    double standard_error = 0.0;
    double generator = 0.0;
    double z() const { return (drift - generator) / standard_error; }
};

std::vector<BemDriftRow> bem_drift_check(const ModelSpec& model, const ThermoTable& thermo, std::size_t n, double dt,
                                         std::size_t samples, std::uint64_t seed);
// Relative change of Σω² after `steps` rotation sweeps.
double bem_energy_drift(const ModelSpec& model, std::size_t n, std::size_t steps, double dt, std::uint64_t seed);

// Density window covering the baths and `extra`, clipped inside the achievable means.
Interval default_window(const ThermoTable& thermo, std::initializer_list<double> extra = {});

} // namespace lrgl
