// Experiment runner: `lrgl run --config c.json` and `lrgl validate --config c.json`.
#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "lrgl/error.hpp"
#include "lrgl/pipeline.hpp"

namespace {

enum Exit { ok = 0, other = 1, invalid = 2, numerical = 3 };

int classify(const std::exception& e) {
    if (dynamic_cast<const lrgl::NumericalError*>(&e) || dynamic_cast<const lrgl::ConvergenceError*>(&e) ||
        dynamic_cast<const lrgl::DegeneracyError*>(&e))
        return numerical;
    if (dynamic_cast<const lrgl::ValidationError*>(&e) || dynamic_cast<const lrgl::DomainError*>(&e) ||
        dynamic_cast<const lrgl::RangeError*>(&e) || dynamic_cast<const lrgl::PositivityError*>(&e))
        return invalid;
    return other;
}

std::string timestamp() {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    std::ostringstream os;
    os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return os.str();
}

nlohmann::json read_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw lrgl::ValidationError("cannot read config " + path);
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw lrgl::ValidationError("config " + path + " is not valid JSON: " + e.what());
    }
}

// Flag beats LRGL_OUT_DIR beats the config's own "output".
std::string output_dir(const std::string& flag, const std::string& from_config) {
    if (!flag.empty()) return flag;
    if (const char* env = std::getenv("LRGL_OUT_DIR"); env && *env) return env;
    return from_config;
}

int run(const std::string& config_path, const std::string& out_flag, std::optional<std::uint64_t> seed,
        std::size_t threads) {
    const auto started = timestamp();
    const auto t0 = std::chrono::steady_clock::now();
    const lrgl::ExperimentConfig config = lrgl::parse_config(read_json(config_path), seed);
    const std::filesystem::path out = output_dir(out_flag, config.output);
    const lrgl::RunOutcome outcome = lrgl::run_experiment(config, out, threads);
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    lrgl::write_manifest(out, config, outcome, wall, started);
    std::cout << lrgl::kind_name(config.kind) << ": wrote " << outcome.files.size() << " files to " << out.string()
              << " (config hash " << config.hash << ")\n";
    for (const auto& [name, pass] : outcome.checks.items())
        std::cout << "  check " << name << ": " << (pass.get<bool>() ? "pass" : "FAIL") << '\n';
    return ok;
}

int validate(const std::string& config_path) {
    nlohmann::json source;
    try {
        source = read_json(config_path);
    } catch (const std::exception& e) {
        std::cout << "FAIL " << e.what() << '\n';
        return invalid;
    }
    const lrgl::ValidationReport rep = lrgl::validate_config(source);
    for (const auto& line : rep.lines) std::cout << line << '\n';
    return rep.ok ? ok : invalid;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Long-range Ginzburg-Landau experiment runner"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(lrgl::toolkit_version));

    std::string config_path, out_dir;
    std::uint64_t seed_value = 0;
    std::size_t threads = 1;

    auto* run_cmd = app.add_subcommand("run", "execute the configured experiment");
    run_cmd->add_option("--config", config_path, "experiment config (JSON)")->required();
    run_cmd->add_option("--out", out_dir, "output directory (overrides LRGL_OUT_DIR and the config)");
    auto* seed_opt = run_cmd->add_option("--seed", seed_value, "override the config seed");
    run_cmd->add_option("--threads", threads, "worker threads for replicas")->check(CLI::PositiveNumber);

    auto* validate_cmd = app.add_subcommand("validate", "dry-run constructors and stability bounds");
    validate_cmd->add_option("--config", config_path, "experiment config (JSON)")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? ok : invalid;
    }

    try {
        if (*validate_cmd) return validate(config_path);
        std::optional<std::uint64_t> seed;
        if (*seed_opt) seed = seed_value;
        return run(config_path, out_dir, seed, threads);
    } catch (const std::exception& e) {
        const int code = classify(e);
        std::cerr << (code == numerical ? "numerical failure: " : code == invalid ? "invalid config: " : "error: ")
                  << e.what() << '\n';
        return code;
    }
}
