// shellflow: run stochastic shell-model and finite-chain experiments from a
// TOML configuration and write JSON reports plus CSV data.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "shellflow/errors.hpp"
#include "shellflow/experiment.hpp"

namespace fs = std::filesystem;
using namespace shellflow;

namespace {

constexpr int exit_usage = 64;

struct Options {
    std::string config;
    std::string experiment;
    std::optional<std::uint64_t> seed;
    std::optional<double> dt, T;
    std::optional<std::size_t> samples;
    std::optional<unsigned> threads;
    std::string out;
    std::string chain;
    std::vector<std::string> overrides;
};

template <class T>
std::string text(const T& v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

nlohmann::json build_document(const Options& o) {
    nlohmann::json doc = o.config.empty() ? nlohmann::json::object() : load_config_file(o.config);
    if (!o.experiment.empty()) apply_override(doc, "experiment.name=\"" + o.experiment + "\"");
    if (o.seed) apply_override(doc, "numerics.seed=" + text(*o.seed));
    if (o.dt) apply_override(doc, "numerics.dt=" + text(*o.dt));
    if (o.T) apply_override(doc, "numerics.T=" + text(*o.T));
    if (o.samples) apply_override(doc, "numerics.samples=" + text(*o.samples));
    if (o.threads) apply_override(doc, "numerics.threads=" + text(*o.threads));
    if (!o.chain.empty()) doc["experiment"]["chain"] = o.chain;
    for (const auto& kv : o.overrides) apply_override(doc, kv);
    if (!o.out.empty()) doc["output"]["dir"] = o.out;
    if (const char* env = std::getenv("SHELLFLOW_OUT"); env && *env) doc["output"]["dir"] = std::string(env);
    return doc;
}

void write_file(const fs::path& path, const std::string& content) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot write " + path.string());
    f << content;
}

int run(const Options& o) {
    ExperimentConfig cfg;
    try {
        cfg = resolve_config(build_document(o));
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return exit_usage;
    }
    for (const auto& w : config_diagnostics(cfg)) std::cerr << "warning: " << w << '\n';

    const fs::path dir(cfg.out_dir);
    try {
        fs::create_directories(dir);
        RunResult result = run_experiment(cfg);
        write_file(dir / (cfg.experiment + ".json"), result.to_json(cfg).dump(2) + "\n");
        for (const auto& a : result.artifacts) write_file(dir / a.filename, a.content);
        for (const auto& r : result.reports) {
            std::cout << r.name << ": " << to_string(r.verdict) << '\n';
            for (const auto& w : r.warnings) std::cout << "  warning: " << w << '\n';
        }
        return exit_code(result.verdict());
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return exit_usage;
    } catch (const BlowUpError& e) {
        nlohmann::json diag = {{"version", std::string(library_version)},
                               {"config", cfg.resolved()},
                               {"error", e.what()},
                               {"time", e.time()}};
        try {
            write_file(dir / "diagnostics.json", diag.dump(2) + "\n");
        } catch (const std::exception&) {
        }
        std::cerr << "blow-up: " << e.what() << " (see " << (dir / "diagnostics.json").string() << ")\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}

int validate(const Options& o) {
    try {
        auto doc = build_document(o);
        // Validation does not require a seed; it is checked when running.
        if (!doc.contains("numerics") || !doc["numerics"].contains("seed")) doc["numerics"]["seed"] = 0;
        const auto cfg = resolve_config(doc);
        for (const auto& w : config_diagnostics(cfg)) std::cout << "warning: " << w << '\n';
        return 0;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return exit_usage;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Stochastic shell-model ergodicity experiments"};
    app.set_version_flag("--version", std::string(library_version));
    app.require_subcommand(1);

    Options o;
    auto* run_cmd = app.add_subcommand("run", "run an experiment and write its reports");
    auto* val_cmd = app.add_subcommand("validate", "check a configuration without running it");
    for (auto* cmd : {run_cmd, val_cmd}) {
        cmd->add_option("--config", o.config, "TOML configuration file");
        cmd->add_option("--experiment", o.experiment, "experiment name")
            ->check(CLI::IsMember(experiment_names()));
        cmd->add_option("--override", o.overrides, "dotted key=value, repeatable")->take_all();
    }
    run_cmd->add_option("--seed", o.seed, "master seed");
    run_cmd->add_option("--dt", o.dt, "time step");
    run_cmd->add_option("--T", o.T, "horizon");
    run_cmd->add_option("--samples", o.samples, "Monte Carlo sample count");
    run_cmd->add_option("--threads", o.threads, "worker threads (0: all cores)");
    run_cmd->add_option("--out", o.out, "output directory (SHELLFLOW_OUT takes precedence)");
    run_cmd->add_option("--chain", o.chain, "chain file for finite-markov");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : exit_usage;
    }
    return run_cmd->parsed() ? run(o) : validate(o);
}
