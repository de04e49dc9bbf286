#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "shellflow/noise.hpp"
#include "shellflow/probe_report.hpp"
#include "shellflow/shell_space.hpp"

namespace shellflow {

/// Names accepted by [experiment] name / --experiment.
const std::vector<std::string>& experiment_names();

/// A TOML document as JSON (tables become objects; dates become strings).
/// Throws ConfigError with the parser's position on malformed input.
nlohmann::json parse_config_text(std::string_view text, std::string_view source = "config");
nlohmann::json load_config_file(const std::string& path);

/// Applies "a.b.c=value". The value is read as a TOML value when it parses
/// as one ("8", "1e-3", "[0.1, 0.2]", "true"), otherwise kept as a string.
void apply_override(nlohmann::json& doc, std::string_view assignment);

struct ExperimentConfig {
    ModelConfig model;
    NoiseConfig noise;
    std::string experiment;
    double dt = 1e-4;
    double T = 1.0;
    double burn_in = 0.2;        ///< fraction of each horizon dropped before Cesaro averaging
    std::size_t samples = 1000;
    std::uint64_t seed = 0;
    unsigned threads = 1;        ///< resolved worker count (never part of the artifacts)
    std::string out_dir = "out";
    nlohmann::json params;       ///< experiment parameters with defaults filled in

    /// Full resolved configuration as embedded in every artifact. Worker
    /// count and output directory are left out so that outputs do not
    /// depend on them.
    nlohmann::json resolved() const;
};

/// Validates every field before anything runs. Throws ConfigError whose
/// message starts with the offending field path ("numerics.dt: ...").
/// threads = 0 resolves to the available hardware parallelism.
ExperimentConfig resolve_config(const nlohmann::json& doc);

/// Non-fatal findings: noise condition status and a step-size hint.
std::vector<std::string> config_diagnostics(const ExperimentConfig& cfg);

struct Artifact {
    std::string filename;
    std::string content;
};

struct RunResult {
    std::vector<ProbeReport> reports;
    std::vector<Artifact> artifacts;  ///< CSV data, each headed by '#' metadata lines

    Verdict verdict() const;
    /// {"config", "reports", "verdict", "version"}.
    nlohmann::json to_json(const ExperimentConfig& cfg) const;
};

/// Runs the configured experiment. BlowUpError and other library errors
/// propagate to the caller.
RunResult run_experiment(const ExperimentConfig& cfg);

/// 0 when every verdict passes, 2 when the worst is inconclusive, 1 on failure.
int exit_code(Verdict v) noexcept;

}  // namespace shellflow
