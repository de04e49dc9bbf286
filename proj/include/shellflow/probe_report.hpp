#pragma once

#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace shellflow {

inline constexpr std::string_view library_version = "0.1.0";

enum class Verdict { pass, fail, inconclusive };

std::string_view to_string(Verdict v) noexcept;

/// Outcome of one probe. Everything needed to recompute the verdict is in
/// the recorded numbers; JSON output has sorted keys, so equal reports
/// serialize to identical bytes.
struct ProbeReport {
    std::string name;
    std::string criterion;  ///< human-readable pass rule
    nlohmann::json inputs = nlohmann::json::object();
    nlohmann::json estimates = nlohmann::json::object();
    nlohmann::json stderrs = nlohmann::json::object();
    nlohmann::json bounds = nlohmann::json::object();
    std::vector<std::string> warnings;
    Verdict verdict = Verdict::inconclusive;

    bool passed() const noexcept { return verdict == Verdict::pass; }
    nlohmann::json to_json() const;
    std::string dump() const { return to_json().dump(2); }
};

/// Worst of several verdicts: fail beats inconclusive beats pass.
Verdict combine(Verdict a, Verdict b) noexcept;

}  // namespace shellflow
