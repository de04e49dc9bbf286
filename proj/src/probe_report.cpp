#include "shellflow/probe_report.hpp"

namespace shellflow {

std::string_view to_string(Verdict v) noexcept {
    switch (v) {
        case Verdict::pass:
            return "pass";
        case Verdict::fail:
            return "fail";
        case Verdict::inconclusive:
            return "inconclusive";
    }
    return "inconclusive";
}

Verdict combine(Verdict a, Verdict b) noexcept {
    if (a == Verdict::fail || b == Verdict::fail) return Verdict::fail;
    if (a == Verdict::inconclusive || b == Verdict::inconclusive) return Verdict::inconclusive;
    return Verdict::pass;
}

nlohmann::json ProbeReport::to_json() const {
    nlohmann::json j;
    j["name"] = name;
    j["criterion"] = criterion;
    j["inputs"] = inputs;
    j["estimates"] = estimates;
    j["stderrs"] = stderrs;
    j["bounds"] = bounds;
    j["warnings"] = warnings;
    j["verdict"] = std::string(to_string(verdict));
    j["library_version"] = std::string(library_version);
    return j;
}

}  // namespace shellflow
