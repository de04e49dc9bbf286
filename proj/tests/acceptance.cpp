// Desk-scale acceptance checks. Each criterion prints exactly one line:
//   PASS|FAIL <NAME> <key=value ...>
// and writes its reports to acceptance/<NAME>.json under the working
// directory. Usage: shellflow_acceptance <NAME>... | all

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "shellflow/errors.hpp"
#include "shellflow/experiment.hpp"
#include "shellflow/markov_desk.hpp"
#include "shellflow/rng.hpp"
#include "shellflow/shell_space.hpp"

using namespace shellflow;
using nlohmann::json;

namespace {

/// full: the pinned acceptance settings; reduced: the same code paths at a
/// fraction of the cost, used by the determinism reruns.
enum class Scale { full, reduced };

struct Outcome {
    bool pass = false;
    std::string detail;
    json reports = json::array();
};

json desk(const std::string& experiment, double T, std::size_t samples, unsigned threads) {
    json doc = {{"model", {{"variant", "GOY"}, {"N", 16}, {"k0", 2.0}, {"nu", 1.0}, {"a", 1.0}, {"b", -0.5}}},
                {"noise", {{"amplitude", 0.3}, {"active", 4}}},
                {"numerics",
                 {{"dt", 1e-4}, {"T", T}, {"samples", samples}, {"seed", 20240611}, {"threads", threads}}},
                {"experiment", {{"name", experiment}}}};
    return doc;
}

std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4g", v);
    return buf;
}

struct Run {
    RunResult result;
    ExperimentConfig cfg;
    const ProbeReport& report(std::size_t i = 0) const { return result.reports.at(i); }
};

Run run(const json& doc, Outcome& out) {
    Run r;
    r.cfg = resolve_config(doc);
    r.result = run_experiment(r.cfg);
    out.reports.push_back(r.result.to_json(r.cfg));
    return r;
}

double est(const ProbeReport& r, const char* key) { return r.estimates.at(key).get<double>(); }

// --------------------------------------------------------------------------

Outcome algebra(Scale scale, unsigned) {
    Outcome out;
    const int trials = scale == Scale::full ? 1000 : 50;
    NormalStream rng(17, 0);
    auto random_state = [&](std::size_t n) {
        std::vector<cplx> a(n);
        for (auto& z : a) z = {rng.normal(), rng.normal()};
        return ShellState(std::move(a));
    };
    double worst_energy = 0.0, worst_anti = 0.0;
    for (Variant variant : {Variant::goy, Variant::sabra}) {
        for (int N : {4, 8, 16}) {
            ModelConfig cfg;
            cfg.variant = variant;
            cfg.N = N;
            for (int t = 0; t < trials; ++t) {
                const auto n = static_cast<std::size_t>(N);
                const ShellState u = random_state(n), v = random_state(n), w = random_state(n);
                const ShellState bvu = bilinear(v, u, cfg);
                const double scale_e = h_norm(bvu) * h_norm(u);
                worst_energy = std::max(worst_energy, std::abs(inner_h(bvu, u)) / scale_e);
                const ShellState buv = bilinear(u, v, cfg), buw = bilinear(u, w, cfg);
                const double lhs = inner_h(buv, w), rhs = -inner_h(buw, v);
                const double scale_a = h_norm(buv) * h_norm(w) + h_norm(buw) * h_norm(v);
                worst_anti = std::max(worst_anti, std::abs(lhs - rhs) / scale_a);
            }
        }
    }
    out.pass = worst_energy <= 1e-12 && worst_anti <= 1e-12;
    out.detail = "energy_rel=" + num(worst_energy) + " antisym_rel=" + num(worst_anti) + " tol=1e-12";
    out.reports.push_back({{"energy_rel", worst_energy}, {"antisym_rel", worst_anti}, {"trials", trials}});
    return out;
}

Outcome energy(Scale scale, unsigned threads) {
    Outcome out;
    const bool full = scale == Scale::full;
    auto r = run(desk("energy", full ? 5.0 : 0.5, full ? 2000 : 200, threads), out);
    out.pass = r.report().passed();
    out.detail = "report=" + std::string(to_string(r.report().verdict)) + " " + r.report().estimates.dump();
    return out;
}

Outcome expmom(Scale scale, unsigned threads) {
    Outcome out;
    const bool full = scale == Scale::full;
    out.pass = true;
    for (double amp : {0.0, 1.0}) {
        json doc = desk("exp-moment", full ? 5.0 : 0.5, full ? 10000 : 200, threads);
        doc["experiment"]["x_amp"] = amp;
        auto r = run(doc, out);
        out.pass = out.pass && r.report().passed();
        out.detail += "x=" + num(amp) + "e1:" + std::string(to_string(r.report().verdict)) + " ";
    }
    return out;
}

Outcome tangent(Scale scale, unsigned threads) {
    Outcome out;
    const bool full = scale == Scale::full;
    json doc = desk("tangent", full ? 1.0 : 0.2, 1, threads);
    doc["experiment"]["pairs"] = full ? 10 : 3;
    doc["experiment"]["eta"] = 1e-3;
    auto r = run(doc, out);
    out.pass = r.report().passed();
    const auto& ratios = r.report().estimates.at("ratio");
    double lo = INFINITY, hi = 0;
    for (const auto& x : ratios) {
        lo = std::min(lo, x.get<double>());
        hi = std::max(hi, x.get<double>());
    }
    out.detail = "ratio_min=" + num(lo) + " ratio_max=" + num(hi) + " bounds=[1.5,2.5]";
    return out;
}

Outcome control(Scale scale, unsigned threads) {
    Outcome out;
    json doc = desk("control", scale == Scale::full ? 3.0 : 2.0, 1, threads);
    doc["experiment"]["steer_time"] = 2.0;
    auto r = run(doc, out);
    const auto& e = r.report().estimates;
    out.pass = r.report().passed();
    out.detail = "n_star=" + r.cfg.params.at("n_star").dump() + " xi_low=" + num(est(r.report(), "xi_low_max")) +
                 " rho=" + num(est(r.report(), "rho_error")) + " rho_half=" + num(e.at("rho_error_half_dt")) +
                 " halving=" + num(e.at("halving_ratio"));
    return out;
}

Outcome ibp(Scale scale, unsigned threads) {
    Outcome out;
    const bool full = scale == Scale::full;
    json lin = desk("malliavin-ibp", full ? 1.0 : 0.2, full ? 10000 : 200, threads);
    lin["model"]["a"] = 0.0;
    lin["model"]["b"] = 0.0;
    lin["experiment"]["x_amp"] = 0.5;
    lin["experiment"]["control"] = "constant";
    auto a = run(lin, out);

    json nonlin = desk("malliavin-ibp", full ? 1.0 : 0.2, full ? 10000 : 200, threads);
    nonlin["model"]["N"] = 8;
    nonlin["experiment"]["x_amp"] = 0.5;
    nonlin["experiment"]["control"] = "low_mode";
    auto b = run(nonlin, out);

    out.pass = a.report().passed() && b.report().passed();
    auto line = [](const ProbeReport& r) {
        return "lhs=" + num(est(r, "lhs")) + " rhs=" + num(est(r, "rhs")) + " se=" + num(r.stderrs.at("difference"));
    };
    out.detail = "linear[" + line(a.report()) + " closed=" + num(est(a.report(), "closed_form")) + "] nonlinear[" +
                 line(b.report()) + "]";
    return out;
}

Outcome cheby(Scale scale, unsigned threads) {
    Outcome out;
    const bool full = scale == Scale::full;
    json doc = desk("avg-bounded", full ? 10.0 : 1.0, full ? 2000 : 200, threads);
    doc["experiment"]["r"] = 1.0;
    doc["experiment"]["R"] = 2.0;
    doc["experiment"]["t_grid"] = full ? json{2.5, 5.0, 10.0} : json{0.5, 1.0};
    auto r = run(doc, out);
    out.pass = r.report().passed();
    out.detail = "worst_margin=" + num(est(r.report(), "worst_margin"));
    return out;
}

Outcome conc(Scale scale, unsigned threads) {
    Outcome out;
    const std::size_t M = scale == Scale::full ? 2000 : 200;
    json doc = desk("concentrate", 1.0, M, threads);
    doc["experiment"]["eps"] = 0.5;
    doc["experiment"]["r"] = 2.0;
    auto r = run(doc, out);
    json quiet = doc;
    quiet["noise"]["active"] = 0;
    auto q = run(quiet, out);
    const double alpha = est(r.report(), "alpha"), alpha_quiet = est(q.report(), "alpha");
    const double se = r.report().stderrs.at("alpha").get<double>();
    out.pass = r.report().passed() && alpha - 3 * se > 0.0 && alpha_quiet == 1.0;
    out.detail = "alpha=" + num(alpha) + " se=" + num(se) + " alpha_noise_free=" + num(alpha_quiet);
    return out;
}

Outcome eprop(Scale scale, unsigned threads) {
    Outcome out;
    const bool full = scale == Scale::full;
    json doc = desk("e-property", full ? 50.0 : 2.0, full ? 200 : 20, threads);
    doc["experiment"]["x_amp"] = 0.5;
    doc["experiment"]["deltas"] = {0.4, 0.2, 0.1};
    doc["experiment"]["t_grid"] = full ? json{0.1, 0.5, 1.0, 5.0, 10.0, 25.0, 50.0} : json{0.5, 1.0, 2.0};
    doc["experiment"]["dictionary"] = "tanh";
    auto r = run(doc, out);
    out.pass = r.report().passed();
    out.detail = "sup=" + r.report().estimates.at("sup").dump() + " ratio=" + r.report().estimates.at("ratio").dump();
    return out;
}

Outcome stable(Scale scale, unsigned threads) {
    Outcome out;
    const bool full = scale == Scale::full;
    json doc = desk("stability", full ? 500.0 : 5.0, full ? 500 : 50, threads);
    doc["experiment"]["x1_amp"] = 0.0;
    doc["experiment"]["x2_amp"] = 5.0;
    doc["experiment"]["t_grid"] = full ? json{50.0, 100.0, 250.0, 500.0} : json{2.5, 5.0};
    auto r = run(doc, out);
    const auto& e = r.report().estimates;
    const auto& b = r.report().bounds;
    out.pass = r.report().passed();
    out.detail = "cesaro=" + e.at("cesaro_distance").dump() + " baseline=" + b.at("cesaro_baseline").dump();
    return out;
}

Outcome finite(Scale scale, unsigned) {
    Outcome out;
    const std::size_t wanted = scale == Scale::full ? 100 : 5;
    const double eps = 0.2;
    std::size_t accepted = 0, generated = 0;
    double worst_residual = 0.0, worst_margin = -INFINITY;
    bool ok = true;
    for (std::uint64_t seed = 0; accepted < wanted && seed < 10 * wanted; ++seed) {
        ++generated;
        const std::size_t n = 5 + seed % 16;
        const auto sg = random_chain(n, 2, ChainKind::mixing, 1000 + seed);
        double gap = INFINITY;
        for (std::size_t y = 1; y < n; ++y) gap = std::min(gap, sg.distance(0, y));
        const double delta = 0.5 * gap;
        std::vector<std::size_t> all(n);
        for (std::size_t i = 0; i < n; ++i) all[i] = i;
        const auto dict = chain_dictionary(sg);

        // The three hypotheses, checked independently of the decomposition.
        const auto avg = check_avg_bounded(sg, all, eps);
        const auto con = check_concentrating(sg, 0, delta, all);
        double modulus = 0.0;
        for (const auto& f : dict) {
            const auto t = check_e_property(sg, f, sg.t_max());
            for (auto x : sg.ball(0, delta))
                for (auto y : sg.ball(0, delta)) modulus = std::max(modulus, t.modulus(x, y));
        }
        if (avg.members.empty() || con.alpha <= 0.0 || modulus >= eps / 2) continue;
        ++accepted;

        const auto mu1 = dirac(n, 0), mu2 = dirac(n, n - 1);
        const auto dec = build_decomposition(sg, mu1, mu2, 0, delta, eps, dict);
        const auto brute = verify_stability_bruteforce(sg, mu1, mu2, dict, dec.total_time() + 200, eps,
                                                       dec.total_time());
        worst_residual = std::max(worst_residual, dec.eq4_residual);
        worst_margin = std::max(worst_margin, brute.estimates.at("max_after_start").get<double>() - eps);
        ok = ok && dec.eq4_residual <= 1e-12 && brute.passed();
        out.reports.push_back({{"seed", 1000 + seed},
                               {"states", n},
                               {"alpha", dec.alpha},
                               {"k", dec.k},
                               {"total_time", dec.total_time()},
                               {"eq4_residual", dec.eq4_residual},
                               {"brute", brute.to_json()}});
    }
    ok = ok && accepted == wanted;

    // Chains violating the hypotheses: the decomposition must refuse them,
    // and the reducible ones must show a non-vanishing difference.
    std::size_t refused = 0, diverged = 0;
    const std::vector<std::pair<ChainKind, std::size_t>> bad{
        {ChainKind::reducible, 8}, {ChainKind::reducible, 12}, {ChainKind::periodic, 6}};
    for (std::size_t i = 0; i < bad.size(); ++i) {
        const auto [kind, n] = bad[i];
        const auto sg = random_chain(n, 2, kind, 77 + i);
        double gap = INFINITY;
        for (std::size_t y = 1; y < n; ++y) gap = std::min(gap, sg.distance(0, y));
        const auto dict = chain_dictionary(sg);
        const auto mu1 = dirac(n, 0), mu2 = dirac(n, kind == ChainKind::periodic ? 1 : n - 1);
        try {
            build_decomposition(sg, mu1, mu2, 0, 0.5 * gap, eps, dict);
        } catch (const HypothesisError& e) {
            if (e.stage() == "concentration") ++refused;
        }
        if (kind == ChainKind::reducible &&
            !verify_stability_bruteforce(sg, mu1, mu2, dict, 2000, eps, 1000).passed()) {
            ++diverged;
        }
    }
    ok = ok && refused == bad.size() && diverged == 2;

    out.pass = ok;
    out.detail = "chains=" + std::to_string(accepted) + "/" + std::to_string(generated) +
                 " max_eq4_residual=" + num(worst_residual) + " max(d-eps)=" + num(worst_margin) +
                 " violations_refused=" + std::to_string(refused) + "/3 reducible_diverged=" +
                 std::to_string(diverged) + "/2";
    return out;
}

using Criterion = std::function<Outcome(Scale, unsigned)>;

const std::vector<std::pair<std::string, Criterion>>& criteria() {
    static const std::vector<std::pair<std::string, Criterion>> list{
        {"ALGEBRA", algebra}, {"ENERGY-1", energy}, {"EXPMOM", expmom},   {"TANGENT", tangent},
        {"CONTROL", control}, {"IBP", ibp},         {"CHEBY", cheby},     {"CONC", conc},
        {"EPROP", eprop},     {"STABLE", stable},   {"FINITE", finite}};
    return list;
}

Outcome determinism(Scale, unsigned) {
    Outcome out;
    out.pass = true;
    std::vector<std::string> mismatched;
    for (const auto& [name, fn] : criteria()) {
        const auto a = fn(Scale::reduced, 1).reports.dump();
        const auto b = fn(Scale::reduced, 1).reports.dump();
        const auto c = fn(Scale::reduced, 3).reports.dump();
        if (a != b || a != c) {
            out.pass = false;
            mismatched.push_back(name);
        }
        out.reports.push_back({{"criterion", name}, {"bytes", a.size()}, {"identical", a == b && a == c}});
    }
    out.detail = "criteria=" + std::to_string(criteria().size()) + " threads={1,1,3}";
    for (const auto& m : mismatched) out.detail += " differs:" + m;
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    std::vector<std::string> wanted(argv + 1, argv + argc);
    if (wanted.empty()) {
        std::cerr << "usage: shellflow_acceptance <NAME>... | all\n";
        return 64;
    }
    auto all = criteria();
    all.emplace_back("DETERMINISM", determinism);
    if (wanted.size() == 1 && wanted[0] == "all") {
        wanted.clear();
        for (const auto& c : all) wanted.push_back(c.first);
    }

    std::filesystem::create_directories("acceptance");
    int failures = 0;
    for (const auto& name : wanted) {
        auto it = std::find_if(all.begin(), all.end(), [&](const auto& c) { return c.first == name; });
        if (it == all.end()) {
            std::cerr << "unknown criterion " << name << '\n';
            return 64;
        }
        Outcome o;
        try {
            o = it->second(Scale::full, 0);
        } catch (const std::exception& e) {
            o.pass = false;
            o.detail = std::string("error: ") + e.what();
        }
        std::ofstream("acceptance/" + name + ".json") << o.reports.dump(2) << '\n';
        std::cout << (o.pass ? "PASS " : "FAIL ") << name << ' ' << o.detail << std::endl;
        failures += o.pass ? 0 : 1;
    }
    return failures == 0 ? 0 : 1;
}
