#include <doctest.h>

#include <cmath>
#include <vector>

#include "shellflow/ergodicity.hpp"
#include "shellflow/errors.hpp"
#include "shellflow/rng.hpp"

using namespace shellflow;

namespace {

ModelConfig desk(int N = 8, double a = 1.0, double b = -0.5) {
    ModelConfig cfg;
    cfg.N = N;
    cfg.a = a;
    cfg.b = b;
    return cfg;
}

McOptions quick(std::size_t samples, std::uint64_t seed = 1, double dt = 1e-3) {
    McOptions mc;
    mc.dt = dt;
    mc.samples = samples;
    mc.seed = seed;
    mc.threads = 2;
    return mc;
}

EmpiricalMeasure random_measure(NormalStream& rng, std::size_t dim, std::size_t n, double shift) {
    EmpiricalMeasure mu;
    mu.dim = dim;
    std::vector<double> p(dim);
    for (std::size_t i = 0; i < n; ++i) {
        for (double& x : p) x = shift + 0.5 * rng.normal();
        mu.add(p);
    }
    return mu;
}

}  // namespace

TEST_CASE("dual distance between point masses") {
    const auto dict = tanh_dictionary(2);
    const auto zero = EmpiricalMeasure::point_mass({0, 0, 0, 0});
    const auto e1 = EmpiricalMeasure::point_mass({1, 0, 0, 0});
    CHECK(dual_lipschitz_distance(zero, e1, dict) == doctest::Approx(0.7615941559557649).epsilon(1e-15));
    CHECK(dual_lipschitz_distance(e1, e1, dict) == 0.0);

    const auto full = standard_dictionary(2);
    NormalStream rng(1, 0);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> p(4), q(4);
        double dist = 0.0;
        for (std::size_t i = 0; i < 4; ++i) {
            p[i] = rng.normal();
            q[i] = rng.normal();
            dist += (p[i] - q[i]) * (p[i] - q[i]);
        }
        const double d = dual_lipschitz_distance(EmpiricalMeasure::point_mass(p), EmpiricalMeasure::point_mass(q), full);
        CHECK(d <= std::sqrt(dist) + 1e-15);
    }
    CHECK_THROWS_AS(dual_lipschitz_distance(zero, EmpiricalMeasure::point_mass({0, 0}), dict), DimensionError);
}

TEST_CASE("dual distance is a pseudometric") {
    const auto dict = standard_dictionary(2);
    NormalStream rng(2, 0);
    for (int trial = 0; trial < 10; ++trial) {
        const auto a = random_measure(rng, 4, 50, 0.0);
        const auto b = random_measure(rng, 4, 70, 0.1);
        const auto c = random_measure(rng, 4, 30, -0.2);
        const double ab = dual_lipschitz_distance(a, b, dict), ba = dual_lipschitz_distance(b, a, dict);
        const double bc = dual_lipschitz_distance(b, c, dict), ac = dual_lipschitz_distance(a, c, dict);
        CHECK(ab == ba);
        CHECK(ac <= ab + bc);
        CHECK(dual_lipschitz_distance(a, a, dict) == 0.0);
    }
}

TEST_CASE("empirical measure validation") {
    EmpiricalMeasure mu;
    mu.dim = 2;
    CHECK_THROWS_AS(mu.validate(), PreconditionError);
    mu.points = {1.0, 2.0, 3.0};
    CHECK_THROWS_AS(mu.validate(), DimensionError);
    mu.points = {1.0, NAN};
    CHECK_THROWS_AS(mu.validate(), PreconditionError);
    CHECK_THROWS_AS(mu.add(std::vector<double>{1.0}), DimensionError);
}

TEST_CASE("energy balance") {
    SUBCASE("noise-free linear flow balances pathwise") {
        const ModelConfig cfg = desk(8, 0.0, 0.0);
        // Only the trapezoid rule for the dissipation integral is inexact:
        // relative error (2 nu k_1^2 dt)^2 / 12 on e^{-2 nu k_1^2 t}.
        const auto rep = energy_balance_mc(ShellState::unit(8, 1, 1.0), 1.0, cfg, NoiseConfig::off(8), quick(100));
        const double r1 = rep.estimates["residual"];
        CHECK(std::abs(r1) == doctest::Approx(32e-3 * 32e-3 / 12.0).epsilon(0.01));
        CHECK(rep.passed());
        const auto half =
            energy_balance_mc(ShellState::unit(8, 1, 1.0), 1.0, cfg, NoiseConfig::off(8), quick(100, 1, 5e-4));
        CHECK(r1 / half.estimates["residual"].get<double>() == doctest::Approx(4.0).epsilon(0.01));
    }
    SUBCASE("from rest with noise") {
        const ModelConfig cfg = desk(8);
        const NoiseConfig noise = NoiseConfig::uniform(8, 0.3, 4);
        const auto small = energy_balance_mc(ShellState(8), 2.0, cfg, noise, quick(400, 3));
        CHECK(small.passed());
        CHECK(small.estimates["target"].get<double>() == doctest::Approx(0.72));
        const auto big = energy_balance_mc(ShellState(8), 2.0, cfg, noise, quick(800, 3));
        const double ratio = small.stderrs["residual"].get<double>() / big.stderrs["residual"].get<double>();
        CHECK(ratio == doctest::Approx(std::sqrt(2.0)).epsilon(0.15));
    }
    CHECK_THROWS_AS(energy_balance_mc(ShellState(8), 1.0, desk(), NoiseConfig::off(8), quick(50)), PreconditionError);
}

TEST_CASE("exponential moment") {
    const ModelConfig cfg = desk(8);
    SUBCASE("quiet system from rest") {
        const auto rep = exp_moment_mc(ShellState(8), 1.0, 0.5, cfg, NoiseConfig::off(8), quick(100));
        CHECK(rep.estimates["moment"].get<double>() == 1.0);
        CHECK(rep.passed());
    }
    SUBCASE("largest admissible eta and monotonicity") {
        const NoiseConfig noise = NoiseConfig::uniform(8, 0.3, 4);
        const double eta_max = cfg.nu / (2.0 * 0.09);
        const auto top = exp_moment_mc(ShellState::unit(8, 1), 2.0, eta_max, cfg, noise, quick(500, 4));
        CHECK(top.passed());
        double prev = 0.0;
        for (const double eta : {0.25 * eta_max, 0.5 * eta_max, eta_max}) {
            const double m = exp_moment_mc(ShellState(8), 2.0, eta, cfg, noise, quick(200, 5)).estimates["moment"];
            CHECK(m > prev);
            prev = m;
        }
        CHECK_THROWS_AS(exp_moment_mc(ShellState(8), 1.0, 1.01 * eta_max, cfg, noise, quick(100)), PreconditionError);
        CHECK_THROWS_AS(exp_moment_mc(ShellState(8), 1.0, 0.0, cfg, noise, quick(100)), PreconditionError);
    }
}

TEST_CASE("average boundedness") {
    const ModelConfig cfg = desk(8);
    const NoiseConfig noise = NoiseConfig::uniform(8, 0.5, 4);  // Tr Q^2 = 1
    const auto xs = sphere_points(cfg, 1.0, 3, 7);
    for (const auto& x : xs) CHECK(h_norm(x) == doctest::Approx(1.0));
    const auto rep = average_boundedness_probe(1.0, 2.0, {2.0, 10.0}, xs, cfg, noise, quick(50, 6));
    CHECK(rep.bounds["exit_fraction"][1].get<double>() == doctest::Approx(0.275));
    CHECK(rep.passed());

    const auto far = average_boundedness_probe(1.0, 1e3, {2.0}, xs, cfg, noise, quick(20, 6));
    CHECK(far.estimates["worst_margin"].get<double>() < 0.0);
    for (const auto& row : far.estimates["exit_fraction"]) CHECK(row[0].get<double>() == 0.0);

    // Same paths, nested events.
    const auto r1 = average_boundedness_probe(1.0, 0.3, {2.0}, xs, cfg, noise, quick(20, 8));
    const auto r2 = average_boundedness_probe(1.0, 0.6, {2.0}, xs, cfg, noise, quick(20, 8));
    for (std::size_t a = 0; a < xs.size(); ++a) {
        CHECK(r2.estimates["exit_fraction"][a][0].get<double>() <= r1.estimates["exit_fraction"][a][0].get<double>());
    }
}

TEST_CASE("concentration") {
    const ModelConfig cfg = desk(8);
    CHECK(concentration_time(0.5, 2.0, cfg) == doctest::Approx(std::log(8.0) / 16.0));
    CHECK(concentration_time(1.0, 0.4, cfg) == 0.0);
    const auto xs = sphere_points(cfg, 2.0, 4, 9);

    const auto quiet = concentration_probe(0.5, 2.0, xs, cfg, NoiseConfig::off(8), quick(100));
    CHECK(quiet.estimates["alpha"].get<double>() == 1.0);
    CHECK(quiet.passed());
    CHECK(quiet.warnings.empty());

    const NoiseConfig noise = NoiseConfig::uniform(8, 0.3, 4);
    const auto rep = concentration_probe(0.5, 2.0, xs, cfg, noise, quick(300, 10));
    CHECK(rep.passed());
    CHECK(rep.estimates["alpha"].get<double>() > 0.5);
}

TEST_CASE("concentration probability shrinks with the ball") {
    const ModelConfig cfg = desk(8);
    const NoiseConfig noise = NoiseConfig::uniform(8, 0.3, 4);
    const std::vector<ShellState> xs{ShellState(8)};
    // r scales with eps so t0 is common and the balls are nested on identical paths.
    double prev = 1.0;
    for (const double eps : {0.4, 0.2, 0.1, 0.05}) {
        const double r = 0.5 * eps * std::exp(16.0 * 0.1);
        const auto rep = concentration_probe(eps, r, xs, cfg, noise, quick(300, 12));
        CHECK(rep.estimates["t0"].get<double>() == doctest::Approx(0.1));
        const double alpha = rep.estimates["alpha"];
        CHECK(alpha <= prev);
        prev = alpha;
    }
}

TEST_CASE("occupation of a ball around the origin") {
    const ModelConfig cfg = desk(8);
    const auto quiet = occupation_lower_bound(0.1, {ShellState(8)}, 1.0, cfg, NoiseConfig::off(8), quick(10));
    CHECK(quiet.estimates["occupation"].get<double>() == 1.0);

    const NoiseConfig noise = NoiseConfig::uniform(8, 0.3, 4);
    const std::vector<ShellState> xs{ShellState(8), ShellState::unit(8, 1, 5.0)};
    const auto rep = occupation_lower_bound(0.1, xs, 20.0, cfg, noise, quick(100, 13));
    CHECK(rep.passed());
    const double a = rep.estimates["per_x"][0], b = rep.estimates["per_x"][1];
    const double sa = rep.stderrs["per_x"][0], sb = rep.stderrs["per_x"][1];
    CHECK(std::abs(a - b) <= 2.0 * std::hypot(sa, sb) + 0.02);

    const auto shorter = occupation_lower_bound(0.1, {ShellState::unit(8, 1, 5.0)}, 2.0, cfg, noise, quick(100, 13));
    CHECK(shorter.estimates["occupation"].get<double>() < b);
}

TEST_CASE("Cesaro measures") {
    const ModelConfig cfg = desk(8);
    const auto dict = standard_dictionary(4);
    SUBCASE("quiet flow collapses to the origin") {
        const auto mu = cesaro_measure(ShellState::unit(8, 1, 2.0), 5.0, 1.0, 10, 4, 1e-3, cfg, NoiseConfig::off(8), 0);
        for (const double v : mu.points) CHECK(std::abs(v) < 1e-3);
    }
    SUBCASE("seed and thinning independence") {
        const NoiseConfig noise = NoiseConfig::uniform(8, 0.3, 4);
        const auto a = cesaro_measure(ShellState(8), 400.0, 80.0, 10, 4, 1e-3, cfg, noise, 1);
        const auto b = cesaro_measure(ShellState(8), 400.0, 80.0, 10, 4, 1e-3, cfg, noise, 2);
        CHECK(a.size() == b.size());
        CHECK(dual_lipschitz_distance(a, b, dict) <= 2.0 * dual_distance_tolerance(a, b, dict));
        const auto thick = cesaro_measure(ShellState(8), 400.0, 80.0, 100, 4, 1e-3, cfg, noise, 1);
        CHECK(dual_lipschitz_distance(a, thick, dict) <= 2.0 * dual_distance_tolerance(a, thick, dict));
    }
    CHECK_THROWS_AS(cesaro_measure(ShellState(8), 1.0, 1.0, 1, 4, 1e-3, cfg, NoiseConfig::off(8), 0),
                    PreconditionError);
}

TEST_CASE("e-property probe") {
    const ModelConfig cfg = desk(8);
    const NoiseConfig noise = NoiseConfig::uniform(8, 0.3, 4);
    const auto dict = tanh_dictionary(4);
    EPropertyOptions opt;
    opt.deltas = {0.4, 0.2, 0.1};
    opt.t_grid = {0.0, 0.5, 1.0, 5.0};
    const ShellState x = ShellState::unit(8, 1, 0.3);
    const auto rep = e_property_probe(dict, x, opt, cfg, noise, quick(50, 14));
    CHECK(rep.passed());
    const auto sup = rep.estimates["sup"].get<std::vector<double>>();
    for (std::size_t a = 0; a < 3; ++a) CHECK(sup[a] <= opt.deltas[a] + 1e-15);  // attained at t = 0

    EPropertyOptions zero = opt;
    zero.deltas = {0.0};
    CHECK(e_property_probe(dict, x, zero, cfg, noise, quick(10)).estimates["sup"][0].get<double>() == 0.0);

    EPropertyOptions late = opt;
    late.t_grid = {1.0, 2.0};
    const auto rl = e_property_probe(dict, x, late, cfg, noise, quick(50, 14));
    CHECK(rl.passed());
    const auto r = rl.estimates["ratio"].get<std::vector<double>>();
    for (const double v : r) CHECK(v == doctest::Approx(0.5).epsilon(0.05));
}

TEST_CASE("stability experiment") {
    const ModelConfig cfg = desk(8);
    const NoiseConfig noise = NoiseConfig::uniform(8, 0.3, 4);
    StabilityOptions opt;
    opt.x1 = ShellState(8);
    opt.x2 = ShellState(8);
    opt.t_grid = {5.0, 10.0};
    opt.seed_b = opt.seed_a;
    const auto same = stability_experiment(opt, cfg, noise, quick(20));
    for (const auto& d : same.estimates["cesaro_distance"]) CHECK(d.get<double>() == 0.0);

    opt.x2 = ShellState::unit(8, 1, 5.0);
    opt.seed_b = 1;
    const auto rep = stability_experiment(opt, cfg, noise, quick(60));
    CHECK(rep.passed());
    CHECK(rep.to_json()["bounds"]["cesaro_baseline"].size() == 2);
}
