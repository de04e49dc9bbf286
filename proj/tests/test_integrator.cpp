#include <doctest.h>

#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "shellflow/errors.hpp"
#include "shellflow/integrator.hpp"
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

ShellState random_unit(NormalStream& rng, int N, double scale = 1.0) {
    std::vector<cplx> z(static_cast<std::size_t>(N));
    double decay = 1.0;
    for (auto& c : z) {
        c = decay * cplx{rng.normal(), rng.normal()};
        decay *= 0.5;
    }
    ShellState u(z);
    u *= scale / h_norm(u);
    return u;
}

double distance(const ShellState& u, const ShellState& v) { return h_norm(u - v); }

}  // namespace

TEST_CASE("default step and step counts") {
    const ModelConfig cfg = desk(16);
    CHECK(default_dt(cfg) == doctest::Approx(1e-3 / (32.0 * 32.0)));
    CHECK(step_count(1.0, 1e-3) == 1000);
    CHECK_THROWS_AS(step_count(1.0, 2.0), PreconditionError);
    CHECK_THROWS_AS(step_count(-1.0, 0.1), PreconditionError);
}

TEST_CASE("linear decay is exact") {
    const ModelConfig cfg = desk(8, 0.0, 0.0);
    const double dt = 1e-3;
    const double rate = cfg.nu * cfg.k(1) * cfg.k(1);
    const ShellState one =
        step_semi_implicit(ShellState::unit(8, 1), dt, cfg, NoiseConfig::off(8), StepNoise{});
    CHECK(one.mode(1).real() == doctest::Approx(std::exp(-rate * dt)).epsilon(1e-15));

    const TrajectoryRecord rec = integrate_deterministic(ShellState::unit(8, 1), 0.5, dt, cfg, 10);
    double worst = 0.0;
    for (std::size_t r = 0; r < rec.size(); ++r) {
        worst = std::max(worst, std::abs(rec.states[r].mode(1) - std::exp(-rate * rec.times[r])));
    }
    CHECK(worst < 1e-10);
}

TEST_CASE("with a = b = 0 one step is the exact OU step") {
    const ModelConfig cfg = desk(8, 0.0, 0.0);
    const NoiseConfig noise = NoiseConfig::uniform(8, 0.3, 4);
    NormalStream rng(4, 0);
    const double dt = 2e-3;
    for (int trial = 0; trial < 20; ++trial) {
        const ShellState u = random_unit(rng, 8);
        std::vector<cplx> g(8);
        for (auto& c : g) c = std::sqrt(0.5) * cplx{rng.normal(), rng.normal()};
        StepNoise increments;
        for (int n = 1; n <= 8; ++n) {
            const double rate = cfg.nu * cfg.k(n) * cfg.k(n);
            increments.ou.push_back(ou_increment_sd(rate, dt) * g[static_cast<std::size_t>(n - 1)]);
        }
        CHECK(step_semi_implicit(u, dt, cfg, noise, increments) == ou_exact_step(u, dt, noise, cfg, g));
    }
}

TEST_CASE("strong order one on common noise") {
    const ModelConfig cfg = desk(8);
    const NoiseConfig noise = NoiseConfig::uniform(8, 0.3, 4);
    NormalStream rng(8, 0);
    const double dt = 2e-3;
    double err_dt = 0.0, err_half = 0.0;
    for (std::uint64_t seed = 1; seed <= 6; ++seed) {
        const ShellState x = random_unit(rng, 8, 2.0);
        auto terminal = [&](double h, std::uint32_t substeps) {
            IntegrationOptions opt;
            opt.stride = 1u << 20;
            opt.substeps = substeps;
            return integrate_path(x, 1.0, h, cfg, noise, seed, opt).states.back();
        };
        const ShellState ref = terminal(dt / 64, 1);
        err_dt += distance(terminal(dt, 64), ref);
        err_half += distance(terminal(dt / 2, 32), ref);
    }
    const double ratio = err_dt / err_half;
    INFO("error ratio " << ratio);
    CHECK(ratio > 1.6);
    CHECK(ratio < 2.6);
}

TEST_CASE("deterministic dissipation bound") {
    for (Variant variant : {Variant::goy, Variant::sabra}) {
        ModelConfig cfg = desk(16);
        cfg.variant = variant;
        NormalStream rng(13, 0);
        const double rate = cfg.nu * cfg.k(1) * cfg.k(1);
        for (int trial = 0; trial < 5; ++trial) {
            const ShellState x = random_unit(rng, 16);
            for (double dt : {1e-4, 5e-5}) {
                const TrajectoryRecord rec = integrate_deterministic(x, 0.3, dt, cfg, 5);
                for (std::size_t r = 1; r < rec.size(); ++r) {
                    const double bound = std::exp(-2 * rate * rec.times[r]);
                    REQUIRE(rec.h_norms[r] * rec.h_norms[r] <= bound * (1 + 1e-12));
                    REQUIRE(rec.h_norms[r] <= rec.h_norms[r - 1]);
                }
            }
        }
    }
    const TrajectoryRecord zero = integrate_deterministic(ShellState(8), 0.1, 1e-3, desk());
    for (const auto& s : zero.states) CHECK(s == ShellState(8));
}

TEST_CASE("trajectory record invariants and determinism") {
    const ModelConfig cfg = desk(8);
    const NoiseConfig noise = NoiseConfig::uniform(8, 0.3, 4);
    NormalStream rng(21, 0);
    const ShellState x = random_unit(rng, 8);
    IntegrationOptions opt;
    opt.stride = 7;
    const TrajectoryRecord a = integrate_path(x, 0.5, 1e-3, cfg, noise, 99, opt);
    const TrajectoryRecord b = integrate_path(x, 0.5, 1e-3, cfg, noise, 99, opt);
    CHECK(a.states == b.states);
    CHECK(a.dissipation_integral == b.dissipation_integral);
    const TrajectoryRecord c = integrate_path(x, 0.5, 1e-3, cfg, noise, 100, opt);
    CHECK(a.states.back() != c.states.back());

    CHECK(a.times.back() == doctest::Approx(0.5));
    for (std::size_t r = 0; r < a.size(); ++r) {
        CHECK(std::abs(a.h_norms[r] - h_norm(a.states[r])) <= 1e-12 * (1 + a.h_norms[r]));
        CHECK(std::abs(a.v_norms[r] - v_norm(a.states[r], cfg)) <= 1e-12 * (1 + a.v_norms[r]));
        if (r > 0) {
            CHECK(a.times[r] > a.times[r - 1]);
            CHECK(a.dissipation_integral[r] >= a.dissipation_integral[r - 1]);
        }
    }
}

TEST_CASE("blow-up is reported with its time") {
    const ModelConfig cfg = desk(8);
    ShellState x(8);
    for (std::size_t n = 1; n <= 8; ++n) x.set_mode(n, 1e6);
    try {
        integrate_deterministic(x, 1.0, 1e-2, cfg);
        FAIL("expected blow-up");
    } catch (const BlowUpError& e) {
        CHECK(e.time() > 0.0);
        CHECK(e.time() <= 1.0);
    }
}

TEST_CASE("pathwise split into OU part and random ODE") {
    const ModelConfig cfg = desk(8);
    NormalStream rng(31, 0);
    const ShellState x = random_unit(rng, 8);
    CHECK(pathwise_split_check(x, 1.0, 1e-4, cfg, NoiseConfig::off(8), 1) < 1e-8);
    CHECK(pathwise_split_check(ShellState(8), 0.2, 1e-4, cfg, NoiseConfig::off(8), 1) == 0.0);
    CHECK(pathwise_split_check(x, 1.0, 1e-4, cfg, NoiseConfig::uniform(8, 0.3, 4), 5) < 1e-10);
}

TEST_CASE("weak formulation residual") {
    const ModelConfig lin = desk(8, 0.0, 0.0);
    const NoiseConfig noise = NoiseConfig::uniform(8, 0.3, 4);
    const ShellState x = ShellState::unit(8, 1, {0.5, 0.2});
    IntegrationOptions opt;
    opt.record_wiener = true;

    auto mean_residual = [&](const ModelConfig& cfg, double dt, std::size_t j) {
        double acc = 0.0;
        for (std::uint64_t seed = 1; seed <= 64; ++seed) {
            opt.substeps = dt > 5e-4 ? 2 : 1;
            const TrajectoryRecord rec = integrate_path(x, 1.0, dt, cfg, noise, seed, opt);
            acc += weak_form_residual(rec, j, cfg, noise);
        }
        return acc / 64.0;
    };

    const double dt = 1e-3;
    const double r1 = mean_residual(lin, dt, 1);
    CHECK(r1 < 10 * dt);
    const double ratio = r1 / mean_residual(lin, dt / 2, 1);
    INFO("residual ratio " << ratio);
    CHECK(ratio > 1.5);
    CHECK(ratio < 2.7);

    // The nonlinear model satisfies the same identity to first order.
    CHECK(mean_residual(desk(8), dt, 2) < 10 * dt);

    const TrajectoryRecord rec = integrate_path(x, 0.1, dt, lin, noise, 3, opt);
    TrajectoryRecord first = rec;
    first.times.resize(1);
    first.states.erase(first.states.begin() + 1, first.states.end());
    first.wiener.erase(first.wiener.begin() + 1, first.wiener.end());
    CHECK(weak_form_residual(first, 1, lin, noise) == 0.0);

    IntegrationOptions bare;
    const TrajectoryRecord no_w = integrate_path(x, 0.1, dt, lin, noise, 3, bare);
    CHECK_THROWS_AS(weak_form_residual(no_w, 1, lin, noise), PreconditionError);
    CHECK_THROWS_AS(weak_form_residual(rec, 9, lin, noise), DimensionError);
}

TEST_CASE("pathwise continuity in the initial condition") {
    const ModelConfig cfg = desk(8);
    const NoiseConfig noise = NoiseConfig::uniform(8, 0.3, 4);
    NormalStream rng(41, 0);

    // K(delta) = max over pairs and times of log(|du|^2/|dx|^2) / int |u1|^2.
    auto fit_k = [&](double separation) {
        double k = 0.0;
        NormalStream local(43, 0);
        for (std::uint64_t seed = 1; seed <= 6; ++seed) {
            const ShellState x1 = random_unit(local, 8, 3.0);
            const ShellState x2 = x1 + random_unit(local, 8, separation);
            IntegrationOptions opt;
            opt.stride = 10;
            const TrajectoryRecord r1 = integrate_path(x1, 2.0, 1e-3, cfg, noise, seed, opt);
            const TrajectoryRecord r2 = integrate_path(x2, 2.0, 1e-3, cfg, noise, seed, opt);
            double h2_integral = 0.0;
            for (std::size_t r = 1; r < r1.size(); ++r) {
                const double h0 = r1.h_norms[r - 1], h1 = r1.h_norms[r];
                h2_integral += 0.5 * (r1.times[r] - r1.times[r - 1]) * (h0 * h0 + h1 * h1);
                const double growth =
                    std::log(std::pow(distance(r1.states[r], r2.states[r]), 2) / (separation * separation));
                if (growth > 0.0) k = std::max(k, growth / h2_integral);
            }
        }
        return k;
    };
    (void)rng;
    const double k_coarse = fit_k(1e-1);
    const double k_mid = fit_k(1e-2);
    const double k_fine = fit_k(1e-3);
    INFO("K fits " << k_coarse << " " << k_mid << " " << k_fine);
    CHECK(std::isfinite(k_coarse));
    CHECK(k_mid <= 1.1 * k_coarse + 1e-9);
    CHECK(k_fine <= 1.1 * k_mid + 1e-9);
}

TEST_CASE("trajectory CSV") {
    const ModelConfig cfg = desk(4, 0.0, 0.0);
    const TrajectoryRecord rec = integrate_deterministic(ShellState::unit(4, 1), 0.01, 1e-3, cfg, 5);
    std::ostringstream os;
    write_trajectory_csv(os, rec);
    std::istringstream is(os.str());
    std::string header;
    std::getline(is, header);
    CHECK(header == "t,re_u1,im_u1,re_u2,im_u2,re_u3,im_u3,re_u4,im_u4,h_norm,v_norm,dissipation_integral");
    int rows = 0;
    std::string line;
    while (std::getline(is, line)) ++rows;
    CHECK(rows == 3);
}
