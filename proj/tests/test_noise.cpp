#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "shellflow/errors.hpp"
#include "shellflow/noise.hpp"
#include "shellflow/rng.hpp"

using namespace shellflow;

namespace {

ModelConfig desk(int N = 8) {
    ModelConfig cfg;
    cfg.N = N;
    cfg.nu = 1.0;
    cfg.k0 = 2.0;
    return cfg;
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

/// Two-sided Kolmogorov-Smirnov statistic of samples against N(mean, var).
double ks_statistic(std::vector<double> x, double mean, double var) {
    std::sort(x.begin(), x.end());
    const double n = static_cast<double>(x.size());
    double d = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double f = normal_cdf((x[i] - mean) / std::sqrt(var));
        d = std::max({d, f - static_cast<double>(i) / n, static_cast<double>(i + 1) / n - f});
    }
    return d;
}

}  // namespace

TEST_CASE("Philox4x32-10 known-answer vectors") {
    using P = Philox4x32;
    CHECK(P::generate({0, 0, 0, 0}, {0, 0}) ==
          P::Counter{0x6627e8d5u, 0xe169c58du, 0xbc57ac4cu, 0x9b00dbd8u});
    CHECK(P::generate({0xffffffffu, 0xffffffffu, 0xffffffffu, 0xffffffffu},
                      {0xffffffffu, 0xffffffffu}) ==
          P::Counter{0x408f276du, 0x41c83b0eu, 0xa20bc7c6u, 0x6d5451fdu});
    CHECK(P::generate({0x243f6a88u, 0x85a308d3u, 0x13198a2eu, 0x03707344u},
                      {0xa4093822u, 0x299f31d0u}) ==
          P::Counter{0xd16cfe09u, 0x94fdccebu, 0x5001e420u, 0x24126ea1u});
}

TEST_CASE("uniform words map into (0, 1]") {
    CHECK(uniform_open_closed(0) > 0.0);
    CHECK(uniform_open_closed(0xffffffffu) == 1.0);
}

TEST_CASE("ziggurat normals") {
    // Words from a Philox counter sequence, retries from a second sequence.
    const auto key = Philox4x32::key_from_seed(77);
    std::uint32_t retry_ctr = 0;
    auto more = [&] { return Philox4x32::generate({retry_ctr++, 1, 0, 0}, key)[0]; };
    const int count = 400000;
    std::vector<double> x;
    x.reserve(count);
    for (int i = 0; i < count; ++i) {
        const auto w = Philox4x32::generate({static_cast<std::uint32_t>(i), 0, 0, 0}, key);
        x.push_back(ziggurat_normal(w[0], more));
    }
    double m1 = 0, m2 = 0, m4 = 0;
    int beyond2 = 0, beyond_r = 0;
    for (const double v : x) {
        m1 += v;
        m2 += v * v;
        m4 += v * v * v * v;
        beyond2 += std::abs(v) > 2.0;
        beyond_r += std::abs(v) > ZigguratTables::r;
    }
    CHECK(std::abs(m1 / count) < 5.0 / std::sqrt(count));
    CHECK(m2 / count == doctest::Approx(1.0).epsilon(0.01));
    CHECK(m4 / count == doctest::Approx(3.0).epsilon(0.03));
    const double p2 = std::erfc(2.0 / std::sqrt(2.0));
    CHECK(std::abs(beyond2 - count * p2) < 5.0 * std::sqrt(count * p2));
    const double pr = std::erfc(ZigguratTables::r / std::sqrt(2.0));
    CHECK(std::abs(beyond_r - count * pr) < 5.0 * std::sqrt(count * pr) + 1);
    x.resize(20000);
    CHECK(ks_statistic(x, 0.0, 1.0) < 1.628 / std::sqrt(20000.0));
}

TEST_CASE("noise configuration") {
    const NoiseConfig noise = NoiseConfig::uniform(8, 0.5, 3);
    CHECK(noise.n0() == 4);
    CHECK(noise.trace_q2() == doctest::Approx(0.75));
    CHECK(noise.max_q2() == 0.25);
    CHECK_FALSE(noise.is_off());
    CHECK(NoiseConfig::off(8).is_off());
    CHECK(NoiseConfig::uniform(8, 1.0, 8).n0() == 9);
    CHECK_THROWS_AS(noise.validate(desk(6)), ConfigError);
}

TEST_CASE("Wiener increments") {
    const ModelConfig cfg = desk();
    const NoiseConfig noise = NoiseConfig::uniform(8, 1.0, 3);
    const WienerPath path{1234, 0, 1e-3, 1};

    SUBCASE("deterministic in (seed, step)") {
        CHECK(sample_increments(path, 17, cfg, noise) == sample_increments(path, 17, cfg, noise));
        CHECK(sample_increments(path, 17, cfg, noise) != sample_increments(path, 18, cfg, noise));
        const WienerPath other{1235, 0, 1e-3, 1};
        CHECK(sample_increments(path, 17, cfg, noise) != sample_increments(other, 17, cfg, noise));
    }

    SUBCASE("variance and degeneracy over 1e5 steps") {
        const NoiseSampler sampler(path, cfg, noise, true);
        StepNoise buf = sampler.make_buffer();
        double re2 = 0.0, im2 = 0.0, mean_re = 0.0;
        const int draws = 100000;
        for (int s = 0; s < draws; ++s) {
            sampler.draw(static_cast<std::uint64_t>(s), buf);
            re2 += buf.dw[0].real() * buf.dw[0].real();
            im2 += buf.dw[0].imag() * buf.dw[0].imag();
            mean_re += buf.dw[0].real();
            for (std::size_t n = 3; n < 8; ++n) {
                REQUIRE(buf.dw[n] == cplx{});
                REQUIRE(noise.q[n] * buf.ou[n] == cplx{});
            }
        }
        // Complex normalization: E|dW|^2 = dt, split evenly over re and im.
        CHECK((re2 + im2) / draws == doctest::Approx(path.dt).epsilon(0.05));
        CHECK(re2 / draws == doctest::Approx(path.dt / 2).epsilon(0.05));
        CHECK(im2 / draws == doctest::Approx(path.dt / 2).epsilon(0.05));
        CHECK(std::abs(mean_re / draws) < 5.0 * std::sqrt(path.dt / 2 / draws));
    }

    SUBCASE("ou and dw have the exact joint covariance") {
        const double rate = cfg.nu * cfg.k(1) * cfg.k(1);
        const WienerPath coarse{99, 0, 0.02, 1};
        const NoiseSampler sampler(coarse, cfg, noise, true);
        StepNoise buf = sampler.make_buffer();
        double ou2 = 0.0, cross = 0.0;
        const int draws = 100000;
        for (int s = 0; s < draws; ++s) {
            sampler.draw(static_cast<std::uint64_t>(s), buf);
            ou2 += std::norm(buf.ou[0]);
            cross += (buf.ou[0] * std::conj(buf.dw[0])).real();
        }
        const double sd = ou_increment_sd(rate, coarse.dt);
        CHECK(ou2 / draws == doctest::Approx(sd * sd).epsilon(0.03));
        CHECK(cross / draws == doctest::Approx(-std::expm1(-rate * coarse.dt) / rate).epsilon(0.03));
    }

    SUBCASE("substeps refine the same Brownian path") {
        // dt with 2 substeps and dt/2 with 1 substep share the fine grid.
        const NoiseSampler coarse(WienerPath{5, 0, 2e-3, 2}, cfg, noise, true);
        const NoiseSampler fine(WienerPath{5, 0, 1e-3, 1}, cfg, noise, true);
        StepNoise c = coarse.make_buffer(), f0 = fine.make_buffer(), f1 = fine.make_buffer();
        coarse.draw(3, c);
        fine.draw(6, f0);
        fine.draw(7, f1);
        const double decay = std::exp(-cfg.nu * cfg.k(1) * cfg.k(1) * 1e-3);
        CHECK(std::abs(c.dw[0] - (f0.dw[0] + f1.dw[0])) < 1e-15);
        CHECK(std::abs(c.ou[0] - (decay * f0.ou[0] + f1.ou[0])) < 1e-15);
    }
}

TEST_CASE("exact Ornstein-Uhlenbeck step") {
    const ModelConfig cfg = desk(4);
    const double dt = 0.01;
    const double rate1 = cfg.nu * cfg.k(1) * cfg.k(1);
    const std::vector<cplx> zero_g(4);

    SUBCASE("pure decay without noise") {
        const ShellState z = ou_exact_step(ShellState::unit(4, 1), dt, NoiseConfig::off(4), cfg, zero_g);
        CHECK(z.mode(1).real() == doctest::Approx(std::exp(-rate1 * dt)).epsilon(1e-15));
        CHECK(z.mode(1).imag() == 0.0);
    }

    SUBCASE("one-step variance and Kolmogorov-Smirnov") {
        const NoiseConfig noise = NoiseConfig::uniform(4, 0.7, 2);
        NormalStream rng(314, 0);
        const int draws = 100000;
        std::vector<double> re1;
        double var1 = 0.0, var2 = 0.0;
        const ShellState start = ShellState::unit(4, 1, {0.3, 0.0});
        for (int s = 0; s < draws; ++s) {
            std::vector<cplx> g(4);
            for (auto& c : g) c = std::sqrt(0.5) * cplx{rng.normal(), rng.normal()};
            const ShellState z = ou_exact_step(start, dt, noise, cfg, g);
            if (s < 10000) re1.push_back(z.mode(1).real());
            const double m = 0.3 * std::exp(-rate1 * dt);
            var1 += (z.mode(1).real() - m) * (z.mode(1).real() - m);
            var2 += z.mode(2).imag() * z.mode(2).imag();
            REQUIRE(z.mode(3) == cplx{});
        }
        auto component_var = [&](int n) {
            const double rate = cfg.nu * cfg.k(n) * cfg.k(n);
            return 0.49 * -std::expm1(-2 * rate * dt) / (4 * rate);
        };
        CHECK(var1 / draws == doctest::Approx(component_var(1)).epsilon(0.05));
        CHECK(var2 / draws == doctest::Approx(component_var(2)).epsilon(0.05));
        // 1% critical value of the one-sample KS statistic.
        const double d = ks_statistic(re1, 0.3 * std::exp(-rate1 * dt), component_var(1));
        CHECK(d < 1.628 / std::sqrt(10000.0));
    }

    SUBCASE("stationary variance") {
        const NoiseConfig noise = NoiseConfig::uniform(4, 1.0, 1);
        NormalStream rng(2718, 0);
        const double step = 0.1 / rate1;
        double acc = 0.0;
        const int chains = 20000;
        for (int c = 0; c < chains; ++c) {
            ShellState z(4);
            for (int s = 0; s < 100; ++s) {
                std::vector<cplx> g(4);
                g[0] = std::sqrt(0.5) * cplx{rng.normal(), rng.normal()};
                z = ou_exact_step(z, step, noise, cfg, g);
            }
            acc += std::norm(z.mode(1));
        }
        CHECK(acc / chains == doctest::Approx(1.0 / (2.0 * rate1)).epsilon(0.05));
    }

    CHECK_THROWS_AS(ou_exact_step(ShellState(4), 0.0, NoiseConfig::off(4), cfg, zero_g),
                    PreconditionError);
}

TEST_CASE("noise condition") {
    ModelConfig cfg = desk(4);
    const NoiseConfig noise = NoiseConfig::uniform(4, 1.0, 1);
    const NoiseCondition nc = check_noise_condition(noise, cfg, 1.0);
    CHECK(nc.threshold == doctest::Approx(std::log2(2.5) / 2));
    CHECK(nc.threshold == doctest::Approx(0.6610).epsilon(1e-4));
    CHECK(nc.n_star_min == 1);
    CHECK(nc.satisfied);

    CHECK_THROWS_WITH_AS(check_noise_condition(NoiseConfig::off(4), cfg, 1.0),
                         "degenerate: no active modes", ConfigError);
    CHECK_THROWS_AS(check_noise_condition(noise, cfg, 0.0), PreconditionError);

    // Large C needs more forced modes than a single one.
    CHECK_FALSE(check_noise_condition(noise, cfg, 20.0).satisfied);

    int previous = 1000;
    for (double nu : {0.05, 0.1, 0.5, 1.0, 2.0, 10.0}) {
        cfg.nu = nu;
        const NoiseCondition c = check_noise_condition(NoiseConfig::uniform(4, 1.0, 4), cfg, 2.0);
        CHECK(c.n_star_min > c.threshold);
        CHECK(c.n_star_min <= previous);
        previous = c.n_star_min;
    }
    cfg.nu = 1.0;
    previous = 1000;
    for (double C : {10.0, 5.0, 2.0, 1.0, 0.5}) {
        const int n = check_noise_condition(NoiseConfig::uniform(4, 1.0, 4), cfg, C).n_star_min;
        CHECK(n <= previous);
        previous = n;
    }
}
