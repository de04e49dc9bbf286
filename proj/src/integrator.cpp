#include "shellflow/integrator.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <string>

#include "shellflow/errors.hpp"
#include "shellflow/fp_env.hpp"

namespace shellflow {

double default_dt(const ModelConfig& cfg) {
    const double k4 = cfg.k(4);
    return 1e-3 * std::min(1.0, 1.0 / (cfg.nu * k4 * k4));
}

std::uint64_t step_count(double T, double dt) {
    if (!(T > 0.0)) throw PreconditionError("horizon T must be positive");
    if (!(dt > 0.0) || dt > T * (1.0 + 1e-12)) throw PreconditionError("need 0 < dt <= T");
    const double ratio = T / dt;
    const auto n = static_cast<std::uint64_t>(std::llround(ratio));
    return std::max<std::uint64_t>(n, 1);
}

// ---------------------------------------------------------------------------

ShellStepper::ShellStepper(const ModelConfig& cfg, const NoiseConfig& noise, double dt)
    : cfg_(cfg), dt_(dt), op_(cfg) {
    noise.validate(cfg);
    if (!(dt > 0.0)) throw PreconditionError("time step must be positive");
    const auto n = static_cast<std::size_t>(cfg.N);
    decay_.resize(n);
    phi_dt_.resize(n);
    rate_.resize(n);
    k_ = cfg.wavenumbers();
    q_ = noise.q;
    scratch_.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double k = k_[i];
        rate_[i] = cfg.nu * k * k;
        decay_[i] = std::exp(-rate_[i] * dt);
        phi_dt_[i] = -std::expm1(-rate_[i] * dt) / rate_[i];
    }
}

void ShellStepper::step(std::span<cplx> u, const StepNoise* noise, std::span<const cplx> forcing) {
    const std::size_t n = decay_.size();
    op_.apply(u, u, scratch_);
    if (!forcing.empty()) {
        for (std::size_t i = 0; i < n; ++i) scratch_[i] += forcing[i];
    }
    if (noise != nullptr) {
        for (std::size_t i = 0; i < n; ++i) {
            u[i] = decay_[i] * u[i] + phi_dt_[i] * scratch_[i] + q_[i] * noise->ou[i];
        }
    } else {
        for (std::size_t i = 0; i < n; ++i) u[i] = decay_[i] * u[i] + phi_dt_[i] * scratch_[i];
    }
}

void ShellStepper::step_linearized(std::span<cplx> w, std::span<const cplx> u,
                                   std::span<const cplx> forcing) {
    const std::size_t n = decay_.size();
    op_.apply_linearized(u, w, scratch_);
    if (!forcing.empty()) {
        for (std::size_t i = 0; i < n; ++i) scratch_[i] += forcing[i];
    }
    for (std::size_t i = 0; i < n; ++i) w[i] = decay_[i] * w[i] + phi_dt_[i] * scratch_[i];
}

// ---------------------------------------------------------------------------

PathSimulator::PathSimulator(const ModelConfig& cfg, const NoiseConfig& noise, double dt,
                             const WienerPath& path, bool with_increments)
    : stepper_(cfg, noise, dt),
      sampler_(WienerPath{path.seed, path.stream, dt, path.substeps}, cfg, noise, with_increments),
      noise_buf_(sampler_.make_buffer()), stochastic_(!noise.is_off()),
      u_(static_cast<std::size_t>(cfg.N)) {}

void PathSimulator::reset(std::span<const cplx> x) {
    if (x.size() != u_.size()) throw DimensionError("initial state has wrong truncation");
    std::copy(x.begin(), x.end(), u_.begin());
    step_ = 0;
    dissipation_ = 0.0;
    h2_ = shellflow::h_norm_sq(u_);
    v2_ = shellflow::v_norm_sq(u_, stepper_.k());
}

void PathSimulator::advance(std::span<const cplx> forcing) {
    if (stochastic_) {
        sampler_.draw(step_, noise_buf_);
        stepper_.step(u_, &noise_buf_, forcing);
    } else {
        stepper_.step(u_, nullptr, forcing);
    }
    ++step_;
    const double v2_old = v2_;
    h2_ = shellflow::h_norm_sq(u_);
    v2_ = shellflow::v_norm_sq(u_, stepper_.k());
    if (!(h2_ <= blow_up_threshold * blow_up_threshold) || !std::isfinite(v2_)) {
        throw BlowUpError("integrator blow-up (|u| = " + std::to_string(std::sqrt(h2_)) + ")",
                          time());
    }
    dissipation_ += 0.5 * stepper_.dt() * (v2_old + v2_);
}

// ---------------------------------------------------------------------------

ShellState step_semi_implicit(const ShellState& u, double dt, const ModelConfig& cfg,
                              const NoiseConfig& noise, const StepNoise& increments) {
    if (u.size() != static_cast<std::size_t>(cfg.N)) throw DimensionError("state/model mismatch");
    ShellStepper stepper(cfg, noise, dt);
    if (!increments.ou.empty() && increments.ou.size() != u.size()) {
        throw DimensionError("step noise has wrong truncation");
    }
    if (increments.ou.empty() && !noise.is_off()) {
        throw PreconditionError("stochastic step needs noise increments");
    }
    ShellState out = u;
    stepper.step(out.amplitudes(), increments.ou.empty() ? nullptr : &increments);
    if (!out.is_finite() || h_norm(out) > blow_up_threshold) {
        throw BlowUpError("integrator blow-up", dt);
    }
    return out;
}

namespace {

void push_record(TrajectoryRecord& rec, const PathSimulator& sim, std::span<const cplx> wiener) {
    rec.times.push_back(sim.time());
    rec.states.emplace_back(std::vector<cplx>(sim.state().begin(), sim.state().end()));
    rec.h_norms.push_back(std::sqrt(sim.h_norm_sq()));
    rec.v_norms.push_back(std::sqrt(sim.v_norm_sq()));
    rec.dissipation_integral.push_back(sim.dissipation_integral());
    if (!wiener.empty()) {
        rec.wiener.emplace_back(std::vector<cplx>(wiener.begin(), wiener.end()));
    }
}

}  // namespace

TrajectoryRecord integrate_path(const ShellState& x, double T, double dt, const ModelConfig& cfg,
                                const NoiseConfig& noise, std::uint64_t seed,
                                const IntegrationOptions& options) {
    cfg.validate();
    if (x.size() != static_cast<std::size_t>(cfg.N)) throw DimensionError("state/model mismatch");
    if (options.stride == 0) throw PreconditionError("record stride must be positive");
    const std::uint64_t steps = step_count(T, dt);
    const bool want_w = options.record_wiener;
    PathSimulator sim(cfg, noise, dt, WienerPath{seed, options.stream, dt, options.substeps},
                      want_w);
    sim.reset(x.amplitudes());

    TrajectoryRecord rec;
    rec.dt = dt;
    rec.stride = options.stride;
    rec.seed = seed;
    rec.stream = options.stream;
    std::vector<cplx> w(want_w ? x.size() : 0);
    push_record(rec, sim, w);
    for (std::uint64_t s = 1; s <= steps; ++s) {
        sim.advance();
        if (want_w && sim.stochastic()) {
            const auto& dw = sim.last_noise().dw;
            for (std::size_t i = 0; i < w.size(); ++i) w[i] += dw[i];
        }
        if (s % options.stride == 0 || s == steps) push_record(rec, sim, w);
    }
    return rec;
}

TrajectoryRecord integrate_deterministic(const ShellState& x, double T, double dt,
                                         const ModelConfig& cfg, std::size_t stride) {
    IntegrationOptions options;
    options.stride = stride;
    return integrate_path(x, T, dt, cfg, NoiseConfig::off(cfg.N), 0, options);
}

double pathwise_split_check(const ShellState& x, double T, double dt, const ModelConfig& cfg,
                            const NoiseConfig& noise, std::uint64_t seed,
                            const IntegrationOptions& options) {
    cfg.validate();
    const std::uint64_t steps = step_count(T, dt);
    const std::size_t n = x.size();
    const WienerPath path{seed, options.stream, dt, options.substeps};
    PathSimulator sim(cfg, noise, dt, path, false);
    sim.reset(x.amplitudes());

    const NoiseSampler sampler(path, cfg, noise, false);
    StepNoise buf = sampler.make_buffer();
    ShellStepper v_stepper(cfg, NoiseConfig::off(cfg.N), dt);
    const auto decay = v_stepper.decay();
    const auto phi_dt = v_stepper.phi_dt();
    std::vector<cplx> z(n), v(x.amplitudes().begin(), x.amplitudes().end()), sum(n), b(n);

    double worst = 0.0;
    for (std::uint64_t s = 0; s < steps; ++s) {
        sim.advance();
        for (std::size_t i = 0; i < n; ++i) sum[i] = v[i] + z[i];
        v_stepper.bilinear().apply(sum, sum, b);
        for (std::size_t i = 0; i < n; ++i) v[i] = decay[i] * v[i] + phi_dt[i] * b[i];
        if (!noise.is_off()) {
            sampler.draw(s, buf);
            for (std::size_t i = 0; i < n; ++i) z[i] = decay[i] * z[i] + noise.q[i] * buf.ou[i];
        }
        double d2 = 0.0;
        for (std::size_t i = 0; i < n; ++i) d2 += std::norm(sim.state()[i] - (v[i] + z[i]));
        worst = std::max(worst, std::sqrt(d2));
    }
    return worst;
}

double weak_form_residual(const TrajectoryRecord& rec, std::size_t j, const ModelConfig& cfg,
                          const NoiseConfig& noise) {
    if (rec.size() == 0) throw PreconditionError("empty trajectory record");
    const std::size_t n = rec.states.front().size();
    if (j < 1 || j > n) throw DimensionError("test mode index out of range");
    const std::size_t idx = j - 1;
    const bool forced = noise.q.at(idx) != 0.0;
    if (forced && rec.wiener.size() != rec.size()) {
        throw PreconditionError("weak_form_residual: record lacks the Wiener path");
    }
    const double kj = cfg.k(static_cast<int>(j));
    const ShellState e_j = ShellState::unit(n, j);
    const ModelConfig local = [&] {
        ModelConfig c = cfg;
        c.N = static_cast<int>(n);
        return c;
    }();
    const BilinearOperator op(local);
    std::vector<cplx> b(n);

    auto integrand = [&](const ShellState& u) {
        op.apply(u.amplitudes(), e_j.amplitudes(), b);
        return cfg.nu * kj * kj * u.amplitudes()[idx].real() + inner_h(b, u.amplitudes());
    };

    const double x_j = rec.states.front().amplitudes()[idx].real();
    double integral = 0.0;
    double prev = integrand(rec.states.front());
    double worst = 0.0;
    for (std::size_t r = 1; r < rec.size(); ++r) {
        const double cur = integrand(rec.states[r]);
        integral += 0.5 * (rec.times[r] - rec.times[r - 1]) * (prev + cur);
        prev = cur;
        const double forcing = forced ? noise.q[idx] * rec.wiener[r].amplitudes()[idx].real() : 0.0;
        const double residual =
            rec.states[r].amplitudes()[idx].real() + integral - x_j - forcing;
        worst = std::max(worst, std::abs(residual));
    }
    return worst;
}

void write_trajectory_csv(std::ostream& os, const TrajectoryRecord& rec) {
    if (rec.size() == 0) return;
    const std::size_t n = rec.states.front().size();
    os << "t";
    for (std::size_t i = 1; i <= n; ++i) os << ",re_u" << i << ",im_u" << i;
    os << ",h_norm,v_norm,dissipation_integral\n";
    char buf[32];
    auto put = [&](double v) {
        std::snprintf(buf, sizeof buf, "%.17g", v);
        os << buf;
    };
    for (std::size_t r = 0; r < rec.size(); ++r) {
        put(rec.times[r]);
        for (const cplx z : rec.states[r].amplitudes()) {
            os << ',';
            put(z.real());
            os << ',';
            put(z.imag());
        }
        os << ',';
        put(rec.h_norms[r]);
        os << ',';
        put(rec.v_norms[r]);
        os << ',';
        put(rec.dissipation_integral[r]);
        os << '\n';
    }
}

}  // namespace shellflow
