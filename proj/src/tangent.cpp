#include "shellflow/tangent.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <ostream>
#include <string>

#include "shellflow/errors.hpp"
#include "shellflow/fp_env.hpp"
#include "shellflow/parallel.hpp"

namespace shellflow {

namespace {

void require_model_size(std::size_t n, const ModelConfig& cfg, const char* what) {
    if (n != static_cast<std::size_t>(cfg.N)) {
        throw DimensionError(std::string(what) + " does not match the model truncation");
    }
}

void ensure_finite_tangent(std::span<const cplx> w, double t) {
    const double h2 = h_norm_sq(w);
    if (!(h2 <= blow_up_threshold * blow_up_threshold)) {
        throw BlowUpError("tangent flow blow-up", t);
    }
}

ShellState to_state(std::span<const cplx> a) { return ShellState(std::vector<cplx>(a.begin(), a.end())); }

double high_mode_norm_sq(std::span<const cplx> xi, int n_star) {
    double s = 0.0;
    for (std::size_t i = static_cast<std::size_t>(n_star); i < xi.size(); ++i) s += std::norm(xi[i]);
    return s;
}

}  // namespace

ShellState step_variational(const ShellState& U, const ShellState& u, double dt, const ModelConfig& cfg) {
    require_model_size(U.size(), cfg, "tangent state");
    require_model_size(u.size(), cfg, "base state");
    ShellStepper stepper(cfg, NoiseConfig::off(cfg.N), dt);
    ShellState out = U;
    stepper.step_linearized(out.amplitudes(), u.amplitudes());
    ensure_finite_tangent(out.amplitudes(), dt);
    return out;
}

ShellState step_malliavin(const ShellState& D, const ShellState& u, std::span<const cplx> g, double dt,
                          const ModelConfig& cfg, const NoiseConfig& noise) {
    require_model_size(D.size(), cfg, "tangent state");
    require_model_size(u.size(), cfg, "base state");
    require_model_size(g.size(), cfg, "control slice");
    ShellStepper stepper(cfg, noise, dt);
    std::vector<cplx> qg(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) qg[i] = noise.q[i] * g[i];
    ShellState out = D;
    stepper.step_linearized(out.amplitudes(), u.amplitudes(), qg);
    ensure_finite_tangent(out.amplitudes(), dt);
    return out;
}

// ---------------------------------------------------------------------------

ControlConstruction::ControlConstruction(const ModelConfig& cfg, const NoiseConfig& noise, double dt,
                                         int n_star, std::span<const cplx> v)
    : stepper_(cfg, noise, dt), dt_(dt), n_star_(n_star), q_(noise.q) {
    require_model_size(v.size(), cfg, "control direction");
    if (n_star < 1 || n_star > cfg.N) throw ConfigError("n_star must lie in [1, N]");
    for (int i = 0; i < n_star; ++i) {
        if (q_[static_cast<std::size_t>(i)] == 0.0) {
            throw ConfigError("control needs q_{n,n} != 0 for n <= n_star (mode " + std::to_string(i + 1) +
                              " is unforced)");
        }
    }
    v_.assign(v.begin(), v.end());
    xi_ = v_;
    next_.resize(v.size());
    lxi_.resize(v.size());
    r0_ = std::sqrt(h_norm_sq(std::span<const cplx>(v_).first(static_cast<std::size_t>(n_star))));
}

double ControlConstruction::radius() const noexcept {
    return std::max(r0_ - 0.5 * time(), 0.0);
}

void ControlConstruction::emit(std::span<const cplx> u, std::span<cplx> g) {
    const std::size_t n = xi_.size();
    stepper_.bilinear().apply_linearized(u, xi_, lxi_);
    const auto decay = stepper_.decay();
    const auto phi = stepper_.phi_dt();
    const auto rate = stepper_.rate();
    const auto low = static_cast<std::size_t>(n_star_);

    const double r_next = std::max(r0_ - 0.5 * static_cast<double>(step_ + 1) * dt_, 0.0);
    const double ratio = r0_ > 0.0 ? r_next / r0_ : 0.0;
    for (std::size_t i = 0; i < low; ++i) {
        next_[i] = v_[i] * ratio;
        // Exact shrink over the step in place of xi_i / (2 r).
        const cplx shrink = (xi_[i] - next_[i]) / dt_;
        g[i] = (-rate[i] * xi_[i] + lxi_[i] + shrink) / q_[i];
    }
    for (std::size_t i = low; i < n; ++i) {
        next_[i] = decay[i] * xi_[i] + phi[i] * lxi_[i];
        g[i] = 0.0;
    }
}

void ControlConstruction::advance() {
    xi_.swap(next_);
    ++step_;
}

// ---------------------------------------------------------------------------

ControlSpec ControlSpec::zero() { return {}; }

ControlSpec ControlSpec::constant(std::vector<cplx> g) {
    ControlSpec s;
    s.kind = Kind::constant;
    s.g = std::move(g);
    return s;
}

ControlSpec ControlSpec::low_mode(std::vector<cplx> v, int n_star) {
    ControlSpec s;
    s.kind = Kind::low_mode;
    s.v = std::move(v);
    s.n_star = n_star;
    return s;
}

nlohmann::json ControlSpec::to_json() const {
    auto pairs = [](const std::vector<cplx>& z) {
        nlohmann::json a = nlohmann::json::array();
        for (const cplx c : z) a.push_back({c.real(), c.imag()});
        return a;
    };
    switch (kind) {
        case Kind::zero:
            return {{"kind", "zero"}};
        case Kind::constant:
            return {{"kind", "constant"}, {"g", pairs(g)}};
        case Kind::low_mode:
            return {{"kind", "low_mode"}, {"v", pairs(v)}, {"n_star", n_star}};
    }
    return {};
}

namespace {

class ZeroControl final : public ControlSignal {
public:
    void next(std::span<const cplx>, std::span<cplx> g) override { std::fill(g.begin(), g.end(), cplx{}); }
};

class ConstantControl final : public ControlSignal {
public:
    explicit ConstantControl(std::vector<cplx> g) : g_(std::move(g)) {}
    void next(std::span<const cplx>, std::span<cplx> g) override { std::copy(g_.begin(), g_.end(), g.begin()); }

private:
    std::vector<cplx> g_;
};

class LowModeControl final : public ControlSignal {
public:
    LowModeControl(const ModelConfig& cfg, const NoiseConfig& noise, double dt, int n_star,
                   std::span<const cplx> v)
        : ctl_(cfg, noise, dt, n_star, v) {}
    void next(std::span<const cplx> u, std::span<cplx> g) override {
        ctl_.emit(u, g);
        ctl_.advance();
    }
    std::span<const cplx> xi() const override { return ctl_.xi(); }

private:
    ControlConstruction ctl_;
};

}  // namespace

std::unique_ptr<ControlSignal> make_control(const ControlSpec& spec, const ModelConfig& cfg,
                                            const NoiseConfig& noise, double dt) {
    switch (spec.kind) {
        case ControlSpec::Kind::zero:
            return std::make_unique<ZeroControl>();
        case ControlSpec::Kind::constant:
            require_model_size(spec.g.size(), cfg, "constant control");
            return std::make_unique<ConstantControl>(spec.g);
        case ControlSpec::Kind::low_mode:
            return std::make_unique<LowModeControl>(cfg, noise, dt, spec.n_star, spec.v);
    }
    throw ConfigError("unknown control kind");
}

// ---------------------------------------------------------------------------

namespace {

/// U, D and (xi, g) carried along one base path.
class FlowBundle {
public:
    FlowBundle(const ModelConfig& cfg, const NoiseConfig& noise, double dt, int n_star,
               std::span<const cplx> v)
        : stepper_(cfg, noise, dt), ctl_(cfg, noise, dt, n_star, v), q_(noise.q),
          U_(v.begin(), v.end()), D_(v.size()), g_(v.size()), qg_(v.size()) {}

    /// Emits g at the current node; must precede record() and step().
    void emit(std::span<const cplx> u) { ctl_.emit(u, g_); }

    void step(std::span<const cplx> u) {
        stepper_.step_linearized(U_, u);
        for (std::size_t i = 0; i < g_.size(); ++i) qg_[i] = q_[i] * g_[i];
        stepper_.step_linearized(D_, u, qg_);
        g_energy_ += h_norm_sq(g_) * stepper_.dt();
        ctl_.advance();
        ensure_finite_tangent(U_, ctl_.time());
        ensure_finite_tangent(D_, ctl_.time());
    }

    void record(ControlledFlows& out, double t, std::span<const cplx> u) const {
        out.times.push_back(t);
        out.u_traj.push_back(to_state(u));
        out.U_traj.push_back(to_state(U_));
        out.D_traj.push_back(to_state(D_));
        out.xi_traj.push_back(to_state(ctl_.xi()));
        out.g_traj.push_back(to_state(g_));
        out.radius.push_back(ctl_.radius());
        out.g_energy.push_back(g_energy_);
    }

private:
    ShellStepper stepper_;
    ControlConstruction ctl_;
    std::vector<double> q_;
    std::vector<cplx> U_, D_, g_, qg_;
    double g_energy_ = 0.0;
};

void check_direction(std::span<const cplx> v, const ModelConfig& cfg) {
    require_model_size(v.size(), cfg, "direction v");
    if (h_norm_sq(v) > 1.0 + 1e-12) throw PreconditionError("control direction needs |v| <= 1");
}

}  // namespace

ControlledFlows build_control(const TrajectoryRecord& u_traj, const ShellState& v, int n_star,
                              const ModelConfig& cfg, const NoiseConfig& noise, std::size_t record_stride) {
    if (u_traj.stride != 1) throw PreconditionError("control construction needs every step of the base path");
    if (u_traj.size() < 2) throw PreconditionError("base path has no steps");
    if (record_stride == 0) throw PreconditionError("record stride must be positive");
    check_direction(v.amplitudes(), cfg);
    const FlushDenormals ftz;
    FlowBundle flows(cfg, noise, u_traj.dt, n_star, v.amplitudes());
    ControlledFlows out;
    out.dt = u_traj.dt;
    out.stride = record_stride;
    out.n_star = n_star;
    const std::size_t last = u_traj.size() - 1;
    for (std::size_t k = 0; k <= last; ++k) {
        const auto u = u_traj.states[k].amplitudes();
        flows.emit(u);
        if (k % record_stride == 0 || k == last) flows.record(out, u_traj.times[k], u);
        if (k < last) flows.step(u);
    }
    return out;
}

ControlledFlows simulate_controlled_flows(const ShellState& x, const ShellState& v, double T, double dt,
                                          int n_star, const ModelConfig& cfg, const NoiseConfig& noise,
                                          std::uint64_t seed, std::size_t record_stride,
                                          std::uint32_t substeps) {
    require_model_size(x.size(), cfg, "initial state");
    check_direction(v.amplitudes(), cfg);
    if (record_stride == 0) throw PreconditionError("record stride must be positive");
    const std::uint64_t steps = step_count(T, dt);
    PathSimulator sim(cfg, noise, dt, WienerPath{seed, 0, dt, substeps}, false);
    sim.reset(x.amplitudes());
    FlowBundle flows(cfg, noise, dt, n_star, v.amplitudes());
    ControlledFlows out;
    out.dt = dt;
    out.stride = record_stride;
    out.n_star = n_star;
    for (std::uint64_t k = 0; k <= steps; ++k) {
        flows.emit(sim.state());
        if (k % record_stride == 0 || k == steps) flows.record(out, sim.time(), sim.state());
        if (k < steps) {
            flows.step(sim.state());
            sim.advance();
        }
    }
    return out;
}

double verify_rho_identity(const ControlledFlows& flows) {
    double worst = 0.0;
    for (std::size_t k = 0; k < flows.size(); ++k) {
        const auto U = flows.U_traj[k].amplitudes();
        const auto D = flows.D_traj[k].amplitudes();
        const auto xi = flows.xi_traj[k].amplitudes();
        double e = 0.0;
        for (std::size_t i = 0; i < U.size(); ++i) e += std::norm(U[i] - D[i] - xi[i]);
        worst = std::max(worst, std::sqrt(e));
    }
    return worst;
}

double xi_g_consistency(const ControlledFlows& flows, const ModelConfig& cfg, const NoiseConfig& noise) {
    if (flows.stride != 1) throw PreconditionError("consistency check needs stride-1 flows");
    if (flows.size() < 2) return 0.0;
    const ShellStepper stepper(cfg, noise, flows.dt);
    const BilinearOperator& op = stepper.bilinear();
    const auto n = static_cast<std::size_t>(cfg.N);
    const auto low = static_cast<std::size_t>(flows.n_star);
    std::vector<cplx> lxi(n);
    double worst = 0.0;
    for (std::size_t k = 0; k + 1 < flows.size(); ++k) {
        const auto u = flows.u_traj[k].amplitudes();
        const auto xi = flows.xi_traj[k].amplitudes();
        const auto xi1 = flows.xi_traj[k + 1].amplitudes();
        const auto g = flows.g_traj[k].amplitudes();
        op.apply_linearized(u, xi, lxi);
        for (std::size_t i = 0; i < n; ++i) {
            cplx predicted;
            if (i < low) {
                const cplx rhs = -stepper.rate()[i] * xi[i] + lxi[i] - noise.q[i] * g[i];
                predicted = xi[i] + flows.dt * rhs;
            } else {
                predicted = stepper.decay()[i] * xi[i] + stepper.phi_dt()[i] * lxi[i];
                worst = std::max(worst, std::abs(g[i]));
            }
            worst = std::max(worst, std::abs(predicted - xi1[i]));
        }
    }
    return worst;
}

void write_control_csv(std::ostream& os, const ControlledFlows& flows) {
    os << "t,xi_norm,radius,zeta_norm2,g_norm2\n";
    os.precision(17);
    for (std::size_t k = 0; k < flows.size(); ++k) {
        const auto xi = flows.xi_traj[k].amplitudes();
        os << flows.times[k] << ',' << std::sqrt(h_norm_sq(xi)) << ',' << flows.radius[k] << ','
           << high_mode_norm_sq(xi, flows.n_star) << ',' << h_norm_sq(flows.g_traj[k].amplitudes()) << '\n';
    }
}

// ---------------------------------------------------------------------------

double variational_fd_error(const ShellState& x, const ShellState& v, double T, double dt, double eta,
                            const ModelConfig& cfg, const NoiseConfig& noise, std::uint64_t seed) {
    require_model_size(x.size(), cfg, "initial state");
    require_model_size(v.size(), cfg, "direction v");
    if (!(eta > 0.0)) throw PreconditionError("finite-difference step must be positive");
    const std::uint64_t steps = step_count(T, dt);
    PathSimulator base(cfg, noise, dt, WienerPath{seed, 0, dt, 1}, false);
    base.reset(x.amplitudes());
    // The noise is additive and shared, so the bumped path minus the base
    // path obeys delta <- e delta + phi (B(u,delta) + B(delta,u) + B(delta,delta))
    // exactly. Carrying delta directly avoids subtracting two nearly equal
    // states, which at strongly damped horizons loses every digit.
    ShellStepper diff(cfg, NoiseConfig::off(cfg.N), dt);
    const auto n = static_cast<std::size_t>(cfg.N);
    std::vector<cplx> U(v.amplitudes().begin(), v.amplitudes().end()), delta(n), lin(n);
    for (std::size_t i = 0; i < n; ++i) delta[i] = eta * v.amplitudes()[i];
    for (std::uint64_t k = 0; k < steps; ++k) {
        diff.bilinear().apply_linearized(base.state(), delta, lin);
        diff.step(delta, nullptr, lin);
        base.stepper().step_linearized(U, base.state());
        base.advance();
    }
    double e = 0.0;
    for (std::size_t i = 0; i < n; ++i) e += std::norm(delta[i] / eta - U[i]);
    return std::sqrt(e);
}

double chain_rule_fd_error(const ShellFunctional& phi, const ShellState& x, double T, double dt, double eta,
                           const ControlSpec& control, const ModelConfig& cfg, const NoiseConfig& noise,
                           std::uint64_t seed) {
    require_model_size(x.size(), cfg, "initial state");
    if (!(eta > 0.0)) throw PreconditionError("finite-difference step must be positive");
    const std::uint64_t steps = step_count(T, dt);
    const auto n = static_cast<std::size_t>(cfg.N);
    const WienerPath path{seed, 0, dt, 1};

    // Unperturbed pass: D and the forcing Q g per step.
    PathSimulator base(cfg, noise, dt, path, false);
    base.reset(x.amplitudes());
    auto signal = make_control(control, cfg, noise, dt);
    std::vector<cplx> g(n), D(n);
    std::vector<cplx> qg_all(n * steps);
    for (std::uint64_t k = 0; k < steps; ++k) {
        signal->next(base.state(), g);
        const std::span<cplx> qg(qg_all.data() + k * n, n);
        for (std::size_t i = 0; i < n; ++i) qg[i] = noise.q[i] * g[i];
        base.stepper().step_linearized(D, base.state(), qg);
        base.advance();
    }
    PathSimulator bumped(cfg, noise, dt, path, false);
    bumped.reset(x.amplitudes());
    std::vector<cplx> f(n);
    for (std::uint64_t k = 0; k < steps; ++k) {
        for (std::size_t i = 0; i < n; ++i) f[i] = eta * qg_all[k * n + i];
        bumped.advance(f);
    }
    const double fd = (phi.value(bumped.state()) - phi.value(base.state())) / eta;
    return std::abs(fd - phi.derivative(base.state(), D));
}

// ---------------------------------------------------------------------------

namespace {

struct IbpSample {
    double lhs = 0.0, rhs = 0.0;
};

}  // namespace

IbpEstimate integration_by_parts_mc(const ShellFunctional& phi, const ShellState& x, double T, double dt,
                                    const ModelConfig& cfg, const NoiseConfig& noise, const ControlSpec& control,
                                    std::size_t M, std::uint64_t seed, unsigned threads, std::uint32_t substeps) {
    if (M < 100) throw PreconditionError("integration by parts needs M >= 100 samples");
    cfg.validate();
    noise.validate(cfg);
    require_model_size(x.size(), cfg, "initial state");
    if (phi.modes() > x.size()) throw DimensionError("functional needs more modes than the model has");
    const std::uint64_t steps = step_count(T, dt);
    // Fail early on a bad control before fanning out.
    (void)make_control(control, cfg, noise, dt);

    const auto samples = parallel_map(M, threads, [&](std::size_t i) {
        const auto n = static_cast<std::size_t>(cfg.N);
        PathSimulator sim(cfg, noise, dt, WienerPath{seed, static_cast<std::uint32_t>(i), dt, substeps}, true);
        sim.reset(x.amplitudes());
        auto signal = make_control(control, cfg, noise, dt);
        std::vector<cplx> g(n), qg(n), D(n);
        double weight = 0.0;
        for (std::uint64_t k = 0; k < steps; ++k) {
            signal->next(sim.state(), g);
            for (std::size_t j = 0; j < n; ++j) qg[j] = noise.q[j] * g[j];
            sim.stepper().step_linearized(D, sim.state(), qg);
            sim.advance();
            if (sim.stochastic()) {
                const auto& dw = sim.last_noise().dw;
                double s = 0.0;
                for (std::size_t j = 0; j < n; ++j) s += g[j].real() * dw[j].real() + g[j].imag() * dw[j].imag();
                weight += 2.0 * s;
            }
        }
        return IbpSample{phi.derivative(sim.state(), D), phi.value(sim.state()) * weight};
    });

    std::vector<double> lhs(M), rhs(M), diff(M);
    for (std::size_t i = 0; i < M; ++i) {
        lhs[i] = samples[i].lhs;
        rhs[i] = samples[i].rhs;
        diff[i] = lhs[i] - rhs[i];
    }
    const SampleStats sl = sample_stats(lhs), sr = sample_stats(rhs), sd = sample_stats(diff);

    IbpEstimate est;
    est.lhs = sl.mean;
    est.rhs = sr.mean;
    est.lhs_stderr = sl.std_error;
    est.rhs_stderr = sr.std_error;
    est.diff_stderr = sd.std_error;
    est.samples = M;

    ProbeReport& rep = est.report;
    rep.name = "integration_by_parts";
    rep.criterion = "|lhs - rhs| <= 3 * stderr(lhs - rhs)";
    rep.inputs = {{"functional", phi.name()}, {"T", T},          {"dt", dt},
                  {"samples", M},             {"seed", seed},    {"substeps", substeps},
                  {"control", control.to_json()}};
    rep.estimates = {{"lhs", est.lhs}, {"rhs", est.rhs}, {"difference", est.lhs - est.rhs}};
    rep.stderrs = {{"lhs", est.lhs_stderr}, {"rhs", est.rhs_stderr}, {"difference", est.diff_stderr}};
    rep.bounds = {{"difference", 3.0 * est.diff_stderr}};
    rep.verdict = std::abs(est.lhs - est.rhs) <= 3.0 * est.diff_stderr ? Verdict::pass : Verdict::fail;
    return est;
}

double ibp_linear_reference(double q, double c, double x1_re, double lambda, double T) {
    if (!(lambda > 0.0) || !(T > 0.0)) throw PreconditionError("need lambda > 0 and T > 0");
    const double decay = std::exp(-lambda * T);
    const double mean = decay * x1_re;
    const double var = q * q * -std::expm1(-2.0 * lambda * T) / (4.0 * lambda);
    const double d1 = q * c * -std::expm1(-lambda * T) / lambda;
    auto sech2 = [](double z) {
        const double t = std::tanh(z);
        return 1.0 - t * t;
    };
    if (var <= 0.0) return d1 * sech2(mean);
    // Composite Simpson over +-12 standard deviations.
    const double sd = std::sqrt(var);
    constexpr int panels = 4000;
    const double h = 24.0 / panels;
    double acc = 0.0;
    for (int i = 0; i <= panels; ++i) {
        const double z = -12.0 + h * i;
        const double w = (i == 0 || i == panels) ? 1.0 : (i % 2 == 1 ? 4.0 : 2.0);
        acc += w * sech2(mean + sd * z) * std::exp(-0.5 * z * z);
    }
    const double expectation = acc * h / 3.0 / std::sqrt(2.0 * std::numbers::pi);
    return d1 * expectation;
}

// ---------------------------------------------------------------------------

ProbeReport gradient_bound_probe(const ShellFunctional& f, const GradientProbeOptions& options,
                                 const ModelConfig& cfg, const NoiseConfig& noise) {
    cfg.validate();
    noise.validate(cfg);
    if (options.samples < 2) throw PreconditionError("gradient probe needs at least two samples");
    if (options.xs.empty() || options.vs.empty() || options.t_grid.empty()) {
        throw PreconditionError("gradient probe needs nonempty x, v and t grids");
    }
    if (!std::is_sorted(options.t_grid.begin(), options.t_grid.end()) || options.t_grid.front() < 0.0) {
        throw PreconditionError("t grid must be nonnegative and increasing");
    }
    for (const auto& x : options.xs) {
        require_model_size(x.size(), cfg, "initial state");
        if (h_norm(x) > options.R * (1.0 + 1e-12)) throw PreconditionError("initial state outside |x| <= R");
    }
    for (const auto& v : options.vs) check_direction(v.amplitudes(), cfg);

    ProbeReport rep;
    rep.name = "gradient_bound";
    const double t_last = options.t_grid.back();
    const double t_ref = options.plateau_reference > 0.0 ? options.plateau_reference : 0.25 * t_last;
    rep.criterion = "sup_{t <= T_last} |D P_t f(x)[v]| <= 1.2 * sup_{t <= T_ref} |D P_t f(x)[v]|";

    try {
        const double C = operator_norm_constant(cfg, 8, 0);
        const NoiseCondition nc = check_noise_condition(noise, cfg, C);
        if (!nc.satisfied || options.n_star < nc.n_star_min) {
            rep.warnings.push_back("noise condition not satisfied for n_star = " + std::to_string(options.n_star));
        }
    } catch (const ConfigError& e) {
        rep.warnings.push_back(e.what());
    }

    const auto steps_of = [&](double t) { return t <= 0.0 ? std::uint64_t{0} : step_count(t, options.dt); };
    std::vector<std::uint64_t> readout(options.t_grid.size());
    for (std::size_t j = 0; j < readout.size(); ++j) readout[j] = steps_of(options.t_grid[j]);
    const std::uint64_t total = readout.back();

    const std::size_t nx = options.xs.size(), nv = options.vs.size(), nt = options.t_grid.size();
    const std::size_t M = options.samples;
    const auto n = static_cast<std::size_t>(cfg.N);

    // Per (sample, x): values indexed [v][t].
    const auto values = parallel_map(M * nx, options.threads, [&](std::size_t idx) {
        const std::size_t xi_idx = idx % nx;
        PathSimulator sim(cfg, noise, options.dt,
                          WienerPath{options.seed, static_cast<std::uint32_t>(idx), options.dt, 1}, true);
        sim.reset(options.xs[xi_idx].amplitudes());
        std::vector<ControlConstruction> ctls;
        ctls.reserve(nv);
        for (const auto& v : options.vs) ctls.emplace_back(cfg, noise, options.dt, options.n_star, v.amplitudes());
        std::vector<double> weight(nv, 0.0), out(nv * nt, 0.0);
        std::vector<cplx> g(n * nv);
        std::size_t next_readout = 0;
        for (std::uint64_t k = 0;; ++k) {
            while (next_readout < nt && readout[next_readout] == k) {
                const double fu = f.value(sim.state());
                for (std::size_t a = 0; a < nv; ++a) {
                    out[a * nt + next_readout] = fu * weight[a] + f.derivative(sim.state(), ctls[a].xi());
                }
                ++next_readout;
            }
            if (k == total) break;
            for (std::size_t a = 0; a < nv; ++a) ctls[a].emit(sim.state(), std::span<cplx>(g.data() + a * n, n));
            sim.advance();
            const auto& dw = sim.last_noise().dw;
            for (std::size_t a = 0; a < nv; ++a) {
                ctls[a].advance();
                double s = 0.0;
                for (std::size_t j = 0; j < n; ++j) {
                    const cplx gj = g[a * n + j];
                    s += gj.real() * dw[j].real() + gj.imag() * dw[j].imag();
                }
                weight[a] += 2.0 * s;
            }
        }
        return out;
    });

    nlohmann::json est = nlohmann::json::array(), err = nlohmann::json::array();
    std::vector<double> sup_upto(nt, 0.0), sup_err(nt, 0.0);
    std::vector<double> column(M);
    for (std::size_t a = 0; a < nx; ++a) {
        for (std::size_t b = 0; b < nv; ++b) {
            nlohmann::json row = nlohmann::json::array(), row_err = nlohmann::json::array();
            for (std::size_t j = 0; j < nt; ++j) {
                for (std::size_t s = 0; s < M; ++s) column[s] = values[s * nx + a][b * nt + j];
                const SampleStats st = sample_stats(column);
                row.push_back(st.mean);
                row_err.push_back(st.std_error);
                if (std::abs(st.mean) > sup_upto[j]) {
                    sup_upto[j] = std::abs(st.mean);
                    sup_err[j] = st.std_error;
                }
            }
            est.push_back(row);
            err.push_back(row_err);
        }
    }
    for (std::size_t j = 1; j < nt; ++j) {
        if (sup_upto[j - 1] > sup_upto[j]) {
            sup_upto[j] = sup_upto[j - 1];
            sup_err[j] = sup_err[j - 1];
        }
    }
    std::size_t ref = 0;
    for (std::size_t j = 0; j < nt; ++j) {
        if (options.t_grid[j] <= t_ref * (1.0 + 1e-12)) ref = j;
    }
    const double ratio = sup_upto[ref] > 0.0 ? sup_upto.back() / sup_upto[ref] : 1.0;

    rep.inputs = {{"functional", f.name()}, {"R", options.R},           {"t_grid", options.t_grid},
                  {"n_star", options.n_star}, {"dt", options.dt},       {"samples", M},
                  {"seed", options.seed},   {"x_count", nx},            {"v_count", nv},
                  {"t_ref", options.t_grid[ref]}};
    rep.estimates = {{"derivative", est}, {"running_sup", sup_upto}, {"plateau_ratio", ratio},
                     {"sup", sup_upto.back()}};
    rep.stderrs = {{"derivative", err}, {"running_sup", sup_err}};
    rep.bounds = {{"plateau_ratio", 1.2}, {"lipschitz_f", f.lipschitz()}, {"sup_f", f.sup_norm()}};
    rep.verdict = ratio <= 1.2 ? Verdict::pass : Verdict::fail;
    return rep;
}

ControlStatistics control_statistics(const ShellState& x, const ShellState& v, int n_star,
                                     const std::vector<double>& t_grid, double dt, const ModelConfig& cfg,
                                     const NoiseConfig& noise, std::size_t samples, std::uint64_t seed,
                                     unsigned threads) {
    require_model_size(x.size(), cfg, "initial state");
    check_direction(v.amplitudes(), cfg);
    if (samples < 2) throw PreconditionError("control statistics need at least two samples");
    if (t_grid.empty() || !std::is_sorted(t_grid.begin(), t_grid.end()) || t_grid.front() < 0.0) {
        throw PreconditionError("t grid must be nonempty, nonnegative and increasing");
    }
    const std::size_t nt = t_grid.size();
    std::vector<std::uint64_t> readout(nt);
    for (std::size_t j = 0; j < nt; ++j) readout[j] = t_grid[j] <= 0.0 ? 0 : step_count(t_grid[j], dt);

    const auto rows = parallel_map(samples, threads, [&](std::size_t i) {
        const auto n = static_cast<std::size_t>(cfg.N);
        PathSimulator sim(cfg, noise, dt, WienerPath{seed, static_cast<std::uint32_t>(i), dt, 1}, false);
        sim.reset(x.amplitudes());
        ControlConstruction ctl(cfg, noise, dt, n_star, v.amplitudes());
        std::vector<cplx> g(n);
        std::vector<double> out(2 * nt);
        double energy = 0.0;
        std::size_t next = 0;
        for (std::uint64_t k = 0;; ++k) {
            while (next < nt && readout[next] == k) {
                out[2 * next] = high_mode_norm_sq(ctl.xi(), n_star);
                out[2 * next + 1] = energy;
                ++next;
            }
            if (next == nt) break;
            ctl.emit(sim.state(), g);
            energy += h_norm_sq(g) * dt;
            sim.advance();
            ctl.advance();
        }
        return out;
    });

    ControlStatistics st;
    st.t_grid = t_grid;
    std::vector<double> col(samples);
    for (std::size_t j = 0; j < nt; ++j) {
        for (int part = 0; part < 2; ++part) {
            for (std::size_t i = 0; i < samples; ++i) col[i] = rows[i][2 * j + static_cast<std::size_t>(part)];
            const SampleStats s = sample_stats(col);
            (part == 0 ? st.zeta_norm2 : st.g_energy).push_back(s.mean);
            (part == 0 ? st.zeta_norm2_stderr : st.g_energy_stderr).push_back(s.std_error);
        }
    }
    return st;
}

}  // namespace shellflow
