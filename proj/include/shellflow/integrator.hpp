#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "shellflow/fp_env.hpp"
#include "shellflow/noise.hpp"
#include "shellflow/shell_space.hpp"

namespace shellflow {

/// Paths whose |u| exceeds this are declared blown up.
inline constexpr double blow_up_threshold = 1e8;

/// 1e-3 * min(1, 1 / (nu k_4^2)).
double default_dt(const ModelConfig& cfg);

/// Exponential-Euler stepping for du = [-nu A u + B(u,u)] dt + Q dW:
///
///   u <- e^{-nu A dt} u + phi(dt) [B(u,u) + f] + Q * ou,
///   phi(dt)_n = (1 - e^{-nu k_n^2 dt}) / (nu k_n^2),
///
/// where ou is the exact stochastic convolution over the step. The linear
/// part is exact per mode; B is explicit. Holds scratch space, so one
/// instance per thread.
class ShellStepper {
public:
    ShellStepper(const ModelConfig& cfg, const NoiseConfig& noise, double dt);

    double dt() const noexcept { return dt_; }
    std::size_t modes() const noexcept { return decay_.size(); }
    const ModelConfig& model() const noexcept { return cfg_; }
    const BilinearOperator& bilinear() const noexcept { return op_; }
    std::span<const double> decay() const noexcept { return decay_; }
    std::span<const double> phi_dt() const noexcept { return phi_dt_; }
    std::span<const double> rate() const noexcept { return rate_; }
    std::span<const double> q() const noexcept { return q_; }
    std::span<const double> k() const noexcept { return k_; }

    /// Base equation. noise may be null (deterministic step); forcing is an
    /// optional extra drift f held constant over the step.
    void step(std::span<cplx> u, const StepNoise* noise, std::span<const cplx> forcing = {});

    /// Linearized equation dw/dt = -nu A w + B(u,w) + B(w,u) + f with the
    /// base state u frozen at the left node.
    void step_linearized(std::span<cplx> w, std::span<const cplx> u,
                         std::span<const cplx> forcing = {});

private:
    ModelConfig cfg_;
    double dt_;
    BilinearOperator op_;
    std::vector<double> decay_, phi_dt_, rate_, q_, k_;
    std::vector<cplx> scratch_;
};

/// Drives one sample path step by step, tracking time and the running
/// trapezoid of ||u(s)||^2 ds. Used by every Monte Carlo probe.
///
/// Subnormals are flushed to zero on the owning thread for the lifetime of
/// the simulator (see FlushDenormals); keep instances scoped on the stack.
class PathSimulator {
public:
    PathSimulator(const ModelConfig& cfg, const NoiseConfig& noise, double dt,
                  const WienerPath& path, bool with_increments);
    PathSimulator(const PathSimulator&) = delete;
    PathSimulator& operator=(const PathSimulator&) = delete;

    void reset(std::span<const cplx> x);
    /// Advances one step; throws BlowUpError on non-finite or |u| > 1e8.
    void advance(std::span<const cplx> forcing = {});

    std::span<const cplx> state() const noexcept { return u_; }
    std::uint64_t step_index() const noexcept { return step_; }
    double time() const noexcept { return static_cast<double>(step_) * stepper_.dt(); }
    double h_norm_sq() const noexcept { return h2_; }
    double v_norm_sq() const noexcept { return v2_; }
    double dissipation_integral() const noexcept { return dissipation_; }
    /// Noise consumed by the most recent advance().
    const StepNoise& last_noise() const noexcept { return noise_buf_; }
    ShellStepper& stepper() noexcept { return stepper_; }
    bool stochastic() const noexcept { return stochastic_; }

private:
    FlushDenormals ftz_;
    ShellStepper stepper_;
    NoiseSampler sampler_;
    StepNoise noise_buf_;
    bool stochastic_;
    std::vector<cplx> u_;
    std::uint64_t step_ = 0;
    double h2_ = 0.0, v2_ = 0.0, dissipation_ = 0.0;
};

struct TrajectoryRecord {
    double dt = 0.0;
    std::size_t stride = 1;
    std::uint64_t seed = 0;
    std::uint32_t stream = 0;
    std::vector<double> times;
    std::vector<ShellState> states;
    std::vector<double> h_norms;
    std::vector<double> v_norms;
    /// int_0^t ||u(s)||^2 ds, trapezoid over every step (not just records).
    std::vector<double> dissipation_integral;
    /// Cumulative W(t) (not scaled by Q) at record times; empty unless requested.
    std::vector<ShellState> wiener;

    std::size_t size() const noexcept { return times.size(); }
};

struct IntegrationOptions {
    std::size_t stride = 1;       ///< keep every stride-th step
    std::uint32_t stream = 0;     ///< Wiener stream id
    std::uint32_t substeps = 1;   ///< fine noise draws per step
    bool record_wiener = false;
};

/// One step of the exponential scheme from a ShellState; reduces to
/// ou_exact_step when a = b = 0.
ShellState step_semi_implicit(const ShellState& u, double dt, const ModelConfig& cfg,
                              const NoiseConfig& noise, const StepNoise& increments);

TrajectoryRecord integrate_path(const ShellState& x, double T, double dt, const ModelConfig& cfg,
                                const NoiseConfig& noise, std::uint64_t seed,
                                const IntegrationOptions& options = {});

/// Noise-free path of the same scheme.
TrajectoryRecord integrate_deterministic(const ShellState& x, double T, double dt,
                                         const ModelConfig& cfg, std::size_t stride = 1);

/// Integrates z (exact OU on the path's noise) and v solving
/// dv/dt = -nu A v + B(v+z, v+z) on the same grid, and returns
/// max_t |u(t) - (v(t) + z(t))|.
double pathwise_split_check(const ShellState& x, double T, double dt, const ModelConfig& cfg,
                            const NoiseConfig& noise, std::uint64_t seed,
                            const IntegrationOptions& options = {});

/// Residual of the integral identity with test vector e_j (1-based),
///   (u(t),e_j) + nu int (u, A e_j) + int (B(u,e_j), u) - (x,e_j) - (Q W(t), e_j),
/// trapezoid in time over the recorded states, maximized over records.
double weak_form_residual(const TrajectoryRecord& rec, std::size_t j, const ModelConfig& cfg,
                          const NoiseConfig& noise);

/// CSV: t, re(u_1), im(u_1), ..., re(u_N), im(u_N), h_norm, v_norm, dissipation_integral.
void write_trajectory_csv(std::ostream& os, const TrajectoryRecord& rec);

/// Number of steps of width dt covering [0, T].
std::uint64_t step_count(double T, double dt);

}  // namespace shellflow
