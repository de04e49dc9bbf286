#pragma once

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <span>
#include <vector>

#include <json.hpp>

#include "shellflow/functionals.hpp"
#include "shellflow/integrator.hpp"
#include "shellflow/probe_report.hpp"

namespace shellflow {

/// One step of dU/dt = -nu A U + B(u,U) + B(U,u) (u at the left node),
/// with the same exponential splitting as the base scheme. Because the
/// scheme is explicit in B, this is exactly the Jacobian of one base step.
ShellState step_variational(const ShellState& U, const ShellState& u, double dt,
                            const ModelConfig& cfg);

/// One step of dD/dt = -nu A D + B(u,D) + B(D,u) + Q g with g held over the step.
ShellState step_malliavin(const ShellState& D, const ShellState& u, std::span<const cplx> g,
                          double dt, const ModelConfig& cfg, const NoiseConfig& noise);

/// The control flow xi and its signal g that steer the low modes of the
/// tangent flow to zero:
///
///   i <= n_star:  d xi_i/dt = -xi_i / (2 r),  r = |(xi_1..xi_{n_star})|,
///   i >  n_star:  d xi_i/dt = -nu k_i^2 xi_i + [B(u,xi) + B(xi,u)]_i,
///
///   g_i = (-nu k_i^2 xi_i + [B(u,xi) + B(xi,u)]_i + xi_i / (2 r)) / q_i  (i <= n_star),
///
/// g_i = 0 above n_star. Since dr/dt = -1/2 the low block is integrated
/// exactly, xi_i(t) = v_i max(r0 - t/2, 0) / r0, and the xi_i/(2r) term uses
/// the exact shrink over each step. High modes use the base scheme.
class ControlConstruction {
public:
    ControlConstruction(const ModelConfig& cfg, const NoiseConfig& noise, double dt, int n_star,
                        std::span<const cplx> v);

    /// Writes g at the current node given the base state u there, and
    /// prepares xi at the next node (committed by advance()).
    void emit(std::span<const cplx> u, std::span<cplx> g);
    void advance();

    std::span<const cplx> xi() const noexcept { return xi_; }
    double radius() const noexcept;
    double initial_radius() const noexcept { return r0_; }
    double time() const noexcept { return static_cast<double>(step_) * dt_; }
    int n_star() const noexcept { return n_star_; }

private:
    ShellStepper stepper_;
    double dt_;
    int n_star_;
    double r0_;
    std::vector<cplx> v_, xi_, next_, lxi_;
    std::vector<double> q_;
    std::uint64_t step_ = 0;
};

/// Drift perturbations g used by the Malliavin estimates.
struct ControlSpec {
    enum class Kind { zero, constant, low_mode };
    Kind kind = Kind::zero;
    std::vector<cplx> g;  ///< constant: the fixed g (length N)
    std::vector<cplx> v;  ///< low_mode: direction xi(0) = v
    int n_star = 1;       ///< low_mode: number of steered modes

    static ControlSpec zero();
    static ControlSpec constant(std::vector<cplx> g);
    static ControlSpec low_mode(std::vector<cplx> v, int n_star);
    nlohmann::json to_json() const;
};

/// Per-path generator of g at the step nodes of one base path.
class ControlSignal {
public:
    virtual ~ControlSignal() = default;
    /// g at the left node of the next step; base state u at that node.
    virtual void next(std::span<const cplx> u, std::span<cplx> g) = 0;
    /// The control flow xi at the current node, if the signal has one.
    virtual std::span<const cplx> xi() const { return {}; }
};

std::unique_ptr<ControlSignal> make_control(const ControlSpec& spec, const ModelConfig& cfg,
                                            const NoiseConfig& noise, double dt);

struct ControlledFlows {
    double dt = 0.0;
    std::size_t stride = 1;
    int n_star = 0;
    std::vector<double> times;
    std::vector<ShellState> u_traj;
    std::vector<ShellState> U_traj;    ///< variational flow, U(0) = v
    std::vector<ShellState> D_traj;    ///< Malliavin flow, D(0) = 0
    std::vector<ShellState> xi_traj;   ///< control flow, xi(0) = v
    std::vector<ShellState> g_traj;    ///< g emitted at each recorded node
    std::vector<double> radius;        ///< low-mode radius of xi
    std::vector<double> g_energy;      ///< int_0^t |g|^2 ds (left-point sum)

    std::size_t size() const noexcept { return times.size(); }
};

/// Control construction along a recorded base path (stride 1 required).
ControlledFlows build_control(const TrajectoryRecord& u_traj, const ShellState& v, int n_star,
                              const ModelConfig& cfg, const NoiseConfig& noise,
                              std::size_t record_stride = 1);

/// Integrates the base path and all flows together without storing the
/// full-resolution path.
ControlledFlows simulate_controlled_flows(const ShellState& x, const ShellState& v, double T,
                                          double dt, int n_star, const ModelConfig& cfg,
                                          const NoiseConfig& noise, std::uint64_t seed,
                                          std::size_t record_stride = 1,
                                          std::uint32_t substeps = 1);

/// max over recorded times of |U(t) - D(t) - xi(t)|.
double verify_rho_identity(const ControlledFlows& flows);

/// Largest mismatch between the stored xi increments and the right-hand
/// side rebuilt from the emitted g (stride-1 flows only): the Euler form
/// for the steered modes, the base scheme for the rest.
double xi_g_consistency(const ControlledFlows& flows, const ModelConfig& cfg,
                        const NoiseConfig& noise);

/// CSV: t, xi_norm, radius, zeta_norm2, g_norm2.
void write_control_csv(std::ostream& os, const ControlledFlows& flows);

/// |(u^{x + eta v}(T) - u^x(T)) / eta - U(T)| on common noise. The path
/// difference is carried as its own (exact) recursion, not formed by
/// subtraction.
double variational_fd_error(const ShellState& x, const ShellState& v, double T, double dt,
                            double eta, const ModelConfig& cfg, const NoiseConfig& noise,
                            std::uint64_t seed);

/// |(Phi(u^{eta g}(T)) - Phi(u(T))) / eta - DPhi(u(T))[D(T)]| where u^{eta g}
/// carries the extra drift eta Q g with g frozen from the unperturbed path.
double chain_rule_fd_error(const ShellFunctional& phi, const ShellState& x, double T, double dt,
                           double eta, const ControlSpec& control, const ModelConfig& cfg,
                           const NoiseConfig& noise, std::uint64_t seed);

struct IbpEstimate {
    double lhs = 0.0;          ///< E[DPhi(u(T))[D(T)]]
    double rhs = 0.0;          ///< E[Phi(u(T)) int (g, dW)]
    double lhs_stderr = 0.0;
    double rhs_stderr = 0.0;
    double diff_stderr = 0.0;  ///< standard error of the paired difference
    std::size_t samples = 0;
    ProbeReport report;
};

/// Monte Carlo check of E[DPhi(u(T))[D_g u(T)]] = E[Phi(u(T)) int_0^T (g, dW)].
///
/// W is complex-normalized (E|w_n(t)|^2 = t), for which the Cameron-Martin
/// weight of the shift W -> W + int g is 2 sum_k Re(g_k conj(dW_k)); g is
/// evaluated at the left node of each step. Pass iff |lhs - rhs| <=
/// 3 diff_stderr. Refuses M < 100.
IbpEstimate integration_by_parts_mc(const ShellFunctional& phi, const ShellState& x, double T,
                                    double dt, const ModelConfig& cfg, const NoiseConfig& noise,
                                    const ControlSpec& control, std::size_t M,
                                    std::uint64_t seed, unsigned threads = 1,
                                    std::uint32_t substeps = 1);

/// Both sides of the identity for the linear model (a = b = 0), Phi =
/// tanh(Re u_1) and the constant real control c e_1: each equals
///   q c (1 - e^{-lambda T}) / lambda * E[sech^2(X)],
///   X ~ N(e^{-lambda T} Re x_1, q^2 (1 - e^{-2 lambda T}) / (4 lambda)),
/// with lambda = nu k_1^2 (Stein's lemma). Evaluated by quadrature.
double ibp_linear_reference(double q, double c, double x1_re, double lambda, double T);

struct GradientProbeOptions {
    std::vector<ShellState> xs;        ///< initial conditions, |x| <= R
    std::vector<ShellState> vs;        ///< directions, |v| <= 1
    std::vector<double> t_grid;        ///< increasing readout times
    int n_star = 1;
    double R = 1.0;
    double dt = 1e-4;
    double plateau_reference = 0.0;    ///< 0: a quarter of the last grid time
    std::size_t samples = 100;
    std::uint64_t seed = 0;
    unsigned threads = 1;
};

/// Estimates D P_t f(x)[v] = E[f(u(t)) int_0^t (g, dW)] + E[Df(u(t))[xi(t)]]
/// over the grids, reports the running sup over t and passes iff
/// sup(t <= T_last) / sup(t <= T_ref) <= 1.2. A violated noise condition is
/// recorded as a warning.
ProbeReport gradient_bound_probe(const ShellFunctional& f, const GradientProbeOptions& options,
                                 const ModelConfig& cfg, const NoiseConfig& noise);

struct ControlStatistics {
    std::vector<double> t_grid;
    std::vector<double> zeta_norm2;          ///< MC mean of |zeta(t)|^2
    std::vector<double> zeta_norm2_stderr;
    std::vector<double> g_energy;            ///< MC mean of int_0^t |g|^2
    std::vector<double> g_energy_stderr;
};

/// Moments of the control along independent base paths from x.
ControlStatistics control_statistics(const ShellState& x, const ShellState& v, int n_star,
                                     const std::vector<double>& t_grid, double dt,
                                     const ModelConfig& cfg, const NoiseConfig& noise,
                                     std::size_t samples, std::uint64_t seed,
                                     unsigned threads = 1);

}  // namespace shellflow
