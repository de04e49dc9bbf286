#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "shellflow/functionals.hpp"
#include "shellflow/integrator.hpp"
#include "shellflow/probe_report.hpp"

namespace shellflow {

/// Uniformly weighted points in R^dim (projections of shell states onto
/// their first dim/2 modes).
struct EmpiricalMeasure {
    std::size_t dim = 0;
    std::vector<double> points;  ///< row-major, size() rows of length dim
    double horizon = 0.0;
    double burn_in = 0.0;
    std::size_t thin = 1;

    std::size_t size() const noexcept { return dim == 0 ? 0 : points.size() / dim; }
    std::span<const double> point(std::size_t i) const { return {points.data() + i * dim, dim}; }
    void add(std::span<const double> p);

    static EmpiricalMeasure point_mass(std::vector<double> p);
    /// Throws DimensionError on ragged storage, PreconditionError on
    /// non-finite points or an empty measure.
    void validate() const;
};

/// <f, mu>, pairwise summed in point order.
double expectation(const TestFunction& f, const EmpiricalMeasure& mu);

/// max over the dictionary of |<f, mu1> - <f, mu2>|.
double dual_lipschitz_distance(const EmpiricalMeasure& mu1, const EmpiricalMeasure& mu2,
                               const std::vector<TestFunction>& dictionary);

/// Batch-means standard error of <f, mu> for a time-ordered sample.
double batch_means_stderr(const TestFunction& f, const EmpiricalMeasure& mu, std::size_t batches = 20);

/// Two-sigma Monte Carlo tolerance for dual_lipschitz_distance(mu1, mu2):
/// 2 max_f sqrt(se1(f)^2 + se2(f)^2) with batch-means standard errors.
double dual_distance_tolerance(const EmpiricalMeasure& mu1, const EmpiricalMeasure& mu2,
                               const std::vector<TestFunction>& dictionary, std::size_t batches = 20);

/// Time-sampled Cesaro measure of one path: projections onto the first m
/// modes at every thin-th step with burn_in <= t <= T.
EmpiricalMeasure cesaro_measure(const ShellState& x, double T, double burn_in, std::size_t thin,
                                std::size_t m, double dt, const ModelConfig& cfg,
                                const NoiseConfig& noise, std::uint64_t seed, std::uint32_t stream = 0);

/// Deterministic points on the sphere |x| = r: r e_1 first, then seeded
/// Gaussian directions in the first min(4, N) modes.
std::vector<ShellState> sphere_points(const ModelConfig& cfg, double r, std::size_t count, std::uint64_t seed);

/// Monte Carlo options shared by the probes.
struct McOptions {
    double dt = 1e-4;
    std::size_t samples = 1000;
    std::uint64_t seed = 0;
    unsigned threads = 1;
};

/// E|u(T)|^2 + 2 nu E int_0^T ||u||^2 against |x|^2 + Tr Q^2 T. Pass iff
/// |residual| <= 3 stderr + 10 dt (|x|^2 + Tr Q^2 T). Needs M >= 100.
ProbeReport energy_balance_mc(const ShellState& x, double T, const ModelConfig& cfg,
                              const NoiseConfig& noise, const McOptions& mc);

/// E exp(eta |u(t)|^2 + eta nu int_0^t ||u||^2) against 2 exp(eta Tr Q^2 t + eta |x|^2),
/// one-sided: pass iff estimate <= bound (1 + 3 relative stderr).
/// Requires 0 < eta <= nu / (2 max q^2).
ProbeReport exp_moment_mc(const ShellState& x, double t, double eta, const ModelConfig& cfg,
                          const NoiseConfig& noise, const McOptions& mc);

/// (1/T) int_0^T P(|u^x(s)| > R) ds for each x and T, against
/// (Tr Q^2 + r^2 / T) / (nu R^2). Pass iff every estimate <= bound + 3 stderr.
ProbeReport average_boundedness_probe(double r, double R, const std::vector<double>& t_grid,
                                      const std::vector<ShellState>& xs, const ModelConfig& cfg,
                                      const NoiseConfig& noise, const McOptions& mc);

/// Time after which the noise-free flow from |x| <= r is inside B(0, eps/2):
/// ln(2r/eps) / (nu k_1^2), zero when 2r <= eps.
double concentration_time(double eps, double r, const ModelConfig& cfg);

/// alpha = min over x of P(|u^x(t0)| < eps) with t0 = concentration_time,
/// after checking the noise-free flow from each x reaches B(0, eps/2) by t0.
/// Pass iff alpha - 3 stderr > 0.
ProbeReport concentration_probe(double eps, double r, const std::vector<ShellState>& xs,
                                const ModelConfig& cfg, const NoiseConfig& noise, const McOptions& mc);

/// min over x of (1/T) int_0^T P(|u^x(s)| < eps) ds. Pass iff the minimum
/// minus 3 stderr is positive.
ProbeReport occupation_lower_bound(double eps, const std::vector<ShellState>& xs, double T,
                                   const ModelConfig& cfg, const NoiseConfig& noise, const McOptions& mc);

struct EPropertyOptions {
    std::vector<double> deltas;    ///< decreasing, each half the previous
    std::vector<double> t_grid;
    std::size_t directions = 2;    ///< x' = x + delta d, seeded unit directions d
    std::size_t modes = 4;         ///< projection for the dictionary
    double ratio_bound = 0.75;
};

/// Coupled (common-noise) estimates of |P_t psi(x) - P_t psi(x')| over the
/// dictionary, directions and t grid; reports sup per delta. Pass iff for
/// every halving sup(delta/2) - 3 se <= ratio_bound (sup(delta) + 3 se).
/// The probed horizon is the last grid time; nothing is claimed beyond it.
ProbeReport e_property_probe(const std::vector<TestFunction>& dictionary, const ShellState& x,
                             const EPropertyOptions& options, const ModelConfig& cfg,
                             const NoiseConfig& noise, const McOptions& mc);

struct StabilityOptions {
    ShellState x1{ShellState::min_modes};
    ShellState x2{ShellState::min_modes};
    std::vector<double> t_grid;      ///< increasing horizons
    std::size_t modes = 4;
    double burn_in_fraction = 0.2;   ///< Cesaro window is [f T, T]
    double sample_every = 0.1;       ///< time between Cesaro samples
    std::uint64_t seed_a = 0;        ///< ensemble from x1
    std::uint64_t seed_b = 1;        ///< ensemble from x2
    std::uint64_t seed_baseline = 2; ///< second ensemble from x1
};

/// Dual-Lipschitz distances (standard dictionary) between ensemble Cesaro
/// measures from x1 and x2, and between their laws at each horizon, with the
/// same-x1 different-seed distance as the Monte Carlo floor. Pass iff
/// d_{j+1} <= d_j + 2 b_{j+1} along the grid and d_last <= 2 b_last.
ProbeReport stability_experiment(const StabilityOptions& options, const ModelConfig& cfg,
                                 const NoiseConfig& noise, const McOptions& mc);

}  // namespace shellflow
