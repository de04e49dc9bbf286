#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "shellflow/shell_space.hpp"

namespace shellflow {

/// Diagonal, real, finitely supported noise amplitudes q_{n,n}.
struct NoiseConfig {
    std::vector<double> q;  ///< q_{1,1}..q_{N,N}, index 0 holds q_{1,1}

    /// q_{n,n} = amplitude for n <= active_modes, zero above.
    static NoiseConfig uniform(int modes, double amplitude, int active_modes);
    static NoiseConfig off(int modes);

    /// Smallest n with q_{m,m} = 0 for every m >= n (1-based; N+1 if the
    /// last mode is forced).
    int n0() const;
    double trace_q2() const;
    double max_q2() const;
    bool is_off() const;

    /// Throws ConfigError when the size does not match the model or an
    /// amplitude is non-finite.
    void validate(const ModelConfig& cfg) const;
};

/// Identifies one realization of the driving complex Brownian motions.
///
/// Normalization: E|w_n(t)|^2 = t, i.e. real and imaginary parts are
/// independent with variance t/2 each.
///
/// Draws live on a fine grid of width dt / substeps and are aggregated
/// exactly, so a path integrated at dt with 2m substeps and one at dt/2
/// with m substeps see the same Brownian motion.
struct WienerPath {
    std::uint64_t seed = 0;
    std::uint32_t stream = 0;
    double dt = 1e-4;
    std::uint32_t substeps = 1;
};

/// Noise for one (coarse) step, per mode, not yet scaled by q:
///   ou = int_0^dt exp(-lambda_n (dt - s)) dw_n(s),  dw = w_n(t+dt) - w_n(t),
/// with lambda_n = nu k_n^2. Both are zero on modes without forcing.
struct StepNoise {
    std::vector<cplx> ou;
    std::vector<cplx> dw;
    bool has_dw = false;
};

/// Exact joint sampler of (ou, dw) for a given path and model. Stateless
/// apart from precomputed coefficients; draw() is const and thread-safe.
class NoiseSampler {
public:
    NoiseSampler(const WienerPath& path, const ModelConfig& cfg, const NoiseConfig& noise,
                 bool with_increments);

    void draw(std::uint64_t step, StepNoise& out) const;
    StepNoise make_buffer() const;

    const WienerPath& path() const noexcept { return path_; }
    bool with_increments() const noexcept { return with_dw_; }

private:
    WienerPath path_;
    bool with_dw_;
    std::size_t modes_;
    std::vector<std::size_t> active_;
    // Fine-step coefficients per active mode.
    std::vector<double> ou_sd_, dw_c_, dw_d_, fine_decay_;
};

/// Standard deviation of int_0^dt exp(-rate (dt-s)) dw(s): sqrt((1-e^{-2 rate dt})/(2 rate)).
double ou_increment_sd(double rate, double dt);

/// W increments w_n(t_{step+1}) - w_n(t_step) for every mode (zero where
/// q_{n,n} = 0). Pure function of (path, step).
std::vector<cplx> sample_increments(const WienerPath& path, std::uint64_t step,
                                    const ModelConfig& cfg, const NoiseConfig& noise);

/// One exact step of dz + nu A z dt = Q dW driven by standard complex
/// Gaussians gauss (E|g|^2 = 1):
///   z_n <- e^{-nu k_n^2 dt} z_n + q_n sqrt((1 - e^{-2 nu k_n^2 dt}) / (2 nu k_n^2)) g_n.
ShellState ou_exact_step(const ShellState& z, double dt, const NoiseConfig& noise,
                         const ModelConfig& cfg, std::span<const cplx> gauss);

struct NoiseCondition {
    double threshold = 0.0;  ///< log2(2 C^2 max q^2 / nu^3 + Tr Q^2 / (2 max q^2)) / 2
    int n_star_min = 1;      ///< smallest admissible integer N_* > threshold
    bool satisfied = false;  ///< q_{1,1}..q_{N_*,N_*} all nonzero
};

/// Mode-count condition under which the low modes can be steered by the
/// noise. Throws ConfigError("degenerate: no active modes") for q = 0.
NoiseCondition check_noise_condition(const NoiseConfig& noise, const ModelConfig& cfg, double C);

}  // namespace shellflow
