#pragma once

#include <complex>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

namespace shellflow {

using cplx = std::complex<double>;

enum class Variant { goy, sabra };

std::string_view to_string(Variant v);
Variant parse_variant(std::string_view name);

/// k_n = k0 * 2^n, exact in floating point.
double wavenumber(int n, double k0);

/// Largest supported truncation (k_n^2 stays far from overflow).
inline constexpr std::size_t max_modes = 60;

/// Parameters of the truncated shell model.
struct ModelConfig {
    double nu = 1.0;
    double k0 = 2.0;
    double a = 1.0;
    double b = -0.5;
    Variant variant = Variant::goy;
    int N = 16;

    /// Throws ConfigError naming the offending field.
    void validate() const;

    double k(int n) const { return wavenumber(n, k0); }

    /// k_1..k_N, index 0 holds k_1.
    std::vector<double> wavenumbers() const;
};

/// Galerkin truncation u_1..u_N of a shell velocity. Ghost modes
/// u_{-1}, u_0, u_{N+1}, u_{N+2} are implicitly zero.
class ShellState {
public:
    static constexpr std::size_t min_modes = 4;

    explicit ShellState(std::size_t modes);
    explicit ShellState(std::vector<cplx> amplitudes);

    /// value * e_n, with n counted from 1.
    static ShellState unit(std::size_t modes, std::size_t n, cplx value = 1.0);

    std::size_t size() const noexcept { return amps_.size(); }

    /// 1-based mode access.
    cplx mode(std::size_t n) const { return amps_.at(n - 1); }
    void set_mode(std::size_t n, cplx value);

    std::span<const cplx> amplitudes() const& noexcept { return amps_; }
    std::span<cplx> amplitudes() & noexcept { return amps_; }
    std::span<const cplx> amplitudes() const&& = delete;

    bool is_finite() const noexcept;
    /// Throws BlowUpError (t = NaN) when an amplitude is NaN or infinite.
    void ensure_finite() const;

    ShellState& operator+=(const ShellState& other);
    ShellState& operator-=(const ShellState& other);
    ShellState& operator*=(double s);

    friend ShellState operator+(ShellState lhs, const ShellState& rhs) { return lhs += rhs; }
    friend ShellState operator-(ShellState lhs, const ShellState& rhs) { return lhs -= rhs; }
    friend ShellState operator*(double s, ShellState u) { return u *= s; }
    friend bool operator==(const ShellState&, const ShellState&) = default;

private:
    std::vector<cplx> amps_;
};

struct NormReport {
    double h_norm = 0.0;      ///< |u|
    double v_norm = 0.0;      ///< ||u||
    double alpha = 0.5;
    double alpha_norm = 0.0;  ///< ||u||_alpha for the requested alpha
    double calH_norm = 0.0;   ///< ||u||_{1/4}
};

/// (u, v) = Re sum u_n conj(v_n).
double inner_h(const ShellState& u, const ShellState& v);
double inner_h(std::span<const cplx> u, std::span<const cplx> v);

double h_norm_sq(std::span<const cplx> u);
double h_norm(const ShellState& u);
/// ||u||^2 = sum k_n^2 |u_n|^2.
double v_norm_sq(std::span<const cplx> u, std::span<const double> k);
double v_norm(const ShellState& u, const ModelConfig& cfg);
/// ||u||_alpha^2 = sum k_n^{4 alpha} |u_n|^2.
double alpha_norm(const ShellState& u, const ModelConfig& cfg, double alpha);
NormReport norm_report(const ShellState& u, const ModelConfig& cfg, double alpha = 0.5);

/// (Au)_n = k_n^2 u_n.
ShellState apply_A(const ShellState& u, const ModelConfig& cfg);

/// Precomputed coefficients of the GOY or Sabra bilinear form for one
/// truncation; the hot path of every integrator.
class BilinearOperator {
public:
    explicit BilinearOperator(const ModelConfig& cfg);

    std::size_t modes() const noexcept { return n_; }

    /// out = B(u, v). All spans have length N; out must not alias u or v.
    void apply(std::span<const cplx> u, std::span<const cplx> v, std::span<cplx> out) const;

    /// out = B(u, w) + B(w, u), the linearization of B(u,u) at u in direction w.
    void apply_linearized(std::span<const cplx> u, std::span<const cplx> w,
                          std::span<cplx> out) const;

private:
    template <bool Accumulate>
    void apply_impl(std::span<const cplx> u, std::span<const cplx> v, std::span<cplx> out) const;

    std::size_t n_;
    Variant variant_;
    // Per-mode coefficients of the four interaction terms, index n-1.
    std::vector<double> c_next_, c_mid_, c_prev_, c_prev2_;
};

ShellState bilinear(const ShellState& u, const ShellState& v, const ModelConfig& cfg);

/// Empirical lower estimate of the best C with |B(u,v)| <= C ||u|| |v|.
/// Alternating singular-vector ascent from `trials` seeded random starts.
double operator_norm_constant(const ModelConfig& cfg, int trials, std::uint64_t seed);

/// |B(u,v)| / (||u|| |v|), zero when either norm vanishes.
double bilinear_ratio(const ShellState& u, const ShellState& v, const ModelConfig& cfg);

}  // namespace shellflow
