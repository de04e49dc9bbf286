#include "shellflow/shell_space.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <string>

#include "shellflow/errors.hpp"
#include "shellflow/rng.hpp"

namespace shellflow {

namespace {

void require_same_size(std::size_t a, std::size_t b) {
    if (a != b) {
        throw DimensionError("shell states of different truncation: " + std::to_string(a) +
                             " vs " + std::to_string(b));
    }
}

}  // namespace

std::string_view to_string(Variant v) { return v == Variant::goy ? "goy" : "sabra"; }

Variant parse_variant(std::string_view name) {
    std::string lower(name);
    std::transform(lower.begin(), lower.end(), lower.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    if (lower == "goy") return Variant::goy;
    if (lower == "sabra") return Variant::sabra;
    throw ConfigError("model.variant: expected GOY or Sabra, got '" + std::string(name) + "'");
}

double wavenumber(int n, double k0) { return std::ldexp(k0, n); }

void ModelConfig::validate() const {
    if (!(nu > 0.0) || !std::isfinite(nu)) throw ConfigError("model.nu: viscosity must be positive");
    if (!(k0 > 1.0) || !std::isfinite(k0)) throw ConfigError("model.k0: k0 must exceed 1");
    if (!std::isfinite(a) || !std::isfinite(b)) throw ConfigError("model.a/b: must be finite");
    if (N < static_cast<int>(ShellState::min_modes)) {
        throw ConfigError("model.N: truncation must be at least 4");
    }
    if (N > static_cast<int>(max_modes)) throw ConfigError("model.N: truncation above 60 overflows k_n^2 scaling");
}

std::vector<double> ModelConfig::wavenumbers() const {
    std::vector<double> k(static_cast<std::size_t>(N));
    for (int n = 1; n <= N; ++n) k[static_cast<std::size_t>(n - 1)] = wavenumber(n, k0);
    return k;
}

// ---------------------------------------------------------------------------

ShellState::ShellState(std::size_t modes) : amps_(modes, cplx{}) {
    if (modes < min_modes) throw DimensionError("shell state needs at least 4 modes");
}

ShellState::ShellState(std::vector<cplx> amplitudes) : amps_(std::move(amplitudes)) {
    if (amps_.size() < min_modes) throw DimensionError("shell state needs at least 4 modes");
    ensure_finite();
}

ShellState ShellState::unit(std::size_t modes, std::size_t n, cplx value) {
    ShellState u(modes);
    u.set_mode(n, value);
    return u;
}

void ShellState::set_mode(std::size_t n, cplx value) {
    if (n < 1 || n > amps_.size()) throw DimensionError("mode index out of range");
    if (!std::isfinite(value.real()) || !std::isfinite(value.imag())) {
        throw BlowUpError("non-finite amplitude", std::nan(""));
    }
    amps_[n - 1] = value;
}

bool ShellState::is_finite() const noexcept {
    return std::all_of(amps_.begin(), amps_.end(), [](cplx z) {
        return std::isfinite(z.real()) && std::isfinite(z.imag());
    });
}

void ShellState::ensure_finite() const {
    if (!is_finite()) throw BlowUpError("non-finite amplitude", std::nan(""));
}

ShellState& ShellState::operator+=(const ShellState& other) {
    require_same_size(size(), other.size());
    for (std::size_t i = 0; i < amps_.size(); ++i) amps_[i] += other.amps_[i];
    ensure_finite();
    return *this;
}

ShellState& ShellState::operator-=(const ShellState& other) {
    require_same_size(size(), other.size());
    for (std::size_t i = 0; i < amps_.size(); ++i) amps_[i] -= other.amps_[i];
    ensure_finite();
    return *this;
}

ShellState& ShellState::operator*=(double s) {
    for (auto& z : amps_) z *= s;
    ensure_finite();
    return *this;
}

// ---------------------------------------------------------------------------

double inner_h(std::span<const cplx> u, std::span<const cplx> v) {
    require_same_size(u.size(), v.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        acc += u[i].real() * v[i].real() + u[i].imag() * v[i].imag();
    }
    return acc;
}

double inner_h(const ShellState& u, const ShellState& v) {
    return inner_h(u.amplitudes(), v.amplitudes());
}

double h_norm_sq(std::span<const cplx> u) {
    double acc = 0.0;
    for (const cplx z : u) acc += std::norm(z);
    return acc;
}

double h_norm(const ShellState& u) { return std::sqrt(h_norm_sq(u.amplitudes())); }

double v_norm_sq(std::span<const cplx> u, std::span<const double> k) {
    double acc = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) acc += k[i] * k[i] * std::norm(u[i]);
    return acc;
}

double v_norm(const ShellState& u, const ModelConfig& cfg) {
    return std::sqrt(v_norm_sq(u.amplitudes(), cfg.wavenumbers()));
}

double alpha_norm(const ShellState& u, const ModelConfig& cfg, double alpha) {
    double acc = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        const double k = cfg.k(static_cast<int>(i) + 1);
        acc += std::pow(k, 4.0 * alpha) * std::norm(u.amplitudes()[i]);
    }
    return std::sqrt(acc);
}

NormReport norm_report(const ShellState& u, const ModelConfig& cfg, double alpha) {
    NormReport r;
    r.h_norm = h_norm(u);
    r.v_norm = v_norm(u, cfg);
    r.alpha = alpha;
    r.alpha_norm = alpha_norm(u, cfg, alpha);
    r.calH_norm = alpha_norm(u, cfg, 0.25);
    return r;
}

ShellState apply_A(const ShellState& u, const ModelConfig& cfg) {
    ShellState out(u.size());
    auto dst = out.amplitudes();
    for (std::size_t i = 0; i < u.size(); ++i) {
        const double k = cfg.k(static_cast<int>(i) + 1);
        dst[i] = (k * k) * u.amplitudes()[i];
    }
    out.ensure_finite();
    return out;
}

// ---------------------------------------------------------------------------

BilinearOperator::BilinearOperator(const ModelConfig& cfg)
    : n_(static_cast<std::size_t>(cfg.N)), variant_(cfg.variant),
      c_next_(n_), c_mid_(n_), c_prev_(n_), c_prev2_(n_) {
    cfg.validate();
    const double sign = cfg.variant == Variant::goy ? -1.0 : 1.0;
    for (std::size_t i = 0; i < n_; ++i) {
        const int n = static_cast<int>(i) + 1;
        c_next_[i] = cfg.a * cfg.k(n + 1);
        c_mid_[i] = cfg.b * cfg.k(n);
        c_prev_[i] = sign * cfg.a * cfg.k(n - 1);
        c_prev2_[i] = sign * cfg.b * cfg.k(n - 1);
    }
}

template <bool Accumulate>
void BilinearOperator::apply_impl(std::span<const cplx> u, std::span<const cplx> v,
                                  std::span<cplx> out) const {
    const std::size_t n = n_;
    // Split real/imaginary copies with two zero ghosts on each side, so mode
    // m (1-based) sits at index m + 1 and the loops below are branch-free.
    constexpr std::size_t cap = max_modes + 4;
    double ur[cap], ui[cap], vr[cap], vi[cap];
    for (std::size_t j : {std::size_t{0}, std::size_t{1}, n + 2, n + 3}) {
        ur[j] = ui[j] = vr[j] = vi[j] = 0.0;
    }
    for (std::size_t i = 0; i < n; ++i) {
        ur[i + 2] = u[i].real();
        ui[i + 2] = u[i].imag();
        vr[i + 2] = v[i].real();
        vi[i + 2] = v[i].imag();
    }
    const double* c1 = c_next_.data();
    const double* c2 = c_mid_.data();
    const double* c3 = c_prev_.data();
    const double* c4 = c_prev2_.data();
    double re[cap], im[cap];
    if (variant_ == Variant::goy) {
        // Every factor is conjugated: s = conj(t) with t a plain sum of
        // products, and i * conj(t) = (Im t, Re t).
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t m = i + 2;
            const double tr = c1[i] * (ur[m + 1] * vr[m + 2] - ui[m + 1] * vi[m + 2]) +
                              c2[i] * (ur[m - 1] * vr[m + 1] - ui[m - 1] * vi[m + 1]) +
                              c3[i] * (ur[m - 1] * vr[m - 2] - ui[m - 1] * vi[m - 2]) +
                              c4[i] * (ur[m - 2] * vr[m - 1] - ui[m - 2] * vi[m - 1]);
            const double ti = c1[i] * (ur[m + 1] * vi[m + 2] + ui[m + 1] * vr[m + 2]) +
                              c2[i] * (ur[m - 1] * vi[m + 1] + ui[m - 1] * vr[m + 1]) +
                              c3[i] * (ur[m - 1] * vi[m - 2] + ui[m - 1] * vr[m - 2]) +
                              c4[i] * (ur[m - 2] * vi[m - 1] + ui[m - 2] * vr[m - 1]);
            re[i] = ti;
            im[i] = tr;
        }
    } else {
        // Two terms with a conjugated first factor, two plain products;
        // i * s = (-Im s, Re s).
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t m = i + 2;
            const double sr = c1[i] * (ur[m + 1] * vr[m + 2] + ui[m + 1] * vi[m + 2]) +
                              c2[i] * (ur[m - 1] * vr[m + 1] + ui[m - 1] * vi[m + 1]) +
                              c3[i] * (ur[m - 1] * vr[m - 2] - ui[m - 1] * vi[m - 2]) +
                              c4[i] * (ur[m - 2] * vr[m - 1] - ui[m - 2] * vi[m - 1]);
            const double si = c1[i] * (ur[m + 1] * vi[m + 2] - ui[m + 1] * vr[m + 2]) +
                              c2[i] * (ur[m - 1] * vi[m + 1] - ui[m - 1] * vr[m + 1]) +
                              c3[i] * (ur[m - 1] * vi[m - 2] + ui[m - 1] * vr[m - 2]) +
                              c4[i] * (ur[m - 2] * vi[m - 1] + ui[m - 2] * vr[m - 1]);
            re[i] = -si;
            im[i] = sr;
        }
    }
    for (std::size_t i = 0; i < n; ++i) {
        if constexpr (Accumulate) {
            out[i] += cplx{re[i], im[i]};
        } else {
            out[i] = cplx{re[i], im[i]};
        }
    }
}

void BilinearOperator::apply(std::span<const cplx> u, std::span<const cplx> v,
                             std::span<cplx> out) const {
    if (u.size() != n_ || v.size() != n_ || out.size() != n_) {
        throw DimensionError("bilinear operator: truncation mismatch");
    }
    apply_impl<false>(u, v, out);
}

void BilinearOperator::apply_linearized(std::span<const cplx> u, std::span<const cplx> w,
                                        std::span<cplx> out) const {
    if (u.size() != n_ || w.size() != n_ || out.size() != n_) {
        throw DimensionError("bilinear operator: truncation mismatch");
    }
    apply_impl<false>(u, w, out);
    apply_impl<true>(w, u, out);
}

ShellState bilinear(const ShellState& u, const ShellState& v, const ModelConfig& cfg) {
    require_same_size(u.size(), v.size());
    ModelConfig local = cfg;
    local.N = static_cast<int>(u.size());
    const BilinearOperator op(local);
    ShellState out(u.size());
    op.apply(u.amplitudes(), v.amplitudes(), out.amplitudes());
    out.ensure_finite();
    return out;
}

double bilinear_ratio(const ShellState& u, const ShellState& v, const ModelConfig& cfg) {
    const double denom = v_norm(u, cfg) * h_norm(v);
    if (denom == 0.0) return 0.0;
    return h_norm(bilinear(u, v, cfg)) / denom;
}

// ---------------------------------------------------------------------------

namespace {

using RealMatrix = Eigen::MatrixXd;
using RealVector = Eigen::VectorXd;

RealVector to_real(std::span<const cplx> z) {
    RealVector r(2 * static_cast<Eigen::Index>(z.size()));
    for (std::size_t i = 0; i < z.size(); ++i) {
        r(2 * static_cast<Eigen::Index>(i)) = z[i].real();
        r(2 * static_cast<Eigen::Index>(i) + 1) = z[i].imag();
    }
    return r;
}

std::vector<cplx> to_complex(const RealVector& r) {
    std::vector<cplx> z(static_cast<std::size_t>(r.size() / 2));
    for (std::size_t i = 0; i < z.size(); ++i) {
        z[i] = {r(2 * static_cast<Eigen::Index>(i)), r(2 * static_cast<Eigen::Index>(i) + 1)};
    }
    return z;
}

// B is real-linear in each argument, so with one argument frozen it is a
// real 2N x 2N matrix; columns are images of e_n and i e_n.
template <typename Apply>
RealMatrix real_matrix(std::size_t n, Apply&& apply) {
    RealMatrix m(2 * static_cast<Eigen::Index>(n), 2 * static_cast<Eigen::Index>(n));
    std::vector<cplx> basis(n), image(n);
    for (std::size_t j = 0; j < 2 * n; ++j) {
        std::fill(basis.begin(), basis.end(), cplx{});
        basis[j / 2] = (j % 2 == 0) ? cplx{1.0, 0.0} : cplx{0.0, 1.0};
        apply(std::span<const cplx>(basis), std::span<cplx>(image));
        m.col(static_cast<Eigen::Index>(j)) = to_real(image);
    }
    return m;
}

}  // namespace

double operator_norm_constant(const ModelConfig& cfg, int trials, std::uint64_t seed) {
    cfg.validate();
    if (trials < 1) throw PreconditionError("operator_norm_constant: trials must be >= 1");
    if (cfg.a == 0.0 && cfg.b == 0.0) return 0.0;

    const auto n = static_cast<std::size_t>(cfg.N);
    const BilinearOperator op(cfg);
    const auto k = cfg.wavenumbers();
    NormalStream rng(seed, 0x0C0Cu);

    double best = 0.0;
    for (int trial = 0; trial < trials; ++trial) {
        // u is parametrized as K^{-1} w with |w| = ||u||.
        std::vector<cplx> w(n), v(n), u(n);
        for (std::size_t i = 0; i < n; ++i) {
            w[i] = {rng.normal(), rng.normal()};
            v[i] = {rng.normal(), rng.normal()};
        }
        double ratio = 0.0;
        for (int sweep = 0; sweep < 30; ++sweep) {
            for (std::size_t i = 0; i < n; ++i) u[i] = w[i] / k[i];
            const RealMatrix mv = real_matrix(n, [&](std::span<const cplx> x, std::span<cplx> out) {
                op.apply(u, x, out);
            });
            Eigen::JacobiSVD<RealMatrix> svd_v(mv, Eigen::ComputeFullV);
            v = to_complex(svd_v.matrixV().col(0));

            const RealMatrix mu = real_matrix(n, [&](std::span<const cplx> x, std::span<cplx> out) {
                std::vector<cplx> scaled(n);
                for (std::size_t i = 0; i < n; ++i) scaled[i] = x[i] / k[i];
                op.apply(scaled, v, out);
            });
            Eigen::JacobiSVD<RealMatrix> svd_u(mu, Eigen::ComputeFullV);
            w = to_complex(svd_u.matrixV().col(0));
            const double next = svd_u.singularValues()(0);
            if (next <= ratio * (1.0 + 1e-13)) {
                ratio = std::max(ratio, next);
                break;
            }
            ratio = next;
        }
        // Report a ratio that is actually attained by an explicit pair.
        for (std::size_t i = 0; i < n; ++i) u[i] = w[i] / k[i];
        std::vector<cplx> image(n);
        op.apply(u, v, image);
        const double attained =
            std::sqrt(h_norm_sq(image)) / (std::sqrt(v_norm_sq(u, k)) * std::sqrt(h_norm_sq(v)));
        best = std::max(best, attained);
    }
    return best;
}

}  // namespace shellflow
