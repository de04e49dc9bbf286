#include "shellflow/noise.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "shellflow/errors.hpp"
#include "shellflow/rng.hpp"

namespace shellflow {

NoiseConfig NoiseConfig::uniform(int modes, double amplitude, int active_modes) {
    NoiseConfig cfg;
    cfg.q.assign(static_cast<std::size_t>(modes), 0.0);
    for (int n = 0; n < std::min(modes, active_modes); ++n) {
        cfg.q[static_cast<std::size_t>(n)] = amplitude;
    }
    return cfg;
}

NoiseConfig NoiseConfig::off(int modes) { return uniform(modes, 0.0, 0); }

int NoiseConfig::n0() const {
    int n0 = 1;
    for (std::size_t i = 0; i < q.size(); ++i) {
        if (q[i] != 0.0) n0 = static_cast<int>(i) + 2;
    }
    return n0;
}

double NoiseConfig::trace_q2() const {
    double acc = 0.0;
    for (const double x : q) acc += x * x;
    return acc;
}

double NoiseConfig::max_q2() const {
    double m = 0.0;
    for (const double x : q) m = std::max(m, x * x);
    return m;
}

bool NoiseConfig::is_off() const {
    return std::all_of(q.begin(), q.end(), [](double x) { return x == 0.0; });
}

void NoiseConfig::validate(const ModelConfig& cfg) const {
    if (q.size() != static_cast<std::size_t>(cfg.N)) {
        throw ConfigError("noise.q: expected " + std::to_string(cfg.N) + " amplitudes, got " +
                          std::to_string(q.size()));
    }
    for (const double x : q) {
        if (!std::isfinite(x)) throw ConfigError("noise.q: amplitudes must be finite");
    }
}

// ---------------------------------------------------------------------------

namespace {

/// Extra words for ziggurat rejections of one Gaussian component. The third
/// counter word carries mode | call << 8 | (component + 1) << 24, which never
/// collides with the primary counters (component field zero).
class RetryWords {
public:
    RetryWords(const Philox4x32::Counter& primary, Philox4x32::Key key, std::uint32_t component)
        : ctr_(primary), key_(key), tag_(primary[2] | ((component + 1) << 24)) {}

    std::uint32_t operator()() {
        if (used_ == 4) {
            ctr_[2] = tag_ | (calls_++ << 8);
            words_ = Philox4x32::generate(ctr_, key_);
            used_ = 0;
        }
        return words_[used_++];
    }

private:
    Philox4x32::Counter ctr_;
    Philox4x32::Key key_;
    std::uint32_t tag_;
    std::uint32_t calls_ = 0;
    Philox4x32::Counter words_{};
    unsigned used_ = 4;
};

/// Standard complex Gaussian (E|g|^2 = 1) from two primary words.
cplx complex_normal(const Philox4x32::Counter& ctr, Philox4x32::Key key, std::uint32_t w_re,
                    std::uint32_t w_im, std::uint32_t first_component) {
    const double re = ziggurat_normal(w_re, RetryWords(ctr, key, first_component));
    const double im = ziggurat_normal(w_im, RetryWords(ctr, key, first_component + 1));
    return {re * std::numbers::sqrt2 * 0.5, im * std::numbers::sqrt2 * 0.5};
}

}  // namespace

double ou_increment_sd(double rate, double dt) {
    if (rate == 0.0) return std::sqrt(dt);
    return std::sqrt(-std::expm1(-2.0 * rate * dt) / (2.0 * rate));
}

NoiseSampler::NoiseSampler(const WienerPath& path, const ModelConfig& cfg,
                           const NoiseConfig& noise, bool with_increments)
    : path_(path), with_dw_(with_increments), modes_(static_cast<std::size_t>(cfg.N)) {
    noise.validate(cfg);
    if (!(path.dt > 0.0)) throw PreconditionError("WienerPath.dt must be positive");
    if (path.substeps == 0) throw PreconditionError("WienerPath.substeps must be positive");
    const double h = path.dt / path.substeps;
    for (std::size_t i = 0; i < modes_; ++i) {
        if (noise.q[i] == 0.0) continue;
        const double k = cfg.k(static_cast<int>(i) + 1);
        const double rate = cfg.nu * k * k;
        active_.push_back(i);
        const double sd = ou_increment_sd(rate, h);
        // E[ou conj(dw)] = (1 - e^{-rate h}) / rate; dw = c g_ou + d g_aux.
        const double cov = -std::expm1(-rate * h) / rate;
        const double c = cov / sd;
        ou_sd_.push_back(sd);
        dw_c_.push_back(c);
        dw_d_.push_back(std::sqrt(std::max(h - c * c, 0.0)));
        fine_decay_.push_back(std::exp(-rate * h));
    }
}

StepNoise NoiseSampler::make_buffer() const {
    StepNoise s;
    s.ou.assign(modes_, cplx{});
    s.dw.assign(with_dw_ ? modes_ : 0, cplx{});
    s.has_dw = with_dw_;
    return s;
}

void NoiseSampler::draw(std::uint64_t step, StepNoise& out) const {
    if (out.ou.size() != modes_ || (with_dw_ && out.dw.size() != modes_)) out = make_buffer();
    const auto key = Philox4x32::key_from_seed(path_.seed);
    const std::uint64_t first = step * path_.substeps;
    for (std::size_t a = 0; a < active_.size(); ++a) {
        const std::size_t mode = active_[a];
        cplx ou_acc{};
        cplx dw_acc{};
        for (std::uint32_t s = 0; s < path_.substeps; ++s) {
            const std::uint64_t fine = first + s;
            const Philox4x32::Counter ctr{static_cast<std::uint32_t>(fine),
                                          static_cast<std::uint32_t>(fine >> 32),
                                          static_cast<std::uint32_t>(mode), path_.stream};
            const auto w = Philox4x32::generate(ctr, key);
            const cplx g_ou = complex_normal(ctr, key, w[0], w[1], 0);
            ou_acc = fine_decay_[a] * ou_acc + ou_sd_[a] * g_ou;
            if (with_dw_) {
                const cplx g_aux = complex_normal(ctr, key, w[2], w[3], 2);
                dw_acc += dw_c_[a] * g_ou + dw_d_[a] * g_aux;
            }
        }
        out.ou[mode] = ou_acc;
        if (with_dw_) out.dw[mode] = dw_acc;
    }
}

std::vector<cplx> sample_increments(const WienerPath& path, std::uint64_t step,
                                    const ModelConfig& cfg, const NoiseConfig& noise) {
    const NoiseSampler sampler(path, cfg, noise, true);
    StepNoise buf = sampler.make_buffer();
    sampler.draw(step, buf);
    return buf.dw;
}

ShellState ou_exact_step(const ShellState& z, double dt, const NoiseConfig& noise,
                         const ModelConfig& cfg, std::span<const cplx> gauss) {
    if (!(dt > 0.0)) throw PreconditionError("ou_exact_step: dt must be positive");
    if (z.size() != noise.q.size() || gauss.size() != z.size()) {
        throw DimensionError("ou_exact_step: size mismatch");
    }
    ShellState out(z.size());
    auto dst = out.amplitudes();
    for (std::size_t i = 0; i < z.size(); ++i) {
        const double k = cfg.k(static_cast<int>(i) + 1);
        const double rate = cfg.nu * k * k;
        const cplx increment = ou_increment_sd(rate, dt) * gauss[i];
        dst[i] = std::exp(-rate * dt) * z.amplitudes()[i] + noise.q[i] * increment;
    }
    out.ensure_finite();
    return out;
}

NoiseCondition check_noise_condition(const NoiseConfig& noise, const ModelConfig& cfg, double C) {
    if (noise.is_off()) throw ConfigError("degenerate: no active modes");
    if (!(C > 0.0)) throw PreconditionError("check_noise_condition: C must be positive");
    const double max_q2 = noise.max_q2();
    const double nu3 = cfg.nu * cfg.nu * cfg.nu;
    NoiseCondition out;
    out.threshold = std::log2(2.0 * C * C * max_q2 / nu3 + noise.trace_q2() / (2.0 * max_q2)) / 2.0;
    out.n_star_min = std::max(1, static_cast<int>(std::floor(out.threshold)) + 1);
    out.satisfied = out.n_star_min <= static_cast<int>(noise.q.size());
    for (int n = 1; out.satisfied && n <= out.n_star_min; ++n) {
        out.satisfied = noise.q[static_cast<std::size_t>(n - 1)] != 0.0;
    }
    return out;
}

}  // namespace shellflow
