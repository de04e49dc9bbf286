#include "shellflow/functionals.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "shellflow/errors.hpp"
#include "shellflow/rng.hpp"

namespace shellflow {

std::vector<double> project(std::span<const cplx> u, std::size_t m) {
    if (m > u.size()) throw DimensionError("projection onto more modes than the state has");
    std::vector<double> p(2 * m);
    project_into(u.first(m), p);
    return p;
}

void project_into(std::span<const cplx> u, std::span<double> out) {
    if (out.size() != 2 * u.size()) throw DimensionError("projection buffer has the wrong size");
    for (std::size_t i = 0; i < u.size(); ++i) {
        out[2 * i] = u[i].real();
        out[2 * i + 1] = u[i].imag();
    }
}

// ---------------------------------------------------------------------------

TestFunction TestFunction::constant(std::size_t dim, double value) {
    TestFunction f(Kind::constant, dim);
    f.offset_ = value;
    return f;
}

TestFunction TestFunction::coord_tanh(std::size_t dim, std::size_t j) {
    if (j >= dim) throw DimensionError("coordinate index out of range");
    TestFunction f(Kind::coord_tanh, dim);
    f.index_ = j;
    return f;
}

TestFunction TestFunction::radial_gauss(std::size_t dim) { return TestFunction(Kind::radial_gauss, dim); }

TestFunction TestFunction::halfspace_tanh(std::vector<double> w, double b) {
    double norm = 0.0;
    for (const double x : w) norm += x * x;
    norm = std::sqrt(norm);
    if (!(norm > 0.0)) throw PreconditionError("half-space direction must be nonzero");
    for (double& x : w) x /= norm;
    TestFunction f(Kind::halfspace_tanh, w.size());
    f.w_ = std::move(w);
    f.offset_ = b;
    return f;
}

std::string TestFunction::name() const {
    switch (kind_) {
        case Kind::constant:
            return "const(" + std::to_string(offset_) + ")";
        case Kind::coord_tanh:
            return "tanh(p" + std::to_string(index_) + ")";
        case Kind::radial_gauss:
            return "exp(-|p|^2)";
        case Kind::halfspace_tanh:
            return "tanh(w.p+b)";
    }
    return "?";
}

double TestFunction::value(std::span<const double> p) const {
    if (p.size() != dim_) throw DimensionError("test function evaluated at a point of wrong dimension");
    switch (kind_) {
        case Kind::constant:
            return offset_;
        case Kind::coord_tanh:
            return std::tanh(p[index_]);
        case Kind::radial_gauss: {
            double r2 = 0.0;
            for (const double x : p) r2 += x * x;
            return std::exp(-r2);
        }
        case Kind::halfspace_tanh: {
            double s = offset_;
            for (std::size_t i = 0; i < dim_; ++i) s += w_[i] * p[i];
            return std::tanh(s);
        }
    }
    return 0.0;
}

double TestFunction::value_and_gradient(std::span<const double> p, std::span<double> grad) const {
    if (p.size() != dim_ || grad.size() != dim_) throw DimensionError("gradient buffer has wrong dimension");
    std::fill(grad.begin(), grad.end(), 0.0);
    switch (kind_) {
        case Kind::constant:
            return offset_;
        case Kind::coord_tanh: {
            const double t = std::tanh(p[index_]);
            grad[index_] = 1.0 - t * t;
            return t;
        }
        case Kind::radial_gauss: {
            double r2 = 0.0;
            for (const double x : p) r2 += x * x;
            const double e = std::exp(-r2);
            for (std::size_t i = 0; i < dim_; ++i) grad[i] = -2.0 * p[i] * e;
            return e;
        }
        case Kind::halfspace_tanh: {
            double s = offset_;
            for (std::size_t i = 0; i < dim_; ++i) s += w_[i] * p[i];
            const double t = std::tanh(s);
            for (std::size_t i = 0; i < dim_; ++i) grad[i] = (1.0 - t * t) * w_[i];
            return t;
        }
    }
    return 0.0;
}

double TestFunction::lipschitz() const noexcept {
    switch (kind_) {
        case Kind::constant:
            return 0.0;
        case Kind::radial_gauss:
            // max over r of 2 r exp(-r^2), attained at r = 1/sqrt(2).
            return std::numbers::sqrt2 * std::exp(-0.5);
        default:
            return 1.0;
    }
}

double TestFunction::sup_norm() const noexcept {
    return kind_ == Kind::constant ? std::abs(offset_) : 1.0;
}

std::vector<TestFunction> tanh_dictionary(std::size_t m) {
    std::vector<TestFunction> dict;
    for (std::size_t j = 0; j < 2 * m; ++j) dict.push_back(TestFunction::coord_tanh(2 * m, j));
    return dict;
}

std::vector<TestFunction> standard_dictionary(std::size_t m) {
    constexpr std::size_t size = 64;
    if (2 * m + 1 > size) throw PreconditionError("projection too large for the 64-function dictionary");
    std::vector<TestFunction> dict = tanh_dictionary(m);
    dict.push_back(TestFunction::radial_gauss(2 * m));
    // Directions uniform on the sphere, offsets uniform in [-0.2, 0.2]: the
    // invariant measure at desk scale lives within a few tenths of 0.
    NormalStream rng(0x5EEDD1C7u, static_cast<std::uint32_t>(m));
    while (dict.size() < size) {
        std::vector<double> w(2 * m);
        for (double& x : w) x = rng.normal();
        const double b = 0.4 * rng.uniform() - 0.2;
        dict.push_back(TestFunction::halfspace_tanh(std::move(w), b));
    }
    return dict;
}

// ---------------------------------------------------------------------------

ShellFunctional::ShellFunctional(TestFunction f, std::size_t modes) : f_(std::move(f)), modes_(modes) {
    if (f_.dim() != 2 * modes_) throw DimensionError("test function does not match the projection");
}

ShellFunctional ShellFunctional::tanh_re_u1() { return {TestFunction::coord_tanh(2, 0), 1}; }

ShellFunctional ShellFunctional::gaussian(std::size_t n) { return {TestFunction::radial_gauss(2 * n), n}; }

ShellFunctional ShellFunctional::constant(double value) { return {TestFunction::constant(2, value), 1}; }

std::string ShellFunctional::name() const {
    if (f_.kind() == TestFunction::Kind::coord_tanh && modes_ == 1) return "tanh(Re u_1)";
    if (f_.kind() == TestFunction::Kind::radial_gauss) return "exp(-|u|^2)";
    return f_.name() + " on " + std::to_string(modes_) + " modes";
}

double ShellFunctional::value(std::span<const cplx> u) const {
    if (u.size() < modes_) throw DimensionError("functional needs more modes than the state has");
    double buf[2 * max_modes];
    const std::span<double> p(buf, 2 * modes_);
    project_into(u.first(modes_), p);
    return f_.value(p);
}

double ShellFunctional::derivative(std::span<const cplx> u, std::span<const cplx> h) const {
    if (u.size() < modes_ || h.size() < modes_) throw DimensionError("functional needs more modes");
    double buf[2 * max_modes], gbuf[2 * max_modes], hbuf[2 * max_modes];
    const std::span<double> p(buf, 2 * modes_), g(gbuf, 2 * modes_), hp(hbuf, 2 * modes_);
    project_into(u.first(modes_), p);
    project_into(h.first(modes_), hp);
    f_.value_and_gradient(p, g);
    double d = 0.0;
    for (std::size_t i = 0; i < 2 * modes_; ++i) d += g[i] * hp[i];
    return d;
}

ShellFunctional parse_functional(std::string_view spec, std::size_t n_modes) {
    if (spec == "tanh_re_u1") return ShellFunctional::tanh_re_u1();
    if (spec == "gaussian") return ShellFunctional::gaussian(n_modes);
    auto number_after = [&](std::string_view prefix) {
        const std::string rest(spec.substr(prefix.size()));
        std::size_t used = 0;
        double v = 0.0;
        try {
            v = std::stod(rest, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used != rest.size() || rest.empty()) {
            throw ConfigError("functional: cannot parse '" + std::string(spec) + "'");
        }
        return v;
    };
    if (spec.starts_with("const:")) return ShellFunctional::constant(number_after("const:"));
    if (spec.starts_with("tanh:")) {
        const double j = number_after("tanh:");
        const std::size_t m = std::min<std::size_t>(4, n_modes);
        if (j < 0 || j >= 2.0 * static_cast<double>(m) || j != std::floor(j)) {
            throw ConfigError("functional: tanh coordinate out of range");
        }
        return {TestFunction::coord_tanh(2 * m, static_cast<std::size_t>(j)), m};
    }
    throw ConfigError("functional: unknown name '" + std::string(spec) + "'");
}

}  // namespace shellflow
