#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "shellflow/shell_space.hpp"

namespace shellflow {

/// Bumped whenever a dictionary member, its parameters or its order change.
inline constexpr std::string_view dictionary_version = "shellflow-dict-1";

/// Flattens the first m modes into (re u_1, im u_1, ..., re u_m, im u_m).
std::vector<double> project(std::span<const cplx> u, std::size_t m);
void project_into(std::span<const cplx> u, std::span<double> out);

/// Bounded Lipschitz test function on R^d. Every member of the standard
/// dictionaries is bounded by 1 and 1-Lipschitz in the Euclidean norm.
class TestFunction {
public:
    enum class Kind { constant, coord_tanh, radial_gauss, halfspace_tanh };

    static TestFunction constant(std::size_t dim, double value);
    /// tanh(p_j).
    static TestFunction coord_tanh(std::size_t dim, std::size_t j);
    /// exp(-|p|^2).
    static TestFunction radial_gauss(std::size_t dim);
    /// tanh(w . p + b); w is normalized to unit length.
    static TestFunction halfspace_tanh(std::vector<double> w, double b);

    Kind kind() const noexcept { return kind_; }
    std::size_t dim() const noexcept { return dim_; }
    std::string name() const;

    double value(std::span<const double> p) const;
    /// Gradient written to grad (length dim()); returns the value.
    double value_and_gradient(std::span<const double> p, std::span<double> grad) const;

    double lipschitz() const noexcept;
    double sup_norm() const noexcept;

private:
    TestFunction(Kind kind, std::size_t dim) : kind_(kind), dim_(dim) {}

    Kind kind_;
    std::size_t dim_;
    std::size_t index_ = 0;
    double offset_ = 0.0;
    std::vector<double> w_;
};

/// The 64-function dictionary on 2m-dimensional projections: 2m coordinate
/// tanh functions, one radial Gaussian, and seeded half-space tanh functions
/// filling the rest. Fixed for a given (m, dictionary_version).
std::vector<TestFunction> standard_dictionary(std::size_t m);

/// Only the 2m coordinate tanh functions.
std::vector<TestFunction> tanh_dictionary(std::size_t m);

/// A test function composed with the projection onto the first m modes;
/// this is how functionals of the full state are represented.
class ShellFunctional {
public:
    ShellFunctional(TestFunction f, std::size_t modes);

    /// tanh(Re u_1).
    static ShellFunctional tanh_re_u1();
    /// exp(-|u|^2) over all n modes.
    static ShellFunctional gaussian(std::size_t n);
    static ShellFunctional constant(double value);

    std::string name() const;
    std::size_t modes() const noexcept { return modes_; }
    double value(std::span<const cplx> u) const;
    /// Directional derivative Df(u)[h].
    double derivative(std::span<const cplx> u, std::span<const cplx> h) const;
    double lipschitz() const noexcept { return f_.lipschitz(); }
    double sup_norm() const noexcept { return f_.sup_norm(); }
    const TestFunction& test_function() const noexcept { return f_; }

private:
    TestFunction f_;
    std::size_t modes_;
};

/// Parses "tanh_re_u1", "gaussian", "const:<value>" or "tanh:<coord>" (a
/// coordinate of the m = 4 projection). Throws ConfigError otherwise.
ShellFunctional parse_functional(std::string_view spec, std::size_t n_modes);

}  // namespace shellflow
