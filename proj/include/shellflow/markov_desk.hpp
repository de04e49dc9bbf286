#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "shellflow/probe_report.hpp"

namespace shellflow {

/// Discrete-time Markov chain on n points embedded in R^d; P_t = P^t.
class FiniteSemigroup {
public:
    /// points: n x d coordinates; kernel: n x n row-stochastic.
    /// Throws PreconditionError when a row does not sum to 1 within 1e-12,
    /// an entry is negative, or two points coincide.
    FiniteSemigroup(Eigen::MatrixXd points, Eigen::MatrixXd kernel);

    /// Plain-text format: "n d", then n rows of d coordinates, then n rows
    /// of n kernel entries; '#' starts a comment.
    static FiniteSemigroup load(std::istream& in);
    static FiniteSemigroup load_file(const std::string& path);
    void save(std::ostream& out) const;

    std::size_t size() const noexcept { return static_cast<std::size_t>(kernel_.rows()); }
    const Eigen::MatrixXd& kernel() const noexcept { return kernel_; }
    const Eigen::MatrixXd& points() const noexcept { return points_; }

    double distance(std::size_t x, std::size_t y) const;
    /// Indices of points within distance r of point c (closed ball).
    std::vector<std::size_t> ball(std::size_t c, double r) const;
    /// Indicator vector of ball(c, r).
    Eigen::VectorXd ball_indicator(std::size_t c, double r) const;

    /// mu P^t for a row vector mu.
    Eigen::RowVectorXd push(const Eigen::RowVectorXd& mu, std::uint64_t t) const;
    /// P^t f for a column vector f.
    Eigen::VectorXd apply(const Eigen::VectorXd& f, std::uint64_t t) const;

    /// Default search cap 50 n.
    std::uint64_t t_max() const noexcept { return 50 * size(); }

private:
    Eigen::MatrixXd points_;
    Eigen::MatrixXd kernel_;
};

/// Probability vector of a point mass.
Eigen::RowVectorXd dirac(std::size_t n, std::size_t x);

struct EPropertyTable {
    std::uint64_t horizon = 0;
    Eigen::MatrixXd exact;     ///< sup_{t <= H} |P^t psi(x) - P^t psi(y)|
    Eigen::MatrixXd tail;      ///< bound for t >= H: TV(P^H(x,.), P^H(y,.)) osc(psi)
    Eigen::MatrixXd modulus;   ///< max(exact, tail): bounds sup over all t >= 0
    std::vector<double> per_time_max;  ///< max over pairs at t = 0..H
};

/// Modulus of continuity of t -> P^t psi, exact up to the horizon plus a
/// rigorous tail bound beyond it (oscillation contracts under P and the
/// difference of two rows after H steps is fixed).
EPropertyTable check_e_property(const FiniteSemigroup& sg, const Eigen::VectorXd& psi, std::uint64_t horizon);

struct AverageBoundWitness {
    std::size_t center = 0;
    double radius = 0.0;
    std::vector<std::size_t> members;
    std::uint64_t T = 0;        ///< horizon with worst-case occupation > 1 - eps
    double occupation = 0.0;    ///< min over x in A of (1/T) sum_{s<T} P^s(x, B)
};

/// Smallest ball B (over centers at the points) whose Cesaro occupation from
/// every x in A exceeds 1 - eps at some T <= t_max; the whole state set
/// always qualifies.
AverageBoundWitness check_avg_bounded(const FiniteSemigroup& sg, const std::vector<std::size_t>& A, double eps);

struct ConcentrationWitness {
    double alpha = 0.0;
    std::uint64_t t = 0;          ///< first time attaining alpha (0 when alpha = 0)
    std::vector<double> profile;  ///< min_{x in A} P^t(x, B) for t = 1..t_max
};

/// alpha = max_{1 <= t <= t_max} min_{x in A} P^t(x, B(z, eps)): a common
/// time that works for every pair of measures supported in A.
ConcentrationWitness check_concentrating(const FiniteSemigroup& sg, std::size_t z, double eps,
                                         const std::vector<std::size_t>& A);

struct Decomposition {
    double gamma = 0.0;
    double alpha = 0.0;
    double epsilon = 0.0;
    double delta = 0.0;
    std::size_t z = 0;
    std::size_t k = 0;
    double phi_sup = 0.0;
    std::vector<std::uint64_t> times;            ///< t_1..t_k
    std::vector<Eigen::RowVectorXd> nu1, nu2;    ///< nu_j^i, supported in B(z, delta)
    std::vector<Eigen::RowVectorXd> mu1, mu2;    ///< mu_l^i, l = 1..k
    std::vector<std::size_t> ball;
    double eq4_residual = 0.0;                   ///< max over l, i of the identity's sup-norm residual
    double ball_modulus = 0.0;                   ///< sup_t |P^t phi(x) - P^t phi(y)| over the ball
    double predicted_bound = 0.0;                ///< bound on the difference for t >= sum t_j

    std::uint64_t total_time() const;
};

/// Constructive induction for two initial laws. The stage time t* is the
/// t <= t_max minimizing t / a(t) over the concentration profile a(t) on
/// B(z, delta) (the same time serves every stage), alpha = a(t*), gamma = alpha eps / 2 and k minimal
/// with 4 (1 - gamma)^k max|phi| <= eps, repeatedly pushes the remainders
/// by t*, splits off gamma times their normalized restriction to the ball
/// and renormalizes. Throws HypothesisError naming the failing stage
/// ("e-property" or "concentration").
Decomposition build_decomposition(const FiniteSemigroup& sg, const Eigen::RowVectorXd& mu1,
                                  const Eigen::RowVectorXd& mu2, std::size_t z, double delta, double eps,
                                  const std::vector<Eigen::VectorXd>& dictionary);

/// Exact d_t = max_phi |<phi, mu1 P^t> - <phi, mu2 P^t>| for t = 0..T_max.
/// Pass iff d_t <= eps for every t in [t_start, T_max].
ProbeReport verify_stability_bruteforce(const FiniteSemigroup& sg, const Eigen::RowVectorXd& mu1,
                                        const Eigen::RowVectorXd& mu2,
                                        const std::vector<Eigen::VectorXd>& dictionary, std::uint64_t T_max,
                                        double eps, std::uint64_t t_start);

/// tanh of each coordinate plus exp(-|p - p_0|^2) around each of the first
/// few points, evaluated at the chain's points (all bounded by 1, 1-Lipschitz).
std::vector<Eigen::VectorXd> chain_dictionary(const FiniteSemigroup& sg);

enum class ChainKind {
    mixing,      ///< irreducible, aperiodic (every state has a self-loop)
    absorbing,   ///< state 0 absorbing and reachable from everywhere
    reducible,   ///< two closed classes, the second shifted by 2 along the first axis
    periodic,    ///< deterministic cycle
};

/// Seeded random chain with n states in [0, 1]^d (reducible: see above).
FiniteSemigroup random_chain(std::size_t n, std::size_t d, ChainKind kind, std::uint64_t seed);

}  // namespace shellflow
