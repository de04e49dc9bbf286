#include "shellflow/markov_desk.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>

#include "shellflow/errors.hpp"

namespace shellflow {

namespace {

constexpr double stochastic_tol = 1e-12;
constexpr std::size_t max_stages = 100000;

void check_probability(const Eigen::RowVectorXd& mu, std::size_t n, const char* what) {
    if (static_cast<std::size_t>(mu.size()) != n) {
        throw DimensionError(std::string(what) + " has " + std::to_string(mu.size()) + " entries, chain has " +
                             std::to_string(n) + " states");
    }
    if (!mu.allFinite() || mu.minCoeff() < 0.0 || std::abs(mu.sum() - 1.0) > stochastic_tol) {
        throw PreconditionError(std::string(what) + " is not a probability vector");
    }
}

void check_dictionary(const std::vector<Eigen::VectorXd>& dict, std::size_t n) {
    if (dict.empty()) throw PreconditionError("empty test-function dictionary");
    for (const auto& f : dict) {
        if (static_cast<std::size_t>(f.size()) != n) {
            throw DimensionError("dictionary function has " + std::to_string(f.size()) + " values, chain has " +
                                 std::to_string(n) + " states");
        }
        if (!f.allFinite()) throw PreconditionError("dictionary function is not finite");
    }
}

std::string strip_comments(std::istream& in) {
    std::string out, line;
    while (std::getline(in, line)) {
        if (auto pos = line.find('#'); pos != std::string::npos) line.erase(pos);
        out += line;
        out += '\n';
    }
    return out;
}

double uniform01(std::mt19937_64& gen) { return static_cast<double>(gen() >> 11) * 0x1p-53; }

}  // namespace

FiniteSemigroup::FiniteSemigroup(Eigen::MatrixXd points, Eigen::MatrixXd kernel)
    : points_(std::move(points)), kernel_(std::move(kernel)) {
    const auto n = kernel_.rows();
    if (n == 0 || kernel_.cols() != n) throw DimensionError("kernel must be a non-empty square matrix");
    if (points_.rows() != n) {
        throw DimensionError("kernel has " + std::to_string(n) + " states but " +
                             std::to_string(points_.rows()) + " points were given");
    }
    if (points_.cols() == 0) throw DimensionError("points need at least one coordinate");
    if (!kernel_.allFinite() || !points_.allFinite()) throw PreconditionError("non-finite chain data");
    for (Eigen::Index i = 0; i < n; ++i) {
        if (kernel_.row(i).minCoeff() < 0.0) {
            throw PreconditionError("kernel row " + std::to_string(i) + " has a negative entry");
        }
        if (std::abs(kernel_.row(i).sum() - 1.0) > stochastic_tol) {
            throw PreconditionError("kernel row " + std::to_string(i) + " does not sum to 1");
        }
        for (Eigen::Index j = 0; j < i; ++j) {
            if ((points_.row(i) - points_.row(j)).squaredNorm() == 0.0) {
                throw PreconditionError("points " + std::to_string(j) + " and " + std::to_string(i) + " coincide");
            }
        }
    }
}

FiniteSemigroup FiniteSemigroup::load(std::istream& in) {
    std::istringstream body(strip_comments(in));
    long long n = 0, d = 0;
    if (!(body >> n >> d) || n <= 0 || d <= 0) throw ConfigError("chain file: expected positive 'n d' header");
    Eigen::MatrixXd pts(n, d), P(n, n);
    for (long long i = 0; i < n; ++i)
        for (long long j = 0; j < d; ++j)
            if (!(body >> pts(i, j))) throw ConfigError("chain file: truncated coordinates");
    for (long long i = 0; i < n; ++i)
        for (long long j = 0; j < n; ++j)
            if (!(body >> P(i, j))) throw ConfigError("chain file: truncated kernel");
    std::string extra;
    if (body >> extra) throw ConfigError("chain file: trailing data '" + extra + "'");
    return FiniteSemigroup(std::move(pts), std::move(P));
}

FiniteSemigroup FiniteSemigroup::load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open chain file " + path);
    return load(in);
}

void FiniteSemigroup::save(std::ostream& out) const {
    const auto old = out.precision(17);
    out << kernel_.rows() << ' ' << points_.cols() << '\n';
    for (Eigen::Index i = 0; i < points_.rows(); ++i) {
        for (Eigen::Index j = 0; j < points_.cols(); ++j) out << (j ? " " : "") << points_(i, j);
        out << '\n';
    }
    for (Eigen::Index i = 0; i < kernel_.rows(); ++i) {
        for (Eigen::Index j = 0; j < kernel_.cols(); ++j) out << (j ? " " : "") << kernel_(i, j);
        out << '\n';
    }
    out.precision(old);
}

double FiniteSemigroup::distance(std::size_t x, std::size_t y) const {
    if (x >= size() || y >= size()) throw DimensionError("state index out of range");
    return (points_.row(static_cast<Eigen::Index>(x)) - points_.row(static_cast<Eigen::Index>(y))).norm();
}

std::vector<std::size_t> FiniteSemigroup::ball(std::size_t c, double r) const {
    std::vector<std::size_t> out;
    for (std::size_t y = 0; y < size(); ++y)
        if (distance(c, y) <= r) out.push_back(y);
    return out;
}

Eigen::VectorXd FiniteSemigroup::ball_indicator(std::size_t c, double r) const {
    Eigen::VectorXd ind = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(size()));
    for (auto y : ball(c, r)) ind(static_cast<Eigen::Index>(y)) = 1.0;
    return ind;
}

Eigen::RowVectorXd FiniteSemigroup::push(const Eigen::RowVectorXd& mu, std::uint64_t t) const {
    if (mu.size() != kernel_.rows()) throw DimensionError("measure size does not match the chain");
    Eigen::RowVectorXd out = mu;
    for (std::uint64_t s = 0; s < t; ++s) out = out * kernel_;
    return out;
}

Eigen::VectorXd FiniteSemigroup::apply(const Eigen::VectorXd& f, std::uint64_t t) const {
    if (f.size() != kernel_.rows()) throw DimensionError("function size does not match the chain");
    Eigen::VectorXd out = f;
    for (std::uint64_t s = 0; s < t; ++s) out = kernel_ * out;
    return out;
}

Eigen::RowVectorXd dirac(std::size_t n, std::size_t x) {
    if (x >= n) throw DimensionError("dirac: state index out of range");
    Eigen::RowVectorXd mu = Eigen::RowVectorXd::Zero(static_cast<Eigen::Index>(n));
    mu(static_cast<Eigen::Index>(x)) = 1.0;
    return mu;
}

EPropertyTable check_e_property(const FiniteSemigroup& sg, const Eigen::VectorXd& psi, std::uint64_t horizon) {
    const auto n = static_cast<Eigen::Index>(sg.size());
    if (psi.size() != n) throw DimensionError("psi size does not match the chain");
    EPropertyTable table;
    table.horizon = horizon;
    table.exact = Eigen::MatrixXd::Zero(n, n);
    table.per_time_max.reserve(horizon + 1);

    Eigen::VectorXd f = psi;
    Eigen::MatrixXd PH = Eigen::MatrixXd::Identity(n, n);
    for (std::uint64_t t = 0;; ++t) {
        double worst = 0.0;
        for (Eigen::Index x = 0; x < n; ++x) {
            for (Eigen::Index y = 0; y < n; ++y) {
                const double d = std::abs(f(x) - f(y));
                table.exact(x, y) = std::max(table.exact(x, y), d);
                worst = std::max(worst, d);
            }
        }
        table.per_time_max.push_back(worst);
        if (t == horizon) break;
        f = sg.kernel() * f;
        PH = PH * sg.kernel();
    }

    // For t >= H: P^t psi(x) - P^t psi(y) = (P^H(x,.) - P^H(y,.)) P^{t-H} psi,
    // and the oscillation of P^s psi never exceeds that of psi.
    const double osc = psi.maxCoeff() - psi.minCoeff();
    table.tail = Eigen::MatrixXd::Zero(n, n);
    for (Eigen::Index x = 0; x < n; ++x)
        for (Eigen::Index y = 0; y < n; ++y)
            table.tail(x, y) = 0.5 * (PH.row(x) - PH.row(y)).lpNorm<1>() * osc;
    table.modulus = table.exact.cwiseMax(table.tail);
    return table;
}

AverageBoundWitness check_avg_bounded(const FiniteSemigroup& sg, const std::vector<std::size_t>& A, double eps) {
    if (A.empty()) throw PreconditionError("check_avg_bounded: empty initial set");
    if (!(eps > 0.0 && eps <= 1.0)) throw PreconditionError("check_avg_bounded: eps must be in (0, 1]");
    const std::size_t n = sg.size();
    for (auto x : A)
        if (x >= n) throw DimensionError("check_avg_bounded: state index out of range");

    struct Candidate {
        double radius;
        std::size_t members;
        std::size_t center;
    };
    std::vector<Candidate> candidates;
    for (std::size_t c = 0; c < n; ++c) {
        for (std::size_t y = 0; y < n; ++y) {
            const double r = sg.distance(c, y);
            candidates.push_back({r, sg.ball(c, r).size(), c});
        }
    }
    std::sort(candidates.begin(), candidates.end(), [](const Candidate& a, const Candidate& b) {
        if (a.radius != b.radius) return a.radius < b.radius;
        if (a.members != b.members) return a.members < b.members;
        return a.center < b.center;
    });

    const std::uint64_t t_max = sg.t_max();
    for (const auto& cand : candidates) {
        Eigen::VectorXd g = sg.ball_indicator(cand.center, cand.radius);
        Eigen::VectorXd cum = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
        for (std::uint64_t T = 1; T <= t_max; ++T) {
            cum += g;
            double occ = std::numeric_limits<double>::infinity();
            for (auto x : A) occ = std::min(occ, cum(static_cast<Eigen::Index>(x)) / static_cast<double>(T));
            if (occ > 1.0 - eps) {
                return {cand.center, cand.radius, sg.ball(cand.center, cand.radius), T, occ};
            }
            g = sg.kernel() * g;
        }
    }
    // Unreachable: the ball containing every state has occupation 1 at T = 1.
    throw PreconditionError("check_avg_bounded: no witness found");
}

ConcentrationWitness check_concentrating(const FiniteSemigroup& sg, std::size_t z, double eps,
                                         const std::vector<std::size_t>& A) {
    const std::size_t n = sg.size();
    if (z >= n) throw DimensionError("check_concentrating: z out of range");
    if (A.empty()) throw PreconditionError("check_concentrating: empty initial set");
    for (auto x : A)
        if (x >= n) throw DimensionError("check_concentrating: state index out of range");

    ConcentrationWitness w;
    const std::uint64_t t_max = sg.t_max();
    w.profile.reserve(t_max);
    Eigen::VectorXd g = sg.ball_indicator(z, eps);
    for (std::uint64_t t = 1; t <= t_max; ++t) {
        g = sg.kernel() * g;
        double m = std::numeric_limits<double>::infinity();
        for (auto x : A) m = std::min(m, g(static_cast<Eigen::Index>(x)));
        m = std::max(m, 0.0);
        w.profile.push_back(m);
        if (m > w.alpha) {
            w.alpha = m;
            w.t = t;
        }
    }
    return w;
}

std::uint64_t Decomposition::total_time() const {
    return std::accumulate(times.begin(), times.end(), std::uint64_t{0});
}

Decomposition build_decomposition(const FiniteSemigroup& sg, const Eigen::RowVectorXd& mu1,
                                  const Eigen::RowVectorXd& mu2, std::size_t z, double delta, double eps,
                                  const std::vector<Eigen::VectorXd>& dictionary) {
    const std::size_t n = sg.size();
    check_probability(mu1, n, "mu1");
    check_probability(mu2, n, "mu2");
    check_dictionary(dictionary, n);
    if (z >= n) throw DimensionError("build_decomposition: z out of range");
    if (!(delta > 0.0)) throw PreconditionError("build_decomposition: delta must be positive");
    if (!(eps > 0.0 && eps < 1.0)) throw PreconditionError("build_decomposition: eps must be in (0, 1)");

    Decomposition dec;
    dec.epsilon = eps;
    dec.delta = delta;
    dec.z = z;
    dec.ball = sg.ball(z, delta);
    const Eigen::VectorXd ind = sg.ball_indicator(z, delta);

    for (const auto& phi : dictionary) {
        dec.phi_sup = std::max(dec.phi_sup, phi.cwiseAbs().maxCoeff());
        const auto table = check_e_property(sg, phi, sg.t_max());
        for (auto x : dec.ball)
            for (auto y : dec.ball)
                dec.ball_modulus = std::max(
                    dec.ball_modulus, table.modulus(static_cast<Eigen::Index>(x), static_cast<Eigen::Index>(y)));
    }
    if (dec.ball_modulus >= eps / 2) {
        throw HypothesisError("e-property", "sup_t |P^t phi(x) - P^t phi(y)| on B(z, delta) is " +
                                                std::to_string(dec.ball_modulus) + ", not below eps/2");
    }

    // The whole state set is bounded, so measures supported anywhere are
    // admissible and the return-to-a-bounded-set steps are vacuous.
    std::vector<std::size_t> all(n);
    std::iota(all.begin(), all.end(), std::size_t{0});
    const auto conc = check_concentrating(sg, z, delta, all);
    if (conc.alpha <= 0.0) {
        throw HypothesisError("concentration", "no t <= " + std::to_string(sg.t_max()) +
                                                   " puts positive mass on B(z, delta) from every state");
    }
    std::uint64_t t_star = 0;
    double best_rate = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < conc.profile.size(); ++i) {
        if (conc.profile[i] <= 0.0) continue;
        const double rate = static_cast<double>(i + 1) / conc.profile[i];
        if (rate < best_rate) {
            best_rate = rate;
            t_star = i + 1;
        }
    }
    dec.alpha = conc.profile[t_star - 1];
    dec.gamma = dec.alpha * eps / 2;

    const double keep = 1.0 - dec.gamma;
    while (4.0 * std::pow(keep, static_cast<double>(dec.k)) * dec.phi_sup > eps) {
        if (++dec.k > max_stages) {
            throw HypothesisError("concentration", "alpha = " + std::to_string(dec.alpha) +
                                                       " needs more than " + std::to_string(max_stages) + " stages");
        }
    }

    // The induction runs for thousands of stages; extended precision keeps
    // the accumulated rounding in the identity check well below 1e-12.
    using RowL = Eigen::Matrix<long double, 1, Eigen::Dynamic>;
    const Eigen::Matrix<long double, Eigen::Dynamic, Eigen::Dynamic> K = sg.kernel().cast<long double>();
    const RowL indL = ind.transpose().cast<long double>();
    const auto pushL = [&](RowL v) {
        for (std::uint64_t s = 0; s < t_star; ++s) v = v * K;
        return v;
    };
    const long double gammaL = dec.gamma;
    const long double keepL = 1.0L - gammaL;

    const Eigen::Index nn = static_cast<Eigen::Index>(n);
    RowL cur[2] = {mu1.cast<long double>(), mu2.cast<long double>()};
    RowL lhs[2] = {cur[0], cur[1]};
    RowL acc[2] = {RowL::Zero(nn), RowL::Zero(nn)};
    long double weight = 1.0L;  // (1 - gamma)^l
    for (std::size_t l = 0; l < dec.k; ++l) {
        dec.times.push_back(t_star);
        for (int i = 0; i < 2; ++i) {
            const RowL pushed = pushL(cur[i]);
            const long double mass = pushed.dot(indL);
            if (!(mass >= gammaL)) {
                throw HypothesisError("concentration", "stage " + std::to_string(l + 1) + ": mass " +
                                                           std::to_string(static_cast<double>(mass)) +
                                                           " on B(z, delta) below gamma");
            }
            const RowL nu = pushed.cwiseProduct(indL) / mass;
            cur[i] = (pushed - gammaL * nu) / keepL;

            lhs[i] = pushL(lhs[i]);
            acc[i] = pushL(acc[i]) + gammaL * weight * nu;
            (i == 0 ? dec.nu1 : dec.nu2).push_back(nu.cast<double>());
            (i == 0 ? dec.mu1 : dec.mu2).push_back(cur[i].cast<double>());
        }
        weight *= keepL;
        for (int i = 0; i < 2; ++i) {
            dec.eq4_residual = std::max(
                dec.eq4_residual, static_cast<double>((lhs[i] - acc[i] - weight * cur[i]).cwiseAbs().maxCoeff()));
        }
    }
    if (dec.eq4_residual > stochastic_tol) {
        std::ostringstream msg;
        msg << "decomposition identity residual " << dec.eq4_residual << " exceeds 1e-12 after " << dec.k << " stages";
        throw PreconditionError(msg.str());
    }

    const double tail = std::pow(keep, static_cast<double>(dec.k));
    dec.predicted_bound = (1.0 - tail) * dec.ball_modulus + 2.0 * tail * dec.phi_sup;
    if ((mu1 - mu2).cwiseAbs().maxCoeff() == 0.0) dec.predicted_bound = 0.0;
    return dec;
}

ProbeReport verify_stability_bruteforce(const FiniteSemigroup& sg, const Eigen::RowVectorXd& mu1,
                                        const Eigen::RowVectorXd& mu2,
                                        const std::vector<Eigen::VectorXd>& dictionary, std::uint64_t T_max,
                                        double eps, std::uint64_t t_start) {
    const std::size_t n = sg.size();
    check_probability(mu1, n, "mu1");
    check_probability(mu2, n, "mu2");
    check_dictionary(dictionary, n);
    if (t_start > T_max) throw PreconditionError("verify_stability_bruteforce: t_start exceeds T_max");

    ProbeReport r;
    r.name = "finite-stability";
    r.criterion = "max_phi |<phi, mu1 P^t> - <phi, mu2 P^t>| <= eps for t_start <= t <= T_max";
    r.inputs = {{"states", n}, {"T_max", T_max}, {"t_start", t_start}, {"eps", eps},
                {"dictionary_size", dictionary.size()}};

    Eigen::RowVectorXd diff = mu1 - mu2;
    double worst_after = 0.0, d_start = 0.0, d_final = 0.0;
    std::uint64_t argmax = t_start;
    nlohmann::json checkpoints = nlohmann::json::object();
    for (std::uint64_t t = 0; t <= T_max; ++t) {
        double d = 0.0;
        for (const auto& phi : dictionary) d = std::max(d, std::abs(diff.dot(phi.transpose())));
        if (t == t_start) d_start = d;
        if (t >= t_start && d > worst_after) {
            worst_after = d;
            argmax = t;
        }
        if (t == 0 || (t & (t - 1)) == 0) checkpoints[std::to_string(t)] = d;
        d_final = d;
        if (t < T_max) diff = diff * sg.kernel();
    }
    r.estimates = {{"max_after_start", worst_after}, {"argmax_t", argmax}, {"d_start", d_start},
                   {"d_final", d_final}, {"d_at_powers_of_two", checkpoints}};
    r.bounds = {{"eps", eps}};
    r.verdict = worst_after <= eps ? Verdict::pass : Verdict::fail;
    return r;
}

std::vector<Eigen::VectorXd> chain_dictionary(const FiniteSemigroup& sg) {
    const auto& pts = sg.points();
    const Eigen::Index n = pts.rows();
    std::vector<Eigen::VectorXd> dict;
    for (Eigen::Index j = 0; j < pts.cols(); ++j) dict.emplace_back(pts.col(j).array().tanh().matrix());
    for (Eigen::Index c = 0; c < std::min<Eigen::Index>(n, 4); ++c) {
        Eigen::VectorXd f(n);
        for (Eigen::Index x = 0; x < n; ++x) f(x) = std::exp(-(pts.row(x) - pts.row(c)).squaredNorm());
        dict.push_back(std::move(f));
    }
    return dict;
}

FiniteSemigroup random_chain(std::size_t n, std::size_t d, ChainKind kind, std::uint64_t seed) {
    if (n < 2 || d == 0) throw PreconditionError("random_chain: need n >= 2 and d >= 1");
    if (kind == ChainKind::reducible && n < 4) throw PreconditionError("random_chain: reducible needs n >= 4");
    std::mt19937_64 gen(seed);
    const auto N = static_cast<Eigen::Index>(n);
    Eigen::MatrixXd pts(N, static_cast<Eigen::Index>(d));
    for (Eigen::Index i = 0; i < N; ++i)
        for (Eigen::Index j = 0; j < pts.cols(); ++j) pts(i, j) = uniform01(gen);

    Eigen::MatrixXd P = Eigen::MatrixXd::Zero(N, N);
    auto weight = [&] { return 0.1 + 0.9 * uniform01(gen); };
    // Self-loop, a cycle edge inside [lo, hi) and two random edges inside it.
    auto fill_class = [&](Eigen::Index lo, Eigen::Index hi) {
        const auto size = static_cast<std::uint64_t>(hi - lo);
        for (Eigen::Index i = lo; i < hi; ++i) {
            P(i, i) += weight();
            P(i, lo + (i - lo + 1) % (hi - lo)) += weight();
            for (int e = 0; e < 2; ++e) P(i, lo + static_cast<Eigen::Index>(gen() % size)) += weight();
        }
    };
    switch (kind) {
    case ChainKind::mixing:
        fill_class(0, N);
        break;
    case ChainKind::absorbing:
        P(0, 0) = 1.0;
        for (Eigen::Index i = 1; i < N; ++i) {
            P(i, i) += weight();
            P(i, i - 1) += weight();
            P(i, static_cast<Eigen::Index>(gen() % n)) += weight();
        }
        break;
    case ChainKind::reducible:
        fill_class(0, N / 2);
        fill_class(N / 2, N);
        pts.col(0).tail(N - N / 2).array() += 2.0;
        break;
    case ChainKind::periodic:
        for (Eigen::Index i = 0; i < N; ++i) P(i, (i + 1) % N) = 1.0;
        break;
    }
    for (Eigen::Index i = 0; i < N; ++i) P.row(i) /= P.row(i).sum();
    return FiniteSemigroup(std::move(pts), std::move(P));
}

}  // namespace shellflow
