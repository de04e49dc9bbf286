#include "shellflow/ergodicity.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "shellflow/errors.hpp"
#include "shellflow/fp_env.hpp"
#include "shellflow/parallel.hpp"
#include "shellflow/rng.hpp"

namespace shellflow {

namespace {

void require_state(const ShellState& x, const ModelConfig& cfg) {
    if (x.size() != static_cast<std::size_t>(cfg.N)) throw DimensionError("state does not match the model truncation");
}

void validate_mc(const McOptions& mc, const ModelConfig& cfg, const NoiseConfig& noise) {
    cfg.validate();
    noise.validate(cfg);
    if (!(mc.dt > 0.0)) throw PreconditionError("time step must be positive");
    if (mc.samples < 2) throw PreconditionError("Monte Carlo needs at least two samples");
}

std::uint64_t steps_to(double t, double dt) { return t <= 0.0 ? 0 : step_count(t, dt); }

std::vector<std::uint64_t> readouts(const std::vector<double>& grid, double dt) {
    if (grid.empty()) throw PreconditionError("time grid is empty");
    if (!std::is_sorted(grid.begin(), grid.end()) || grid.front() < 0.0) {
        throw PreconditionError("time grid must be nonnegative and increasing");
    }
    std::vector<std::uint64_t> r(grid.size());
    for (std::size_t j = 0; j < grid.size(); ++j) r[j] = steps_to(grid[j], dt);
    return r;
}

nlohmann::json mc_inputs(const McOptions& mc) {
    return {{"dt", mc.dt}, {"samples", mc.samples}, {"seed", mc.seed}};
}

std::uint32_t stream_id(std::size_t i) { return static_cast<std::uint32_t>(i); }

std::vector<double> column(const std::vector<std::vector<double>>& rows, std::size_t j) {
    std::vector<double> c(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) c[i] = rows[i][j];
    return c;
}

}  // namespace

// ---------------------------------------------------------------------------

void EmpiricalMeasure::add(std::span<const double> p) {
    if (p.size() != dim) throw DimensionError("point has the wrong dimension");
    points.insert(points.end(), p.begin(), p.end());
}

EmpiricalMeasure EmpiricalMeasure::point_mass(std::vector<double> p) {
    EmpiricalMeasure mu;
    mu.dim = p.size();
    mu.points = std::move(p);
    return mu;
}

void EmpiricalMeasure::validate() const {
    if (dim == 0 || points.size() % dim != 0) throw DimensionError("empirical measure storage is ragged");
    if (points.empty()) throw PreconditionError("empirical measure is empty");
    for (const double v : points) {
        if (!std::isfinite(v)) throw PreconditionError("empirical measure has a non-finite point");
    }
}

double expectation(const TestFunction& f, const EmpiricalMeasure& mu) {
    mu.validate();
    if (f.dim() != mu.dim) throw DimensionError("test function and measure dimensions differ");
    std::vector<double> v(mu.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = f.value(mu.point(i));
    return pairwise_sum(v) / static_cast<double>(v.size());
}

double dual_lipschitz_distance(const EmpiricalMeasure& mu1, const EmpiricalMeasure& mu2,
                               const std::vector<TestFunction>& dictionary) {
    if (mu1.dim != mu2.dim) throw DimensionError("measures live on different projections");
    double d = 0.0;
    for (const auto& f : dictionary) d = std::max(d, std::abs(expectation(f, mu1) - expectation(f, mu2)));
    return d;
}

double batch_means_stderr(const TestFunction& f, const EmpiricalMeasure& mu, std::size_t batches) {
    mu.validate();
    if (batches < 2) throw PreconditionError("batch means needs at least two batches");
    const std::size_t n = mu.size();
    if (n < batches) return 0.0;
    const std::size_t per = n / batches;
    std::vector<double> means(batches);
    std::vector<double> v(per);
    for (std::size_t b = 0; b < batches; ++b) {
        for (std::size_t i = 0; i < per; ++i) v[i] = f.value(mu.point(b * per + i));
        means[b] = pairwise_sum(v) / static_cast<double>(per);
    }
    return sample_stats(means).std_error;
}

double dual_distance_tolerance(const EmpiricalMeasure& mu1, const EmpiricalMeasure& mu2,
                               const std::vector<TestFunction>& dictionary, std::size_t batches) {
    double worst = 0.0;
    for (const auto& f : dictionary) {
        const double s1 = batch_means_stderr(f, mu1, batches), s2 = batch_means_stderr(f, mu2, batches);
        worst = std::max(worst, std::sqrt(s1 * s1 + s2 * s2));
    }
    return 2.0 * worst;
}

EmpiricalMeasure cesaro_measure(const ShellState& x, double T, double burn_in, std::size_t thin, std::size_t m,
                                double dt, const ModelConfig& cfg, const NoiseConfig& noise, std::uint64_t seed,
                                std::uint32_t stream) {
    require_state(x, cfg);
    if (!(burn_in >= 0.0 && burn_in < T)) throw PreconditionError("need 0 <= burn_in < T");
    if (thin == 0) throw PreconditionError("thinning must be positive");
    if (m == 0 || m > x.size()) throw DimensionError("projection size out of range");
    const std::uint64_t steps = step_count(T, dt);
    const std::uint64_t first = steps_to(burn_in, dt);
    PathSimulator sim(cfg, noise, dt, WienerPath{seed, stream, dt, 1}, false);
    sim.reset(x.amplitudes());
    EmpiricalMeasure mu;
    mu.dim = 2 * m;
    mu.horizon = T;
    mu.burn_in = burn_in;
    mu.thin = thin;
    std::vector<double> p(2 * m);
    for (std::uint64_t k = 0;; ++k) {
        if (k >= first && k % thin == 0) {
            project_into(sim.state().first(m), p);
            mu.add(p);
        }
        if (k == steps) break;
        sim.advance();
    }
    return mu;
}

std::vector<ShellState> sphere_points(const ModelConfig& cfg, double r, std::size_t count, std::uint64_t seed) {
    if (!(r >= 0.0)) throw PreconditionError("sphere radius must be nonnegative");
    const auto n = static_cast<std::size_t>(cfg.N);
    std::vector<ShellState> pts;
    if (count == 0) return pts;
    pts.push_back(ShellState::unit(n, 1, r));
    NormalStream rng(seed, 0x5F3E7Eu);
    const std::size_t low = std::min<std::size_t>(4, n);
    while (pts.size() < count) {
        std::vector<cplx> z(n);
        for (std::size_t i = 0; i < low; ++i) z[i] = {rng.normal(), rng.normal()};
        ShellState s(std::move(z));
        const double h = h_norm(s);
        if (h == 0.0) continue;
        s *= r / h;
        pts.push_back(std::move(s));
    }
    return pts;
}

// ---------------------------------------------------------------------------

ProbeReport energy_balance_mc(const ShellState& x, double T, const ModelConfig& cfg, const NoiseConfig& noise,
                              const McOptions& mc) {
    validate_mc(mc, cfg, noise);
    require_state(x, cfg);
    if (mc.samples < 100) throw PreconditionError("energy balance needs M >= 100 samples");
    const std::uint64_t steps = step_count(T, mc.dt);
    const double x2 = h_norm_sq(x.amplitudes());
    const double target = x2 + noise.trace_q2() * T;

    const auto rows = parallel_map(mc.samples, mc.threads, [&](std::size_t i) {
        PathSimulator sim(cfg, noise, mc.dt, WienerPath{mc.seed, stream_id(i), mc.dt, 1}, false);
        sim.reset(x.amplitudes());
        for (std::uint64_t k = 0; k < steps; ++k) sim.advance();
        const double h2 = sim.h_norm_sq(), diss = 2.0 * cfg.nu * sim.dissipation_integral();
        return std::vector<double>{h2, diss, h2 + diss - target};
    });
    const SampleStats h2 = sample_stats(column(rows, 0)), diss = sample_stats(column(rows, 1)),
                      res = sample_stats(column(rows, 2));

    ProbeReport rep;
    rep.name = "energy_balance";
    rep.criterion = "|E|u(T)|^2 + 2 nu E int ||u||^2 - |x|^2 - TrQ^2 T| <= 3 stderr + 10 dt (|x|^2 + TrQ^2 T)";
    rep.inputs = mc_inputs(mc);
    rep.inputs["T"] = T;
    rep.inputs["x_norm_sq"] = x2;
    rep.estimates = {{"final_energy", h2.mean}, {"dissipation", diss.mean}, {"residual", res.mean},
                     {"target", target}, {"relative_residual", target > 0 ? res.mean / target : res.mean}};
    rep.stderrs = {{"final_energy", h2.std_error}, {"dissipation", diss.std_error}, {"residual", res.std_error}};
    const double tol = 3.0 * res.std_error + 10.0 * mc.dt * target;
    rep.bounds = {{"residual", tol}};
    rep.verdict = std::abs(res.mean) <= tol ? Verdict::pass : Verdict::fail;
    return rep;
}

ProbeReport exp_moment_mc(const ShellState& x, double t, double eta, const ModelConfig& cfg, const NoiseConfig& noise,
                          const McOptions& mc) {
    validate_mc(mc, cfg, noise);
    require_state(x, cfg);
    const double eta_max = noise.is_off() ? INFINITY : cfg.nu / (2.0 * noise.max_q2());
    if (!(eta > 0.0) || eta > eta_max * (1.0 + 1e-12)) {
        throw PreconditionError("exponential moment needs 0 < eta <= nu / (2 max q^2)");
    }
    const std::uint64_t steps = step_count(t, mc.dt);
    const auto values = parallel_map(mc.samples, mc.threads, [&](std::size_t i) {
        PathSimulator sim(cfg, noise, mc.dt, WienerPath{mc.seed, stream_id(i), mc.dt, 1}, false);
        sim.reset(x.amplitudes());
        for (std::uint64_t k = 0; k < steps; ++k) sim.advance();
        return std::exp(eta * sim.h_norm_sq() + eta * cfg.nu * sim.dissipation_integral());
    });
    const SampleStats s = sample_stats(values);
    const double bound = 2.0 * std::exp(eta * noise.trace_q2() * t + eta * h_norm_sq(x.amplitudes()));
    const double rel = s.mean > 0 ? s.std_error / s.mean : 0.0;

    ProbeReport rep;
    rep.name = "exp_moment";
    rep.criterion = "E exp(eta|u(t)|^2 + eta nu int ||u||^2) <= 2 exp(eta TrQ^2 t + eta |x|^2) (1 + 3 rel stderr)";
    rep.inputs = mc_inputs(mc);
    rep.inputs["t"] = t;
    rep.inputs["eta"] = eta;
    rep.inputs["eta_max"] = eta_max;
    rep.estimates = {{"moment", s.mean}, {"relative_stderr", rel}};
    rep.stderrs = {{"moment", s.std_error}};
    rep.bounds = {{"moment", bound}, {"moment_with_tolerance", bound * (1.0 + 3.0 * rel)}};
    rep.verdict = s.mean <= bound * (1.0 + 3.0 * rel) ? Verdict::pass : Verdict::fail;
    return rep;
}

ProbeReport average_boundedness_probe(double r, double R, const std::vector<double>& t_grid,
                                      const std::vector<ShellState>& xs, const ModelConfig& cfg,
                                      const NoiseConfig& noise, const McOptions& mc) {
    validate_mc(mc, cfg, noise);
    if (!(R > 0.0)) throw PreconditionError("radius R must be positive");
    if (xs.empty()) throw PreconditionError("x grid is empty");
    for (const auto& x : xs) require_state(x, cfg);
    const auto ro = readouts(t_grid, mc.dt);
    if (t_grid.front() <= 0.0) throw PreconditionError("horizons must be positive");
    const std::size_t nt = t_grid.size(), M = mc.samples;
    const double R2 = R * R;

    const auto rows = parallel_map(M * xs.size(), mc.threads, [&](std::size_t idx) {
        const ShellState& x = xs[idx / M];
        PathSimulator sim(cfg, noise, mc.dt, WienerPath{mc.seed, stream_id(idx), mc.dt, 1}, false);
        sim.reset(x.amplitudes());
        std::vector<double> out(nt);
        std::uint64_t outside = 0;
        std::size_t j = 0;
        for (std::uint64_t k = 0; j < nt; ++k) {
            while (j < nt && ro[j] == k) {
                out[j] = static_cast<double>(outside) * mc.dt / t_grid[j];
                ++j;
            }
            if (j == nt) break;
            if (sim.h_norm_sq() > R2) ++outside;
            sim.advance();
        }
        return out;
    });

    ProbeReport rep;
    rep.name = "average_boundedness";
    rep.criterion = "(1/T) int_0^T P(|u^x(s)| > R) ds <= (TrQ^2 + r^2/T)/(nu R^2) + 3 stderr for every x, T";
    rep.inputs = mc_inputs(mc);
    rep.inputs["r"] = r;
    rep.inputs["R"] = R;
    rep.inputs["t_grid"] = t_grid;
    rep.inputs["x_count"] = xs.size();
    nlohmann::json est = nlohmann::json::array(), err = nlohmann::json::array(), bnd = nlohmann::json::array();
    bool ok = true;
    double worst_margin = -INFINITY;
    for (std::size_t a = 0; a < xs.size(); ++a) {
        nlohmann::json row = nlohmann::json::array(), row_err = nlohmann::json::array();
        for (std::size_t j = 0; j < nt; ++j) {
            std::vector<double> c(M);
            for (std::size_t i = 0; i < M; ++i) c[i] = rows[a * M + i][j];
            const SampleStats s = sample_stats(c);
            const double bound = (noise.trace_q2() + r * r / t_grid[j]) / (cfg.nu * R2);
            row.push_back(s.mean);
            row_err.push_back(s.std_error);
            worst_margin = std::max(worst_margin, s.mean - bound - 3.0 * s.std_error);
            if (s.mean > bound + 3.0 * s.std_error) ok = false;
        }
        est.push_back(row);
        err.push_back(row_err);
    }
    for (const double T : t_grid) bnd.push_back((noise.trace_q2() + r * r / T) / (cfg.nu * R2));
    rep.estimates = {{"exit_fraction", est}, {"worst_margin", worst_margin}};
    rep.stderrs = {{"exit_fraction", err}};
    rep.bounds = {{"exit_fraction", bnd}};
    for (const auto& x : xs) {
        if (h_norm(x) > r * (1.0 + 1e-12)) rep.warnings.push_back("grid point outside |x| <= r");
    }
    rep.verdict = ok ? Verdict::pass : Verdict::fail;
    return rep;
}

double concentration_time(double eps, double r, const ModelConfig& cfg) {
    if (!(eps > 0.0) || !(r >= 0.0)) throw PreconditionError("need eps > 0 and r >= 0");
    const double k1 = cfg.k(1);
    return 2.0 * r <= eps ? 0.0 : std::log(2.0 * r / eps) / (cfg.nu * k1 * k1);
}

ProbeReport concentration_probe(double eps, double r, const std::vector<ShellState>& xs, const ModelConfig& cfg,
                                const NoiseConfig& noise, const McOptions& mc) {
    validate_mc(mc, cfg, noise);
    if (xs.empty()) throw PreconditionError("x grid is empty");
    for (const auto& x : xs) require_state(x, cfg);
    ProbeReport rep;
    rep.name = "concentration";
    rep.criterion = "alpha = min_x P(|u^x(t0)| < eps) satisfies alpha - 3 stderr > 0";

    // The noise-free flow from each grid point must be inside B(0, eps/2) at t0.
    double t0 = concentration_time(eps, r, cfg);
    const NoiseConfig quiet = NoiseConfig::off(cfg.N);
    auto deterministic_ok = [&](double t) {
        if (t <= 0.0) {
            return std::all_of(xs.begin(), xs.end(), [&](const ShellState& x) { return h_norm(x) <= 0.5 * eps; });
        }
        const std::uint64_t steps = step_count(t, mc.dt);
        double worst = 0.0;
        for (const auto& x : xs) {
            PathSimulator sim(cfg, quiet, mc.dt, WienerPath{}, false);
            sim.reset(x.amplitudes());
            for (std::uint64_t k = 0; k < steps; ++k) sim.advance();
            worst = std::max(worst, std::sqrt(sim.h_norm_sq()));
        }
        return worst <= 0.5 * eps;
    };
    int extensions = 0;
    while (!deterministic_ok(t0) && extensions < 20) {
        t0 = t0 > 0.0 ? 2.0 * t0 : mc.dt;
        ++extensions;
    }
    if (extensions > 0) {
        rep.warnings.push_back("noise-free flow needed t0 extended " + std::to_string(extensions) + " times");
    }

    const std::size_t M = mc.samples;
    const std::uint64_t steps = steps_to(t0, mc.dt);
    const double eps2 = eps * eps;
    const auto hits = parallel_map(M * xs.size(), mc.threads, [&](std::size_t idx) {
        PathSimulator sim(cfg, noise, mc.dt, WienerPath{mc.seed, stream_id(idx), mc.dt, 1}, false);
        sim.reset(xs[idx / M].amplitudes());
        for (std::uint64_t k = 0; k < steps; ++k) sim.advance();
        return sim.h_norm_sq() < eps2 ? 1.0 : 0.0;
    });
    double alpha = INFINITY, alpha_se = 0.0;
    nlohmann::json per_x = nlohmann::json::array();
    for (std::size_t a = 0; a < xs.size(); ++a) {
        const SampleStats s = sample_stats(std::span<const double>(hits).subspan(a * M, M));
        per_x.push_back(s.mean);
        if (s.mean < alpha) {
            alpha = s.mean;
            alpha_se = s.std_error;
        }
    }
    rep.inputs = mc_inputs(mc);
    rep.inputs["eps"] = eps;
    rep.inputs["r"] = r;
    rep.inputs["x_count"] = xs.size();
    rep.estimates = {{"t0", t0}, {"alpha", alpha}, {"per_x", per_x}};
    rep.stderrs = {{"alpha", alpha_se}};
    rep.bounds = {{"alpha_lower", 0.0}};
    rep.verdict = alpha - 3.0 * alpha_se > 0.0 ? Verdict::pass : Verdict::fail;
    return rep;
}

ProbeReport occupation_lower_bound(double eps, const std::vector<ShellState>& xs, double T, const ModelConfig& cfg,
                                   const NoiseConfig& noise, const McOptions& mc) {
    validate_mc(mc, cfg, noise);
    if (!(eps > 0.0)) throw PreconditionError("ball radius must be positive");
    if (xs.empty()) throw PreconditionError("x grid is empty");
    for (const auto& x : xs) require_state(x, cfg);
    const std::uint64_t steps = step_count(T, mc.dt);
    const std::size_t M = mc.samples;
    const double eps2 = eps * eps;
    const auto occ = parallel_map(M * xs.size(), mc.threads, [&](std::size_t idx) {
        PathSimulator sim(cfg, noise, mc.dt, WienerPath{mc.seed, stream_id(idx), mc.dt, 1}, false);
        sim.reset(xs[idx / M].amplitudes());
        std::uint64_t inside = 0;
        for (std::uint64_t k = 0; k < steps; ++k) {
            if (sim.h_norm_sq() < eps2) ++inside;
            sim.advance();
        }
        return static_cast<double>(inside) / static_cast<double>(steps);
    });
    double worst = INFINITY, worst_se = 0.0;
    nlohmann::json per_x = nlohmann::json::array(), per_x_se = nlohmann::json::array();
    for (std::size_t a = 0; a < xs.size(); ++a) {
        const SampleStats s = sample_stats(std::span<const double>(occ).subspan(a * M, M));
        per_x.push_back(s.mean);
        per_x_se.push_back(s.std_error);
        if (s.mean < worst) {
            worst = s.mean;
            worst_se = s.std_error;
        }
    }
    ProbeReport rep;
    rep.name = "occupation";
    rep.criterion = "min_x (1/T) int_0^T P(|u^x(s)| < eps) ds - 3 stderr > 0";
    rep.inputs = mc_inputs(mc);
    rep.inputs["eps"] = eps;
    rep.inputs["T"] = T;
    rep.inputs["x_count"] = xs.size();
    rep.estimates = {{"occupation", worst}, {"per_x", per_x}};
    rep.stderrs = {{"occupation", worst_se}, {"per_x", per_x_se}};
    rep.bounds = {{"occupation_lower", 0.0}};
    rep.verdict = worst - 3.0 * worst_se > 0.0 ? Verdict::pass : Verdict::fail;
    return rep;
}

// ---------------------------------------------------------------------------

ProbeReport e_property_probe(const std::vector<TestFunction>& dictionary, const ShellState& x,
                             const EPropertyOptions& options, const ModelConfig& cfg, const NoiseConfig& noise,
                             const McOptions& mc) {
    validate_mc(mc, cfg, noise);
    require_state(x, cfg);
    const std::size_t m = options.modes;
    if (m == 0 || m > x.size()) throw DimensionError("projection size out of range");
    if (dictionary.empty()) throw PreconditionError("dictionary is empty");
    for (const auto& f : dictionary) {
        if (f.dim() != 2 * m) throw DimensionError("dictionary does not match the projection");
    }
    if (options.deltas.empty() || options.directions == 0) throw PreconditionError("need deltas and directions");
    const auto ro = readouts(options.t_grid, mc.dt);
    const std::size_t nd = options.deltas.size(), ndir = options.directions, nt = ro.size();
    const std::size_t nf = dictionary.size(), M = mc.samples;
    const auto n = static_cast<std::size_t>(cfg.N);
    const std::vector<ShellState> dirs = sphere_points(cfg, 1.0, ndir, mc.seed ^ 0xD1CEu);
    const std::size_t per_sample = nd * ndir * nt * nf;

    // Each perturbed path is carried as its difference from the base path,
    // delta <- e delta + phi (B(u,delta) + B(delta,u) + B(delta,delta)), which
    // is exact for common additive noise and free of cancellation.
    const auto rows = parallel_map(M, mc.threads, [&](std::size_t i) {
        PathSimulator sim(cfg, noise, mc.dt, WienerPath{mc.seed, stream_id(i), mc.dt, 1}, false);
        sim.reset(x.amplitudes());
        ShellStepper diff(cfg, NoiseConfig::off(cfg.N), mc.dt);
        const std::size_t paths = nd * ndir;
        std::vector<std::vector<cplx>> deltas(paths, std::vector<cplx>(n));
        std::vector<char> active(paths, 1);
        for (std::size_t a = 0; a < nd; ++a) {
            for (std::size_t d = 0; d < ndir; ++d) {
                for (std::size_t k = 0; k < n; ++k) deltas[a * ndir + d][k] = options.deltas[a] * dirs[d].amplitudes()[k];
            }
        }
        std::vector<cplx> lin(n), shifted(n);
        std::vector<double> p(2 * m), q(2 * m), base_vals(nf);
        std::vector<double> out(per_sample, 0.0);
        std::size_t j = 0;
        for (std::uint64_t k = 0;; ++k) {
            while (j < nt && ro[j] == k) {
                project_into(sim.state().first(m), p);
                for (std::size_t f = 0; f < nf; ++f) base_vals[f] = dictionary[f].value(p);
                for (std::size_t path = 0; path < paths; ++path) {
                    if (!active[path]) continue;
                    for (std::size_t c = 0; c < m; ++c) shifted[c] = sim.state()[c] + deltas[path][c];
                    project_into(std::span<const cplx>(shifted).first(m), q);
                    for (std::size_t f = 0; f < nf; ++f) {
                        out[(path * nt + j) * nf + f] = dictionary[f].value(q) - base_vals[f];
                    }
                }
                ++j;
            }
            if (j == nt) break;
            for (std::size_t path = 0; path < paths; ++path) {
                if (!active[path]) continue;
                diff.bilinear().apply_linearized(sim.state(), deltas[path], lin);
                diff.step(deltas[path], nullptr, lin);
                // Below 1e-100 the perturbation no longer changes any bounded
                // Lipschitz readout at double precision.
                if (h_norm_sq(deltas[path]) < 1e-200) active[path] = 0;
            }
            sim.advance();
        }
        return out;
    });

    ProbeReport rep;
    rep.name = "e_property";
    rep.criterion = "for each halving: sup(delta/2) - 3 se <= " + std::to_string(options.ratio_bound) +
                    " (sup(delta) + 3 se), sup over dictionary, directions and t <= T_max";
    std::vector<double> sup(nd, 0.0), sup_se(nd, 0.0);
    nlohmann::json where = nlohmann::json::array();
    std::vector<double> col(M);
    for (std::size_t a = 0; a < nd; ++a) {
        nlohmann::json arg = {{"direction", 0}, {"t", options.t_grid[0]}, {"function", 0}};
        for (std::size_t d = 0; d < ndir; ++d) {
            const std::size_t path = a * ndir + d;
            for (std::size_t jj = 0; jj < nt; ++jj) {
                for (std::size_t f = 0; f < nf; ++f) {
                    for (std::size_t i = 0; i < M; ++i) col[i] = rows[i][(path * nt + jj) * nf + f];
                    const SampleStats s = sample_stats(col);
                    if (std::abs(s.mean) > sup[a]) {
                        sup[a] = std::abs(s.mean);
                        sup_se[a] = s.std_error;
                        arg = {{"direction", d}, {"t", options.t_grid[jj]}, {"function", f}};
                    }
                }
            }
        }
        where.push_back(arg);
    }
    bool ok = true;
    nlohmann::json ratios = nlohmann::json::array();
    for (std::size_t a = 0; a + 1 < nd; ++a) {
        const double lhs = sup[a + 1] - 3.0 * sup_se[a + 1];
        const double rhs = options.ratio_bound * (sup[a] + 3.0 * sup_se[a]);
        ratios.push_back(sup[a] > 0.0 ? sup[a + 1] / sup[a] : 0.0);
        if (lhs > rhs) ok = false;
    }
    rep.inputs = mc_inputs(mc);
    rep.inputs["deltas"] = options.deltas;
    rep.inputs["t_grid"] = options.t_grid;
    rep.inputs["probed_horizon"] = options.t_grid.back();
    rep.inputs["directions"] = ndir;
    rep.inputs["modes"] = m;
    rep.inputs["dictionary_size"] = nf;
    rep.inputs["dictionary_version"] = std::string(dictionary_version);
    rep.estimates = {{"sup", sup}, {"ratio", ratios}, {"argmax", where}};
    rep.stderrs = {{"sup", sup_se}};
    rep.bounds = {{"ratio", options.ratio_bound}};
    for (std::size_t a = 0; a + 1 < nd; ++a) {
        if (std::abs(options.deltas[a + 1] - 0.5 * options.deltas[a]) > 1e-12 * options.deltas[a]) {
            rep.warnings.push_back("delta grid is not a sequence of halvings");
            break;
        }
    }
    rep.verdict = ok ? Verdict::pass : Verdict::fail;
    return rep;
}

// ---------------------------------------------------------------------------

namespace {

/// Per-path dictionary sums: for each horizon, the Cesaro-window mean and
/// the terminal value of every test function.
struct EnsembleMoments {
    std::vector<std::vector<double>> cesaro;    // [horizon][f]
    std::vector<std::vector<double>> terminal;  // [horizon][f]
};

EnsembleMoments ensemble_moments(const ShellState& x, std::uint64_t seed, const StabilityOptions& opt,
                                 const std::vector<TestFunction>& dict, const ModelConfig& cfg,
                                 const NoiseConfig& noise, const McOptions& mc) {
    const std::size_t nt = opt.t_grid.size(), nf = dict.size(), M = mc.samples, m = opt.modes;
    const auto ro = readouts(opt.t_grid, mc.dt);
    const std::uint64_t every = std::max<std::uint64_t>(1, static_cast<std::uint64_t>(std::llround(opt.sample_every / mc.dt)));
    std::vector<std::uint64_t> window_start(nt);
    for (std::size_t j = 0; j < nt; ++j) {
        window_start[j] = static_cast<std::uint64_t>(std::ceil(opt.burn_in_fraction * static_cast<double>(ro[j])));
    }

    const auto rows = parallel_map(M, mc.threads, [&](std::size_t i) {
        PathSimulator sim(cfg, noise, mc.dt, WienerPath{seed, stream_id(i), mc.dt, 1}, false);
        sim.reset(x.amplitudes());
        std::vector<double> sums(nt * nf, 0.0), counts(nt, 0.0), term(nt * nf, 0.0), p(2 * m), vals(nf);
        const std::uint64_t last = ro.back();
        std::size_t jt = 0;
        for (std::uint64_t k = 0;; ++k) {
            const bool sample = k % every == 0;
            const bool readout = jt < nt && ro[jt] == k;
            if (sample || readout) {
                project_into(sim.state().first(m), p);
                for (std::size_t f = 0; f < nf; ++f) vals[f] = dict[f].value(p);
            }
            if (sample) {
                for (std::size_t j = 0; j < nt; ++j) {
                    if (k < window_start[j] || k > ro[j]) continue;
                    counts[j] += 1.0;
                    for (std::size_t f = 0; f < nf; ++f) sums[j * nf + f] += vals[f];
                }
            }
            while (jt < nt && ro[jt] == k) {
                for (std::size_t f = 0; f < nf; ++f) term[jt * nf + f] = vals[f];
                ++jt;
            }
            if (k == last) break;
            sim.advance();
        }
        std::vector<double> out(2 * nt * nf);
        for (std::size_t j = 0; j < nt; ++j) {
            for (std::size_t f = 0; f < nf; ++f) {
                out[j * nf + f] = counts[j] > 0 ? sums[j * nf + f] / counts[j] : 0.0;
                out[(nt + j) * nf + f] = term[j * nf + f];
            }
        }
        return out;
    });

    EnsembleMoments em;
    em.cesaro.assign(nt, std::vector<double>(nf));
    em.terminal.assign(nt, std::vector<double>(nf));
    std::vector<double> col(M);
    for (std::size_t j = 0; j < nt; ++j) {
        for (std::size_t f = 0; f < nf; ++f) {
            for (std::size_t i = 0; i < M; ++i) col[i] = rows[i][j * nf + f];
            em.cesaro[j][f] = pairwise_sum(col) / static_cast<double>(M);
            for (std::size_t i = 0; i < M; ++i) col[i] = rows[i][(nt + j) * nf + f];
            em.terminal[j][f] = pairwise_sum(col) / static_cast<double>(M);
        }
    }
    return em;
}

double moment_distance(const std::vector<double>& a, const std::vector<double>& b) {
    double d = 0.0;
    for (std::size_t f = 0; f < a.size(); ++f) d = std::max(d, std::abs(a[f] - b[f]));
    return d;
}

}  // namespace

ProbeReport stability_experiment(const StabilityOptions& opt, const ModelConfig& cfg, const NoiseConfig& noise,
                                 const McOptions& mc) {
    validate_mc(mc, cfg, noise);
    require_state(opt.x1, cfg);
    require_state(opt.x2, cfg);
    if (opt.modes == 0 || opt.modes > static_cast<std::size_t>(cfg.N)) throw DimensionError("projection size out of range");
    if (!(opt.burn_in_fraction >= 0.0 && opt.burn_in_fraction < 1.0)) {
        throw PreconditionError("burn-in fraction must lie in [0, 1)");
    }
    if (!(opt.sample_every > 0.0)) throw PreconditionError("Cesaro sampling interval must be positive");
    (void)readouts(opt.t_grid, mc.dt);

    ProbeReport rep;
    rep.name = "stability";
    rep.criterion = "Cesaro distance d_j between x1 and x2 ensembles: d_{j+1} <= d_j + 2 b_{j+1} and "
                    "d_last <= 2 b_last, b = same-x1 different-seed distance";
    try {
        const double C = operator_norm_constant(cfg, 8, 0);
        if (!check_noise_condition(noise, cfg, C).satisfied) rep.warnings.push_back("noise condition not satisfied");
    } catch (const ConfigError& e) {
        rep.warnings.push_back(e.what());
    }

    const auto dict = standard_dictionary(opt.modes);
    const EnsembleMoments A = ensemble_moments(opt.x1, opt.seed_a, opt, dict, cfg, noise, mc);
    const EnsembleMoments B = ensemble_moments(opt.x2, opt.seed_b, opt, dict, cfg, noise, mc);
    const EnsembleMoments C = ensemble_moments(opt.x1, opt.seed_baseline, opt, dict, cfg, noise, mc);

    const std::size_t nt = opt.t_grid.size();
    std::vector<double> d(nt), b(nt), dt_term(nt), bt_term(nt);
    for (std::size_t j = 0; j < nt; ++j) {
        d[j] = moment_distance(A.cesaro[j], B.cesaro[j]);
        b[j] = moment_distance(A.cesaro[j], C.cesaro[j]);
        dt_term[j] = moment_distance(A.terminal[j], B.terminal[j]);
        bt_term[j] = moment_distance(A.terminal[j], C.terminal[j]);
    }
    bool ok = d.back() <= 2.0 * b.back();
    for (std::size_t j = 0; j + 1 < nt; ++j) {
        if (d[j + 1] > d[j] + 2.0 * b[j + 1]) ok = false;
    }

    rep.inputs = mc_inputs(mc);
    rep.inputs["t_grid"] = opt.t_grid;
    rep.inputs["x1_norm"] = h_norm(opt.x1);
    rep.inputs["x2_norm"] = h_norm(opt.x2);
    rep.inputs["seeds"] = {opt.seed_a, opt.seed_b, opt.seed_baseline};
    rep.inputs["modes"] = opt.modes;
    rep.inputs["burn_in_fraction"] = opt.burn_in_fraction;
    rep.inputs["sample_every"] = opt.sample_every;
    rep.inputs["dictionary_version"] = std::string(dictionary_version);
    rep.estimates = {{"cesaro_distance", d}, {"terminal_distance", dt_term}};
    rep.bounds = {{"cesaro_baseline", b}, {"terminal_baseline", bt_term}, {"final_factor", 2.0}};
    rep.verdict = ok ? Verdict::pass : Verdict::fail;
    return rep;
}

}  // namespace shellflow
