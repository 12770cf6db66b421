#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "mvsf/corrector.hpp"
#include "mvsf/engine.hpp"
#include "mvsf/ergodic.hpp"
#include "mvsf/errors.hpp"
#include "mvsf/measure.hpp"
#include "mvsf/model.hpp"
#include "mvsf/parallel.hpp"
#include "mvsf/rng.hpp"
#include "mvsf/stats.hpp"

namespace mvsf {

// ---------------------------------------------------------------------------
// Rate reports and log-log fitting
// ---------------------------------------------------------------------------

struct RatePoint {
    double epsilon = 0.0;
    double value = 0.0;   // error estimate at this epsilon
    double stderr_ = 0.0;
    int replicas = 0;
    double fourth_moment = 0.0; // sup over snapshots, slow component
};

struct SlopeFit {
    double slope = 0.0;
    double intercept = 0.0;
    double ci_lo = 0.0;
    double ci_hi = 0.0;
};

struct RateReport {
    std::vector<RatePoint> points;            // decreasing epsilon
    std::vector<std::vector<double>> raw;     // per-point per-replica errors
    SlopeFit fit;
    std::uint64_t config_fingerprint = 0;
    std::map<std::string, SlopeFit> per_statistic; // weak-rate breakdown
    double anchor_value = 0.0;  // E(Zbar_T^2) at the largest epsilon cell
    double anchor_stderr = 0.0;

    void check_invariants() const {
        if (points.size() < 3) throw DegenerateFit("rate grid needs >= 3 points");
        for (std::size_t i = 0; i + 1 < points.size(); ++i)
            if (points[i + 1].epsilon >= points[i].epsilon)
                throw DegenerateFit("epsilon grid must be strictly decreasing");
        for (const auto& p : points)
            if (!(p.value > 0.0)) throw NonPositiveValue("rate errors must be positive");
    }
};

/// Weighted least squares of log(value) on log(epsilon) with a parametric
/// bootstrap 95% interval on the slope.
inline SlopeFit fit_loglog_slope(const std::vector<RatePoint>& points,
                                 int bootstrap = 400,
                                 std::uint64_t seed = 0xb00757ull) {
    if (points.size() < 3) throw DegenerateFit("fit_loglog_slope needs >= 3 points");
    std::vector<double> lx, ly, w, se_log;
    for (const auto& p : points) {
        if (!(p.value > 0.0))
            throw NonPositiveValue("fit_loglog_slope: value " + std::to_string(p.value));
        lx.push_back(std::log(p.epsilon));
        ly.push_back(std::log(p.value));
        const double se = std::max(p.stderr_ / p.value, 1e-9);
        se_log.push_back(se);
        w.push_back(1.0 / (se * se));
    }
    const LineFit base = linear_fit(lx, ly, w);
    SlopeFit out;
    out.slope = base.slope;
    out.intercept = base.intercept;

    NoisePlan plan{seed, 0, 1.0};
    std::vector<double> slopes;
    slopes.reserve(bootstrap);
    for (int b = 0; b < bootstrap; ++b) {
        std::vector<double> yb(ly);
        for (std::size_t i = 0; i < yb.size(); ++i)
            yb[i] += se_log[i] * plan.gaussian(b, NoiseTag::Probe, i);
        slopes.push_back(linear_fit(lx, yb, w).slope);
    }
    std::sort(slopes.begin(), slopes.end());
    const auto lo = static_cast<std::size_t>(0.025 * (bootstrap - 1));
    const auto hi = static_cast<std::size_t>(0.975 * (bootstrap - 1));
    out.ci_lo = slopes[lo];
    out.ci_hi = slopes[hi];
    return out;
}

// ---------------------------------------------------------------------------
// Shared run setup
// ---------------------------------------------------------------------------

struct InitSpec {
    double mean = 0.0;
    double stddev = 1.0;
};

struct ExperimentGrid {
    std::vector<double> epsilon_grid; // strictly decreasing
    int N = 1000;
    double T = 1.0;
    double h = 0.05; // micro step is h * eps^2
    int replicas = 8;
    std::uint64_t master_seed = 1;
    int workers = 1;
    InitSpec init_x, init_y;
    std::vector<double> snapshot_times; // empty -> uniform 11 points

    std::vector<double> snapshots() const {
        return snapshot_times.empty() ? default_snapshot_times(T) : snapshot_times;
    }
    std::uint64_t cell_salt(int replica, int eps_index) const {
        return static_cast<std::uint64_t>(replica) * 131 + eps_index + 1;
    }
};

inline ParticleCloud sample_init(int n, int dim, const NoisePlan& plan, NoiseTag tag,
                                 const InitSpec& spec) {
    return ParticleCloud::gaussian(n, dim, plan, tag, spec.mean, spec.stddev);
}

// ---------------------------------------------------------------------------
// Strong averaging rate
// ---------------------------------------------------------------------------

/// Coupled slow-fast vs averaged runs sharing W1 streams; the per-epsilon
/// error is sup over snapshots of the cloud-average squared gap, the fitted
/// quantity is its square root (so the expected slope is one).
inline RateReport run_strong_rate(const ModelSpec& model, const AveragedCoefficients& avg,
                                  const ExperimentGrid& grid) {
    const int ne = static_cast<int>(grid.epsilon_grid.size());
    const int nr = grid.replicas;
    std::vector<std::vector<double>> errs(ne, std::vector<double>(nr, 0.0));
    std::vector<std::vector<double>> moments(ne, std::vector<double>(nr, 0.0));
    const auto snaps = grid.snapshots();

    parallel_for(static_cast<std::size_t>(ne) * nr, grid.workers, [&](std::size_t cell) {
        const int e = static_cast<int>(cell) / nr;
        const int r = static_cast<int>(cell) % nr;
        const double eps = grid.epsilon_grid[e];
        NoisePlan plan{grid.master_seed, grid.cell_salt(r, e), grid.h * eps * eps};
        const ParticleCloud X0 = sample_init(grid.N, model.d1, plan, NoiseTag::InitX, grid.init_x);
        const ParticleCloud Y0 = sample_init(grid.N, model.d2, plan, NoiseTag::InitY, grid.init_y);
        const auto sf = simulate_slow_fast(model, eps, X0, Y0, grid.T, plan, snaps);
        const auto av = simulate_averaged(avg, X0, grid.T, plan, snaps, model.d1);
        double sup = 0.0, m4 = 0.0;
        for (std::size_t k = 0; k < sf.times.size(); ++k) {
            const double gap =
                (sf.X[k].samples - av.clouds[k].samples).array().square().rowwise().sum().mean();
            sup = std::max(sup, gap);
            m4 = std::max(m4, sf.stats[k].fourth_moment_x);
        }
        errs[e][r] = sup;
        moments[e][r] = m4;
    });

    RateReport rep;
    for (int e = 0; e < ne; ++e) {
        const MeanStderr ms = mean_stderr(errs[e]);
        if (ms.mean > 0.0 && ms.stderr_ / ms.mean > 0.5)
            throw InsufficientReplicas("strong rate: stderr/mean > 0.5 at eps=" +
                                       std::to_string(grid.epsilon_grid[e]));
        RatePoint p;
        p.epsilon = grid.epsilon_grid[e];
        p.value = std::sqrt(ms.mean);                      // RMS sup-error
        p.stderr_ = ms.mean > 0 ? ms.stderr_ / (2.0 * std::sqrt(ms.mean)) : 0.0;
        p.replicas = nr;
        p.fourth_moment = *std::max_element(moments[e].begin(), moments[e].end());
        rep.points.push_back(p);
        rep.raw.push_back(errs[e]);
    }
    rep.check_invariants();
    rep.fit = fit_loglog_slope(rep.points);
    return rep;
}

// ---------------------------------------------------------------------------
// Weak CLT rate
// ---------------------------------------------------------------------------

struct TestStatistic {
    std::string name;
    std::function<double(const ParticleCloud&)> phi;
};

inline std::vector<TestStatistic> builtin_statistics() {
    return {
        {"tanh_mean",
         [](const ParticleCloud& c) { return c.samples.col(0).array().tanh().mean(); }},
        {"second_moment",
         [](const ParticleCloud& c) {
             return c.samples.array().square().rowwise().sum().mean();
         }},
        {"sin_mean",
         [](const ParticleCloud& c) { return std::sin(c.samples.col(0).mean()); }},
    };
}

struct WeakRateOptions {
    double clt_dt = 1e-3;   // micro step of the limit run (epsilon-free)
    int zbar_replicas = 0;  // 0 -> twice the grid replicas
    bool antithetic = true; // pair replicas with sign-flipped streams
};

namespace detail {

// Collapse antithetic partners into pair averages before the stderr; pairs
// are the independent units when antithetic streams are on.
inline std::vector<double> pair_averages(const std::vector<double>& vals, bool paired) {
    if (!paired || vals.size() < 2) return vals;
    std::vector<double> out;
    out.reserve(vals.size() / 2);
    for (std::size_t k = 0; k + 1 < vals.size(); k += 2)
        out.push_back(0.5 * (vals[k] + vals[k + 1]));
    if (vals.size() % 2) out.push_back(vals.back());
    return out;
}

} // namespace detail

/// Law-level comparison of the deviation cloud Z^eps_T against the limit
/// cloud Zbar_T under each test statistic. The limit run is epsilon-free and
/// uses independent streams; the pooled per-epsilon error is the mean
/// absolute statistic gap, fitted against epsilon (expected slope one).
/// Antithetic pairing cancels the odd noise component of the statistic
/// estimates; the pair count is what enters the standard errors.
inline RateReport run_weak_clt_rate(const ModelSpec& model, const AveragedCoefficients& avg,
                                    const LimitCoefficients& lim,
                                    const std::vector<TestStatistic>& stats,
                                    const ExperimentGrid& grid,
                                    const WeakRateOptions& opt = {}) {
    if (!model.clt_compatible)
        throw NotCLTCompatible("run_weak_clt_rate requires nu-free G");
    const int ne = static_cast<int>(grid.epsilon_grid.size());
    const int nr = grid.replicas;
    const int nb = opt.zbar_replicas > 0 ? opt.zbar_replicas : 2 * nr;
    const int ns = static_cast<int>(stats.size());
    const double zdt = opt.clt_dt;
    const bool paired = opt.antithetic && nr % 2 == 0 && nb % 2 == 0;

    auto cell_plan = [&](std::uint64_t salt, int r, double dt) {
        NoisePlan plan{grid.master_seed, salt, dt};
        if (paired && (r & 1)) plan = plan.antithetic();
        return plan;
    };

    // phi values: [statistic][eps][replica] for Z^eps, [statistic][replica] for Zbar
    std::vector<std::vector<std::vector<double>>> phi_eps(
        ns, std::vector<std::vector<double>>(ne, std::vector<double>(nr, 0.0)));
    std::vector<std::vector<double>> phi_bar(ns, std::vector<double>(nb, 0.0));
    std::vector<double> zbar_second(nb, 0.0);

    // limit-cloud cells first (salt = pair index * 131)
    parallel_for(static_cast<std::size_t>(nb), grid.workers, [&](std::size_t r) {
        const std::uint64_t unit = paired ? r / 2 : r;
        const NoisePlan plan = cell_plan(unit * 131, static_cast<int>(r), zdt);
        const ParticleCloud X0 = sample_init(grid.N, model.d1, plan, NoiseTag::InitX, grid.init_x);
        const auto traj = simulate_limit_clt(avg, lim, X0, grid.T, plan, {grid.T});
        const ParticleCloud& z = traj.clouds.back();
        for (int s = 0; s < ns; ++s) phi_bar[s][r] = stats[s].phi(z);
        zbar_second[r] = empirical_second_moment(z);
    });

    parallel_for(static_cast<std::size_t>(ne) * nr, grid.workers, [&](std::size_t cell) {
        const int e = static_cast<int>(cell) / nr;
        const int r = static_cast<int>(cell) % nr;
        const double eps = grid.epsilon_grid[e];
        const int unit = paired ? r / 2 : r;
        const NoisePlan plan = cell_plan(grid.cell_salt(unit, e), r, grid.h * eps * eps);
        const ParticleCloud X0 = sample_init(grid.N, model.d1, plan, NoiseTag::InitX, grid.init_x);
        const ParticleCloud Y0 = sample_init(grid.N, model.d2, plan, NoiseTag::InitY, grid.init_y);
        const auto sf = simulate_slow_fast(model, eps, X0, Y0, grid.T, plan, {grid.T});
        const auto av = simulate_averaged(avg, X0, grid.T, plan, {grid.T}, model.d1);
        const auto dev = deviation_process(sf, av, eps);
        const ParticleCloud& z = dev.clouds.back();
        for (int s = 0; s < ns; ++s) phi_eps[s][e][r] = stats[s].phi(z);
    });

    RateReport rep;
    const MeanStderr anchor = mean_stderr(detail::pair_averages(zbar_second, paired));
    rep.anchor_value = anchor.mean;
    rep.anchor_stderr = anchor.stderr_;

    std::vector<std::vector<RatePoint>> stat_points(ns);
    for (int e = 0; e < ne; ++e) {
        double pooled = 0.0, pooled_var = 0.0;
        std::vector<double> raw_row;
        for (int s = 0; s < ns; ++s) {
            const MeanStderr a = mean_stderr(detail::pair_averages(phi_eps[s][e], paired));
            const MeanStderr b = mean_stderr(detail::pair_averages(phi_bar[s], paired));
            const double gap = std::abs(a.mean - b.mean);
            const double se = std::hypot(a.stderr_, b.stderr_);
            pooled += gap / ns;
            pooled_var += se * se / (ns * ns);
            stat_points[s].push_back({grid.epsilon_grid[e], gap, se, nr, 0.0});
            raw_row.push_back(gap);
        }
        RatePoint p;
        p.epsilon = grid.epsilon_grid[e];
        p.value = pooled;
        p.stderr_ = std::sqrt(pooled_var);
        p.replicas = nr;
        rep.points.push_back(p);
        rep.raw.push_back(raw_row);
        if (p.value > 0.0 && p.stderr_ / p.value > 0.5)
            throw InsufficientReplicas("weak rate: stderr/mean > 0.5 at eps=" +
                                       std::to_string(p.epsilon));
    }
    rep.check_invariants();
    rep.fit = fit_loglog_slope(rep.points);
    for (int s = 0; s < ns; ++s) {
        bool positive = true;
        for (const auto& p : stat_points[s]) positive = positive && p.value > 0.0;
        if (positive) rep.per_statistic[stats[s].name] = fit_loglog_slope(stat_points[s]);
    }
    return rep;
}

/// Moments of the benchmark limit equation, integrated independently of the
/// engine (fourth-order Runge-Kutta on the closed moment system); used as the
/// anchor oracle for E(Zbar_T^2).
struct LimitMomentOracle {
    double a = 0.0;       // dx Fbar
    double abar = 0.0;    // d_mu Fbar (constant kernel)
    double drift0 = 0.0;  // constant drift: cbar_dyPhi + cbarbar_dnuPhi
    double sigma = 0.0;   // Sigma (variance injection)

    // returns (mean, second moment) at time T
    std::pair<double, double> at(double T, double dt = 1e-4) const {
        double m = 0.0, s = 0.0, t = 0.0;
        auto dm = [&](double mm) { return (a + abar) * mm + drift0; };
        auto ds = [&](double mm, double ss) {
            return 2.0 * a * ss + 2.0 * (abar * mm + drift0) * mm + sigma;
        };
        while (t < T - 1e-12) {
            const double step = std::min(dt, T - t);
            const double k1m = dm(m), k1s = ds(m, s);
            const double k2m = dm(m + 0.5 * step * k1m),
                         k2s = ds(m + 0.5 * step * k1m, s + 0.5 * step * k1s);
            const double k3m = dm(m + 0.5 * step * k2m),
                         k3s = ds(m + 0.5 * step * k2m, s + 0.5 * step * k2s);
            const double k4m = dm(m + step * k3m), k4s = ds(m + step * k3m, s + step * k3s);
            m += step * (k1m + 2 * k2m + 2 * k3m + k4m) / 6.0;
            s += step * (k1s + 2 * k2s + 2 * k3s + k4s) / 6.0;
            t += step;
        }
        return {m, s};
    }

    static LimitMomentOracle for_benchmark(const LinearBenchmark& bench) {
        const auto [p, q] = benchmark_corrector(bench);
        LimitMomentOracle o;
        o.a = bench.A;
        o.abar = bench.Abar + (bench.B + bench.Bbar) * bench.b1 / (bench.kappa - bench.b2);
        o.drift0 = bench.c0 * (p + q);
        o.sigma = p * p * bench.s2 * bench.s2;
        return o;
    }
};

// ---------------------------------------------------------------------------
// Fluctuation estimate
// ---------------------------------------------------------------------------

/// Integrates the centered drift along the coupled run (trapezoid on the
/// micro grid) and fits the cloud-average RMS of the integral against
/// epsilon; expected slope one.
inline RateReport run_fluctuation_estimate(const ModelSpec& model, const FbarFn& fbar,
                                           const ExperimentGrid& grid) {
    const int ne = static_cast<int>(grid.epsilon_grid.size());
    const int nr = grid.replicas;
    std::vector<std::vector<double>> errs(ne, std::vector<double>(nr, 0.0));

    parallel_for(static_cast<std::size_t>(ne) * nr, grid.workers, [&](std::size_t cell) {
        const int e = static_cast<int>(cell) / nr;
        const int r = static_cast<int>(cell) % nr;
        const double eps = grid.epsilon_grid[e];
        const double dt = grid.h * eps * eps;
        NoisePlan plan{grid.master_seed, grid.cell_salt(r, e), dt};

        MultiscaleEnsemble ens;
        ens.model = &model;
        ens.epsilon = eps;
        ens.X = sample_init(grid.N, model.d1, plan, NoiseTag::InitX, grid.init_x);
        ens.Y = sample_init(grid.N, model.d2, plan, NoiseTag::InitY, grid.init_y);
        ens.plan = plan;

        const auto steps = static_cast<std::uint64_t>(std::llround(grid.T / dt));
        Eigen::MatrixXd integral = Eigen::MatrixXd::Zero(grid.N, model.d1);
        for (std::uint64_t s = 0; s <= steps; ++s) {
            const double w = (s == 0 || s == steps) ? 0.5 * dt : dt;
            const MeasureView mu = MeasureView::of(ens.X);
            const MeasureView nu = MeasureView::of(ens.Y);
            for (int i = 0; i < grid.N; ++i) {
                const Vec df = model.F(ens.X.point(i), mu, ens.Y.point(i), nu) -
                               fbar(ens.X.point(i), mu);
                integral.row(i) += w * df.transpose();
            }
            if (s == steps) break;
            ens = step_slow_fast(std::move(ens));
        }
        errs[e][r] = integral.array().square().rowwise().sum().mean();
    });

    RateReport rep;
    for (int e = 0; e < ne; ++e) {
        const MeanStderr ms = mean_stderr(errs[e]);
        RatePoint p;
        p.epsilon = grid.epsilon_grid[e];
        p.value = std::sqrt(ms.mean);
        p.stderr_ = ms.mean > 0 ? ms.stderr_ / (2.0 * std::sqrt(ms.mean)) : 0.0;
        p.replicas = nr;
        rep.points.push_back(p);
        rep.raw.push_back(errs[e]);
    }
    rep.check_invariants();
    rep.fit = fit_loglog_slope(rep.points);
    return rep;
}

// ---------------------------------------------------------------------------
// Ergodic decay
// ---------------------------------------------------------------------------

struct DecayReport {
    std::vector<double> times;
    std::vector<double> w2_law;   // W2(nu_t, zeta_hat)
    double noise_floor = 0.0;     // statistical floor of the law-level curve
    double law_rate = 0.0;        // -slope of log W2 above the floor
    double law_r2 = 0.0;
    double coupling_rate = 0.0;   // synchronous-coupling estimate
    double coupling_r2 = 0.0;
};

/// Law-level decay curve toward the invariant estimate plus the
/// synchronous-coupling rate. The floor is measured by pushing the invariant
/// cloud forward and taking its self-distance; the log-linear fit uses only
/// points above twice the floor.
inline DecayReport run_ergodic_decay(const ModelSpec& model, const ParticleCloud& mu,
                                     const ParticleCloud& nu0, double T,
                                     const NoisePlan& plan, const InvariantConfig& icfg = {},
                                     int grid_points = 16) {
    const InvariantEstimate zeta = estimate_invariant_measure(model, mu, plan, icfg);

    std::vector<double> grid;
    for (int k = 1; k <= grid_points; ++k) grid.push_back(T * k / grid_points);
    NoisePlan run_plan = plan.with_dt(icfg.dt).with_salt(plan.run_salt + 777);
    const auto traj = simulate_frozen(model, mu, nu0, T, run_plan, grid);

    DecayReport rep;
    // floor: evolve the invariant cloud one short leg and take the self-distance
    NoisePlan floor_plan = plan.with_dt(icfg.dt).with_salt(plan.run_salt + 778);
    const auto pushed = simulate_frozen(model, mu, zeta.zeta, std::max(0.5, 10 * icfg.dt),
                                        floor_plan, {std::max(0.5, 10 * icfg.dt)});
    rep.noise_floor = wasserstein2(zeta.zeta, pushed.clouds.back()).value;

    std::vector<double> ts, logs;
    for (std::size_t k = 0; k < traj.times.size(); ++k) {
        const double w = wasserstein2(traj.clouds[k], zeta.zeta).value;
        rep.times.push_back(traj.times[k]);
        rep.w2_law.push_back(w);
        if (w > 2.0 * rep.noise_floor) {
            ts.push_back(traj.times[k]);
            logs.push_back(std::log(w));
        }
    }
    if (ts.size() >= 3) {
        const LineFit f = linear_fit(ts, logs);
        rep.law_rate = -f.slope;
        rep.law_r2 = f.r2;
    }

    // synchronous coupling between nu0 and a deterministically shifted copy;
    // the contraction rate does not depend on the starting pair
    ParticleCloud nu_b = nu0;
    const double shift = std::max(1.0, std::sqrt(empirical_second_moment(nu0)));
    nu_b.samples.array() += shift;
    const double t_couple = std::min(T, 3.0);
    const auto mix = estimate_mixing_rate(model, mu, nu0, nu_b, t_couple,
                                          plan.with_dt(icfg.dt).with_salt(plan.run_salt + 779));
    rep.coupling_rate = mix.lambda_hat;
    rep.coupling_r2 = mix.fit_quality;
    return rep;
}

// ---------------------------------------------------------------------------
// Generator consistency check (common-noise cross term included)
// ---------------------------------------------------------------------------

/// Cylinder test functional u(x, mu, y, nu) = u(x, y, s, r) with
/// s = int h1 dmu and r = int h2 dnu; analytic derivatives throughout.
struct ItoFunctional {
    std::string name;
    // pointwise derivatives of u(x, y, s, r)
    std::function<double(const Vec& x, const Vec& y, const Vec& s, const Vec& r)> u;
    std::function<Vec(const Vec&, const Vec&, const Vec&, const Vec&)> u_x;   // d1
    std::function<Vec(const Vec&, const Vec&, const Vec&, const Vec&)> u_y;   // d2
    std::function<Mat(const Vec&, const Vec&, const Vec&, const Vec&)> u_xx;  // d1 x d1
    std::function<Mat(const Vec&, const Vec&, const Vec&, const Vec&)> u_yy;  // d2 x d2
    std::function<Mat(const Vec&, const Vec&, const Vec&, const Vec&)> u_yx;  // d2 x d1
    std::function<Vec(const Vec&, const Vec&, const Vec&, const Vec&)> u_s;   // k1
    std::function<Vec(const Vec&, const Vec&, const Vec&, const Vec&)> u_r;   // k2
    // cylinder integrands
    int k1 = 1, k2 = 1;
    std::function<Vec(const Vec&)> h1;                 // R^d1 -> R^k1
    std::function<Mat(const Vec&)> grad_h1;            // k1 x d1
    std::function<Mat(const Vec&, int)> hess_h1;       // d1 x d1 per component
    std::function<Vec(const Vec&)> h2;                 // R^d2 -> R^k2
    std::function<Mat(const Vec&)> grad_h2;            // k2 x d2
    std::function<Mat(const Vec&, int)> hess_h2;       // d2 x d2 per component
};

/// Built-in 1d functionals: a bilinear x.y (sensitive to the cross term),
/// a measure-moment product, and a smooth bounded mix.
inline std::vector<ItoFunctional> builtin_ito_functionals() {
    auto zero1 = [](const Vec&) { return Vec::Zero(1); };
    auto zerog = [](const Vec&) { return Mat::Zero(1, 1); };
    auto zeroh = [](const Vec&, int) { return Mat::Zero(1, 1); };

    ItoFunctional bilinear;
    bilinear.name = "bilinear_xy";
    bilinear.u = [](const Vec& x, const Vec& y, const Vec&, const Vec&) {
        return x[0] * y[0];
    };
    bilinear.u_x = [](const Vec&, const Vec& y, const Vec&, const Vec&) {
        Vec v(1); v[0] = y[0]; return v;
    };
    bilinear.u_y = [](const Vec& x, const Vec&, const Vec&, const Vec&) {
        Vec v(1); v[0] = x[0]; return v;
    };
    bilinear.u_xx = [](const Vec&, const Vec&, const Vec&, const Vec&) {
        return Mat::Zero(1, 1);
    };
    bilinear.u_yy = bilinear.u_xx;
    bilinear.u_yx = [](const Vec&, const Vec&, const Vec&, const Vec&) {
        Mat m(1, 1); m(0, 0) = 1.0; return m;
    };
    bilinear.u_s = [](const Vec&, const Vec&, const Vec&, const Vec&) {
        return Vec::Zero(1);
    };
    bilinear.u_r = bilinear.u_s;
    bilinear.h1 = zero1;
    bilinear.grad_h1 = zerog;
    bilinear.hess_h1 = zeroh;
    bilinear.h2 = zero1;
    bilinear.grad_h2 = zerog;
    bilinear.hess_h2 = zeroh;

    ItoFunctional moments;
    moments.name = "moment_mix";
    // u = (int x^2 dmu) * (int y dnu)
    moments.u = [](const Vec&, const Vec&, const Vec& s, const Vec& r) {
        return s[0] * r[0];
    };
    moments.u_x = [](const Vec&, const Vec&, const Vec&, const Vec&) {
        return Vec::Zero(1);
    };
    moments.u_y = moments.u_x;
    moments.u_xx = [](const Vec&, const Vec&, const Vec&, const Vec&) {
        return Mat::Zero(1, 1);
    };
    moments.u_yy = moments.u_xx;
    moments.u_yx = moments.u_xx;
    moments.u_s = [](const Vec&, const Vec&, const Vec&, const Vec& r) {
        Vec v(1); v[0] = r[0]; return v;
    };
    moments.u_r = [](const Vec&, const Vec&, const Vec& s, const Vec&) {
        Vec v(1); v[0] = s[0]; return v;
    };
    moments.h1 = [](const Vec& x) { Vec v(1); v[0] = x[0] * x[0]; return v; };
    moments.grad_h1 = [](const Vec& x) { Mat m(1, 1); m(0, 0) = 2.0 * x[0]; return m; };
    moments.hess_h1 = [](const Vec&, int) { Mat m(1, 1); m(0, 0) = 2.0; return m; };
    moments.h2 = [](const Vec& y) { Vec v(1); v[0] = y[0]; return v; };
    moments.grad_h2 = [](const Vec&) { Mat m(1, 1); m(0, 0) = 1.0; return m; };
    moments.hess_h2 = zeroh;

    ItoFunctional smooth;
    smooth.name = "smooth_mix";
    // u = sin(x) cos(y) + tanh(int x dmu)
    smooth.u = [](const Vec& x, const Vec& y, const Vec& s, const Vec&) {
        return std::sin(x[0]) * std::cos(y[0]) + std::tanh(s[0]);
    };
    smooth.u_x = [](const Vec& x, const Vec& y, const Vec&, const Vec&) {
        Vec v(1); v[0] = std::cos(x[0]) * std::cos(y[0]); return v;
    };
    smooth.u_y = [](const Vec& x, const Vec& y, const Vec&, const Vec&) {
        Vec v(1); v[0] = -std::sin(x[0]) * std::sin(y[0]); return v;
    };
    smooth.u_xx = [](const Vec& x, const Vec& y, const Vec&, const Vec&) {
        Mat m(1, 1); m(0, 0) = -std::sin(x[0]) * std::cos(y[0]); return m;
    };
    smooth.u_yy = smooth.u_xx;
    smooth.u_yx = [](const Vec& x, const Vec& y, const Vec&, const Vec&) {
        Mat m(1, 1); m(0, 0) = -std::cos(x[0]) * std::sin(y[0]); return m;
    };
    smooth.u_s = [](const Vec&, const Vec&, const Vec& s, const Vec&) {
        Vec v(1);
        const double th = std::tanh(s[0]);
        v[0] = 1.0 - th * th;
        return v;
    };
    smooth.u_r = [](const Vec&, const Vec&, const Vec&, const Vec&) {
        return Vec::Zero(1);
    };
    smooth.h1 = [](const Vec& x) { Vec v(1); v[0] = x[0]; return v; };
    smooth.grad_h1 = [](const Vec&) { Mat m(1, 1); m(0, 0) = 1.0; return m; };
    smooth.hess_h1 = zeroh;
    smooth.h2 = zero1;
    smooth.grad_h2 = zerog;
    smooth.hess_h2 = zeroh;

    return {bilinear, moments, smooth};
}

struct ItoReport {
    double lhs = 0.0;       // E u(T) - E u(0)
    double rhs = 0.0;       // integrated generator terms
    double residual = 0.0;
    double stderr_ = 0.0;
    int replicas = 0;
};

struct ItoConfig {
    double T = 0.5;
    int N = 2000;
    int replicas = 16;
    double dt = 2.5e-3;
    std::uint64_t master_seed = 7;
    int workers = 1;
    bool include_cross_term = true;
    InitSpec init_x, init_y;
};

/// Compares the change of E u along a coupled run (eps = 1) against the time
/// integral of every generator term, including the common-noise cross term
/// and both measure-derivative integrals realized as cloud averages.
inline ItoReport run_ito_check(const ModelSpec& model, const ItoFunctional& u,
                               const ItoConfig& cfg) {
    std::vector<double> residuals(cfg.replicas, 0.0);

    parallel_for(static_cast<std::size_t>(cfg.replicas), cfg.workers, [&](std::size_t r) {
        NoisePlan plan{cfg.master_seed, r + 1, cfg.dt};
        MultiscaleEnsemble ens;
        ens.model = &model;
        ens.epsilon = 1.0;
        ens.X = sample_init(cfg.N, model.d1, plan, NoiseTag::InitX, cfg.init_x);
        ens.Y = sample_init(cfg.N, model.d2, plan, NoiseTag::InitY, cfg.init_y);
        ens.plan = plan;

        const auto steps = static_cast<std::uint64_t>(std::llround(cfg.T / cfg.dt));

        auto cloud_value = [&](const MultiscaleEnsemble& e) {
            Vec s = Vec::Zero(u.k1), rr = Vec::Zero(u.k2);
            for (int i = 0; i < cfg.N; ++i) {
                s += u.h1(e.X.point(i));
                rr += u.h2(e.Y.point(i));
            }
            s /= cfg.N;
            rr /= cfg.N;
            double acc = 0.0;
            for (int i = 0; i < cfg.N; ++i) acc += u.u(e.X.point(i), e.Y.point(i), s, rr);
            return acc / cfg.N;
        };

        const double u0 = cloud_value(ens);
        double rhs = 0.0;
        for (std::uint64_t s = 0; s <= steps; ++s) {
            const double w = (s == 0 || s == steps) ? 0.5 * cfg.dt : cfg.dt;
            const MeasureView mu = MeasureView::of(ens.X);
            const MeasureView nu = MeasureView::of(ens.Y);

            Vec sh = Vec::Zero(u.k1), rh = Vec::Zero(u.k2);
            for (int i = 0; i < cfg.N; ++i) {
                sh += u.h1(ens.X.point(i));
                rh += u.h2(ens.Y.point(i));
            }
            sh /= cfg.N;
            rh /= cfg.N;

            // cloud-level reductions of the measure-derivative integrands
            Vec drift_mu = Vec::Zero(u.k1), diff_mu = Vec::Zero(u.k1);
            Vec drift_nu = Vec::Zero(u.k2), diff_nu = Vec::Zero(u.k2);
            for (int j = 0; j < cfg.N; ++j) {
                const Vec xj = ens.X.point(j);
                const Vec yj = ens.Y.point(j);
                const Vec Fj = model.F(xj, mu, yj, nu);
                const Mat Gj = model.G(xj, mu, nu);
                const Vec bj = model.c(xj, mu, yj, nu) + model.b(mu, yj, nu);
                const Mat s1j = model.sigma1(mu, yj, nu);
                const Mat s2j = model.sigma2(mu, yj, nu);
                drift_mu += u.grad_h1(xj) * Fj;
                drift_nu += u.grad_h2(yj) * bj;
                const Mat gg = Gj * Gj.transpose();
                const Mat ss = s1j * s1j.transpose() + s2j * s2j.transpose();
                for (int l = 0; l < u.k1; ++l) diff_mu[l] += (gg * u.hess_h1(xj, l)).trace();
                for (int l = 0; l < u.k2; ++l) diff_nu[l] += (ss * u.hess_h2(yj, l)).trace();
            }
            drift_mu /= cfg.N;
            drift_nu /= cfg.N;
            diff_mu /= cfg.N;
            diff_nu /= cfg.N;

            double gen = 0.0;
            for (int i = 0; i < cfg.N; ++i) {
                const Vec xi = ens.X.point(i);
                const Vec yi = ens.Y.point(i);
                const Vec Fi = model.F(xi, mu, yi, nu);
                const Mat Gi = model.G(xi, mu, nu);
                const Vec bi = model.c(xi, mu, yi, nu) + model.b(mu, yi, nu);
                const Mat s1i = model.sigma1(mu, yi, nu);
                const Mat s2i = model.sigma2(mu, yi, nu);

                double g = Fi.dot(u.u_x(xi, yi, sh, rh));
                g += 0.5 * (Gi * Gi.transpose() * u.u_xx(xi, yi, sh, rh)).trace();
                g += bi.dot(u.u_y(xi, yi, sh, rh));
                g += 0.5 * ((s1i * s1i.transpose() + s2i * s2i.transpose()) *
                            u.u_yy(xi, yi, sh, rh))
                               .trace();
                if (cfg.include_cross_term)
                    g += (Gi * s1i.transpose() * u.u_yx(xi, yi, sh, rh)).trace();
                g += u.u_s(xi, yi, sh, rh).dot(drift_mu) +
                     0.5 * u.u_s(xi, yi, sh, rh).dot(diff_mu);
                g += u.u_r(xi, yi, sh, rh).dot(drift_nu) +
                     0.5 * u.u_r(xi, yi, sh, rh).dot(diff_nu);
                gen += g;
            }
            rhs += w * gen / cfg.N;
            if (s == steps) break;
            ens = step_slow_fast(std::move(ens), 1.0);
        }
        const double uT = cloud_value(ens);
        residuals[r] = (uT - u0) - rhs;
    });

    const MeanStderr ms = mean_stderr(residuals);
    ItoReport rep;
    rep.residual = ms.mean;
    rep.stderr_ = ms.stderr_;
    rep.replicas = cfg.replicas;
    return rep;
}

} // namespace mvsf
