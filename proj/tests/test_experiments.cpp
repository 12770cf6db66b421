#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mvsf/experiments.hpp"

using namespace mvsf;

namespace {

LinearBenchmark bench() {
    LinearBenchmark b;
    b.A = -1.0;
    b.Abar = 0.5;
    b.B = 1.0;
    b.Bbar = 0.0;
    b.g0 = 0.3;
    b.kappa = 2.0;
    b.b1 = 1.0;
    b.b2 = 0.0;
    b.s1 = 0.5;
    b.s2 = 0.5;
    b.c0 = 0.2;
    return b;
}

FbarFn closed_fbar(const LinearBenchmark& b) {
    return [b](const Vec& x, const MeasureView& mu) {
        Vec v(1);
        v[0] = benchmark_averaged_drift(b, x[0], mu.mean[0]);
        return v;
    };
}

} // namespace

TEST_CASE("loglog fit on exact quadratic data") {
    std::vector<RatePoint> pts;
    for (double eps : {0.4, 0.2, 0.1, 0.05}) pts.push_back({eps, eps * eps, 0.0, 1, 0.0});
    const SlopeFit f = fit_loglog_slope(pts);
    CHECK(f.slope == doctest::Approx(2.0).epsilon(1e-9));
    CHECK(f.ci_lo == doctest::Approx(2.0).epsilon(1e-6));
    CHECK(f.ci_hi == doctest::Approx(2.0).epsilon(1e-6));
}

TEST_CASE("loglog fit on exact linear data recovers the constant") {
    const double c = 3.7;
    std::vector<RatePoint> pts;
    for (double eps : {0.4, 0.2, 0.1}) pts.push_back({eps, c * eps, 0.0, 1, 0.0});
    const SlopeFit f = fit_loglog_slope(pts);
    CHECK(f.slope == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(f.intercept == doctest::Approx(std::log(c)).epsilon(1e-9));
}

TEST_CASE("loglog fit rejects non-positive values and short grids") {
    std::vector<RatePoint> pts = {{0.4, 1.0, 0.0, 1, 0.0}, {0.2, 0.0, 0.0, 1, 0.0},
                                  {0.1, 0.1, 0.0, 1, 0.0}};
    CHECK_THROWS_AS(fit_loglog_slope(pts), NonPositiveValue);
    pts.resize(2);
    CHECK_THROWS_AS(fit_loglog_slope(pts), DegenerateFit);
}

TEST_CASE("bootstrap interval calibrates on noisy synthetic rates") {
    // value = eps (1 + 5% noise): the interval should cover slope 1 in at
    // least 90 of 100 synthetic reruns
    int covered = 0;
    NoisePlan plan{515, 0, 1.0};
    for (int rerun = 0; rerun < 100; ++rerun) {
        std::vector<RatePoint> pts;
        int k = 0;
        for (double eps : {0.4, 0.28, 0.2, 0.14, 0.1}) {
            const double noise = 0.05 * plan.gaussian(rerun, NoiseTag::Probe, k++);
            pts.push_back({eps, eps * (1.0 + noise), 0.05 * eps, 1, 0.0});
        }
        const SlopeFit f = fit_loglog_slope(pts, 300, 1000 + rerun);
        if (f.ci_lo <= 1.0 && 1.0 <= f.ci_hi) ++covered;
    }
    CHECK(covered >= 90);
}

TEST_CASE("decoupled model produces identically zero strong error") {
    // F free of (y, nu), G shared: the coupled gap is zero, so the rate
    // report cannot be built and the runner refuses
    LinearBenchmark b = bench();
    b.B = 0.0;
    b.Bbar = 0.0;
    const ModelSpec m = b.to_model();
    LinearBenchmark bf = b; // same slow block; fast block ignored
    AveragedCoefficients avg = closed_form_averaged(bf);

    ExperimentGrid grid;
    grid.epsilon_grid = {0.4, 0.3, 0.2};
    grid.N = 32;
    grid.T = 0.3;
    grid.replicas = 2;
    grid.master_seed = 11;
    CHECK_THROWS_AS(run_strong_rate(m, avg, grid), NonPositiveValue);

    // and the gap really is zero, by direct simulation
    NoisePlan plan{11, 1, 0.05 * 0.16};
    ParticleCloud X0 = ParticleCloud::gaussian(32, 1, plan, NoiseTag::InitX);
    ParticleCloud Y0 = ParticleCloud::gaussian(32, 1, plan, NoiseTag::InitY);
    const auto sf = simulate_slow_fast(m, 0.4, X0, Y0, 0.3, plan, {0.3});
    const auto av = simulate_averaged(avg, X0, 0.3, plan, {0.3}, 1);
    CHECK((sf.X.back().samples - av.clouds.back().samples).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("strong rate on the benchmark at reduced scale") {
    const LinearBenchmark b = bench();
    const ModelSpec m = b.to_model();
    const AveragedCoefficients avg = closed_form_averaged(b);
    ExperimentGrid grid;
    grid.epsilon_grid = {0.4, 0.28, 0.2, 0.14};
    grid.N = 400;
    grid.T = 0.5;
    grid.replicas = 8;
    grid.master_seed = 2024;
    grid.workers = 2;
    const RateReport rep = run_strong_rate(m, avg, grid);
    CHECK(rep.fit.slope >= 0.7);
    CHECK(rep.fit.slope <= 1.3);
    // fourth moments bounded across the grid
    double m4_max = 0.0, m4_first = rep.points.front().fourth_moment;
    for (const auto& p : rep.points) m4_max = std::max(m4_max, p.fourth_moment);
    CHECK(m4_max <= 2.0 * m4_first);
}

TEST_CASE("halving N leaves the strong error within one grid-step trend") {
    const LinearBenchmark b = bench();
    const ModelSpec m = b.to_model();
    const AveragedCoefficients avg = closed_form_averaged(b);
    ExperimentGrid grid;
    grid.epsilon_grid = {0.4, 0.31, 0.24}; // only the first point is compared
    grid.N = 600;
    grid.T = 0.5;
    grid.replicas = 8;
    grid.master_seed = 77;
    grid.workers = 2;
    const RateReport full = run_strong_rate(m, avg, grid);
    grid.N = 300;
    const RateReport half = run_strong_rate(m, avg, grid);
    const double trend = 0.4 / 0.28; // error factor across one acceptance grid step
    const double ratio = half.points[0].value / full.points[0].value;
    CHECK(ratio <= trend);
    CHECK(ratio >= 1.0 / trend);
}

TEST_CASE("strong rate reports are reproducible and worker-independent") {
    const LinearBenchmark b = bench();
    const ModelSpec m = b.to_model();
    const AveragedCoefficients avg = closed_form_averaged(b);
    ExperimentGrid grid;
    grid.epsilon_grid = {0.4, 0.3, 0.22};
    grid.N = 64;
    grid.T = 0.3;
    grid.replicas = 4;
    grid.master_seed = 555;
    grid.workers = 1;
    const RateReport a = run_strong_rate(m, avg, grid);
    grid.workers = 2;
    const RateReport c = run_strong_rate(m, avg, grid);
    grid.workers = 8;
    const RateReport d = run_strong_rate(m, avg, grid);
    for (std::size_t i = 0; i < a.points.size(); ++i) {
        CHECK(a.points[i].value == c.points[i].value);
        CHECK(a.points[i].value == d.points[i].value);
        CHECK(a.raw[i] == c.raw[i]);
        CHECK(a.raw[i] == d.raw[i]);
    }
    CHECK(a.fit.slope == c.fit.slope);
}

TEST_CASE("weak clt rate at reduced scale with oracle anchor") {
    // weak-order gaps are noise-limited at desk scale, so this runs a large
    // epsilon grid with the strongest statistic; the tight acceptance bands
    // are exercised at full scale by the acceptance suite
    LinearBenchmark b = bench();
    b.s1 = 0.0; // independent-noise configuration
    const ModelSpec m = b.to_model();
    const AveragedCoefficients avg = closed_form_averaged(b);
    const LimitCoefficients lim = closed_form_limit_coefficients(b);

    ExperimentGrid grid;
    grid.epsilon_grid = {0.5, 0.38, 0.28};
    grid.N = 1500;
    grid.T = 1.0;
    grid.replicas = 20;
    grid.master_seed = 909;
    grid.workers = 2;
    std::vector<TestStatistic> stats = {builtin_statistics()[0]}; // tanh_mean
    WeakRateOptions opt;
    opt.clt_dt = 2e-3;
    opt.zbar_replicas = 32;
    const RateReport rep = run_weak_clt_rate(m, avg, lim, stats, grid, opt);
    CHECK(rep.fit.slope >= 0.3);
    CHECK(rep.fit.slope <= 1.7);
    for (const auto& p : rep.points) CHECK(p.value > 0.0);

    const auto [m_exp, s_exp] = LimitMomentOracle::for_benchmark(b).at(grid.T);
    CHECK(std::abs(rep.anchor_value - s_exp) <= 3.0 * rep.anchor_stderr);
}

TEST_CASE("fluctuation integral of a centered drift scales with epsilon") {
    const LinearBenchmark b = bench();
    const ModelSpec m = b.to_model();
    ExperimentGrid grid;
    grid.epsilon_grid = {0.4, 0.28, 0.2, 0.14};
    grid.N = 300;
    grid.T = 0.5;
    grid.replicas = 8;
    grid.master_seed = 4242;
    grid.workers = 2;
    const RateReport rep = run_fluctuation_estimate(m, closed_fbar(b), grid);
    CHECK(rep.fit.slope >= 0.6);
    CHECK(rep.fit.slope <= 1.4);
}

TEST_CASE("zero centered drift integrates to zero") {
    LinearBenchmark b = bench();
    b.B = 0.0;
    b.Bbar = 0.0; // F does not see the fast block: deltaF = 0
    const ModelSpec m = b.to_model();
    ExperimentGrid grid;
    grid.epsilon_grid = {0.4, 0.3, 0.2};
    grid.N = 32;
    grid.T = 0.2;
    grid.replicas = 2;
    grid.master_seed = 5;
    CHECK_THROWS_AS(run_fluctuation_estimate(m, closed_fbar(b), grid), NonPositiveValue);
}

TEST_CASE("fluctuation integral grows at most linearly in T") {
    const LinearBenchmark b = bench();
    const ModelSpec m = b.to_model();
    ExperimentGrid grid;
    grid.epsilon_grid = {0.4, 0.3, 0.24};
    grid.N = 300;
    grid.T = 0.5;
    grid.replicas = 8;
    grid.master_seed = 11;
    grid.workers = 2;
    const RateReport short_run = run_fluctuation_estimate(m, closed_fbar(b), grid);
    grid.T = 1.0;
    const RateReport long_run = run_fluctuation_estimate(m, closed_fbar(b), grid);
    // |I|^2 at fixed eps: at most linear growth in T within generous CI
    const double r = std::pow(long_run.points[0].value / short_run.points[0].value, 2);
    CHECK(r <= 2.0 * 1.5);
}

TEST_CASE("ergodic decay runner on the benchmark") {
    const LinearBenchmark b = bench();
    const ModelSpec m = b.to_model();
    NoisePlan plan{313, 0, 1.0};
    InvariantConfig icfg;
    icfg.cloud_size = 512;
    const ParticleCloud mu = ParticleCloud::point_mass(Vec::Ones(1), 8);
    const ParticleCloud nu0 =
        ParticleCloud::gaussian(512, 1, plan, NoiseTag::InitY, 4.0, 1.0);
    const DecayReport rep = run_ergodic_decay(m, mu, nu0, 4.0, plan, icfg);

    CHECK(std::abs(rep.coupling_rate - b.kappa) <= 0.3 * b.kappa);
    CHECK(rep.law_r2 >= 0.9);
    CHECK(std::abs(rep.law_rate - b.kappa) <= 0.5 * b.kappa);

    // monotone nonincreasing after smoothing window 3, above the floor
    for (std::size_t k = 3; k < rep.w2_law.size(); ++k) {
        const double prev =
            (rep.w2_law[k - 3] + rep.w2_law[k - 2] + rep.w2_law[k - 1]) / 3.0;
        if (rep.w2_law[k] > 2.0 * rep.noise_floor)
            CHECK(rep.w2_law[k] <= prev * 1.25);
    }
}

TEST_CASE("decay curve from the invariant estimate sits at the floor") {
    const LinearBenchmark b = bench();
    const ModelSpec m = b.to_model();
    NoisePlan plan{317, 0, 1.0};
    InvariantConfig icfg;
    icfg.cloud_size = 512;
    const ParticleCloud mu = ParticleCloud::point_mass(Vec::Ones(1), 8);
    const InvariantEstimate zeta = estimate_invariant_measure(m, mu, plan, icfg);
    const DecayReport rep = run_ergodic_decay(m, mu, zeta.zeta, 2.0, plan, icfg);
    for (double w : rep.w2_law) CHECK(w <= 5.0 * rep.noise_floor);
}

TEST_CASE("generator check: constant functional") {
    const ModelSpec m = bench().to_model();
    ItoFunctional constant;
    constant.name = "const";
    constant.u = [](const Vec&, const Vec&, const Vec&, const Vec&) { return 1.0; };
    constant.u_x = [](const Vec&, const Vec&, const Vec&, const Vec&) {
        return Vec::Zero(1);
    };
    constant.u_y = constant.u_x;
    constant.u_xx = [](const Vec&, const Vec&, const Vec&, const Vec&) {
        return Mat::Zero(1, 1);
    };
    constant.u_yy = constant.u_xx;
    constant.u_yx = constant.u_xx;
    constant.u_s = constant.u_x;
    constant.u_r = constant.u_x;
    constant.h1 = [](const Vec&) { return Vec::Zero(1); };
    constant.grad_h1 = [](const Vec&) { return Mat::Zero(1, 1); };
    constant.hess_h1 = [](const Vec&, int) { return Mat::Zero(1, 1); };
    constant.h2 = constant.h1;
    constant.grad_h2 = constant.grad_h1;
    constant.hess_h2 = constant.hess_h1;

    ItoConfig cfg;
    cfg.N = 64;
    cfg.replicas = 3;
    cfg.T = 0.2;
    const ItoReport rep = run_ito_check(m, constant, cfg);
    CHECK(rep.residual == doctest::Approx(0.0));
}

TEST_CASE("generator check: drift-only mean functional") {
    // F = -x, all noise and fast terms off; u = mean of mu
    LinearBenchmark b;
    b.A = -1.0;
    b.Abar = 0.0;
    b.B = 0.0;
    b.Bbar = 0.0;
    b.g0 = 0.0;
    b.kappa = 2.0;
    b.s1 = 0.0;
    b.s2 = 0.0;
    b.c0 = 0.0;
    const ModelSpec m = b.to_model();

    const auto functionals = builtin_ito_functionals();
    ItoFunctional mean_mu = functionals[1]; // moment_mix; specialize h1 to x
    mean_mu.name = "mean_mu";
    mean_mu.u = [](const Vec&, const Vec&, const Vec& s, const Vec&) { return s[0]; };
    mean_mu.u_s = [](const Vec&, const Vec&, const Vec&, const Vec&) {
        Vec v(1); v[0] = 1.0; return v;
    };
    mean_mu.u_r = [](const Vec&, const Vec&, const Vec&, const Vec&) {
        return Vec::Zero(1);
    };
    mean_mu.h1 = [](const Vec& x) { return x; };
    mean_mu.grad_h1 = [](const Vec&) { return Mat::Identity(1, 1); };
    mean_mu.hess_h1 = [](const Vec&, int) { return Mat::Zero(1, 1); };

    ItoConfig cfg;
    cfg.N = 256;
    cfg.replicas = 2;
    cfg.T = 0.4;
    cfg.dt = 2e-3;
    const ItoReport rep = run_ito_check(m, mean_mu, cfg);
    CHECK(std::abs(rep.residual) <= 2.0 * cfg.dt);
}

TEST_CASE("generator check: cross term is required under common noise") {
    const ModelSpec m = bench().to_model();
    const ItoFunctional bilinear = builtin_ito_functionals()[0];

    ItoConfig cfg;
    cfg.N = 1000;
    cfg.replicas = 12;
    cfg.T = 0.4;
    cfg.dt = 2e-3;
    cfg.workers = 2;
    const ItoReport with_cross = run_ito_check(m, bilinear, cfg);
    CHECK(std::abs(with_cross.residual) <= 3.0 * with_cross.stderr_);

    cfg.include_cross_term = false;
    const ItoReport without_cross = run_ito_check(m, bilinear, cfg);
    CHECK(std::abs(without_cross.residual) > 3.0 * without_cross.stderr_);
    // the missing piece is the integrated cross variation g s1 T
    const double expected_gap = m.G(Vec::Zero(1), MeasureView::of(ParticleCloud::zeros(1, 1)),
                                    MeasureView::of(ParticleCloud::zeros(1, 1)))(0, 0) *
                                0.5 * cfg.T;
    CHECK(std::abs(std::abs(without_cross.residual) - expected_gap) <=
          0.3 * expected_gap);
}
