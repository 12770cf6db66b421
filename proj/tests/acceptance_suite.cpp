// Acceptance checks, one pass/fail line each. Runs the full-scale benchmark
// configurations; expect on the order of ten minutes of wall clock.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "mvsf/corrector.hpp"
#include "mvsf/engine.hpp"
#include "mvsf/ergodic.hpp"
#include "mvsf/experiments.hpp"
#include "mvsf/measure.hpp"
#include "mvsf/model.hpp"
#include "mvsf/parallel.hpp"

using namespace mvsf;

namespace {

int g_failures = 0;

void report(const std::string& name, bool pass, const std::string& detail) {
    std::printf("[%s] %s: %s\n", pass ? "PASS" : "FAIL", name.c_str(), detail.c_str());
    std::fflush(stdout);
    if (!pass) ++g_failures;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

LinearBenchmark acceptance_bench() {
    LinearBenchmark b;
    b.A = -1.0;
    b.Abar = 0.5;
    b.B = 1.0;
    b.Bbar = 0.0;
    b.g0 = 0.3;
    b.g1 = 0.0;
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

int workers() { return resolve_workers(0); }

// --- criterion 1: strong averaging rate -----------------------------------

void check_strong_rate() {
    const auto t0 = std::chrono::steady_clock::now();
    const LinearBenchmark b = acceptance_bench();
    const ModelSpec m = b.to_model();
    ExperimentGrid grid;
    grid.epsilon_grid = {0.4, 0.28, 0.2, 0.14, 0.1};
    grid.N = 2000;
    grid.T = 1.0;
    grid.h = 0.05;
    grid.replicas = 16;
    grid.master_seed = 20240601;
    grid.workers = workers();
    const RateReport rep = run_strong_rate(m, closed_form_averaged(b), grid);
    const bool pass = rep.fit.slope >= 0.8 && rep.fit.slope <= 1.2;
    char detail[160];
    std::snprintf(detail, sizeof(detail),
                  "slope=%.3f ci=[%.3f,%.3f] band=[0.8,1.2] wall=%.0fs", rep.fit.slope,
                  rep.fit.ci_lo, rep.fit.ci_hi, seconds_since(t0));
    report("strong averaging rate", pass, detail);
}

// --- criterion 2: weak fluctuation rate ------------------------------------

void check_weak_rate() {
    const auto t0 = std::chrono::steady_clock::now();
    LinearBenchmark b = acceptance_bench();
    b.s1 = 0.0; // independent-noise mode: constant G, sigma2 only
    const ModelSpec m = b.to_model();
    ExperimentGrid grid;
    grid.epsilon_grid = {0.4, 0.28, 0.2, 0.14, 0.1};
    grid.N = 4000;
    grid.T = 1.0;
    grid.h = 0.05;
    grid.replicas = 32;
    grid.master_seed = 20240602;
    grid.workers = workers();
    WeakRateOptions opt;
    opt.clt_dt = 1e-3;
    opt.zbar_replicas = 64;
    const RateReport rep = run_weak_clt_rate(m, closed_form_averaged(b),
                                             closed_form_limit_coefficients(b),
                                             builtin_statistics(), grid, opt);
    const bool slope_ok = rep.fit.slope >= 0.6 && rep.fit.slope <= 1.4;
    const auto oracle = LimitMomentOracle::for_benchmark(b).at(grid.T);
    const bool anchor_ok =
        std::abs(rep.anchor_value - oracle.second) <= 3.0 * rep.anchor_stderr;
    char detail[200];
    std::snprintf(detail, sizeof(detail),
                  "slope=%.3f band=[0.6,1.4] E(Zbar^2)=%.5f oracle=%.5f (3se=%.5f) wall=%.0fs",
                  rep.fit.slope, rep.anchor_value, oracle.second, 3.0 * rep.anchor_stderr,
                  seconds_since(t0));
    report("weak fluctuation rate", slope_ok && anchor_ok, detail);
}

// --- criterion 3: corrector oracle equivalence ------------------------------

void check_corrector_equivalence() {
    const auto t0 = std::chrono::steady_clock::now();
    const LinearBenchmark b = acceptance_bench();
    const ModelSpec m = b.to_model();
    ClosedFormCorrector oracle(b);
    FKConfig cfg;
    cfg.inner_replicas = 64;
    cfg.dt = 2e-3;
    FeynmanKacCorrector fk(m, closed_fbar(b), cfg);

    const ParticleCloud mu_c = ParticleCloud::point_mass(Vec::Ones(1), 8);
    const MeasureView mu = MeasureView::of(mu_c);
    NoisePlan plan{20240603, 0, 1.0};
    RngStream rs(plan, 0, NoiseTag::Probe);

    int bad = 0;
    const int probes = 10;
    std::vector<double> worst(4, 0.0);
    for (int k = 0; k < probes; ++k) {
        Vec x = Vec::Constant(1, rs.normal());
        Vec y = Vec::Constant(1, 0.5 + rs.normal());
        const ParticleCloud nu = ParticleCloud::gaussian(
            48, 1, plan.with_salt(k + 1), NoiseTag::InitY, 0.3 * rs.normal(), 0.8);

        const VecErr phi = fk.phi(x, mu, y, nu);
        const VecErr phi0 = oracle.phi(x, mu, y, nu);
        const MatErr dy = fk.dy_phi(x, mu, y, nu);
        const MatErr dnu = fk.dnu_phi(x, mu, y, nu, k % nu.size());
        const TensErr dxdy = fk.dxdy_phi(x, mu, y, nu);
        const VecErr res = poisson_residual(m, fk, closed_fbar(b), x, mu, y, nu, 16);

        auto z = [](double got, double want, double se) {
            return std::abs(got - want) / std::max(se, 1e-12);
        };
        const double z_phi = z(phi.value[0], phi0.value[0], phi.stderr_[0]);
        const double z_dy = z(dy.value(0, 0), oracle.dy_phi(x, mu, y, nu).value(0, 0),
                              dy.stderr_(0, 0));
        const double z_dnu = z(dnu.value(0, 0), oracle.dnu_phi(x, mu, y, nu, 0).value(0, 0),
                               std::max(dnu.stderr_(0, 0), 5e-3));
        const double z_dxdy =
            std::abs(dxdy.value[0](0, 0)) / std::max(dxdy.stderr_[0](0, 0), 1e-9);
        const double z_res = z(res.value[0], 0.0, res.stderr_[0]);
        worst[0] = std::max(worst[0], z_phi);
        worst[1] = std::max(worst[1], std::max(z_dy, z_dnu));
        worst[2] = std::max(worst[2], z_dxdy);
        worst[3] = std::max(worst[3], z_res);
        if (z_phi > 3 || z_dy > 3 || z_dnu > 3 || z_dxdy > 3 || z_res > 3) ++bad;
    }
    char detail[200];
    std::snprintf(detail, sizeof(detail),
                  "probes=%d bad=%d worst z: phi=%.2f deriv=%.2f cross=%.2f residual=%.2f "
                  "wall=%.0fs",
                  probes, bad, worst[0], worst[1], worst[2], worst[3], seconds_since(t0));
    report("corrector oracle equivalence", bad == 0, detail);
}

// --- criterion 4: limit coefficient assembly --------------------------------

void check_limit_assembly() {
    const auto t0 = std::chrono::steady_clock::now();
    const auto run_case = [&](double s1, double s2, std::uint64_t seed) {
        LinearBenchmark b = acceptance_bench();
        b.s1 = s1;
        b.s2 = s2;
        const ModelSpec m = b.to_model();
        NoisePlan plan{seed, 0, 1.0};
        InvariantConfig icfg;
        icfg.cloud_size = 256;
        const ParticleCloud mu_c = ParticleCloud::point_mass(Vec::Ones(1), 8);
        const InvariantEstimate zeta = estimate_invariant_measure(m, mu_c, plan, icfg);
        FKConfig cfg;
        cfg.inner_replicas = 64;
        cfg.dt = 2e-3;
        FeynmanKacCorrector fk(m, closed_fbar(b), cfg);
        AssembleConfig acfg;
        acfg.sample_points = 10;
        acfg.pair_points = 3;
        return assemble_limit_coefficients(m, fk, Vec::Zero(1), mu_c, zeta, acfg);
    };
    const auto [p, q] = benchmark_corrector(acceptance_bench());

    const AssembledLimit ind = run_case(0.0, 0.5, 20240604);
    const double sigma_want = p * p * 0.25;
    const bool ind_ok = std::abs(ind.Sigma(0, 0) - sigma_want) <=
                        3.0 * std::max(ind.Sigma_stderr(0, 0), 1e-6);

    const AssembledLimit com = run_case(0.5, 0.0, 20240605);
    const bool sigma_zero_ok =
        std::abs(com.Sigma(0, 0)) <= 3.0 * std::max(com.Sigma_stderr(0, 0), 1e-9);
    const bool s1bar_ok = std::abs(com.dyPhi_sigma1(0, 0) - p * 0.5) <=
                          3.0 * com.dyPhi_sigma1_stderr(0, 0);

    char detail[240];
    std::snprintf(detail, sizeof(detail),
                  "sigma2-only: Sigma=%.5f want=%.5f | sigma1-only: Sigma=%.2e "
                  "dyPhi_sigma1=%.4f want=%.4f wall=%.0fs",
                  ind.Sigma(0, 0), sigma_want, com.Sigma(0, 0), com.dyPhi_sigma1(0, 0),
                  p * 0.5, seconds_since(t0));
    report("limit coefficient assembly", ind_ok && sigma_zero_ok && s1bar_ok, detail);
}

// --- criterion 5: ergodicity -------------------------------------------------

void check_ergodicity() {
    const auto t0 = std::chrono::steady_clock::now();
    const LinearBenchmark b = acceptance_bench();
    const ModelSpec m = b.to_model();
    NoisePlan plan{20240606, 0, 1.0};
    InvariantConfig icfg;
    icfg.cloud_size = 2048;
    icfg.dt = 0.005;
    const ParticleCloud mu_c = ParticleCloud::point_mass(Vec::Ones(1), 8);
    const ParticleCloud nu0 =
        ParticleCloud::gaussian(1024, 1, plan, NoiseTag::InitY, 4.0, 1.0);
    const DecayReport decay = run_ergodic_decay(m, mu_c, nu0, 4.0, plan, icfg);

    const bool rate_ok = std::abs(decay.coupling_rate - b.kappa) <= 0.3 * b.kappa;
    const bool r2_ok = decay.law_r2 >= 0.9;

    const InvariantEstimate zeta = estimate_invariant_measure(m, mu_c, plan, icfg);
    const auto [m_star, v_star] = benchmark_frozen_stationary(b, 1.0);
    const int n = zeta.zeta.size();
    const double mean = zeta.zeta.samples.col(0).mean();
    const double var = (zeta.zeta.samples.col(0).array() - mean).square().sum() / (n - 1);
    const bool mean_ok = std::abs(mean - m_star) <= 3.0 * std::sqrt(var / n);
    const bool var_ok = std::abs(var - v_star) <= 3.0 * var * std::sqrt(2.0 / (n - 1));

    char detail[240];
    std::snprintf(detail, sizeof(detail),
                  "coupling_rate=%.3f (kappa=%.1f) law_R2=%.3f mean=%.4f (m*=%.1f) "
                  "var=%.4f (v*=%.3f) wall=%.0fs",
                  decay.coupling_rate, b.kappa, decay.law_r2, mean, m_star, var, v_star,
                  seconds_since(t0));
    report("ergodicity", rate_ok && r2_ok && mean_ok && var_ok, detail);
}

// --- criterion 6: fluctuation estimate --------------------------------------

void check_fluctuation() {
    const auto t0 = std::chrono::steady_clock::now();
    const LinearBenchmark b = acceptance_bench();
    const ModelSpec m = b.to_model();
    ExperimentGrid grid;
    grid.epsilon_grid = {0.4, 0.28, 0.2, 0.14, 0.1};
    grid.N = 1000;
    grid.T = 1.0;
    grid.h = 0.05;
    grid.replicas = 16;
    grid.master_seed = 20240607;
    grid.workers = workers();
    const RateReport rep = run_fluctuation_estimate(m, closed_fbar(b), grid);
    const bool pass = rep.fit.slope >= 0.7 && rep.fit.slope <= 1.3;
    char detail[120];
    std::snprintf(detail, sizeof(detail), "slope=%.3f band=[0.7,1.3] wall=%.0fs",
                  rep.fit.slope, seconds_since(t0));
    report("fluctuation estimate", pass, detail);
}

// --- criterion 7: generator consistency --------------------------------------

void check_ito() {
    const auto t0 = std::chrono::steady_clock::now();
    const ModelSpec m = acceptance_bench().to_model();
    ItoConfig cfg;
    cfg.T = 0.4;
    cfg.N = 2000;
    cfg.replicas = 16;
    cfg.dt = 2e-3;
    cfg.master_seed = 20240608;
    cfg.workers = workers();

    bool all_ok = true;
    std::string parts;
    for (const auto& u : builtin_ito_functionals()) {
        const ItoReport rep = run_ito_check(m, u, cfg);
        const bool ok = std::abs(rep.residual) <= 3.0 * rep.stderr_;
        all_ok = all_ok && ok;
        parts += u.name + (ok ? "=ok " : "=bad ");
    }
    cfg.include_cross_term = false;
    const ItoReport broken = run_ito_check(m, builtin_ito_functionals()[0], cfg);
    const bool detects = std::abs(broken.residual) > 3.0 * broken.stderr_;
    char detail[240];
    std::snprintf(detail, sizeof(detail),
                  "%s cross-term-omitted residual=%.4f (3se=%.4f, detected=%s) wall=%.0fs",
                  parts.c_str(), broken.residual, 3.0 * broken.stderr_,
                  detects ? "yes" : "no", seconds_since(t0));
    report("common-noise generator identity", all_ok && detects, detail);
}

// --- criterion 8: property suites --------------------------------------------

void check_properties() {
    const auto t0 = std::chrono::steady_clock::now();
    bool ok = true;
    std::string what;

    // W2 metric axioms, exact mode, to 1e-12
    for (std::uint64_t seed = 0; seed < 6 && ok; ++seed) {
        NoisePlan plan{900 + seed, 0, 1.0};
        auto cloud = [&](std::uint64_t salt, double scale) {
            return ParticleCloud::gaussian(12, 2, plan.with_salt(salt), NoiseTag::Probe, 0.0,
                                           scale);
        };
        const ParticleCloud a = cloud(1, 1.0), b = cloud(2, 1.5), c = cloud(3, 0.7);
        const double ab = wasserstein2(a, b, W2Mode::Exact).value;
        const double ba = wasserstein2(b, a, W2Mode::Exact).value;
        const double ac = wasserstein2(a, c, W2Mode::Exact).value;
        const double cb = wasserstein2(c, b, W2Mode::Exact).value;
        if (std::abs(ab - ba) > 1e-12 || ab > ac + cb + 1e-12 ||
            wasserstein2(a, a, W2Mode::Exact).value > 1e-12) {
            ok = false;
            what = "W2 metric axioms";
        }
    }

    // sorted pairing vs assignment on 1d instances, to 1e-12
    for (std::uint64_t seed = 0; seed < 4 && ok; ++seed) {
        NoisePlan plan{950 + seed, 0, 1.0};
        const ParticleCloud a = ParticleCloud::gaussian(24, 1, plan, NoiseTag::Probe);
        const ParticleCloud b =
            ParticleCloud::gaussian(24, 1, plan.with_salt(7), NoiseTag::Probe, 0.5, 2.0);
        Eigen::MatrixXd cost(24, 24);
        for (int i = 0; i < 24; ++i)
            for (int j = 0; j < 24; ++j)
                cost(i, j) = (a.samples.row(i) - b.samples.row(j)).squaredNorm();
        const double assigned = std::sqrt(detail::solve_assignment(cost) / 24.0);
        if (std::abs(assigned - wasserstein2(a, b).value) > 1e-12) {
            ok = false;
            what = "sorted vs assignment";
        }
    }

    // Lions derivative against its finite-difference probe, to 1e-4
    if (ok) {
        CylinderFunctional u;
        u.dim = 1;
        u.k = 1;
        u.h = [](const Vec& x) { return x; };
        u.grad_h = [](const Vec&) { return Mat::Identity(1, 1); };
        u.g = [](const Vec& s) { return std::sin(s[0]); };
        u.grad_g = [](const Vec& s) { Vec v(1); v[0] = std::cos(s[0]); return v; };
        u.hess_g = [](const Vec& s) { Mat h(1, 1); h(0, 0) = -std::sin(s[0]); return h; };
        NoisePlan plan{970, 0, 1.0};
        const ParticleCloud c = ParticleCloud::gaussian(14, 1, plan, NoiseTag::Probe);
        auto eval = [&u](const ParticleCloud& cc) { return u.value(cc); };
        for (int at : {0, 7, 13}) {
            const double exact = lions_derivative_cylinder(u, c, at)[0];
            const double probe = lions_derivative_probe(eval, c, at, 1e-5)[0];
            if (std::abs(exact - probe) > 1e-4 * std::max(1.0, std::abs(exact))) {
                ok = false;
                what = "Lions derivative probe";
            }
        }
    }

    // sqrt_psd reconstruction to 1e-8
    if (ok) {
        NoisePlan plan{980, 0, 1.0};
        for (std::uint64_t seed = 0; seed < 4 && ok; ++seed) {
            Mat a(4, 4);
            for (int i = 0; i < 4; ++i)
                for (int j = 0; j < 4; ++j)
                    a(i, j) = plan.gaussian(seed, NoiseTag::Probe, 4 * i + j);
            const Mat s = a * a.transpose();
            const Mat r = sqrt_psd(s);
            if ((r * r.transpose() - s).cwiseAbs().maxCoeff() > 1e-8) {
                ok = false;
                what = "sqrt_psd reconstruction";
            }
        }
    }

    // bit-for-bit determinism of the experiments across 1, 2 and 8 workers
    if (ok) {
        const LinearBenchmark b = acceptance_bench();
        const ModelSpec m = b.to_model();
        ExperimentGrid grid;
        grid.epsilon_grid = {0.4, 0.3, 0.22};
        grid.N = 96;
        grid.T = 0.3;
        grid.replicas = 4;
        grid.master_seed = 424242;
        auto run_all = [&](int w) {
            grid.workers = w;
            std::vector<std::vector<double>> raws;
            raws.push_back(run_strong_rate(m, closed_form_averaged(b), grid).raw[0]);
            raws.push_back(run_fluctuation_estimate(m, closed_fbar(b), grid).raw[0]);
            LinearBenchmark bw = b;
            bw.s1 = 0.0;
            WeakRateOptions opt;
            opt.clt_dt = 5e-3;
            opt.zbar_replicas = 4;
            raws.push_back(run_weak_clt_rate(bw.to_model(), closed_form_averaged(bw),
                                             closed_form_limit_coefficients(bw),
                                             {builtin_statistics()[1]}, grid, opt)
                               .raw[0]);
            ItoConfig icfg;
            icfg.N = 64;
            icfg.replicas = 4;
            icfg.T = 0.2;
            icfg.workers = w;
            const ItoReport ito = run_ito_check(m, builtin_ito_functionals()[0], icfg);
            raws.push_back({ito.residual});
            return raws;
        };
        const auto r1 = run_all(1);
        const auto r2 = run_all(2);
        const auto r8 = run_all(8);
        if (r1 != r2 || r1 != r8) {
            ok = false;
            what = "worker-count determinism";
        }
    }

    char detail[160];
    std::snprintf(detail, sizeof(detail), "%s wall=%.0fs",
                  ok ? "metric axioms, 1d agreement, Lions probe, sqrt_psd, determinism"
                     : what.c_str(),
                  seconds_since(t0));
    report("property suites", ok, detail);
}

} // namespace

int main() {
    const auto t0 = std::chrono::steady_clock::now();
    check_properties();
    check_ergodicity();
    check_corrector_equivalence();
    check_limit_assembly();
    check_fluctuation();
    check_ito();
    check_strong_rate();
    check_weak_rate();
    std::printf("acceptance: %d failure(s), total wall=%.0fs\n", g_failures,
                seconds_since(t0));
    return g_failures == 0 ? 0 : 1;
}
