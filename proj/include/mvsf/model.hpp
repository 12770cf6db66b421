#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <string>
#include <utility>

#include "mvsf/errors.hpp"
#include "mvsf/measure.hpp"
#include "mvsf/rng.hpp"

namespace mvsf {

/// Coefficient set of a slow-fast mean-field model. Evaluators must be pure
/// and safe to call concurrently; a ModelSpec is immutable once built.
///
/// Shapes: F -> d1, G -> d1 x d1, c -> d2, b -> d2,
///         sigma1 -> d2 x d1 (common noise), sigma2 -> d2 x d2.
struct ModelSpec {
    int d1 = 1;
    int d2 = 1;

    std::function<Vec(const Vec& x, const MeasureView& mu, const Vec& y,
                      const MeasureView& nu)> F;
    std::function<Mat(const Vec& x, const MeasureView& mu, const MeasureView& nu)> G;
    std::function<Vec(const Vec& x, const MeasureView& mu, const Vec& y,
                      const MeasureView& nu)> c;
    std::function<Vec(const MeasureView& mu, const Vec& y, const MeasureView& nu)> b;
    std::function<Mat(const MeasureView& mu, const Vec& y, const MeasureView& nu)> sigma1;
    std::function<Mat(const MeasureView& mu, const Vec& y, const MeasureView& nu)> sigma2;

    // declared dissipativity constants, c2 > c1 >= 0
    double c1 = 0.0;
    double c2 = 1.0;
    bool clt_compatible = false; // true iff G ignores its nu argument
    double lipschitz_bound = 1.0;

    std::string name = "custom";
    std::uint64_t fingerprint = 0; // stable key for caches

    void validate_shapes() const {
        if (d1 < 1 || d2 < 1)
            throw ConfigInvalid("model dimensions must be >= 1");
        if (!(c2 > c1) || c1 < 0)
            throw ConfigInvalid("model requires c2 > c1 >= 0");
        if (!F || !G || !c || !b || !sigma1 || !sigma2)
            throw ConfigInvalid("model is missing a coefficient evaluator");
    }
};

/// 1d benchmark family with every limit object in closed form:
///   F = A x + Abar m(mu) + B y + Bbar m(nu)
///   G = g0 + g1 x
///   c = c0
///   b = -kappa y + b1 m(mu) + b2 m(nu)
///   sigma1 = s1, sigma2 = s2 (constants).
struct LinearBenchmark {
    double A = -1.0, Abar = 0.0, B = 1.0, Bbar = 0.0;
    double g0 = 1.0, g1 = 0.0;
    double kappa = 2.0, b1 = 0.0, b2 = 0.0;
    double s1 = 0.0, s2 = 1.0;
    double c0 = 0.0;

    // (H^{sigma,b}) holds with these constants: the sigmas are flat, and
    // 2<b(y1,nu1)-b(y2,nu2), y1-y2> <= |b2| W2(nu1,nu2)^2 - (2 kappa - |b2|)|dy|^2.
    double dissipativity_c1() const { return std::abs(b2); }
    double dissipativity_c2() const { return 2.0 * kappa - std::abs(b2); }

    void validate() const {
        if (2.0 * kappa - 2.0 * std::abs(b2) <= 0.0)
            throw DegenerateModel("benchmark needs 2 kappa - 2 |b2| > 0");
        if (kappa <= b2)
            throw DegenerateModel("benchmark needs kappa > b2");
    }

    std::uint64_t fingerprint() const {
        const double vals[] = {A, Abar, B, Bbar, g0, g1, kappa, b1, b2, s1, s2, c0};
        std::uint64_t h = 0x9e3779b97f4a7c15ull;
        for (double v : vals) {
            std::uint64_t bits;
            static_assert(sizeof(bits) == sizeof(v));
            std::memcpy(&bits, &v, sizeof(bits));
            h = detail::combine(h, bits);
        }
        return h;
    }

    ModelSpec to_model() const {
        validate();
        const LinearBenchmark p = *this;
        ModelSpec m;
        m.d1 = 1;
        m.d2 = 1;
        m.F = [p](const Vec& x, const MeasureView& mu, const Vec& y,
                  const MeasureView& nu) {
            Vec out(1);
            out[0] = p.A * x[0] + p.Abar * mu.mean[0] + p.B * y[0] + p.Bbar * nu.mean[0];
            return out;
        };
        m.G = [p](const Vec& x, const MeasureView&, const MeasureView&) {
            Mat out(1, 1);
            out(0, 0) = p.g0 + p.g1 * x[0];
            return out;
        };
        m.c = [p](const Vec&, const MeasureView&, const Vec&, const MeasureView&) {
            Vec out(1);
            out[0] = p.c0;
            return out;
        };
        m.b = [p](const MeasureView& mu, const Vec& y, const MeasureView& nu) {
            Vec out(1);
            out[0] = -p.kappa * y[0] + p.b1 * mu.mean[0] + p.b2 * nu.mean[0];
            return out;
        };
        m.sigma1 = [p](const MeasureView&, const Vec&, const MeasureView&) {
            Mat out(1, 1);
            out(0, 0) = p.s1;
            return out;
        };
        m.sigma2 = [p](const MeasureView&, const Vec&, const MeasureView&) {
            Mat out(1, 1);
            out(0, 0) = p.s2;
            return out;
        };
        m.c1 = dissipativity_c1();
        m.c2 = dissipativity_c2();
        m.clt_compatible = true;
        m.lipschitz_bound = std::max({std::abs(A), std::abs(Abar), std::abs(B),
                                      std::abs(Bbar), std::abs(g1), kappa,
                                      std::abs(b1), std::abs(b2)});
        m.name = "linear_benchmark";
        m.fingerprint = fingerprint();
        return m;
    }
};

// ---------------------------------------------------------------------------
// Benchmark closed forms
// ---------------------------------------------------------------------------

/// Stationary mean and variance of the frozen fast process for a fixed
/// slow-measure mean: m* = b1 mu_mean / (kappa - b2), v* = (s1^2+s2^2)/(2 kappa).
inline std::pair<double, double> benchmark_frozen_stationary(const LinearBenchmark& p,
                                                             double mu_mean) {
    if (p.kappa <= p.b2 || p.kappa <= 0.0)
        throw DegenerateModel("frozen stationary point needs kappa > b2, kappa > 0");
    const double m_star = p.b1 * mu_mean / (p.kappa - p.b2);
    const double v_star = (p.s1 * p.s1 + p.s2 * p.s2) / (2.0 * p.kappa);
    return {m_star, v_star};
}

/// Coefficients of the exact corrector Phi = p (y - m*) + q (m(nu) - m*):
/// p = B/kappa and q = (Bbar + B b2/kappa)/(kappa - b2). The constant term of
/// the generator applied to this ansatz cancels against the m*-part of the
/// right-hand side, which benchmark_corrector_check verifies numerically.
inline std::pair<double, double> benchmark_corrector(const LinearBenchmark& p,
                                                     double /*mu_mean*/ = 0.0) {
    if (p.kappa <= p.b2 || p.kappa == 0.0)
        throw DegenerateModel("corrector needs kappa > b2 and kappa != 0");
    const double cp = p.B / p.kappa;
    const double cq = (p.Bbar + p.B * p.b2 / p.kappa) / (p.kappa - p.b2);
    return {cp, cq};
}

/// Residual of the constant term when the linear ansatz is substituted into
/// the generator; zero for any mu_mean when (p,q) are correct.
inline double benchmark_corrector_check(const LinearBenchmark& bench, double mu_mean) {
    const auto [cp, cq] = benchmark_corrector(bench, mu_mean);
    const auto [m_star, v_star] = benchmark_frozen_stationary(bench, mu_mean);
    (void)v_star;
    // constant part of L0 Phi + deltaF with y and m(nu) frozen at m*
    const double gen_const = cp * (-bench.kappa * m_star + bench.b1 * mu_mean + bench.b2 * m_star)
                           + cq * (-bench.kappa * m_star + bench.b1 * mu_mean + bench.b2 * m_star);
    const double rhs_const = bench.B * (m_star - m_star) + bench.Bbar * (m_star - m_star);
    return gen_const + rhs_const; // = L0 Phi + deltaF at (m*, m*)
}

/// Closed-form averaged drift of the benchmark:
/// Fbar(x, mu) = A x + Abar m(mu) + (B + Bbar) b1 m(mu) / (kappa - b2).
inline double benchmark_averaged_drift(const LinearBenchmark& p, double x, double mu_mean) {
    return p.A * x + p.Abar * mu_mean +
           (p.B + p.Bbar) * p.b1 * mu_mean / (p.kappa - p.b2);
}

// ---------------------------------------------------------------------------
// Dissipativity validation
// ---------------------------------------------------------------------------

struct ValidationReport {
    bool pass = false;
    double worst_margin = 0.0; // max over probes of LHS - RHS; <= 0 passes
    int probe_count = 0;
    int worst_probe = -1;
};

struct ProbeConfig {
    int nu_cloud_size = 32;
    double scale = 1.0; // spread of probe points and cloud centers
};

/// Monte Carlo spot check of (H^{sigma,b}): draws random (mu, y1, y2, nu1, nu2)
/// tuples and verifies
///   3(|dsigma1|^2 + |dsigma2|^2) + 2<db, y1-y2> <= c1 W2(nu1,nu2)^2 - c2 |y1-y2|^2.
inline ValidationReport validate_dissipativity(const ModelSpec& model, int probe_count,
                                               std::uint64_t rng_seed,
                                               const ProbeConfig& pc = {}) {
    model.validate_shapes();
    NoisePlan plan{rng_seed, 0, 1.0};
    const double tol = 1e-9;

    ValidationReport rep;
    rep.probe_count = probe_count;
    rep.worst_margin = -std::numeric_limits<double>::infinity();
    for (int k = 0; k < probe_count; ++k) {
        RngStream rs(plan, static_cast<std::uint64_t>(k), NoiseTag::Probe);
        auto draw_cloud = [&](int n, int dim) {
            const double center = pc.scale * rs.normal();
            Eigen::MatrixXd s(n, dim);
            for (int i = 0; i < n; ++i)
                for (int c = 0; c < dim; ++c) s(i, c) = center + pc.scale * rs.normal();
            return ParticleCloud(std::move(s));
        };
        const ParticleCloud mu_cloud = draw_cloud(pc.nu_cloud_size, model.d1);
        const ParticleCloud nu1_cloud = draw_cloud(pc.nu_cloud_size, model.d2);
        const ParticleCloud nu2_cloud = draw_cloud(pc.nu_cloud_size, model.d2);
        Vec y1(model.d2), y2(model.d2);
        for (int c = 0; c < model.d2; ++c) {
            y1[c] = pc.scale * rs.normal();
            y2[c] = pc.scale * rs.normal();
        }

        const MeasureView mu = MeasureView::of(mu_cloud);
        const MeasureView nu1 = MeasureView::of(nu1_cloud);
        const MeasureView nu2 = MeasureView::of(nu2_cloud);

        const Mat ds1 = model.sigma1(mu, y1, nu1) - model.sigma1(mu, y2, nu2);
        const Mat ds2 = model.sigma2(mu, y1, nu1) - model.sigma2(mu, y2, nu2);
        const Vec db = model.b(mu, y1, nu1) - model.b(mu, y2, nu2);
        if (!ds1.allFinite() || !ds2.allFinite() || !db.allFinite())
            throw NonFiniteCoefficient("dissipativity probe " + std::to_string(k));

        const Vec dy = y1 - y2;
        const double lhs = 3.0 * (ds1.squaredNorm() + ds2.squaredNorm()) + 2.0 * db.dot(dy);
        const double w2 = wasserstein2(nu1_cloud, nu2_cloud).value;
        const double rhs = model.c1 * w2 * w2 - model.c2 * dy.squaredNorm();
        const double margin = lhs - rhs;
        if (margin > rep.worst_margin) {
            rep.worst_margin = margin;
            rep.worst_probe = k;
        }
    }
    rep.pass = rep.worst_margin <= tol;
    return rep;
}

} // namespace mvsf
