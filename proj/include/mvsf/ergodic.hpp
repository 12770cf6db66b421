#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <unordered_map>
#include <vector>

#include "mvsf/engine.hpp"
#include "mvsf/errors.hpp"
#include "mvsf/measure.hpp"
#include "mvsf/model.hpp"
#include "mvsf/stats.hpp"

namespace mvsf {

/// Particle estimate of the frozen invariant measure for a fixed slow cloud.
struct InvariantEstimate {
    ParticleCloud zeta;       // terminal frozen cloud
    ParticleCloud mu_frozen;  // the slow cloud it was solved for
    double burn_in = 0.0;     // initial horizon before doubling
    double horizon = 0.0;     // total time actually integrated
    // relative W2 between the horizon and half-horizon clouds in excess of
    // the finite-N sampling floor (two mixed snapshots never get closer than
    // the floor, so the raw distance alone cannot certify convergence)
    double convergence_diagnostic = 0.0;
    double sampling_floor = 0.0;
    bool converged = false;
};

namespace detail {

// W2 between the even- and odd-indexed halves of a cloud: the distance two
// equally mixed snapshots would show from sampling noise alone.
inline double w2_sampling_floor(const ParticleCloud& c) {
    const int half = c.size() / 2;
    if (half < 1) return 0.0;
    Eigen::MatrixXd a(half, c.dim()), b(half, c.dim());
    for (int i = 0; i < half; ++i) {
        a.row(i) = c.samples.row(2 * i);
        b.row(i) = c.samples.row(2 * i + 1);
    }
    return wasserstein2(ParticleCloud(std::move(a)), ParticleCloud(std::move(b))).value;
}

} // namespace detail

struct InvariantConfig {
    int cloud_size = 512;
    double dt = 0.01;
    double burn_in = 0.0;          // 0 -> default 10/(c2-c1)
    double rel_threshold = 0.05;
    int max_doublings = 6;
};

/// Runs the frozen dynamics from a standard-Gaussian cloud past burn-in,
/// doubling the horizon until the relative W2 between the terminal cloud and
/// the half-horizon cloud drops below the threshold.
inline InvariantEstimate estimate_invariant_measure(const ModelSpec& model,
                                                    const ParticleCloud& mu_frozen,
                                                    const NoisePlan& plan,
                                                    const InvariantConfig& cfg = {}) {
    const double burn_in = cfg.burn_in > 0.0 ? cfg.burn_in : 10.0 / (model.c2 - model.c1);
    NoisePlan p = plan.with_dt(cfg.dt);

    InvariantEstimate est;
    est.mu_frozen = mu_frozen;
    est.burn_in = burn_in;

    ParticleCloud half = ParticleCloud::gaussian(cfg.cloud_size, model.d2, p, NoiseTag::InitY);
    // first leg: [0, burn_in/2]
    auto leg = simulate_frozen(model, mu_frozen, half, burn_in / 2.0, p, {burn_in / 2.0}, 0);
    half = leg.clouds.back();
    double elapsed = burn_in / 2.0;
    std::uint64_t steps_done = static_cast<std::uint64_t>(std::llround(elapsed / cfg.dt));

    for (int k = 0; k <= cfg.max_doublings; ++k) {
        // advance another `elapsed` so the horizon doubles each round
        auto next = simulate_frozen(model, mu_frozen, half, elapsed, p, {elapsed}, steps_done);
        const ParticleCloud full = next.clouds.back();
        steps_done += static_cast<std::uint64_t>(std::llround(elapsed / cfg.dt));
        const double scale = std::max(1e-8, std::sqrt(empirical_second_moment(full)));
        const double floor = detail::w2_sampling_floor(full);
        const double diag =
            std::max(0.0, wasserstein2(half, full).value - floor) / scale;
        est.zeta = full;
        est.horizon = 2.0 * elapsed;
        est.convergence_diagnostic = diag;
        est.sampling_floor = floor;
        if (diag < cfg.rel_threshold) {
            est.converged = true;
            return est;
        }
        half = full;
        elapsed *= 2.0;
    }
    throw Unconverged("estimate_invariant_measure: diagnostic " +
                      std::to_string(est.convergence_diagnostic) + " after horizon " +
                      std::to_string(est.horizon));
}

/// Concurrent cache of invariant estimates keyed by (model, slow cloud, config).
class ZetaCache {
public:
    std::shared_ptr<const InvariantEstimate> get_or_compute(const ModelSpec& model,
                                                            const ParticleCloud& mu_frozen,
                                                            const NoisePlan& plan,
                                                            const InvariantConfig& cfg = {}) {
        const std::uint64_t key = make_key(model, mu_frozen, plan, cfg);
        {
            std::lock_guard<std::mutex> lk(mu_);
            auto it = map_.find(key);
            if (it != map_.end()) return it->second;
        }
        auto est = std::make_shared<const InvariantEstimate>(
            estimate_invariant_measure(model, mu_frozen, plan, cfg));
        std::lock_guard<std::mutex> lk(mu_);
        auto [it, inserted] = map_.emplace(key, est);
        return it->second;
    }

    void clear() {
        std::lock_guard<std::mutex> lk(mu_);
        map_.clear();
    }

private:
    static std::uint64_t make_key(const ModelSpec& model, const ParticleCloud& mu_frozen,
                                  const NoisePlan& plan, const InvariantConfig& cfg) {
        std::uint64_t h = detail::combine(model.fingerprint, mu_frozen.content_hash());
        h = detail::combine(h, plan.master_seed);
        h = detail::combine(h, plan.run_salt);
        h = detail::combine(h, static_cast<std::uint64_t>(cfg.cloud_size));
        h = detail::combine(h, static_cast<std::uint64_t>(cfg.dt * 1e12));
        h = detail::combine(h, static_cast<std::uint64_t>(cfg.burn_in * 1e6));
        return h;
    }

    std::mutex mu_;
    std::unordered_map<std::uint64_t, std::shared_ptr<const InvariantEstimate>> map_;
};

// ---------------------------------------------------------------------------
// Mixing rate
// ---------------------------------------------------------------------------

struct MixingEstimate {
    double lambda_hat = 0.0; // contraction rate (-slope of log W2)
    double fit_quality = 0.0; // R^2
    std::vector<double> times;
    std::vector<double> w2; // coupled distance curve
};

/// Synchronous-coupling estimate of the exponential mixing rate: two frozen
/// runs share Brownian streams, the slope of log W2 between their clouds is
/// fitted over a time grid.
inline MixingEstimate estimate_mixing_rate(const ModelSpec& model, const ParticleCloud& mu,
                                           const ParticleCloud& nu0_a, const ParticleCloud& nu0_b,
                                           double T, const NoisePlan& plan,
                                           int grid_points = 12) {
    std::vector<double> grid;
    for (int k = 1; k <= grid_points; ++k) grid.push_back(T * k / grid_points);
    const auto traj_a = simulate_frozen(model, mu, nu0_a, T, plan, grid);
    const auto traj_b = simulate_frozen(model, mu, nu0_b, T, plan, grid);

    MixingEstimate est;
    std::vector<double> ts, logs;
    for (std::size_t k = 0; k < traj_a.times.size(); ++k) {
        const double w = wasserstein2(traj_a.clouds[k], traj_b.clouds[k]).value;
        est.times.push_back(traj_a.times[k]);
        est.w2.push_back(w);
        if (w > 1e-13) {
            ts.push_back(traj_a.times[k]);
            logs.push_back(std::log(w));
        }
    }
    if (ts.size() < 5)
        throw DegenerateFit("coupled W2 hit numerical zero before 5 grid points");
    const LineFit f = linear_fit(ts, logs);
    est.lambda_hat = -f.slope;
    est.fit_quality = f.r2;
    return est;
}

// ---------------------------------------------------------------------------
// Centering check
// ---------------------------------------------------------------------------

/// Monte Carlo average of f(x, mu, Y, zeta) over Y ~ zeta with nu frozen at
/// zeta; the centering condition holds when |residual| <= 3 stderr. For
/// vector-valued f the norm of the component means is reported against the
/// norm of the component standard errors.
inline MeanStderr check_centering(
    const std::function<Vec(const Vec& x, const MeasureView& mu, const Vec& y,
                            const MeasureView& nu)>& f,
    const Vec& x, const ParticleCloud& mu_cloud, const InvariantEstimate& zeta) {
    if (!zeta.converged)
        throw Unconverged("check_centering requires a converged invariant estimate");
    const MeasureView mu = MeasureView::of(mu_cloud);
    const MeasureView nu = MeasureView::of(zeta.zeta);
    const int n = zeta.zeta.size();
    std::vector<Vec> vals;
    vals.reserve(n);
    for (int k = 0; k < n; ++k) vals.push_back(f(x, mu, zeta.zeta.point(k), nu));
    const int d = static_cast<int>(vals.front().size());
    Vec mean = Vec::Zero(d), se = Vec::Zero(d);
    for (const Vec& v : vals) mean += v;
    mean /= n;
    if (n > 1) {
        for (const Vec& v : vals) se += (v - mean).cwiseAbs2();
        se = (se / (n - 1) / n).cwiseSqrt();
    }
    MeanStderr out;
    out.mean = mean.norm();
    out.stderr_ = se.norm();
    out.n = n;
    return out;
}

} // namespace mvsf
