#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <utility>
#include <vector>

#include "mvsf/errors.hpp"
#include "mvsf/measure.hpp"
#include "mvsf/model.hpp"
#include "mvsf/rng.hpp"

namespace mvsf {

inline constexpr double kBlowUpThreshold = 1e8; // |state| beyond this aborts the run

// ---------------------------------------------------------------------------
// Ensembles
// ---------------------------------------------------------------------------

/// Coupled slow/fast particle states sharing time, epsilon and noise wiring.
/// Each slow particle owns exactly one fast particle; the W1 increment used
/// by the X-update of particle i is the same one used by its Y-update.
struct MultiscaleEnsemble {
    const ModelSpec* model = nullptr;
    double epsilon = 0.1;
    ParticleCloud X; // N x d1
    ParticleCloud Y; // N x d2
    double t = 0.0;
    std::uint64_t step_index = 0;
    NoisePlan plan;

    void check() const {
        if (X.size() != Y.size())
            throw DimensionMismatch("slow/fast particle counts differ");
        if (!(epsilon > 0.0 && epsilon < 1.0) && epsilon != 1.0)
            throw ConfigInvalid("epsilon must lie in (0, 1]");
    }
};

struct SnapshotStats {
    double fourth_moment_x = 0.0;
    double fourth_moment_y = 0.0;
};

template <typename CloudLike>
struct Snapshot {
    double t = 0.0;
    CloudLike state;
    SnapshotStats stats;
};

struct SlowFastTrajectory {
    std::vector<double> times;
    std::vector<ParticleCloud> X;
    std::vector<ParticleCloud> Y;
    std::vector<SnapshotStats> stats;
};

struct CloudTrajectory {
    std::vector<double> times;
    std::vector<ParticleCloud> clouds;
};

namespace detail {

inline void check_finite(const ParticleCloud& c, double t, const char* which) {
    for (int i = 0; i < c.size(); ++i) {
        const double m = c.samples.row(i).cwiseAbs().maxCoeff();
        if (!std::isfinite(m) || m > kBlowUpThreshold)
            throw NonFiniteState(std::string(which) + " particle " + std::to_string(i) +
                                 " at t=" + std::to_string(t));
    }
}

// Shared slow-component update so the coupled and averaged integrators are
// bitwise-identical recursions when their coefficients coincide.
inline void slow_update(Eigen::MatrixXd& X, int i, const Vec& drift, const Mat& diff,
                        const Vec& dW1, double dt) {
    X.row(i) += (drift * dt + diff * dW1).transpose();
}

} // namespace detail

// ---------------------------------------------------------------------------
// Coupled slow-fast system
// ---------------------------------------------------------------------------

/// One explicit Euler-Maruyama step of the coupled particle system. Both
/// empirical measures are frozen at the step start; dt comes from plan.dt and
/// must satisfy dt <= h_max * eps^2.
inline MultiscaleEnsemble step_slow_fast(MultiscaleEnsemble ens, double h_max = 0.1) {
    ens.check();
    const ModelSpec& m = *ens.model;
    const double eps = ens.epsilon;
    const double dt = ens.plan.dt;
    if (dt > h_max * eps * eps * (1.0 + 1e-12))
        throw StepSizeTooLarge("dt=" + std::to_string(dt) + " exceeds h_max*eps^2");

    const MeasureView mu = MeasureView::of(ens.X);
    const MeasureView nu = MeasureView::of(ens.Y);
    const int n = ens.X.size();
    Eigen::MatrixXd Xn = ens.X.samples;
    Eigen::MatrixXd Yn = ens.Y.samples;
    for (int i = 0; i < n; ++i) {
        const Vec x = ens.X.point(i);
        const Vec y = ens.Y.point(i);
        const std::uint64_t pid = static_cast<std::uint64_t>(i);
        const Vec dW1 = ens.plan.increment(pid, NoiseTag::W1, ens.step_index, m.d1);
        const Vec dW2 = ens.plan.increment(pid, NoiseTag::W2, ens.step_index, m.d2);

        detail::slow_update(Xn, i, m.F(x, mu, y, nu), m.G(x, mu, nu), dW1, dt);
        const Vec fast_drift = m.c(x, mu, y, nu) / eps + m.b(mu, y, nu) / (eps * eps);
        Yn.row(i) += (fast_drift * dt + m.sigma1(mu, y, nu) * dW1 / eps +
                      m.sigma2(mu, y, nu) * dW2 / eps)
                         .transpose();
    }
    ens.X.samples = std::move(Xn);
    ens.Y.samples = std::move(Yn);
    ens.t += dt;
    ens.step_index += 1;
    detail::check_finite(ens.X, ens.t, "X");
    detail::check_finite(ens.Y, ens.t, "Y");
    return ens;
}

namespace detail {

// Snapshot grid as step indices. Requested times are rounded to the nearest
// micro step; t=0 is always present.
inline std::vector<std::uint64_t> snapshot_steps(const std::vector<double>& times,
                                                 double dt, std::uint64_t total_steps) {
    std::vector<std::uint64_t> steps;
    for (double t : times) {
        const auto s = static_cast<std::uint64_t>(std::llround(t / dt));
        steps.push_back(std::min(s, total_steps));
    }
    std::sort(steps.begin(), steps.end());
    steps.erase(std::unique(steps.begin(), steps.end()), steps.end());
    return steps;
}

} // namespace detail

inline std::vector<double> default_snapshot_times(double T, int count = 11) {
    std::vector<double> ts;
    for (int i = 0; i < count; ++i) ts.push_back(T * i / (count - 1));
    return ts;
}

/// Integrates the coupled system on [0, T] with dt = plan.dt and returns
/// snapshots at the requested times plus fourth-moment tracks.
inline SlowFastTrajectory simulate_slow_fast(const ModelSpec& model, double epsilon,
                                             ParticleCloud X0, ParticleCloud Y0, double T,
                                             const NoisePlan& plan,
                                             const std::vector<double>& snapshot_times,
                                             double h_max = 0.1) {
    MultiscaleEnsemble ens;
    ens.model = &model;
    ens.epsilon = epsilon;
    ens.X = std::move(X0);
    ens.Y = std::move(Y0);
    ens.plan = plan;
    ens.check();

    const double dt = plan.dt;
    const auto total = static_cast<std::uint64_t>(std::llround(T / dt));
    const auto snaps = detail::snapshot_steps(snapshot_times, dt, total);

    SlowFastTrajectory traj;
    auto record = [&]() {
        traj.times.push_back(ens.t);
        traj.X.push_back(ens.X);
        traj.Y.push_back(ens.Y);
        traj.stats.push_back({empirical_fourth_moment(ens.X), empirical_fourth_moment(ens.Y)});
    };
    std::size_t next_snap = 0;
    if (next_snap < snaps.size() && snaps[next_snap] == 0) {
        record();
        ++next_snap;
    }
    for (std::uint64_t s = 0; s < total; ++s) {
        ens = step_slow_fast(std::move(ens), h_max);
        if (next_snap < snaps.size() && snaps[next_snap] == s + 1) {
            record();
            ++next_snap;
        }
    }
    if (traj.times.empty()) record(); // T = 0: single snapshot of the initial state
    return traj;
}

// ---------------------------------------------------------------------------
// Frozen fast dynamics
// ---------------------------------------------------------------------------

/// Euler-Maruyama for the frozen equation: mu held fixed, nu_t the running
/// empirical law, fresh Brownian streams.
inline CloudTrajectory simulate_frozen(const ModelSpec& model, const ParticleCloud& mu_frozen,
                                       ParticleCloud nu0, double T, const NoisePlan& plan,
                                       const std::vector<double>& snapshot_times,
                                       std::uint64_t step_offset = 0) {
    if (!(T > 0.0)) throw ConfigInvalid("simulate_frozen requires T > 0");
    const MeasureView mu = MeasureView::of(mu_frozen);
    const double dt = plan.dt;
    const auto total = static_cast<std::uint64_t>(std::llround(T / dt));
    const auto snaps = detail::snapshot_steps(snapshot_times, dt, total);

    CloudTrajectory traj;
    ParticleCloud y = std::move(nu0);
    std::size_t next_snap = 0;
    if (next_snap < snaps.size() && snaps[next_snap] == 0) {
        traj.times.push_back(0.0);
        traj.clouds.push_back(y);
        ++next_snap;
    }
    const int n = y.size();
    for (std::uint64_t s = 0; s < total; ++s) {
        const MeasureView nu = MeasureView::of(y);
        Eigen::MatrixXd Yn = y.samples;
        for (int i = 0; i < n; ++i) {
            const Vec yi = y.point(i);
            const std::uint64_t pid = static_cast<std::uint64_t>(i);
            const Vec dW1 = plan.increment(pid, NoiseTag::FrozenW1, step_offset + s, model.d1);
            const Vec dW2 = plan.increment(pid, NoiseTag::FrozenW2, step_offset + s, model.d2);
            Yn.row(i) += (model.b(mu, yi, nu) * dt + model.sigma1(mu, yi, nu) * dW1 +
                          model.sigma2(mu, yi, nu) * dW2)
                             .transpose();
        }
        y.samples = std::move(Yn);
        detail::check_finite(y, (s + 1) * dt, "frozen Y");
        if (next_snap < snaps.size() && snaps[next_snap] == s + 1) {
            traj.times.push_back((s + 1) * dt);
            traj.clouds.push_back(y);
            ++next_snap;
        }
    }
    if (traj.times.empty()) {
        traj.times.push_back(T);
        traj.clouds.push_back(y);
    }
    return traj;
}

// ---------------------------------------------------------------------------
// Averaged equation
// ---------------------------------------------------------------------------

/// Mean-field kernel K(x, x_tilde); when x_tilde_independent is set the
/// engine hoists the cloud average out of the particle loop.
struct MeanFieldKernel {
    bool x_tilde_independent = true;
    std::function<Mat(const Vec& x, const MeasureView& mu, const Vec& xt)> K;
};

struct MeanFieldVectorKernel {
    bool x_tilde_independent = true;
    std::function<Vec(const Vec& x, const MeasureView& mu, const Vec& xt)> K;
};

/// Averaged drift/diffusion plus the derivative fields needed by the limit
/// equation. Derivative members may be empty when only simulate_averaged is used.
struct AveragedCoefficients {
    std::function<Vec(const Vec& x, const MeasureView& mu)> Fbar;
    std::function<Mat(const Vec& x, const MeasureView& mu)> Gbar;

    std::function<Mat(const Vec& x, const MeasureView& mu)> dxFbar;  // d1 x d1
    MeanFieldKernel dmuFbar;                                         // kernel for E~[dmuFbar(x)(X~) Z~]
    // contraction of dG/dx with a vector z: sum_k dG/dx_k z_k -> d1 x d1
    std::function<Mat(const Vec& x, const MeasureView& mu, const Vec& z)> dxG_contract;
    // contraction of the Lions derivative of G with z~ per copy point
    bool dmuG_zero = true;
    std::function<Mat(const Vec& x, const MeasureView& mu, const Vec& xt, const Vec& zt)>
        dmuG_contract;
};

/// Euler-Maruyama for the averaged equation, reusing the W1 streams named in
/// the plan so a run couples pathwise with simulate_slow_fast.
inline CloudTrajectory simulate_averaged(const AveragedCoefficients& avg,
                                         ParticleCloud X0, double T, const NoisePlan& plan,
                                         const std::vector<double>& snapshot_times, int d1) {
    const double dt = plan.dt;
    const auto total = static_cast<std::uint64_t>(std::llround(T / dt));
    const auto snaps = detail::snapshot_steps(snapshot_times, dt, total);

    CloudTrajectory traj;
    ParticleCloud x = std::move(X0);
    std::size_t next_snap = 0;
    if (next_snap < snaps.size() && snaps[next_snap] == 0) {
        traj.times.push_back(0.0);
        traj.clouds.push_back(x);
        ++next_snap;
    }
    const int n = x.size();
    for (std::uint64_t s = 0; s < total; ++s) {
        const MeasureView mu = MeasureView::of(x);
        Eigen::MatrixXd Xn = x.samples;
        for (int i = 0; i < n; ++i) {
            const Vec xi = x.point(i);
            const Vec dW1 = plan.increment(static_cast<std::uint64_t>(i), NoiseTag::W1, s, d1);
            detail::slow_update(Xn, i, avg.Fbar(xi, mu), avg.Gbar(xi, mu), dW1, dt);
        }
        x.samples = std::move(Xn);
        detail::check_finite(x, (s + 1) * dt, "Xbar");
        if (next_snap < snaps.size() && snaps[next_snap] == s + 1) {
            traj.times.push_back((s + 1) * dt);
            traj.clouds.push_back(x);
            ++next_snap;
        }
    }
    if (traj.times.empty()) {
        traj.times.push_back(T);
        traj.clouds.push_back(x);
    }
    return traj;
}

/// Normalized deviation Z_i = (X^eps_i - Xbar_i)/eps per snapshot. Both
/// trajectories must share the snapshot grid and particle count.
inline CloudTrajectory deviation_process(const SlowFastTrajectory& slow_fast,
                                         const CloudTrajectory& averaged, double epsilon) {
    if (slow_fast.times.size() != averaged.times.size())
        throw GridMismatch("snapshot grids differ in length");
    CloudTrajectory dev;
    for (std::size_t k = 0; k < slow_fast.times.size(); ++k) {
        if (std::abs(slow_fast.times[k] - averaged.times[k]) > 1e-12)
            throw GridMismatch("snapshot times differ at index " + std::to_string(k));
        if (slow_fast.X[k].size() != averaged.clouds[k].size())
            throw GridMismatch("particle counts differ");
        dev.times.push_back(slow_fast.times[k]);
        dev.clouds.push_back(
            ParticleCloud((slow_fast.X[k].samples - averaged.clouds[k].samples) / epsilon));
    }
    return dev;
}

// ---------------------------------------------------------------------------
// Limit fluctuation equation
// ---------------------------------------------------------------------------

/// Evaluators of the averaged corrector products entering the limit equation.
/// All are functions of (x, mu) along the averaged path; values carry the
/// tilde-expectation already reduced to a kernel where one appears.
struct LimitCoefficients {
    std::function<Vec(const Vec& x, const MeasureView& mu)> cbar_dyPhi;
    MeanFieldVectorKernel cbarbar_dnuPhi; // kernel in x_tilde
    // drift from the common-noise cross term, already contracted with G -> d1
    std::function<Vec(const Vec& x, const MeasureView& mu)> sigma1_dxdyPhi_G;
    std::function<Mat(const Vec& x, const MeasureView& mu)> dyPhi_sigma1; // d1 x d1
    std::function<Mat(const Vec& x, const MeasureView& mu)> Sigma;       // d1 x d1 PSD
    std::function<Mat(const Vec& x, const MeasureView& mu)> sqrtSigma;
};

/// Paired averaged/deviation particle states of the limit equation.
struct CLTEnsemble {
    const AveragedCoefficients* avg = nullptr;
    const LimitCoefficients* lim = nullptr;
    ParticleCloud Xbar; // d1
    ParticleCloud Z;    // d1, starts at zero
    double t = 0.0;
    std::uint64_t step_index = 0;
    NoisePlan plan;
    bool leave_one_out = false; // tilde-expectation excludes the own particle

    void check() const {
        if (Xbar.size() != Z.size())
            throw DimensionMismatch("CLT ensemble particle counts differ");
    }
};

/// One Euler-Maruyama step of the limit equation. Xbar advances under the
/// averaged dynamics with the plan's W1 streams; Z consumes the same W1
/// increments plus an independent Wtilde stream. Tilde-expectations are
/// realized as cloud averages.
inline CLTEnsemble step_limit_clt(CLTEnsemble ens) {
    ens.check();
    const AveragedCoefficients& avg = *ens.avg;
    const LimitCoefficients& lim = *ens.lim;
    const double dt = ens.plan.dt;
    const int n = ens.Xbar.size();
    const int d1 = ens.Xbar.dim();

    const MeasureView mu = MeasureView::of(ens.Xbar);
    const Vec z_mean = empirical_mean(ens.Z);
    const Vec z_sum = z_mean * n;

    // hoisted tilde-averages for x_tilde-independent kernels
    std::optional<Mat> dmuF_const;
    if (avg.dmuFbar.K && avg.dmuFbar.x_tilde_independent)
        dmuF_const = avg.dmuFbar.K(Vec::Zero(d1), mu, Vec::Zero(d1));
    std::optional<Vec> dnu_const;
    if (lim.cbarbar_dnuPhi.K && lim.cbarbar_dnuPhi.x_tilde_independent)
        dnu_const = lim.cbarbar_dnuPhi.K(Vec::Zero(d1), mu, Vec::Zero(d1));

    Eigen::MatrixXd Xn = ens.Xbar.samples;
    Eigen::MatrixXd Zn = ens.Z.samples;
    for (int i = 0; i < n; ++i) {
        const Vec xi = ens.Xbar.point(i);
        const Vec zi = ens.Z.point(i);
        const std::uint64_t pid = static_cast<std::uint64_t>(i);
        const Vec dW1 = ens.plan.increment(pid, NoiseTag::W1, ens.step_index, d1);
        const Vec dWt = ens.plan.increment(pid, NoiseTag::Wtilde, ens.step_index, d1);

        detail::slow_update(Xn, i, avg.Fbar(xi, mu), avg.Gbar(xi, mu), dW1, dt);

        Vec zbar_used = ens.leave_one_out && n > 1 ? Vec((z_sum - zi) / (n - 1)) : z_mean;

        Vec drift = Vec::Zero(d1);
        if (avg.dxFbar) drift += avg.dxFbar(xi, mu) * zi;
        if (avg.dmuFbar.K) {
            if (dmuF_const) {
                drift += *dmuF_const * zbar_used;
            } else {
                Vec acc = Vec::Zero(d1);
                int cnt = 0;
                for (int j = 0; j < n; ++j) {
                    if (ens.leave_one_out && j == i) continue;
                    acc += avg.dmuFbar.K(xi, mu, ens.Xbar.point(j)) * ens.Z.point(j);
                    ++cnt;
                }
                drift += acc / cnt;
            }
        }
        if (lim.cbar_dyPhi) drift += lim.cbar_dyPhi(xi, mu);
        if (lim.cbarbar_dnuPhi.K) {
            if (dnu_const) {
                drift += *dnu_const;
            } else {
                Vec acc = Vec::Zero(d1);
                int cnt = 0;
                for (int j = 0; j < n; ++j) {
                    if (ens.leave_one_out && j == i) continue;
                    acc += lim.cbarbar_dnuPhi.K(xi, mu, ens.Xbar.point(j));
                    ++cnt;
                }
                drift += acc / cnt;
            }
        }
        if (lim.sigma1_dxdyPhi_G) drift += lim.sigma1_dxdyPhi_G(xi, mu);

        Mat diff_w1 = Mat::Zero(d1, d1);
        if (avg.dxG_contract) diff_w1 += avg.dxG_contract(xi, mu, zi);
        if (!avg.dmuG_zero && avg.dmuG_contract) {
            Mat acc = Mat::Zero(d1, d1);
            int cnt = 0;
            for (int j = 0; j < n; ++j) {
                if (ens.leave_one_out && j == i) continue;
                acc += avg.dmuG_contract(xi, mu, ens.Xbar.point(j), ens.Z.point(j));
                ++cnt;
            }
            diff_w1 += acc / cnt;
        }
        if (lim.dyPhi_sigma1) diff_w1 += lim.dyPhi_sigma1(xi, mu);

        Vec dz = drift * dt + diff_w1 * dW1;
        if (lim.sqrtSigma) dz += lim.sqrtSigma(xi, mu) * dWt;
        Zn.row(i) += dz.transpose();
    }
    ens.Xbar.samples = std::move(Xn);
    ens.Z.samples = std::move(Zn);
    ens.t += dt;
    ens.step_index += 1;
    detail::check_finite(ens.Xbar, ens.t, "Xbar");
    detail::check_finite(ens.Z, ens.t, "Zbar");
    return ens;
}

/// Integrates the limit equation on [0, T]; Z starts at zero.
inline CloudTrajectory simulate_limit_clt(const AveragedCoefficients& avg,
                                          const LimitCoefficients& lim, ParticleCloud X0,
                                          double T, const NoisePlan& plan,
                                          const std::vector<double>& snapshot_times,
                                          bool leave_one_out = false) {
    CLTEnsemble ens;
    ens.avg = &avg;
    ens.lim = &lim;
    const int n = X0.size();
    const int d1 = X0.dim();
    ens.Z = ParticleCloud::zeros(n, d1);
    ens.Xbar = std::move(X0);
    ens.plan = plan;
    ens.leave_one_out = leave_one_out;

    const double dt = plan.dt;
    const auto total = static_cast<std::uint64_t>(std::llround(T / dt));
    const auto snaps = detail::snapshot_steps(snapshot_times, dt, total);
    CloudTrajectory traj;
    std::size_t next_snap = 0;
    if (next_snap < snaps.size() && snaps[next_snap] == 0) {
        traj.times.push_back(0.0);
        traj.clouds.push_back(ens.Z);
        ++next_snap;
    }
    for (std::uint64_t s = 0; s < total; ++s) {
        ens = step_limit_clt(std::move(ens));
        if (next_snap < snaps.size() && snaps[next_snap] == s + 1) {
            traj.times.push_back(ens.t);
            traj.clouds.push_back(ens.Z);
            ++next_snap;
        }
    }
    if (traj.times.empty()) {
        traj.times.push_back(0.0);
        traj.clouds.push_back(ens.Z);
    }
    return traj;
}

} // namespace mvsf
