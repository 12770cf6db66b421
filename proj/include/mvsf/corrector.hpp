#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <mutex>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include "mvsf/engine.hpp"
#include "mvsf/ergodic.hpp"
#include "mvsf/errors.hpp"
#include "mvsf/measure.hpp"
#include "mvsf/model.hpp"
#include "mvsf/stats.hpp"

namespace mvsf {

// ---------------------------------------------------------------------------
// PSD square root
// ---------------------------------------------------------------------------

/// Symmetric PSD square root by eigendecomposition. Eigenvalues in
/// [-clamp_tol, 0) are clamped to zero; anything lower throws.
inline Mat sqrt_psd(const Mat& S, double clamp_tol = 1e-10) {
    if (S.rows() != S.cols()) throw NotSymmetric("sqrt_psd: matrix not square");
    if ((S - S.transpose()).cwiseAbs().maxCoeff() > 1e-10)
        throw NotSymmetric("sqrt_psd: asymmetry above 1e-10");
    Eigen::SelfAdjointEigenSolver<Mat> eig(0.5 * (S + S.transpose()));
    Vec lam = eig.eigenvalues();
    for (int i = 0; i < lam.size(); ++i) {
        if (lam[i] < -clamp_tol)
            throw NegativeBeyondTolerance("sqrt_psd: eigenvalue " + std::to_string(lam[i]));
        if (lam[i] < 0.0) lam[i] = 0.0;
    }
    return eig.eigenvectors() * lam.cwiseSqrt().asDiagonal() *
           eig.eigenvectors().transpose();
}

// ---------------------------------------------------------------------------
// Corrector interface
// ---------------------------------------------------------------------------

/// Value-with-uncertainty bundles. Tensor quantities are indexed by the
/// output component i of the corrector (one matrix per slow dimension).
struct VecErr {
    Vec value;
    Vec stderr_;
};
struct MatErr {
    Mat value;
    Mat stderr_;
};
struct TensErr {
    std::vector<Mat> value;
    std::vector<Mat> stderr_;
};

/// Evaluator of the corrector Phi and its derivatives at (x, mu, y, nu).
/// Shapes: phi -> d1; dy_phi -> d1 x d2; dxdy_phi -> d1 matrices of d2 x d1
/// ((j,k) = d^2 Phi_i / dy_j dx_k); dnu_phi -> d1 x d2 at one nu-particle;
/// d2y_phi, dnudy_phi -> d1 matrices of d2 x d2.
class Corrector {
public:
    virtual ~Corrector() = default;

    virtual VecErr phi(const Vec& x, const MeasureView& mu, const Vec& y,
                       const ParticleCloud& nu) = 0;
    virtual MatErr dy_phi(const Vec& x, const MeasureView& mu, const Vec& y,
                          const ParticleCloud& nu) = 0;
    virtual TensErr dxdy_phi(const Vec& x, const MeasureView& mu, const Vec& y,
                             const ParticleCloud& nu) = 0;
    virtual MatErr dnu_phi(const Vec& x, const MeasureView& mu, const Vec& y,
                           const ParticleCloud& nu, int particle) = 0;
    virtual TensErr d2y_phi(const Vec& x, const MeasureView& mu, const Vec& y,
                            const ParticleCloud& nu) = 0;
    virtual TensErr dnudy_phi(const Vec& x, const MeasureView& mu, const Vec& y,
                              const ParticleCloud& nu, int particle) = 0;
};

// ---------------------------------------------------------------------------
// Closed-form corrector of the linear benchmark
// ---------------------------------------------------------------------------

/// Phi(x, mu, y, nu) = p (y - m*(mu)) + q (m(nu) - m*(mu)) with exact
/// derivatives; the oracle against which the Monte Carlo solver is checked.
class ClosedFormCorrector final : public Corrector {
public:
    explicit ClosedFormCorrector(const LinearBenchmark& bench) : bench_(bench) {
        std::tie(p_, q_) = benchmark_corrector(bench);
    }

    double p() const { return p_; }
    double q() const { return q_; }

    VecErr phi(const Vec&, const MeasureView& mu, const Vec& y,
               const ParticleCloud& nu) override {
        const double m_star = benchmark_frozen_stationary(bench_, mu.mean[0]).first;
        const double m_nu = nu.samples.col(0).mean();
        Vec v(1);
        v[0] = p_ * (y[0] - m_star) + q_ * (m_nu - m_star);
        return {v, Vec::Zero(1)};
    }
    MatErr dy_phi(const Vec&, const MeasureView&, const Vec&,
                  const ParticleCloud&) override {
        Mat m(1, 1);
        m(0, 0) = p_;
        return {m, Mat::Zero(1, 1)};
    }
    TensErr dxdy_phi(const Vec&, const MeasureView&, const Vec&,
                     const ParticleCloud&) override {
        return {{Mat::Zero(1, 1)}, {Mat::Zero(1, 1)}};
    }
    MatErr dnu_phi(const Vec&, const MeasureView&, const Vec&, const ParticleCloud&,
                   int) override {
        Mat m(1, 1);
        m(0, 0) = q_;
        return {m, Mat::Zero(1, 1)};
    }
    TensErr d2y_phi(const Vec&, const MeasureView&, const Vec&,
                    const ParticleCloud&) override {
        return {{Mat::Zero(1, 1)}, {Mat::Zero(1, 1)}};
    }
    TensErr dnudy_phi(const Vec&, const MeasureView&, const Vec&, const ParticleCloud&,
                      int) override {
        return {{Mat::Zero(1, 1)}, {Mat::Zero(1, 1)}};
    }

private:
    LinearBenchmark bench_;
    double p_ = 0.0, q_ = 0.0;
};

// ---------------------------------------------------------------------------
// Feynman-Kac corrector
// ---------------------------------------------------------------------------

struct FKConfig {
    double t_infinity = 0.0;  // 0 -> 12 / (c2 - c1)
    int inner_replicas = 64;  // M
    double dt = 2e-3;
    double delta = 1e-3;      // first-difference step (common random numbers)
    double delta2 = 3e-2;     // second-difference step
    double noise_floor = 0.05; // StepTooSmall only above this absolute stderr
    double tail_tol = 0.02;
    std::uint64_t seed = 0x0f1e2d3c4b5a6978ull;
};

using FbarFn = std::function<Vec(const Vec& x, const MeasureView& mu)>;

/// Monte Carlo solution of the corrector equation through its integral
/// representation: Phi(x,mu,y,nu) = E int_0^inf deltaF(x, mu, Y_t, law(Y_t)) dt,
/// where law(Y_t) is carried by one auxiliary frozen cloud started from nu
/// (shared by all inner paths and all +/- finite-difference evaluations, so
/// differences are estimable) and the M inner paths start at the point y.
/// The time integral is truncated at t_infinity with the trapezoid rule.
/// Reported standard errors combine the inner-path spread with the measured
/// magnitude of the [T/2, T] tail, which bounds what the truncation dropped.
class FeynmanKacCorrector final : public Corrector {
public:
    FeynmanKacCorrector(const ModelSpec& model, FbarFn fbar, FKConfig cfg = {})
        : model_(model), fbar_(std::move(fbar)), cfg_(cfg) {
        if (cfg_.t_infinity <= 0.0) cfg_.t_infinity = 12.0 / (model.c2 - model.c1);
    }

    const FKConfig& config() const { return cfg_; }
    bool tail_flagged() const { return tail_flagged_; }

    VecErr phi(const Vec& x, const MeasureView& mu, const Vec& y,
               const ParticleCloud& nu) override {
        const PathIntegrals base = integrals(mu, y, nu, {x});
        VecErr out;
        const auto [m, se] = reduce(base, 0);
        out.value = m;
        out.stderr_ = se;
        // flag systematic truncation error, not tail-window noise
        const Vec tail_mean = base.tail[0].colwise().mean().transpose();
        double tail_noise = 0.0;
        for (int i = 0; i < model_.d1; ++i) {
            const Eigen::VectorXd col = base.tail[0].col(i);
            const double mu_c = col.mean();
            double var = 0.0;
            for (int m = 0; m < col.size(); ++m) var += (col[m] - mu_c) * (col[m] - mu_c);
            if (col.size() > 1)
                tail_noise += var / (col.size() - 1) / col.size();
        }
        if (tail_mean.norm() >
            cfg_.tail_tol * (1.0 + out.value.norm()) + 3.0 * std::sqrt(tail_noise))
            tail_flagged_ = true;
        return out;
    }

    /// |mean over inner paths of the integrand| on the micro grid; the decay
    /// rate of this track is the solver's effective mixing rate.
    std::pair<std::vector<double>, std::vector<double>> integrand_track(
        const Vec& x, const MeasureView& mu, const Vec& y, const ParticleCloud& nu) {
        const PathIntegrals base = integrals(mu, y, nu, {x});
        std::vector<double> ts, mags;
        for (std::size_t s = 0; s < base.track.size(); ++s) {
            ts.push_back(s * cfg_.dt);
            mags.push_back(base.track[s]);
        }
        return {ts, mags};
    }

    MatErr dy_phi(const Vec& x, const MeasureView& mu, const Vec& y,
                  const ParticleCloud& nu) override {
        const int d1 = model_.d1, d2 = model_.d2;
        MatErr out{Mat(d1, d2), Mat(d1, d2)};
        for (int j = 0; j < d2; ++j) {
            Vec yp = y, ym = y;
            yp[j] += cfg_.delta;
            ym[j] -= cfg_.delta;
            const PathIntegrals up = integrals(mu, yp, nu, {x});
            const PathIntegrals dn = integrals(mu, ym, nu, {x});
            const auto [d, se] = reduce_diff(up, dn, 0, 2.0 * cfg_.delta);
            out.value.col(j) = d;
            out.stderr_.col(j) = se;
        }
        check_noise(out.value, out.stderr_, "dy_phi");
        return out;
    }

    TensErr dxdy_phi(const Vec& x, const MeasureView& mu, const Vec& y,
                     const ParticleCloud& nu) override {
        const int d1 = model_.d1, d2 = model_.d2;
        // paths do not depend on x, so the four evaluations per (j,k) pair
        // reuse two path runs with shifted integrand parameters
        TensErr out;
        out.value.assign(d1, Mat::Zero(d2, d1));
        out.stderr_.assign(d1, Mat::Zero(d2, d1));
        std::vector<Vec> xs;
        for (int k = 0; k < d1; ++k) {
            Vec xp = x, xm = x;
            xp[k] += cfg_.delta;
            xm[k] -= cfg_.delta;
            xs.push_back(xp);
            xs.push_back(xm);
        }
        for (int j = 0; j < d2; ++j) {
            Vec yp = y, ym = y;
            yp[j] += cfg_.delta;
            ym[j] -= cfg_.delta;
            const PathIntegrals up = integrals(mu, yp, nu, xs);
            const PathIntegrals dn = integrals(mu, ym, nu, xs);
            for (int k = 0; k < d1; ++k) {
                // ( [I(x+,y+) - I(x+,y-)] - [I(x-,y+) - I(x-,y-)] ) / (4 delta^2)
                const Eigen::MatrixXd diff =
                    (up.integral[2 * k] - dn.integral[2 * k]) -
                    (up.integral[2 * k + 1] - dn.integral[2 * k + 1]);
                const Eigen::MatrixXd tail =
                    (up.tail[2 * k] - dn.tail[2 * k]) -
                    (up.tail[2 * k + 1] - dn.tail[2 * k + 1]);
                const double scale = 4.0 * cfg_.delta * cfg_.delta;
                for (int i = 0; i < d1; ++i) {
                    const auto ms = column_stats(diff.col(i) / scale, tail.col(i) / scale);
                    out.value[i](j, k) = ms.first;
                    out.stderr_[i](j, k) = ms.second;
                }
            }
        }
        return out;
    }

    MatErr dnu_phi(const Vec& x, const MeasureView& mu, const Vec& y,
                   const ParticleCloud& nu, int particle) override {
        if (particle < 0 || particle >= nu.size())
            throw IndexOutOfRange("dnu_phi particle " + std::to_string(particle));
        const int d1 = model_.d1, d2 = model_.d2;
        const double n = static_cast<double>(nu.size());
        MatErr out{Mat(d1, d2), Mat(d1, d2)};
        for (int j = 0; j < d2; ++j) {
            ParticleCloud nup = nu, num = nu;
            nup.samples(particle, j) += cfg_.delta;
            num.samples(particle, j) -= cfg_.delta;
            const PathIntegrals up = integrals(mu, y, nup, {x});
            const PathIntegrals dn = integrals(mu, y, num, {x});
            const auto [d, se] = reduce_diff(up, dn, 0, 2.0 * cfg_.delta / n);
            out.value.col(j) = d;
            out.stderr_.col(j) = se;
        }
        return out;
    }

    TensErr d2y_phi(const Vec& x, const MeasureView& mu, const Vec& y,
                    const ParticleCloud& nu) override {
        const int d1 = model_.d1, d2 = model_.d2;
        TensErr out;
        out.value.assign(d1, Mat::Zero(d2, d2));
        out.stderr_.assign(d1, Mat::Zero(d2, d2));
        const double h = cfg_.delta2;
        const PathIntegrals base = integrals(mu, y, nu, {x});
        for (int j = 0; j < d2; ++j) {
            Vec yp = y, ym = y;
            yp[j] += h;
            ym[j] -= h;
            const PathIntegrals up = integrals(mu, yp, nu, {x});
            const PathIntegrals dn = integrals(mu, ym, nu, {x});
            for (int i = 0; i < d1; ++i) {
                const Eigen::VectorXd diff =
                    (up.integral[0].col(i) - 2.0 * base.integral[0].col(i) +
                     dn.integral[0].col(i)) /
                    (h * h);
                const Eigen::VectorXd tail =
                    (up.tail[0].col(i) - 2.0 * base.tail[0].col(i) + dn.tail[0].col(i)) /
                    (h * h);
                const auto ms = column_stats(diff, tail);
                out.value[i](j, j) = ms.first;
                out.stderr_[i](j, j) = ms.second;
            }
            for (int j2 = j + 1; j2 < d2; ++j2) {
                Vec ypp = y, ypm = y, ymp = y, ymm = y;
                ypp[j] += h; ypp[j2] += h;
                ypm[j] += h; ypm[j2] -= h;
                ymp[j] -= h; ymp[j2] += h;
                ymm[j] -= h; ymm[j2] -= h;
                const PathIntegrals a = integrals(mu, ypp, nu, {x});
                const PathIntegrals b = integrals(mu, ypm, nu, {x});
                const PathIntegrals c = integrals(mu, ymp, nu, {x});
                const PathIntegrals d = integrals(mu, ymm, nu, {x});
                for (int i = 0; i < d1; ++i) {
                    const Eigen::VectorXd diff =
                        (a.integral[0].col(i) - b.integral[0].col(i) -
                         c.integral[0].col(i) + d.integral[0].col(i)) /
                        (4.0 * h * h);
                    const Eigen::VectorXd tail =
                        (a.tail[0].col(i) - b.tail[0].col(i) - c.tail[0].col(i) +
                         d.tail[0].col(i)) /
                        (4.0 * h * h);
                    const auto ms = column_stats(diff, tail);
                    out.value[i](j, j2) = out.value[i](j2, j) = ms.first;
                    out.stderr_[i](j, j2) = out.stderr_[i](j2, j) = ms.second;
                }
            }
        }
        return out;
    }

    TensErr dnudy_phi(const Vec& x, const MeasureView& mu, const Vec& y,
                      const ParticleCloud& nu, int particle) override {
        if (particle < 0 || particle >= nu.size())
            throw IndexOutOfRange("dnudy_phi particle " + std::to_string(particle));
        const int d1 = model_.d1, d2 = model_.d2;
        const double n = static_cast<double>(nu.size());
        const double h = cfg_.delta2;
        TensErr out;
        out.value.assign(d1, Mat::Zero(d2, d2));
        out.stderr_.assign(d1, Mat::Zero(d2, d2));
        const PathIntegrals base = integrals(mu, y, nu, {x});
        for (int j = 0; j < d2; ++j) {
            ParticleCloud nup = nu, num = nu;
            nup.samples(particle, j) += h;
            num.samples(particle, j) -= h;
            const PathIntegrals up = integrals(mu, y, nup, {x});
            const PathIntegrals dn = integrals(mu, y, num, {x});
            for (int i = 0; i < d1; ++i) {
                const Eigen::VectorXd diff =
                    n *
                    (up.integral[0].col(i) - 2.0 * base.integral[0].col(i) +
                     dn.integral[0].col(i)) /
                    (h * h);
                const Eigen::VectorXd tail =
                    n * (up.tail[0].col(i) - 2.0 * base.tail[0].col(i) +
                         dn.tail[0].col(i)) /
                    (h * h);
                const auto ms = column_stats(diff, tail);
                out.value[i](j, j) = ms.first;
                out.stderr_[i](j, j) = ms.second;
            }
            for (int j2 = j + 1; j2 < d2; ++j2) {
                ParticleCloud npp = nu, npm = nu, nmp = nu, nmm = nu;
                npp.samples(particle, j) += h;  npp.samples(particle, j2) += h;
                npm.samples(particle, j) += h;  npm.samples(particle, j2) -= h;
                nmp.samples(particle, j) -= h;  nmp.samples(particle, j2) += h;
                nmm.samples(particle, j) -= h;  nmm.samples(particle, j2) -= h;
                const PathIntegrals a = integrals(mu, y, npp, {x});
                const PathIntegrals b = integrals(mu, y, npm, {x});
                const PathIntegrals c = integrals(mu, y, nmp, {x});
                const PathIntegrals d = integrals(mu, y, nmm, {x});
                for (int i = 0; i < d1; ++i) {
                    const Eigen::VectorXd diff =
                        n *
                        (a.integral[0].col(i) - b.integral[0].col(i) -
                         c.integral[0].col(i) + d.integral[0].col(i)) /
                        (4.0 * h * h);
                    const Eigen::VectorXd tail =
                        n * (a.tail[0].col(i) - b.tail[0].col(i) - c.tail[0].col(i) +
                             d.tail[0].col(i)) /
                        (4.0 * h * h);
                    const auto ms = column_stats(diff, tail);
                    out.value[i](j, j2) = out.value[i](j2, j) = ms.first;
                    out.stderr_[i](j, j2) = out.stderr_[i](j2, j) = ms.second;
                }
            }
        }
        return out;
    }

private:
    struct PathIntegrals {
        // one M x d1 matrix per requested x parameter
        std::vector<Eigen::MatrixXd> integral;
        std::vector<Eigen::MatrixXd> tail;  // contribution of [T/2, T]
        std::vector<double> track;          // |mean_m deltaF| per step, first x only
    };

    // Simulate the auxiliary cloud (frozen dynamics from nu) and M de-coupled
    // inner paths from y; integrate deltaF for every requested x. The noise
    // plan depends only on cfg_.seed, which realizes common random numbers
    // across perturbed evaluations. Cached by input content.
    PathIntegrals integrals(const MeasureView& mu, const Vec& y, const ParticleCloud& nu,
                            const std::vector<Vec>& xs) {
        const std::uint64_t key = cache_key(mu, y, nu, xs);
        {
            std::lock_guard<std::mutex> lk(cache_mu_);
            auto it = cache_.find(key);
            if (it != cache_.end()) return it->second;
        }

        const int d1 = model_.d1, d2 = model_.d2;
        const int M = cfg_.inner_replicas;
        const double dt = cfg_.dt;
        const auto steps = static_cast<std::uint64_t>(std::llround(cfg_.t_infinity / dt));
        const std::uint64_t half = steps / 2;
        NoisePlan plan{cfg_.seed, 0, dt};

        ParticleCloud aux = nu;
        Eigen::MatrixXd inner(M, d2);
        for (int m = 0; m < M; ++m) inner.row(m) = y.transpose();

        PathIntegrals out;
        out.integral.assign(xs.size(), Eigen::MatrixXd::Zero(M, d1));
        out.tail.assign(xs.size(), Eigen::MatrixXd::Zero(M, d1));
        std::vector<Vec> fbar_x;
        fbar_x.reserve(xs.size());
        for (const Vec& x : xs) fbar_x.push_back(fbar_(x, mu));

        out.track.reserve(steps + 1);
        for (std::uint64_t s = 0; s <= steps; ++s) {
            const MeasureView nut = MeasureView::of(aux);
            const double w = (s == 0 || s == steps) ? 0.5 * dt : dt; // trapezoid
            Vec track_acc = Vec::Zero(d1);
            for (int m = 0; m < M; ++m) {
                const Vec ym = inner.row(m).transpose();
                for (std::size_t xi = 0; xi < xs.size(); ++xi) {
                    const Vec df = model_.F(xs[xi], mu, ym, nut) - fbar_x[xi];
                    out.integral[xi].row(m) += w * df.transpose();
                    if (s >= half) out.tail[xi].row(m) += w * df.transpose();
                    if (xi == 0) track_acc += df;
                }
            }
            out.track.push_back((track_acc / M).norm());
            if (s == steps) break;
            // advance inner paths against the current auxiliary law
            for (int m = 0; m < M; ++m) {
                const Vec ym = inner.row(m).transpose();
                const std::uint64_t pid = static_cast<std::uint64_t>(m);
                const Vec dW1 = plan.increment(pid, NoiseTag::InnerW1, s, d1);
                const Vec dW2 = plan.increment(pid, NoiseTag::InnerW2, s, d2);
                inner.row(m) += (model_.b(mu, ym, nut) * dt +
                                 model_.sigma1(mu, ym, nut) * dW1 +
                                 model_.sigma2(mu, ym, nut) * dW2)
                                    .transpose();
            }
            // advance the auxiliary cloud
            Eigen::MatrixXd aux_next = aux.samples;
            for (int i = 0; i < aux.size(); ++i) {
                const Vec yi = aux.point(i);
                const std::uint64_t pid = static_cast<std::uint64_t>(i);
                const Vec dW1 = plan.increment(pid, NoiseTag::AuxW1, s, d1);
                const Vec dW2 = plan.increment(pid, NoiseTag::AuxW2, s, d2);
                aux_next.row(i) += (model_.b(mu, yi, nut) * dt +
                                    model_.sigma1(mu, yi, nut) * dW1 +
                                    model_.sigma2(mu, yi, nut) * dW2)
                                       .transpose();
            }
            aux.samples = std::move(aux_next);
        }

        std::lock_guard<std::mutex> lk(cache_mu_);
        auto [it, inserted] = cache_.emplace(key, std::move(out));
        return it->second;
    }

    // mean and combined stderr (spread + tail magnitude) of one column set
    std::pair<double, double> column_stats(const Eigen::VectorXd& vals,
                                           const Eigen::VectorXd& tails) const {
        const int M = static_cast<int>(vals.size());
        const double mean = vals.mean();
        double var = 0.0;
        for (int m = 0; m < M; ++m) var += (vals[m] - mean) * (vals[m] - mean);
        const double se_mc = M > 1 ? std::sqrt(var / (M - 1) / M) : 0.0;
        const double tail = std::abs(tails.mean());
        return {mean, std::sqrt(se_mc * se_mc + tail * tail)};
    }

    std::pair<Vec, Vec> reduce(const PathIntegrals& p, std::size_t xi) const {
        const int d1 = model_.d1;
        Vec mean(d1), se(d1);
        for (int i = 0; i < d1; ++i) {
            const auto ms = column_stats(p.integral[xi].col(i), p.tail[xi].col(i));
            mean[i] = ms.first;
            se[i] = ms.second;
        }
        return {mean, se};
    }

    std::pair<Vec, Vec> reduce_diff(const PathIntegrals& up, const PathIntegrals& dn,
                                    std::size_t xi, double denom) const {
        const int d1 = model_.d1;
        Vec mean(d1), se(d1);
        for (int i = 0; i < d1; ++i) {
            const Eigen::VectorXd diff = (up.integral[xi].col(i) - dn.integral[xi].col(i)) / denom;
            const Eigen::VectorXd tail = (up.tail[xi].col(i) - dn.tail[xi].col(i)) / denom;
            const auto ms = column_stats(diff, tail);
            mean[i] = ms.first;
            se[i] = ms.second;
        }
        return {mean, se};
    }

    void check_noise(const Mat& value, const Mat& se, const char* what) const {
        // noise-dominated differences are an error only when the noise is
        // also large in absolute terms; a clean zero derivative stays legal
        for (int i = 0; i < value.rows(); ++i)
            for (int j = 0; j < value.cols(); ++j)
                if (se(i, j) > cfg_.noise_floor &&
                    se(i, j) > 0.5 * std::abs(value(i, j)))
                    throw StepTooSmall(std::string(what) +
                                       ": stderr exceeds half the difference");
    }

    std::uint64_t cache_key(const MeasureView& mu, const Vec& y, const ParticleCloud& nu,
                            const std::vector<Vec>& xs) const {
        auto hash_doubles = [](std::uint64_t h, const double* d, std::size_t n) {
            for (std::size_t i = 0; i < n; ++i) {
                std::uint64_t bits;
                std::memcpy(&bits, d + i, sizeof(bits));
                h = detail::combine(h, bits);
            }
            return h;
        };
        std::uint64_t h = detail::combine(model_.fingerprint, cfg_.seed);
        h = hash_doubles(h, mu.mean.data(), static_cast<std::size_t>(mu.mean.size()));
        h = detail::combine(h, static_cast<std::uint64_t>(mu.pts->rows()));
        h = hash_doubles(h, y.data(), static_cast<std::size_t>(y.size()));
        h = detail::combine(h, nu.content_hash());
        for (const Vec& x : xs)
            h = hash_doubles(h, x.data(), static_cast<std::size_t>(x.size()));
        return h;
    }

    const ModelSpec& model_;
    FbarFn fbar_;
    FKConfig cfg_;
    bool tail_flagged_ = false;
    mutable std::mutex cache_mu_;
    std::unordered_map<std::uint64_t, PathIntegrals> cache_;
};

/// Phi at one point through the integral representation; convenience wrapper
/// matching the operation-level signature.
inline VecErr solve_poisson_feynman_kac(const ModelSpec& model, const FbarFn& fbar,
                                        const Vec& x, const MeasureView& mu, const Vec& y,
                                        const ParticleCloud& nu, const FKConfig& cfg = {}) {
    FeynmanKacCorrector fk(model, fbar, cfg);
    return fk.phi(x, mu, y, nu);
}

// ---------------------------------------------------------------------------
// Averaged coefficients
// ---------------------------------------------------------------------------

/// Closed-form averaged coefficients of the linear benchmark.
inline AveragedCoefficients closed_form_averaged(const LinearBenchmark& bench) {
    bench.validate();
    const double mean_coef = bench.Abar + (bench.B + bench.Bbar) * bench.b1 /
                                              (bench.kappa - bench.b2);
    AveragedCoefficients avg;
    avg.Fbar = [bench, mean_coef](const Vec& x, const MeasureView& mu) {
        Vec v(1);
        v[0] = bench.A * x[0] + mean_coef * mu.mean[0];
        return v;
    };
    avg.Gbar = [bench](const Vec& x, const MeasureView&) {
        Mat g(1, 1);
        g(0, 0) = bench.g0 + bench.g1 * x[0];
        return g;
    };
    avg.dxFbar = [bench](const Vec&, const MeasureView&) {
        Mat d(1, 1);
        d(0, 0) = bench.A;
        return d;
    };
    avg.dmuFbar.x_tilde_independent = true;
    avg.dmuFbar.K = [mean_coef](const Vec&, const MeasureView&, const Vec&) {
        Mat d(1, 1);
        d(0, 0) = mean_coef;
        return d;
    };
    avg.dxG_contract = [bench](const Vec&, const MeasureView&, const Vec& z) {
        Mat d(1, 1);
        d(0, 0) = bench.g1 * z[0];
        return d;
    };
    avg.dmuG_zero = true;
    return avg;
}

struct AveragedConfig {
    InvariantConfig invariant;
    double fd_delta_x = 1e-4;
    double fd_delta_mu = 1e-3;
};

/// Monte Carlo averaged coefficients for a general model: Fbar averages F
/// over the cached invariant cloud, Gbar freezes nu at it. The Lions
/// derivative re-solves the invariant measure for each perturbed slow cloud
/// with shared noise, which is the cost hotspot; results are cached by cloud
/// content inside the ZetaCache.
inline AveragedCoefficients monte_carlo_averaged(const ModelSpec& model,
                                                 std::shared_ptr<ZetaCache> cache,
                                                 const NoisePlan& plan,
                                                 const AveragedConfig& cfg = {}) {
    auto zeta_for = [&model, cache, plan, cfg](const MeasureView& mu) {
        ParticleCloud mu_cloud(*mu.pts);
        return cache->get_or_compute(model, mu_cloud, plan, cfg.invariant);
    };
    AveragedCoefficients avg;
    avg.Fbar = [&model, zeta_for](const Vec& x, const MeasureView& mu) {
        const auto zeta = zeta_for(mu);
        const MeasureView nu = MeasureView::of(zeta->zeta);
        Vec acc = Vec::Zero(model.d1);
        for (int k = 0; k < zeta->zeta.size(); ++k)
            acc += model.F(x, mu, zeta->zeta.point(k), nu);
        return Vec(acc / zeta->zeta.size());
    };
    avg.Gbar = [&model, zeta_for](const Vec& x, const MeasureView& mu) {
        const auto zeta = zeta_for(mu);
        return model.G(x, mu, MeasureView::of(zeta->zeta));
    };
    avg.dxFbar = [&model, avgF = avg.Fbar, cfg](const Vec& x, const MeasureView& mu) {
        Mat d(model.d1, model.d1);
        for (int k = 0; k < model.d1; ++k) {
            Vec xp = x, xm = x;
            xp[k] += cfg.fd_delta_x;
            xm[k] -= cfg.fd_delta_x;
            d.col(k) = (avgF(xp, mu) - avgF(xm, mu)) / (2.0 * cfg.fd_delta_x);
        }
        return d;
    };
    avg.dmuFbar.x_tilde_independent = false;
    avg.dmuFbar.K = [&model, avgF = avg.Fbar, cfg](const Vec& x, const MeasureView& mu,
                                                   const Vec& xt) {
        // empirical Lions derivative: shift the nearest cloud particle
        ParticleCloud base(*mu.pts);
        int at = 0;
        double best = std::numeric_limits<double>::infinity();
        for (int i = 0; i < base.size(); ++i) {
            const double dist = (base.point(i) - xt).squaredNorm();
            if (dist < best) {
                best = dist;
                at = i;
            }
        }
        Mat d(model.d1, model.d1);
        for (int c = 0; c < model.d1; ++c) {
            ParticleCloud up = base, dn = base;
            up.samples(at, c) += cfg.fd_delta_mu;
            dn.samples(at, c) -= cfg.fd_delta_mu;
            d.col(c) = base.size() *
                       (avgF(x, MeasureView::of(up)) - avgF(x, MeasureView::of(dn))) /
                       (2.0 * cfg.fd_delta_mu);
        }
        return d;
    };
    avg.dxG_contract = [&model, avgG = avg.Gbar, cfg](const Vec& x, const MeasureView& mu,
                                                      const Vec& z) {
        Mat acc = Mat::Zero(model.d1, model.d1);
        for (int k = 0; k < model.d1; ++k) {
            Vec xp = x, xm = x;
            xp[k] += cfg.fd_delta_x;
            xm[k] -= cfg.fd_delta_x;
            acc += (avgG(xp, mu) - avgG(xm, mu)) / (2.0 * cfg.fd_delta_x) * z[k];
        }
        return acc;
    };
    avg.dmuG_zero = false;
    avg.dmuG_contract = [&model, avgG = avg.Gbar, cfg](const Vec& x, const MeasureView& mu,
                                                       const Vec& xt, const Vec& zt) {
        ParticleCloud base(*mu.pts);
        int at = 0;
        double best = std::numeric_limits<double>::infinity();
        for (int i = 0; i < base.size(); ++i) {
            const double dist = (base.point(i) - xt).squaredNorm();
            if (dist < best) {
                best = dist;
                at = i;
            }
        }
        Mat acc = Mat::Zero(model.d1, model.d1);
        for (int c = 0; c < model.d1; ++c) {
            ParticleCloud up = base, dn = base;
            up.samples(at, c) += cfg.fd_delta_mu;
            dn.samples(at, c) -= cfg.fd_delta_mu;
            acc += base.size() *
                   (avgG(x, MeasureView::of(up)) - avgG(x, MeasureView::of(dn))) /
                   (2.0 * cfg.fd_delta_mu) * zt[c];
        }
        return acc;
    };
    return avg;
}

// ---------------------------------------------------------------------------
// Limit coefficient assembly
// ---------------------------------------------------------------------------

/// Audit record of one assembled average.
struct AssembledValue {
    std::string name;
    Mat value;
    Mat stderr_;
};

struct AssembleConfig {
    int sample_points = 16;   // points drawn from the invariant cloud
    int pair_points = 4;      // distinct-index pairs of the double average
    double psd_guard = 1e-6;  // NonPSDSigma below -max(guard, 3 stderr)
};

struct AssembledLimit {
    LimitCoefficients coefficients;
    std::vector<AssembledValue> audit; // filled at the assembly point
    Mat Sigma;                         // at the assembly x
    Mat Sigma_stderr;
    Mat dyPhi_sigma1;
    Mat dyPhi_sigma1_stderr;
};

/// Monte Carlo averages over the invariant cloud of the six corrector
/// products, evaluated at one (x, mu) and frozen into constant evaluators.
/// The sigma1 block of Sigma is the unbiased covariance of dyPhi sigma1 over
/// the sampled points (PSD by construction); the sigma2 block is the plain
/// second moment, not centered.
inline AssembledLimit assemble_limit_coefficients(const ModelSpec& model, Corrector& field,
                                                  const Vec& x_at, const ParticleCloud& mu_cloud,
                                                  const InvariantEstimate& zeta,
                                                  const AssembleConfig& cfg = {}) {
    if (!model.clt_compatible)
        throw NotCLTCompatible("assemble_limit_coefficients requires nu-free G");
    if (!zeta.converged)
        throw Unconverged("assemble_limit_coefficients requires a converged zeta");

    const int d1 = model.d1;
    const MeasureView mu = MeasureView::of(mu_cloud);
    const MeasureView zv = MeasureView::of(zeta.zeta);
    const int K = std::min(cfg.sample_points, zeta.zeta.size());
    const int stride = std::max(1, zeta.zeta.size() / K);

    std::vector<int> idx;
    for (int k = 0; k < K; ++k) idx.push_back(k * stride);

    // per-sample corrector products
    std::vector<Mat> s1_samples, s1_noise; // dyPhi . sigma1  (d1 x d1)
    std::vector<Mat> s2_samples, s2_noise; // dyPhi . sigma2  (d1 x d2)
    std::vector<Vec> bc1_samples;
    std::vector<Vec> bc1_noise;
    Vec bG = Vec::Zero(d1), bG_noise = Vec::Zero(d1);
    const Mat G_at = model.G(x_at, mu, zv);

    for (int k : idx) {
        const Vec yk = zeta.zeta.point(k);
        const MatErr dy = field.dy_phi(x_at, mu, yk, zeta.zeta);
        const Mat sig1 = model.sigma1(mu, yk, zv);
        const Mat sig2 = model.sigma2(mu, yk, zv);
        s1_samples.push_back(dy.value * sig1);
        s1_noise.push_back(dy.stderr_ * sig1.cwiseAbs());
        s2_samples.push_back(dy.value * sig2);
        s2_noise.push_back(dy.stderr_ * sig2.cwiseAbs());
        const Vec ck = model.c(x_at, mu, yk, zv);
        bc1_samples.push_back(dy.value * ck);
        bc1_noise.push_back(dy.stderr_.cwiseAbs() * ck.cwiseAbs());

        const TensErr dxdy = field.dxdy_phi(x_at, mu, yk, zeta.zeta);
        for (int i = 0; i < d1; ++i) {
            bG[i] += (sig1.transpose() * dxdy.value[i] * G_at).trace() / K;
            bG_noise[i] += (sig1.cwiseAbs().transpose() * dxdy.stderr_[i] *
                            G_at.cwiseAbs())
                               .trace() /
                           K;
        }
    }

    auto mat_mean = [](const std::vector<Mat>& xs) {
        Mat acc = Mat::Zero(xs.front().rows(), xs.front().cols());
        for (const Mat& m : xs) acc += m;
        return Mat(acc / xs.size());
    };
    auto mat_spread = [](const std::vector<Mat>& xs, const Mat& mean) {
        Mat acc = Mat::Zero(mean.rows(), mean.cols());
        for (const Mat& m : xs) acc += (m - mean).cwiseAbs2();
        const int n = static_cast<int>(xs.size());
        return Mat((acc / std::max(1, n - 1) / n).cwiseSqrt());
    };

    // per-point noise is shared across samples through the common random
    // numbers, so it enters the mean's uncertainty unreduced
    const Mat s1_mean = mat_mean(s1_samples);
    const Mat s1_se = mat_spread(s1_samples, s1_mean) + mat_mean(s1_noise);

    // Sigma: covariance of the sigma1 products + second moment of the sigma2 products
    Mat Sigma = Mat::Zero(d1, d1);
    for (const Mat& s : s1_samples)
        Sigma += (s - s1_mean) * (s - s1_mean).transpose();
    if (K > 1) Sigma /= (K - 1);
    Mat sigma2_quad = Mat::Zero(d1, d1);
    for (const Mat& s : s2_samples) sigma2_quad += s * s.transpose();
    sigma2_quad /= static_cast<double>(K);
    Sigma += sigma2_quad;
    Sigma = 0.5 * (Sigma + Sigma.transpose());

    // uncertainty of Sigma: spread of the quadratic samples plus the
    // estimator-noise bias of the covariance block
    Mat Sigma_se = Mat::Zero(d1, d1);
    {
        std::vector<Mat> quads;
        for (std::size_t k = 0; k < s1_samples.size(); ++k) {
            const Mat cs = s1_samples[k] - s1_mean;
            quads.push_back(cs * cs.transpose() + s2_samples[k] * s2_samples[k].transpose());
        }
        const Mat qmean = mat_mean(quads);
        Sigma_se = mat_spread(quads, qmean);
        Mat noise_bias = Mat::Zero(d1, d1);
        for (const Mat& nz : s1_noise) noise_bias += nz * nz.transpose();
        for (std::size_t k = 0; k < s2_samples.size(); ++k)
            noise_bias += s2_noise[k] * s2_noise[k].transpose() +
                          2.0 * (s2_samples[k].cwiseAbs() * s2_noise[k].transpose());
        Sigma_se += noise_bias.cwiseAbs() / K;
    }

    Eigen::SelfAdjointEigenSolver<Mat> eig(Sigma);
    const double lam_min = eig.eigenvalues().minCoeff();
    const double guard = std::max(cfg.psd_guard, 3.0 * Sigma_se.norm());
    if (lam_min < -guard)
        throw NonPSDSigma("assembled Sigma eigenvalue " + std::to_string(lam_min) +
                          "; increase inner replicas");
    const Mat sqrt_sigma = sqrt_psd(Sigma, guard);

    Vec bc1 = Vec::Zero(d1), bc1_se = Vec::Zero(d1);
    {
        Vec acc = Vec::Zero(d1);
        for (const Vec& v : bc1_samples) acc += v;
        bc1 = acc / bc1_samples.size();
        Vec spread = Vec::Zero(d1);
        for (const Vec& v : bc1_samples) spread += (v - bc1).cwiseAbs2();
        bc1_se = (spread / std::max<std::size_t>(1, bc1_samples.size() - 1) /
                  bc1_samples.size())
                     .cwiseSqrt();
        for (const Vec& nz : bc1_noise) bc1_se += nz / K; // shared-noise mean
    }

    // double average (bc2): U-statistic over distinct (y, y~) index pairs
    // realized through the Lions derivative at distinct cloud particles
    const int Kpairs = std::min(K, cfg.pair_points);
    Vec bc2 = Vec::Zero(d1), bc2_se = Vec::Zero(d1);
    {
        std::vector<Vec> terms;
        for (int a = 0; a < Kpairs; ++a) {
            const Vec yk = zeta.zeta.point(idx[a]);
            for (int b2 = 0; b2 < Kpairs; ++b2) {
                if (a == b2) continue;
                const int l = idx[b2];
                const MatErr dnu = field.dnu_phi(x_at, mu, yk, zeta.zeta, l);
                const Vec cl = model.c(x_at, mu, zeta.zeta.point(l), zv);
                terms.push_back(dnu.value * cl);
            }
        }
        Vec acc = Vec::Zero(d1);
        for (const Vec& v : terms) acc += v;
        if (!terms.empty()) bc2 = acc / terms.size();
        Vec spread = Vec::Zero(d1);
        for (const Vec& v : terms) spread += (v - bc2).cwiseAbs2();
        if (terms.size() > 1)
            bc2_se = (spread / (terms.size() - 1) / terms.size()).cwiseSqrt();
    }

    AssembledLimit out;
    out.Sigma = Sigma;
    out.Sigma_stderr = Sigma_se;
    out.dyPhi_sigma1 = s1_mean;
    out.dyPhi_sigma1_stderr = s1_se;
    out.audit = {
        {"cbar_dyPhi", bc1, bc1_se},
        {"cbarbar_dnuPhi", bc2, bc2_se},
        {"sigma1_dxdyPhi_G", bG, bG_noise},
        {"dyPhi_sigma1", s1_mean, s1_se},
        {"Sigma", Sigma, Sigma_se},
    };
    out.coefficients.cbar_dyPhi = [bc1](const Vec&, const MeasureView&) { return bc1; };
    out.coefficients.cbarbar_dnuPhi.x_tilde_independent = true;
    out.coefficients.cbarbar_dnuPhi.K = [bc2](const Vec&, const MeasureView&, const Vec&) {
        return bc2;
    };
    out.coefficients.sigma1_dxdyPhi_G = [bG](const Vec&, const MeasureView&) { return bG; };
    out.coefficients.dyPhi_sigma1 = [s1_mean](const Vec&, const MeasureView&) {
        return s1_mean;
    };
    out.coefficients.Sigma = [Sigma](const Vec&, const MeasureView&) { return Sigma; };
    out.coefficients.sqrtSigma = [sqrt_sigma](const Vec&, const MeasureView&) {
        return sqrt_sigma;
    };
    return out;
}

/// Closed-form limit coefficients of the benchmark; every average is constant.
inline LimitCoefficients closed_form_limit_coefficients(const LinearBenchmark& bench) {
    const auto [p, q] = benchmark_corrector(bench);
    const double bc1 = bench.c0 * p;
    const double bc2 = bench.c0 * q;
    const double s1bar = p * bench.s1;
    const double sigma = p * p * bench.s2 * bench.s2;

    LimitCoefficients lim;
    lim.cbar_dyPhi = [bc1](const Vec&, const MeasureView&) {
        Vec v(1);
        v[0] = bc1;
        return v;
    };
    lim.cbarbar_dnuPhi.x_tilde_independent = true;
    lim.cbarbar_dnuPhi.K = [bc2](const Vec&, const MeasureView&, const Vec&) {
        Vec v(1);
        v[0] = bc2;
        return v;
    };
    lim.sigma1_dxdyPhi_G = [](const Vec&, const MeasureView&) { return Vec::Zero(1); };
    lim.dyPhi_sigma1 = [s1bar](const Vec&, const MeasureView&) {
        Mat m(1, 1);
        m(0, 0) = s1bar;
        return m;
    };
    lim.Sigma = [sigma](const Vec&, const MeasureView&) {
        Mat m(1, 1);
        m(0, 0) = sigma;
        return m;
    };
    lim.sqrtSigma = [sigma](const Vec&, const MeasureView&) {
        Mat m(1, 1);
        m(0, 0) = std::sqrt(sigma);
        return m;
    };
    return lim;
}

// ---------------------------------------------------------------------------
// Poisson residual
// ---------------------------------------------------------------------------

/// Evaluates the generator applied to the corrector plus the centered drift:
///   1/2 Tr(a d2y Phi) + b . dy Phi
///   + (1/|S|) sum_{k in S} [ 1/2 Tr(a(y_k) dnudy Phi(y_k)) + b(y_k) . dnu Phi(y_k) ]
///   + deltaF,
/// which vanishes for the exact corrector. The nu-integral may be subsampled.
inline VecErr poisson_residual(const ModelSpec& model, Corrector& field, const FbarFn& fbar,
                               const Vec& x, const MeasureView& mu, const Vec& y,
                               const ParticleCloud& nu, int nu_subsample = 0) {
    const int d1 = model.d1;
    const MeasureView nuv = MeasureView::of(nu);
    const Mat sig1 = model.sigma1(mu, y, nuv);
    const Mat sig2 = model.sigma2(mu, y, nuv);
    const Mat a = sig1 * sig1.transpose() + sig2 * sig2.transpose();

    Vec res = Vec::Zero(d1);
    Vec var = Vec::Zero(d1);

    const TensErr d2y = field.d2y_phi(x, mu, y, nu);
    const MatErr dy = field.dy_phi(x, mu, y, nu);
    const Vec b = model.b(mu, y, nuv);
    for (int i = 0; i < d1; ++i) {
        res[i] += 0.5 * (a * d2y.value[i]).trace();
        var[i] += std::pow(0.5 * (a.cwiseAbs() * d2y.stderr_[i]).trace(), 2);
        res[i] += dy.value.row(i).dot(b);
        var[i] += std::pow(dy.stderr_.row(i).cwiseAbs().dot(b.cwiseAbs()), 2);
    }

    const int n = nu.size();
    const int take = nu_subsample > 0 ? std::min(nu_subsample, n) : n;
    const int stride = std::max(1, n / take);
    int used = 0;
    Vec integral = Vec::Zero(d1), integral_var = Vec::Zero(d1);
    for (int k = 0; k < n && used < take; k += stride, ++used) {
        const Vec yk = nu.point(k);
        const Mat s1k = model.sigma1(mu, yk, nuv);
        const Mat s2k = model.sigma2(mu, yk, nuv);
        const Mat ak = s1k * s1k.transpose() + s2k * s2k.transpose();
        const Vec bk = model.b(mu, yk, nuv);
        const TensErr dnudy = field.dnudy_phi(x, mu, y, nu, k);
        const MatErr dnu = field.dnu_phi(x, mu, y, nu, k);
        for (int i = 0; i < d1; ++i) {
            integral[i] += 0.5 * (ak * dnudy.value[i]).trace() + dnu.value.row(i).dot(bk);
            integral_var[i] +=
                std::pow(0.5 * (ak.cwiseAbs() * dnudy.stderr_[i]).trace(), 2) +
                std::pow(dnu.stderr_.row(i).cwiseAbs().dot(bk.cwiseAbs()), 2);
        }
    }
    res += integral / used;
    var += integral_var / (static_cast<double>(used) * used);

    res += model.F(x, mu, y, nuv) - fbar(x, mu);
    return {res, var.cwiseSqrt()};
}

} // namespace mvsf
