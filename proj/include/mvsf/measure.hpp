#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <vector>

#include <Eigen/Dense>

#include "mvsf/errors.hpp"
#include "mvsf/rng.hpp"

namespace mvsf {

/// Empirical probability measure: N equally weighted samples in R^dim.
struct ParticleCloud {
    Eigen::MatrixXd samples; // N x dim

    ParticleCloud() = default;
    explicit ParticleCloud(Eigen::MatrixXd s) : samples(std::move(s)) {}

    int size() const { return static_cast<int>(samples.rows()); }
    int dim() const { return static_cast<int>(samples.cols()); }

    Vec point(int i) const { return samples.row(i).transpose(); }

    bool all_finite() const { return samples.allFinite(); }

    static ParticleCloud zeros(int n, int dim) {
        return ParticleCloud(Eigen::MatrixXd::Zero(n, dim));
    }

    static ParticleCloud point_mass(const Vec& x, int n) {
        Eigen::MatrixXd s(n, x.size());
        for (int i = 0; i < n; ++i) s.row(i) = x.transpose();
        return ParticleCloud(std::move(s));
    }

    static ParticleCloud gaussian(int n, int dim, const NoisePlan& plan,
                                  NoiseTag tag, double mean = 0.0,
                                  double stddev = 1.0) {
        Eigen::MatrixXd s(n, dim);
        for (int i = 0; i < n; ++i)
            for (int c = 0; c < dim; ++c)
                s(i, c) = mean + stddev * plan.gaussian(static_cast<std::uint64_t>(i),
                                                        tag, static_cast<std::uint64_t>(c));
        return ParticleCloud(std::move(s));
    }

    /// FNV-1a over the raw sample bytes; used as a cache key.
    std::uint64_t content_hash() const {
        const auto* bytes = reinterpret_cast<const unsigned char*>(samples.data());
        const std::size_t nbytes = sizeof(double) * static_cast<std::size_t>(samples.size());
        std::uint64_t h = 0xcbf29ce484222325ull;
        for (std::size_t i = 0; i < nbytes; ++i) {
            h ^= bytes[i];
            h *= 0x100000001b3ull;
        }
        h = detail::combine(h, static_cast<std::uint64_t>(samples.rows()));
        return h;
    }
};

/// Lightweight view of a cloud handed to coefficient evaluators. The mean is
/// computed once per step so per-particle evaluations stay O(1) for models
/// that interact through the mean.
struct MeasureView {
    const Eigen::MatrixXd* pts = nullptr;
    Vec mean;

    static MeasureView of(const ParticleCloud& c) {
        MeasureView v;
        v.pts = &c.samples;
        v.mean = c.samples.colwise().mean().transpose();
        return v;
    }

    int size() const { return static_cast<int>(pts->rows()); }
    int dim() const { return static_cast<int>(pts->cols()); }
    Vec point(int i) const { return pts->row(i).transpose(); }
};

inline Vec empirical_mean(const ParticleCloud& c) {
    return c.samples.colwise().mean().transpose();
}

inline double empirical_second_moment(const ParticleCloud& c) {
    return c.samples.array().square().rowwise().sum().mean();
}

inline double empirical_fourth_moment(const ParticleCloud& c) {
    return c.samples.array().square().rowwise().sum().square().mean();
}

// ---------------------------------------------------------------------------
// Wasserstein-2 distance
// ---------------------------------------------------------------------------

enum class W2Mode { Auto, Exact, Sliced };

struct W2Result {
    double value = 0.0;
    bool exact = true;
    int projections = 0; // > 0 when the sliced estimator was used

    operator double() const { return value; }
};

namespace detail {

// Exact 1d W2 between equal-weight empirical measures via the quantile
// coupling; handles unequal sample counts through the merged quantile grid.
inline double w2_sorted_1d(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    std::vector<double> xs(a.data(), a.data() + a.rows());
    std::vector<double> ys(b.data(), b.data() + b.rows());
    std::sort(xs.begin(), xs.end());
    std::sort(ys.begin(), ys.end());
    const std::size_t n = xs.size(), m = ys.size();
    if (n == m) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += (xs[i] - ys[i]) * (xs[i] - ys[i]);
        return std::sqrt(s / static_cast<double>(n));
    }
    // integrate |F_a^{-1}(u) - F_b^{-1}(u)|^2 over the merged breakpoints
    double s = 0.0, u = 0.0;
    std::size_t i = 0, j = 0;
    while (i < n && j < m) {
        const double ua = static_cast<double>(i + 1) / static_cast<double>(n);
        const double ub = static_cast<double>(j + 1) / static_cast<double>(m);
        const double next = std::min(ua, ub);
        const double d = xs[i] - ys[j];
        s += d * d * (next - u);
        u = next;
        if (ua <= next) ++i;
        if (ub <= next) ++j;
    }
    return std::sqrt(s);
}

// Shortest-augmenting-path assignment (Jonker-Volgenant style), O(n^3).
// cost is n x n; returns the minimal total cost.
inline double solve_assignment(const Eigen::MatrixXd& cost) {
    const int n = static_cast<int>(cost.rows());
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
    std::vector<int> p(n + 1, 0), way(n + 1, 0);
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(n + 1, inf);
        std::vector<char> used(n + 1, false);
        do {
            used[j0] = true;
            const int i0 = p[j0];
            double delta = inf;
            int j1 = 0;
            for (int j = 1; j <= n; ++j) {
                if (used[j]) continue;
                const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (int j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const int j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0);
    }
    double total = 0.0;
    for (int j = 1; j <= n; ++j) total += cost(p[j] - 1, j - 1);
    return total;
}

inline std::uint64_t lcm_capped(std::uint64_t a, std::uint64_t b, std::uint64_t cap) {
    const std::uint64_t g = std::gcd(a, b);
    const std::uint64_t l = a / g * b;
    return l > cap ? cap + 1 : l;
}

} // namespace detail

inline constexpr int kExactW2CostCap = 4096; // max cost-matrix entries for exact mode

/// W2 between two equal-weight clouds. dim 1 is exact via sorted pairing; for
/// dim >= 2 instances whose cost matrix fits under the cap it is exact via
/// optimal assignment (unequal sizes handled by common-multiple replication);
/// anything larger falls back to a sliced estimate, flagged in the result.
inline W2Result wasserstein2(const ParticleCloud& a, const ParticleCloud& b,
                             W2Mode mode = W2Mode::Auto, int projections = 64,
                             RngStream* dirs = nullptr) {
    if (a.dim() != b.dim())
        throw DimensionMismatch("wasserstein2: dims " + std::to_string(a.dim()) +
                                " vs " + std::to_string(b.dim()));
    const int d = a.dim();
    if (mode != W2Mode::Sliced && d == 1)
        return {detail::w2_sorted_1d(a.samples, b.samples), true, 0};

    const std::uint64_t n = static_cast<std::uint64_t>(a.size());
    const std::uint64_t m = static_cast<std::uint64_t>(b.size());
    const std::uint64_t L = detail::lcm_capped(n, m, kExactW2CostCap);
    const bool fits = (L * L <= kExactW2CostCap);
    if (mode == W2Mode::Exact && !fits)
        throw SizeCapExceeded("wasserstein2: exact mode needs cost matrix <= " +
                              std::to_string(kExactW2CostCap) + " entries");
    if (mode != W2Mode::Sliced && fits) {
        const int ln = static_cast<int>(L);
        Eigen::MatrixXd cost(ln, ln);
        for (int i = 0; i < ln; ++i) {
            const auto ai = a.samples.row(i % a.size());
            for (int j = 0; j < ln; ++j)
                cost(i, j) = (ai - b.samples.row(j % b.size())).squaredNorm();
        }
        const double total = detail::solve_assignment(cost);
        return {std::sqrt(total / static_cast<double>(ln)), true, 0};
    }

    // sliced estimate: mean squared 1d distance over random directions
    NoisePlan fallback{0x51ced, 0, 1.0};
    RngStream local(fallback, 0, NoiseTag::Projection);
    RngStream& rs = dirs ? *dirs : local;
    double acc = 0.0;
    for (int k = 0; k < projections; ++k) {
        Vec theta(d);
        for (int c = 0; c < d; ++c) theta[c] = rs.normal();
        const double nrm = theta.norm();
        theta = nrm > 0 ? Vec(theta / nrm) : Vec(Vec::Unit(d, 0));
        Eigen::MatrixXd pa = a.samples * theta;
        Eigen::MatrixXd pb = b.samples * theta;
        const double w = detail::w2_sorted_1d(pa, pb);
        acc += w * w;
    }
    return {std::sqrt(acc / projections), false, projections};
}

// ---------------------------------------------------------------------------
// Cylinder functionals and Lions derivatives
// ---------------------------------------------------------------------------

/// u(mu) = g(int h dmu) with analytic gradients; h: R^d -> R^k, g: R^k -> R.
struct CylinderFunctional {
    int dim = 1;      // domain of h
    int k = 1;        // range of h
    std::function<Vec(const Vec&)> h;        // R^d -> R^k
    std::function<Mat(const Vec&)> grad_h;   // k x d Jacobian
    std::function<double(const Vec&)> g;     // R^k -> R
    std::function<Vec(const Vec&)> grad_g;   // R^k
    std::function<Mat(const Vec&)> hess_g;   // k x k

    Vec h_integral(const ParticleCloud& cloud) const {
        Vec s = Vec::Zero(k);
        for (int i = 0; i < cloud.size(); ++i) s += h(cloud.point(i));
        return s / cloud.size();
    }

    double value(const ParticleCloud& cloud) const { return g(h_integral(cloud)); }
};

/// Lions derivative of a cylinder functional at an empirical measure:
/// d_mu u(mu^N)(x_at) = grad_g(int h dmu)^T . grad_h(x_at).
inline Vec lions_derivative_cylinder(const CylinderFunctional& u,
                                     const ParticleCloud& cloud, int at) {
    if (at < 0 || at >= cloud.size())
        throw IndexOutOfRange("lions_derivative_cylinder: index " + std::to_string(at));
    const Vec s = u.h_integral(cloud);
    return u.grad_h(cloud.point(at)).transpose() * u.grad_g(s);
}

/// Finite-difference probe of the empirical projection: the i-th component is
/// N * [u(cloud with x_at shifted by delta e_i) - u(cloud)] / delta.
inline Vec lions_derivative_probe(const std::function<double(const ParticleCloud&)>& u,
                                  const ParticleCloud& cloud, int at, double delta) {
    if (at < 0 || at >= cloud.size())
        throw IndexOutOfRange("lions_derivative_probe: index " + std::to_string(at));
    const double base = u(cloud);
    Vec out(cloud.dim());
    for (int c = 0; c < cloud.dim(); ++c) {
        ParticleCloud shifted = cloud;
        shifted.samples(at, c) += delta;
        out[c] = cloud.size() * (u(shifted) - base) / delta;
    }
    return out;
}

} // namespace mvsf
