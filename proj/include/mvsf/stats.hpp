#pragma once

#include <cmath>
#include <vector>

#include "mvsf/errors.hpp"

namespace mvsf {

struct MeanStderr {
    double mean = 0.0;
    double stderr_ = 0.0;
    int n = 0;
};

inline MeanStderr mean_stderr(const std::vector<double>& xs) {
    MeanStderr ms;
    ms.n = static_cast<int>(xs.size());
    if (ms.n == 0) return ms;
    double s = 0.0;
    for (double x : xs) s += x;
    ms.mean = s / ms.n;
    if (ms.n < 2) return ms;
    double v = 0.0;
    for (double x : xs) v += (x - ms.mean) * (x - ms.mean);
    ms.stderr_ = std::sqrt(v / (ms.n - 1) / ms.n);
    return ms;
}

struct LineFit {
    double slope = 0.0;
    double intercept = 0.0;
    double r2 = 0.0;
};

/// Ordinary or weighted least squares of y on x; weights default to 1.
inline LineFit linear_fit(const std::vector<double>& x, const std::vector<double>& y,
                          const std::vector<double>& w = {}) {
    const std::size_t n = x.size();
    if (n < 2 || y.size() != n)
        throw DegenerateFit("linear_fit needs at least 2 points");
    double sw = 0, sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double wi = w.empty() ? 1.0 : w[i];
        sw += wi;
        sx += wi * x[i];
        sy += wi * y[i];
        sxx += wi * x[i] * x[i];
        sxy += wi * x[i] * y[i];
    }
    const double det = sw * sxx - sx * sx;
    if (std::abs(det) < 1e-300) throw DegenerateFit("linear_fit: singular design");
    LineFit f;
    f.slope = (sw * sxy - sx * sy) / det;
    f.intercept = (sxx * sy - sx * sxy) / det;
    double ss_res = 0, ss_tot = 0;
    const double ybar = sy / sw;
    for (std::size_t i = 0; i < n; ++i) {
        const double wi = w.empty() ? 1.0 : w[i];
        const double fit = f.slope * x[i] + f.intercept;
        ss_res += wi * (y[i] - fit) * (y[i] - fit);
        ss_tot += wi * (y[i] - ybar) * (y[i] - ybar);
    }
    f.r2 = ss_tot > 0 ? 1.0 - ss_res / ss_tot : 1.0;
    return f;
}

} // namespace mvsf
