#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mvsf/engine.hpp"
#include "mvsf/errors.hpp"
#include "mvsf/experiments.hpp"
#include "mvsf/measure.hpp"

namespace mvsf {

namespace io {

inline std::string format_double(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

inline void save_cloud_csv(const ParticleCloud& cloud, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot open " + path + " for writing");
    for (int c = 0; c < cloud.dim(); ++c) out << (c ? "," : "") << "x_" << c;
    out << "\n";
    for (int i = 0; i < cloud.size(); ++i) {
        for (int c = 0; c < cloud.dim(); ++c)
            out << (c ? "," : "") << format_double(cloud.samples(i, c));
        out << "\n";
    }
}

inline ParticleCloud load_cloud_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) throw Error(path + ": empty file");
    const int dim = static_cast<int>(std::count(line.begin(), line.end(), ',')) + 1;
    std::vector<double> values;
    int rows = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        int cols = 0;
        while (std::getline(ss, cell, ',')) {
            const double v = std::stod(cell);
            if (!std::isfinite(v)) throw Error(path + ": non-finite sample");
            values.push_back(v);
            ++cols;
        }
        if (cols != dim) throw Error(path + ": ragged row");
        ++rows;
    }
    Eigen::MatrixXd s(rows, dim);
    for (int i = 0; i < rows; ++i)
        for (int c = 0; c < dim; ++c) s(i, c) = values[static_cast<std::size_t>(i) * dim + c];
    return ParticleCloud(std::move(s));
}

/// Long-format trajectory export: one row per (replica, time, particle,
/// component) tagged by which state the value belongs to.
class TrajectoryWriter {
public:
    explicit TrajectoryWriter(const std::string& path) : out_(path) {
        if (!out_) throw Error("cannot open " + path + " for writing");
        out_ << "replica,time,particle,component,which,value\n";
    }

    void add(int replica, double t, const ParticleCloud& cloud, const std::string& which) {
        for (int i = 0; i < cloud.size(); ++i)
            for (int c = 0; c < cloud.dim(); ++c)
                out_ << replica << ',' << format_double(t) << ',' << i << ',' << c << ','
                     << which << ',' << format_double(cloud.samples(i, c)) << "\n";
    }

private:
    std::ofstream out_;
};

inline void save_rate_table(const RateReport& rep, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot open " + path + " for writing");
    out << "epsilon,value,stderr,replicas\n";
    for (const auto& p : rep.points)
        out << format_double(p.epsilon) << ',' << format_double(p.value) << ','
            << format_double(p.stderr_) << ',' << p.replicas << "\n";
}

inline void save_raw_errors(const RateReport& rep, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot open " + path + " for writing");
    out << "epsilon,replica,error\n";
    for (std::size_t e = 0; e < rep.raw.size(); ++e)
        for (std::size_t r = 0; r < rep.raw[e].size(); ++r)
            out << format_double(rep.points[e].epsilon) << ',' << r << ','
                << format_double(rep.raw[e][r]) << "\n";
}

inline void save_json(const nlohmann::json& j, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot open " + path + " for writing");
    out << j.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Minimal static SVG plots
// ---------------------------------------------------------------------------

struct PlotSeries {
    std::vector<double> x, y;
    std::string color = "#1f6fb4";
    bool points = true;
    bool line = true;
};

/// Scatter/line plot with optional log axes; enough for rate and decay plots.
inline void save_svg_plot(const std::vector<PlotSeries>& series, const std::string& title,
                          const std::string& xlabel, const std::string& ylabel,
                          bool logx, bool logy, const std::string& path) {
    const double W = 640, H = 440, L = 70, R = 20, T = 40, B = 50;
    auto tx = [&](double v) { return logx ? std::log10(v) : v; };
    auto ty = [&](double v) { return logy ? std::log10(v) : v; };

    double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
    for (const auto& s : series)
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            if ((logx && s.x[i] <= 0) || (logy && s.y[i] <= 0)) continue;
            xmin = std::min(xmin, tx(s.x[i]));
            xmax = std::max(xmax, tx(s.x[i]));
            ymin = std::min(ymin, ty(s.y[i]));
            ymax = std::max(ymax, ty(s.y[i]));
        }
    if (xmin > xmax) {
        xmin = 0;
        xmax = 1;
    }
    if (ymin > ymax) {
        ymin = 0;
        ymax = 1;
    }
    const double xpad = 0.05 * std::max(1e-12, xmax - xmin);
    const double ypad = 0.05 * std::max(1e-12, ymax - ymin);
    xmin -= xpad;
    xmax += xpad;
    ymin -= ypad;
    ymax += ypad;

    auto px = [&](double v) { return L + (tx(v) - xmin) / (xmax - xmin) * (W - L - R); };
    auto py = [&](double v) { return H - B - (ty(v) - ymin) / (ymax - ymin) * (H - T - B); };

    std::ofstream out(path);
    if (!out) throw Error("cannot open " + path + " for writing");
    out << "<svg xmlns='http://www.w3.org/2000/svg' width='" << W << "' height='" << H
        << "' viewBox='0 0 " << W << ' ' << H << "'>\n";
    out << "<rect width='100%' height='100%' fill='white'/>\n";
    out << "<text x='" << W / 2 << "' y='22' text-anchor='middle' font-size='15'>" << title
        << "</text>\n";
    out << "<line x1='" << L << "' y1='" << H - B << "' x2='" << W - R << "' y2='" << H - B
        << "' stroke='black'/>\n";
    out << "<line x1='" << L << "' y1='" << T << "' x2='" << L << "' y2='" << H - B
        << "' stroke='black'/>\n";
    out << "<text x='" << W / 2 << "' y='" << H - 12 << "' text-anchor='middle' font-size='12'>"
        << xlabel << "</text>\n";
    out << "<text x='16' y='" << H / 2 << "' text-anchor='middle' font-size='12' transform='rotate(-90 16 "
        << H / 2 << ")'>" << ylabel << "</text>\n";

    for (int k = 0; k <= 4; ++k) {
        const double fx = xmin + k * (xmax - xmin) / 4.0;
        const double fy = ymin + k * (ymax - ymin) / 4.0;
        const double vx = logx ? std::pow(10.0, fx) : fx;
        const double vy = logy ? std::pow(10.0, fy) : fy;
        out << "<text x='" << px(vx) << "' y='" << H - B + 16
            << "' text-anchor='middle' font-size='10'>" << std::setprecision(3) << vx
            << "</text>\n";
        out << "<text x='" << L - 6 << "' y='" << py(vy) + 3
            << "' text-anchor='end' font-size='10'>" << std::setprecision(3) << vy
            << "</text>\n";
    }

    for (const auto& s : series) {
        if (s.line && s.x.size() > 1) {
            out << "<polyline fill='none' stroke='" << s.color << "' stroke-width='1.5' points='";
            for (std::size_t i = 0; i < s.x.size(); ++i) {
                if ((logx && s.x[i] <= 0) || (logy && s.y[i] <= 0)) continue;
                out << px(s.x[i]) << ',' << py(s.y[i]) << ' ';
            }
            out << "'/>\n";
        }
        if (s.points)
            for (std::size_t i = 0; i < s.x.size(); ++i) {
                if ((logx && s.x[i] <= 0) || (logy && s.y[i] <= 0)) continue;
                out << "<circle cx='" << px(s.x[i]) << "' cy='" << py(s.y[i])
                    << "' r='3' fill='" << s.color << "'/>\n";
            }
    }
    out << "</svg>\n";
}

inline void save_rate_plot(const RateReport& rep, const std::string& title,
                           const std::string& path) {
    PlotSeries data;
    PlotSeries fitline;
    fitline.color = "#c23b22";
    fitline.points = false;
    for (const auto& p : rep.points) {
        data.x.push_back(p.epsilon);
        data.y.push_back(p.value);
        fitline.x.push_back(p.epsilon);
        fitline.y.push_back(std::exp(rep.fit.intercept + rep.fit.slope * std::log(p.epsilon)));
    }
    save_svg_plot({data, fitline}, title, "epsilon", "error", true, true, path);
}

inline void save_decay_plot(const DecayReport& rep, const std::string& path) {
    PlotSeries curve;
    curve.x = rep.times;
    curve.y = rep.w2_law;
    PlotSeries floor;
    floor.color = "#999999";
    floor.points = false;
    if (!rep.times.empty()) {
        floor.x = {rep.times.front(), rep.times.back()};
        floor.y = {rep.noise_floor, rep.noise_floor};
    }
    save_svg_plot({curve, floor}, "law-level decay", "t", "W2", false, true, path);
}

/// Histogram of a 1d cloud against the centered gaussian with the same
/// variance as the oracle density.
inline void save_histogram_plot(const ParticleCloud& cloud, double oracle_mean,
                                double oracle_var, const std::string& path) {
    const int bins = 40;
    double lo = cloud.samples.col(0).minCoeff();
    double hi = cloud.samples.col(0).maxCoeff();
    if (hi <= lo) hi = lo + 1.0;
    const double w = (hi - lo) / bins;
    std::vector<double> centers(bins), density(bins, 0.0);
    for (int k = 0; k < bins; ++k) centers[k] = lo + (k + 0.5) * w;
    for (int i = 0; i < cloud.size(); ++i) {
        int k = static_cast<int>((cloud.samples(i, 0) - lo) / w);
        k = std::clamp(k, 0, bins - 1);
        density[k] += 1.0 / (cloud.size() * w);
    }
    PlotSeries hist;
    hist.x = centers;
    hist.y = density;
    PlotSeries gauss;
    gauss.color = "#c23b22";
    gauss.points = false;
    for (int k = 0; k < 200; ++k) {
        const double x = lo + (hi - lo) * k / 199.0;
        gauss.x.push_back(x);
        gauss.y.push_back(std::exp(-0.5 * (x - oracle_mean) * (x - oracle_mean) / oracle_var) /
                          std::sqrt(2 * M_PI * oracle_var));
    }
    save_svg_plot({hist, gauss}, "deviation law vs gaussian oracle", "z", "density", false,
                  false, path);
}

} // namespace io

} // namespace mvsf
