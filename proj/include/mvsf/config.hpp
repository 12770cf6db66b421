#pragma once

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "mvsf/corrector.hpp"
#include "mvsf/errors.hpp"
#include "mvsf/experiments.hpp"
#include "mvsf/model.hpp"

namespace mvsf {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Registered custom models
// ---------------------------------------------------------------------------

/// Factory registry for models beyond the linear benchmark. Entries receive
/// the config's "params" object.
class ModelRegistry {
public:
    using Factory = std::function<ModelSpec(const json& params)>;

    static ModelRegistry& instance() {
        static ModelRegistry reg;
        return reg;
    }

    void add(const std::string& name, Factory f) { factories_[name] = std::move(f); }

    ModelSpec make(const std::string& name, const json& params) const {
        auto it = factories_.find(name);
        if (it == factories_.end())
            throw ConfigInvalid("unknown registered model '" + name + "'");
        return it->second(params);
    }

    bool has(const std::string& name) const { return factories_.count(name) > 0; }

private:
    std::map<std::string, Factory> factories_;
};

/// Smooth bounded-interaction model: 1d, dissipative by construction, no
/// closed-form limit objects. Demonstrates the custom route end to end.
inline ModelSpec make_tanh_interaction_model(const json& params) {
    const double kappa = params.value("kappa", 2.0);
    const double couple = params.value("couple", 0.5);
    const double s1 = params.value("s1", 0.3);
    const double s2 = params.value("s2", 0.5);
    if (kappa <= std::abs(couple))
        throw ConfigInvalid("tanh_interaction requires kappa > |couple|");
    ModelSpec m;
    m.d1 = 1;
    m.d2 = 1;
    m.F = [couple](const Vec& x, const MeasureView& mu, const Vec& y, const MeasureView& nu) {
        Vec v(1);
        v[0] = -x[0] + couple * std::tanh(mu.mean[0]) + std::tanh(y[0]) +
               0.2 * std::tanh(nu.mean[0]);
        return v;
    };
    m.G = [](const Vec&, const MeasureView&, const MeasureView&) {
        Mat g(1, 1);
        g(0, 0) = 0.4;
        return g;
    };
    m.c = [](const Vec& x, const MeasureView&, const Vec&, const MeasureView&) {
        Vec v(1);
        v[0] = 0.1 * std::tanh(x[0]);
        return v;
    };
    m.b = [kappa, couple](const MeasureView& mu, const Vec& y, const MeasureView& nu) {
        Vec v(1);
        v[0] = -kappa * y[0] + couple * std::tanh(mu.mean[0]) +
               0.5 * couple * std::tanh(nu.mean[0]);
        return v;
    };
    m.sigma1 = [s1](const MeasureView&, const Vec&, const MeasureView&) {
        Mat s(1, 1);
        s(0, 0) = s1;
        return s;
    };
    m.sigma2 = [s2](const MeasureView&, const Vec&, const MeasureView&) {
        Mat s(1, 1);
        s(0, 0) = s2;
        return s;
    };
    // tanh is 1-Lipschitz: |db . dy| picks up 0.5|couple| W2(nu1,nu2)|dy|
    m.c1 = 0.5 * std::abs(couple);
    m.c2 = 2.0 * kappa - 0.5 * std::abs(couple);
    m.clt_compatible = true;
    m.lipschitz_bound = kappa + std::abs(couple) + 1.0;
    m.name = "tanh_interaction";
    m.fingerprint = detail::combine(0x7a91ull, static_cast<std::uint64_t>(kappa * 1e6) ^
                                                   static_cast<std::uint64_t>(couple * 1e6));
    return m;
}

inline void register_builtin_models() {
    static bool done = false;
    if (done) return;
    ModelRegistry::instance().add("tanh_interaction", make_tanh_interaction_model);
    done = true;
}

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

struct ModelConfig {
    std::string kind = "linear_benchmark"; // or "custom_registered"
    LinearBenchmark bench;
    bool c_declared = false;
    double c1 = 0.0, c2 = 0.0; // declared overrides when present
    std::string registered_name;
    json registered_params;

    ModelSpec build() const {
        if (kind == "linear_benchmark") {
            ModelSpec m = bench.to_model();
            if (c_declared) {
                m.c1 = c1;
                m.c2 = c2;
                if (!(m.c2 > m.c1) || m.c1 < 0)
                    throw ConfigInvalid("model requires c2 > c1 >= 0");
            }
            return m;
        }
        register_builtin_models();
        ModelSpec m = ModelRegistry::instance().make(registered_name, registered_params);
        if (c_declared) {
            m.c1 = c1;
            m.c2 = c2;
        }
        return m;
    }
};

struct ExperimentConfig {
    std::string command;
    ModelConfig model;

    double epsilon = 0.2;                  // single-run commands
    std::vector<double> epsilon_grid;      // rate commands
    int N = 1000;
    double T = 1.0;
    double h = 0.05;
    double dt = 0.01;                      // epsilon-free runs (frozen, ergodic, averaged)
    int replicas = 16;
    std::uint64_t master_seed = 1;
    int workers = 0;                       // 0 -> hardware
    std::string output_dir = "out";
    bool plots = false;
    std::vector<double> snapshot_times;
    InitSpec init_x, init_y;
    double mu_mean = 1.0;                  // frozen slow measure for zeta-based commands

    double slope_min = 0.0, slope_max = 0.0; // 0/0 -> command default
    InvariantConfig invariant;
    FKConfig corrector;
    int corrector_probes = 10;
    WeakRateOptions clt;
    std::vector<std::string> clt_statistics = {"tanh_mean", "second_moment", "sin_mean"};
    std::string ito_functional = "all";
    bool ito_include_cross_term = true;
    double ito_dt = 2.5e-3;

    std::uint64_t fingerprint = 0;
    json raw;
};

namespace detail_config {

inline void require_keys_known(const json& obj, const std::set<std::string>& known,
                               const std::string& where) {
    for (auto it = obj.begin(); it != obj.end(); ++it)
        if (!known.count(it.key()))
            throw ConfigInvalid("unknown key '" + it.key() + "' in " + where);
}

inline double get_num(const json& obj, const std::string& key, double fallback,
                      bool required = false) {
    if (!obj.contains(key)) {
        if (required) throw ConfigInvalid("missing required key '" + key + "'");
        return fallback;
    }
    if (!obj[key].is_number()) throw ConfigInvalid("key '" + key + "' must be numeric");
    return obj[key].get<double>();
}

inline std::uint64_t fingerprint_json(const json& j) {
    const std::string s = j.dump();
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

} // namespace detail_config

inline const std::set<std::string>& known_commands() {
    static const std::set<std::string> cmds = {
        "simulate",   "frozen",      "invariant", "averaged", "corrector",
        "strong-rate", "clt-rate",   "fluctuation", "ergodic", "ito-check"};
    return cmds;
}

inline ExperimentConfig parse_config_json(json j) {
    using detail_config::get_num;
    using detail_config::require_keys_known;

    ExperimentConfig cfg;
    cfg.raw = j;
    require_keys_known(
        j,
        {"command", "model", "epsilon", "epsilon_grid", "N", "T", "h", "dt", "replicas",
         "master_seed", "workers", "output_dir", "plots", "snapshot_times", "init",
         "mu_mean", "thresholds", "invariant", "corrector", "clt", "ito"},
        "config root");

    if (!j.contains("command")) throw ConfigInvalid("missing required key 'command'");
    cfg.command = j["command"].get<std::string>();
    if (!known_commands().count(cfg.command))
        throw ConfigInvalid("unknown command '" + cfg.command + "'");

    if (!j.contains("model")) throw ConfigInvalid("missing required key 'model'");
    const json& jm = j["model"];
    require_keys_known(jm,
                       {"kind", "A", "Abar", "B", "Bbar", "g0", "g1", "kappa", "b1", "b2",
                        "s1", "s2", "c0", "c1", "c2", "name", "params"},
                       "model");
    cfg.model.kind = jm.value("kind", std::string("linear_benchmark"));
    if (cfg.model.kind == "linear_benchmark") {
        LinearBenchmark& b = cfg.model.bench;
        b.A = get_num(jm, "A", b.A);
        b.Abar = get_num(jm, "Abar", b.Abar);
        b.B = get_num(jm, "B", b.B);
        b.Bbar = get_num(jm, "Bbar", b.Bbar);
        b.g0 = get_num(jm, "g0", b.g0);
        b.g1 = get_num(jm, "g1", b.g1);
        b.kappa = get_num(jm, "kappa", b.kappa, true);
        b.b1 = get_num(jm, "b1", b.b1);
        b.b2 = get_num(jm, "b2", b.b2);
        b.s1 = get_num(jm, "s1", b.s1);
        b.s2 = get_num(jm, "s2", b.s2);
        b.c0 = get_num(jm, "c0", b.c0);
    } else if (cfg.model.kind == "custom_registered") {
        if (!jm.contains("name")) throw ConfigInvalid("custom model needs 'name'");
        cfg.model.registered_name = jm["name"].get<std::string>();
        cfg.model.registered_params = jm.value("params", json::object());
    } else {
        throw ConfigInvalid("model kind must be linear_benchmark or custom_registered");
    }
    if (jm.contains("c1") || jm.contains("c2")) {
        cfg.model.c_declared = true;
        cfg.model.c1 = get_num(jm, "c1", 0.0, true);
        cfg.model.c2 = get_num(jm, "c2", 0.0, true);
    }

    cfg.epsilon = get_num(j, "epsilon", cfg.epsilon);
    if (j.contains("epsilon_grid")) {
        if (!j["epsilon_grid"].is_array())
            throw ConfigInvalid("key 'epsilon_grid' must be an array");
        for (const auto& v : j["epsilon_grid"]) cfg.epsilon_grid.push_back(v.get<double>());
    }
    cfg.N = static_cast<int>(get_num(j, "N", cfg.N));
    cfg.T = get_num(j, "T", cfg.T);
    cfg.h = get_num(j, "h", cfg.h);
    cfg.dt = get_num(j, "dt", cfg.dt);
    cfg.replicas = static_cast<int>(get_num(j, "replicas", cfg.replicas));
    cfg.master_seed = static_cast<std::uint64_t>(get_num(j, "master_seed", 1));
    cfg.workers = static_cast<int>(get_num(j, "workers", 0));
    cfg.output_dir = j.value("output_dir", cfg.output_dir);
    cfg.plots = j.value("plots", false);
    cfg.mu_mean = get_num(j, "mu_mean", cfg.mu_mean);
    if (j.contains("snapshot_times"))
        for (const auto& v : j["snapshot_times"]) cfg.snapshot_times.push_back(v.get<double>());

    if (j.contains("init")) {
        const json& ji = j["init"];
        require_keys_known(ji, {"x", "y"}, "init");
        for (const char* which : {"x", "y"}) {
            if (!ji.contains(which)) continue;
            const json& js = ji[which];
            require_keys_known(js, {"mean", "stddev"}, std::string("init.") + which);
            InitSpec& spec = (*which == 'x') ? cfg.init_x : cfg.init_y;
            spec.mean = get_num(js, "mean", 0.0);
            spec.stddev = get_num(js, "stddev", 1.0);
        }
    }
    if (j.contains("thresholds")) {
        const json& jt = j["thresholds"];
        require_keys_known(jt, {"slope_min", "slope_max"}, "thresholds");
        cfg.slope_min = get_num(jt, "slope_min", 0.0);
        cfg.slope_max = get_num(jt, "slope_max", 0.0);
    }
    if (j.contains("invariant")) {
        const json& ji = j["invariant"];
        require_keys_known(ji, {"cloud_size", "dt", "burn_in", "rel_threshold", "max_doublings"},
                           "invariant");
        cfg.invariant.cloud_size = static_cast<int>(get_num(ji, "cloud_size", 512));
        cfg.invariant.dt = get_num(ji, "dt", 0.01);
        cfg.invariant.burn_in = get_num(ji, "burn_in", 0.0);
        cfg.invariant.rel_threshold = get_num(ji, "rel_threshold", 0.05);
        cfg.invariant.max_doublings = static_cast<int>(get_num(ji, "max_doublings", 6));
    }
    if (j.contains("corrector")) {
        const json& jc = j["corrector"];
        require_keys_known(jc,
                           {"t_infinity", "inner_replicas", "dt", "delta", "delta2",
                            "tail_tol", "probes", "sample_points", "pair_points"},
                           "corrector");
        cfg.corrector.t_infinity = get_num(jc, "t_infinity", 0.0);
        cfg.corrector.inner_replicas = static_cast<int>(get_num(jc, "inner_replicas", 64));
        cfg.corrector.dt = get_num(jc, "dt", 2e-3);
        cfg.corrector.delta = get_num(jc, "delta", 1e-3);
        cfg.corrector.delta2 = get_num(jc, "delta2", 3e-2);
        cfg.corrector.tail_tol = get_num(jc, "tail_tol", 0.02);
        cfg.corrector_probes = static_cast<int>(get_num(jc, "probes", 10));
    }
    if (j.contains("clt")) {
        const json& jc = j["clt"];
        require_keys_known(jc, {"dt", "zbar_replicas", "statistics"}, "clt");
        cfg.clt.clt_dt = get_num(jc, "dt", 1e-3);
        cfg.clt.zbar_replicas = static_cast<int>(get_num(jc, "zbar_replicas", 0));
        if (jc.contains("statistics")) {
            cfg.clt_statistics.clear();
            for (const auto& s : jc["statistics"]) cfg.clt_statistics.push_back(s.get<std::string>());
        }
    }
    if (j.contains("ito")) {
        const json& ji = j["ito"];
        require_keys_known(ji, {"functional", "include_cross_term", "dt"}, "ito");
        cfg.ito_functional = ji.value("functional", std::string("all"));
        cfg.ito_include_cross_term = ji.value("include_cross_term", true);
        cfg.ito_dt = get_num(ji, "dt", 2.5e-3);
    }

    // range validation
    const bool is_rate = cfg.command == "strong-rate" || cfg.command == "clt-rate" ||
                         cfg.command == "fluctuation";
    if (is_rate) {
        if (cfg.epsilon_grid.empty())
            throw ConfigInvalid("missing required key 'epsilon_grid' for " + cfg.command);
        for (std::size_t i = 0; i + 1 < cfg.epsilon_grid.size(); ++i)
            if (cfg.epsilon_grid[i + 1] >= cfg.epsilon_grid[i])
                throw ConfigInvalid("epsilon_grid must be strictly decreasing");
        if (cfg.epsilon_grid.size() < 3)
            throw ConfigInvalid("epsilon_grid needs at least 3 points");
    }
    const auto check_eps = [](double e) {
        if (!(e > 0.0 && e < 1.0)) throw ConfigInvalid("epsilon must lie in (0, 1)");
    };
    if (cfg.command == "simulate") check_eps(cfg.epsilon);
    for (double e : cfg.epsilon_grid) check_eps(e);
    if (cfg.N < 2) throw ConfigInvalid("N must be >= 2");
    if (!(cfg.T > 0.0) && cfg.command != "simulate")
        throw ConfigInvalid("T must be positive");
    if (!(cfg.h > 0.0 && cfg.h <= 0.5)) throw ConfigInvalid("h must lie in (0, 0.5]");
    if (cfg.replicas < 1) throw ConfigInvalid("replicas must be >= 1");

    cfg.fingerprint = detail_config::fingerprint_json(j);
    return cfg;
}

/// Applies `key=value` overrides with dotted paths (model.kappa=2.5) onto the
/// JSON document before parsing.
inline json apply_overrides(json j, const std::vector<std::string>& overrides) {
    for (const std::string& ov : overrides) {
        const auto eq = ov.find('=');
        if (eq == std::string::npos)
            throw ConfigInvalid("override '" + ov + "' is not key=value");
        const std::string path = ov.substr(0, eq);
        const std::string value = ov.substr(eq + 1);
        json* node = &j;
        std::size_t start = 0;
        for (;;) {
            const auto dot = path.find('.', start);
            const std::string key = path.substr(start, dot - start);
            if (key.empty()) throw ConfigInvalid("override '" + ov + "' has an empty key");
            if (dot == std::string::npos) {
                json parsed = json::parse(value, nullptr, false);
                (*node)[key] = parsed.is_discarded() ? json(value) : parsed;
                break;
            }
            node = &(*node)[key];
            start = dot + 1;
        }
    }
    return j;
}

inline ExperimentConfig load_config(const std::string& path,
                                    const std::vector<std::string>& overrides = {}) {
    std::ifstream in(path);
    if (!in) throw ConfigInvalid("cannot open config file " + path);
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded()) throw ConfigInvalid("config file " + path + " is not valid JSON");
    return parse_config_json(apply_overrides(std::move(j), overrides));
}

} // namespace mvsf
