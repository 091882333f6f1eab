#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "iml/errors.hpp"
#include "iml/rng.hpp"
#include "iml/tensor.hpp"

namespace iml {

enum class TaskKind { Regression, Classification };

// One few-shot episode: support set to adapt on, query set to score on.
struct Task {
    TaskKind kind = TaskKind::Regression;
    Tensor support_x, support_y, query_x, query_y;
    int n_way = 0, k_shot = 0, q_per_class = 0;
    std::string origin;

    void validate() const {
        if (kind == TaskKind::Classification) {
            const std::size_t sup = static_cast<std::size_t>(n_way) * k_shot;
            const std::size_t qry = static_cast<std::size_t>(n_way) * q_per_class;
            if (support_x.rows() != sup || support_y.numel() != sup) {
                throw ConfigError("classification support must have n_way*k_shot rows");
            }
            if (query_x.rows() != qry || query_y.numel() != qry) {
                throw ConfigError("classification query must have n_way*q_per_class rows");
            }
            for (double v : support_y.values()) {
                if (v < 0 || v >= n_way || v != std::nearbyint(v)) {
                    throw ConfigError("support label outside [0, n_way)");
                }
            }
            for (double v : query_y.values()) {
                if (v < 0 || v >= n_way || v != std::nearbyint(v)) {
                    throw ConfigError("query label outside [0, n_way)");
                }
            }
        } else {
            if (support_x.rows() != support_y.rows() || query_x.rows() != query_y.rows()) {
                throw ConfigError("regression x/y row counts differ");
            }
        }
    }
};

struct Interval {
    double lo = 0.0, hi = 0.0;

    void validate(const char* what) const {
        if (!(lo <= hi)) {
            throw ConfigError(std::string(what) + " interval has lo > hi");
        }
    }
};

// Amplitude/phase-randomized sine regression episodes.
struct SinusoidConfig {
    Interval amp_range{0.1, 5.0};
    Interval phase_range{0.0, std::numbers::pi};
    Interval x_range{-5.0, 5.0};
    double noise_sd = 0.0;
    int k_shot = 5;
    int q = 15;

    void validate() const {
        amp_range.validate("amp_range");
        phase_range.validate("phase_range");
        x_range.validate("x_range");
        if (noise_sd < 0) throw ConfigError("noise_sd must be nonnegative");
        if (k_shot < 1 || q < 1) throw ConfigError("k_shot and q must be positive");
    }
};

// Classification episodes where a low-dimensional code block is correlated
// with the label: with probability rho a sample carries its own class code,
// otherwise a uniformly random other class's code. Class prototypes for the
// core block are redrawn every episode, so only the core features require
// adaptation.
struct SpuriousClassConfig {
    int n_way = 5;
    int k_shot = 1;
    int q_per_class = 15;
    int core_dim = 8;
    int spur_dim = 8;
    double core_sd = 2.0;
    double spur_strength = 2.0;
    double rho = 0.95;

    void validate() const {
        if (n_way < 2) throw ConfigError("n_way must be at least 2");
        if (k_shot < 1 || q_per_class < 1) {
            throw ConfigError("k_shot and q_per_class must be positive");
        }
        if (core_dim < 1 || spur_dim < 1) throw ConfigError("feature dims must be positive");
        if (rho < 0.0 || rho > 1.0) throw ConfigError("rho must lie in [0, 1]");
        if (core_sd < 0.0 || spur_strength < 0.0) {
            throw ConfigError("core_sd and spur_strength must be nonnegative");
        }
    }

    int feat_dim() const { return core_dim + spur_dim; }
};

// A named task distribution.
struct DistConfig {
    std::string name;
    std::variant<SinusoidConfig, SpuriousClassConfig> family;

    TaskKind kind() const {
        return std::holds_alternative<SinusoidConfig>(family) ? TaskKind::Regression
                                                              : TaskKind::Classification;
    }

    void validate() const {
        std::visit([](const auto& f) { f.validate(); }, family);
    }
};

struct DistributionPair {
    DistConfig train_dist;
    DistConfig eval_dist;

    void validate() const {
        train_dist.validate();
        eval_dist.validate();
        if (train_dist.kind() != eval_dist.kind()) {
            throw ConfigError("distribution pair mixes task kinds");
        }
    }
};

inline Task sample_sinusoid_task(const SinusoidConfig& cfg, Rng& rng) {
    cfg.validate();
    const double amp = rng.uniform(cfg.amp_range.lo, cfg.amp_range.hi);
    const double phase = rng.uniform(cfg.phase_range.lo, cfg.phase_range.hi);

    auto draw = [&](int n, Tensor& xs, Tensor& ys) {
        xs = Tensor(Shape{static_cast<std::size_t>(n), 1});
        ys = Tensor(Shape{static_cast<std::size_t>(n), 1});
        for (int i = 0; i < n; ++i) {
            const double x = rng.uniform(cfg.x_range.lo, cfg.x_range.hi);
            double y = amp * std::sin(x + phase);
            if (cfg.noise_sd > 0) y += cfg.noise_sd * rng.normal();
            xs[i] = x;
            ys[i] = y;
        }
    };

    Task t;
    t.kind = TaskKind::Regression;
    t.k_shot = cfg.k_shot;
    draw(cfg.k_shot, t.support_x, t.support_y);
    draw(cfg.q, t.query_x, t.query_y);
    return t;
}

inline Task sample_spurious_task(const SpuriousClassConfig& cfg, Rng& rng) {
    cfg.validate();
    const int d = cfg.feat_dim();

    std::vector<double> prototypes(static_cast<std::size_t>(cfg.n_way) * cfg.core_dim);
    for (double& v : prototypes) v = cfg.core_sd * rng.normal();

    auto fill = [&](int per_class, Tensor& xs, Tensor& ys) {
        const std::size_t rows = static_cast<std::size_t>(cfg.n_way) * per_class;
        xs = Tensor(Shape{rows, static_cast<std::size_t>(d)});
        ys = Tensor(Shape{rows});
        for (int c = 0; c < cfg.n_way; ++c) {
            for (int s = 0; s < per_class; ++s) {
                const std::size_t row = static_cast<std::size_t>(c) * per_class + s;
                double* x = xs.data() + row * d;
                for (int j = 0; j < cfg.core_dim; ++j) {
                    x[j] = prototypes[static_cast<std::size_t>(c) * cfg.core_dim + j] +
                           rng.normal();
                }
                int code = c;
                if (rng.uniform01() >= cfg.rho) {
                    // A uniformly random *other* class's code.
                    int other = static_cast<int>(rng.below(cfg.n_way - 1));
                    code = other >= c ? other + 1 : other;
                }
                x[cfg.core_dim + code % cfg.spur_dim] = cfg.spur_strength;
                ys[row] = static_cast<double>(c);
            }
        }
    };

    Task t;
    t.kind = TaskKind::Classification;
    t.n_way = cfg.n_way;
    t.k_shot = cfg.k_shot;
    t.q_per_class = cfg.q_per_class;
    fill(cfg.k_shot, t.support_x, t.support_y);
    fill(cfg.q_per_class, t.query_x, t.query_y);
    return t;
}

inline Task sample_task(const DistConfig& dist, Rng& rng) {
    Task t = std::visit(
        [&rng](const auto& f) {
            using F = std::decay_t<decltype(f)>;
            if constexpr (std::is_same_v<F, SinusoidConfig>) {
                return sample_sinusoid_task(f, rng);
            } else {
                return sample_spurious_task(f, rng);
            }
        },
        dist.family);
    t.origin = dist.name;
    return t;
}

// -- config (de)serialization and shifting ----------------------------------

inline nlohmann::json interval_to_json(const Interval& iv) {
    return nlohmann::json::array({iv.lo, iv.hi});
}

inline Interval interval_from_json(const nlohmann::json& j, const char* what) {
    if (!j.is_array() || j.size() != 2 || !j[0].is_number() || !j[1].is_number()) {
        throw ConfigError(std::string(what) + " must be a [lo, hi] pair");
    }
    return Interval{j[0].get<double>(), j[1].get<double>()};
}

inline nlohmann::json dist_to_json(const DistConfig& dist) {
    nlohmann::json j;
    j["name"] = dist.name;
    if (const auto* sin = std::get_if<SinusoidConfig>(&dist.family)) {
        j["family"] = "sinusoid";
        j["amp_range"] = interval_to_json(sin->amp_range);
        j["phase_range"] = interval_to_json(sin->phase_range);
        j["x_range"] = interval_to_json(sin->x_range);
        j["noise_sd"] = sin->noise_sd;
        j["k_shot"] = sin->k_shot;
        j["q"] = sin->q;
    } else {
        const auto& sp = std::get<SpuriousClassConfig>(dist.family);
        j["family"] = "spurious";
        j["n_way"] = sp.n_way;
        j["k_shot"] = sp.k_shot;
        j["q_per_class"] = sp.q_per_class;
        j["core_dim"] = sp.core_dim;
        j["spur_dim"] = sp.spur_dim;
        j["core_sd"] = sp.core_sd;
        j["spur_strength"] = sp.spur_strength;
        j["rho"] = sp.rho;
    }
    return j;
}

inline DistConfig dist_from_json(const nlohmann::json& j) {
    if (!j.is_object() || !j.contains("family")) {
        throw ConfigError("distribution config needs a \"family\" field");
    }
    DistConfig dist;
    dist.name = j.value("name", "");
    const std::string family = j["family"].get<std::string>();
    if (family == "sinusoid") {
        SinusoidConfig c;
        if (j.contains("amp_range")) c.amp_range = interval_from_json(j["amp_range"], "amp_range");
        if (j.contains("phase_range")) {
            c.phase_range = interval_from_json(j["phase_range"], "phase_range");
        }
        if (j.contains("x_range")) c.x_range = interval_from_json(j["x_range"], "x_range");
        c.noise_sd = j.value("noise_sd", c.noise_sd);
        c.k_shot = j.value("k_shot", c.k_shot);
        c.q = j.value("q", c.q);
        dist.family = c;
    } else if (family == "spurious") {
        SpuriousClassConfig c;
        c.n_way = j.value("n_way", c.n_way);
        c.k_shot = j.value("k_shot", c.k_shot);
        c.q_per_class = j.value("q_per_class", c.q_per_class);
        c.core_dim = j.value("core_dim", c.core_dim);
        c.spur_dim = j.value("spur_dim", c.spur_dim);
        c.core_sd = j.value("core_sd", c.core_sd);
        c.spur_strength = j.value("spur_strength", c.spur_strength);
        c.rho = j.value("rho", c.rho);
        dist.family = c;
    } else {
        throw ConfigError("unknown task family \"" + family + "\"");
    }
    dist.validate();
    return dist;
}

// New config with the given fields overridden; the original is untouched.
// Keys must already exist in the config; the family tag cannot be changed.
inline DistConfig make_shifted(const DistConfig& dist, const nlohmann::json& overrides) {
    if (!overrides.is_object()) {
        throw ConfigError("shift spec must be a JSON object");
    }
    nlohmann::json base = dist_to_json(dist);
    for (const auto& [key, value] : overrides.items()) {
        if (!base.contains(key)) {
            throw ConfigError("shift spec field \"" + key + "\" not in config");
        }
        if (key == "family" && value != base["family"]) {
            throw ConfigError("shift spec cannot change the task family");
        }
        base[key] = value;
    }
    return dist_from_json(base);
}

}  // namespace iml
