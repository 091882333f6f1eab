#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "iml/checkpoint.hpp"
#include "iml/errors.hpp"
#include "iml/meta.hpp"
#include "iml/metrics.hpp"
#include "iml/model.hpp"
#include "iml/rng.hpp"
#include "iml/tasks.hpp"

namespace iml {

enum class Method { Maml, Fomaml, MetaSgd, Iml };

inline std::string to_string(Method m) {
    switch (m) {
        case Method::Maml: return "maml";
        case Method::Fomaml: return "fomaml";
        case Method::MetaSgd: return "metasgd";
        case Method::Iml: return "iml";
    }
    return "?";
}

inline Method method_from_string(const std::string& s) {
    if (s == "maml") return Method::Maml;
    if (s == "fomaml") return Method::Fomaml;
    if (s == "metasgd") return Method::MetaSgd;
    if (s == "iml") return Method::Iml;
    throw ConfigError("unknown method \"" + s + "\"");
}

// Task-stream seeding: task i of a run with base seed s draws from
// Rng(s + offset + i), with disjoint offsets per purpose.
constexpr std::uint64_t kValTaskBase = 1'000'000'000ull;
constexpr std::uint64_t kEvalTaskBase = 2'000'000'000ull;

struct ExperimentConfig {
    std::string method = "maml";
    MlpSpec model{{1, 40, 40, 1}, Activation::Tanh, OutputKind::Regression};
    DistConfig train_dist{"sinusoid_train", SinusoidConfig{}};
    std::optional<DistConfig> eval_dist;
    std::vector<DistributionPair> pairs;
    InnerConfig inner;
    OuterConfig outer;
    int train_iterations = 2000;
    int eval_tasks = 200;
    int val_every = 100;
    int val_tasks = 50;
    std::vector<std::uint64_t> seeds{0};
    std::string output_dir = "out";
    std::vector<std::string> methods;
    std::vector<double> lambda_grid;

    const DistConfig& effective_eval_dist() const {
        return eval_dist ? *eval_dist : train_dist;
    }

    void validate() const {
        method_from_string(method);
        model.validate();
        train_dist.validate();
        if (eval_dist) eval_dist->validate();
        for (const DistributionPair& p : pairs) p.validate();
        inner.validate();
        outer.validate();
        if (train_iterations < 0) throw ConfigError("train_iterations must be nonnegative");
        if (eval_tasks < 2) throw ConfigError("eval_tasks must be at least 2");
        if (val_every < 1 || val_tasks < 1) {
            throw ConfigError("validation cadence and task count must be positive");
        }
        if (seeds.empty()) throw ConfigError("at least one seed is required");
        for (const std::string& m : methods) method_from_string(m);
        for (double l : lambda_grid) {
            if (l < 0) throw ConfigError("lambda grid values must be nonnegative");
        }
    }
};

inline nlohmann::json inner_to_json(const InnerConfig& c) {
    return {{"alpha", c.alpha},
            {"steps", c.steps},
            {"learn_alpha", c.learn_alpha},
            {"first_order", c.first_order}};
}

inline nlohmann::json outer_to_json(const OuterConfig& c) {
    return {{"eta", c.eta},
            {"lambda_pen", c.lambda_pen},
            {"meta_batch", c.meta_batch},
            {"pairing", to_string(c.pairing)},
            {"variance_grad", to_string(c.variance_grad)},
            {"optimizer", to_string(c.optimizer)}};
}

inline nlohmann::json config_to_json(const ExperimentConfig& cfg) {
    nlohmann::json j{{"method", cfg.method},
                     {"model", spec_to_json(cfg.model)},
                     {"train_dist", dist_to_json(cfg.train_dist)},
                     {"inner", inner_to_json(cfg.inner)},
                     {"outer", outer_to_json(cfg.outer)},
                     {"train_iterations", cfg.train_iterations},
                     {"eval_tasks", cfg.eval_tasks},
                     {"val_every", cfg.val_every},
                     {"val_tasks", cfg.val_tasks},
                     {"seeds", cfg.seeds},
                     {"output_dir", cfg.output_dir}};
    if (cfg.eval_dist) j["eval_dist"] = dist_to_json(*cfg.eval_dist);
    if (!cfg.pairs.empty()) {
        nlohmann::json arr = nlohmann::json::array();
        for (const DistributionPair& p : cfg.pairs) {
            arr.push_back({{"train_dist", dist_to_json(p.train_dist)},
                           {"eval_dist", dist_to_json(p.eval_dist)}});
        }
        j["pairs"] = arr;
    }
    if (!cfg.methods.empty()) j["methods"] = cfg.methods;
    if (!cfg.lambda_grid.empty()) j["lambda_grid"] = cfg.lambda_grid;
    return j;
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
    static const std::vector<std::string> known{
        "method", "model", "train_dist", "eval_dist", "pairs",
        "inner", "outer", "train_iterations", "eval_tasks", "val_every",
        "val_tasks", "seeds", "output_dir", "methods", "lambda_grid"};
    for (const auto& [key, _] : j.items()) {
        if (std::find(known.begin(), known.end(), key) == known.end()) {
            throw ConfigError("unknown config field \"" + key + "\"");
        }
    }
    ExperimentConfig cfg;
    try {
        cfg.method = j.value("method", cfg.method);
        if (j.contains("model")) cfg.model = spec_from_json(j["model"]);
        if (j.contains("train_dist")) cfg.train_dist = dist_from_json(j["train_dist"]);
        if (j.contains("eval_dist")) cfg.eval_dist = dist_from_json(j["eval_dist"]);
        if (j.contains("pairs")) {
            for (const auto& p : j["pairs"]) {
                cfg.pairs.push_back(DistributionPair{dist_from_json(p.at("train_dist")),
                                                     dist_from_json(p.at("eval_dist"))});
            }
        }
        if (j.contains("inner")) {
            const auto& in = j["inner"];
            cfg.inner.alpha = in.value("alpha", cfg.inner.alpha);
            cfg.inner.steps = in.value("steps", cfg.inner.steps);
            cfg.inner.learn_alpha = in.value("learn_alpha", cfg.inner.learn_alpha);
            cfg.inner.first_order = in.value("first_order", cfg.inner.first_order);
        }
        if (j.contains("outer")) {
            const auto& out = j["outer"];
            cfg.outer.eta = out.value("eta", cfg.outer.eta);
            cfg.outer.lambda_pen = out.value("lambda_pen", cfg.outer.lambda_pen);
            cfg.outer.meta_batch = out.value("meta_batch", cfg.outer.meta_batch);
            if (out.contains("pairing")) {
                cfg.outer.pairing = pairing_from_string(out["pairing"].get<std::string>());
            }
            if (out.contains("variance_grad")) {
                cfg.outer.variance_grad =
                    variance_grad_from_string(out["variance_grad"].get<std::string>());
            }
            if (out.contains("optimizer")) {
                cfg.outer.optimizer = optimizer_from_string(out["optimizer"].get<std::string>());
            }
        }
        cfg.train_iterations = j.value("train_iterations", cfg.train_iterations);
        cfg.eval_tasks = j.value("eval_tasks", cfg.eval_tasks);
        cfg.val_every = j.value("val_every", cfg.val_every);
        cfg.val_tasks = j.value("val_tasks", cfg.val_tasks);
        if (j.contains("seeds")) cfg.seeds = j["seeds"].get<std::vector<std::uint64_t>>();
        cfg.output_dir = j.value("output_dir", cfg.output_dir);
        if (j.contains("methods")) cfg.methods = j["methods"].get<std::vector<std::string>>();
        if (j.contains("lambda_grid")) {
            cfg.lambda_grid = j["lambda_grid"].get<std::vector<double>>();
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed config: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("config " + path.string() + ": " + e.what());
    }
    return config_from_json(j);
}

// Per-method overrides of the shared inner/outer configs. The lambda axis
// only applies to iml; the other methods run the plain outer objective.
struct MethodSetup {
    Method method;
    InnerConfig inner;
    OuterConfig outer;
};

inline MethodSetup method_setup(const ExperimentConfig& cfg, const std::string& method_name,
                                double lambda) {
    MethodSetup s{method_from_string(method_name), cfg.inner, cfg.outer};
    switch (s.method) {
        case Method::Maml:
            s.inner.learn_alpha = false;
            s.inner.first_order = false;
            s.outer.lambda_pen = 0.0;
            break;
        case Method::Fomaml:
            s.inner.learn_alpha = false;
            s.inner.first_order = true;
            s.outer.lambda_pen = 0.0;
            break;
        case Method::MetaSgd:
            s.inner.learn_alpha = true;
            s.outer.lambda_pen = 0.0;
            break;
        case Method::Iml:
            s.inner.learn_alpha = false;
            s.outer.lambda_pen = lambda;
            break;
    }
    return s;
}

// -- training -----------------------------------------------------------------

struct TrainLogLine {
    std::uint64_t iteration = 0;  // iterations completed
    double loss = 0.0;
    double penalty = 0.0;
    bool has_val = false;
    double val_metric = 0.0;
};

struct TrainResult {
    Checkpoint best;
    Checkpoint final_state;
    std::vector<TrainLogLine> log;
    std::uint64_t alpha_nonpositive_steps = 0;
};

namespace harness_detail {

inline bool metric_improves(TaskKind kind, double candidate, double incumbent) {
    return kind == TaskKind::Classification ? candidate > incumbent : candidate < incumbent;
}

inline double validation_metric(const MlpSpec& spec, const ParamVector& params,
                                const std::optional<ParamVector>& alpha,
                                const std::vector<Task>& tasks, const InnerConfig& inner) {
    double acc = 0.0;
    for (const Task& t : tasks) {
        ParamVector adapted =
            adapt_values(spec, params, t, inner, alpha ? &*alpha : nullptr);
        acc += query_metric(spec, adapted, t);
    }
    return acc / static_cast<double>(tasks.size());
}

inline std::string train_rng_state(std::uint64_t seed, std::uint64_t next_task_index) {
    return "stream seed=" + std::to_string(seed) +
           " next_task=" + std::to_string(next_task_index);
}

}  // namespace harness_detail

// Meta-training with periodic validation on a fixed held-out task set; the
// best-validation parameters are kept alongside the final state. Fully
// deterministic for a given (config, seed).
inline TrainResult run_train(const ExperimentConfig& cfg, std::uint64_t seed,
                             const std::string& method_name, double lambda) {
    cfg.validate();
    const MethodSetup setup = method_setup(cfg, method_name, lambda);
    const MlpSpec& spec = cfg.model;

    ParamVector theta = init_params(spec, seed);
    std::optional<ParamVector> alpha;
    if (setup.method == Method::MetaSgd) alpha = make_alpha(theta, setup.inner.alpha);

    const std::size_t opt_dim = theta.size() + (alpha ? alpha->size() : 0);
    MetaOptimizer opt = MetaOptimizer::make(setup.outer, opt_dim);

    std::vector<Task> val_tasks;
    val_tasks.reserve(cfg.val_tasks);
    for (int i = 0; i < cfg.val_tasks; ++i) {
        Rng rng(seed + kValTaskBase + static_cast<std::uint64_t>(i));
        val_tasks.push_back(sample_task(cfg.train_dist, rng));
    }

    TrainResult result;
    auto snapshot = [&](std::uint64_t iteration, double val) {
        Checkpoint c;
        c.method = method_name;
        c.train_dist = cfg.train_dist.name;
        c.spec = spec;
        c.params = theta;
        c.alpha = alpha;
        c.opt = opt;
        c.seed = seed;
        c.next_task_index =
            iteration * static_cast<std::uint64_t>(setup.outer.meta_batch);
        c.rng_state = harness_detail::train_rng_state(seed, c.next_task_index);
        c.iteration = iteration;
        c.val_metric = val;
        c.lambda_pen = setup.outer.lambda_pen;
        return c;
    };

    const double init_val =
        harness_detail::validation_metric(spec, theta, alpha, val_tasks, setup.inner);
    result.best = snapshot(0, init_val);
    result.log.push_back({0, 0.0, 0.0, true, init_val});

    for (int it = 0; it < cfg.train_iterations; ++it) {
        std::vector<Task> batch_tasks;
        batch_tasks.reserve(setup.outer.meta_batch);
        const std::uint64_t first_index =
            static_cast<std::uint64_t>(it) * setup.outer.meta_batch;
        for (int b = 0; b < setup.outer.meta_batch; ++b) {
            Rng rng(seed + first_index + static_cast<std::uint64_t>(b));
            batch_tasks.push_back(sample_task(cfg.train_dist, rng));
        }
        std::vector<TaskObjective> batch;
        batch.reserve(batch_tasks.size());
        for (const Task& t : batch_tasks) batch.push_back(make_task_objective(spec, t));

        StepResult step;
        try {
            switch (setup.method) {
                case Method::MetaSgd:
                    step = meta_sgd_update(theta, *alpha, batch, setup.inner, setup.outer, opt);
                    break;
                case Method::Iml:
                    step = iml_step(theta, batch, setup.inner, setup.outer, opt);
                    break;
                default:
                    step = maml_step(theta, batch, setup.inner, setup.outer, opt);
                    break;
            }
        } catch (const NonFiniteValue& e) {
            throw NonFiniteValue("training aborted at iteration " + std::to_string(it) +
                                 " (task seeds " + std::to_string(seed + first_index) + ".." +
                                 std::to_string(seed + first_index + setup.outer.meta_batch - 1) +
                                 "): " + e.what());
        }
        theta = std::move(step.theta);
        if (alpha) alpha = std::move(step.alpha);
        if (step.alpha_nonpositive) ++result.alpha_nonpositive_steps;

        TrainLogLine line;
        line.iteration = static_cast<std::uint64_t>(it) + 1;
        line.loss = step.outer_loss;
        line.penalty = step.penalty;
        const bool validate_now =
            (it + 1) % cfg.val_every == 0 || it + 1 == cfg.train_iterations;
        if (validate_now) {
            const double val = harness_detail::validation_metric(spec, theta, alpha, val_tasks,
                                                                 setup.inner);
            line.has_val = true;
            line.val_metric = val;
            if (harness_detail::metric_improves(cfg.train_dist.kind(), val,
                                                result.best.val_metric)) {
                result.best = snapshot(line.iteration, val);
            }
        }
        result.log.push_back(line);
    }

    result.final_state = snapshot(static_cast<std::uint64_t>(cfg.train_iterations),
                                  result.log.back().has_val ? result.log.back().val_metric
                                                            : result.best.val_metric);
    return result;
}

inline TrainResult run_train(const ExperimentConfig& cfg, std::uint64_t seed) {
    return run_train(cfg, seed, cfg.method, cfg.outer.lambda_pen);
}

inline void write_train_log(const TrainResult& result, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    for (const TrainLogLine& l : result.log) {
        out << "iter=" << l.iteration << " loss=" << format_double(l.loss)
            << " penalty=" << format_double(l.penalty);
        if (l.has_val) out << " val=" << format_double(l.val_metric);
        out << "\n";
    }
    out << "alpha_nonpositive_steps=" << result.alpha_nonpositive_steps << "\n";
    if (!out.flush()) throw IoError("write failed for " + path.string());
}

// -- evaluation ----------------------------------------------------------------

struct TaskScore {
    double pre_metric = 0.0;   // query metric before adaptation
    double post_metric = 0.0;  // query metric after adaptation
};

struct EvalResult {
    MetricsRecord record;
    std::vector<TaskScore> scores;
};

// Episodic evaluation: adapt on each task's support set, score its query
// set, and report mean +- 1.96 sd / sqrt(n) over the post-adaptation
// scores. Per-task scores are kept so the interval can be audited.
inline EvalResult evaluate(const Checkpoint& ckpt, const DistConfig& eval_dist, int n_tasks,
                           const InnerConfig& inner, std::uint64_t seed) {
    if (n_tasks < 2) throw ConfigError("evaluation needs at least two tasks");
    eval_dist.validate();
    const auto t0 = std::chrono::steady_clock::now();

    EvalResult result;
    result.scores.reserve(n_tasks);
    std::vector<double> post;
    post.reserve(n_tasks);
    for (int i = 0; i < n_tasks; ++i) {
        Rng rng(seed + kEvalTaskBase + static_cast<std::uint64_t>(i));
        Task task = sample_task(eval_dist, rng);
        TaskScore score;
        score.pre_metric = query_metric(ckpt.spec, ckpt.params, task);
        ParamVector adapted = adapt_values(ckpt.spec, ckpt.params, task, inner,
                                           ckpt.alpha ? &*ckpt.alpha : nullptr);
        score.post_metric = query_metric(ckpt.spec, adapted, task);
        result.scores.push_back(score);
        post.push_back(score.post_metric);
    }

    const EvalSummary summary = summarize(post);
    result.record.method = ckpt.method;
    result.record.train_dist = ckpt.train_dist;
    result.record.eval_dist = eval_dist.name;
    result.record.seed = seed;
    result.record.lambda_pen = ckpt.lambda_pen;
    result.record.mean_metric = summary.mean;
    result.record.ci95_halfwidth = summary.ci95_halfwidth;
    result.record.n_tasks = summary.n;
    result.record.wall_time_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return result;
}

inline void write_scores(const EvalResult& result, const std::filesystem::path& path) {
    nlohmann::json scores = nlohmann::json::array();
    for (const TaskScore& s : result.scores) {
        scores.push_back({{"pre", s.pre_metric}, {"post", s.post_metric}});
    }
    nlohmann::json j{{"method", result.record.method},
                     {"train_dist", result.record.train_dist},
                     {"eval_dist", result.record.eval_dist},
                     {"seed", result.record.seed},
                     {"lambda_pen", result.record.lambda_pen},
                     {"scores", scores}};
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << j.dump(2) << "\n";
    if (!out.flush()) throw IoError("write failed for " + path.string());
}

// -- experiment matrix -----------------------------------------------------------

struct MatrixFailure {
    std::string cell;
    std::string message;
};

struct MatrixResult {
    std::vector<MetricsRecord> records;
    std::vector<MatrixFailure> failures;
    nlohmann::json summary;
};

namespace harness_detail {

inline std::string lambda_tag(double lambda) {
    std::string s = format_double(lambda);
    for (char& c : s) {
        if (c == '.') c = 'p';
        if (c == '+' || c == '-') c = 'm';
    }
    return s;
}

}  // namespace harness_detail

// Trains every (method, lambda, seed) cell on each pair's training
// distribution and evaluates it on the pair's evaluation distribution.
// Training runs are cached across pairs that share a train distribution.
// Cell failures are recorded and the rest of the matrix continues.
inline MatrixResult run_matrix(const ExperimentConfig& cfg,
                               const std::filesystem::path& out_dir) {
    cfg.validate();
    if (cfg.pairs.empty()) throw ConfigError("matrix needs a distribution pair list");
    const std::vector<std::string> methods =
        cfg.methods.empty() ? std::vector<std::string>{cfg.method} : cfg.methods;
    const std::vector<double> grid =
        cfg.lambda_grid.empty() ? std::vector<double>{cfg.outer.lambda_pen} : cfg.lambda_grid;

    std::filesystem::create_directories(out_dir / "scores");
    std::filesystem::create_directories(out_dir / "checkpoints");
    std::ofstream log(out_dir / "log.txt");
    if (!log) throw IoError("cannot open matrix log in " + out_dir.string());

    MatrixResult result;
    std::map<std::string, TrainResult> train_cache;

    struct CellAgg {
        double sum = 0.0;
        int n = 0;
    };
    // column key (pair index) -> cell key (method, lambda) -> aggregate
    std::map<std::size_t, std::map<std::string, CellAgg>> columns;

    for (std::size_t pi = 0; pi < cfg.pairs.size(); ++pi) {
        const DistributionPair& pair = cfg.pairs[pi];
        for (const std::string& method : methods) {
            const std::vector<double> lambdas =
                method == "iml" ? grid : std::vector<double>{0.0};
            for (double lambda : lambdas) {
                for (std::uint64_t seed : cfg.seeds) {
                    const std::string train_key = pair.train_dist.name + "|" + method + "|l" +
                                                  harness_detail::lambda_tag(lambda) + "|s" +
                                                  std::to_string(seed);
                    const std::string cell = "p" + std::to_string(pi) + "_" + method + "_l" +
                                             harness_detail::lambda_tag(lambda) + "_s" +
                                             std::to_string(seed) + "_" + pair.eval_dist.name;
                    try {
                        auto it = train_cache.find(train_key);
                        if (it == train_cache.end()) {
                            ExperimentConfig train_cfg = cfg;
                            train_cfg.train_dist = pair.train_dist;
                            TrainResult tr = run_train(train_cfg, seed, method, lambda);
                            save_checkpoint(out_dir / "checkpoints" / (train_key + ".ckpt"),
                                            tr.best);
                            it = train_cache.emplace(train_key, std::move(tr)).first;
                        }
                        EvalResult ev = evaluate(it->second.best, pair.eval_dist,
                                                 cfg.eval_tasks, cfg.inner, seed);
                        write_scores(ev, out_dir / "scores" / (cell + ".json"));
                        log << "cell " << cell
                            << " mean=" << format_double(ev.record.mean_metric)
                            << " ci95=" << format_double(ev.record.ci95_halfwidth) << "\n";
                        const std::string agg_key =
                            method + "|l" + harness_detail::lambda_tag(lambda);
                        CellAgg& agg = columns[pi][agg_key];
                        agg.sum += ev.record.mean_metric;
                        agg.n += 1;
                        result.records.push_back(std::move(ev.record));
                    } catch (const Error& e) {
                        log << "cell " << cell << " FAILED: " << e.what() << "\n";
                        result.failures.push_back({cell, e.what()});
                    }
                }
            }
        }
    }

    // Per-column best flags: highest accuracy / lowest mse, averaged over
    // seeds. Ties resolve to the first cell in declared order.
    nlohmann::json summary_cols = nlohmann::json::array();
    for (std::size_t pi = 0; pi < cfg.pairs.size(); ++pi) {
        const bool classify = cfg.pairs[pi].eval_dist.kind() == TaskKind::Classification;
        nlohmann::json cells = nlohmann::json::array();
        std::string best_key;
        double best_mean = classify ? -1e300 : 1e300;
        for (const std::string& method : methods) {
            const std::vector<double> lambdas =
                method == "iml" ? grid : std::vector<double>{0.0};
            for (double lambda : lambdas) {
                const std::string agg_key =
                    method + "|l" + harness_detail::lambda_tag(lambda);
                auto found = columns[pi].find(agg_key);
                if (found == columns[pi].end() || found->second.n == 0) continue;
                const double mean = found->second.sum / found->second.n;
                cells.push_back({{"method", method},
                                 {"lambda_pen", lambda},
                                 {"mean_metric_over_seeds", mean},
                                 {"seeds", found->second.n}});
                const bool better = classify ? mean > best_mean : mean < best_mean;
                if (better) {
                    best_mean = mean;
                    best_key = agg_key;
                }
            }
        }
        for (auto& c : cells) {
            const std::string key = c["method"].get<std::string>() + "|l" +
                                    harness_detail::lambda_tag(c["lambda_pen"].get<double>());
            c["best"] = key == best_key;
        }
        summary_cols.push_back({{"train_dist", cfg.pairs[pi].train_dist.name},
                                {"eval_dist", cfg.pairs[pi].eval_dist.name},
                                {"cells", cells}});
    }
    nlohmann::json failures = nlohmann::json::array();
    for (const MatrixFailure& f : result.failures) {
        failures.push_back({{"cell", f.cell}, {"message", f.message}});
    }
    result.summary = nlohmann::json{{"columns", summary_cols}, {"failures", failures}};

    emit_csv(result.records, out_dir / "metrics.csv");
    emit_json(result.records, out_dir / "metrics.json");
    std::ofstream summary_out(out_dir / "matrix_summary.json");
    if (!summary_out) throw IoError("cannot write matrix summary");
    summary_out << result.summary.dump(2) << "\n";
    log.flush();
    return result;
}

}  // namespace iml
