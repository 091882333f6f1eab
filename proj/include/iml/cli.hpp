#pragma once

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "iml/episode_io.hpp"
#include "iml/gradcheck.hpp"
#include "iml/harness.hpp"

namespace iml {

// Randomized smooth MLP instance for gradient audits: tanh layers with an
// MSE or cross-entropy head, evaluated at a Glorot-random point.
inline GradCheckReport random_mlp_gradcheck(std::uint64_t seed, double eps = 1e-5) {
    Rng rng(seed * 2654435761ull + 17);
    const std::size_t in_w = 2 + rng.below(3);
    const std::size_t hid = 3 + rng.below(5);
    const bool xent = rng.below(2) == 1;
    const std::size_t out_w = xent ? 3 + rng.below(3) : 1 + rng.below(2);
    MlpSpec spec{{in_w, hid, out_w}, Activation::Tanh,
                 xent ? OutputKind::NWayLogits : OutputKind::Regression};

    const std::size_t rows = 3 + rng.below(4);
    Tensor x(Shape{rows, in_w});
    for (std::size_t i = 0; i < x.numel(); ++i) x[i] = rng.uniform(-2.0, 2.0);
    Tensor y;
    if (xent) {
        y = Tensor(Shape{rows});
        for (std::size_t i = 0; i < rows; ++i) {
            y[i] = static_cast<double>(rng.below(out_w));
        }
    } else {
        y = Tensor(Shape{rows, out_w});
        for (std::size_t i = 0; i < y.numel(); ++i) y[i] = rng.uniform(-2.0, 2.0);
    }

    ParamVector point = init_params(spec, seed + 1);
    LossBuilder f = [spec, x, y, xent](Graph& g, std::span<const NodeRef> params) {
        NodeRef out = mlp_forward(g, spec, params, g.constant(x));
        return xent ? g.softmax_xent(out, g.constant(y)) : g.mse(out, g.constant(y));
    };
    return check_grad(f, point, eps);
}

namespace cli_detail {

inline DistConfig default_dist(const std::string& name) {
    if (name == "sinusoid") return DistConfig{"sinusoid", SinusoidConfig{}};
    if (name == "spurious") return DistConfig{"spurious", SpuriousClassConfig{}};
    throw ConfigError("unknown distribution \"" + name + "\" (expected sinusoid or spurious)");
}

struct CommonFlags {
    std::string config_path;
    std::string out_dir;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> method;
    std::optional<double> lambda;
    std::optional<int> eval_tasks;

    ExperimentConfig load_and_override() const {
        ExperimentConfig cfg = load_config(config_path);
        if (seed) cfg.seeds = {*seed};
        if (method) cfg.method = *method;
        if (lambda) {
            cfg.outer.lambda_pen = *lambda;
            cfg.lambda_grid.clear();
            cfg.lambda_grid.push_back(*lambda);
        }
        if (eval_tasks) cfg.eval_tasks = *eval_tasks;
        if (!out_dir.empty()) cfg.output_dir = out_dir;
        cfg.validate();
        return cfg;
    }
};

inline void add_common(CLI::App* sub, CommonFlags& flags, bool config_required = true) {
    auto* c = sub->add_option("--config", flags.config_path, "experiment config (JSON)");
    if (config_required) c->required();
    sub->add_option("--out", flags.out_dir, "output directory");
    sub->add_option_function<std::uint64_t>(
        "--seed", [&flags](std::uint64_t v) { flags.seed = v; }, "seed override");
    sub->add_option_function<std::string>(
        "--method", [&flags](std::string v) { flags.method = std::move(v); },
        "method override (maml|fomaml|metasgd|iml)");
    sub->add_option_function<double>(
        "--lambda", [&flags](double v) { flags.lambda = v; }, "penalty weight override");
    sub->add_option_function<int>(
        "--eval-tasks", [&flags](int v) { flags.eval_tasks = v; },
        "evaluation task count override");
}

inline int do_train(const CommonFlags& flags) {
    ExperimentConfig cfg = flags.load_and_override();
    const std::filesystem::path out(cfg.output_dir);
    std::filesystem::create_directories(out / "checkpoints");
    std::ofstream log(out / "log.txt");
    if (!log) throw IoError("cannot open " + (out / "log.txt").string());
    for (std::uint64_t seed : cfg.seeds) {
        TrainResult tr = run_train(cfg, seed);
        save_checkpoint(out / "checkpoints" / ("best_s" + std::to_string(seed) + ".ckpt"),
                        tr.best);
        save_checkpoint(out / "checkpoints" / ("final_s" + std::to_string(seed) + ".ckpt"),
                        tr.final_state);
        log << "seed " << seed << "\n";
        for (const TrainLogLine& l : tr.log) {
            log << "iter=" << l.iteration << " loss=" << format_double(l.loss)
                << " penalty=" << format_double(l.penalty);
            if (l.has_val) log << " val=" << format_double(l.val_metric);
            log << "\n";
        }
        log << "alpha_nonpositive_steps=" << tr.alpha_nonpositive_steps << "\n";
        std::cout << "seed " << seed << ": best val " << format_double(tr.best.val_metric)
                  << " at iteration " << tr.best.iteration << "\n";
    }
    if (!log.flush()) throw IoError("write failed for train log");
    return 0;
}

inline int do_eval(const CommonFlags& flags, const std::string& ckpt_path) {
    ExperimentConfig cfg = flags.load_and_override();
    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    const std::filesystem::path out(cfg.output_dir);
    std::filesystem::create_directories(out / "scores");
    std::vector<MetricsRecord> records;
    for (std::uint64_t seed : cfg.seeds) {
        EvalResult ev = evaluate(ckpt, cfg.effective_eval_dist(), cfg.eval_tasks, cfg.inner,
                                 seed);
        write_scores(ev, out / "scores" / ("eval_s" + std::to_string(seed) + ".json"));
        std::cout << "seed " << seed << ": " << format_double(ev.record.mean_metric) << " +- "
                  << format_double(ev.record.ci95_halfwidth) << " over " << ev.record.n_tasks
                  << " tasks\n";
        records.push_back(std::move(ev.record));
    }
    emit_csv(records, out / "metrics.csv");
    emit_json(records, out / "metrics.json");
    return 0;
}

inline int do_matrix(const CommonFlags& flags) {
    ExperimentConfig cfg = flags.load_and_override();
    const std::filesystem::path out(cfg.output_dir);
    std::filesystem::create_directories(out);
    MatrixResult mr = run_matrix(cfg, out);
    std::cout << "matrix complete: " << mr.records.size() << " records, "
              << mr.failures.size() << " failures\n";
    return 0;
}

inline int do_gradcheck(std::uint64_t seed, int instances) {
    double worst = 0.0;
    for (int i = 0; i < instances; ++i) {
        GradCheckReport rep = random_mlp_gradcheck(seed + static_cast<std::uint64_t>(i));
        if (!rep.all_finite) {
            std::cout << "instance " << i << ": non-finite difference\n";
            return 2;
        }
        worst = std::max(worst, rep.max_rel_err);
    }
    std::cout << "max rel err " << format_double(worst) << " over " << instances
              << " instances\n";
    return worst < 1e-4 ? 0 : 2;
}

inline int do_gen_tasks(const std::string& dist_name, int n, const std::string& out_path,
                        std::uint64_t seed) {
    if (n < 0) throw ConfigError("task count must be nonnegative");
    DistConfig dist = default_dist(dist_name);
    std::vector<Task> tasks;
    tasks.reserve(n);
    for (int i = 0; i < n; ++i) {
        Rng rng(seed + static_cast<std::uint64_t>(i));
        tasks.push_back(sample_task(dist, rng));
    }
    write_tasks(out_path, tasks);
    std::cout << "wrote " << tasks.size() << " tasks to " << out_path << "\n";
    return 0;
}

}  // namespace cli_detail

// Dispatches one CLI invocation; returns the process exit code.
// 0 = success, 1 = configuration/usage error, 2 = numeric failure.
inline int run_cli(const std::vector<std::string>& args) {
    CLI::App app{"iml: desk-scale meta-learning with a gradient-variance penalty"};
    app.require_subcommand(1);

    cli_detail::CommonFlags train_flags, eval_flags, matrix_flags;
    std::string ckpt_path;
    std::uint64_t gc_seed = 0;
    int gc_instances = 5;
    std::string gen_dist = "sinusoid";
    int gen_n = 10;
    std::string gen_out = "tasks.bin";
    std::uint64_t gen_seed = 0;

    auto* train = app.add_subcommand("train", "meta-train on the configured distribution");
    cli_detail::add_common(train, train_flags);

    auto* eval = app.add_subcommand("eval", "episodic evaluation of a checkpoint");
    cli_detail::add_common(eval, eval_flags);
    eval->add_option("--ckpt", ckpt_path, "checkpoint file")->required();

    auto* matrix = app.add_subcommand("matrix", "train/eval over distribution pairs");
    cli_detail::add_common(matrix, matrix_flags);

    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient audit");
    gradcheck->add_option("--seed", gc_seed, "instance seed");
    gradcheck->add_option("--instances", gc_instances, "number of randomized instances");

    auto* gen = app.add_subcommand("gen-tasks", "sample tasks into an episode file");
    gen->add_option("--dist", gen_dist, "sinusoid or spurious");
    gen->add_option("--n", gen_n, "number of tasks");
    gen->add_option("--out", gen_out, "output episode file");
    gen->add_option("--seed", gen_seed, "base seed");

    std::vector<const char*> argv;
    argv.push_back("iml");
    for (const std::string& a : args) argv.push_back(a.c_str());

    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        if (train->parsed()) return cli_detail::do_train(train_flags);
        if (eval->parsed()) return cli_detail::do_eval(eval_flags, ckpt_path);
        if (matrix->parsed()) return cli_detail::do_matrix(matrix_flags);
        if (gradcheck->parsed()) return cli_detail::do_gradcheck(gc_seed, gc_instances);
        if (gen->parsed()) {
            return cli_detail::do_gen_tasks(gen_dist, gen_n, gen_out, gen_seed);
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const ParseError& e) {
        std::cerr << "parse error: " << e.what() << "\n";
        return 1;
    } catch (const IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 1;
    } catch (const Error& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 2;
    }
    return 1;
}

}  // namespace iml
