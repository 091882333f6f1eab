#include <catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "iml/cli.hpp"
#include "iml/episode_io.hpp"
#include "iml/harness.hpp"

using namespace iml;

namespace {

namespace fs = std::filesystem;

fs::path fresh_dir(const std::string& name) {
    fs::path dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

ExperimentConfig tiny_sinusoid_config() {
    ExperimentConfig cfg;
    cfg.method = "maml";
    cfg.model = MlpSpec{{1, 8, 1}, Activation::Tanh, OutputKind::Regression};
    SinusoidConfig sin;
    sin.k_shot = 4;
    sin.q = 6;
    cfg.train_dist = DistConfig{"sin_train", sin};
    cfg.inner.alpha = 0.02;
    cfg.outer.meta_batch = 2;
    cfg.train_iterations = 20;
    cfg.val_every = 10;
    cfg.val_tasks = 4;
    cfg.eval_tasks = 8;
    cfg.seeds = {0};
    return cfg;
}

std::string log_to_string(const TrainResult& r) {
    std::ostringstream os;
    for (const TrainLogLine& l : r.log) {
        os << l.iteration << '|' << format_double(l.loss) << '|' << format_double(l.penalty);
        if (l.has_val) os << '|' << format_double(l.val_metric);
        os << '\n';
    }
    return os.str();
}

}  // namespace

TEST_CASE("run_train: zero iterations returns the initial parameters", "[harness]") {
    ExperimentConfig cfg = tiny_sinusoid_config();
    cfg.train_iterations = 0;
    TrainResult r = run_train(cfg, 3);
    REQUIRE(r.best.params.bit_equal(init_params(cfg.model, 3)));
    REQUIRE(r.best.iteration == 0);
    REQUIRE(r.final_state.params.bit_equal(r.best.params));
}

TEST_CASE("run_train: identical config and seed give identical logs", "[harness]") {
    ExperimentConfig cfg = tiny_sinusoid_config();
    TrainResult a = run_train(cfg, 5);
    TrainResult b = run_train(cfg, 5);
    REQUIRE(log_to_string(a) == log_to_string(b));
    REQUIRE(a.best.bit_equal(b.best));
    REQUIRE(a.final_state.bit_equal(b.final_state));

    TrainResult c = run_train(cfg, 6);
    REQUIRE(log_to_string(a) != log_to_string(c));
}

TEST_CASE("run_train: training reduces the validation mse", "[harness]") {
    ExperimentConfig cfg = tiny_sinusoid_config();
    cfg.train_iterations = 150;
    cfg.val_every = 50;
    TrainResult r = run_train(cfg, 1);
    const double first_val = r.log.front().val_metric;
    REQUIRE(r.best.val_metric < first_val);
}

TEST_CASE("run_train: metasgd keeps a learned alpha in the checkpoint", "[harness]") {
    ExperimentConfig cfg = tiny_sinusoid_config();
    cfg.method = "metasgd";
    cfg.train_iterations = 5;
    TrainResult r = run_train(cfg, 2);
    REQUIRE(r.best.alpha.has_value());
    REQUIRE(r.best.alpha->size() == r.best.params.size());
}

TEST_CASE("evaluate: balanced classes pin the untrained accuracy", "[harness]") {
    // Zero parameters produce uniform logits; argmax ties resolve to class
    // 0, and exact balance makes every task score exactly 1/n_way.
    Checkpoint ckpt;
    ckpt.method = "maml";
    ckpt.train_dist = "spur_train";
    ckpt.spec = MlpSpec{{16, 8, 5}, Activation::Relu, OutputKind::NWayLogits};
    ckpt.params.layout = mlp_layout(ckpt.spec);
    ckpt.params.values.assign(param_count(ckpt.spec), 0.0);

    DistConfig dist{"spur_eval", SpuriousClassConfig{}};
    InnerConfig inner;
    inner.alpha = 1e-9;  // keep the zero-logit tie after adaptation
    EvalResult ev = evaluate(ckpt, dist, 10, inner, 0);
    REQUIRE_THAT(ev.record.mean_metric, Catch::Matchers::WithinAbs(0.2, 1e-12));
    REQUIRE(ev.record.ci95_halfwidth <= 1e-12);
    REQUIRE(ev.record.n_tasks == 10);
}

TEST_CASE("evaluate: protocol shape and auditable interval", "[harness]") {
    ExperimentConfig cfg = tiny_sinusoid_config();
    TrainResult tr = run_train(cfg, 0);
    EvalResult ev = evaluate(tr.best, cfg.train_dist, 50, cfg.inner, 0);
    REQUIRE(ev.scores.size() == 50);

    // Recompute the summary from persisted scores.
    const fs::path dir = fresh_dir("iml_eval_audit");
    write_scores(ev, dir / "scores.json");
    std::ifstream in(dir / "scores.json");
    nlohmann::json j = nlohmann::json::parse(in);
    std::vector<double> post;
    for (const auto& s : j["scores"]) post.push_back(s["post"].get<double>());
    EvalSummary redo = summarize(post);
    REQUIRE(std::fabs(redo.mean - ev.record.mean_metric) <= 1e-12);
    REQUIRE(std::fabs(redo.ci95_halfwidth - ev.record.ci95_halfwidth) <= 1e-12);
    REQUIRE(std::fabs(ev.record.ci95_halfwidth -
                      1.96 * redo.sd / std::sqrt(50.0)) <= 1e-12);
    fs::remove_all(dir);
}

TEST_CASE("summarize: hand cases and binomial spread", "[harness]") {
    REQUIRE(summarize({1.0, 1.0, 1.0}).mean == 1.0);
    REQUIRE(summarize({1.0, 1.0, 1.0}).ci95_halfwidth == 0.0);
    REQUIRE(summarize({0.4, 0.4}).ci95_halfwidth == 0.0);

    // Uniform random predictor on 5-way tasks with 75 queries per task.
    Rng rng(101);
    std::vector<double> scores;
    const int queries = 75;
    for (int t = 0; t < 200; ++t) {
        int hits = 0;
        for (int q = 0; q < queries; ++q) {
            if (rng.below(5) == 0) ++hits;
        }
        scores.push_back(static_cast<double>(hits) / queries);
    }
    EvalSummary s = summarize(scores);
    const double sigma = std::sqrt(0.2 * 0.8 / (200.0 * queries));
    REQUIRE(std::fabs(s.mean - 0.2) <= 3.0 * sigma);
}

TEST_CASE("metrics: csv and json agree field by field", "[harness]") {
    std::vector<MetricsRecord> records;
    MetricsRecord r;
    r.method = "iml";
    r.train_dist = "a";
    r.eval_dist = "b";
    r.seed = 7;
    r.lambda_pen = 0.1;
    r.mean_metric = 0.123456789012345678;
    r.ci95_halfwidth = 0.002;
    r.n_tasks = 200;
    r.wall_time_s = 1.5;
    records.push_back(r);

    const fs::path dir = fresh_dir("iml_metrics");
    emit_csv(records, dir / "metrics.csv");
    emit_json(records, dir / "metrics.json");
    std::vector<MetricsRecord> from_csv = read_csv_records(dir / "metrics.csv");
    std::vector<MetricsRecord> from_json = read_json_records(dir / "metrics.json");
    REQUIRE(from_csv.size() == 1);
    REQUIRE(from_json.size() == 1);
    REQUIRE(from_csv[0].method == from_json[0].method);
    REQUIRE(from_csv[0].train_dist == from_json[0].train_dist);
    REQUIRE(from_csv[0].eval_dist == from_json[0].eval_dist);
    REQUIRE(from_csv[0].seed == from_json[0].seed);
    REQUIRE(from_csv[0].lambda_pen == from_json[0].lambda_pen);
    REQUIRE(from_csv[0].mean_metric == from_json[0].mean_metric);
    REQUIRE(from_csv[0].ci95_halfwidth == from_json[0].ci95_halfwidth);
    REQUIRE(from_csv[0].n_tasks == from_json[0].n_tasks);
    // Round-trip through text is exact.
    REQUIRE(from_csv[0].mean_metric == r.mean_metric);
    fs::remove_all(dir);
}

TEST_CASE("metrics: empty record list emits a header-only csv", "[harness]") {
    const fs::path dir = fresh_dir("iml_metrics_empty");
    emit_csv({}, dir / "metrics.csv");
    std::ifstream in(dir / "metrics.csv");
    std::string line;
    REQUIRE(std::getline(in, line));
    REQUIRE(line == kMetricsCsvHeader);
    REQUIRE_FALSE(std::getline(in, line));
    REQUIRE(read_csv_records(dir / "metrics.csv").empty());
    fs::remove_all(dir);
}

TEST_CASE("checkpoint: save/load round trip is bitwise", "[harness]") {
    ExperimentConfig cfg = tiny_sinusoid_config();
    cfg.method = "metasgd";
    cfg.train_iterations = 8;
    TrainResult tr = run_train(cfg, 11);
    const fs::path dir = fresh_dir("iml_ckpt");
    save_checkpoint(dir / "c.ckpt", tr.best);
    Checkpoint back = load_checkpoint(dir / "c.ckpt");
    REQUIRE(back.bit_equal(tr.best));
    REQUIRE(back.alpha.has_value());
    fs::remove_all(dir);
}

TEST_CASE("run_matrix: single cell emits a single record", "[harness]") {
    ExperimentConfig cfg = tiny_sinusoid_config();
    cfg.train_iterations = 4;
    cfg.pairs = {DistributionPair{cfg.train_dist, cfg.train_dist}};
    const fs::path dir = fresh_dir("iml_matrix_single");
    MatrixResult mr = run_matrix(cfg, dir);
    REQUIRE(mr.records.size() == 1);
    REQUIRE(mr.failures.empty());
    REQUIRE(fs::exists(dir / "metrics.csv"));
    REQUIRE(fs::exists(dir / "metrics.json"));
    REQUIRE(fs::exists(dir / "matrix_summary.json"));
    fs::remove_all(dir);
}

TEST_CASE("run_matrix: iml at lambda zero reproduces the maml column", "[harness]") {
    ExperimentConfig cfg = tiny_sinusoid_config();
    cfg.train_iterations = 6;
    cfg.methods = {"maml", "iml"};
    cfg.lambda_grid = {0.0, 0.1};
    DistConfig eval_shift = make_shifted(cfg.train_dist,
                                         {{"name", "sin_eval"},
                                          {"phase_range", {3.141592653589793, 6.283185307179586}}});
    cfg.pairs = {DistributionPair{cfg.train_dist, cfg.train_dist},
                 DistributionPair{cfg.train_dist, eval_shift}};
    const fs::path dir = fresh_dir("iml_matrix_grid");
    MatrixResult mr = run_matrix(cfg, dir);

    // maml once + iml twice per pair, one seed.
    REQUIRE(mr.records.size() == 2 * (1 + 2));
    REQUIRE(mr.failures.empty());

    for (const std::string& eval_name : {std::string("sin_train"), std::string("sin_eval")}) {
        const MetricsRecord* maml = nullptr;
        const MetricsRecord* iml0 = nullptr;
        for (const MetricsRecord& r : mr.records) {
            if (r.eval_dist != eval_name) continue;
            if (r.method == "maml") maml = &r;
            if (r.method == "iml" && r.lambda_pen == 0.0) iml0 = &r;
        }
        REQUIRE(maml != nullptr);
        REQUIRE(iml0 != nullptr);
        REQUIRE(maml->mean_metric == iml0->mean_metric);
        REQUIRE(maml->ci95_halfwidth == iml0->ci95_halfwidth);
    }
    fs::remove_all(dir);
}

TEST_CASE("run_matrix: failures are recorded per cell and the run continues", "[harness]") {
    ExperimentConfig cfg = tiny_sinusoid_config();
    cfg.train_iterations = 2;
    cfg.methods = {"maml"};
    // Cross pairing on a classification pair fails at step time; the
    // regression pair still completes.
    SpuriousClassConfig sp;
    sp.q_per_class = 2;
    DistConfig cls{"spur", sp};
    cfg.model = MlpSpec{{1, 6, 1}, Activation::Tanh, OutputKind::Regression};
    cfg.outer.pairing = Pairing::Cross;
    cfg.pairs = {DistributionPair{cfg.train_dist, cfg.train_dist},
                 DistributionPair{cls, cls}};
    const fs::path dir = fresh_dir("iml_matrix_fail");
    MatrixResult mr = run_matrix(cfg, dir);
    REQUIRE(mr.records.size() == 1);
    REQUIRE(mr.failures.size() == 1);
    REQUIRE(mr.summary["failures"].size() == 1);
    fs::remove_all(dir);
}

TEST_CASE("cli: gen-tasks writes a readable episode file", "[harness][cli]") {
    const fs::path dir = fresh_dir("iml_cli_gen");
    const std::string out = (dir / "t.bin").string();
    REQUIRE(run_cli({"gen-tasks", "--dist", "sinusoid", "--n", "10", "--out", out}) == 0);
    REQUIRE(read_tasks(out).size() == 10);
    fs::remove_all(dir);
}

TEST_CASE("cli: gradcheck reports a small max relative error", "[harness][cli]") {
    REQUIRE(run_cli({"gradcheck", "--seed", "0"}) == 0);
}

TEST_CASE("cli: missing config file exits with code 1", "[harness][cli]") {
    REQUIRE(run_cli({"train", "--config", "definitely_missing.json"}) == 1);
}

TEST_CASE("cli: unknown flag exits with code 1", "[harness][cli]") {
    REQUIRE(run_cli({"train", "--bogus"}) == 1);
    REQUIRE(run_cli({}) == 1);
}

TEST_CASE("cli: train then eval produces deterministic metrics", "[harness][cli]") {
    const fs::path dir = fresh_dir("iml_cli_train");
    ExperimentConfig cfg = tiny_sinusoid_config();
    cfg.train_iterations = 6;
    cfg.output_dir = (dir / "run").string();
    {
        std::ofstream out(dir / "config.json");
        out << config_to_json(cfg).dump(2);
    }
    const std::string config = (dir / "config.json").string();
    REQUIRE(run_cli({"train", "--config", config}) == 0);
    const std::string ckpt = (dir / "run" / "checkpoints" / "best_s0.ckpt").string();
    REQUIRE(fs::exists(ckpt));

    auto eval_bytes = [&](const std::string& out_dir) {
        REQUIRE(run_cli({"eval", "--config", config, "--ckpt", ckpt, "--out", out_dir}) == 0);
        std::ifstream in(fs::path(out_dir) / "metrics.csv", std::ios::binary);
        std::stringstream ss;
        ss << in.rdbuf();
        return ss.str();
    };
    const std::string a = eval_bytes((dir / "eval_a").string());
    const std::string b = eval_bytes((dir / "eval_b").string());
    REQUIRE(a == b);
    REQUIRE_FALSE(a.empty());
    fs::remove_all(dir);
}
