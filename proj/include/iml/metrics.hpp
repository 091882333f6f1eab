#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "iml/errors.hpp"

namespace iml {

// Shortest text form that parses back to the identical double.
inline std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

// One evaluation cell: method trained on train_dist, scored on eval_dist.
// wall_time_s is diagnostic only; it is emitted in the JSON artifact but
// kept out of metrics.csv so reruns of the same (config, seed) are
// byte-identical.
struct MetricsRecord {
    std::string method;
    std::string train_dist;
    std::string eval_dist;
    std::uint64_t seed = 0;
    double lambda_pen = 0.0;
    double mean_metric = 0.0;
    double ci95_halfwidth = 0.0;
    int n_tasks = 0;
    double wall_time_s = 0.0;
};

inline const char* kMetricsCsvHeader =
    "method,train_dist,eval_dist,seed,lambda_pen,mean_metric,ci95_halfwidth,n_tasks";

inline void emit_csv(const std::vector<MetricsRecord>& records,
                     const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << kMetricsCsvHeader << "\n";
    for (const MetricsRecord& r : records) {
        out << r.method << ',' << r.train_dist << ',' << r.eval_dist << ',' << r.seed << ','
            << format_double(r.lambda_pen) << ',' << format_double(r.mean_metric) << ','
            << format_double(r.ci95_halfwidth) << ',' << r.n_tasks << "\n";
    }
    if (!out.flush()) throw IoError("write failed for " + path.string());
}

inline nlohmann::json record_to_json(const MetricsRecord& r) {
    return nlohmann::json{{"method", r.method},
                          {"train_dist", r.train_dist},
                          {"eval_dist", r.eval_dist},
                          {"seed", r.seed},
                          {"lambda_pen", r.lambda_pen},
                          {"mean_metric", r.mean_metric},
                          {"ci95_halfwidth", r.ci95_halfwidth},
                          {"n_tasks", r.n_tasks},
                          {"wall_time_s", r.wall_time_s}};
}

inline MetricsRecord record_from_json(const nlohmann::json& j) {
    MetricsRecord r;
    r.method = j.at("method").get<std::string>();
    r.train_dist = j.at("train_dist").get<std::string>();
    r.eval_dist = j.at("eval_dist").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.lambda_pen = j.at("lambda_pen").get<double>();
    r.mean_metric = j.at("mean_metric").get<double>();
    r.ci95_halfwidth = j.at("ci95_halfwidth").get<double>();
    r.n_tasks = j.at("n_tasks").get<int>();
    r.wall_time_s = j.value("wall_time_s", 0.0);
    return r;
}

inline void emit_json(const std::vector<MetricsRecord>& records,
                      const std::filesystem::path& path) {
    nlohmann::json arr = nlohmann::json::array();
    for (const MetricsRecord& r : records) arr.push_back(record_to_json(r));
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << arr.dump(2) << "\n";
    if (!out.flush()) throw IoError("write failed for " + path.string());
}

inline std::vector<MetricsRecord> read_json_records(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    nlohmann::json arr = nlohmann::json::parse(in, nullptr, /*allow_exceptions=*/true);
    std::vector<MetricsRecord> out;
    for (const auto& j : arr) out.push_back(record_from_json(j));
    return out;
}

inline std::vector<MetricsRecord> read_csv_records(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw ParseError("empty metrics csv " + path.string());
    if (line != kMetricsCsvHeader) throw ParseError("unexpected csv header in " + path.string());
    std::vector<MetricsRecord> out;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string field;
        std::vector<std::string> fields;
        while (std::getline(ss, field, ',')) fields.push_back(field);
        if (fields.size() != 8) {
            throw ParseError(path.string() + ":" + std::to_string(lineno) +
                             ": expected 8 fields, got " + std::to_string(fields.size()));
        }
        MetricsRecord r;
        r.method = fields[0];
        r.train_dist = fields[1];
        r.eval_dist = fields[2];
        r.seed = std::stoull(fields[3]);
        r.lambda_pen = std::stod(fields[4]);
        r.mean_metric = std::stod(fields[5]);
        r.ci95_halfwidth = std::stod(fields[6]);
        r.n_tasks = std::stoi(fields[7]);
        out.push_back(std::move(r));
    }
    return out;
}

// Mean and normal-approximation 95% interval with the n-1 sd divisor.
struct EvalSummary {
    double mean = 0.0;
    double sd = 0.0;
    double ci95_halfwidth = 0.0;
    int n = 0;
};

inline EvalSummary summarize(const std::vector<double>& scores) {
    EvalSummary s;
    s.n = static_cast<int>(scores.size());
    if (scores.empty()) return s;
    double acc = 0.0;
    for (double v : scores) acc += v;
    s.mean = acc / static_cast<double>(scores.size());
    if (scores.size() > 1) {
        double ss = 0.0;
        for (double v : scores) ss += (v - s.mean) * (v - s.mean);
        s.sd = std::sqrt(ss / static_cast<double>(scores.size() - 1));
        s.ci95_halfwidth = 1.96 * s.sd / std::sqrt(static_cast<double>(scores.size()));
    }
    return s;
}

}  // namespace iml
