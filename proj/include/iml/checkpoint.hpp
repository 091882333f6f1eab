#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>

#include <json.hpp>

#include "iml/errors.hpp"
#include "iml/meta.hpp"
#include "iml/model.hpp"

namespace iml {

// -- enum <-> string ---------------------------------------------------------

inline std::string to_string(Activation a) { return a == Activation::Tanh ? "tanh" : "relu"; }
inline std::string to_string(OutputKind k) {
    return k == OutputKind::Regression ? "regression" : "n_way_logits";
}
inline std::string to_string(OptimizerKind k) {
    return k == OptimizerKind::Adam ? "adam" : "sgd";
}
inline std::string to_string(Pairing p) { return p == Pairing::Matched ? "matched" : "cross"; }
inline std::string to_string(VarianceGrad v) {
    return v == VarianceGrad::Exact ? "exact" : "stop_grad";
}

inline Activation activation_from_string(const std::string& s) {
    if (s == "tanh") return Activation::Tanh;
    if (s == "relu") return Activation::Relu;
    throw ConfigError("unknown activation \"" + s + "\"");
}

inline OutputKind output_kind_from_string(const std::string& s) {
    if (s == "regression") return OutputKind::Regression;
    if (s == "n_way_logits") return OutputKind::NWayLogits;
    throw ConfigError("unknown output kind \"" + s + "\"");
}

inline OptimizerKind optimizer_from_string(const std::string& s) {
    if (s == "adam") return OptimizerKind::Adam;
    if (s == "sgd") return OptimizerKind::Sgd;
    throw ConfigError("unknown optimizer \"" + s + "\"");
}

inline Pairing pairing_from_string(const std::string& s) {
    if (s == "matched") return Pairing::Matched;
    if (s == "cross") return Pairing::Cross;
    throw ConfigError("unknown pairing \"" + s + "\"");
}

inline VarianceGrad variance_grad_from_string(const std::string& s) {
    if (s == "exact") return VarianceGrad::Exact;
    if (s == "stop_grad") return VarianceGrad::StopGrad;
    throw ConfigError("unknown variance_grad \"" + s + "\"");
}

// -- model spec and params ---------------------------------------------------

inline nlohmann::json spec_to_json(const MlpSpec& spec) {
    return nlohmann::json{{"layer_widths", spec.layer_widths},
                          {"activation", to_string(spec.activation)},
                          {"output_kind", to_string(spec.output_kind)}};
}

inline MlpSpec spec_from_json(const nlohmann::json& j) {
    MlpSpec spec;
    spec.layer_widths = j.at("layer_widths").get<std::vector<std::size_t>>();
    spec.activation = activation_from_string(j.at("activation").get<std::string>());
    spec.output_kind = output_kind_from_string(j.at("output_kind").get<std::string>());
    spec.validate();
    return spec;
}

inline nlohmann::json params_to_json(const ParamVector& p) {
    nlohmann::json layout = nlohmann::json::array();
    for (const LayoutEntry& e : p.layout) {
        layout.push_back({{"name", e.name}, {"shape", e.shape}, {"offset", e.offset}});
    }
    return nlohmann::json{{"layout", layout}, {"values", p.values}};
}

inline ParamVector params_from_json(const nlohmann::json& j) {
    ParamVector p;
    for (const auto& e : j.at("layout")) {
        p.layout.push_back({e.at("name").get<std::string>(), e.at("shape").get<Shape>(),
                            e.at("offset").get<std::size_t>()});
    }
    p.values = j.at("values").get<std::vector<double>>();
    p.validate();
    return p;
}

// -- checkpoint --------------------------------------------------------------

// Everything needed to resume or evaluate a training run: model spec,
// flat parameters (plus alpha under Meta-SGD), outer optimizer state, and
// the task-stream position that stands in for rng state.
struct Checkpoint {
    std::string method = "maml";
    std::string train_dist;
    MlpSpec spec;
    ParamVector params;
    std::optional<ParamVector> alpha;
    MetaOptimizer opt;
    std::uint64_t seed = 0;
    std::uint64_t next_task_index = 0;
    std::string rng_state;
    std::uint64_t iteration = 0;
    double val_metric = 0.0;
    double lambda_pen = 0.0;

    bool bit_equal(const Checkpoint& o) const {
        const bool base = method == o.method && train_dist == o.train_dist &&
                          spec.layer_widths == o.spec.layer_widths &&
                          spec.activation == o.spec.activation &&
                          spec.output_kind == o.spec.output_kind &&
                          params.bit_equal(o.params) && seed == o.seed &&
                          next_task_index == o.next_task_index && rng_state == o.rng_state &&
                          iteration == o.iteration && opt.t == o.opt.t &&
                          opt.kind == o.opt.kind;
        if (!base) return false;
        if (alpha.has_value() != o.alpha.has_value()) return false;
        if (alpha && !alpha->bit_equal(*o.alpha)) return false;
        auto vec_eq = [](const std::vector<double>& a, const std::vector<double>& b) {
            if (a.size() != b.size()) return false;
            for (std::size_t i = 0; i < a.size(); ++i) {
                if (std::memcmp(&a[i], &b[i], sizeof(double)) != 0) return false;
            }
            return true;
        };
        return vec_eq(opt.m, o.opt.m) && vec_eq(opt.v, o.opt.v) &&
               std::memcmp(&val_metric, &o.val_metric, sizeof(double)) == 0 &&
               std::memcmp(&lambda_pen, &o.lambda_pen, sizeof(double)) == 0 &&
               std::memcmp(&opt.eta, &o.opt.eta, sizeof(double)) == 0;
    }
};

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    nlohmann::json j{{"method", ckpt.method},
                     {"train_dist", ckpt.train_dist},
                     {"model", spec_to_json(ckpt.spec)},
                     {"params", params_to_json(ckpt.params)},
                     {"optimizer",
                      {{"kind", to_string(ckpt.opt.kind)},
                       {"eta", ckpt.opt.eta},
                       {"t", ckpt.opt.t},
                       {"m", ckpt.opt.m},
                       {"v", ckpt.opt.v}}},
                     {"seed", ckpt.seed},
                     {"next_task_index", ckpt.next_task_index},
                     {"rng_state", ckpt.rng_state},
                     {"iteration", ckpt.iteration},
                     {"val_metric", ckpt.val_metric},
                     {"lambda_pen", ckpt.lambda_pen}};
    if (ckpt.alpha) {
        j["alpha"] = params_to_json(*ckpt.alpha);
    }
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << j.dump(2) << "\n";
    if (!out.flush()) throw IoError("write failed for " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open checkpoint " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError("checkpoint " + path.string() + ": " + e.what());
    }
    Checkpoint ckpt;
    try {
        ckpt.method = j.at("method").get<std::string>();
        ckpt.train_dist = j.value("train_dist", "");
        ckpt.spec = spec_from_json(j.at("model"));
        ckpt.params = params_from_json(j.at("params"));
        if (j.contains("alpha")) ckpt.alpha = params_from_json(j.at("alpha"));
        const auto& o = j.at("optimizer");
        ckpt.opt.kind = optimizer_from_string(o.at("kind").get<std::string>());
        ckpt.opt.eta = o.at("eta").get<double>();
        ckpt.opt.t = o.at("t").get<std::uint64_t>();
        ckpt.opt.m = o.at("m").get<std::vector<double>>();
        ckpt.opt.v = o.at("v").get<std::vector<double>>();
        ckpt.seed = j.at("seed").get<std::uint64_t>();
        ckpt.next_task_index = j.at("next_task_index").get<std::uint64_t>();
        ckpt.rng_state = j.at("rng_state").get<std::string>();
        ckpt.iteration = j.at("iteration").get<std::uint64_t>();
        ckpt.val_metric = j.at("val_metric").get<double>();
        ckpt.lambda_pen = j.value("lambda_pen", 0.0);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("checkpoint " + path.string() + ": " + e.what());
    }
    return ckpt;
}

}  // namespace iml
