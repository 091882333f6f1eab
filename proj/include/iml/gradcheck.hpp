#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "iml/graph.hpp"
#include "iml/model.hpp"

namespace iml {

struct GradCheckEntry {
    double analytic = 0.0;
    double numeric = 0.0;
    double rel_err = 0.0;
    bool finite = true;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double max_rel_err = 0.0;
    bool all_finite = true;
};

namespace detail {

inline double eval_builder_at(const LossBuilder& f, const ParamVector& point) {
    Graph g;
    std::vector<NodeRef> leaves = param_nodes(g, point);
    return g.eval(f(g, leaves)).scalar_value();
}

// Relative error with a unit floor, so near-zero gradients are judged on
// absolute error rather than blowing up the ratio.
inline double relative_error(double a, double b) {
    const double denom = std::max({1.0, std::fabs(a), std::fabs(b)});
    return std::fabs(a - b) / denom;
}

}  // namespace detail

// Central-difference gradient audit of a scalar objective. Pure: builds
// fresh graphs for every probe and never touches shared state. Non-finite
// analytic or numeric results are flagged in the report, not thrown.
inline GradCheckReport check_grad(const LossBuilder& f, const ParamVector& point, double eps) {
    if (!(eps > 0.0)) {
        throw ConfigError("check_grad step must be positive");
    }
    GradCheckReport report;
    report.entries.resize(point.size());

    // Analytic side: one reverse pass.
    {
        Graph g;
        std::vector<NodeRef> leaves = param_nodes(g, point);
        NodeRef out = f(g, leaves);
        std::vector<NodeRef> grads = g.grad(out, leaves);
        std::size_t flat = 0;
        for (NodeRef gr : grads) {
            const Tensor& t = g.eval(gr);
            for (std::size_t i = 0; i < t.numel(); ++i) {
                report.entries[flat++].analytic = t[i];
            }
        }
    }

    // Numeric side: two probes per coordinate.
    ParamVector probe = point;
    for (std::size_t i = 0; i < point.size(); ++i) {
        GradCheckEntry& e = report.entries[i];
        try {
            probe.values[i] = point.values[i] + eps;
            const double fp = detail::eval_builder_at(f, probe);
            probe.values[i] = point.values[i] - eps;
            const double fm = detail::eval_builder_at(f, probe);
            e.numeric = (fp - fm) / (2.0 * eps);
        } catch (const NonFiniteValue&) {
            e.numeric = std::numeric_limits<double>::quiet_NaN();
        }
        probe.values[i] = point.values[i];

        e.finite = std::isfinite(e.analytic) && std::isfinite(e.numeric);
        e.rel_err = e.finite ? detail::relative_error(e.analytic, e.numeric)
                             : std::numeric_limits<double>::infinity();
        report.all_finite = report.all_finite && e.finite;
        report.max_rel_err = std::max(report.max_rel_err, e.rel_err);
    }
    return report;
}

}  // namespace iml
