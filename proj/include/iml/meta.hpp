#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "iml/errors.hpp"
#include "iml/graph.hpp"
#include "iml/model.hpp"
#include "iml/tasks.hpp"

namespace iml {

enum class Pairing { Matched, Cross };
enum class VarianceGrad { Exact, StopGrad };
enum class OptimizerKind { Adam, Sgd };

struct InnerConfig {
    double alpha = 0.01;
    int steps = 1;
    bool learn_alpha = false;
    bool first_order = false;

    void validate() const {
        if (!(alpha > 0.0)) throw ConfigError("inner alpha must be positive");
        if (steps < 1) throw ConfigError("inner steps must be at least 1");
    }
};

struct OuterConfig {
    double eta = 1e-3;
    double lambda_pen = 0.0;
    int meta_batch = 4;
    Pairing pairing = Pairing::Matched;
    VarianceGrad variance_grad = VarianceGrad::Exact;
    OptimizerKind optimizer = OptimizerKind::Adam;

    static constexpr double kAdamBeta1 = 0.9;
    static constexpr double kAdamBeta2 = 0.999;
    static constexpr double kAdamEps = 1e-8;

    void validate() const {
        if (!(eta > 0.0)) throw ConfigError("outer eta must be positive");
        if (lambda_pen < 0.0) throw ConfigError("lambda_pen must be nonnegative");
        if (meta_batch < 1) throw ConfigError("meta_batch must be positive");
    }
};

// theta' nodes after the inner loop, still differentiable functions of
// theta unless first_order froze the inner gradients.
struct AdaptResult {
    std::vector<NodeRef> adapted;
    std::vector<double> inner_losses;
};

// One task as a pair of scalar objectives over parameter nodes.
struct TaskObjective {
    LossBuilder support_loss;
    LossBuilder query_loss;
    TaskKind kind = TaskKind::Regression;
};

// -- inner loop --------------------------------------------------------------

// Gradient descent on the support objective: theta' = theta - alpha * grad,
// applied cfg.steps times. With per-parameter alpha nodes the step is an
// elementwise product; otherwise cfg.alpha scales uniformly.
inline AdaptResult adapt(Graph& g, std::span<const NodeRef> theta,
                         const LossBuilder& support_loss, const InnerConfig& cfg,
                         std::span<const NodeRef> alpha_nodes = {}) {
    if (cfg.steps < 1) throw ConfigError("inner steps must be at least 1");
    if (!alpha_nodes.empty() && alpha_nodes.size() != theta.size()) {
        throw ShapeError("per-parameter alpha count does not match parameter count");
    }
    AdaptResult result;
    std::vector<NodeRef> cur(theta.begin(), theta.end());
    for (int s = 0; s < cfg.steps; ++s) {
        NodeRef loss = support_loss(g, cur);
        result.inner_losses.push_back(g.eval(loss).scalar_value());
        std::vector<NodeRef> gs = g.grad(loss, cur);
        for (std::size_t k = 0; k < cur.size(); ++k) {
            NodeRef gk = cfg.first_order ? g.stop_grad(gs[k]) : gs[k];
            NodeRef delta = alpha_nodes.empty() ? g.scalar_mul(cfg.alpha, gk)
                                                : g.mul(alpha_nodes[k], gk);
            cur[k] = g.sub(cur[k], delta);
        }
    }
    result.adapted = std::move(cur);
    return result;
}

// -- model-backed objectives -------------------------------------------------

inline LossBuilder support_loss_builder(const MlpSpec& spec, const Task& task) {
    return [&spec, &task](Graph& g, std::span<const NodeRef> params) {
        NodeRef out = mlp_forward(g, spec, params, g.constant(task.support_x));
        if (task.kind == TaskKind::Classification) {
            return g.softmax_xent(out, g.constant(task.support_y));
        }
        return g.mse(out, g.constant(task.support_y));
    };
}

inline LossBuilder query_loss_builder(const MlpSpec& spec, const Task& task) {
    return [&spec, &task](Graph& g, std::span<const NodeRef> params) {
        if (task.query_x.rows() == 0) throw ConfigError("query set is empty");
        NodeRef out = mlp_forward(g, spec, params, g.constant(task.query_x));
        if (task.kind == TaskKind::Classification) {
            return g.softmax_xent(out, g.constant(task.query_y));
        }
        return g.mse(out, g.constant(task.query_y));
    };
}

inline TaskObjective make_task_objective(const MlpSpec& spec, const Task& task) {
    return TaskObjective{support_loss_builder(spec, task), query_loss_builder(spec, task),
                         task.kind};
}

inline AdaptResult adapt(Graph& g, const MlpSpec& spec, std::span<const NodeRef> theta,
                         const Task& task, const InnerConfig& cfg,
                         std::span<const NodeRef> alpha_nodes = {}) {
    return adapt(g, theta, support_loss_builder(spec, task), cfg, alpha_nodes);
}

// Scalar query loss of an adapted parameter set (MSE for regression, mean
// softmax cross entropy for classification).
inline NodeRef task_query_loss(Graph& g, const MlpSpec& spec, const AdaptResult& adapted,
                               const Task& task) {
    return query_loss_builder(spec, task)(g, adapted.adapted);
}

// -- outer objective ----------------------------------------------------------

struct OuterObjective {
    NodeRef loss;                                     // sum of the task terms
    std::vector<NodeRef> term_losses;                 // per term
    std::vector<std::vector<NodeRef>> per_task_grads; // d(term)/d(theta), per term
};

// Matched pairing evaluates each adapted model on its own task's query set;
// cross pairing takes the full product of adapted models and query sets.
// Cross pairing is rejected for classification batches because episodic
// label indices are not comparable across tasks.
inline OuterObjective outer_objective(Graph& g, std::span<const NodeRef> theta,
                                      std::span<const TaskObjective> batch,
                                      const InnerConfig& inner, Pairing pairing,
                                      bool want_per_task_grads = true,
                                      std::span<const NodeRef> alpha_nodes = {}) {
    if (batch.empty()) throw ConfigError("outer objective needs at least one task");
    if (pairing == Pairing::Cross) {
        for (const TaskObjective& t : batch) {
            if (t.kind == TaskKind::Classification) {
                throw PairingError(
                    "cross pairing undefined for episodic classification label spaces");
            }
        }
    }

    std::vector<NodeRef> wrt(theta.begin(), theta.end());
    OuterObjective obj;
    std::vector<AdaptResult> adapted;
    adapted.reserve(batch.size());
    for (const TaskObjective& t : batch) {
        adapted.push_back(adapt(g, theta, t.support_loss, inner, alpha_nodes));
    }

    auto add_term = [&](NodeRef term) {
        obj.term_losses.push_back(term);
        if (want_per_task_grads) obj.per_task_grads.push_back(g.grad(term, wrt));
    };

    if (pairing == Pairing::Matched) {
        for (std::size_t i = 0; i < batch.size(); ++i) {
            add_term(batch[i].query_loss(g, adapted[i].adapted));
        }
    } else {
        for (std::size_t i = 0; i < batch.size(); ++i) {
            for (std::size_t j = 0; j < batch.size(); ++j) {
                add_term(batch[j].query_loss(g, adapted[i].adapted));
            }
        }
    }

    obj.loss = obj.term_losses[0];
    for (std::size_t k = 1; k < obj.term_losses.size(); ++k) {
        obj.loss = g.add(obj.loss, obj.term_losses[k]);
    }
    return obj;
}

// -- gradient variance penalty -------------------------------------------------

// trace of the population covariance of the per-task gradient vectors:
// sum_p (1/M) sum_m (g_m[p] - mean[p])^2. Zero for M = 1 and whenever all
// tasks agree on the gradient; differentiable with respect to anything the
// gradient nodes depend on.
inline NodeRef grad_variance_penalty(Graph& g,
                                     std::span<const std::vector<NodeRef>> per_task_grads) {
    const std::size_t m_tasks = per_task_grads.size();
    if (m_tasks == 0) throw ConfigError("penalty needs at least one gradient vector");
    const std::size_t entries = per_task_grads[0].size();
    for (const auto& gv : per_task_grads) {
        if (gv.size() != entries) {
            throw ShapeError("per-task gradient vectors have differing entry counts");
        }
    }
    if (m_tasks == 1) {
        return g.constant(Tensor::scalar(0.0));
    }

    const double inv_m = 1.0 / static_cast<double>(m_tasks);
    NodeRef total{};
    bool have_total = false;
    for (std::size_t e = 0; e < entries; ++e) {
        NodeRef acc_mean = per_task_grads[0][e];
        for (std::size_t m = 1; m < m_tasks; ++m) {
            acc_mean = g.add(acc_mean, per_task_grads[m][e]);
        }
        NodeRef mean = g.scalar_mul(inv_m, acc_mean);
        for (std::size_t m = 0; m < m_tasks; ++m) {
            NodeRef dev = g.sum(g.square(g.sub(per_task_grads[m][e], mean)));
            if (have_total) {
                total = g.add(total, dev);
            } else {
                total = dev;
                have_total = true;
            }
        }
    }
    return g.scalar_mul(inv_m, total);
}

// -- outer optimizers ------------------------------------------------------------

// First/second moment state for Adam; plain SGD keeps no state. Sized for
// the full outer parameter vector (theta, plus alpha under Meta-SGD).
struct MetaOptimizer {
    OptimizerKind kind = OptimizerKind::Adam;
    double eta = 1e-3;
    std::uint64_t t = 0;
    std::vector<double> m, v;

    static MetaOptimizer make(const OuterConfig& outer, std::size_t dim) {
        MetaOptimizer opt;
        opt.kind = outer.optimizer;
        opt.eta = outer.eta;
        if (opt.kind == OptimizerKind::Adam) {
            opt.m.assign(dim, 0.0);
            opt.v.assign(dim, 0.0);
        }
        return opt;
    }

    void update(std::span<double> params, std::span<const double> grad) {
        if (params.size() != grad.size()) {
            throw ShapeError("optimizer parameter/gradient size mismatch");
        }
        if (kind == OptimizerKind::Sgd) {
            for (std::size_t i = 0; i < params.size(); ++i) params[i] -= eta * grad[i];
            return;
        }
        if (m.size() != params.size()) {
            throw ShapeError("adam state sized for " + std::to_string(m.size()) +
                             " parameters, got " + std::to_string(params.size()));
        }
        ++t;
        const double c1 = 1.0 - std::pow(OuterConfig::kAdamBeta1, static_cast<double>(t));
        const double c2 = 1.0 - std::pow(OuterConfig::kAdamBeta2, static_cast<double>(t));
        for (std::size_t i = 0; i < params.size(); ++i) {
            m[i] = OuterConfig::kAdamBeta1 * m[i] + (1.0 - OuterConfig::kAdamBeta1) * grad[i];
            v[i] = OuterConfig::kAdamBeta2 * v[i] +
                   (1.0 - OuterConfig::kAdamBeta2) * grad[i] * grad[i];
            params[i] -= eta * (m[i] / c1) / (std::sqrt(v[i] / c2) + OuterConfig::kAdamEps);
        }
    }
};

// -- meta steps -------------------------------------------------------------------

struct StepResult {
    ParamVector theta;
    ParamVector alpha;  // updated only under Meta-SGD, otherwise a copy
    double outer_loss = 0.0;
    double penalty = 0.0;
    std::vector<double> term_losses;
    bool alpha_nonpositive = false;
};

namespace detail {

inline void flatten_grads(Graph& g, std::span<const NodeRef> grads,
                          const std::vector<LayoutEntry>& layout, std::vector<double>& out) {
    for (std::size_t k = 0; k < grads.size(); ++k) {
        const Tensor& t = g.eval(grads[k]);
        if (t.numel() != layout[k].numel()) {
            throw ShapeError("gradient entry size mismatch for " + layout[k].name);
        }
        out.insert(out.end(), t.values().begin(), t.values().end());
    }
}

// Shared implementation of the outer update. Builds one graph per step:
// inner loops, task terms, optional variance penalty, and a single reverse
// pass through all of it.
inline StepResult meta_step(const ParamVector& theta, const ParamVector* alpha,
                            std::span<const TaskObjective> batch, const InnerConfig& inner,
                            const OuterConfig& outer, MetaOptimizer& opt) {
    outer.validate();
    if (batch.empty()) throw ConfigError("meta step needs a nonempty batch");

    Graph g;
    std::vector<NodeRef> theta_nodes = param_nodes(g, theta);
    std::vector<NodeRef> alpha_nodes;
    if (alpha != nullptr) {
        alpha_nodes = inner.learn_alpha
                          ? param_nodes(g, *alpha)
                          : [&] {
                                std::vector<NodeRef> nodes;
                                for (std::size_t k = 0; k < alpha->layout.size(); ++k) {
                                    nodes.push_back(g.constant(alpha->entry_tensor(k)));
                                }
                                return nodes;
                            }();
    }

    const std::size_t n_terms = outer.pairing == Pairing::Cross
                                    ? batch.size() * batch.size()
                                    : batch.size();
    const bool with_penalty = outer.lambda_pen > 0.0 && n_terms > 1;

    OuterObjective obj = outer_objective(g, theta_nodes, batch, inner, outer.pairing,
                                         with_penalty, alpha_nodes);

    NodeRef total = obj.loss;
    NodeRef penalty_node{};
    if (with_penalty) {
        std::vector<std::vector<NodeRef>> pen_grads = obj.per_task_grads;
        if (outer.variance_grad == VarianceGrad::StopGrad) {
            for (auto& gv : pen_grads) {
                for (NodeRef& n : gv) n = g.stop_grad(n);
            }
        }
        penalty_node = grad_variance_penalty(g, pen_grads);
        total = g.add(total, g.scalar_mul(outer.lambda_pen, penalty_node));
    }

    std::vector<NodeRef> wrt = theta_nodes;
    if (inner.learn_alpha && alpha != nullptr) {
        wrt.insert(wrt.end(), alpha_nodes.begin(), alpha_nodes.end());
    }
    std::vector<NodeRef> grads = g.grad(total, wrt);

    std::vector<double> flat_grad;
    flat_grad.reserve(theta.size() + (inner.learn_alpha && alpha ? alpha->size() : 0));
    flatten_grads(g, std::span<const NodeRef>(grads).first(theta_nodes.size()), theta.layout,
                  flat_grad);

    StepResult result;
    result.theta = theta;
    if (alpha != nullptr) result.alpha = *alpha;
    for (NodeRef term : obj.term_losses) {
        result.term_losses.push_back(g.eval(term).scalar_value());
        result.outer_loss += result.term_losses.back();
    }
    if (with_penalty) result.penalty = g.eval(penalty_node).scalar_value();

    if (inner.learn_alpha && alpha != nullptr) {
        flatten_grads(g, std::span<const NodeRef>(grads).subspan(theta_nodes.size()),
                      alpha->layout, flat_grad);
        std::vector<double> packed = result.theta.values;
        packed.insert(packed.end(), result.alpha.values.begin(), result.alpha.values.end());
        opt.update(packed, flat_grad);
        std::copy(packed.begin(), packed.begin() + static_cast<std::ptrdiff_t>(theta.size()),
                  result.theta.values.begin());
        std::copy(packed.begin() + static_cast<std::ptrdiff_t>(theta.size()), packed.end(),
                  result.alpha.values.begin());
        for (double a : result.alpha.values) {
            if (a <= 0.0) {
                result.alpha_nonpositive = true;
                break;
            }
        }
    } else {
        opt.update(result.theta.values, flat_grad);
    }
    return result;
}

}  // namespace detail

// Classic second-order outer update: theta <- opt(theta, d/dtheta sum_i
// query loss of the adapted model). lambda_pen is forced to zero.
inline StepResult maml_step(const ParamVector& theta, std::span<const TaskObjective> batch,
                            const InnerConfig& inner, const OuterConfig& outer,
                            MetaOptimizer& opt) {
    OuterConfig cfg = outer;
    cfg.lambda_pen = 0.0;
    return detail::meta_step(theta, nullptr, batch, inner, cfg, opt);
}

// Variance-penalized outer update: the objective gains
// lambda_pen * trace(Var over tasks of d(term)/d(theta)). With lambda_pen
// zero or a single task term this reduces exactly to maml_step.
inline StepResult iml_step(const ParamVector& theta, std::span<const TaskObjective> batch,
                           const InnerConfig& inner, const OuterConfig& outer,
                           MetaOptimizer& opt) {
    return detail::meta_step(theta, nullptr, batch, inner, outer, opt);
}

// Meta-SGD: the per-parameter inner rate alpha is itself an outer
// parameter, updated jointly with theta on the same objective.
inline StepResult meta_sgd_update(const ParamVector& theta, const ParamVector& alpha,
                                  std::span<const TaskObjective> batch, const InnerConfig& inner,
                                  const OuterConfig& outer, MetaOptimizer& opt) {
    if (!inner.learn_alpha) {
        throw ConfigError("meta_sgd_update requires learn_alpha");
    }
    if (alpha.size() != theta.size()) {
        throw ShapeError("alpha vector must match parameter dimension");
    }
    return detail::meta_step(theta, &alpha, batch, inner, outer, opt);
}

// Per-parameter inner rates initialized to a constant, with theta's layout.
inline ParamVector make_alpha(const ParamVector& theta, double value) {
    ParamVector a = theta;
    std::fill(a.values.begin(), a.values.end(), value);
    return a;
}

// -- evaluation-time helpers ---------------------------------------------------

// Numeric inner adaptation for evaluation: same values as the
// differentiable path, but no outer graph is kept.
inline ParamVector adapt_values(const MlpSpec& spec, const ParamVector& theta, const Task& task,
                                const InnerConfig& cfg, const ParamVector* alpha = nullptr) {
    Graph g;
    std::vector<NodeRef> theta_nodes = param_nodes(g, theta);
    std::vector<NodeRef> alpha_nodes;
    if (alpha != nullptr) {
        for (std::size_t k = 0; k < alpha->layout.size(); ++k) {
            alpha_nodes.push_back(g.constant(alpha->entry_tensor(k)));
        }
    }
    InnerConfig eval_cfg = cfg;
    eval_cfg.first_order = true;  // identical values, smaller graph
    AdaptResult res = adapt(g, spec, theta_nodes, task, eval_cfg, alpha_nodes);
    std::vector<Tensor> entries;
    entries.reserve(res.adapted.size());
    for (NodeRef n : res.adapted) entries.push_back(g.eval(n));
    return flatten(theta.layout, entries);
}

// Query-set metric of a parameter vector: accuracy for classification
// (argmax, first index wins ties), MSE for regression.
inline double query_metric(const MlpSpec& spec, const ParamVector& params, const Task& task) {
    Graph g;
    std::vector<NodeRef> nodes = param_nodes(g, params);
    NodeRef out = mlp_forward(g, spec, nodes, g.constant(task.query_x));
    const Tensor& o = g.eval(out);
    if (task.kind == TaskKind::Regression) {
        double acc = 0.0;
        for (std::size_t i = 0; i < o.numel(); ++i) {
            const double d = o[i] - task.query_y[i];
            acc += d * d;
        }
        return acc / static_cast<double>(o.numel());
    }
    std::size_t hits = 0;
    for (std::size_t r = 0; r < o.rows(); ++r) {
        std::size_t arg = 0;
        for (std::size_t c = 1; c < o.cols(); ++c) {
            if (o.at(r, c) > o.at(r, arg)) arg = c;
        }
        hits += arg == static_cast<std::size_t>(task.query_y[r]) ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(o.rows());
}

}  // namespace iml
