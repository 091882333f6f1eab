#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "iml/errors.hpp"
#include "iml/tensor.hpp"

namespace iml {

// Operation tags. The first block is the public surface reachable through
// apply(); the tags after StopGrad exist for gradient construction.
enum class Op : std::uint8_t {
    Leaf,
    Add,
    Sub,
    Mul,
    ScalarMul,
    MatMul,
    Tanh,
    Relu,
    Square,
    Sum,
    Mean,
    Mse,
    SoftmaxXent,
    Softmax,
    StopGrad,
    Transpose,
    Reshape,
    Step,
};

inline const char* op_name(Op op) {
    switch (op) {
        case Op::Leaf: return "leaf";
        case Op::Add: return "add";
        case Op::Sub: return "sub";
        case Op::Mul: return "mul";
        case Op::ScalarMul: return "scalar-mul";
        case Op::MatMul: return "matmul";
        case Op::Tanh: return "tanh";
        case Op::Relu: return "relu";
        case Op::Square: return "square";
        case Op::Sum: return "sum";
        case Op::Mean: return "mean";
        case Op::Mse: return "mse";
        case Op::SoftmaxXent: return "softmax-xent";
        case Op::Softmax: return "softmax";
        case Op::StopGrad: return "stop-grad";
        case Op::Transpose: return "transpose";
        case Op::Reshape: return "reshape";
        case Op::Step: return "step";
    }
    return "unknown";
}

// Handle into a Graph's node arena.
struct NodeRef {
    std::uint32_t id = 0;
    friend bool operator==(NodeRef a, NodeRef b) { return a.id == b.id; }
};

struct Node {
    Op op = Op::Leaf;
    bool variable = false;  // leaf designated as a differentiation variable
    double coeff = 0.0;     // ScalarMul coefficient
    Shape shape;
    std::vector<std::uint32_t> parents;
};

// Append-only computation graph. Leaves are immutable once inserted, so
// forward values are cached per node for the lifetime of the graph.
// Gradients are constructed as new nodes of the same graph, which is what
// makes repeated differentiation (grad of grad) possible.
class Graph {
public:
    // -- construction ------------------------------------------------------

    NodeRef leaf(Tensor value) {
        if (!value.all_finite()) {
            throw NonFiniteInput("leaf value contains NaN or Inf");
        }
        return push_leaf(std::move(value), /*variable=*/true);
    }

    NodeRef constant(Tensor value) {
        if (!value.all_finite()) {
            throw NonFiniteInput("constant value contains NaN or Inf");
        }
        return push_leaf(std::move(value), /*variable=*/false);
    }

    NodeRef constant_scalar(double v) { return constant(Tensor::scalar(v)); }

    NodeRef add(NodeRef a, NodeRef b) { return push_broadcast(Op::Add, a, b); }
    NodeRef sub(NodeRef a, NodeRef b) { return push_broadcast(Op::Sub, a, b); }
    NodeRef mul(NodeRef a, NodeRef b) { return push_broadcast(Op::Mul, a, b); }

    NodeRef scalar_mul(double c, NodeRef a) {
        NodeRef r = push(Op::ScalarMul, shape_of(a), {a.id});
        nodes_[r.id].coeff = c;
        return r;
    }

    NodeRef matmul(NodeRef a, NodeRef b) {
        const Shape& sa = shape_of(a);
        const Shape& sb = shape_of(b);
        if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) {
            throw ShapeError(std::string("matmul shapes do not conform: ") +
                             shape_str(sa) + " x " + shape_str(sb));
        }
        return push(Op::MatMul, Shape{sa[0], sb[1]}, {a.id, b.id});
    }

    NodeRef transpose(NodeRef a) {
        const Shape& s = shape_of(a);
        if (s.size() != 2) {
            throw ShapeError("transpose requires rank 2, got " + shape_str(s));
        }
        return push(Op::Transpose, Shape{s[1], s[0]}, {a.id});
    }

    NodeRef reshape(NodeRef a, Shape shape) {
        if (shape_numel(shape) != shape_numel(shape_of(a))) {
            throw ShapeError("reshape " + shape_str(shape_of(a)) + " -> " +
                             shape_str(shape) + " changes element count");
        }
        return push(Op::Reshape, std::move(shape), {a.id});
    }

    NodeRef tanh(NodeRef a) { return push(Op::Tanh, shape_of(a), {a.id}); }
    NodeRef relu(NodeRef a) { return push(Op::Relu, shape_of(a), {a.id}); }
    NodeRef step(NodeRef a) { return push(Op::Step, shape_of(a), {a.id}); }
    NodeRef square(NodeRef a) { return push(Op::Square, shape_of(a), {a.id}); }
    NodeRef stop_grad(NodeRef a) { return push(Op::StopGrad, shape_of(a), {a.id}); }

    NodeRef sum(NodeRef a) { return push(Op::Sum, Shape{}, {a.id}); }
    NodeRef mean(NodeRef a) { return push(Op::Mean, Shape{}, {a.id}); }

    NodeRef softmax(NodeRef a) {
        const Shape& s = shape_of(a);
        if (s.size() < 1 || s.size() > 2 || s.back() == 0) {
            throw ShapeError("softmax requires rank 1 or 2 with nonempty rows, got " +
                             shape_str(s));
        }
        return push(Op::Softmax, s, {a.id});
    }

    // Mean row-wise cross entropy of softmax(logits) against integer labels.
    // logits: [n, C] with labels [n], or [C] with a scalar label.
    NodeRef softmax_xent(NodeRef logits, NodeRef labels) {
        const Shape& sl = shape_of(logits);
        const std::size_t nlab = shape_of(labels).empty() ? 1 : shape_numel(shape_of(labels));
        if (sl.size() == 1) {
            if (nlab != 1) {
                throw ShapeError("softmax-xent rank-1 logits take one label, got " +
                                 std::to_string(nlab));
            }
        } else if (sl.size() == 2) {
            if (nlab != sl[0]) {
                throw ShapeError("softmax-xent label count " + std::to_string(nlab) +
                                 " does not match logit rows " + shape_str(sl));
            }
        } else {
            throw ShapeError("softmax-xent logits must be rank 1 or 2, got " + shape_str(sl));
        }
        if (sl.back() == 0) {
            throw ShapeError("softmax-xent over zero classes");
        }
        return push(Op::SoftmaxXent, Shape{}, {logits.id, labels.id});
    }

    NodeRef mse(NodeRef pred, NodeRef target) {
        if (shape_of(pred) != shape_of(target)) {
            throw ShapeError("mse shapes differ: " + shape_str(shape_of(pred)) + " vs " +
                             shape_str(shape_of(target)));
        }
        if (shape_numel(shape_of(pred)) == 0) {
            throw ShapeError("mse over an empty tensor");
        }
        return push(Op::Mse, Shape{}, {pred.id, target.id});
    }

    // Dynamic dispatcher over the public operation tags.
    NodeRef apply(Op op, std::span<const NodeRef> operands, double coeff = 0.0) {
        switch (op) {
            case Op::Add: need(operands, 2, op); return add(operands[0], operands[1]);
            case Op::Sub: need(operands, 2, op); return sub(operands[0], operands[1]);
            case Op::Mul: need(operands, 2, op); return mul(operands[0], operands[1]);
            case Op::ScalarMul: need(operands, 1, op); return scalar_mul(coeff, operands[0]);
            case Op::MatMul: need(operands, 2, op); return matmul(operands[0], operands[1]);
            case Op::Tanh: need(operands, 1, op); return tanh(operands[0]);
            case Op::Relu: need(operands, 1, op); return relu(operands[0]);
            case Op::Square: need(operands, 1, op); return square(operands[0]);
            case Op::Sum: need(operands, 1, op); return sum(operands[0]);
            case Op::Mean: need(operands, 1, op); return mean(operands[0]);
            case Op::Mse: need(operands, 2, op); return mse(operands[0], operands[1]);
            case Op::SoftmaxXent:
                need(operands, 2, op);
                return softmax_xent(operands[0], operands[1]);
            case Op::Softmax: need(operands, 1, op); return softmax(operands[0]);
            case Op::StopGrad: need(operands, 1, op); return stop_grad(operands[0]);
            case Op::Transpose: need(operands, 1, op); return transpose(operands[0]);
            default:
                throw UnsupportedOp("apply: unsupported operation tag " +
                                    std::to_string(static_cast<int>(op)));
        }
    }

    // -- inspection --------------------------------------------------------

    std::size_t size() const { return nodes_.size(); }

    const Node& node(NodeRef r) const {
        check_ref(r);
        return nodes_[r.id];
    }

    const Shape& shape_of(NodeRef r) const {
        check_ref(r);
        return nodes_[r.id].shape;
    }

    // -- evaluation --------------------------------------------------------

    // Forward value of one node. Intermediates computed on the way are
    // cached; leaves are immutable so the cache never goes stale.
    const Tensor& eval(NodeRef target) {
        check_ref(target);
        if (!computed_[target.id]) {
            eval_upto(target.id);
        }
        return values_[target.id];
    }

    void eval_many(std::span<const NodeRef> targets) {
        for (NodeRef t : targets) eval(t);
    }

    // -- differentiation ---------------------------------------------------

    // Builds nodes for d(output)/d(wrt_k). output must be scalar-shaped.
    // Entries of wrt that output does not depend on yield zero-constant
    // nodes. The returned nodes can be differentiated again.
    std::vector<NodeRef> grad(NodeRef output, std::span<const NodeRef> wrt) {
        check_ref(output);
        if (shape_numel(shape_of(output)) != 1) {
            throw ShapeError("grad output must be scalar-shaped, got " +
                             shape_str(shape_of(output)));
        }
        for (NodeRef w : wrt) check_ref(w);

        const std::uint32_t frontier = static_cast<std::uint32_t>(nodes_.size());
        std::vector<std::uint8_t> reach(frontier, 0);
        mark_ancestors(output.id, reach);

        // A node's adjoint is only worth building if some wrt node lies in
        // its ancestry; everything else (inputs, labels, baked constants)
        // is pruned from the backward construction.
        std::vector<std::uint8_t> useful(frontier, 0);
        for (NodeRef w : wrt) useful[w.id] = 1;
        for (std::uint32_t id = 0; id < frontier; ++id) {
            if (useful[id]) continue;
            for (std::uint32_t p : nodes_[id].parents) {
                if (useful[p]) {
                    useful[id] = 1;
                    break;
                }
            }
        }

        constexpr std::uint32_t kNone = 0xffffffffu;
        std::vector<std::uint32_t> adjoint(frontier, kNone);
        adjoint[output.id] = constant(Tensor::ones(shape_of(output))).id;

        for (std::uint32_t id = output.id + 1; id-- > 0;) {
            if (!reach[id] || adjoint[id] == kNone) continue;
            accumulate_parents(id, NodeRef{adjoint[id]}, adjoint, useful);
        }

        std::vector<NodeRef> out;
        out.reserve(wrt.size());
        for (NodeRef w : wrt) {
            if (w.id < frontier && adjoint[w.id] != kNone) {
                out.push_back(NodeRef{adjoint[w.id]});
            } else {
                out.push_back(constant(Tensor::zeros(shape_of(w))));
            }
        }
        return out;
    }

    std::vector<NodeRef> grad(NodeRef output, std::initializer_list<NodeRef> wrt) {
        std::vector<NodeRef> v(wrt);
        return grad(output, std::span<const NodeRef>(v));
    }

private:
    // Deques keep node/value references stable while the arena grows.
    std::deque<Node> nodes_;
    std::deque<Tensor> values_;
    std::vector<std::uint8_t> computed_;

    void check_ref(NodeRef r) const {
        if (r.id >= nodes_.size()) {
            throw Error("node handle " + std::to_string(r.id) + " does not belong to this graph");
        }
    }

    static void need(std::span<const NodeRef> ops, std::size_t n, Op op) {
        if (ops.size() != n) {
            throw UnsupportedOp(std::string(op_name(op)) + " takes " + std::to_string(n) +
                                " operands, got " + std::to_string(ops.size()));
        }
    }

    NodeRef push_leaf(Tensor value, bool variable) {
        Node n;
        n.op = Op::Leaf;
        n.variable = variable;
        n.shape = value.shape();
        nodes_.push_back(std::move(n));
        values_.push_back(std::move(value));
        computed_.push_back(1);
        return NodeRef{static_cast<std::uint32_t>(nodes_.size() - 1)};
    }

    NodeRef push(Op op, Shape shape, std::vector<std::uint32_t> parents) {
        for (std::uint32_t p : parents) check_ref(NodeRef{p});
        Node n;
        n.op = op;
        n.shape = std::move(shape);
        n.parents = std::move(parents);
        nodes_.push_back(std::move(n));
        values_.emplace_back();
        computed_.push_back(0);
        return NodeRef{static_cast<std::uint32_t>(nodes_.size() - 1)};
    }

    NodeRef push_broadcast(Op op, NodeRef a, NodeRef b) {
        const Shape& sa = shape_of(a);
        const Shape& sb = shape_of(b);
        Shape out;
        if (sa == sb) {
            out = sa;
        } else if (shape_numel(sa) == 1) {
            out = sb;
        } else if (shape_numel(sb) == 1) {
            out = sa;
        } else {
            throw ShapeError(std::string(op_name(op)) + " shapes do not conform: " +
                             shape_str(sa) + " vs " + shape_str(sb));
        }
        return push(op, std::move(out), {a.id, b.id});
    }

    void mark_ancestors(std::uint32_t start, std::vector<std::uint8_t>& reach) const {
        std::vector<std::uint32_t> stack{start};
        reach[start] = 1;
        while (!stack.empty()) {
            std::uint32_t id = stack.back();
            stack.pop_back();
            for (std::uint32_t p : nodes_[id].parents) {
                if (!reach[p]) {
                    reach[p] = 1;
                    stack.push_back(p);
                }
            }
        }
    }

    // -- forward kernels ---------------------------------------------------

    void eval_upto(std::uint32_t target) {
        std::vector<std::uint8_t> needed(target + 1, 0);
        std::vector<std::uint32_t> stack{target};
        needed[target] = 1;
        while (!stack.empty()) {
            std::uint32_t id = stack.back();
            stack.pop_back();
            if (computed_[id]) continue;
            for (std::uint32_t p : nodes_[id].parents) {
                if (!needed[p] && !computed_[p]) {
                    needed[p] = 1;
                    stack.push_back(p);
                }
            }
        }
        for (std::uint32_t id = 0; id <= target; ++id) {
            if (!needed[id] || computed_[id]) continue;
            values_[id] = compute(id);
            if (!values_[id].all_finite()) {
                throw NonFiniteValue("node " + std::to_string(id) + " (" +
                                     op_name(nodes_[id].op) + ") produced NaN or Inf");
            }
            computed_[id] = 1;
        }
    }

    const Tensor& pval(std::uint32_t id, std::size_t k) const {
        return values_[nodes_[id].parents[k]];
    }

    Tensor compute(std::uint32_t id) const {
        const Node& n = nodes_[id];
        switch (n.op) {
            case Op::Leaf:
                return values_[id];  // unreachable; leaves are computed at insertion
            case Op::Add:
                return broadcast_binary(pval(id, 0), pval(id, 1), n.shape,
                                        [](double x, double y) { return x + y; });
            case Op::Sub:
                return broadcast_binary(pval(id, 0), pval(id, 1), n.shape,
                                        [](double x, double y) { return x - y; });
            case Op::Mul:
                return broadcast_binary(pval(id, 0), pval(id, 1), n.shape,
                                        [](double x, double y) { return x * y; });
            case Op::ScalarMul: {
                Tensor out = pval(id, 0);
                for (double& v : out.values()) v *= n.coeff;
                return Tensor(n.shape, std::move(out.values()));
            }
            case Op::MatMul:
                return matmul_value(pval(id, 0), pval(id, 1));
            case Op::Transpose: {
                const Tensor& a = pval(id, 0);
                Tensor out(n.shape);
                const std::size_t r = a.shape()[0], c = a.shape()[1];
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j) out.at(j, i) = a.at(i, j);
                return out;
            }
            case Op::Reshape: {
                Tensor a = pval(id, 0);
                return Tensor(n.shape, std::move(a.values()));
            }
            case Op::Tanh:
                return unary(pval(id, 0), [](double x) { return std::tanh(x); });
            case Op::Relu:
                return unary(pval(id, 0), [](double x) { return x > 0.0 ? x : 0.0; });
            case Op::Step:
                return unary(pval(id, 0), [](double x) { return x > 0.0 ? 1.0 : 0.0; });
            case Op::Square:
                return unary(pval(id, 0), [](double x) { return x * x; });
            case Op::StopGrad:
                return pval(id, 0);
            case Op::Sum: {
                double acc = 0.0;
                for (double v : pval(id, 0).values()) acc += v;
                return Tensor::scalar(acc);
            }
            case Op::Mean: {
                const Tensor& a = pval(id, 0);
                double acc = 0.0;
                for (double v : a.values()) acc += v;
                return Tensor::scalar(acc / static_cast<double>(a.numel()));
            }
            case Op::Softmax:
                return softmax_value(pval(id, 0));
            case Op::SoftmaxXent:
                return xent_value(pval(id, 0), pval(id, 1));
            case Op::Mse: {
                const Tensor& p = pval(id, 0);
                const Tensor& t = pval(id, 1);
                double acc = 0.0;
                for (std::size_t i = 0; i < p.numel(); ++i) {
                    const double d = p[i] - t[i];
                    acc += d * d;
                }
                return Tensor::scalar(acc / static_cast<double>(p.numel()));
            }
        }
        throw UnsupportedOp("compute: unknown tag");
    }

    template <class F>
    static Tensor unary(const Tensor& a, F f) {
        Tensor out(a.shape());
        for (std::size_t i = 0; i < a.numel(); ++i) out[i] = f(a[i]);
        return out;
    }

    template <class F>
    static Tensor broadcast_binary(const Tensor& a, const Tensor& b, const Shape& shape, F f) {
        Tensor out(shape);
        if (a.same_shape(b)) {
            for (std::size_t i = 0; i < out.numel(); ++i) out[i] = f(a[i], b[i]);
        } else if (a.numel() == 1) {
            const double s = a[0];
            for (std::size_t i = 0; i < out.numel(); ++i) out[i] = f(s, b[i]);
        } else {
            const double s = b[0];
            for (std::size_t i = 0; i < out.numel(); ++i) out[i] = f(a[i], s);
        }
        return out;
    }

    static Tensor matmul_value(const Tensor& a, const Tensor& b) {
        const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
        Tensor out(Shape{m, n});
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t kk = 0; kk < k; ++kk) {
                const double av = a.at(i, kk);
                if (av == 0.0) continue;
                const double* brow = b.data() + kk * n;
                double* orow = out.data() + i * n;
                for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
            }
        }
        return out;
    }

    static Tensor softmax_value(const Tensor& z) {
        const std::size_t rows = z.rank() == 2 ? z.shape()[0] : 1;
        const std::size_t cols = z.rank() == 2 ? z.shape()[1] : z.numel();
        Tensor out(z.shape());
        for (std::size_t i = 0; i < rows; ++i) {
            const double* zr = z.data() + i * cols;
            double* sr = out.data() + i * cols;
            double zmax = zr[0];
            for (std::size_t j = 1; j < cols; ++j) zmax = std::max(zmax, zr[j]);
            double denom = 0.0;
            for (std::size_t j = 0; j < cols; ++j) {
                sr[j] = std::exp(zr[j] - zmax);
                denom += sr[j];
            }
            for (std::size_t j = 0; j < cols; ++j) sr[j] /= denom;
        }
        return out;
    }

    static std::size_t label_index(const Tensor& labels, std::size_t row, std::size_t n_classes) {
        const double raw = labels[row];
        const double rounded = std::nearbyint(raw);
        if (raw != rounded || rounded < 0.0 || rounded >= static_cast<double>(n_classes)) {
            throw ShapeError("label " + std::to_string(raw) + " at row " + std::to_string(row) +
                             " outside [0, " + std::to_string(n_classes) + ")");
        }
        return static_cast<std::size_t>(rounded);
    }

    static Tensor xent_value(const Tensor& z, const Tensor& labels) {
        const std::size_t rows = z.rank() == 2 ? z.shape()[0] : 1;
        const std::size_t cols = z.rank() == 2 ? z.shape()[1] : z.numel();
        double acc = 0.0;
        for (std::size_t i = 0; i < rows; ++i) {
            const double* zr = z.data() + i * cols;
            double zmax = zr[0];
            for (std::size_t j = 1; j < cols; ++j) zmax = std::max(zmax, zr[j]);
            double denom = 0.0;
            for (std::size_t j = 0; j < cols; ++j) denom += std::exp(zr[j] - zmax);
            acc += zmax + std::log(denom) - zr[label_index(labels, i, cols)];
        }
        return Tensor::scalar(acc / static_cast<double>(rows));
    }

    // -- backward construction ---------------------------------------------

    struct AdjointSink {
        std::vector<std::uint32_t>& adjoint;
        const std::vector<std::uint8_t>& useful;
    };

    void add_contribution(std::uint32_t parent, NodeRef contrib, AdjointSink sink) {
        constexpr std::uint32_t kNone = 0xffffffffu;
        if (!sink.useful[parent]) return;
        NodeRef shaped = conform(contrib, nodes_[parent].shape);
        if (sink.adjoint[parent] == kNone) {
            sink.adjoint[parent] = shaped.id;
        } else {
            sink.adjoint[parent] = add(NodeRef{sink.adjoint[parent]}, shaped).id;
        }
    }

    // Reshape or reduce a raw vjp contribution to the parent's exact shape,
    // folding broadcast back with a sum.
    NodeRef conform(NodeRef g, const Shape& target) {
        const Shape& sg = shape_of(g);
        if (sg == target) return g;
        if (shape_numel(sg) == shape_numel(target)) return reshape(g, target);
        if (shape_numel(target) == 1) return reshape(sum(g), target);
        throw ShapeError("cannot conform gradient " + shape_str(sg) + " to " +
                         shape_str(target));
    }

    void accumulate_parents(std::uint32_t id, NodeRef g, std::vector<std::uint32_t>& adjoint,
                            const std::vector<std::uint8_t>& useful) {
        const Node& n = nodes_[id];
        const NodeRef self{id};
        const AdjointSink sink{adjoint, useful};
        const auto want = [&](std::size_t k) { return useful[n.parents[k]] != 0; };
        switch (n.op) {
            case Op::Leaf:
            case Op::StopGrad:
            case Op::Step:
                return;  // leaves end the walk; stop-grad and step block flow
            case Op::Add:
                if (want(0)) add_contribution(n.parents[0], g, sink);
                if (want(1)) add_contribution(n.parents[1], g, sink);
                return;
            case Op::Sub:
                if (want(0)) add_contribution(n.parents[0], g, sink);
                if (want(1)) add_contribution(n.parents[1], scalar_mul(-1.0, g), sink);
                return;
            case Op::Mul:
                if (want(0)) add_contribution(n.parents[0], mul(g, NodeRef{n.parents[1]}), sink);
                if (want(1)) add_contribution(n.parents[1], mul(g, NodeRef{n.parents[0]}), sink);
                return;
            case Op::ScalarMul:
                if (want(0)) add_contribution(n.parents[0], scalar_mul(n.coeff, g), sink);
                return;
            case Op::MatMul:
                if (want(0)) {
                    add_contribution(n.parents[0], matmul(g, transpose(NodeRef{n.parents[1]})),
                                     sink);
                }
                if (want(1)) {
                    add_contribution(n.parents[1], matmul(transpose(NodeRef{n.parents[0]}), g),
                                     sink);
                }
                return;
            case Op::Transpose:
                if (want(0)) add_contribution(n.parents[0], transpose(g), sink);
                return;
            case Op::Reshape:
                if (want(0)) {
                    add_contribution(n.parents[0], reshape(g, nodes_[n.parents[0]].shape), sink);
                }
                return;
            case Op::Tanh:
                // d tanh = 1 - tanh^2, expressed through this node's output.
                if (want(0)) {
                    add_contribution(n.parents[0],
                                     mul(g, sub(constant_scalar(1.0), square(self))), sink);
                }
                return;
            case Op::Relu:
                if (want(0)) {
                    add_contribution(n.parents[0], mul(g, step(NodeRef{n.parents[0]})), sink);
                }
                return;
            case Op::Square:
                if (want(0)) {
                    add_contribution(n.parents[0], mul(g, scalar_mul(2.0, NodeRef{n.parents[0]})),
                                     sink);
                }
                return;
            case Op::Sum:
                if (want(0)) {
                    add_contribution(n.parents[0],
                                     mul(g, constant(Tensor::ones(nodes_[n.parents[0]].shape))),
                                     sink);
                }
                return;
            case Op::Mean: {
                if (!want(0)) return;
                const double inv =
                    1.0 / static_cast<double>(shape_numel(nodes_[n.parents[0]].shape));
                add_contribution(
                    n.parents[0],
                    scalar_mul(inv, mul(g, constant(Tensor::ones(nodes_[n.parents[0]].shape)))),
                    sink);
                return;
            }
            case Op::Softmax: {
                // dz = s * (u - rowsum(u * s)) with s this node's output.
                if (!want(0)) return;
                NodeRef us = mul(g, self);
                NodeRef rowterm;
                if (n.shape.size() == 1) {
                    rowterm = sum(us);
                } else {
                    const std::size_t cols = n.shape[1];
                    NodeRef colsum = matmul(us, constant(Tensor::ones(Shape{cols, 1})));
                    rowterm = matmul(colsum, constant(Tensor::ones(Shape{1, cols})));
                }
                add_contribution(n.parents[0], mul(self, sub(g, rowterm)), sink);
                return;
            }
            case Op::SoftmaxXent: {
                // dz = g/n * (softmax(z) - onehot(labels)); labels carry no gradient.
                if (!want(0)) return;
                const NodeRef logits{n.parents[0]};
                const Tensor& lab = eval(NodeRef{n.parents[1]});
                const Shape& sl = shape_of(logits);
                const std::size_t rows = sl.size() == 2 ? sl[0] : 1;
                const std::size_t cols = sl.size() == 2 ? sl[1] : shape_numel(sl);
                Tensor onehot(sl);
                for (std::size_t i = 0; i < rows; ++i) {
                    onehot.values()[i * cols + label_index(lab, i, cols)] = 1.0;
                }
                NodeRef delta = sub(softmax(logits), constant(std::move(onehot)));
                add_contribution(n.parents[0],
                                 mul(scalar_mul(1.0 / static_cast<double>(rows), g), delta),
                                 sink);
                return;
            }
            case Op::Mse: {
                if (!want(0) && !want(1)) return;
                const NodeRef p{n.parents[0]}, t{n.parents[1]};
                const double c = 2.0 / static_cast<double>(shape_numel(shape_of(p)));
                NodeRef dp = mul(g, scalar_mul(c, sub(p, t)));
                if (want(0)) add_contribution(n.parents[0], dp, sink);
                if (want(1)) add_contribution(n.parents[1], scalar_mul(-1.0, dp), sink);
                return;
            }
        }
        throw UnsupportedOp("grad: unknown tag");
    }
};

// A scalar objective expressed over parameter nodes, used by the inner
// loop, the meta steps, and the finite-difference checker.
using LossBuilder = std::function<NodeRef(Graph&, std::span<const NodeRef>)>;

}  // namespace iml
