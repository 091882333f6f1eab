#include <catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "iml/gradcheck.hpp"
#include "iml/graph.hpp"
#include "iml/model.hpp"
#include "iml/rng.hpp"

using namespace iml;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -2.0, double hi = 2.0) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

double eval_scalar(Graph& g, NodeRef n) { return g.eval(n).scalar_value(); }

}  // namespace

TEST_CASE("leaf: identity round trips", "[autodiff]") {
    Graph g;
    NodeRef x = g.leaf(Tensor::vector({3.0}));
    REQUIRE(g.eval(x)[0] == 3.0);

    Tensor eye(Shape{2, 2});
    eye.at(0, 0) = 1.0;
    eye.at(1, 1) = 1.0;
    NodeRef m = g.leaf(eye);
    REQUIRE(g.eval(m).bit_equal(eye));
}

TEST_CASE("leaf: non-finite input rejected", "[autodiff]") {
    Graph g;
    Tensor bad = Tensor::vector({std::nan("")});
    REQUIRE_THROWS_AS(g.leaf(bad), NonFiniteInput);
    REQUIRE_THROWS_AS(g.constant(Tensor::scalar(INFINITY)), NonFiniteInput);
}

TEST_CASE("apply: elementwise and matmul examples", "[autodiff]") {
    Graph g;
    NodeRef a = g.leaf(Tensor::vector({3.0}));
    NodeRef b = g.leaf(Tensor::vector({4.0}));
    std::vector<NodeRef> ops{a, b};
    NodeRef prod = g.apply(Op::Mul, ops);
    REQUIRE(eval_scalar(g, prod) == 12.0);

    NodeRef m1 = g.leaf(Tensor(Shape{2, 2}, {1, 2, 3, 4}));
    NodeRef m2 = g.leaf(Tensor(Shape{2, 1}, {1, 1}));
    const Tensor& mm = g.eval(g.matmul(m1, m2));
    REQUIRE(mm.shape() == Shape{2, 1});
    REQUIRE(mm[0] == 3.0);
    REQUIRE(mm[1] == 7.0);
}

TEST_CASE("apply: uniform softmax cross entropy is log C", "[autodiff]") {
    Graph g;
    NodeRef logits = g.leaf(Tensor::zeros(Shape{5}));
    NodeRef label = g.constant(Tensor::scalar(2.0));
    NodeRef loss = g.softmax_xent(logits, label);
    REQUIRE_THAT(eval_scalar(g, loss),
                 Catch::Matchers::WithinAbs(std::log(5.0), 1e-12));
}

TEST_CASE("apply: shape mismatch reports both shapes", "[autodiff]") {
    Graph g;
    NodeRef a = g.leaf(Tensor::zeros(Shape{2, 3}));
    NodeRef b = g.leaf(Tensor::zeros(Shape{3, 3}));
    try {
        g.add(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        REQUIRE(msg.find("[2,3]") != std::string::npos);
        REQUIRE(msg.find("[3,3]") != std::string::npos);
    }
    REQUIRE_THROWS_AS(g.matmul(a, a), ShapeError);
}

TEST_CASE("apply: unknown tag rejected", "[autodiff]") {
    Graph g;
    NodeRef a = g.leaf(Tensor::scalar(1.0));
    std::vector<NodeRef> ops{a};
    REQUIRE_THROWS_AS(g.apply(static_cast<Op>(200), ops), UnsupportedOp);
    REQUIRE_THROWS_AS(g.apply(Op::Leaf, ops), UnsupportedOp);
    std::vector<NodeRef> two{a, a};
    REQUIRE_THROWS_AS(g.apply(Op::Tanh, two), UnsupportedOp);
}

TEST_CASE("eval: basic forward values", "[autodiff]") {
    Graph g;
    REQUIRE(eval_scalar(g, g.leaf(Tensor::scalar(7.0))) == 7.0);
    REQUIRE(eval_scalar(g, g.square(g.leaf(Tensor::scalar(-2.0)))) == 4.0);
    REQUIRE(eval_scalar(g, g.mean(g.leaf(Tensor::vector({1, 2, 3, 6})))) == 3.0);
}

TEST_CASE("eval: overflow is a checked error naming the node", "[autodiff]") {
    Graph g;
    NodeRef big = g.leaf(Tensor::scalar(1e308));
    NodeRef boom = g.mul(big, big);
    try {
        g.eval(boom);
        FAIL("expected NonFiniteValue");
    } catch (const NonFiniteValue& e) {
        const std::string msg = e.what();
        REQUIRE(msg.find(std::to_string(boom.id)) != std::string::npos);
        REQUIRE(msg.find("mul") != std::string::npos);
    }
}

TEST_CASE("grad: quadratic and second derivative", "[autodiff]") {
    Graph g;
    NodeRef x = g.leaf(Tensor::scalar(3.0));
    NodeRef y = g.square(x);
    std::vector<NodeRef> wrt{x};
    NodeRef dy = g.grad(y, wrt)[0];
    REQUIRE(eval_scalar(g, dy) == 6.0);

    // f(x) = x^3, f'' at 2 is 12.
    Graph g2;
    NodeRef x2 = g2.leaf(Tensor::scalar(2.0));
    NodeRef cube = g2.mul(g2.square(x2), x2);
    std::vector<NodeRef> wrt2{x2};
    NodeRef d1 = g2.grad(cube, wrt2)[0];
    NodeRef d2 = g2.grad(d1, wrt2)[0];
    REQUIRE_THAT(eval_scalar(g2, d2), Catch::Matchers::WithinAbs(12.0, 1e-12));
}

TEST_CASE("grad: unreachable wrt yields a zero node", "[autodiff]") {
    Graph g;
    NodeRef x = g.leaf(Tensor::scalar(1.0));
    NodeRef z = g.leaf(Tensor::vector({1.0, 2.0}));
    NodeRef y = g.square(x);
    std::vector<NodeRef> wrt{z};
    const Tensor& gz = g.eval(g.grad(y, wrt)[0]);
    REQUIRE(gz.shape() == Shape{2});
    REQUIRE(gz[0] == 0.0);
    REQUIRE(gz[1] == 0.0);
}

TEST_CASE("grad: non-scalar output rejected", "[autodiff]") {
    Graph g;
    NodeRef x = g.leaf(Tensor::vector({1.0, 2.0}));
    std::vector<NodeRef> wrt{x};
    REQUIRE_THROWS_AS(g.grad(g.square(x), wrt), ShapeError);
}

TEST_CASE("grad: two-layer tanh network matches finite differences", "[autodiff]") {
    MlpSpec spec{{2, 8, 1}, Activation::Tanh, OutputKind::Regression};
    ParamVector point = init_params(spec, 42);
    Rng rng(7);
    const Tensor x = random_tensor(Shape{4, 2}, rng);
    const Tensor y = random_tensor(Shape{4, 1}, rng);
    LossBuilder f = [&](Graph& g, std::span<const NodeRef> params) {
        return g.mse(mlp_forward(g, spec, params, g.constant(x)), g.constant(y));
    };
    GradCheckReport rep = check_grad(f, point, 1e-5);
    REQUIRE(rep.all_finite);
    REQUIRE(rep.max_rel_err < 1e-4);
}

TEST_CASE("check_grad: quadratic, constant, and mlp cases", "[autodiff]") {
    ParamVector scalar_point;
    scalar_point.layout = {{"x", Shape{}, 0}};
    scalar_point.values = {3.0};

    LossBuilder square_f = [](Graph& g, std::span<const NodeRef> p) { return g.square(p[0]); };
    GradCheckReport rep = check_grad(square_f, scalar_point, 1e-5);
    REQUIRE(rep.max_rel_err < 1e-6);

    LossBuilder const_f = [](Graph& g, std::span<const NodeRef>) {
        return g.constant(Tensor::scalar(4.5));
    };
    GradCheckReport zero_rep = check_grad(const_f, scalar_point, 1e-5);
    REQUIRE(zero_rep.max_rel_err == 0.0);
    REQUIRE(zero_rep.entries[0].analytic == 0.0);
    REQUIRE(zero_rep.entries[0].numeric == 0.0);

    MlpSpec spec{{3, 6, 2}, Activation::Tanh, OutputKind::Regression};
    ParamVector point = init_params(spec, 0);
    Rng rng(0);
    const Tensor x = random_tensor(Shape{5, 3}, rng);
    const Tensor y = random_tensor(Shape{5, 2}, rng);
    LossBuilder mlp_f = [&](Graph& g, std::span<const NodeRef> params) {
        return g.mse(mlp_forward(g, spec, params, g.constant(x)), g.constant(y));
    };
    REQUIRE(check_grad(mlp_f, point, 1e-5).max_rel_err < 1e-4);
}

namespace {

// Builds a scalarized random instance of one op over leaf parameters and
// returns its gradient-check report.
GradCheckReport op_fd_report(Op op, Rng& rng) {
    const std::size_t rows = 2 + rng.below(3);
    const std::size_t cols = 1 + rng.below(3);

    ParamVector point;
    auto add_entry = [&](const char* name, Shape shape, bool away_from_zero) {
        const std::size_t offset = point.values.size();
        point.layout.push_back({name, shape, offset});
        for (std::size_t i = 0; i < shape_numel(shape); ++i) {
            double v = rng.uniform(-2.0, 2.0);
            // Keep relu/step inputs away from the kink where central
            // differences are undefined.
            while (away_from_zero && std::fabs(v) < 5e-3) v = rng.uniform(-2.0, 2.0);
            point.values.push_back(v);
        }
    };

    const bool kink = (op == Op::Relu);
    switch (op) {
        case Op::Add:
        case Op::Sub:
        case Op::Mul:
        case Op::Mse:
            add_entry("a", Shape{rows, cols}, false);
            add_entry("b", Shape{rows, cols}, false);
            break;
        case Op::MatMul:
            add_entry("a", Shape{rows, cols}, false);
            add_entry("b", Shape{cols, rows}, false);
            break;
        case Op::SoftmaxXent:
        case Op::Softmax:
            add_entry("a", Shape{rows, 4}, false);
            break;
        default:
            add_entry("a", Shape{rows, cols}, kink);
            break;
    }

    LossBuilder f = [&, op](Graph& g, std::span<const NodeRef> p) {
        switch (op) {
            case Op::Add: return g.mean(g.square(g.add(p[0], p[1])));
            case Op::Sub: return g.mean(g.square(g.sub(p[0], p[1])));
            case Op::Mul: return g.mean(g.square(g.mul(p[0], p[1])));
            case Op::ScalarMul: return g.mean(g.square(g.scalar_mul(-1.7, p[0])));
            case Op::MatMul: return g.mean(g.square(g.matmul(p[0], p[1])));
            case Op::Tanh: return g.mean(g.square(g.tanh(p[0])));
            case Op::Relu: return g.mean(g.square(g.relu(p[0])));
            case Op::Square: return g.mean(g.square(p[0]));
            case Op::Sum: return g.square(g.sum(p[0]));
            case Op::Mean: return g.square(g.mean(p[0]));
            case Op::Mse: return g.mse(p[0], p[1]);
            case Op::Softmax: return g.mean(g.square(g.softmax(p[0])));
            case Op::SoftmaxXent: {
                const std::size_t n = g.shape_of(p[0])[0];
                Tensor labels(Shape{n});
                for (std::size_t i = 0; i < n; ++i) {
                    labels[i] = static_cast<double>(i % 4);
                }
                return g.softmax_xent(p[0], g.constant(labels));
            }
            default: return g.mean(p[0]);
        }
    };
    return check_grad(f, point, 1e-5);
}

}  // namespace

TEST_CASE("property: every op agrees with central differences", "[autodiff][property]") {
    const Op ops[] = {Op::Add,  Op::Sub,  Op::Mul,  Op::ScalarMul,   Op::MatMul,
                      Op::Tanh, Op::Relu, Op::Square, Op::Sum,       Op::Mean,
                      Op::Mse,  Op::Softmax, Op::SoftmaxXent};
    Rng rng(2024);
    for (int trial = 0; trial < 100; ++trial) {
        const Op op = ops[trial % std::size(ops)];
        GradCheckReport rep = op_fd_report(op, rng);
        INFO("op " << op_name(op) << " trial " << trial);
        REQUIRE(rep.all_finite);
        REQUIRE(rep.max_rel_err < 1e-4);
    }
}

TEST_CASE("property: grad is linear", "[autodiff][property]") {
    Rng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        const double ca = rng.uniform(-2.0, 2.0);
        const double cb = rng.uniform(-2.0, 2.0);
        Graph g;
        NodeRef x = g.leaf(random_tensor(Shape{3, 2}, rng));
        NodeRef f = g.mean(g.square(x));
        NodeRef h = g.mean(g.mul(x, g.tanh(x)));
        NodeRef combo = g.add(g.scalar_mul(ca, f), g.scalar_mul(cb, h));
        std::vector<NodeRef> wrt{x};
        const Tensor& g_combo = g.eval(g.grad(combo, wrt)[0]);
        const Tensor& gf = g.eval(g.grad(f, wrt)[0]);
        const Tensor& gh = g.eval(g.grad(h, wrt)[0]);
        for (std::size_t i = 0; i < g_combo.numel(); ++i) {
            REQUIRE_THAT(g_combo[i],
                         Catch::Matchers::WithinAbs(ca * gf[i] + cb * gh[i], 1e-10));
        }
    }
}

TEST_CASE("property: gradient-norm objective differentiates correctly",
          "[autodiff][property]") {
    // f(theta) = ||grad h(theta)||^2 exercises backward-through-backward.
    Rng rng(11);
    for (int trial = 0; trial < 5; ++trial) {
        MlpSpec spec{{2, 4, 1}, Activation::Tanh, OutputKind::Regression};
        ParamVector point = init_params(spec, 100 + trial);
        const Tensor x = random_tensor(Shape{3, 2}, rng);
        const Tensor y = random_tensor(Shape{3, 1}, rng);
        LossBuilder f = [&](Graph& g, std::span<const NodeRef> params) {
            std::vector<NodeRef> wrt(params.begin(), params.end());
            NodeRef h = g.mse(mlp_forward(g, spec, params, g.constant(x)), g.constant(y));
            std::vector<NodeRef> gs = g.grad(h, wrt);
            NodeRef acc = g.sum(g.square(gs[0]));
            for (std::size_t k = 1; k < gs.size(); ++k) {
                acc = g.add(acc, g.sum(g.square(gs[k])));
            }
            return acc;
        };
        GradCheckReport rep = check_grad(f, point, 1e-5);
        INFO("trial " << trial << " max rel err " << rep.max_rel_err);
        REQUIRE(rep.all_finite);
        REQUIRE(rep.max_rel_err < 1e-3);
    }
}

TEST_CASE("property: evaluation is bit-deterministic", "[autodiff][property]") {
    auto build_and_eval = [] {
        Rng rng(99);
        Graph g;
        NodeRef x = g.leaf(random_tensor(Shape{4, 3}, rng));
        NodeRef w = g.leaf(random_tensor(Shape{3, 2}, rng));
        NodeRef out = g.mean(g.tanh(g.matmul(x, w)));
        std::vector<NodeRef> wrt{w};
        NodeRef gw = g.grad(out, wrt)[0];
        g.eval(gw);
        return std::pair<Tensor, Tensor>(g.eval(out), g.eval(gw));
    };
    auto [o1, g1] = build_and_eval();
    auto [o2, g2] = build_and_eval();
    REQUIRE(o1.bit_equal(o2));
    REQUIRE(g1.bit_equal(g2));
}
