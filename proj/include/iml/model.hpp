#pragma once

#include <cmath>
#include <cstddef>
#include <cstring>
#include <span>
#include <string>
#include <vector>

#include "iml/errors.hpp"
#include "iml/graph.hpp"
#include "iml/rng.hpp"
#include "iml/tensor.hpp"

namespace iml {

enum class Activation { Tanh, Relu };
enum class OutputKind { Regression, NWayLogits };

// Fully-connected predictor description. layer_widths runs
// input -> hidden... -> output.
struct MlpSpec {
    std::vector<std::size_t> layer_widths;
    Activation activation = Activation::Tanh;
    OutputKind output_kind = OutputKind::Regression;

    void validate() const {
        if (layer_widths.size() < 2) {
            throw ConfigError("mlp spec needs at least input and output widths");
        }
        for (std::size_t w : layer_widths) {
            if (w == 0) throw ConfigError("mlp spec widths must be positive");
        }
    }

    std::size_t input_width() const { return layer_widths.front(); }
    std::size_t output_width() const { return layer_widths.back(); }
    std::size_t n_layers() const { return layer_widths.size() - 1; }
};

struct LayoutEntry {
    std::string name;
    Shape shape;
    std::size_t offset = 0;

    std::size_t numel() const { return shape_numel(shape); }
};

// Flat ordered parameter storage plus the structure needed to view it as
// per-layer tensors.
struct ParamVector {
    std::vector<double> values;
    std::vector<LayoutEntry> layout;

    std::size_t size() const { return values.size(); }

    void validate() const {
        std::size_t expect = 0;
        for (const LayoutEntry& e : layout) {
            if (e.offset != expect) {
                throw LayoutError("layout entry " + e.name + " at offset " +
                                  std::to_string(e.offset) + ", expected " +
                                  std::to_string(expect));
            }
            expect += e.numel();
        }
        if (expect != values.size()) {
            throw LayoutError("layout covers " + std::to_string(expect) + " values, vector has " +
                              std::to_string(values.size()));
        }
    }

    Tensor entry_tensor(std::size_t k) const {
        const LayoutEntry& e = layout[k];
        return Tensor(e.shape, std::vector<double>(values.begin() + e.offset,
                                                   values.begin() + e.offset + e.numel()));
    }

    bool bit_equal(const ParamVector& o) const {
        if (values.size() != o.values.size()) return false;
        for (std::size_t i = 0; i < values.size(); ++i) {
            if (std::memcmp(&values[i], &o.values[i], sizeof(double)) != 0) return false;
        }
        return true;
    }
};

// Structured view of a ParamVector, one tensor per layout entry.
inline std::vector<Tensor> unflatten(const ParamVector& p) {
    p.validate();
    std::vector<Tensor> out;
    out.reserve(p.layout.size());
    for (std::size_t k = 0; k < p.layout.size(); ++k) out.push_back(p.entry_tensor(k));
    return out;
}

inline ParamVector flatten(const std::vector<LayoutEntry>& layout,
                           const std::vector<Tensor>& entries) {
    if (layout.size() != entries.size()) {
        throw LayoutError("flatten: " + std::to_string(entries.size()) + " tensors for " +
                          std::to_string(layout.size()) + " layout entries");
    }
    ParamVector p;
    p.layout = layout;
    for (std::size_t k = 0; k < layout.size(); ++k) {
        if (entries[k].shape() != layout[k].shape) {
            throw LayoutError("flatten: entry " + layout[k].name + " has shape " +
                              shape_str(entries[k].shape()) + ", layout says " +
                              shape_str(layout[k].shape));
        }
        p.values.insert(p.values.end(), entries[k].values().begin(), entries[k].values().end());
    }
    p.validate();
    return p;
}

inline std::vector<LayoutEntry> mlp_layout(const MlpSpec& spec) {
    spec.validate();
    std::vector<LayoutEntry> layout;
    std::size_t offset = 0;
    for (std::size_t l = 0; l + 1 < spec.layer_widths.size(); ++l) {
        const std::size_t fan_in = spec.layer_widths[l];
        const std::size_t fan_out = spec.layer_widths[l + 1];
        layout.push_back({"w" + std::to_string(l), Shape{fan_in, fan_out}, offset});
        offset += fan_in * fan_out;
        // Biases kept as [1, fan_out] so broadcasting is a plain matmul.
        layout.push_back({"b" + std::to_string(l), Shape{1, fan_out}, offset});
        offset += fan_out;
    }
    return layout;
}

inline std::size_t param_count(const MlpSpec& spec) {
    std::size_t n = 0;
    for (const LayoutEntry& e : mlp_layout(spec)) n += e.numel();
    return n;
}

// Glorot-uniform weights, zero biases; bit-reproducible for a given seed.
inline ParamVector init_params(const MlpSpec& spec, std::uint64_t seed) {
    ParamVector p;
    p.layout = mlp_layout(spec);
    Rng rng(seed);
    for (const LayoutEntry& e : p.layout) {
        if (e.name[0] == 'b') {
            p.values.insert(p.values.end(), e.numel(), 0.0);
        } else {
            const double bound = std::sqrt(6.0 / static_cast<double>(e.shape[0] + e.shape[1]));
            for (std::size_t i = 0; i < e.numel(); ++i) {
                p.values.push_back(rng.uniform(-bound, bound));
            }
        }
    }
    p.validate();
    return p;
}

// One differentiable leaf per layout entry.
inline std::vector<NodeRef> param_nodes(Graph& g, const ParamVector& p) {
    p.validate();
    std::vector<NodeRef> nodes;
    nodes.reserve(p.layout.size());
    for (std::size_t k = 0; k < p.layout.size(); ++k) nodes.push_back(g.leaf(p.entry_tensor(k)));
    return nodes;
}

// Forward pass over a batch x of shape [n, input_width]. Returns the
// output node ([n, 1] regression value or [n, N] logits), differentiable
// with respect to the parameter nodes.
inline NodeRef mlp_forward(Graph& g, const MlpSpec& spec, std::span<const NodeRef> params,
                           NodeRef x) {
    spec.validate();
    if (params.size() != 2 * spec.n_layers()) {
        throw LayoutError("mlp forward: expected " + std::to_string(2 * spec.n_layers()) +
                          " parameter nodes, got " + std::to_string(params.size()));
    }
    const Shape& sx = g.shape_of(x);
    if (sx.size() != 2 || sx[1] != spec.input_width()) {
        throw ShapeError("mlp input shape " + shape_str(sx) + " does not match input width " +
                         std::to_string(spec.input_width()));
    }
    const NodeRef ones_col = g.constant(Tensor::ones(Shape{sx[0], 1}));
    NodeRef h = x;
    for (std::size_t l = 0; l < spec.n_layers(); ++l) {
        NodeRef z = g.add(g.matmul(h, params[2 * l]), g.matmul(ones_col, params[2 * l + 1]));
        if (l + 1 < spec.n_layers()) {
            h = spec.activation == Activation::Tanh ? g.tanh(z) : g.relu(z);
        } else {
            h = z;
        }
    }
    return h;
}

}  // namespace iml
