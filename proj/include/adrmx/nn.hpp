#pragma once

#include <cmath>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "adrmx/ops.hpp"
#include "adrmx/rng.hpp"
#include "adrmx/tape.hpp"
#include "adrmx/tensor.hpp"

namespace adrmx {

/// A named trainable tensor with its gradient accumulator.
struct Parameter {
    std::string name;
    Tensor value;
    std::vector<double> grad;

    Parameter() = default;
    Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.numel(), 0.0) {}

    void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
};

/// Binds parameters to a tape as leaf nodes for one forward/backward pass.
/// Attaching the same parameter twice reuses its leaf, so gradients from all
/// uses (e.g. a classifier head shared across feature streams) accumulate.
class LeafSet {
public:
    explicit LeafSet(Tape& tape) : tape_(&tape) {}

    Tensor attach(Parameter& p) {
        const auto it = index_.find(&p);
        int node;
        if (it != index_.end()) {
            node = entries_[it->second].second;
        } else {
            node = tape_->push_leaf(p.value.numel());
            index_.emplace(&p, entries_.size());
            entries_.emplace_back(&p, node);
        }
        Tensor t = p.value.constant();
        t.tape = tape_;
        t.node = node;
        return t;
    }

    /// Accumulate tape gradients into the bound parameters' grad buffers.
    void harvest() const {
        for (const auto& [param, node] : entries_) {
            const auto g = tape_->grad(node);
            for (std::size_t i = 0; i < g.size(); ++i) param->grad[i] += g[i];
        }
    }

private:
    Tape* tape_;
    std::vector<std::pair<Parameter*, int>> entries_;
    std::unordered_map<const Parameter*, std::size_t> index_;
};

struct DenseLayer {
    Parameter weight;  // [in x out]
    Parameter bias;    // [out]
};

/// Fully connected net with ReLU between layers and a linear final layer.
struct Mlp {
    std::vector<DenseLayer> layers;

    /// Forward pass. With a LeafSet the parameters join its tape; without one
    /// this is a pure constant evaluation. Dropout (if > 0) is applied after
    /// each hidden activation.
    Tensor forward(const Tensor& input, LeafSet* leaves = nullptr, double dropout_p = 0.0,
                   Rng* rng = nullptr) const {
        Tensor h = input;
        for (std::size_t i = 0; i < layers.size(); ++i) {
            // LeafSet tracks Parameter* for the later gradient harvest.
            auto& layer = const_cast<DenseLayer&>(layers[i]);
            const Tensor w = leaves ? leaves->attach(layer.weight) : layer.weight.value;
            const Tensor b = leaves ? leaves->attach(layer.bias) : layer.bias.value;
            h = bias_add(matmul(h, w), b);
            if (i + 1 < layers.size()) {
                h = relu(h);
                if (dropout_p > 0.0 && rng != nullptr) h = dropout(h, dropout_p, *rng);
            }
        }
        return h;
    }

    std::vector<Parameter*> parameters() {
        std::vector<Parameter*> out;
        out.reserve(layers.size() * 2);
        for (auto& layer : layers) {
            out.push_back(&layer.weight);
            out.push_back(&layer.bias);
        }
        return out;
    }

    std::vector<const Parameter*> parameters() const {
        std::vector<const Parameter*> out;
        out.reserve(layers.size() * 2);
        for (const auto& layer : layers) {
            out.push_back(&layer.weight);
            out.push_back(&layer.bias);
        }
        return out;
    }

    std::size_t input_dim() const { return layers.empty() ? 0 : layers.front().weight.value.shape[0]; }
    std::size_t output_dim() const { return layers.empty() ? 0 : layers.back().weight.value.shape[1]; }
};

/// Build an MLP with the given layer widths. Weights are uniform with fan-in
/// scaling U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases start at zero.
inline Mlp make_mlp(const std::string& name_prefix, const std::vector<std::size_t>& widths, Rng& rng) {
    if (widths.size() < 2) throw ConfigError("make_mlp: need at least input and output widths");
    Mlp mlp;
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
        const std::size_t fan_in = widths[i], fan_out = widths[i + 1];
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        Tensor w = Tensor::zeros({fan_in, fan_out});
        for (auto& v : w.data) v = rng.uniform(-bound, bound);
        const std::string layer_name = name_prefix + "." + std::to_string(i);
        DenseLayer layer{Parameter(layer_name + ".weight", std::move(w)),
                         Parameter(layer_name + ".bias", Tensor::zeros({fan_out}))};
        mlp.layers.push_back(std::move(layer));
    }
    return mlp;
}

}  // namespace adrmx
