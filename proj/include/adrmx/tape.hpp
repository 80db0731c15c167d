#pragma once

#include <functional>
#include <span>
#include <vector>

#include "adrmx/error.hpp"
#include "adrmx/tensor.hpp"

namespace adrmx {

/// Reverse-mode gradient tape. Ops append nodes in execution order, so the
/// recorded list is already a topological order of the compute graph; the
/// backward sweep walks it once in reverse. A tape is written by one training
/// step at a time; disjoint tapes may be evaluated in parallel.
class Tape {
public:
    /// Receives the node's upstream gradient and accumulates into the
    /// gradients of the node's inputs via grad_mut().
    using BackwardFn = std::function<void(Tape&, std::span<const double>)>;

    int push_leaf(std::size_t size) {
        nodes_.push_back(Node{size, {}, nullptr});
        grads_.emplace_back(size, 0.0);
        return static_cast<int>(nodes_.size()) - 1;
    }

    int push_node(std::size_t size, std::vector<int> inputs, BackwardFn backward) {
        const int id = static_cast<int>(nodes_.size());
        for (const int in : inputs) {
            if (in >= id) throw ContractError("tape input id is not topologically ordered");
        }
        nodes_.push_back(Node{size, std::move(inputs), std::move(backward)});
        grads_.emplace_back(size, 0.0);
        return id;
    }

    std::size_t size() const { return nodes_.size(); }

    std::span<const double> grad(int node) const {
        check_node(node);
        return grads_[static_cast<std::size_t>(node)];
    }

    std::span<double> grad_mut(int node) {
        check_node(node);
        return grads_[static_cast<std::size_t>(node)];
    }

    /// Reverse sweep from a scalar loss. Only nodes reachable from the loss
    /// are visited (each exactly once); everything else keeps a zero
    /// gradient. Deterministic: repeated calls produce identical gradients.
    void backward(const Tensor& loss) {
        if (loss.tape != this || loss.node < 0) throw ContractError("backward: loss is not on this tape");
        if (loss.numel() != 1) {
            throw ContractError("backward: loss must be scalar, got shape " + loss.shape_string());
        }
        for (auto& g : grads_) std::fill(g.begin(), g.end(), 0.0);

        std::vector<char> reachable(nodes_.size(), 0);
        std::vector<int> stack{loss.node};
        reachable[static_cast<std::size_t>(loss.node)] = 1;
        while (!stack.empty()) {
            const int id = stack.back();
            stack.pop_back();
            for (const int in : nodes_[static_cast<std::size_t>(id)].inputs) {
                if (in >= 0 && !reachable[static_cast<std::size_t>(in)]) {
                    reachable[static_cast<std::size_t>(in)] = 1;
                    stack.push_back(in);
                }
            }
        }

        grads_[static_cast<std::size_t>(loss.node)][0] = 1.0;
        for (int id = loss.node; id >= 0; --id) {
            if (!reachable[static_cast<std::size_t>(id)]) continue;
            const Node& node = nodes_[static_cast<std::size_t>(id)];
            if (node.backward) node.backward(*this, grads_[static_cast<std::size_t>(id)]);
        }
    }

private:
    struct Node {
        std::size_t size;
        std::vector<int> inputs;
        BackwardFn backward;
    };

    void check_node(int node) const {
        if (node < 0 || static_cast<std::size_t>(node) >= nodes_.size()) {
            throw ContractError("tape node id out of range");
        }
    }

    std::vector<Node> nodes_;
    std::vector<std::vector<double>> grads_;
};

}  // namespace adrmx
