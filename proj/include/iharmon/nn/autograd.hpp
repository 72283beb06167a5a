#pragma once

// Minimal reverse-mode automatic differentiation over Tensors. Each op builds a
// Node holding its value, its parents and a closure that pushes the node's
// gradient into the parents' gradients.

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "iharmon/nn/tensor.hpp"

namespace iharmon::nn {

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<Var> parents;
    std::function<void(Node&)> backward_fn;

    /// Gradient buffer, allocated (zeroed) on first use.
    Tensor& grad_buffer()
    {
        if (grad.empty())
            grad = Tensor(value.shape());
        return grad;
    }
    bool has_grad() const noexcept { return !grad.empty(); }
    void zero_grad() { grad = Tensor(); }
};

/// Leaf holding data that does not need a gradient (inputs, masks).
inline Var constant(Tensor t)
{
    auto v = std::make_shared<Node>();
    v->value = std::move(t);
    return v;
}

/// Leaf whose gradient is tracked (parameters, or inputs under inspection).
inline Var leaf(Tensor t)
{
    auto v = constant(std::move(t));
    v->requires_grad = true;
    return v;
}

namespace detail {
inline thread_local bool grad_mode = true;
}

inline bool grad_enabled() noexcept { return detail::grad_mode; }

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_mode) { detail::grad_mode = false; }
    ~NoGradGuard() { detail::grad_mode = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

/// Creates an op node; it requires a gradient when any parent does and
/// recording is enabled.
inline Var make_node(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward_fn)
{
    auto v = std::make_shared<Node>();
    v->value = std::move(value);
    if (!detail::grad_mode)
        return v;
    for (const auto& p : parents)
        v->requires_grad = v->requires_grad || p->requires_grad;
    if (v->requires_grad) {
        v->parents = std::move(parents);
        v->backward_fn = std::move(backward_fn);
    }
    return v;
}

/// Seeds the gradients of several outputs and back-propagates them through the
/// graph in reverse topological order. Leaf gradients accumulate.
inline void backward(const std::vector<std::pair<Var, Tensor>>& seeds)
{
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack;
    for (const auto& [root, g] : seeds) {
        if (!root->requires_grad)
            continue;
        if (seen.insert(root.get()).second)
            stack.emplace_back(root.get(), 0);
        while (!stack.empty()) {
            auto& [node, next] = stack.back();
            if (next < node->parents.size()) {
                Node* p = node->parents[next++].get();
                if (p->requires_grad && seen.insert(p).second)
                    stack.emplace_back(p, 0);
            } else {
                order.push_back(node);
                stack.pop_back();
            }
        }
    }
    for (const auto& [root, g] : seeds)
        if (root->requires_grad)
            add_into(root->grad_buffer(), g);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        if (node->backward_fn && node->has_grad())
            node->backward_fn(*node);
    }
}

inline void backward(const Var& root, Tensor seed)
{
    backward({{root, std::move(seed)}});
}

/// Backward from a scalar output with seed 1.
inline void backward(const Var& root)
{
    backward(root, Tensor(root->value.shape(), 1.0f));
}

} // namespace iharmon::nn
