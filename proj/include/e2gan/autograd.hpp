#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "e2gan/tensor.hpp"

namespace e2gan {

// Define-by-run reverse-mode autodiff. Every op produces a Node holding the
// forward value plus a pull-style backward closure; backward() walks the
// graph in reverse topological order. Leaf nodes with requires_grad are the
// trainable parameters.

namespace detail {

template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    bool grad_alloc = false;
    std::vector<std::shared_ptr<Node>> parents;
    // Reads this->grad and accumulates into parents' grads.
    std::function<void(Node&)> backward;

    Tensor<T>& ensure_grad() {
        if (!grad_alloc) {
            grad = Tensor<T>(value.shape());
            grad_alloc = true;
        }
        return grad;
    }
};

inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// Disables graph recording in scope; forwards become plain evaluation.
struct NoGradGuard {
    NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
    ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

template <typename T>
class Var {
public:
    Var() = default;

    explicit Var(Tensor<T> value, bool requires_grad = false)
        : node_(std::make_shared<detail::Node<T>>()) {
        node_->value = std::move(value);
        node_->requires_grad = requires_grad;
    }

    static Var leaf(Tensor<T> value, bool requires_grad) {
        return Var(std::move(value), requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const Tensor<T>& val() const { return node_->value; }
    Tensor<T>& mutable_val() { return node_->value; }
    Tensor<T>& grad() { return node_->ensure_grad(); }
    bool has_grad() const { return node_ && node_->grad_alloc; }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    void set_requires_grad(bool v) { node_->requires_grad = v; }

    void zero_grad() {
        if (node_ && node_->grad_alloc)
            for (auto& g : node_->grad.vec()) g = T(0);
    }

    std::shared_ptr<detail::Node<T>> node() const { return node_; }

    explicit Var(std::shared_ptr<detail::Node<T>> n) : node_(std::move(n)) {}

private:
    std::shared_ptr<detail::Node<T>> node_;
};

namespace detail {

// Builds the output node for an op. `fill` computes the forward value;
// `bwd` is recorded only when grad mode is on and some parent needs it.
template <typename T, typename Fill, typename Bwd>
Var<T> make_op(std::vector<std::shared_ptr<Node<T>>> parents, Fill&& fill, Bwd&& bwd) {
    auto out = std::make_shared<Node<T>>();
    fill(*out);
    bool needs = false;
    if (grad_mode_flag())
        for (const auto& p : parents)
            if (p && p->requires_grad) {
                needs = true;
                break;
            }
    if (needs) {
        out->requires_grad = true;
        out->parents = std::move(parents);
        out->backward = std::forward<Bwd>(bwd);
    }
    return Var<T>(out);
}

}  // namespace detail

// Reverse-mode sweep from a scalar root; seeds d(root)/d(root) = 1.
template <typename T>
void backward(const Var<T>& root) {
    auto r = root.node();
    if (!r || !r->requires_grad) return;
    if (r->value.numel() != 1)
        throw ShapeError("backward expects a scalar root, got " + r->value.shape_str());

    // Iterative post-order DFS for topological order.
    std::vector<detail::Node<T>*> order;
    std::unordered_set<detail::Node<T>*> visited;
    std::vector<std::pair<detail::Node<T>*, size_t>> stack;
    stack.emplace_back(r.get(), 0);
    visited.insert(r.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            detail::Node<T>* p = node->parents[idx].get();
            ++idx;
            if (p && p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    r->ensure_grad();
    r->grad[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node<T>* n = *it;
        if (n->backward && n->grad_alloc) n->backward(*n);
    }
}

}  // namespace e2gan
