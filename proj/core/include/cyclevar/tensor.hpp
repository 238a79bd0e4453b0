#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "cyclevar/common.hpp"
#include "cyclevar/rng.hpp"

namespace cyclevar {

// Define-by-run reverse-mode tape. Every op allocates one Node; backward()
// walks the recorded graph. Templated on the scalar so the same graph code
// runs at float (training) and double (grad checks, limit tests).
template <class T>
struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // sized lazily; see backward()
    bool requires_grad = false;
    bool leaf = true;
    std::vector<std::shared_ptr<Node>> parents;
    // Reads this->grad, accumulates into parents' grads. Set only when some
    // parent requires grad.
    std::function<void()> backward;
};

// Global switch: while disabled, ops record no parents and no backward
// closures, so evaluation is pure forward compute.
inline bool& grad_mode_enabled() {
    static bool enabled = true;
    return enabled;
}

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_mode_enabled()) { grad_mode_enabled() = false; }
    ~NoGradGuard() { grad_mode_enabled() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <class T>
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node<T>> n) : n_(std::move(n)) {}

    static Tensor leaf(Shape shape, std::vector<T> value, bool requires_grad = false) {
        require(shape_size(shape) == int64_t(value.size()),
                "leaf: shape " + shape_str(shape) + " does not match value count " +
                    std::to_string(value.size()));
        auto n = std::make_shared<Node<T>>();
        n->shape = std::move(shape);
        n->value = std::move(value);
        n->requires_grad = requires_grad;
        n->leaf = true;
        return Tensor(n);
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        std::vector<T> v(size_t(shape_size(shape)), T(0));
        return leaf(std::move(shape), std::move(v), requires_grad);
    }

    static Tensor full(Shape shape, T fill, bool requires_grad = false) {
        std::vector<T> v(size_t(shape_size(shape)), fill);
        return leaf(std::move(shape), std::move(v), requires_grad);
    }

    static Tensor scalar(T v, bool requires_grad = false) {
        return leaf(Shape{1}, std::vector<T>{v}, requires_grad);
    }

    static Tensor randn(Shape shape, Rng& rng, double stddev, bool requires_grad = true) {
        std::vector<T> v(size_t(shape_size(shape)));
        for (auto& x : v) x = T(rng.normal() * stddev);
        return leaf(std::move(shape), std::move(v), requires_grad);
    }

    // Fresh interior node for op results. Parents are attached by the op
    // builder only when gradient will flow.
    static Tensor interior(Shape shape) {
        auto n = std::make_shared<Node<T>>();
        n->shape = std::move(shape);
        n->value.assign(size_t(shape_size(n->shape)), T(0));
        n->leaf = false;
        return Tensor(n);
    }

    bool defined() const { return n_ != nullptr; }
    const Shape& shape() const { return n_->shape; }
    int ndim() const { return int(n_->shape.size()); }
    int dim(int i) const { return n_->shape[size_t(i)]; }
    int64_t size() const { return int64_t(n_->value.size()); }

    std::vector<T>& val() { return n_->value; }
    const std::vector<T>& val() const { return n_->value; }

    // Gradient buffer, sized on demand. Leaves keep contents across backward
    // calls; interior nodes are reset by backward() itself.
    std::vector<T>& grad() {
        if (n_->grad.size() != n_->value.size()) n_->grad.assign(n_->value.size(), T(0));
        return n_->grad;
    }
    const std::vector<T>& grad() const { return const_cast<Tensor*>(this)->grad(); }

    void zero_grad() { n_->grad.assign(n_->value.size(), T(0)); }

    T item() const {
        require(size() == 1, "item: tensor has " + std::to_string(size()) + " elements");
        return n_->value[0];
    }

    bool requires_grad() const { return n_->requires_grad; }
    void set_requires_grad(bool rg) {
        require(n_->leaf, "set_requires_grad: only leaves may be toggled");
        n_->requires_grad = rg;
    }

    Node<T>* node() const { return n_.get(); }
    const std::shared_ptr<Node<T>>& ptr() const { return n_; }

private:
    std::shared_ptr<Node<T>> n_;
};

// Reverse pass from a scalar. Repeated calls accumulate into leaf grads;
// interior grads are zeroed per call, so fan-out sums stay correct without
// any user-side reset of the graph.
template <class T>
void backward(const Tensor<T>& root) {
    require(root.defined(), "backward: undefined tensor");
    require(root.size() == 1, "backward: root must be scalar, got " + shape_str(root.shape()));

    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, size_t>> stack;
    if (root.node()->requires_grad) {
        stack.push_back({root.node(), 0});
        seen.insert(root.node());
    }
    while (!stack.empty()) {
        auto& top = stack.back();
        Node<T>* n = top.first;
        if (top.second < n->parents.size()) {
            Node<T>* p = n->parents[top.second++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    for (Node<T>* n : order) {
        if (!n->leaf) {
            n->grad.assign(n->value.size(), T(0));
        } else if (n->grad.size() != n->value.size()) {
            n->grad.assign(n->value.size(), T(0));
        }
    }
    if (!order.empty()) {
        root.node()->grad[0] += T(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            if ((*it)->backward) (*it)->backward();
        }
    }
}

}  // namespace cyclevar
