#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "rnflnet/error.hpp"

namespace rnfl {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

enum class OpKind {
    conv2d,
    batchnorm2d,
    relu,
    maxpool2x2,
    global_avg_pool,
    linear,
    add,
    sigmoid,
    mse_loss,
    bce_loss,
    sum,
};

inline const char* op_name(OpKind k) {
    switch (k) {
        case OpKind::conv2d: return "conv2d";
        case OpKind::batchnorm2d: return "batchnorm2d";
        case OpKind::relu: return "relu";
        case OpKind::maxpool2x2: return "maxpool2x2";
        case OpKind::global_avg_pool: return "global_avg_pool";
        case OpKind::linear: return "linear";
        case OpKind::add: return "add";
        case OpKind::sigmoid: return "sigmoid";
        case OpKind::mse_loss: return "mse_loss";
        case OpKind::bce_loss: return "bce_loss";
        case OpKind::sum: return "sum";
    }
    return "?";
}

struct TensorImpl;

// One recorded operation. `backward` reads the output gradient and adds into
// the gradients of `inputs`; it never captures the output itself, so the
// graph owns no cycles.
struct OpNode {
    OpKind kind;
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    std::function<void(const TensorImpl& out)> backward;
};

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until a gradient flows in
    bool requires_grad = false;
    std::shared_ptr<OpNode> producer;

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
};

// Process-wide switch (per thread) for recording graphs. Inference paths
// disable it with NoGradGuard.
class GradMode {
public:
    static bool enabled() { return flag(); }
    static void set_enabled(bool on) { flag() = on; }

private:
    static bool& flag() {
        thread_local bool on = true;
        return on;
    }
};

class NoGradGuard {
public:
    NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set_enabled(false); }
    ~NoGradGuard() { GradMode::set_enabled(prev_); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

// Dense row-major float64 array with an optional gradient. Copies share
// storage (handle semantics); use clone() for an independent deep copy.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0) : impl_(std::make_shared<TensorImpl>()) {
        impl_->data.assign(shape_numel(shape), fill);
        impl_->shape = std::move(shape);
    }

    Tensor(Shape shape, std::vector<double> values) : impl_(std::make_shared<TensorImpl>()) {
        if (shape_numel(shape) != values.size()) {
            throw ShapeError("tensor shape " + shape_str(shape) + " needs " +
                             std::to_string(shape_numel(shape)) + " values, got " +
                             std::to_string(values.size()));
        }
        impl_->shape = std::move(shape);
        impl_->data = std::move(values);
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
    static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }
    static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t numel() const { return impl_->data.size(); }

    std::span<double> data() { return impl_->data; }
    std::span<const double> data() const { return impl_->data; }
    std::vector<double>& values() { return impl_->data; }
    const std::vector<double>& values() const { return impl_->data; }

    double item() const {
        if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
        return impl_->data[0];
    }
    double& operator[](std::size_t i) { return impl_->data[i]; }
    double operator[](std::size_t i) const { return impl_->data[i]; }

    bool has_grad() const { return impl_->grad.size() == impl_->data.size(); }
    std::span<const double> grad() const { return impl_->grad; }
    std::span<double> grad() { return impl_->grad; }
    void zero_grad() { impl_->grad.clear(); }

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool on) {
        impl_->requires_grad = on;
        return *this;
    }

    bool is_leaf() const { return impl_->producer == nullptr; }
    const std::shared_ptr<OpNode>& producer() const { return impl_->producer; }

    // Deep copy of values only; the copy is a leaf with the same requires_grad flag.
    Tensor clone() const {
        Tensor t(impl_->shape, impl_->data);
        t.impl_->requires_grad = impl_->requires_grad;
        return t;
    }

    Tensor detach() const {
        Tensor t(impl_->shape, impl_->data);
        return t;
    }

    bool all_finite() const {
        return std::all_of(impl_->data.begin(), impl_->data.end(),
                           [](double v) { return std::isfinite(v); });
    }

    const std::shared_ptr<TensorImpl>& impl() const { return impl_; }
    static Tensor wrap(std::shared_ptr<TensorImpl> p) {
        Tensor t;
        t.impl_ = std::move(p);
        return t;
    }

private:
    std::shared_ptr<TensorImpl> impl_;
};

namespace detail {

inline bool any_requires_grad(std::initializer_list<const Tensor*> ts) {
    if (!GradMode::enabled()) return false;
    for (auto* t : ts)
        if (t && t->defined() && t->requires_grad()) return true;
    return false;
}

inline void check_finite(const Tensor& t, OpKind k) {
    if (!t.all_finite())
        throw NonFiniteError(std::string("non-finite value produced by ") + op_name(k));
}

// Attach a node to `out` when recording is on and some input needs a gradient.
inline void record(Tensor& out, OpKind kind, std::vector<Tensor> inputs,
                   std::function<void(const TensorImpl&)> backward) {
    bool needed = false;
    if (GradMode::enabled())
        for (auto& t : inputs)
            if (t.defined() && t.requires_grad()) needed = true;
    if (!needed) return;
    auto node = std::make_shared<OpNode>();
    node->kind = kind;
    for (auto& t : inputs) node->inputs.push_back(t.impl());
    node->backward = std::move(backward);
    out.impl()->producer = std::move(node);
    out.set_requires_grad(true);
}

// Gradient sink for an input; null when the input takes no gradient.
inline double* grad_sink(const std::shared_ptr<TensorImpl>& p) {
    if (!p || !p->requires_grad) return nullptr;
    p->ensure_grad();
    return p->grad.data();
}

}  // namespace detail

// Reverse-mode sweep from a scalar loss. Every requires_grad tensor reachable
// from `loss` (leaves and intermediates) receives d loss / d tensor, added to
// whatever gradient it already holds.
inline void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1)
        throw ShapeError("backward() needs a scalar loss, got shape " +
                         (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
    if (!loss.requires_grad()) throw Error("backward() on a tensor that does not require grad");

    // Iterative post-order DFS gives a topological order (inputs first).
    std::vector<TensorImpl*> order;
    std::unordered_set<TensorImpl*> seen;
    std::vector<std::pair<TensorImpl*, std::size_t>> stack{{loss.impl().get(), 0}};
    seen.insert(loss.impl().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        const auto& prod = node->producer;
        if (prod && next < prod->inputs.size()) {
            TensorImpl* child = prod->inputs[next++].get();
            if (child && child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
            continue;
        }
        order.push_back(node);
        stack.pop_back();
    }

    auto& root = *loss.impl();
    root.ensure_grad();
    root.grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorImpl* t = *it;
        if (!t->producer || t->grad.empty()) continue;
        t->producer->backward(*t);
    }
    for (TensorImpl* t : order) {
        for (double g : t->grad)
            if (!std::isfinite(g)) throw NonFiniteError("non-finite gradient during backward");
    }
}

}  // namespace rnfl
