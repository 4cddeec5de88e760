#include "donet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <unordered_set>

#include "donet/rng.hpp"

namespace donet {

std::size_t Shape::numel() const {
    std::size_t total = 1;
    for (std::size_t d : dims()) {
        if (d != 0 && total > std::numeric_limits<std::size_t>::max() / d) {
            throw SizeError("tensor extents " + str() + " overflow the addressable size");
        }
        total *= d;
    }
    return total;
}

std::string Shape::str() const {
    std::ostringstream os;
    os << '(' << n << ',' << c << ',' << h << ',' << w << ')';
    return os.str();
}

namespace {

thread_local bool g_grad_enabled = true;

std::string g_fault_op;
double g_fault_factor = 1.0;

template <typename T>
std::shared_ptr<TensorImpl<T>> new_impl(Shape shape, std::vector<T> data, bool requires_grad) {
    auto impl = std::make_shared<TensorImpl<T>>();
    impl->shape = shape;
    impl->data = std::move(data);
    impl->requires_grad = requires_grad;
    return impl;
}

template <typename T>
std::vector<T> allocate(Shape shape, T fill) {
    const std::size_t count = shape.numel();
    if (count > std::vector<T>().max_size()) {
        throw SizeError("tensor extents " + shape.str() + " exceed the maximum allocation");
    }
    return std::vector<T>(count, fill);
}

}  // namespace

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

namespace autograd {

void inject_fault(const std::string& op, double factor) {
    g_fault_op = op;
    g_fault_factor = op.empty() ? 1.0 : factor;
}
const std::string& injected_fault_op() { return g_fault_op; }
double injected_fault_factor() { return g_fault_factor; }

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, std::string op,
                      const std::vector<Tensor<T>>& inputs, GradRule<T> rule) {
    bool needs = false;
    if (g_grad_enabled) {
        for (const auto& in : inputs) needs = needs || in.requires_grad();
    }
    auto impl = new_impl<T>(shape, std::move(data), needs);
    if (needs) {
        auto node = std::make_shared<GradNode<T>>();
        node->op = std::move(op);
        node->inputs.reserve(inputs.size());
        for (const auto& in : inputs) node->inputs.push_back(in.impl());
        node->backward = std::move(rule);
        impl->grad_fn = std::move(node);
    }
    return Tensor<T>(std::move(impl));
}

template <typename T>
std::vector<std::shared_ptr<TensorImpl<T>>> topo_order(const std::shared_ptr<TensorImpl<T>>& root) {
    std::vector<std::shared_ptr<TensorImpl<T>>> order;
    std::unordered_set<const TensorImpl<T>*> visited;
    // Iterative post-order DFS; graphs of unrolled recurrences get deep.
    std::vector<std::pair<std::shared_ptr<TensorImpl<T>>, std::size_t>> stack;
    stack.emplace_back(root, 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [impl, next] = stack.back();
        const auto& fn = impl->grad_fn;
        if (fn && next < fn->inputs.size()) {
            const auto& child = fn->inputs[next++];
            if (child->requires_grad && visited.insert(child.get()).second) {
                stack.emplace_back(child, 0);
            }
            continue;
        }
        order.push_back(impl);
        stack.pop_back();
    }
    return order;
}

template Tensor<float> make_result(Shape, std::vector<float>, std::string, const std::vector<Tensor<float>>&,
                                   GradRule<float>);
template Tensor<double> make_result(Shape, std::vector<double>, std::string, const std::vector<Tensor<double>>&,
                                    GradRule<double>);
template std::vector<std::shared_ptr<TensorImpl<float>>> topo_order(const std::shared_ptr<TensorImpl<float>>&);
template std::vector<std::shared_ptr<TensorImpl<double>>> topo_order(const std::shared_ptr<TensorImpl<double>>&);

}  // namespace autograd

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
    return Tensor(new_impl<T>(shape, allocate<T>(shape, T(0)), requires_grad));
}

template <typename T>
Tensor<T> Tensor<T>::constant(Shape shape, double value, bool requires_grad) {
    return Tensor(new_impl<T>(shape, allocate<T>(shape, static_cast<T>(value)), requires_grad));
}

template <typename T>
Tensor<T> Tensor<T>::normal(Shape shape, double mean, double stddev, std::uint64_t seed, bool requires_grad) {
    if (!(stddev >= 0.0)) throw ContractError("normal init requires stddev >= 0");
    auto data = allocate<T>(shape, T(0));
    CounterRng rng(seed);
    for (auto& v : data) v = static_cast<T>(rng.normal(mean, stddev));
    return Tensor(new_impl<T>(shape, std::move(data), requires_grad));
}

template <typename T>
Tensor<T> Tensor<T>::from_data(Shape shape, std::vector<T> data, bool requires_grad) {
    if (data.size() != shape.numel()) {
        throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " + shape.str());
    }
    return Tensor(new_impl<T>(shape, std::move(data), requires_grad));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
    return Tensor(new_impl<T>(scalar_shape, std::vector<T>{value}, requires_grad));
}

template <typename T>
T Tensor<T>::item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape().str());
    return impl_->data[0];
}

template <typename T>
T& Tensor<T>::at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    const Shape& s = impl_->shape;
    return impl_->data[((n * s.c + c) * s.h + h) * s.w + w];
}

template <typename T>
T Tensor<T>::at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    const Shape& s = impl_->shape;
    return impl_->data[((n * s.c + c) * s.h + h) * s.w + w];
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool on) {
    if (!impl_->is_leaf()) throw ContractError("requires_grad can only be toggled on leaf tensors");
    impl_->requires_grad = on;
    return *this;
}

template <typename T>
void Tensor<T>::backward() const {
    if (impl_->shape != scalar_shape) {
        throw ContractError("backward() needs a scalar loss of shape (1,1,1,1), got " + impl_->shape.str());
    }
    if (!impl_->requires_grad) {
        throw ContractError("backward() on a tensor that does not require grad");
    }
    auto order = autograd::topo_order(impl_);
    // Intermediate gradients belong to this traversal only.
    for (auto& node : order) {
        if (!node->is_leaf()) node->grad.assign(node->data.size(), T(0));
    }
    impl_->grad_buffer()[0] += T(1);
    const std::string& fault = g_fault_op;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        auto& node = *it;
        if (node->is_leaf() || node->grad.empty()) continue;
        if (!fault.empty() && node->grad_fn->op == fault) {
            std::vector<T> scaled(node->grad);
            for (auto& g : scaled) g = static_cast<T>(g * g_fault_factor);
            node->grad_fn->backward(scaled, node->data);
        } else {
            node->grad_fn->backward(node->grad, node->data);
        }
    }
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
    return Tensor(new_impl<T>(impl_->shape, impl_->data, false));
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
    auto impl = new_impl<T>(impl_->shape, impl_->data, impl_->requires_grad && impl_->is_leaf());
    impl->grad = impl_->grad;
    return Tensor(std::move(impl));
}

template <typename T>
bool Tensor<T>::all_finite() const {
    return std::all_of(impl_->data.begin(), impl_->data.end(), [](T v) { return std::isfinite(v); });
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace donet
