#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "donet/errors.hpp"

namespace donet {

// Extents of a rank-4 tensor in (batch, channel, height, width) order.
struct Shape {
    std::size_t n = 0;
    std::size_t c = 0;
    std::size_t h = 0;
    std::size_t w = 0;

    // Throws SizeError when the product overflows size_t.
    std::size_t numel() const;
    std::size_t spatial() const { return h * w; }
    std::array<std::size_t, 4> dims() const { return {n, c, h, w}; }
    std::string str() const;

    friend bool operator==(const Shape&, const Shape&) = default;
};

inline constexpr Shape scalar_shape{1, 1, 1, 1};

template <typename T>
struct TensorImpl;

// Gradient rule: receives the output gradient and the output values.
template <typename T>
using GradRule = std::function<void(std::span<const T> grad_out, std::span<const T> out)>;

// One executed primitive: the tensors it read and the rule that maps the
// output gradient onto those inputs.
template <typename T>
struct GradNode {
    std::string op;
    std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
    GradRule<T> backward;
};

template <typename T>
struct TensorImpl {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until a gradient arrives
    bool requires_grad = false;
    std::shared_ptr<GradNode<T>> grad_fn;  // null for leaves

    bool is_leaf() const { return grad_fn == nullptr; }

    // Allocates (zeroed) on first use and returns the buffer.
    std::vector<T>& grad_buffer() {
        if (grad.empty() && !data.empty()) grad.assign(data.size(), T(0));
        return grad;
    }
};

// Shared handle to a tensor. Copies alias the same storage, as with a
// framework tensor; use clone() for an independent copy.
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorImpl<T>> impl) : impl_(std::move(impl)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor constant(Shape shape, double value, bool requires_grad = false);
    // Bit-reproducible for a fixed seed.
    static Tensor normal(Shape shape, double mean, double stddev, std::uint64_t seed,
                         bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<T> data, bool requires_grad = false);
    static Tensor scalar(T value, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::size_t numel() const { return impl_->data.size(); }

    std::span<T> data() { return impl_->data; }
    std::span<const T> data() const { return impl_->data; }
    T item() const;
    T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w);
    T at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const;

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool on);
    bool has_grad() const { return !impl_->grad.empty(); }
    std::span<const T> grad() const { return impl_->grad; }
    std::span<T> mutable_grad() { return impl_->grad_buffer(); }
    void zero_grad() { impl_->grad.clear(); }

    // Populates grad on every requires_grad ancestor; leaf gradients add up
    // across calls until zero_grad().
    void backward() const;

    Tensor detach() const;
    Tensor clone() const;
    bool is_leaf() const { return impl_->is_leaf(); }
    const std::shared_ptr<GradNode<T>>& grad_fn() const { return impl_->grad_fn; }
    const std::shared_ptr<TensorImpl<T>>& impl() const { return impl_; }

    bool all_finite() const;

private:
    std::shared_ptr<TensorImpl<T>> impl_;
};

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

// Graph recording switch. While a NoGradGuard is alive on this thread,
// primitives produce plain tensors without a GradNode.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled();

namespace autograd {

// Creates an output tensor and, when any input needs a gradient and
// recording is on, attaches a node with the given rule.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, std::string op,
                      const std::vector<Tensor<T>>& inputs, GradRule<T> rule);

// Fault injection for the gradient checker's own tests: the rule of every
// node named `op` sees its incoming gradient multiplied by `factor`.
// Pass an empty name to clear.
void inject_fault(const std::string& op, double factor = 1.5);
const std::string& injected_fault_op();
double injected_fault_factor();

// Topologically ordered node list reachable from `root` (inputs first).
template <typename T>
std::vector<std::shared_ptr<TensorImpl<T>>> topo_order(const std::shared_ptr<TensorImpl<T>>& root);

}  // namespace autograd

// Convenience used by gradient rules: true when `t` will receive a gradient.
template <typename T>
inline bool wants_grad(const std::shared_ptr<TensorImpl<T>>& t) {
    return t && t->requires_grad;
}

// Value copy into another precision; the result is a fresh leaf.
template <typename To, typename From>
Tensor<To> cast_tensor(const Tensor<From>& src, bool requires_grad = false) {
    std::vector<To> out(src.data().begin(), src.data().end());
    return Tensor<To>::from_data(src.shape(), std::move(out), requires_grad);
}

}  // namespace donet
