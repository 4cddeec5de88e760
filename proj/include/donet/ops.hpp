#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "donet/tensor.hpp"

namespace donet {

enum class Elementwise { add, hadamard, relu, sigmoid, tanh };

std::string to_string(Elementwise op);

// Dispatches to the named primitive. Unary ops ignore `b`.
template <typename T>
Tensor<T> elementwise(Elementwise op, const Tensor<T>& a, const Tensor<T>* b = nullptr);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> hadamard(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> relu(const Tensor<T>& x);
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);
template <typename T>
Tensor<T> tanh(const Tensor<T>& x);
template <typename T>
Tensor<T> scale(const Tensor<T>& x, double factor);

// Sum of every element, as a (1,1,1,1) tensor.
template <typename T>
Tensor<T> sum(const Tensor<T>& x);

// x[n,c,:,:] * w[0,c,0,0]; w has shape (1,C,1,1).
template <typename T>
Tensor<T> channel_scale(const Tensor<T>& x, const Tensor<T>& w);

// x[n,c,h,w] * m[n,0,h,w]; m has one channel shared by every channel of x.
template <typename T>
Tensor<T> spatial_scale(const Tensor<T>& x, const Tensor<T>& m);

// Joins along axis 0 (batch) or 1 (channel); other extents must agree.
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis);

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
    return concat(parts, 1);
}

// Channels [begin, begin + count).
template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, std::size_t begin, std::size_t count);

// Batch entries [begin, begin + count).
template <typename T>
Tensor<T> slice_batch(const Tensor<T>& x, std::size_t begin, std::size_t count);

// 2x2 mean pooling with stride 2.
template <typename T>
Tensor<T> avgpool2x2(const Tensor<T>& x);

}  // namespace donet
