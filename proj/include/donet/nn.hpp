#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "donet/tensor.hpp"

namespace donet {

template <typename T>
struct NamedTensor {
    std::string name;
    Tensor<T> tensor;
};

template <typename T>
using NamedTensors = std::vector<NamedTensor<T>>;

// Stable per-name seed so initialization does not depend on build order.
std::uint64_t param_seed(std::uint64_t model_seed, const std::string& name);

enum class Mode { train, eval };

// ---------------------------------------------------------------------------
// Functional primitives

// Cross-correlation with zero padding and dilation. `weight` is
// (out, in, kH, kW); `bias` is (1, out, 1, 1) or undefined.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, std::size_t stride,
                 std::size_t padding, std::size_t dilation);

// Adjoint of conv2d with respect to its input. `weight` is (in, out, kH, kW)
// and the output extent is stride*(H-1) + kH - 2*padding.
template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, std::size_t stride,
                           std::size_t padding);

// Gradient goes to the first maximum of each block in row-major order.
template <typename T>
Tensor<T> maxpool2x2(const Tensor<T>& x);

// Per-channel normalization. In train mode the batch statistics are used and
// the running buffers updated in place; in eval mode the running buffers are
// used. `gamma`/`beta` are (1, C, 1, 1).
template <typename T>
Tensor<T> batchnorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, std::vector<T>& running_mean,
                    std::vector<T>& running_var, double momentum, double eps, Mode mode);

// ---------------------------------------------------------------------------
// Layers

template <typename T>
struct Conv2d {
    Tensor<T> weight;  // (out, in, kH, kW)
    Tensor<T> bias;    // (1, out, 1, 1), undefined when the layer has no bias
    std::size_t stride = 1;
    std::size_t padding = 0;
    std::size_t dilation = 1;

    Conv2d() = default;
    // He-normal kernel, zero bias.
    Conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride, std::size_t padding,
           std::size_t dilation, std::uint64_t seed, bool with_bias = true);

    std::size_t in_channels() const { return weight.shape().c; }
    std::size_t out_channels() const { return weight.shape().n; }
    std::size_t kernel() const { return weight.shape().h; }

    // floor((H + 2p - d(k-1) - 1)/s) + 1; throws ShapeError when < 1.
    std::pair<std::size_t, std::size_t> output_extent(std::size_t h, std::size_t w) const;

    Tensor<T> forward(const Tensor<T>& x) const { return conv2d(x, weight, bias, stride, padding, dilation); }
    void parameters(const std::string& prefix, NamedTensors<T>& out) const;
};

template <typename T>
struct ConvTranspose2d {
    Tensor<T> weight;  // (in, out, kH, kW)
    Tensor<T> bias;    // (1, out, 1, 1)
    std::size_t stride = 2;
    std::size_t padding = 0;

    ConvTranspose2d() = default;
    ConvTranspose2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride, std::size_t padding,
                    std::uint64_t seed);

    Tensor<T> forward(const Tensor<T>& x) const { return conv_transpose2d(x, weight, bias, stride, padding); }
    void parameters(const std::string& prefix, NamedTensors<T>& out) const;
};

template <typename T>
struct BatchNorm2d {
    Tensor<T> gamma;  // (1, C, 1, 1)
    Tensor<T> beta;
    std::vector<T> running_mean;
    std::vector<T> running_var;
    double momentum = 0.1;
    double eps = 1e-5;

    BatchNorm2d() = default;
    explicit BatchNorm2d(std::size_t channels);

    Tensor<T> forward(const Tensor<T>& x, Mode mode) {
        return batchnorm(x, gamma, beta, running_mean, running_var, momentum, eps, mode);
    }
    void parameters(const std::string& prefix, NamedTensors<T>& out) const;
    // Running statistics as (1, C, 1, 1) tensors sharing nothing with the layer.
    void buffers(const std::string& prefix, NamedTensors<T>& out) const;
    void load_buffer(const std::string& which, std::span<const T> values);
};

// Convolutional LSTM with Hadamard peepholes:
//   i = s(W_Fi*F + W_hi*H + w_ci o C_prev + b_i)
//   f = s(W_Ff*F + W_hf*H + w_cf o C_prev + b_f)
//   C = f o C_prev + i o tanh(W_Fc*F + W_hc*H + b_c)
//   o = s(W_Fo*F + W_ho*H + w_co o C + b_o)
//   H = o o tanh(C)
// All kernels are 3x3 with padding 1; peepholes are per-channel maps.
template <typename T>
struct ConvLstmCell {
    std::size_t in_channels = 0;
    std::size_t hidden = 0;
    Tensor<T> w_fi, w_ff, w_fc, w_fo;  // (hidden, in, 3, 3)
    Tensor<T> w_hi, w_hf, w_hc, w_ho;  // (hidden, hidden, 3, 3)
    Tensor<T> w_ci, w_cf, w_co;        // (1, hidden, 1, 1)
    Tensor<T> b_i, b_f, b_c, b_o;      // (1, hidden, 1, 1); b_f starts at 1

    ConvLstmCell() = default;
    ConvLstmCell(std::size_t in_channels, std::size_t hidden, std::uint64_t seed);

    struct State {
        Tensor<T> h;
        Tensor<T> c;
    };

    State zero_state(std::size_t batch, std::size_t height, std::size_t width) const;
    State step(const Tensor<T>& input, const State& prev) const;
    void parameters(const std::string& prefix, NamedTensors<T>& out) const;
};

// Additive attention gate: alpha = s(psi(relu(W_q*R + W_k*H))), A = alpha o H.
// Projections are 1x1 convolutions of width max(1, C/2).
template <typename T>
struct AttentionGate {
    Conv2d<T> query;  // on the decoder-side feature R_t
    Conv2d<T> key;    // on the skip feature H_t (no bias)
    Conv2d<T> psi;    // to one channel

    AttentionGate() = default;
    AttentionGate(std::size_t skip_channels, std::size_t gating_channels, std::uint64_t seed);

    // Per-pixel coefficients in (0,1), shape (N, 1, H, W).
    Tensor<T> coefficients(const Tensor<T>& skip, const Tensor<T>& gating) const;
    Tensor<T> forward(const Tensor<T>& skip, const Tensor<T>& gating) const;
    void parameters(const std::string& prefix, NamedTensors<T>& out) const;
};

}  // namespace donet
