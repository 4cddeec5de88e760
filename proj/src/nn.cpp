#include "donet/nn.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

#include "donet/ops.hpp"
#include "donet/rng.hpp"

namespace donet {

std::uint64_t param_seed(std::uint64_t model_seed, const std::string& name) {
    // FNV-1a over the name, then mixed with the model seed.
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : name) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return derive_key(model_seed, h);
}

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

// Sliding-window geometry between an "image" side (channels x H x W) and a
// "column" side (Ho x Wo output positions).
struct Window {
    std::size_t channels, h, w;
    std::size_t kh, kw;
    std::size_t stride, pad, dil;
    std::size_t oh, ow;

    std::size_t rows() const { return channels * kh * kw; }
    std::size_t cols() const { return oh * ow; }
};

// Output columns [lo, hi) whose input column ox*stride + off - pad is in range.
inline std::pair<std::size_t, std::size_t> valid_cols(const Window& g, std::size_t off) {
    const auto pad = static_cast<std::ptrdiff_t>(g.pad);
    const auto o = static_cast<std::ptrdiff_t>(off);
    const auto s = static_cast<std::ptrdiff_t>(g.stride);
    const auto ow = static_cast<std::ptrdiff_t>(g.ow);
    std::ptrdiff_t lo = pad > o ? (pad - o + s - 1) / s : 0;
    std::ptrdiff_t hi = (static_cast<std::ptrdiff_t>(g.w) + pad - o + s - 1) / s;
    lo = std::min(lo, ow);
    hi = std::clamp(hi, lo, ow);
    return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

template <typename T>
void im2col(const T* img, const Window& g, T* col) {
    const auto P = g.cols();
    for (std::size_t c = 0; c < g.channels; ++c) {
        for (std::size_t ki = 0; ki < g.kh; ++ki) {
            for (std::size_t kj = 0; kj < g.kw; ++kj) {
                T* dst = col + ((c * g.kh + ki) * g.kw + kj) * P;
                const auto [lo, hi] = valid_cols(g, kj * g.dil);
                const std::ptrdiff_t x0 = static_cast<std::ptrdiff_t>(kj * g.dil) - static_cast<std::ptrdiff_t>(g.pad);
                for (std::size_t oy = 0; oy < g.oh; ++oy) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki * g.dil) -
                                              static_cast<std::ptrdiff_t>(g.pad);
                    T* row = dst + oy * g.ow;
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
                        std::fill(row, row + g.ow, T(0));
                        continue;
                    }
                    const T* src = img + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
                    std::fill(row, row + lo, T(0));
                    if (g.stride == 1) {
                        std::copy(src + (x0 + static_cast<std::ptrdiff_t>(lo)), src + (x0 + static_cast<std::ptrdiff_t>(hi)),
                                  row + lo);
                    } else {
                        for (std::size_t ox = lo; ox < hi; ++ox) {
                            row[ox] = src[static_cast<std::ptrdiff_t>(ox * g.stride) + x0];
                        }
                    }
                    std::fill(row + hi, row + g.ow, T(0));
                }
            }
        }
    }
}

// Scatter-add inverse of im2col.
template <typename T>
void col2im(const T* col, const Window& g, T* img) {
    const auto P = g.cols();
    for (std::size_t c = 0; c < g.channels; ++c) {
        for (std::size_t ki = 0; ki < g.kh; ++ki) {
            for (std::size_t kj = 0; kj < g.kw; ++kj) {
                const T* src = col + ((c * g.kh + ki) * g.kw + kj) * P;
                const auto [lo, hi] = valid_cols(g, kj * g.dil);
                const std::ptrdiff_t x0 = static_cast<std::ptrdiff_t>(kj * g.dil) - static_cast<std::ptrdiff_t>(g.pad);
                for (std::size_t oy = 0; oy < g.oh; ++oy) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki * g.dil) -
                                              static_cast<std::ptrdiff_t>(g.pad);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
                    T* dst = img + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
                    const T* row = src + oy * g.ow;
                    if (g.stride == 1) {
                        for (std::size_t ox = lo; ox < hi; ++ox) dst[static_cast<std::ptrdiff_t>(ox) + x0] += row[ox];
                    } else {
                        for (std::size_t ox = lo; ox < hi; ++ox) dst[static_cast<std::ptrdiff_t>(ox * g.stride) + x0] += row[ox];
                    }
                }
            }
        }
    }
}

std::size_t conv_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad, std::size_t dil) {
    const std::ptrdiff_t span = static_cast<std::ptrdiff_t>(in + 2 * pad) -
                                static_cast<std::ptrdiff_t>(dil * (k - 1)) - 1;
    if (span < 0) return 0;
    return static_cast<std::size_t>(span) / stride + 1;
}

template <typename T>
void check_bias(const Tensor<T>& bias, std::size_t out, const char* op) {
    if (bias.defined() && bias.shape() != Shape{1, out, 1, 1}) {
        throw ShapeError(std::string(op) + ": bias " + bias.shape().str() + " expected (1," + std::to_string(out) +
                         ",1,1)");
    }
}

template <typename T>
Tensor<T> he_normal(Shape shape, std::size_t fan_in, std::uint64_t seed) {
    return Tensor<T>::normal(shape, 0.0, std::sqrt(2.0 / static_cast<double>(fan_in)), seed, true);
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, std::size_t stride,
                 std::size_t padding, std::size_t dilation) {
    const Shape xs = x.shape();
    const Shape ws = weight.shape();
    if (stride == 0 || dilation == 0) throw ContractError("conv2d: stride and dilation must be positive");
    if (xs.c != ws.c) {
        throw ShapeError("conv2d: input " + xs.str() + " has " + std::to_string(xs.c) + " channels, weight " +
                         ws.str() + " expects " + std::to_string(ws.c));
    }
    check_bias(bias, ws.n, "conv2d");
    const Window g{xs.c, xs.h, xs.w, ws.h, ws.w, stride, padding, dilation,
                   conv_extent(xs.h, ws.h, stride, padding, dilation), conv_extent(xs.w, ws.w, stride, padding, dilation)};
    if (g.oh < 1 || g.ow < 1) {
        throw ShapeError("conv2d: non-positive output extent for input " + xs.str() + " and kernel " + ws.str());
    }
    const Shape os{xs.n, ws.n, g.oh, g.ow};
    std::vector<T> out(os.numel());
    std::vector<T> cols(g.rows() * g.cols());
    const ConstMatMap<T> W(weight.data().data(), static_cast<Eigen::Index>(ws.n), static_cast<Eigen::Index>(g.rows()));
    const std::size_t in_per = xs.c * xs.spatial();
    const std::size_t out_per = os.c * os.spatial();
    for (std::size_t n = 0; n < xs.n; ++n) {
        im2col(x.data().data() + n * in_per, g, cols.data());
        const ConstMatMap<T> C(cols.data(), static_cast<Eigen::Index>(g.rows()), static_cast<Eigen::Index>(g.cols()));
        MatMap<T> O(out.data() + n * out_per, static_cast<Eigen::Index>(ws.n), static_cast<Eigen::Index>(g.cols()));
        O.noalias() = W * C;
        if (bias.defined()) {
            const auto b = bias.data();
            for (std::size_t o = 0; o < ws.n; ++o) O.row(static_cast<Eigen::Index>(o)).array() += b[o];
        }
    }

    auto ix = x.impl();
    auto iw = weight.impl();
    auto ib = bias.defined() ? bias.impl() : nullptr;
    std::vector<Tensor<T>> inputs{x, weight};
    if (bias.defined()) inputs.push_back(bias);
    return autograd::make_result<T>(
        os, std::move(out), "conv2d", inputs, [ix, iw, ib, g, xs, os](std::span<const T> grad, std::span<const T>) {
            const auto K = static_cast<Eigen::Index>(g.rows());
            const auto P = static_cast<Eigen::Index>(g.cols());
            const auto O = static_cast<Eigen::Index>(os.c);
            const std::size_t in_per = xs.c * xs.spatial();
            const std::size_t out_per = os.c * os.spatial();
            std::vector<T> cols(g.rows() * g.cols());
            const ConstMatMap<T> W(iw->data.data(), O, K);
            for (std::size_t n = 0; n < xs.n; ++n) {
                const ConstMatMap<T> G(grad.data() + n * out_per, O, P);
                if (iw->requires_grad) {
                    im2col(ix->data.data() + n * in_per, g, cols.data());
                    const ConstMatMap<T> C(cols.data(), K, P);
                    MatMap<T> dW(iw->grad_buffer().data(), O, K);
                    dW.noalias() += G * C.transpose();
                }
                if (ib && ib->requires_grad) {
                    auto& db = ib->grad_buffer();
                    // Plain loop: Eigen's vectorised sum peels by address, which breaks run-to-run identity.
                    for (Eigen::Index o = 0; o < O; ++o) {
                        T acc = 0;
                        for (Eigen::Index i = 0; i < P; ++i) acc += G(o, i);
                        db[static_cast<std::size_t>(o)] += acc;
                    }
                }
                if (ix->requires_grad) {
                    MatMap<T> dC(cols.data(), K, P);
                    dC.noalias() = W.transpose() * G;
                    col2im(cols.data(), g, ix->grad_buffer().data() + n * in_per);
                }
            }
        });
}

template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, std::size_t stride,
                           std::size_t padding) {
    const Shape xs = x.shape();
    const Shape ws = weight.shape();  // (in, out, kh, kw)
    if (stride == 0) throw ContractError("conv_transpose2d: stride must be positive");
    if (xs.c != ws.n) {
        throw ShapeError("conv_transpose2d: input " + xs.str() + " vs weight " + ws.str() + " channel mismatch");
    }
    check_bias(bias, ws.c, "conv_transpose2d");
    const std::ptrdiff_t oh = static_cast<std::ptrdiff_t>(stride * (xs.h - 1) + ws.h) - 2 * static_cast<std::ptrdiff_t>(padding);
    const std::ptrdiff_t ow = static_cast<std::ptrdiff_t>(stride * (xs.w - 1) + ws.w) - 2 * static_cast<std::ptrdiff_t>(padding);
    if (xs.h == 0 || xs.w == 0 || oh < 1 || ow < 1) {
        throw ShapeError("conv_transpose2d: non-positive output extent for input " + xs.str());
    }
    const Shape os{xs.n, ws.c, static_cast<std::size_t>(oh), static_cast<std::size_t>(ow)};
    // The window runs over the output image; its columns are the input pixels.
    const Window g{os.c, os.h, os.w, ws.h, ws.w, stride, padding, 1, xs.h, xs.w};
    std::vector<T> out(os.numel(), T(0));
    std::vector<T> cols(g.rows() * g.cols());
    const auto K = static_cast<Eigen::Index>(g.rows());
    const auto P = static_cast<Eigen::Index>(g.cols());
    const auto Cin = static_cast<Eigen::Index>(xs.c);
    const ConstMatMap<T> W(weight.data().data(), Cin, K);
    const std::size_t in_per = xs.c * xs.spatial();
    const std::size_t out_per = os.c * os.spatial();
    for (std::size_t n = 0; n < xs.n; ++n) {
        const ConstMatMap<T> X(x.data().data() + n * in_per, Cin, P);
        MatMap<T> C(cols.data(), K, P);
        C.noalias() = W.transpose() * X;
        col2im(cols.data(), g, out.data() + n * out_per);
        if (bias.defined()) {
            const auto b = bias.data();
            T* o = out.data() + n * out_per;
            for (std::size_t c = 0; c < os.c; ++c) {
                for (std::size_t i = 0; i < os.spatial(); ++i) o[c * os.spatial() + i] += b[c];
            }
        }
    }

    auto ix = x.impl();
    auto iw = weight.impl();
    auto ib = bias.defined() ? bias.impl() : nullptr;
    std::vector<Tensor<T>> inputs{x, weight};
    if (bias.defined()) inputs.push_back(bias);
    return autograd::make_result<T>(
        os, std::move(out), "conv_transpose2d", inputs,
        [ix, iw, ib, g, xs, os](std::span<const T> grad, std::span<const T>) {
            const auto K = static_cast<Eigen::Index>(g.rows());
            const auto P = static_cast<Eigen::Index>(g.cols());
            const auto Cin = static_cast<Eigen::Index>(xs.c);
            const std::size_t in_per = xs.c * xs.spatial();
            const std::size_t out_per = os.c * os.spatial();
            std::vector<T> cols(g.rows() * g.cols());
            const ConstMatMap<T> W(iw->data.data(), Cin, K);
            for (std::size_t n = 0; n < xs.n; ++n) {
                const T* gn = grad.data() + n * out_per;
                im2col(gn, g, cols.data());
                const ConstMatMap<T> C(cols.data(), K, P);
                if (ix->requires_grad) {
                    MatMap<T> dX(ix->grad_buffer().data() + n * in_per, Cin, P);
                    dX.noalias() += W * C;
                }
                if (iw->requires_grad) {
                    const ConstMatMap<T> X(ix->data.data() + n * in_per, Cin, P);
                    MatMap<T> dW(iw->grad_buffer().data(), Cin, K);
                    dW.noalias() += X * C.transpose();
                }
                if (ib && ib->requires_grad) {
                    auto& db = ib->grad_buffer();
                    for (std::size_t c = 0; c < os.c; ++c) {
                        T acc = 0;
                        for (std::size_t i = 0; i < os.spatial(); ++i) acc += gn[c * os.spatial() + i];
                        db[c] += acc;
                    }
                }
            }
        });
}

template <typename T>
Tensor<T> maxpool2x2(const Tensor<T>& x) {
    const Shape s = x.shape();
    if (s.h % 2 != 0 || s.w % 2 != 0) throw ShapeError("maxpool2x2 needs even extents, got " + s.str());
    const Shape o{s.n, s.c, s.h / 2, s.w / 2};
    std::vector<T> out(o.numel());
    std::vector<std::uint32_t> argmax(o.numel());
    const auto xd = x.data();
    for (std::size_t p = 0; p < s.n * s.c; ++p) {
        const std::size_t src = p * s.spatial();
        for (std::size_t i = 0; i < o.h; ++i) {
            for (std::size_t j = 0; j < o.w; ++j) {
                const std::size_t cand[4] = {src + 2 * i * s.w + 2 * j, src + 2 * i * s.w + 2 * j + 1,
                                             src + (2 * i + 1) * s.w + 2 * j, src + (2 * i + 1) * s.w + 2 * j + 1};
                std::size_t best = cand[0];
                for (std::size_t k = 1; k < 4; ++k) {
                    if (xd[cand[k]] > xd[best]) best = cand[k];
                }
                const std::size_t dst = p * o.spatial() + i * o.w + j;
                out[dst] = xd[best];
                argmax[dst] = static_cast<std::uint32_t>(best);
            }
        }
    }
    auto ix = x.impl();
    return autograd::make_result<T>(o, std::move(out), "maxpool2x2", {x},
                                    [ix, argmax = std::move(argmax)](std::span<const T> g, std::span<const T>) {
                                        auto& dx = ix->grad_buffer();
                                        for (std::size_t i = 0; i < g.size(); ++i) dx[argmax[i]] += g[i];
                                    });
}

template <typename T>
Tensor<T> batchnorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, std::vector<T>& running_mean,
                    std::vector<T>& running_var, double momentum, double eps, Mode mode) {
    const Shape s = x.shape();
    const Shape ps{1, s.c, 1, 1};
    if (gamma.shape() != ps || beta.shape() != ps || running_mean.size() != s.c || running_var.size() != s.c) {
        throw ShapeError("batchnorm: parameters do not match input " + s.str());
    }
    const std::size_t hw = s.spatial();
    const std::size_t count = s.n * hw;
    std::vector<T> mean(s.c), inv_std(s.c);
    if (mode == Mode::train) {
        if (count < 2) throw ContractError("batchnorm: train mode needs batch*H*W >= 2, got " + s.str());
        for (std::size_t c = 0; c < s.c; ++c) {
            double acc = 0.0;
            for (std::size_t n = 0; n < s.n; ++n) {
                const T* p = x.data().data() + (n * s.c + c) * hw;
                for (std::size_t i = 0; i < hw; ++i) acc += p[i];
            }
            const double mu = acc / static_cast<double>(count);
            double sq = 0.0;
            for (std::size_t n = 0; n < s.n; ++n) {
                const T* p = x.data().data() + (n * s.c + c) * hw;
                for (std::size_t i = 0; i < hw; ++i) {
                    const double d = p[i] - mu;
                    sq += d * d;
                }
            }
            const double var = sq / static_cast<double>(count);
            mean[c] = static_cast<T>(mu);
            inv_std[c] = static_cast<T>(1.0 / std::sqrt(var + eps));
            const double unbiased = sq / static_cast<double>(count - 1);
            running_mean[c] = static_cast<T>((1.0 - momentum) * running_mean[c] + momentum * mu);
            running_var[c] = static_cast<T>((1.0 - momentum) * running_var[c] + momentum * unbiased);
        }
    } else {
        for (std::size_t c = 0; c < s.c; ++c) {
            mean[c] = running_mean[c];
            inv_std[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(running_var[c]) + eps));
        }
    }

    std::vector<T> out(s.numel());
    std::vector<T> xhat(s.numel());
    const auto xd = x.data();
    const auto gd = gamma.data();
    const auto bd = beta.data();
    for (std::size_t n = 0; n < s.n; ++n) {
        for (std::size_t c = 0; c < s.c; ++c) {
            const std::size_t base = (n * s.c + c) * hw;
            for (std::size_t i = 0; i < hw; ++i) {
                const T h = (xd[base + i] - mean[c]) * inv_std[c];
                xhat[base + i] = h;
                out[base + i] = h * gd[c] + bd[c];
            }
        }
    }

    auto ix = x.impl();
    auto ig = gamma.impl();
    auto ibeta = beta.impl();
    const bool train = mode == Mode::train;
    return autograd::make_result<T>(
        s, std::move(out), "batchnorm", {x, gamma, beta},
        [ix, ig, ibeta, s, hw, count, train, inv_std = std::move(inv_std), xhat = std::move(xhat)](
            std::span<const T> g, std::span<const T>) {
            for (std::size_t c = 0; c < s.c; ++c) {
                double sum_g = 0.0, sum_gx = 0.0;
                for (std::size_t n = 0; n < s.n; ++n) {
                    const std::size_t base = (n * s.c + c) * hw;
                    for (std::size_t i = 0; i < hw; ++i) {
                        sum_g += g[base + i];
                        sum_gx += static_cast<double>(g[base + i]) * xhat[base + i];
                    }
                }
                if (ig->requires_grad) ig->grad_buffer()[c] += static_cast<T>(sum_gx);
                if (ibeta->requires_grad) ibeta->grad_buffer()[c] += static_cast<T>(sum_g);
                if (!ix->requires_grad) continue;
                auto& dx = ix->grad_buffer();
                const T gam = ig->data[c];
                const T k = gam * inv_std[c];
                if (train) {
                    const T mean_g = static_cast<T>(sum_g / static_cast<double>(count));
                    const T mean_gx = static_cast<T>(sum_gx / static_cast<double>(count));
                    for (std::size_t n = 0; n < s.n; ++n) {
                        const std::size_t base = (n * s.c + c) * hw;
                        for (std::size_t i = 0; i < hw; ++i) {
                            dx[base + i] += k * (g[base + i] - mean_g - xhat[base + i] * mean_gx);
                        }
                    }
                } else {
                    for (std::size_t n = 0; n < s.n; ++n) {
                        const std::size_t base = (n * s.c + c) * hw;
                        for (std::size_t i = 0; i < hw; ++i) dx[base + i] += k * g[base + i];
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------

template <typename T>
Conv2d<T>::Conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride_, std::size_t padding_,
                  std::size_t dilation_, std::uint64_t seed, bool with_bias)
    : weight(he_normal<T>({out, in, kernel, kernel}, in * kernel * kernel, derive_key(seed, 1))),
      stride(stride_),
      padding(padding_),
      dilation(dilation_) {
    if (with_bias) bias = Tensor<T>::zeros({1, out, 1, 1}, true);
}

template <typename T>
std::pair<std::size_t, std::size_t> Conv2d<T>::output_extent(std::size_t h, std::size_t w) const {
    const std::size_t oh = conv_extent(h, kernel(), stride, padding, dilation);
    const std::size_t ow = conv_extent(w, weight.shape().w, stride, padding, dilation);
    if (oh < 1 || ow < 1) throw ShapeError("conv2d: non-positive output extent");
    return {oh, ow};
}

template <typename T>
void Conv2d<T>::parameters(const std::string& prefix, NamedTensors<T>& out) const {
    out.push_back({prefix + ".weight", weight});
    if (bias.defined()) out.push_back({prefix + ".bias", bias});
}

template <typename T>
ConvTranspose2d<T>::ConvTranspose2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride_,
                                    std::size_t padding_, std::uint64_t seed)
    : weight(he_normal<T>({in, out, kernel, kernel}, in * kernel * kernel / (stride_ * stride_),
                          derive_key(seed, 1))),
      bias(Tensor<T>::zeros({1, out, 1, 1}, true)),
      stride(stride_),
      padding(padding_) {}

template <typename T>
void ConvTranspose2d<T>::parameters(const std::string& prefix, NamedTensors<T>& out) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
}

template <typename T>
BatchNorm2d<T>::BatchNorm2d(std::size_t channels)
    : gamma(Tensor<T>::constant({1, channels, 1, 1}, 1.0, true)),
      beta(Tensor<T>::zeros({1, channels, 1, 1}, true)),
      running_mean(channels, T(0)),
      running_var(channels, T(1)) {}

template <typename T>
void BatchNorm2d<T>::parameters(const std::string& prefix, NamedTensors<T>& out) const {
    out.push_back({prefix + ".gamma", gamma});
    out.push_back({prefix + ".beta", beta});
}

template <typename T>
void BatchNorm2d<T>::buffers(const std::string& prefix, NamedTensors<T>& out) const {
    const Shape s{1, running_mean.size(), 1, 1};
    out.push_back({prefix + ".running_mean", Tensor<T>::from_data(s, running_mean)});
    out.push_back({prefix + ".running_var", Tensor<T>::from_data(s, running_var)});
}

template <typename T>
void BatchNorm2d<T>::load_buffer(const std::string& which, std::span<const T> values) {
    auto& dst = which == "running_mean" ? running_mean : running_var;
    if (which != "running_mean" && which != "running_var") throw ContractError("unknown batchnorm buffer " + which);
    if (values.size() != dst.size()) throw ShapeError("batchnorm buffer " + which + " size mismatch");
    dst.assign(values.begin(), values.end());
}

template <typename T>
ConvLstmCell<T>::ConvLstmCell(std::size_t in, std::size_t hid, std::uint64_t seed)
    : in_channels(in), hidden(hid) {
    // fan-in of each gate covers both the input and the hidden kernel
    const std::size_t fan_in = (in + hid) * 9;
    const Shape fs{hid, in, 3, 3};
    const Shape hs{hid, hid, 3, 3};
    const Shape ps{1, hid, 1, 1};
    std::uint64_t k = 0;
    for (auto* w : {&w_fi, &w_ff, &w_fc, &w_fo}) *w = he_normal<T>(fs, fan_in, derive_key(seed, ++k));
    for (auto* w : {&w_hi, &w_hf, &w_hc, &w_ho}) *w = he_normal<T>(hs, fan_in, derive_key(seed, ++k));
    for (auto* w : {&w_ci, &w_cf, &w_co}) *w = Tensor<T>::zeros(ps, true);
    b_i = Tensor<T>::zeros(ps, true);
    b_f = Tensor<T>::constant(ps, 1.0, true);
    b_c = Tensor<T>::zeros(ps, true);
    b_o = Tensor<T>::zeros(ps, true);
}

template <typename T>
typename ConvLstmCell<T>::State ConvLstmCell<T>::zero_state(std::size_t batch, std::size_t height,
                                                            std::size_t width) const {
    return {Tensor<T>::zeros({batch, hidden, height, width}), Tensor<T>::zeros({batch, hidden, height, width})};
}

template <typename T>
typename ConvLstmCell<T>::State ConvLstmCell<T>::step(const Tensor<T>& input, const State& prev) const {
    const Shape is = input.shape();
    const Shape hs{is.n, hidden, is.h, is.w};
    if (is.c != in_channels) {
        throw ShapeError("convlstm_step: input " + is.str() + " expects " + std::to_string(in_channels) + " channels");
    }
    if (prev.h.shape() != hs || prev.c.shape() != hs) {
        throw ShapeError("convlstm_step: state " + prev.h.shape().str() + "/" + prev.c.shape().str() +
                         " not congruent with " + hs.str());
    }
    // The eight gate convolutions run as one: [F, H] against the stacked
    // kernels [[W_Fi W_hi]; [W_Ff W_hf]; [W_Fc W_hc]; [W_Fo W_ho]].
    const auto w_input = concat<T>({w_fi, w_ff, w_fc, w_fo}, 0);
    const auto w_hidden = concat<T>({w_hi, w_hf, w_hc, w_ho}, 0);
    const auto kernel = concat<T>({w_input, w_hidden}, 1);
    const auto bias = concat<T>({b_i, b_f, b_c, b_o}, 1);
    const auto gates = conv2d(concat<T>({input, prev.h}, 1), kernel, bias, 1, 1, 1);

    const auto gi = slice_channels(gates, 0, hidden);
    const auto gf = slice_channels(gates, hidden, hidden);
    const auto gc = slice_channels(gates, 2 * hidden, hidden);
    const auto go = slice_channels(gates, 3 * hidden, hidden);

    const auto i = sigmoid(add(gi, channel_scale(prev.c, w_ci)));
    const auto f = sigmoid(add(gf, channel_scale(prev.c, w_cf)));
    const auto c = add(hadamard(f, prev.c), hadamard(i, tanh(gc)));
    const auto o = sigmoid(add(go, channel_scale(c, w_co)));
    const auto h = hadamard(o, tanh(c));
    return {h, c};
}

template <typename T>
void ConvLstmCell<T>::parameters(const std::string& prefix, NamedTensors<T>& out) const {
    const std::pair<const char*, const Tensor<T>*> items[] = {
        {"w_fi", &w_fi}, {"w_hi", &w_hi}, {"w_ci", &w_ci}, {"b_i", &b_i}, {"w_ff", &w_ff}, {"w_hf", &w_hf},
        {"w_cf", &w_cf}, {"b_f", &b_f},   {"w_fc", &w_fc}, {"w_hc", &w_hc}, {"b_c", &b_c},   {"w_fo", &w_fo},
        {"w_ho", &w_ho}, {"w_co", &w_co}, {"b_o", &b_o}};
    for (const auto& [name, t] : items) out.push_back({prefix + "." + name, *t});
}

template <typename T>
AttentionGate<T>::AttentionGate(std::size_t skip_channels, std::size_t gating_channels, std::uint64_t seed) {
    const std::size_t inter = std::max<std::size_t>(1, skip_channels / 2);
    query = Conv2d<T>(gating_channels, inter, 1, 1, 0, 1, derive_key(seed, 1));
    key = Conv2d<T>(skip_channels, inter, 1, 1, 0, 1, derive_key(seed, 2), false);
    psi = Conv2d<T>(inter, 1, 1, 1, 0, 1, derive_key(seed, 3));
}

template <typename T>
Tensor<T> AttentionGate<T>::coefficients(const Tensor<T>& skip, const Tensor<T>& gating) const {
    const Shape a = skip.shape();
    const Shape b = gating.shape();
    if (a.n != b.n || a.h != b.h || a.w != b.w) {
        throw ShapeError("attention_gate: skip " + a.str() + " and gating " + b.str() + " not spatially congruent");
    }
    return sigmoid(psi.forward(relu(add(query.forward(gating), key.forward(skip)))));
}

template <typename T>
Tensor<T> AttentionGate<T>::forward(const Tensor<T>& skip, const Tensor<T>& gating) const {
    return spatial_scale(skip, coefficients(skip, gating));
}

template <typename T>
void AttentionGate<T>::parameters(const std::string& prefix, NamedTensors<T>& out) const {
    query.parameters(prefix + ".query", out);
    key.parameters(prefix + ".key", out);
    psi.parameters(prefix + ".psi", out);
}

#define DONET_INSTANTIATE_NN(T)                                                                                 \
    template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t, std::size_t,   \
                              std::size_t);                                                                     \
    template Tensor<T> conv_transpose2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t,      \
                                        std::size_t);                                                           \
    template Tensor<T> maxpool2x2(const Tensor<T>&);                                                            \
    template Tensor<T> batchnorm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::vector<T>&,         \
                                 std::vector<T>&, double, double, Mode);                                        \
    template struct Conv2d<T>;                                                                                  \
    template struct ConvTranspose2d<T>;                                                                         \
    template struct BatchNorm2d<T>;                                                                             \
    template struct ConvLstmCell<T>;                                                                            \
    template struct AttentionGate<T>;

DONET_INSTANTIATE_NN(float)
DONET_INSTANTIATE_NN(double)

}  // namespace donet
