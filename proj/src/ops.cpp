#include "donet/ops.hpp"

#include <cmath>

namespace donet {

std::string to_string(Elementwise op) {
    switch (op) {
        case Elementwise::add: return "add";
        case Elementwise::hadamard: return "hadamard";
        case Elementwise::relu: return "relu";
        case Elementwise::sigmoid: return "sigmoid";
        case Elementwise::tanh: return "tanh";
    }
    return "?";
}

namespace {

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + a.shape().str() + " vs " + b.shape().str());
    }
}

template <typename T, typename F>
Tensor<T> unary(const Tensor<T>& x, const char* op, F forward, GradRule<T> rule) {
    const auto in = x.data();
    std::vector<T> out(in.size());
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = forward(in[i]);
    return autograd::make_result<T>(x.shape(), std::move(out), op, {x}, std::move(rule));
}

}  // namespace

template <typename T>
Tensor<T> elementwise(Elementwise op, const Tensor<T>& a, const Tensor<T>* b) {
    const bool binary = op == Elementwise::add || op == Elementwise::hadamard;
    if (binary && b == nullptr) throw ContractError(to_string(op) + " needs two operands");
    switch (op) {
        case Elementwise::add: return add(a, *b);
        case Elementwise::hadamard: return hadamard(a, *b);
        case Elementwise::relu: return relu(a);
        case Elementwise::sigmoid: return sigmoid(a);
        case Elementwise::tanh: return tanh(a);
    }
    throw ContractError("unknown elementwise op");
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "add");
    const auto x = a.data();
    const auto y = b.data();
    std::vector<T> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i];
    auto ia = a.impl();
    auto ib = b.impl();
    return autograd::make_result<T>(a.shape(), std::move(out), "add", {a, b},
                                    [ia, ib](std::span<const T> g, std::span<const T>) {
                                        for (auto* t : {ia.get(), ib.get()}) {
                                            if (!t->requires_grad) continue;
                                            auto& dst = t->grad_buffer();
                                            for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
                                        }
                                    });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "sub");
    const auto x = a.data();
    const auto y = b.data();
    std::vector<T> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - y[i];
    auto ia = a.impl();
    auto ib = b.impl();
    return autograd::make_result<T>(a.shape(), std::move(out), "sub", {a, b},
                                    [ia, ib](std::span<const T> g, std::span<const T>) {
                                        if (ia->requires_grad) {
                                            auto& dst = ia->grad_buffer();
                                            for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
                                        }
                                        if (ib->requires_grad) {
                                            auto& dst = ib->grad_buffer();
                                            for (std::size_t i = 0; i < g.size(); ++i) dst[i] -= g[i];
                                        }
                                    });
}

template <typename T>
Tensor<T> hadamard(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "hadamard");
    const auto x = a.data();
    const auto y = b.data();
    std::vector<T> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i];
    auto ia = a.impl();
    auto ib = b.impl();
    return autograd::make_result<T>(a.shape(), std::move(out), "hadamard", {a, b},
                                    [ia, ib](std::span<const T> g, std::span<const T>) {
                                        if (ia->requires_grad) {
                                            auto& dst = ia->grad_buffer();
                                            for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * ib->data[i];
                                        }
                                        if (ib->requires_grad) {
                                            auto& dst = ib->grad_buffer();
                                            for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * ia->data[i];
                                        }
                                    });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    auto ix = x.impl();
    return unary<T>(x, "relu", [](T v) { return v > T(0) ? v : T(0); },
                    [ix](std::span<const T> g, std::span<const T>) {
                        auto& dst = ix->grad_buffer();
                        // Subgradient 0 at the kink.
                        for (std::size_t i = 0; i < g.size(); ++i) {
                            if (ix->data[i] > T(0)) dst[i] += g[i];
                        }
                    });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    auto ix = x.impl();
    return unary<T>(
        x, "sigmoid",
        [](T v) {
            if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
            const T e = std::exp(v);
            return e / (T(1) + e);
        },
        [ix](std::span<const T> g, std::span<const T> s) {
            auto& dst = ix->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * s[i] * (T(1) - s[i]);
        });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& x) {
    auto ix = x.impl();
    return unary<T>(x, "tanh", [](T v) { return std::tanh(v); },
                    [ix](std::span<const T> g, std::span<const T> t) {
                        auto& dst = ix->grad_buffer();
                        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * (T(1) - t[i] * t[i]);
                    });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, double factor) {
    auto ix = x.impl();
    const T f = static_cast<T>(factor);
    return unary<T>(x, "scale", [f](T v) { return v * f; },
                    [ix, f](std::span<const T> g, std::span<const T>) {
                        auto& dst = ix->grad_buffer();
                        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * f;
                    });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    double acc = 0.0;
    for (T v : x.data()) acc += v;
    auto ix = x.impl();
    return autograd::make_result<T>(scalar_shape, {static_cast<T>(acc)}, "sum", {x},
                                    [ix](std::span<const T> g, std::span<const T>) {
                                        auto& dst = ix->grad_buffer();
                                        for (auto& d : dst) d += g[0];
                                    });
}

template <typename T>
Tensor<T> channel_scale(const Tensor<T>& x, const Tensor<T>& w) {
    const Shape s = x.shape();
    if (w.shape() != Shape{1, s.c, 1, 1}) {
        throw ShapeError("channel_scale: weight " + w.shape().str() + " does not fit input " + s.str());
    }
    const auto xd = x.data();
    const auto wd = w.data();
    const std::size_t hw = s.spatial();
    std::vector<T> out(xd.size());
    for (std::size_t n = 0; n < s.n; ++n) {
        for (std::size_t c = 0; c < s.c; ++c) {
            const std::size_t base = (n * s.c + c) * hw;
            for (std::size_t i = 0; i < hw; ++i) out[base + i] = xd[base + i] * wd[c];
        }
    }
    auto ix = x.impl();
    auto iw = w.impl();
    return autograd::make_result<T>(s, std::move(out), "channel_scale", {x, w},
                                    [ix, iw, s, hw](std::span<const T> g, std::span<const T>) {
                                        for (std::size_t n = 0; n < s.n; ++n) {
                                            for (std::size_t c = 0; c < s.c; ++c) {
                                                const std::size_t base = (n * s.c + c) * hw;
                                                if (ix->requires_grad) {
                                                    auto& dx = ix->grad_buffer();
                                                    const T wc = iw->data[c];
                                                    for (std::size_t i = 0; i < hw; ++i) dx[base + i] += g[base + i] * wc;
                                                }
                                                if (iw->requires_grad) {
                                                    double acc = 0.0;
                                                    for (std::size_t i = 0; i < hw; ++i) {
                                                        acc += static_cast<double>(g[base + i]) * ix->data[base + i];
                                                    }
                                                    iw->grad_buffer()[c] += static_cast<T>(acc);
                                                }
                                            }
                                        }
                                    });
}

template <typename T>
Tensor<T> spatial_scale(const Tensor<T>& x, const Tensor<T>& m) {
    const Shape s = x.shape();
    if (m.shape() != Shape{s.n, 1, s.h, s.w}) {
        throw ShapeError("spatial_scale: map " + m.shape().str() + " does not fit input " + s.str());
    }
    const auto xd = x.data();
    const auto md = m.data();
    const std::size_t hw = s.spatial();
    std::vector<T> out(xd.size());
    for (std::size_t n = 0; n < s.n; ++n) {
        for (std::size_t c = 0; c < s.c; ++c) {
            const std::size_t base = (n * s.c + c) * hw;
            for (std::size_t i = 0; i < hw; ++i) out[base + i] = xd[base + i] * md[n * hw + i];
        }
    }
    auto ix = x.impl();
    auto im = m.impl();
    return autograd::make_result<T>(s, std::move(out), "spatial_scale", {x, m},
                                    [ix, im, s, hw](std::span<const T> g, std::span<const T>) {
                                        for (std::size_t n = 0; n < s.n; ++n) {
                                            for (std::size_t c = 0; c < s.c; ++c) {
                                                const std::size_t base = (n * s.c + c) * hw;
                                                if (ix->requires_grad) {
                                                    auto& dx = ix->grad_buffer();
                                                    for (std::size_t i = 0; i < hw; ++i) {
                                                        dx[base + i] += g[base + i] * im->data[n * hw + i];
                                                    }
                                                }
                                                if (im->requires_grad) {
                                                    auto& dm = im->grad_buffer();
                                                    for (std::size_t i = 0; i < hw; ++i) {
                                                        dm[n * hw + i] += g[base + i] * ix->data[base + i];
                                                    }
                                                }
                                            }
                                        }
                                    });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
    if (parts.empty()) throw ContractError("concat of an empty list");
    if (axis != 0 && axis != 1) throw ContractError("concat supports axis 0 or 1");
    Shape out_shape = parts.front().shape();
    std::size_t total = 0;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        const bool ok = axis == 0 ? (s.c == out_shape.c && s.h == out_shape.h && s.w == out_shape.w)
                                  : (s.n == out_shape.n && s.h == out_shape.h && s.w == out_shape.w);
        if (!ok) {
            throw ShapeError("concat: " + s.str() + " incompatible with " + out_shape.str() + " on axis " +
                             std::to_string(axis));
        }
        total += axis == 0 ? s.n : s.c;
    }
    if (axis == 0) {
        out_shape.n = total;
    } else {
        out_shape.c = total;
    }

    // Both axes reduce to copying contiguous blocks: one block per part per
    // outer index (batch for axis 1, nothing for axis 0).
    const std::size_t outer = axis == 0 ? 1 : out_shape.n;
    std::vector<std::size_t> block(parts.size());
    for (std::size_t k = 0; k < parts.size(); ++k) block[k] = parts[k].numel() / outer;
    std::vector<T> out(out_shape.numel());
    std::size_t pos = 0;
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t k = 0; k < parts.size(); ++k) {
            const auto src = parts[k].data().subspan(o * block[k], block[k]);
            std::copy(src.begin(), src.end(), out.begin() + static_cast<std::ptrdiff_t>(pos));
            pos += block[k];
        }
    }

    std::vector<std::shared_ptr<TensorImpl<T>>> impls;
    for (const auto& p : parts) impls.push_back(p.impl());
    return autograd::make_result<T>(out_shape, std::move(out), "concat", parts,
                                    [impls, block, outer](std::span<const T> g, std::span<const T>) {
                                        std::size_t at = 0;
                                        for (std::size_t o = 0; o < outer; ++o) {
                                            for (std::size_t k = 0; k < impls.size(); ++k) {
                                                if (impls[k]->requires_grad) {
                                                    auto& dst = impls[k]->grad_buffer();
                                                    for (std::size_t i = 0; i < block[k]; ++i) {
                                                        dst[o * block[k] + i] += g[at + i];
                                                    }
                                                }
                                                at += block[k];
                                            }
                                        }
                                    });
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, std::size_t begin, std::size_t count) {
    const Shape s = x.shape();
    if (begin + count > s.c) {
        throw ShapeError("slice_channels: [" + std::to_string(begin) + "," + std::to_string(begin + count) +
                         ") out of range for " + s.str());
    }
    const Shape out_shape{s.n, count, s.h, s.w};
    const std::size_t hw = s.spatial();
    std::vector<T> out(out_shape.numel());
    const auto xd = x.data();
    for (std::size_t n = 0; n < s.n; ++n) {
        const auto src = xd.subspan((n * s.c + begin) * hw, count * hw);
        std::copy(src.begin(), src.end(), out.begin() + static_cast<std::ptrdiff_t>(n * count * hw));
    }
    auto ix = x.impl();
    return autograd::make_result<T>(out_shape, std::move(out), "slice_channels", {x},
                                    [ix, s, begin, count, hw](std::span<const T> g, std::span<const T>) {
                                        auto& dst = ix->grad_buffer();
                                        for (std::size_t n = 0; n < s.n; ++n) {
                                            const std::size_t off = (n * s.c + begin) * hw;
                                            for (std::size_t i = 0; i < count * hw; ++i) {
                                                dst[off + i] += g[n * count * hw + i];
                                            }
                                        }
                                    });
}

template <typename T>
Tensor<T> slice_batch(const Tensor<T>& x, std::size_t begin, std::size_t count) {
    const Shape s = x.shape();
    if (begin + count > s.n) throw ShapeError("slice_batch: range out of bounds for " + s.str());
    const Shape out_shape{count, s.c, s.h, s.w};
    const std::size_t per = s.c * s.spatial();
    const auto src = x.data().subspan(begin * per, count * per);
    std::vector<T> out(src.begin(), src.end());
    auto ix = x.impl();
    return autograd::make_result<T>(out_shape, std::move(out), "slice_batch", {x},
                                    [ix, begin, per](std::span<const T> g, std::span<const T>) {
                                        auto& dst = ix->grad_buffer();
                                        for (std::size_t i = 0; i < g.size(); ++i) dst[begin * per + i] += g[i];
                                    });
}

template <typename T>
Tensor<T> avgpool2x2(const Tensor<T>& x) {
    const Shape s = x.shape();
    if (s.h % 2 != 0 || s.w % 2 != 0) throw ShapeError("avgpool2x2 needs even extents, got " + s.str());
    const Shape o{s.n, s.c, s.h / 2, s.w / 2};
    std::vector<T> out(o.numel());
    const auto xd = x.data();
    for (std::size_t p = 0; p < s.n * s.c; ++p) {
        const T* src = xd.data() + p * s.spatial();
        T* dst = out.data() + p * o.spatial();
        for (std::size_t i = 0; i < o.h; ++i) {
            for (std::size_t j = 0; j < o.w; ++j) {
                const T* r0 = src + 2 * i * s.w + 2 * j;
                const T* r1 = r0 + s.w;
                dst[i * o.w + j] = (r0[0] + r0[1] + r1[0] + r1[1]) * T(0.25);
            }
        }
    }
    auto ix = x.impl();
    return autograd::make_result<T>(o, std::move(out), "avgpool2x2", {x},
                                    [ix, s, o](std::span<const T> g, std::span<const T>) {
                                        auto& dx = ix->grad_buffer();
                                        for (std::size_t p = 0; p < s.n * s.c; ++p) {
                                            for (std::size_t i = 0; i < o.h; ++i) {
                                                for (std::size_t j = 0; j < o.w; ++j) {
                                                    const T q = g[p * o.spatial() + i * o.w + j] * T(0.25);
                                                    const std::size_t b = p * s.spatial() + 2 * i * s.w + 2 * j;
                                                    dx[b] += q;
                                                    dx[b + 1] += q;
                                                    dx[b + s.w] += q;
                                                    dx[b + s.w + 1] += q;
                                                }
                                            }
                                        }
                                    });
}

#define DONET_INSTANTIATE_OPS(T)                                                                  \
    template Tensor<T> elementwise(Elementwise, const Tensor<T>&, const Tensor<T>*);              \
    template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                   \
    template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                   \
    template Tensor<T> hadamard(const Tensor<T>&, const Tensor<T>&);                              \
    template Tensor<T> relu(const Tensor<T>&);                                                    \
    template Tensor<T> sigmoid(const Tensor<T>&);                                                 \
    template Tensor<T> tanh(const Tensor<T>&);                                                    \
    template Tensor<T> scale(const Tensor<T>&, double);                                           \
    template Tensor<T> sum(const Tensor<T>&);                                                     \
    template Tensor<T> channel_scale(const Tensor<T>&, const Tensor<T>&);                         \
    template Tensor<T> spatial_scale(const Tensor<T>&, const Tensor<T>&);                         \
    template Tensor<T> concat(const std::vector<Tensor<T>>&, int);                                \
    template Tensor<T> slice_channels(const Tensor<T>&, std::size_t, std::size_t);                \
    template Tensor<T> slice_batch(const Tensor<T>&, std::size_t, std::size_t);                   \
    template Tensor<T> avgpool2x2(const Tensor<T>&);

DONET_INSTANTIATE_OPS(float)
DONET_INSTANTIATE_OPS(double)

}  // namespace donet
