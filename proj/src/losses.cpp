#include "donet/losses.hpp"

#include <algorithm>
#include <cmath>

#include "donet/ops.hpp"

namespace donet {

LossKind parse_loss_kind(const std::string& name) {
    if (name == "dl") return LossKind::dl;
    if (name == "tl") return LossKind::tl;
    if (name == "fl") return LossKind::fl;
    if (name == "ftl") return LossKind::ftl;
    throw ConfigError("unknown loss '" + name + "' (expected dl, tl, fl or ftl)");
}

std::string to_string(LossKind kind) {
    switch (kind) {
        case LossKind::dl: return "dl";
        case LossKind::tl: return "tl";
        case LossKind::fl: return "fl";
        case LossKind::ftl: return "ftl";
    }
    return "?";
}

void LossParams::validate() const {
    if (!(epsilon > 0)) throw ConfigError("epsilon must be > 0");
    if (!(alpha >= 0) || !(beta >= 0)) throw ConfigError("alpha and beta must be >= 0");
    if (!(gamma > 0)) throw ConfigError("gamma must be > 0");
    if (!(focal_gamma >= 0)) throw ConfigError("focal_gamma must be >= 0");
    if (!(focal_alpha >= 0 && focal_alpha <= 1)) throw ConfigError("focal_alpha must lie in [0, 1]");
}

namespace {

template <typename T>
void check_pair(const Tensor<T>& yhat, const Tensor<T>& y, const char* op) {
    if (yhat.shape() != y.shape()) {
        throw ShapeError(std::string(op) + ": prediction " + yhat.shape().str() + " vs target " + y.shape().str());
    }
    for (T v : y.data()) {
        if (v != T(0) && v != T(1)) throw ContractError(std::string(op) + ": target mask is not binary");
    }
}

// Scalar loss whose gradient is dL/dyhat_p = scale * local[p].
template <typename T>
Tensor<T> scalar_loss(const Tensor<T>& yhat, double value, std::vector<double> local, const char* op) {
    auto ip = yhat.impl();
    return autograd::make_result<T>(scalar_shape, {static_cast<T>(value)}, op, {yhat},
                                    [ip, local = std::move(local)](std::span<const T> g, std::span<const T>) {
                                        auto& dst = ip->grad_buffer();
                                        const double go = g[0];
                                        for (std::size_t i = 0; i < dst.size(); ++i) {
                                            dst[i] += static_cast<T>(go * local[i]);
                                        }
                                    });
}

struct TverskyTerms {
    double value;
    std::vector<double> grad;  // dTI/dyhat
};

template <typename T>
TverskyTerms tversky_terms(const Tensor<T>& yhat, const Tensor<T>& y, double alpha, double beta, double eps) {
    const auto p = yhat.data();
    const auto t = y.data();
    double tp = 0, fn = 0, fp = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        tp += static_cast<double>(p[i]) * t[i];
        fn += (1.0 - p[i]) * t[i];
        fp += static_cast<double>(p[i]) * (1.0 - t[i]);
    }
    const double num = tp + eps;
    const double den = tp + alpha * fn + beta * fp + eps;
    TverskyTerms out{num / den, std::vector<double>(p.size())};
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double yi = t[i];
        const double dden = yi - alpha * yi + beta * (1.0 - yi);
        out.grad[i] = (yi * den - num * dden) / (den * den);
    }
    return out;
}

}  // namespace

template <typename T>
Tensor<T> dice_loss(const Tensor<T>& yhat, const Tensor<T>& y, double epsilon) {
    check_pair(yhat, y, "dice_loss");
    const auto p = yhat.data();
    const auto t = y.data();
    double inter = 0, total = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        inter += static_cast<double>(p[i]) * t[i];
        total += static_cast<double>(p[i]) + t[i];
    }
    const double num = inter + epsilon;
    const double den = total + epsilon;
    std::vector<double> local(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) local[i] = -2.0 * (t[i] * den - num) / (den * den);
    return scalar_loss(yhat, 1.0 - 2.0 * num / den, std::move(local), "dice_loss");
}

template <typename T>
Tensor<T> tversky_index(const Tensor<T>& yhat, const Tensor<T>& y, double alpha, double beta, double epsilon) {
    check_pair(yhat, y, "tversky_index");
    auto terms = tversky_terms(yhat, y, alpha, beta, epsilon);
    return scalar_loss(yhat, terms.value, std::move(terms.grad), "tversky_index");
}

template <typename T>
Tensor<T> tversky_loss(const Tensor<T>& yhat, const Tensor<T>& y, const LossParams& params) {
    check_pair(yhat, y, "tversky_loss");
    auto terms = tversky_terms(yhat, y, params.alpha, params.beta, params.epsilon);
    for (auto& g : terms.grad) g = -g;
    return scalar_loss(yhat, 1.0 - terms.value, std::move(terms.grad), "tversky_loss");
}

template <typename T>
Tensor<T> focal_tversky_loss(const Tensor<T>& yhat, const Tensor<T>& y, const LossParams& params) {
    check_pair(yhat, y, "focal_tversky_loss");
    if (!(params.gamma > 0)) throw ContractError("focal_tversky_loss: gamma must be > 0");
    auto terms = tversky_terms(yhat, y, params.alpha, params.beta, params.epsilon);
    const double exponent = 1.0 / params.gamma;
    const double gap = 1.0 - terms.value;
    const bool clamped = gap < kFocalTverskyFloor;
    const double u = clamped ? kFocalTverskyFloor : gap;
    const double value = std::pow(u, exponent);
    // d/dyhat u^e = e u^(e-1) * (-dTI/dyhat); zero on the clamped branch.
    const double outer = clamped ? 0.0 : -exponent * std::pow(u, exponent - 1.0);
    for (auto& g : terms.grad) g *= outer;
    return scalar_loss(yhat, value, std::move(terms.grad), "focal_tversky_loss");
}

template <typename T>
Tensor<T> focal_loss(const Tensor<T>& yhat, const Tensor<T>& y, double focal_gamma, double focal_alpha) {
    check_pair(yhat, y, "focal_loss");
    const auto p = yhat.data();
    const auto t = y.data();
    const double n = static_cast<double>(p.size());
    const double g = focal_gamma;
    const double a = focal_alpha;
    double acc = 0;
    std::vector<double> local(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double raw = p[i];
        const double q = std::clamp(raw, kFocalClamp, 1.0 - kFocalClamp);
        const bool inside = raw > kFocalClamp && raw < 1.0 - kFocalClamp;
        const double yi = t[i];
        const double pos = a * std::pow(1.0 - q, g) * yi * std::log(q);
        const double neg = (1.0 - a) * std::pow(q, g) * (1.0 - yi) * std::log(1.0 - q);
        acc += pos + neg;
        if (!inside) continue;
        double dpos = 0, dneg = 0;
        if (yi != 0) {
            const double mod = g == 0 ? 0.0 : g * std::pow(1.0 - q, g - 1.0) * std::log(q);
            dpos = a * yi * (-mod + std::pow(1.0 - q, g) / q);
        }
        if (yi != 1) {
            const double mod = g == 0 ? 0.0 : g * std::pow(q, g - 1.0) * std::log(1.0 - q);
            dneg = (1.0 - a) * (1.0 - yi) * (mod - std::pow(q, g) / (1.0 - q));
        }
        local[i] = -(dpos + dneg) / n;
    }
    return scalar_loss(yhat, -acc / n, std::move(local), "focal_loss");
}

template <typename T>
Tensor<T> loss(LossKind kind, const Tensor<T>& yhat, const Tensor<T>& y, const LossParams& params) {
    switch (kind) {
        case LossKind::dl: return dice_loss(yhat, y, params.epsilon);
        case LossKind::tl: return tversky_loss(yhat, y, params);
        case LossKind::fl: return focal_loss(yhat, y, params.focal_gamma, params.focal_alpha);
        case LossKind::ftl: return focal_tversky_loss(yhat, y, params);
    }
    throw ContractError("unknown loss kind");
}

template <typename T>
ObjectiveTerms<T> combined_objective(const ObjectiveConfig& cfg, const PredictionTriple<T>& triple,
                                     const Tensor<T>& y) {
    ObjectiveTerms<T> out;
    out.l1 = loss(cfg.l1_kind, triple.y1, y, cfg.params);
    out.lf = add(loss(cfg.l1_kind, triple.y_joint, y, cfg.params), loss(cfg.l2_kind, triple.y_joint, y, cfg.params));
    if (triple.dual) {
        out.l2 = loss(cfg.l2_kind, triple.y2, y, cfg.params);
        out.total = add(add(out.l1, out.l2), out.lf);
    } else {
        out.l2 = Tensor<T>::zeros(scalar_shape);
        out.total = add(out.l1, out.lf);
    }
    return out;
}

#define DONET_INSTANTIATE_LOSSES(T)                                                                           \
    template Tensor<T> dice_loss(const Tensor<T>&, const Tensor<T>&, double);                                 \
    template Tensor<T> tversky_index(const Tensor<T>&, const Tensor<T>&, double, double, double);             \
    template Tensor<T> tversky_loss(const Tensor<T>&, const Tensor<T>&, const LossParams&);                   \
    template Tensor<T> focal_tversky_loss(const Tensor<T>&, const Tensor<T>&, const LossParams&);             \
    template Tensor<T> focal_loss(const Tensor<T>&, const Tensor<T>&, double, double);                        \
    template Tensor<T> loss(LossKind, const Tensor<T>&, const Tensor<T>&, const LossParams&);                 \
    template ObjectiveTerms<T> combined_objective(const ObjectiveConfig&, const PredictionTriple<T>&,         \
                                                  const Tensor<T>&);

DONET_INSTANTIATE_LOSSES(float)
DONET_INSTANTIATE_LOSSES(double)

}  // namespace donet
