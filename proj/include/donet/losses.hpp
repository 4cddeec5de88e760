#pragma once

#include <string>

#include "donet/model.hpp"
#include "donet/tensor.hpp"

namespace donet {

enum class LossKind { dl, tl, fl, ftl };

// "dl", "tl", "fl", "ftl"
LossKind parse_loss_kind(const std::string& name);
std::string to_string(LossKind kind);

struct LossParams {
    double epsilon = 1e-6;
    double alpha = 0.7;  // false-negative weight
    double beta = 0.3;   // false-positive weight
    double gamma = 0.75;
    double focal_gamma = 2.0;
    double focal_alpha = 0.25;

    void validate() const;
};

struct ObjectiveConfig {
    LossKind l1_kind = LossKind::dl;
    LossKind l2_kind = LossKind::ftl;
    LossParams params;
};

// Lower clamp on 1 - TI before the focal exponent.
inline constexpr double kFocalTverskyFloor = 1e-8;
// Probabilities are clamped into [kFocalClamp, 1 - kFocalClamp] before logs.
inline constexpr double kFocalClamp = 1e-7;

// All losses reduce over every pixel of the batch and return a (1,1,1,1)
// tensor differentiable with respect to `yhat`. `y` must be binary.

// 1 - 2 (sum yhat*y + eps) / (sum yhat + y + eps)
template <typename T>
Tensor<T> dice_loss(const Tensor<T>& yhat, const Tensor<T>& y, double epsilon);

// (TP + eps) / (TP + alpha*FN + beta*FP + eps) with soft counts.
template <typename T>
Tensor<T> tversky_index(const Tensor<T>& yhat, const Tensor<T>& y, double alpha, double beta, double epsilon);

// 1 - TI
template <typename T>
Tensor<T> tversky_loss(const Tensor<T>& yhat, const Tensor<T>& y, const LossParams& params);

// max(1 - TI, 1e-8)^(1/gamma)
template <typename T>
Tensor<T> focal_tversky_loss(const Tensor<T>& yhat, const Tensor<T>& y, const LossParams& params);

// Binary focal cross-entropy averaged over pixels.
template <typename T>
Tensor<T> focal_loss(const Tensor<T>& yhat, const Tensor<T>& y, double focal_gamma, double focal_alpha);

template <typename T>
Tensor<T> loss(LossKind kind, const Tensor<T>& yhat, const Tensor<T>& y, const LossParams& params);

template <typename T>
struct ObjectiveTerms {
    Tensor<T> total;
    Tensor<T> l1;
    Tensor<T> l2;  // zero scalar with a single decoder
    Tensor<T> lf;
};

// l1 = L1(y1), l2 = L2(y2), lf = L1(y_joint) + L2(y_joint), total = l1 + l2 + lf.
// With a single decoder the L2 term on y2 is dropped: total = l1 + lf.
template <typename T>
ObjectiveTerms<T> combined_objective(const ObjectiveConfig& cfg, const PredictionTriple<T>& triple,
                                     const Tensor<T>& y);

}  // namespace donet
