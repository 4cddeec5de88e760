#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "donet/tensor.hpp"

namespace donet {

// {0,1} pixel mask with tensor extents.
struct BinaryMask {
    Shape shape;
    std::vector<std::uint8_t> bits;

    std::size_t positives() const;
};

inline constexpr double kDefaultThreshold = 0.5;

// 1 iff value > threshold (strict, so 0.5 maps to background).
// Throws ContractError for values outside [0, 1].
template <typename T>
BinaryMask binarize(const Tensor<T>& probs, double threshold = kDefaultThreshold);

// Binary tensor of the same extents as `mask`.
template <typename T>
Tensor<T> to_tensor(const BinaryMask& mask);

struct ConfusionCounts {
    std::uint64_t tp = 0, tn = 0, fp = 0, fn = 0;

    std::uint64_t total() const { return tp + tn + fp + fn; }
    friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

struct SegmentationMetrics {
    double dsc = 0, ji = 0, recall = 0, precision = 0, accuracy = 0;
};

// Empty-set conventions: both masks empty -> dsc = ji = recall =
// precision = 1; otherwise an empty denominator yields 0.
ConfusionCounts confusion(const BinaryMask& sr, const BinaryMask& gt);
SegmentationMetrics metrics_from_counts(const ConfusionCounts& counts);

struct MetricsResult {
    ConfusionCounts counts;
    SegmentationMetrics metrics;
};

MetricsResult compute_metrics(const BinaryMask& sr, const BinaryMask& gt);

// Splits a (N,1,H,W) mask into N single-image masks.
std::vector<BinaryMask> split_batch(const BinaryMask& mask);

struct MetricsRow {
    std::string image;
    SegmentationMetrics metrics;
};

struct MetricsSummary {
    SegmentationMetrics mean;
    SegmentationMetrics stddev;  // population standard deviation
};

// Macro average over images.
MetricsSummary summarize(const std::vector<MetricsRow>& rows);

// Header `image,dsc,ji,recall,precision,accuracy`, one row per image, then
// MEAN and STD rows; six decimals.
void write_metrics_csv(std::ostream& os, const std::vector<MetricsRow>& rows);
std::string metrics_csv(const std::vector<MetricsRow>& rows);

}  // namespace donet
