#include "donet/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <sstream>

namespace donet {

std::size_t BinaryMask::positives() const {
    return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
}

template <typename T>
BinaryMask binarize(const Tensor<T>& probs, double threshold) {
    BinaryMask out{probs.shape(), std::vector<std::uint8_t>(probs.numel())};
    const auto d = probs.data();
    for (std::size_t i = 0; i < d.size(); ++i) {
        const double v = d[i];
        if (!(v >= 0.0 && v <= 1.0)) {
            throw ContractError("binarize: value " + std::to_string(v) + " at index " + std::to_string(i) +
                                " is outside [0, 1]");
        }
        out.bits[i] = v > threshold ? 1 : 0;
    }
    return out;
}

template <typename T>
Tensor<T> to_tensor(const BinaryMask& mask) {
    std::vector<T> data(mask.bits.begin(), mask.bits.end());
    return Tensor<T>::from_data(mask.shape, std::move(data));
}

ConfusionCounts confusion(const BinaryMask& sr, const BinaryMask& gt) {
    if (sr.shape != gt.shape || sr.bits.size() != gt.bits.size()) {
        throw ShapeError("compute_metrics: prediction " + sr.shape.str() + " vs ground truth " + gt.shape.str());
    }
    // Index tp/fp/fn/tn by the 2-bit code (sr << 1 | gt).
    std::uint64_t bins[4] = {0, 0, 0, 0};
    for (std::size_t i = 0; i < sr.bits.size(); ++i) {
        const unsigned a = sr.bits[i];
        const unsigned b = gt.bits[i];
        if (a > 1 || b > 1) throw ContractError("compute_metrics: masks must be binary");
        ++bins[(a << 1) | b];
    }
    return {bins[3], bins[0], bins[2], bins[1]};
}

SegmentationMetrics metrics_from_counts(const ConfusionCounts& c) {
    const auto ratio = [](double num, double den) { return den == 0 ? 0.0 : num / den; };
    const double tp = static_cast<double>(c.tp);
    const double gt = static_cast<double>(c.tp + c.fn);
    const double sr = static_cast<double>(c.tp + c.fp);
    const double uni = static_cast<double>(c.tp + c.fp + c.fn);
    SegmentationMetrics m;
    if (gt == 0 && sr == 0) {
        m.dsc = m.ji = m.recall = m.precision = 1.0;
    } else {
        m.dsc = 2.0 * tp / (gt + sr);
        m.ji = tp / uni;
        m.recall = ratio(tp, gt);
        m.precision = ratio(tp, sr);
    }
    m.accuracy = ratio(static_cast<double>(c.tp + c.tn), static_cast<double>(c.total()));
    return m;
}

MetricsResult compute_metrics(const BinaryMask& sr, const BinaryMask& gt) {
    const auto counts = confusion(sr, gt);
    return {counts, metrics_from_counts(counts)};
}

std::vector<BinaryMask> split_batch(const BinaryMask& mask) {
    const Shape s = mask.shape;
    const std::size_t per = s.c * s.h * s.w;
    std::vector<BinaryMask> out;
    for (std::size_t n = 0; n < s.n; ++n) {
        BinaryMask m{{1, s.c, s.h, s.w}, {}};
        m.bits.assign(mask.bits.begin() + static_cast<std::ptrdiff_t>(n * per),
                      mask.bits.begin() + static_cast<std::ptrdiff_t>((n + 1) * per));
        out.push_back(std::move(m));
    }
    return out;
}

namespace {

constexpr double SegmentationMetrics::*kFields[] = {&SegmentationMetrics::dsc, &SegmentationMetrics::ji,
                                                    &SegmentationMetrics::recall, &SegmentationMetrics::precision,
                                                    &SegmentationMetrics::accuracy};

void write_row(std::ostream& os, const std::string& label, const SegmentationMetrics& m) {
    os << label;
    char buf[32];
    for (auto field : kFields) {
        std::snprintf(buf, sizeof buf, ",%.6f", m.*field);
        os << buf;
    }
    os << '\n';
}

}  // namespace

MetricsSummary summarize(const std::vector<MetricsRow>& rows) {
    MetricsSummary s;
    if (rows.empty()) return s;
    const double n = static_cast<double>(rows.size());
    for (auto field : kFields) {
        double mean = 0;
        for (const auto& r : rows) mean += r.metrics.*field;
        mean /= n;
        double var = 0;
        for (const auto& r : rows) var += (r.metrics.*field - mean) * (r.metrics.*field - mean);
        s.mean.*field = mean;
        s.stddev.*field = std::sqrt(var / n);
    }
    return s;
}

void write_metrics_csv(std::ostream& os, const std::vector<MetricsRow>& rows) {
    os << "image,dsc,ji,recall,precision,accuracy\n";
    for (const auto& r : rows) write_row(os, r.image, r.metrics);
    const auto s = summarize(rows);
    write_row(os, "MEAN", s.mean);
    write_row(os, "STD", s.stddev);
}

std::string metrics_csv(const std::vector<MetricsRow>& rows) {
    std::ostringstream os;
    write_metrics_csv(os, rows);
    return os.str();
}

template BinaryMask binarize(const Tensor<float>&, double);
template BinaryMask binarize(const Tensor<double>&, double);
template Tensor<float> to_tensor(const BinaryMask&);
template Tensor<double> to_tensor(const BinaryMask&);

}  // namespace donet
