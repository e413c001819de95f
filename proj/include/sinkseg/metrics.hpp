#pragma once

#include <vector>

#include "sinkseg/mat.hpp"

namespace sinkseg {

// ---------------------------------------------------------------------------
// Segmentation metrics: per-class IoU from argmax predictions, seen/unseen
// mean IoU, and their harmonic mean.
// ---------------------------------------------------------------------------

// 2su/(s+u); zero when both groups are empty or zero.
inline double harmonic_iou(double s, double u) {
    const double denom = s + u;
    if (denom <= 0.0) return 0.0;
    return 2.0 * s * u / denom;
}

struct Metrics {
    double miou_seen = 0.0;
    double miou_unseen = 0.0;
    double hiou = 0.0;
    std::vector<double> per_class;  // IoU per class; meaningless where !valid
    std::vector<char> valid;        // false when the class is absent from both
                                    // prediction and ground truth
};

inline std::vector<int> argmax_labels(const Mat &scores) {
    std::vector<int> out(static_cast<std::size_t>(scores.rows));
    for (int i = 0; i < scores.rows; ++i) {
        int best = 0;
        for (int k = 1; k < scores.cols; ++k)
            if (scores(i, k) > scores(i, best)) best = k;
        out[static_cast<std::size_t>(i)] = best;
    }
    return out;
}

// Classes absent from both prediction and ground truth are excluded from the
// seen/unseen means rather than counted as 0/0.
inline Metrics segmentation_metrics(const Mat &scores, const std::vector<int> &gt,
                                    const std::vector<char> &seen) {
    if (static_cast<int>(gt.size()) != scores.rows)
        throw ShapeError("segmentation_metrics: label count must equal score rows");
    const int kk = scores.cols;
    if (static_cast<int>(seen.size()) != kk)
        throw ShapeError("segmentation_metrics: seen mask length must equal classes");
    for (int v : gt)
        if (v < 0 || v >= kk)
            throw std::invalid_argument("segmentation_metrics: label out of range");

    const std::vector<int> pred = argmax_labels(scores);
    std::vector<long> inter(static_cast<std::size_t>(kk), 0), uni(static_cast<std::size_t>(kk), 0);
    for (std::size_t i = 0; i < gt.size(); ++i) {
        const int p = pred[i], g = gt[i];
        if (p == g) {
            ++inter[static_cast<std::size_t>(p)];
            ++uni[static_cast<std::size_t>(p)];
        } else {
            ++uni[static_cast<std::size_t>(p)];
            ++uni[static_cast<std::size_t>(g)];
        }
    }

    Metrics out;
    out.per_class.assign(static_cast<std::size_t>(kk), 0.0);
    out.valid.assign(static_cast<std::size_t>(kk), 0);
    double sum_s = 0.0, sum_u = 0.0;
    int n_s = 0, n_u = 0;
    for (int k = 0; k < kk; ++k) {
        if (uni[static_cast<std::size_t>(k)] == 0) continue;
        out.valid[static_cast<std::size_t>(k)] = 1;
        const double iou = static_cast<double>(inter[static_cast<std::size_t>(k)]) /
                           static_cast<double>(uni[static_cast<std::size_t>(k)]);
        out.per_class[static_cast<std::size_t>(k)] = iou;
        if (seen[static_cast<std::size_t>(k)]) {
            sum_s += iou;
            ++n_s;
        } else {
            sum_u += iou;
            ++n_u;
        }
    }
    out.miou_seen = n_s > 0 ? sum_s / n_s : 0.0;
    out.miou_unseen = n_u > 0 ? sum_u / n_u : 0.0;
    out.hiou = harmonic_iou(out.miou_seen, out.miou_unseen);
    return out;
}

} // namespace sinkseg
