#pragma once

#include <cmath>
#include <vector>

#include "sinkseg/mat.hpp"

namespace sinkseg {

// ---------------------------------------------------------------------------
// Segmentation losses, binary per class: cross-entropy and focal terms apply
// a sigmoid to the prediction internally; the dice term consumes the raw
// prediction. Every loss returns its gradient with respect to the prediction.
// Pixel terms carry an optional weight (0 masks a pixel out) and keep the
// fixed 1/HW normalization so masking never rescales surviving terms.
// Per-class losses are averaged over classes.
// ---------------------------------------------------------------------------

struct LossWeights {
    double lambda_ce = 1.0;
    double lambda_focal = 20.0;
    double lambda_dice = 1.0;
    double gamma = 2.0;

    void validate() const {
        if (lambda_ce < 0 || lambda_focal < 0 || lambda_dice < 0 || gamma < 0)
            throw ConfigError("LossWeights: all weights must be >= 0");
    }
};

struct LossResult {
    double value = 0.0;
    Mat grad;  // d value / d pred
};

namespace detail {

inline double log_sigmoid(double z) {
    // log sigma(z) without overflow on either tail
    return z < 0.0 ? z - std::log1p(std::exp(z)) : -std::log1p(std::exp(-z));
}

inline void check_loss_inputs(const Mat &pred, const Mat &ygt,
                              const std::vector<double> *pixel_w, const char *what) {
    require_same_shape(pred, ygt, what);
    if (pixel_w && static_cast<int>(pixel_w->size()) != pred.rows)
        throw ShapeError(std::string(what) + ": pixel weight length must equal rows");
    for (double v : ygt.data)
        if (v != 0.0 && v != 1.0)
            throw std::invalid_argument(std::string(what) + ": targets must be 0/1");
}

inline double pixel_weight(const std::vector<double> *w, int i) {
    return w ? (*w)[static_cast<std::size_t>(i)] : 1.0;
}

} // namespace detail

// -(1/HW) sum_i [ y log sigma(p) + (1-y) log(1 - sigma(p)) ], class-averaged.
inline LossResult ce_loss(const Mat &pred, const Mat &ygt,
                          const std::vector<double> *pixel_w = nullptr) {
    detail::check_loss_inputs(pred, ygt, pixel_w, "ce_loss");
    const int m = pred.rows, kk = pred.cols;
    LossResult out;
    out.grad = Mat(m, kk);
    const double norm = 1.0 / (static_cast<double>(m) * kk);
    for (int i = 0; i < m; ++i) {
        const double w = detail::pixel_weight(pixel_w, i);
        if (w == 0.0) continue;
        for (int k = 0; k < kk; ++k) {
            const double z = pred(i, k), y = ygt(i, k);
            const double s = sigmoid_scalar(z);
            out.value -= w * (y * detail::log_sigmoid(z) + (1.0 - y) * detail::log_sigmoid(-z));
            out.grad(i, k) = w * (s - y) * norm;
        }
    }
    out.value *= norm;
    return out;
}

// Focal variant: hard examples keep their gradient, easy ones are damped by
// (1-sigma)^gamma / sigma^gamma factors.
inline LossResult focal_loss(const Mat &pred, const Mat &ygt, double gamma,
                             const std::vector<double> *pixel_w = nullptr) {
    detail::check_loss_inputs(pred, ygt, pixel_w, "focal_loss");
    if (gamma < 0) throw ConfigError("focal_loss: gamma must be >= 0");
    const int m = pred.rows, kk = pred.cols;
    LossResult out;
    out.grad = Mat(m, kk);
    const double norm = 1.0 / (static_cast<double>(m) * kk);
    for (int i = 0; i < m; ++i) {
        const double w = detail::pixel_weight(pixel_w, i);
        if (w == 0.0) continue;
        for (int k = 0; k < kk; ++k) {
            const double z = pred(i, k), y = ygt(i, k);
            const double s = sigmoid_scalar(z);
            const double ls = detail::log_sigmoid(z), l1s = detail::log_sigmoid(-z);
            out.value -= w * (y * std::pow(1.0 - s, gamma) * ls +
                              (1.0 - y) * std::pow(s, gamma) * l1s);
            // d/dz of the per-pixel term, via s(1-s) chain through the sigmoid
            const double dpos = gamma * s * std::pow(1.0 - s, gamma) * ls -
                                std::pow(1.0 - s, gamma + 1.0);
            const double dneg = -gamma * (1.0 - s) * std::pow(s, gamma) * l1s +
                                std::pow(s, gamma + 1.0);
            out.grad(i, k) = w * (y * dpos + (1.0 - y) * dneg) * norm;
        }
    }
    out.value *= norm;
    return out;
}

// 1 - 2<y,p>/(|y|^2 + |p|^2) per class on the raw prediction, class-averaged.
inline LossResult dice_loss(const Mat &pred, const Mat &ygt,
                            const std::vector<double> *pixel_w = nullptr) {
    detail::check_loss_inputs(pred, ygt, pixel_w, "dice_loss");
    const int m = pred.rows, kk = pred.cols;
    LossResult out;
    out.grad = Mat(m, kk);
    for (int k = 0; k < kk; ++k) {
        double a = 0.0, b = 0.0;
        for (int i = 0; i < m; ++i) {
            const double w = detail::pixel_weight(pixel_w, i);
            const double p = pred(i, k), y = ygt(i, k);
            a += w * y * p;
            b += w * (y * y + p * p);
        }
        if (b == 0.0) continue;  // empty class against empty prediction: zero loss
        out.value += (1.0 - 2.0 * a / b) / kk;
        for (int i = 0; i < m; ++i) {
            const double w = detail::pixel_weight(pixel_w, i);
            const double p = pred(i, k), y = ygt(i, k);
            out.grad(i, k) = -2.0 * w * (y * b - 2.0 * a * p) / (b * b) / kk;
        }
    }
    return out;
}

// lambda_ce * L_ce + lambda_focal * L_focal + lambda_dice * L_dice.
inline LossResult seg_loss(const Mat &pred, const Mat &ygt, const LossWeights &lw,
                           const std::vector<double> *pixel_w = nullptr) {
    lw.validate();
    const LossResult ce = ce_loss(pred, ygt, pixel_w);
    const LossResult fc = focal_loss(pred, ygt, lw.gamma, pixel_w);
    const LossResult dc = dice_loss(pred, ygt, pixel_w);
    LossResult out;
    out.value = lw.lambda_ce * ce.value + lw.lambda_focal * fc.value + lw.lambda_dice * dc.value;
    out.grad = Mat(pred.rows, pred.cols);
    for (std::size_t i = 0; i < out.grad.size(); ++i)
        out.grad.data[i] = lw.lambda_ce * ce.grad.data[i] +
                           lw.lambda_focal * fc.grad.data[i] + lw.lambda_dice * dc.grad.data[i];
    return out;
}

// Total training objective: the same segmentation loss applied to the decoder
// path and the score-map path. Gradients come back separately per path.
struct TotalLoss {
    double value = 0.0;
    Mat grad_decoder;
    Mat grad_scoremap;
};

inline TotalLoss loss_total(const Mat &decoder_pred, const Mat &scoremap_pred, const Mat &ygt,
                            const LossWeights &lw, const std::vector<double> *pixel_w = nullptr) {
    LossResult a = seg_loss(decoder_pred, ygt, lw, pixel_w);
    LossResult b = seg_loss(scoremap_pred, ygt, lw, pixel_w);
    TotalLoss out;
    out.value = a.value + b.value;
    out.grad_decoder = std::move(a.grad);
    out.grad_scoremap = std::move(b.grad);
    return out;
}

} // namespace sinkseg
