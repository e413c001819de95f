#pragma once

#include <cmath>
#include <limits>

#include "score_map.hpp"

namespace sinkseg {

// Per-prompt activation maps column-stacked like the score map itself:
// column k*N + n holds (plans[k] ⊙ S_k)[:, n], one value per pixel — prompt
// n's share of class k under the refining plan.
inline Mat prompt_maps(const ScoreMap &score, const RefinedScoreMap &refined) {
    score.validate();
    if (static_cast<int>(refined.plans.size()) != score.K)
        throw ShapeError("prompt_maps: plan count must equal K");
    Mat out(score.data.rows, score.data.cols);
    for (int k = 0; k < score.K; ++k) {
        const Mat &plan = refined.plans[static_cast<std::size_t>(k)];
        if (plan.rows != score.data.rows || plan.cols != score.N)
            throw ShapeError("prompt_maps: plan shape mismatch");
        for (int i = 0; i < out.rows; ++i)
            for (int n = 0; n < score.N; ++n)
                out(i, k * score.N + n) = plan(i, n) * score.data(i, k * score.N + n);
    }
    return out;
}

// The same maps under cross-attention normalization: each prompt softmaxes
// its scores over pixels independently (the plan's column half-step). With
// no shared pixel budget, the prompts of a class are free to concentrate on
// the same pixels, so their maps move together.
inline Mat softmax_prompt_maps(const ScoreMap &score, double epsilon) {
    score.validate();
    if (!(epsilon > 0.0)) throw ConfigError("softmax_prompt_maps: epsilon must be > 0");
    const int m = score.data.rows;
    Mat out(m, score.data.cols);
    for (int c = 0; c < score.data.cols; ++c) {
        double hi = -std::numeric_limits<double>::infinity();
        for (int i = 0; i < m; ++i) hi = std::max(hi, score.data(i, c) / epsilon);
        double z = 0.0;
        for (int i = 0; i < m; ++i) z += std::exp(score.data(i, c) / epsilon - hi);
        for (int i = 0; i < m; ++i) {
            const double w = std::exp(score.data(i, c) / epsilon - hi) / (z * score.N);
            out(i, c) = w * score.data(i, c);
        }
    }
    return out;
}

// Mean Pearson correlation over all within-class prompt pairs, averaged
// across classes. Zero-variance maps contribute zero correlation: a constant
// map carries no alignment information.
inline double mean_prompt_correlation(const Mat &maps, int kk, int nn) {
    if (kk < 1 || nn < 2) throw ConfigError("mean_prompt_correlation: need K >= 1, N >= 2");
    if (maps.cols != kk * nn) throw ShapeError("mean_prompt_correlation: column count != K*N");
    const int m = maps.rows;
    auto corr = [&](int ca, int cb) {
        double ma = 0.0, mb = 0.0;
        for (int i = 0; i < m; ++i) {
            ma += maps(i, ca);
            mb += maps(i, cb);
        }
        ma /= m;
        mb /= m;
        double saa = 0.0, sbb = 0.0, sab = 0.0;
        for (int i = 0; i < m; ++i) {
            const double a = maps(i, ca) - ma, b = maps(i, cb) - mb;
            saa += a * a;
            sbb += b * b;
            sab += a * b;
        }
        const double denom = std::sqrt(saa * sbb);
        return denom > 0.0 ? sab / denom : 0.0;
    };
    double total = 0.0;
    int pairs = 0;
    for (int k = 0; k < kk; ++k)
        for (int a = 0; a < nn; ++a)
            for (int b = a + 1; b < nn; ++b) {
                total += corr(k * nn + a, k * nn + b);
                ++pairs;
            }
    return total / pairs;
}

// Mean over pixels of the variance across the class's prompt maps, after
// standardizing each map to zero mean and unit variance so per-map scale
// cannot masquerade as disagreement. Higher values mean prompts activate on
// different pixels instead of moving together; on standardized maps this is
// a monotone complement of the mean pairwise correlation. Averaged across
// classes.
inline double prompt_map_variance(const Mat &maps, int kk, int nn) {
    if (kk < 1 || nn < 1) throw ConfigError("prompt_map_variance: need K >= 1, N >= 1");
    if (maps.cols != kk * nn) throw ShapeError("prompt_map_variance: column count != K*N");
    const int m = maps.rows;
    Mat z(maps.rows, maps.cols);
    for (int c = 0; c < maps.cols; ++c) {
        double mean = 0.0;
        for (int i = 0; i < m; ++i) mean += maps(i, c);
        mean /= m;
        double var = 0.0;
        for (int i = 0; i < m; ++i) {
            const double d = maps(i, c) - mean;
            var += d * d;
        }
        const double sd = std::sqrt(var / m);
        if (sd > 0.0)
            for (int i = 0; i < m; ++i) z(i, c) = (maps(i, c) - mean) / sd;
    }
    double total = 0.0;
    for (int k = 0; k < kk; ++k) {
        double acc = 0.0;
        for (int i = 0; i < m; ++i) {
            double mean = 0.0;
            for (int n = 0; n < nn; ++n) mean += z(i, k * nn + n);
            mean /= nn;
            double var = 0.0;
            for (int n = 0; n < nn; ++n) {
                const double d = z(i, k * nn + n) - mean;
                var += d * d;
            }
            acc += var / nn;
        }
        total += acc / m;
    }
    return total / kk;
}

} // namespace sinkseg
