#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "sinkseg/errors.hpp"

namespace sinkseg {

// Dense row-major matrix of doubles. The single value carrier for
// embeddings, score maps, costs and transport plans.
struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<double> data;

    Mat() = default;
    Mat(int r, int c, double fill = 0.0)
        : rows(r), cols(c), data(static_cast<std::size_t>(r) * static_cast<std::size_t>(c), fill) {
        if (r < 0 || c < 0) throw ShapeError("Mat: negative dimension");
    }

    static Mat identity(int n) {
        Mat m(n, n, 0.0);
        for (int i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    double &operator()(int i, int j) {
        return data[static_cast<std::size_t>(i) * cols + j];
    }
    double operator()(int i, int j) const {
        return data[static_cast<std::size_t>(i) * cols + j];
    }

    std::span<double> row(int i) {
        return {data.data() + static_cast<std::size_t>(i) * cols, static_cast<std::size_t>(cols)};
    }
    std::span<const double> row(int i) const {
        return {data.data() + static_cast<std::size_t>(i) * cols, static_cast<std::size_t>(cols)};
    }

    std::size_t size() const { return data.size(); }
};

inline bool same_shape(const Mat &a, const Mat &b) {
    return a.rows == b.rows && a.cols == b.cols;
}

inline void require_same_shape(const Mat &a, const Mat &b, const char *what) {
    if (!same_shape(a, b))
        throw ShapeError(std::string(what) + ": shape mismatch (" + std::to_string(a.rows) + "x" +
                         std::to_string(a.cols) + " vs " + std::to_string(b.rows) + "x" +
                         std::to_string(b.cols) + ")");
}

inline bool all_finite(const Mat &m) {
    for (double v : m.data)
        if (!std::isfinite(v)) return false;
    return true;
}

// ---------------------------------------------------------------------------
// Summation. Reductions over more than kPairwiseCutoff terms switch to
// pairwise recursion so that long accumulations keep ~1e-10 test tolerances.
// ---------------------------------------------------------------------------

inline constexpr std::size_t kPairwiseCutoff = 1024;

inline double sum_span(std::span<const double> v) {
    if (v.size() <= kPairwiseCutoff) {
        double s = 0.0;
        for (double x : v) s += x;
        return s;
    }
    const std::size_t half = v.size() / 2;
    return sum_span(v.first(half)) + sum_span(v.subspan(half));
}

inline double dot_span(std::span<const double> a, std::span<const double> b) {
    if (a.size() <= kPairwiseCutoff) {
        double s = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
        return s;
    }
    const std::size_t half = a.size() / 2;
    return dot_span(a.first(half), b.first(half)) + dot_span(a.subspan(half), b.subspan(half));
}

// ---------------------------------------------------------------------------
// Elementwise and structural ops
// ---------------------------------------------------------------------------

inline Mat transpose(const Mat &x) {
    Mat out(x.cols, x.rows);
    for (int i = 0; i < x.rows; ++i)
        for (int j = 0; j < x.cols; ++j) out(j, i) = x(i, j);
    return out;
}

inline Mat add(const Mat &a, const Mat &b) {
    require_same_shape(a, b, "add");
    Mat out(a.rows, a.cols);
    for (std::size_t i = 0; i < a.size(); ++i) out.data[i] = a.data[i] + b.data[i];
    return out;
}

inline Mat sub(const Mat &a, const Mat &b) {
    require_same_shape(a, b, "sub");
    Mat out(a.rows, a.cols);
    for (std::size_t i = 0; i < a.size(); ++i) out.data[i] = a.data[i] - b.data[i];
    return out;
}

inline Mat scale(const Mat &a, double s) {
    Mat out(a.rows, a.cols);
    for (std::size_t i = 0; i < a.size(); ++i) out.data[i] = a.data[i] * s;
    return out;
}

inline Mat hadamard(const Mat &a, const Mat &b) {
    require_same_shape(a, b, "hadamard");
    Mat out(a.rows, a.cols);
    for (std::size_t i = 0; i < a.size(); ++i) out.data[i] = a.data[i] * b.data[i];
    return out;
}

inline void add_in_place(Mat &a, const Mat &b) {
    require_same_shape(a, b, "add_in_place");
    for (std::size_t i = 0; i < a.size(); ++i) a.data[i] += b.data[i];
}

inline Mat matmul(const Mat &a, const Mat &b) {
    if (a.cols != b.rows)
        throw ShapeError("matmul: inner dimensions differ (" + std::to_string(a.cols) + " vs " +
                         std::to_string(b.rows) + ")");
    Mat out(a.rows, b.cols, 0.0);
    if (a.cols <= static_cast<int>(kPairwiseCutoff)) {
        // i-k-j order keeps the inner loop contiguous for both b and out.
        for (int i = 0; i < a.rows; ++i) {
            double *orow = out.data.data() + static_cast<std::size_t>(i) * out.cols;
            for (int k = 0; k < a.cols; ++k) {
                const double aik = a(i, k);
                if (aik == 0.0) continue;
                const double *brow = b.data.data() + static_cast<std::size_t>(k) * b.cols;
                for (int j = 0; j < b.cols; ++j) orow[j] += aik * brow[j];
            }
        }
    } else {
        const Mat bt = transpose(b);
        for (int i = 0; i < a.rows; ++i)
            for (int j = 0; j < b.cols; ++j) out(i, j) = dot_span(a.row(i), bt.row(j));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Stable row-wise nonlinearities
// ---------------------------------------------------------------------------

// Row-wise softmax with max-shift; each output row is nonnegative and sums
// to one for any finite input.
inline Mat row_softmax(const Mat &x) {
    Mat out(x.rows, x.cols);
    for (int i = 0; i < x.rows; ++i) {
        const auto r = x.row(i);
        const double m = *std::max_element(r.begin(), r.end());
        double denom = 0.0;
        for (int j = 0; j < x.cols; ++j) {
            const double e = std::exp(x(i, j) - m);
            out(i, j) = e;
            denom += e;
        }
        const double inv = 1.0 / denom;
        for (int j = 0; j < x.cols; ++j) out(i, j) *= inv;
    }
    return out;
}

// log(sum_j exp(x_ij)) per row, max-shifted.
inline std::vector<double> logsumexp_rows(const Mat &x) {
    std::vector<double> out(static_cast<std::size_t>(x.rows));
    for (int i = 0; i < x.rows; ++i) {
        const auto r = x.row(i);
        const double m = *std::max_element(r.begin(), r.end());
        if (!std::isfinite(m)) {  // all -inf row: empty sum
            out[i] = m;
            continue;
        }
        double s = 0.0;
        for (double v : r) s += std::exp(v - m);
        out[i] = m + std::log(s);
    }
    return out;
}

// Unit-normalizes each row. Zero rows stay zero; generators may emit padding
// rows and the cosine cost treats them as maximally distant.
inline Mat l2_normalize_rows(const Mat &x) {
    Mat out(x.rows, x.cols);
    for (int i = 0; i < x.rows; ++i) {
        const double n2 = dot_span(x.row(i), x.row(i));
        if (n2 == 0.0) continue;
        const double inv = 1.0 / std::sqrt(n2);
        for (int j = 0; j < x.cols; ++j) out(i, j) = x(i, j) * inv;
    }
    return out;
}

inline double sigmoid_scalar(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline Mat sigmoid(const Mat &x) {
    Mat out(x.rows, x.cols);
    for (std::size_t i = 0; i < x.size(); ++i) out.data[i] = sigmoid_scalar(x.data[i]);
    return out;
}

// ---------------------------------------------------------------------------
// Numerical gradient oracle
// ---------------------------------------------------------------------------

// Central-difference gradient of a scalar function, entry by entry.
// Used as the reference for every analytic gradient in the library.
inline Mat finite_diff_grad(const std::function<double(const Mat &)> &f, const Mat &x, double h) {
    if (h <= 0.0) throw ConfigError("finite_diff_grad: step must be positive");
    Mat grad(x.rows, x.cols);
    Mat probe = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = probe.data[i];
        probe.data[i] = orig + h;
        const double fp = f(probe);
        probe.data[i] = orig - h;
        const double fm = f(probe);
        probe.data[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw EvalError("finite_diff_grad: non-finite function value");
        grad.data[i] = (fp - fm) / (2.0 * h);
    }
    return grad;
}

// Largest relative entry deviation, with an absolute floor so that entries
// near zero do not blow up the ratio.
inline double max_rel_err(const Mat &a, const Mat &b, double floor = 1e-8) {
    require_same_shape(a, b, "max_rel_err");
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double denom = std::max({std::abs(a.data[i]), std::abs(b.data[i]), floor});
        worst = std::max(worst, std::abs(a.data[i] - b.data[i]) / denom);
    }
    return worst;
}

inline double max_abs_diff(const Mat &a, const Mat &b) {
    require_same_shape(a, b, "max_abs_diff");
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        worst = std::max(worst, std::abs(a.data[i] - b.data[i]));
    return worst;
}

} // namespace sinkseg
