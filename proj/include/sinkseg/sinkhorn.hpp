#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "sinkseg/mat.hpp"

namespace sinkseg {

// ---------------------------------------------------------------------------
// Entropy-regularized optimal transport, solved entirely in the log domain.
// Duals are kept in log space end to end; plan entries are materialized as
// exp(a_i - C_ij/eps + b_j) so that small eps cannot overflow.
// ---------------------------------------------------------------------------

struct SinkhornConfig {
    double epsilon = 0.05;  // regularization weight, > 0
    int max_iters = 200;    // iteration cap
    double tol = 1e-6;      // L1 marginal-violation stopping tolerance

    void validate() const {
        if (!(epsilon > 0.0)) throw ConfigError("SinkhornConfig: epsilon must be > 0");
        if (max_iters < 1) throw ConfigError("SinkhornConfig: max_iters must be >= 1");
        if (!(tol >= 0.0)) throw ConfigError("SinkhornConfig: tol must be >= 0");
    }
};

struct Marginals {
    std::vector<double> mu;  // source weights, length M
    std::vector<double> nu;  // target weights, length N

    static Marginals uniform(int m, int n) {
        Marginals g;
        g.mu.assign(static_cast<std::size_t>(m), 1.0 / m);
        g.nu.assign(static_cast<std::size_t>(n), 1.0 / n);
        return g;
    }

    void validate() const {
        double sm = 0.0, sn = 0.0;
        for (double v : mu) {
            if (!(v >= 0.0)) throw std::invalid_argument("Marginals: mu entries must be >= 0");
            sm += v;
        }
        for (double v : nu) {
            if (!(v >= 0.0)) throw std::invalid_argument("Marginals: nu entries must be >= 0");
            sn += v;
        }
        if (std::abs(sm - 1.0) > 1e-12 || std::abs(sn - 1.0) > 1e-12)
            throw std::invalid_argument("Marginals: each vector must sum to 1");
    }
};

struct TransportPlan {
    Mat plan;                    // M x N, nonnegative
    int iters_used = 0;          // full (row, column) update pairs executed
    double marginal_err = 0.0;   // L1 deviation of achieved marginals
    std::vector<double> dual_a;  // log-domain row dual
    std::vector<double> dual_b;  // log-domain column dual
};

namespace detail {

inline void check_sinkhorn_inputs(const Mat &cost, const Marginals &marg) {
    if (!all_finite(cost)) throw std::invalid_argument("sinkhorn: cost has non-finite entries");
    if (static_cast<int>(marg.mu.size()) != cost.rows ||
        static_cast<int>(marg.nu.size()) != cost.cols)
        throw ShapeError("sinkhorn: marginal lengths do not match cost shape");
    marg.validate();
    // Zero-mass atoms would push the log-domain duals to -inf.
    for (double v : marg.mu)
        if (v == 0.0) throw std::invalid_argument("sinkhorn: mu entries must be > 0");
    for (double v : marg.nu)
        if (v == 0.0) throw std::invalid_argument("sinkhorn: nu entries must be > 0");
}

// lse over one row of (klog + b).
inline double lse_row_plus(const Mat &klog, int i, const std::vector<double> &b) {
    double m = -std::numeric_limits<double>::infinity();
    const auto r = klog.row(i);
    for (int j = 0; j < klog.cols; ++j) m = std::max(m, r[j] + b[j]);
    double s = 0.0;
    for (int j = 0; j < klog.cols; ++j) s += std::exp(r[j] + b[j] - m);
    return m + std::log(s);
}

// lse over one column of (klog + a).
inline double lse_col_plus(const Mat &klog, int j, const std::vector<double> &a) {
    double m = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < klog.rows; ++i) m = std::max(m, klog(i, j) + a[i]);
    double s = 0.0;
    for (int i = 0; i < klog.rows; ++i) s += std::exp(klog(i, j) + a[i] - m);
    return m + std::log(s);
}

// Runs the alternating dual updates, optionally recording the full dual
// trajectory for reverse-mode accumulation.
inline TransportPlan sinkhorn_core(const Mat &cost, const Marginals &marg,
                                   const SinkhornConfig &cfg,
                                   std::vector<std::vector<double>> *a_hist,
                                   std::vector<std::vector<double>> *b_hist) {
    cfg.validate();
    check_sinkhorn_inputs(cost, marg);
    const int m = cost.rows, n = cost.cols;

    Mat klog(m, n);
    const double inv_eps = 1.0 / cfg.epsilon;
    for (std::size_t i = 0; i < klog.size(); ++i) klog.data[i] = -cost.data[i] * inv_eps;

    std::vector<double> log_mu(m), log_nu(n);
    for (int i = 0; i < m; ++i) log_mu[i] = std::log(marg.mu[i]);
    for (int j = 0; j < n; ++j) log_nu[j] = std::log(marg.nu[j]);

    std::vector<double> a(m, 0.0), b(n, 0.0);
    if (b_hist) b_hist->push_back(b);  // b^0 = 0

    TransportPlan out;
    out.plan = Mat(m, n);
    for (int t = 1; t <= cfg.max_iters; ++t) {
        for (int i = 0; i < m; ++i) a[i] = log_mu[i] - lse_row_plus(klog, i, b);
        for (int j = 0; j < n; ++j) b[j] = log_nu[j] - lse_col_plus(klog, j, a);
        if (a_hist) a_hist->push_back(a);
        if (b_hist) b_hist->push_back(b);
        out.iters_used = t;

        // Materialize the implied plan and test the L1 marginal violation on
        // the same values the caller will see.
        double err = 0.0;
        std::vector<double> colsum(n, 0.0);
        for (int i = 0; i < m; ++i) {
            double rowsum = 0.0;
            for (int j = 0; j < n; ++j) {
                const double v = std::exp(a[i] + klog(i, j) + b[j]);
                out.plan(i, j) = v;
                rowsum += v;
                colsum[j] += v;
            }
            err += std::abs(rowsum - marg.mu[i]);
        }
        for (int j = 0; j < n; ++j) err += std::abs(colsum[j] - marg.nu[j]);
        out.marginal_err = err;
        if (err <= cfg.tol) break;
    }
    out.dual_a = std::move(a);
    out.dual_b = std::move(b);
    return out;
}

} // namespace detail

// Log-domain Sinkhorn: T* = diag(exp a) exp(-C/eps) diag(exp b), alternating
// a = log mu - lse(-C/eps + b), b = log nu - lse(-C^T/eps + a), b^0 = 0.
// Stops when the L1 marginal violation of the implied plan drops to tol, or
// at max_iters.
inline TransportPlan sinkhorn_log(const Mat &cost, const Marginals &marg,
                                  const SinkhornConfig &cfg) {
    return detail::sinkhorn_core(cost, marg, cfg, nullptr, nullptr);
}

// Plan after the first row update only: row i equals mu_i * softmax(-C_i/eps).
// This is the softmax end of the softmax<->Sinkhorn correspondence.
inline Mat sinkhorn_one_step(const Mat &cost, const Marginals &marg, double epsilon) {
    SinkhornConfig cfg;
    cfg.epsilon = epsilon;
    cfg.validate();
    detail::check_sinkhorn_inputs(cost, marg);
    Mat scores = scale(cost, -1.0 / epsilon);
    Mat plan = row_softmax(scores);
    for (int i = 0; i < plan.rows; ++i)
        for (int j = 0; j < plan.cols; ++j) plan(i, j) *= marg.mu[i];
    return plan;
}

// <T, C> - eps * sum_ij T_ij log T_ij, with 0 log 0 := 0.
// Note the sign: the entropy term here is literally sum T log T, so the
// returned value is the transport cost plus eps times the (nonnegative)
// Shannon entropy of the plan. The solver's fixed point minimizes
// <T, C> + eps * sum T log T; see tests for the optimality check.
inline double ot_objective(const Mat &plan, const Mat &cost, double epsilon) {
    require_same_shape(plan, cost, "ot_objective");
    double linear = 0.0, ent = 0.0;
    for (std::size_t i = 0; i < plan.size(); ++i) {
        const double t = plan.data[i];
        if (t < 0.0) throw std::invalid_argument("ot_objective: plan entries must be >= 0");
        linear += t * cost.data[i];
        if (t > 0.0) ent += t * std::log(t);
    }
    return linear - epsilon * ent;
}

// Gradient of <upstream, T*(C)> with respect to C, by reverse accumulation
// through the exact sequence of dual updates executed in the forward pass.
// Correct for non-converged early stopping because the backward sweep
// replays the same iteration count.
inline Mat sinkhorn_grad(const Mat &cost, const Marginals &marg, const SinkhornConfig &cfg,
                         const Mat &upstream) {
    require_same_shape(upstream, cost, "sinkhorn_grad: upstream");
    std::vector<std::vector<double>> a_hist;  // a^1 .. a^T
    std::vector<std::vector<double>> b_hist;  // b^0 .. b^T
    const TransportPlan fwd = detail::sinkhorn_core(cost, marg, cfg, &a_hist, &b_hist);
    const int m = cost.rows, n = cost.cols;
    const int iters = fwd.iters_used;

    Mat klog = scale(cost, -1.0 / cfg.epsilon);
    std::vector<double> log_mu(m), log_nu(n);
    for (int i = 0; i < m; ++i) log_mu[i] = std::log(marg.mu[i]);
    for (int j = 0; j < n; ++j) log_nu[j] = std::log(marg.nu[j]);

    // Seed from the plan: T_ij = exp(a_i + klog_ij + b_j).
    Mat dklog(m, n);
    std::vector<double> ga(m, 0.0), gb(n, 0.0);
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            const double ut = upstream(i, j) * fwd.plan(i, j);
            dklog(i, j) = ut;
            ga[i] += ut;
            gb[j] += ut;
        }
    }

    for (int t = iters; t >= 1; --t) {
        const std::vector<double> &at = a_hist[static_cast<std::size_t>(t) - 1];
        const std::vector<double> &bt = b_hist[static_cast<std::size_t>(t)];
        const std::vector<double> &bprev = b_hist[static_cast<std::size_t>(t) - 1];

        // b^t = log nu - lse_i(klog + a^t): column-stochastic softmax weights
        // w_ij = exp(klog_ij + a^t_i + b^t_j - log nu_j).
        for (int j = 0; j < n; ++j) {
            const double g = -gb[j];
            if (g == 0.0) continue;
            for (int i = 0; i < m; ++i) {
                const double w = std::exp(klog(i, j) + at[i] + bt[j] - log_nu[j]);
                dklog(i, j) += g * w;
                ga[i] += g * w;
            }
        }
        // a^t = log mu - lse_j(klog + b^{t-1}): row-stochastic weights
        // w_ij = exp(klog_ij + b^{t-1}_j + a^t_i - log mu_i).
        std::vector<double> gb_prev(n, 0.0);
        for (int i = 0; i < m; ++i) {
            const double g = -ga[i];
            if (g == 0.0) continue;
            for (int j = 0; j < n; ++j) {
                const double w = std::exp(klog(i, j) + bprev[j] + at[i] - log_mu[i]);
                dklog(i, j) += g * w;
                gb_prev[j] += g * w;
            }
        }
        gb = std::move(gb_prev);
        std::fill(ga.begin(), ga.end(), 0.0);
    }

    // klog = -C/eps.
    return scale(dklog, -1.0 / cfg.epsilon);
}

} // namespace sinkseg
