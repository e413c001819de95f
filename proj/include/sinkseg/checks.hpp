#pragma once

#include <chrono>
#include <ostream>
#include <string>
#include <vector>

#include "attention.hpp"
#include "exact_ot.hpp"
#include "losses.hpp"
#include "metrics.hpp"
#include "rng.hpp"
#include "score_map.hpp"

namespace sinkseg {

struct CheckResult {
    std::string name;
    bool pass = false;
    double measured = 0.0;  // worst value observed across instances
    double limit = 0.0;     // bound it was compared against
    std::string note;
};

struct CheckOptions {
    double grad_tol = 1e-4;       // finite-difference relative error bound
    double loss_grad_tol = 1e-5;  // tighter bound for the loss terms
    void validate() const {
        if (!(grad_tol > 0.0) || !(loss_grad_tol > 0.0))
            throw ConfigError("checks: gradient tolerances must be > 0");
    }
};

namespace detail {

inline Mat random_mat(Rng &rng, int r, int c, double lo = -1.0, double hi = 1.0) {
    Mat m(r, c);
    for (auto &v : m.data) v = rng.uniform(lo, hi);
    return m;
}

inline AttnParams random_attn(Rng &rng, int din, int d) {
    AttnParams p;
    p.d = d;
    p.Wq = random_mat(rng, din, d, -0.5, 0.5);
    p.Wk = random_mat(rng, din, d, -0.5, 0.5);
    p.Wv = random_mat(rng, din, d, -0.5, 0.5);
    return p;
}

inline double inner(const Mat &a, const Mat &b) {
    require_same_shape(a, b, "inner");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a.data[i] * b.data[i];
    return s;
}

// Worst finite-difference relative error across a set of (analytic, numeric)
// gradient pairs for one scalar objective.
inline double fd_worst(const std::vector<std::pair<Mat, Mat>> &pairs) {
    double worst = 0.0;
    for (const auto &[got, want] : pairs) worst = std::max(worst, max_rel_err(got, want, 1e-6));
    return worst;
}

inline CheckResult check_sinkhorn_feasibility() {
    CheckResult r{"sinkhorn-feasibility", false, 0.0, 1e-6,
                  "64x8 random costs, eps in {0.05, 0.1, 0.5}"};
    double min_marg = 1.0;
    for (double eps : {0.05, 0.1, 0.5})
        for (std::uint64_t seed = 0; seed < 5; ++seed) {
            Rng rng(100 * seed + static_cast<std::uint64_t>(eps * 1000));
            const Mat c = random_mat(rng, 64, 8, 0.0, 1.0);
            SinkhornConfig cfg;
            cfg.epsilon = eps;
            cfg.tol = 1e-8;  // stop rule is err <= tol; keep headroom under the limit
            const TransportPlan tp = sinkhorn_log(c, Marginals::uniform(64, 8), cfg);
            r.measured = std::max(r.measured, tp.marginal_err);
            for (int i = 0; i < tp.plan.rows; ++i) {
                double rowsum = 0.0;
                for (int j = 0; j < tp.plan.cols; ++j) rowsum += tp.plan(i, j);
                min_marg = std::min(min_marg, rowsum);
            }
        }
    r.pass = r.measured < r.limit && min_marg > 0.0;
    return r;
}

inline CheckResult check_softmax_reduction() {
    CheckResult r{"softmax-reduction", false, 0.0, 1e-12,
                  "one row update equals mu_i * softmax(-C_i/eps), 100 instances"};
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        Rng rng(1000 + seed);
        const int m = 2 + static_cast<int>(rng.uniform(0.0, 7.0));
        const int n = 2 + static_cast<int>(rng.uniform(0.0, 7.0));
        const double eps = rng.uniform(0.02, 0.5);
        const Mat c = random_mat(rng, m, n, 0.0, 1.0);
        const Marginals marg = Marginals::uniform(m, n);
        const Mat got = sinkhorn_one_step(c, marg, eps);
        Mat want = row_softmax(scale(c, -1.0 / eps));
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) want(i, j) *= marg.mu[static_cast<std::size_t>(i)];
        r.measured = std::max(r.measured, max_abs_diff(got, want));
    }
    r.pass = r.measured < r.limit;
    return r;
}

inline std::pair<CheckResult, CheckResult> check_exact_ot() {
    CheckResult cost{"exact-ot-cost", false, 0.0, 0.01,
                     "entropic cost at eps = 0.01 vs LP optimum, 20 instances"};
    CheckResult plan{"exact-ot-plan", false, 0.0, 0.02, "plan vs separated unique LP vertex"};
    SinkhornConfig cfg;
    cfg.epsilon = 0.01;
    cfg.max_iters = 200000;
    cfg.tol = 1e-10;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(170000 + seed);
        const int m = 3, n = seed % 2 ? 4 : 3;
        const Mat c = random_mat(rng, m, n, 0.0, 1.0);
        const Marginals marg = Marginals::uniform(m, n);
        const ExactOtResult ex = exact_ot(c, marg);
        const TransportPlan tp = sinkhorn_log(c, marg, cfg);
        double tc = 0.0;
        for (std::size_t i = 0; i < tp.plan.size(); ++i) tc += tp.plan.data[i] * c.data[i];
        // Floor keeps the relative gap meaningful when the optimum is near 0.
        cost.measured = std::max(cost.measured, std::abs(tc - ex.value) /
                                                    std::max(std::abs(ex.value), 1e-3));
        // Entrywise agreement with the vertex requires separation: the
        // entropic plan parks ~exp(-margin/eps) mass on nonbasic cells, so a
        // near-tie vertex (margin < 5 eps) cannot meet a 0.02 bound at any
        // iteration count.
        if (ex.unique && ex.margin >= 5.0 * cfg.epsilon)
            plan.measured = std::max(plan.measured, max_abs_diff(tp.plan, ex.plan));
    }
    cost.pass = cost.measured < cost.limit;
    plan.pass = plan.measured < plan.limit;
    return {cost, plan};
}

inline CheckResult check_sinkhorn_grad(double tol) {
    CheckResult r{"sinkhorn-grad", false, 0.0, tol, "reverse accumulation vs FD, 10 seeds"};
    SinkhornConfig cfg;
    cfg.epsilon = 0.1;
    cfg.max_iters = 8;
    cfg.tol = 0.0;  // fixed iteration count keeps the map smooth in C
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(3000 + seed);
        const Mat c = random_mat(rng, 5, 4, 0.0, 1.0);
        const Marginals marg = Marginals::uniform(5, 4);
        const Mat u = random_mat(rng, 5, 4);
        const Mat got = sinkhorn_grad(c, marg, cfg, u);
        const Mat want = finite_diff_grad(
            [&](const Mat &cc) { return inner(u, sinkhorn_log(cc, marg, cfg).plan); }, c, 1e-6);
        r.measured = std::max(r.measured, max_rel_err(got, want, 1e-6));
    }
    r.pass = r.measured < r.limit;
    return r;
}

inline CheckResult check_mps_grad(double tol) {
    CheckResult r{"mps-grad", false, 0.0, tol, "plan-weighted score refinement vs FD, 10 seeds"};
    SinkhornConfig cfg;
    cfg.epsilon = 0.1;
    cfg.max_iters = 6;
    cfg.tol = 0.0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(4000 + seed);
        ScoreMap sm;
        sm.K = 3;
        sm.N = 2;
        sm.H = 3;
        sm.W = 3;
        sm.data = random_mat(rng, 9, 6);
        const Mat u = random_mat(rng, 9, 3);
        const Mat got = mps_grad(sm, cfg, u);
        ScoreMap probe = sm;
        const Mat want = finite_diff_grad(
            [&](const Mat &ss) {
                probe.data = ss;
                return inner(u, mps(probe, cfg).data);
            },
            sm.data, 1e-5);
        r.measured = std::max(r.measured, max_rel_err(got, want, 1e-6));
    }
    r.pass = r.measured < r.limit;
    return r;
}

inline CheckResult check_self_attention_grad(double tol) {
    CheckResult r{"self-attention-grad", false, 0.0, tol, "dx, dWq, dWk, dWv vs FD, 10 seeds"};
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(5000 + seed);
        AttnParams p = random_attn(rng, 6, 3);
        const Mat x = random_mat(rng, 4, 6);
        const Mat u = random_mat(rng, 4, 3);
        const SelfAttnGrads g = self_attention_vjp(x, p, u);
        AttnParams probe = p;
        auto fd_param = [&](Mat AttnParams::*field, const Mat &at) {
            return finite_diff_grad(
                [&](const Mat &w) {
                    probe = p;
                    probe.*field = w;
                    return inner(u, self_attention(x, probe));
                },
                at, 1e-5);
        };
        r.measured = std::max(
            r.measured,
            fd_worst({{g.dx, finite_diff_grad(
                                 [&](const Mat &xx) { return inner(u, self_attention(xx, p)); },
                                 x, 1e-5)},
                      {g.dWq, fd_param(&AttnParams::Wq, p.Wq)},
                      {g.dWk, fd_param(&AttnParams::Wk, p.Wk)},
                      {g.dWv, fd_param(&AttnParams::Wv, p.Wv)}}));
    }
    r.pass = r.measured < r.limit;
    return r;
}

inline CheckResult check_cross_attention_grad(double tol) {
    CheckResult r{"cross-attention-grad", false, 0.0, tol,
                  "dtext, dpixels, projections vs FD, 10 seeds"};
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(6000 + seed);
        AttnParams p = random_attn(rng, 6, 3);
        const Mat text = random_mat(rng, 4, 6);
        const Mat pixels = random_mat(rng, 5, 6);
        const Mat u = random_mat(rng, 4, 3);
        const CrossAttnGrads g = cross_attention_vjp(text, pixels, p, u);
        AttnParams probe = p;
        auto fd_param = [&](Mat AttnParams::*field, const Mat &at) {
            return finite_diff_grad(
                [&](const Mat &w) {
                    probe = p;
                    probe.*field = w;
                    return inner(u, cross_attention(text, pixels, probe));
                },
                at, 1e-5);
        };
        r.measured = std::max(
            r.measured,
            fd_worst(
                {{g.dtext,
                  finite_diff_grad(
                      [&](const Mat &t) { return inner(u, cross_attention(t, pixels, p)); },
                      text, 1e-5)},
                 {g.dpixels,
                  finite_diff_grad(
                      [&](const Mat &px) { return inner(u, cross_attention(text, px, p)); },
                      pixels, 1e-5)},
                 {g.dWq, fd_param(&AttnParams::Wq, p.Wq)},
                 {g.dWk, fd_param(&AttnParams::Wk, p.Wk)},
                 {g.dWv, fd_param(&AttnParams::Wv, p.Wv)}}));
    }
    r.pass = r.measured < r.limit;
    return r;
}

inline CheckResult check_sinkformer_grad(double tol) {
    CheckResult r{"sinkformer-grad", false, 0.0, tol, "plan-normalized self attention, 10 seeds"};
    SinkhornConfig cfg;
    cfg.max_iters = 4;
    cfg.tol = 0.0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(7000 + seed);
        AttnParams p = random_attn(rng, 5, 4);
        const Mat x = random_mat(rng, 4, 5);
        const Mat u = random_mat(rng, 4, 4);
        const SelfAttnGrads g = sinkformer_attention_vjp(x, p, cfg, u);
        AttnParams probe = p;
        auto fd_param = [&](Mat AttnParams::*field, const Mat &at) {
            return finite_diff_grad(
                [&](const Mat &w) {
                    probe = p;
                    probe.*field = w;
                    return inner(u, sinkformer_attention(x, probe, cfg));
                },
                at, 1e-5);
        };
        r.measured = std::max(
            r.measured,
            fd_worst(
                {{g.dx, finite_diff_grad(
                            [&](const Mat &xx) {
                                return inner(u, sinkformer_attention(xx, p, cfg));
                            },
                            x, 1e-5)},
                 {g.dWq, fd_param(&AttnParams::Wq, p.Wq)},
                 {g.dWk, fd_param(&AttnParams::Wk, p.Wk)},
                 {g.dWv, fd_param(&AttnParams::Wv, p.Wv)}}));
    }
    r.pass = r.measured < r.limit;
    return r;
}

// Shared FD harness for the two prompt-attention operators, which have the
// same signature and output contract.
template <typename Fwd, typename Vjp>
inline CheckResult check_prompt_attention_grad(const std::string &name, double tol, Fwd fwd,
                                               Vjp vjp, std::uint64_t seed0) {
    CheckResult r{name, false, 0.0, tol, "context + mask cotangents vs FD, 10 seeds"};
    const int kk = 2, nn = 2, din = 5, d = 4, m = 6;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(seed0 + seed);
        AttnParams p = random_attn(rng, din, d);
        const Mat text = random_mat(rng, kk * nn, din);
        const Mat pixels = random_mat(rng, m, din);
        const Mat uc = random_mat(rng, kk * nn, d);
        const Mat um = random_mat(rng, m, kk);
        auto objective = [&](const Mat &t, const Mat &px, const AttnParams &pp) {
            const MpsaOutput out = fwd(t, px, pp);
            return inner(uc, out.context) + inner(um, out.mask_logits);
        };
        const MpsaGrads g = vjp(text, pixels, p, uc, um);
        AttnParams probe = p;
        auto fd_param = [&](Mat AttnParams::*field, const Mat &at) {
            return finite_diff_grad(
                [&](const Mat &w) {
                    probe = p;
                    probe.*field = w;
                    return objective(text, pixels, probe);
                },
                at, 1e-5);
        };
        r.measured = std::max(
            r.measured,
            fd_worst(
                {{g.dtext, finite_diff_grad(
                               [&](const Mat &t) { return objective(t, pixels, p); }, text,
                               1e-5)},
                 {g.dpixels, finite_diff_grad(
                                 [&](const Mat &px) { return objective(text, px, p); }, pixels,
                                 1e-5)},
                 {g.dWq, fd_param(&AttnParams::Wq, p.Wq)},
                 {g.dWk, fd_param(&AttnParams::Wk, p.Wk)},
                 {g.dWv, fd_param(&AttnParams::Wv, p.Wv)}}));
    }
    r.pass = r.measured < r.limit;
    return r;
}

inline CheckResult check_upsample_adjoint() {
    CheckResult r{"upsample-adjoint", false, 0.0, 1e-12,
                  "<U, up(X)> == <up^T(U), X> on random pairs"};
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(9000 + seed);
        const int h = 3, w = 4, hi = 7, wi = 9, kk = 2;
        const Mat x = random_mat(rng, h * w, kk);
        const Mat u = random_mat(rng, hi * wi, kk);
        const double lhs = inner(u, upsample(x, h, w, hi, wi));
        const double rhs = inner(upsample_vjp(u, h, w, hi, wi), x);
        r.measured = std::max(r.measured, std::abs(lhs - rhs));
    }
    r.pass = r.measured < r.limit;
    return r;
}

template <typename LossFn>
inline CheckResult check_loss_grad(const std::string &name, double tol, LossFn loss_fn,
                                   bool logits, std::uint64_t seed0) {
    CheckResult r{name, false, 0.0, tol, "analytic gradient vs FD, 10 seeds"};
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(seed0 + seed);
        const int m = 6, kk = 3;
        // Raw-prediction losses stay away from zero so the FD step cannot
        // cross the origin.
        const Mat pred = logits ? random_mat(rng, m, kk, -2.0, 2.0)
                                : random_mat(rng, m, kk, 0.1, 0.9);
        Mat ygt(m, kk);
        for (int i = 0; i < m; ++i) ygt(i, static_cast<int>(rng.uniform(0.0, kk - 1e-9))) = 1.0;
        std::vector<double> w(static_cast<std::size_t>(m), 1.0);
        w[0] = 0.0;
        w[1] = 0.5;
        const LossResult got = loss_fn(pred, ygt, &w);
        const Mat want = finite_diff_grad(
            [&](const Mat &pp) { return loss_fn(pp, ygt, &w).value; }, pred, 1e-6);
        r.measured = std::max(r.measured, max_rel_err(got.grad, want, 1e-8));
    }
    r.pass = r.measured < r.limit;
    return r;
}

inline CheckResult check_hiou_formula() {
    CheckResult r{"hiou-formula", false, 0.0, 0.05,
                  "(77.8, 91.9) -> 84.3 and (94.3, 94.2) -> 94.2"};
    r.measured = std::max(std::abs(harmonic_iou(0.778, 0.919) * 100.0 - 84.3),
                          std::abs(harmonic_iou(0.943, 0.942) * 100.0 - 94.2));
    r.pass = r.measured < r.limit;
    return r;
}

inline CheckResult check_ensemble_convexity() {
    CheckResult r{"ensemble-convexity", false, 0.0, 1e-15,
                  "min(Y, Y~) <= Y* <= max(Y, Y~) entrywise"};
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(11000 + seed);
        const Mat a = random_mat(rng, 6, 4, 0.0, 1.0);
        const Mat b = random_mat(rng, 6, 4, 0.0, 1.0);
        const double lam = rng.uniform(0.0, 1.0);
        for (std::size_t i = 0; i < a.size(); ++i) {
            const double y = lam * a.data[i] + (1.0 - lam) * b.data[i];
            const double lo = std::min(a.data[i], b.data[i]);
            const double hi = std::max(a.data[i], b.data[i]);
            r.measured = std::max({r.measured, lo - y, y - hi});
        }
    }
    r.pass = r.measured <= r.limit;
    return r;
}

} // namespace detail

// The release-gate invariant suite: marginal feasibility, the softmax
// correspondence, LP-oracle agreement, every reverse-mode operator against
// finite differences, the metric formula, and ensemble convexity.
inline std::vector<CheckResult> run_checks(const CheckOptions &opt = {}) {
    opt.validate();
    std::vector<CheckResult> out;
    out.push_back(detail::check_sinkhorn_feasibility());
    out.push_back(detail::check_softmax_reduction());
    auto [cost, plan] = detail::check_exact_ot();
    out.push_back(cost);
    out.push_back(plan);
    out.push_back(detail::check_sinkhorn_grad(opt.grad_tol));
    out.push_back(detail::check_mps_grad(opt.grad_tol));
    out.push_back(detail::check_self_attention_grad(opt.grad_tol));
    out.push_back(detail::check_cross_attention_grad(opt.grad_tol));
    out.push_back(detail::check_sinkformer_grad(opt.grad_tol));
    {
        SinkhornConfig cfg;
        cfg.epsilon = 0.05;
        cfg.max_iters = 4;
        cfg.tol = 0.0;
        out.push_back(detail::check_prompt_attention_grad(
            "mpsa-grad", opt.grad_tol,
            [&](const Mat &t, const Mat &px, const AttnParams &p) {
                return mpsa(t, px, p, 2, 2, cfg);
            },
            [&](const Mat &t, const Mat &px, const AttnParams &p, const Mat &uc, const Mat &um) {
                return mpsa_vjp(t, px, p, 2, 2, cfg, uc, um);
            },
            8000));
        out.push_back(detail::check_prompt_attention_grad(
            "softmax-attention-grad", opt.grad_tol,
            [](const Mat &t, const Mat &px, const AttnParams &p) {
                return softmax_prompt_attention(t, px, p, 2, 2);
            },
            [](const Mat &t, const Mat &px, const AttnParams &p, const Mat &uc, const Mat &um) {
                return softmax_prompt_attention_vjp(t, px, p, 2, 2, uc, um);
            },
            8500));
    }
    out.push_back(detail::check_upsample_adjoint());
    out.push_back(detail::check_loss_grad(
        "ce-loss-grad", opt.loss_grad_tol,
        [](const Mat &p, const Mat &y, const std::vector<double> *w) { return ce_loss(p, y, w); },
        true, 12000));
    out.push_back(detail::check_loss_grad(
        "focal-loss-grad", opt.loss_grad_tol,
        [](const Mat &p, const Mat &y, const std::vector<double> *w) {
            return focal_loss(p, y, 2.0, w);
        },
        true, 13000));
    out.push_back(detail::check_loss_grad(
        "dice-loss-grad", opt.loss_grad_tol,
        [](const Mat &p, const Mat &y, const std::vector<double> *w) {
            return dice_loss(p, y, w);
        },
        false, 14000));
    out.push_back(detail::check_hiou_formula());
    out.push_back(detail::check_ensemble_convexity());
    return out;
}

// One line per property; returns the number of failures.
inline int print_checks(const std::vector<CheckResult> &results, std::ostream &os) {
    int failed = 0;
    for (const auto &r : results) {
        char measured[40], limit[40];
        std::snprintf(measured, sizeof measured, "%.3g", r.measured);
        std::snprintf(limit, sizeof limit, "%.3g", r.limit);
        os << (r.pass ? "PASS " : "FAIL ") << r.name;
        for (std::size_t i = r.name.size(); i < 26; ++i) os << ' ';
        os << "measured " << measured << " (limit " << limit << ") - " << r.note << "\n";
        failed += r.pass ? 0 : 1;
    }
    return failed;
}

} // namespace sinkseg
