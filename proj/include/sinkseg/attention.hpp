#pragma once

#include <cmath>
#include <vector>

#include "sinkseg/mat.hpp"
#include "sinkseg/score_map.hpp"
#include "sinkseg/sinkhorn.hpp"

namespace sinkseg {

// ---------------------------------------------------------------------------
// Attention operators: plain softmax self/cross attention, Sinkhorn-normalized
// self attention, and multi-prompt Sinkhorn cross attention (MPSA), each with
// a reverse-mode companion so the decoder can train through them.
// ---------------------------------------------------------------------------

struct AttnParams {
    Mat Wq, Wk, Wv;  // D -> d projections
    int d = 0;

    double scale() const { return std::sqrt(static_cast<double>(d)); }

    void validate() const {
        if (d < 1) throw ShapeError("AttnParams: head dim must be >= 1");
        if (Wq.cols != d || Wk.cols != d || Wv.cols != d)
            throw ShapeError("AttnParams: projection output dims must equal d");
        if (Wq.rows != Wk.rows || Wq.rows != Wv.rows)
            throw ShapeError("AttnParams: projection input dims must agree");
        if (!all_finite(Wq) || !all_finite(Wk) || !all_finite(Wv))
            throw std::invalid_argument("AttnParams: non-finite weights");
    }
};

struct MpsaOutput {
    Mat context;      // K*N x d, one attended value row per (class, prompt)
    Mat mask_logits;  // M x K, plan-weighted prompt-summed scores
};

namespace detail {

// dZ for Y = row_softmax(Z) given dY: dZ = Y ⊙ (dY - rowsum(dY ⊙ Y)).
inline Mat softmax_vjp(const Mat &y, const Mat &dy) {
    Mat dz(y.rows, y.cols);
    for (int i = 0; i < y.rows; ++i) {
        double dot = 0.0;
        for (int j = 0; j < y.cols; ++j) dot += dy(i, j) * y(i, j);
        for (int j = 0; j < y.cols; ++j) dz(i, j) = y(i, j) * (dy(i, j) - dot);
    }
    return dz;
}

} // namespace detail

// ----------------------------- softmax family ------------------------------

// row_softmax(QK^T/sqrt(d)) V with Q, K, V all projected from x.
inline Mat self_attention(const Mat &x, const AttnParams &p) {
    p.validate();
    if (x.cols != p.Wq.rows) throw ShapeError("self_attention: input dim mismatch");
    const Mat q = matmul(x, p.Wq), k = matmul(x, p.Wk), v = matmul(x, p.Wv);
    const Mat a = row_softmax(scale(matmul(q, transpose(k)), 1.0 / p.scale()));
    return matmul(a, v);
}

struct SelfAttnGrads {
    Mat dx, dWq, dWk, dWv;
};

inline SelfAttnGrads self_attention_vjp(const Mat &x, const AttnParams &p, const Mat &upstream) {
    p.validate();
    const Mat q = matmul(x, p.Wq), k = matmul(x, p.Wk), v = matmul(x, p.Wv);
    const Mat a = row_softmax(scale(matmul(q, transpose(k)), 1.0 / p.scale()));

    const Mat da = matmul(upstream, transpose(v));
    const Mat dv = matmul(transpose(a), upstream);
    const Mat dz = scale(detail::softmax_vjp(a, da), 1.0 / p.scale());
    const Mat dq = matmul(dz, k);
    const Mat dk = matmul(transpose(dz), q);

    SelfAttnGrads g;
    g.dx = matmul(dq, transpose(p.Wq));
    add_in_place(g.dx, matmul(dk, transpose(p.Wk)));
    add_in_place(g.dx, matmul(dv, transpose(p.Wv)));
    g.dWq = matmul(transpose(x), dq);
    g.dWk = matmul(transpose(x), dk);
    g.dWv = matmul(transpose(x), dv);
    return g;
}

// Softmax over the pixel axis per text query: row_softmax(QK^T/sqrt(d)) V
// with Q from text and K, V from pixels.
inline Mat cross_attention(const Mat &text, const Mat &pixels, const AttnParams &p) {
    p.validate();
    if (text.cols != p.Wq.rows || pixels.cols != p.Wk.rows)
        throw ShapeError("cross_attention: input dim mismatch");
    const Mat q = matmul(text, p.Wq), k = matmul(pixels, p.Wk), v = matmul(pixels, p.Wv);
    const Mat a = row_softmax(scale(matmul(q, transpose(k)), 1.0 / p.scale()));
    return matmul(a, v);
}

struct CrossAttnGrads {
    Mat dtext, dpixels, dWq, dWk, dWv;
};

inline CrossAttnGrads cross_attention_vjp(const Mat &text, const Mat &pixels,
                                          const AttnParams &p, const Mat &upstream) {
    p.validate();
    const Mat q = matmul(text, p.Wq), k = matmul(pixels, p.Wk), v = matmul(pixels, p.Wv);
    const Mat a = row_softmax(scale(matmul(q, transpose(k)), 1.0 / p.scale()));

    const Mat da = matmul(upstream, transpose(v));
    const Mat dv = matmul(transpose(a), upstream);
    const Mat dz = scale(detail::softmax_vjp(a, da), 1.0 / p.scale());
    const Mat dq = matmul(dz, k);
    const Mat dk = matmul(transpose(dz), q);

    CrossAttnGrads g;
    g.dtext = matmul(dq, transpose(p.Wq));
    g.dpixels = matmul(dk, transpose(p.Wk));
    add_in_place(g.dpixels, matmul(dv, transpose(p.Wv)));
    g.dWq = matmul(transpose(text), dq);
    g.dWk = matmul(transpose(pixels), dk);
    g.dWv = matmul(transpose(pixels), dv);
    return g;
}

// --------------------------- Sinkhorn attention ----------------------------

// Self attention with the softmax replaced by a Sinkhorn plan: cost -QK^T,
// epsilon = sqrt(d) (the temperature role), uniform M x M marginals.
// max_iters == 1 is the documented softmax-equivalent half step (row update
// only), which equals self_attention scaled by 1/M.
inline Mat sinkformer_attention(const Mat &x, const AttnParams &p, const SinkhornConfig &cfg) {
    p.validate();
    cfg.validate();
    if (x.cols != p.Wq.rows) throw ShapeError("sinkformer_attention: input dim mismatch");
    const Mat q = matmul(x, p.Wq), k = matmul(x, p.Wk), v = matmul(x, p.Wv);
    const Mat cost = scale(matmul(q, transpose(k)), -1.0);
    const Marginals marg = Marginals::uniform(x.rows, x.rows);
    SinkhornConfig c = cfg;
    c.epsilon = p.scale();
    const Mat plan = (c.max_iters == 1) ? sinkhorn_one_step(cost, marg, c.epsilon)
                                        : sinkhorn_log(cost, marg, c).plan;
    return matmul(plan, v);
}

inline SelfAttnGrads sinkformer_attention_vjp(const Mat &x, const AttnParams &p,
                                              const SinkhornConfig &cfg, const Mat &upstream) {
    p.validate();
    cfg.validate();
    const Mat q = matmul(x, p.Wq), k = matmul(x, p.Wk), v = matmul(x, p.Wv);
    const Mat cost = scale(matmul(q, transpose(k)), -1.0);
    const Marginals marg = Marginals::uniform(x.rows, x.rows);
    SinkhornConfig c = cfg;
    c.epsilon = p.scale();

    Mat plan(x.rows, x.rows);
    Mat dcost(x.rows, x.rows);
    if (c.max_iters == 1) {
        plan = sinkhorn_one_step(cost, marg, c.epsilon);
        const Mat dplan = matmul(upstream, transpose(v));
        // plan row i = mu_i * softmax(-C_i/eps)
        Mat sm = plan;
        Mat dsm = dplan;
        for (int i = 0; i < sm.rows; ++i)
            for (int j = 0; j < sm.cols; ++j) {
                sm(i, j) *= static_cast<double>(x.rows);  // back to plain softmax
                dsm(i, j) *= marg.mu[static_cast<std::size_t>(i)];
            }
        dcost = scale(detail::softmax_vjp(sm, dsm), -1.0 / c.epsilon);
    } else {
        plan = sinkhorn_log(cost, marg, c).plan;
        const Mat dplan = matmul(upstream, transpose(v));
        dcost = sinkhorn_grad(cost, marg, c, dplan);
    }
    const Mat dv = matmul(transpose(plan), upstream);
    const Mat dg = scale(dcost, -1.0);  // cost = -QK^T
    const Mat dq = matmul(dg, k);
    const Mat dk = matmul(transpose(dg), q);

    SelfAttnGrads g;
    g.dx = matmul(dq, transpose(p.Wq));
    add_in_place(g.dx, matmul(dk, transpose(p.Wk)));
    add_in_place(g.dx, matmul(dv, transpose(p.Wv)));
    g.dWq = matmul(transpose(x), dq);
    g.dWk = matmul(transpose(x), dk);
    g.dWv = matmul(transpose(x), dv);
    return g;
}

// ------------------------------- MPSA --------------------------------------

namespace detail {

struct MpsaCache {
    Mat q, k, v;
    Mat g;                    // K*N x M raw scores, no sqrt(d) scaling
    std::vector<Mat> plans;   // per class, M x N
    std::vector<Mat> slices;  // per class, S_k = G_k^T, M x N
};

inline MpsaCache mpsa_forward_cache(const Mat &text, const Mat &pixels, const AttnParams &p,
                                    int kk, int nn, const SinkhornConfig &cfg) {
    p.validate();
    cfg.validate();
    if (kk < 1 || nn < 1 || text.rows != kk * nn)
        throw ShapeError("mpsa: text rows must equal K*N");
    if (text.cols != p.Wq.rows || pixels.cols != p.Wk.rows)
        throw ShapeError("mpsa: input dim mismatch");

    MpsaCache c;
    c.q = matmul(text, p.Wq);
    c.k = matmul(pixels, p.Wk);
    c.v = matmul(pixels, p.Wv);
    c.g = matmul(c.q, transpose(c.k));
    const int m = pixels.rows;
    const Marginals marg = Marginals::uniform(m, nn);
    for (int k = 0; k < kk; ++k) {
        Mat sk(m, nn);
        for (int i = 0; i < m; ++i)
            for (int n = 0; n < nn; ++n) sk(i, n) = c.g(k * nn + n, i);
        // Plans are shift invariant in the cost, so -S stands in for the
        // bounded-score form 1 - S; the Hadamard factor keeps S itself.
        const Mat cost = scale(sk, -1.0);
        c.plans.push_back(sinkhorn_log(cost, marg, cfg).plan);
        c.slices.push_back(std::move(sk));
    }
    return c;
}

} // namespace detail

// Cross attention with softmax replaced by per-class Sinkhorn plans over
// (pixels x prompts). Raw scores G = QK^T (no sqrt(d) scaling); per class
// S_k = G_k^T; attention weight of prompt n over pixels is column n of
// T*_k ⊙ S_k; context row k*N+n = that column^T · V; mask_logits[:,k] sums
// the same weights over prompts.
inline MpsaOutput mpsa(const Mat &text, const Mat &pixels, const AttnParams &p, int kk, int nn,
                       const SinkhornConfig &cfg) {
    const auto c = detail::mpsa_forward_cache(text, pixels, p, kk, nn, cfg);
    const int m = pixels.rows;
    MpsaOutput out;
    out.context = Mat(kk * nn, p.d);
    out.mask_logits = Mat(m, kk);
    for (int k = 0; k < kk; ++k) {
        const Mat &plan = c.plans[static_cast<std::size_t>(k)];
        const Mat &sk = c.slices[static_cast<std::size_t>(k)];
        for (int i = 0; i < m; ++i) {
            double rowsum = 0.0;
            for (int n = 0; n < nn; ++n) {
                const double w = plan(i, n) * sk(i, n);
                rowsum += w;
                for (int j = 0; j < p.d; ++j) out.context(k * nn + n, j) += w * c.v(i, j);
            }
            out.mask_logits(i, k) = rowsum;
        }
    }
    return out;
}

struct MpsaGrads {
    Mat dtext, dpixels, dWq, dWk, dWv;
};

// Reverse mode for mpsa given cotangents of both outputs. Either upstream may
// be empty (all zeros) by passing a correctly shaped zero matrix.
inline MpsaGrads mpsa_vjp(const Mat &text, const Mat &pixels, const AttnParams &p, int kk,
                          int nn, const SinkhornConfig &cfg, const Mat &d_context,
                          const Mat &d_mask_logits) {
    const auto c = detail::mpsa_forward_cache(text, pixels, p, kk, nn, cfg);
    const int m = pixels.rows;
    if (d_context.rows != kk * nn || d_context.cols != p.d)
        throw ShapeError("mpsa_vjp: d_context must be K*N x d");
    if (d_mask_logits.rows != m || d_mask_logits.cols != kk)
        throw ShapeError("mpsa_vjp: d_mask_logits must be M x K");

    const Marginals marg = Marginals::uniform(m, nn);
    Mat dg(kk * nn, m);
    Mat dv(m, p.d);
    for (int k = 0; k < kk; ++k) {
        const Mat &plan = c.plans[static_cast<std::size_t>(k)];
        const Mat &sk = c.slices[static_cast<std::size_t>(k)];
        // dW_k[m,n]: from context rows (via V) and from the mask reduction.
        Mat dw(m, nn);
        for (int i = 0; i < m; ++i)
            for (int n = 0; n < nn; ++n) {
                double s = d_mask_logits(i, k);
                for (int j = 0; j < p.d; ++j) s += d_context(k * nn + n, j) * c.v(i, j);
                dw(i, n) = s;
            }
        // dV accumulates plan-weighted upstream context rows.
        for (int i = 0; i < m; ++i)
            for (int n = 0; n < nn; ++n) {
                const double w = plan(i, n) * sk(i, n);
                for (int j = 0; j < p.d; ++j) dv(i, j) += w * d_context(k * nn + n, j);
            }

        Mat dplan = hadamard(dw, sk);
        Mat ds = hadamard(dw, plan);
        const Mat cost = scale(sk, -1.0);
        const Mat dcost = sinkhorn_grad(cost, marg, cfg, dplan);
        for (std::size_t i = 0; i < ds.size(); ++i) ds.data[i] -= dcost.data[i];

        for (int i = 0; i < m; ++i)
            for (int n = 0; n < nn; ++n) dg(k * nn + n, i) = ds(i, n);
    }

    const Mat dq = matmul(dg, c.k);
    const Mat dk = matmul(transpose(dg), c.q);

    MpsaGrads g;
    g.dtext = matmul(dq, transpose(p.Wq));
    g.dpixels = matmul(dk, transpose(p.Wk));
    add_in_place(g.dpixels, matmul(dv, transpose(p.Wv)));
    g.dWq = matmul(transpose(text), dq);
    g.dWk = matmul(transpose(pixels), dk);
    g.dWv = matmul(transpose(pixels), dv);
    return g;
}

// Ablation baseline with the same output contract as mpsa: plain softmax
// cross attention (scores G/sqrt(d), rows normalized over pixels) for the
// context, and a mask reduction symmetric to mpsa's with the softmax weights
// standing in for the plan: mask_logits[i,k] = sum_n A[k*N+n,i] * G[k*N+n,i].
inline MpsaOutput softmax_prompt_attention(const Mat &text, const Mat &pixels,
                                           const AttnParams &p, int kk, int nn) {
    p.validate();
    if (kk < 1 || nn < 1 || text.rows != kk * nn)
        throw ShapeError("softmax_prompt_attention: text rows must equal K*N");
    if (text.cols != p.Wq.rows || pixels.cols != p.Wk.rows)
        throw ShapeError("softmax_prompt_attention: input dim mismatch");
    const Mat q = matmul(text, p.Wq);
    const Mat k = matmul(pixels, p.Wk);
    const Mat v = matmul(pixels, p.Wv);
    const Mat g = matmul(q, transpose(k));
    const Mat a = row_softmax(scale(g, 1.0 / p.scale()));
    MpsaOutput out;
    out.context = matmul(a, v);
    out.mask_logits = Mat(pixels.rows, kk);
    for (int kcls = 0; kcls < kk; ++kcls)
        for (int i = 0; i < pixels.rows; ++i) {
            double s = 0.0;
            for (int n = 0; n < nn; ++n) s += a(kcls * nn + n, i) * g(kcls * nn + n, i);
            out.mask_logits(i, kcls) = s;
        }
    return out;
}

inline MpsaGrads softmax_prompt_attention_vjp(const Mat &text, const Mat &pixels,
                                              const AttnParams &p, int kk, int nn,
                                              const Mat &d_context, const Mat &d_mask_logits) {
    p.validate();
    if (kk < 1 || nn < 1 || text.rows != kk * nn)
        throw ShapeError("softmax_prompt_attention_vjp: text rows must equal K*N");
    if (d_context.rows != kk * nn || d_context.cols != p.d)
        throw ShapeError("softmax_prompt_attention_vjp: d_context must be K*N x d");
    if (d_mask_logits.rows != pixels.rows || d_mask_logits.cols != kk)
        throw ShapeError("softmax_prompt_attention_vjp: d_mask_logits must be M x K");
    const Mat q = matmul(text, p.Wq);
    const Mat k = matmul(pixels, p.Wk);
    const Mat v = matmul(pixels, p.Wv);
    const Mat g = matmul(q, transpose(k));
    const Mat a = row_softmax(scale(g, 1.0 / p.scale()));

    Mat da = matmul(d_context, transpose(v));
    const Mat dv = matmul(transpose(a), d_context);
    // Mask reduction touches A and G directly.
    Mat dg_direct(kk * nn, pixels.rows);
    for (int kcls = 0; kcls < kk; ++kcls)
        for (int i = 0; i < pixels.rows; ++i) {
            const double u = d_mask_logits(i, kcls);
            if (u == 0.0) continue;
            for (int n = 0; n < nn; ++n) {
                da(kcls * nn + n, i) += u * g(kcls * nn + n, i);
                dg_direct(kcls * nn + n, i) = u * a(kcls * nn + n, i);
            }
        }
    Mat dg = scale(detail::softmax_vjp(a, da), 1.0 / p.scale());
    add_in_place(dg, dg_direct);

    const Mat dq = matmul(dg, k);
    const Mat dk = matmul(transpose(dg), q);
    MpsaGrads out;
    out.dtext = matmul(dq, transpose(p.Wq));
    out.dpixels = matmul(dk, transpose(p.Wk));
    add_in_place(out.dpixels, matmul(dv, transpose(p.Wv)));
    out.dWq = matmul(transpose(text), dq);
    out.dWk = matmul(transpose(pixels), dk);
    out.dWv = matmul(transpose(pixels), dv);
    return out;
}

// Elementwise sigmoid of the mask logits.
inline Mat mask_head(const MpsaOutput &out) { return sigmoid(out.mask_logits); }

// ----------------------------- upsampling ----------------------------------

// Bilinear interpolation of per-class channels from an H x W grid (rows of
// mask indexed m = y*W + x) to H_I x W_I, align-corners-false convention:
// src = (dst + 0.5) * (src_size / dst_size) - 0.5, clamped at the border.
inline Mat upsample(const Mat &mask, int h, int w, int hi, int wi) {
    if (mask.rows != h * w) throw ShapeError("upsample: mask rows must equal H*W");
    if (hi < h || wi < w) throw SizeError("upsample: target must not be smaller than source");
    const int kk = mask.cols;
    Mat out(hi * wi, kk);
    for (int y = 0; y < hi; ++y) {
        double sy = (y + 0.5) * (static_cast<double>(h) / hi) - 0.5;
        sy = std::clamp(sy, 0.0, static_cast<double>(h - 1));
        const int y0 = static_cast<int>(sy);
        const int y1 = std::min(y0 + 1, h - 1);
        const double fy = sy - y0;
        for (int x = 0; x < wi; ++x) {
            double sx = (x + 0.5) * (static_cast<double>(w) / wi) - 0.5;
            sx = std::clamp(sx, 0.0, static_cast<double>(w - 1));
            const int x0 = static_cast<int>(sx);
            const int x1 = std::min(x0 + 1, w - 1);
            const double fx = sx - x0;
            for (int k = 0; k < kk; ++k) {
                const double top = (1.0 - fx) * mask(y0 * w + x0, k) + fx * mask(y0 * w + x1, k);
                const double bot = (1.0 - fx) * mask(y1 * w + x0, k) + fx * mask(y1 * w + x1, k);
                out(y * wi + x, k) = (1.0 - fy) * top + fy * bot;
            }
        }
    }
    return out;
}

// Adjoint of the (linear) upsample operator: scatters upstream cotangents
// back through the same interpolation weights.
inline Mat upsample_vjp(const Mat &upstream, int h, int w, int hi, int wi) {
    if (upstream.rows != hi * wi) throw ShapeError("upsample_vjp: upstream rows must equal HI*WI");
    if (hi < h || wi < w) throw SizeError("upsample_vjp: target must not be smaller than source");
    const int kk = upstream.cols;
    Mat out(h * w, kk);
    for (int y = 0; y < hi; ++y) {
        double sy = (y + 0.5) * (static_cast<double>(h) / hi) - 0.5;
        sy = std::clamp(sy, 0.0, static_cast<double>(h - 1));
        const int y0 = static_cast<int>(sy);
        const int y1 = std::min(y0 + 1, h - 1);
        const double fy = sy - y0;
        for (int x = 0; x < wi; ++x) {
            double sx = (x + 0.5) * (static_cast<double>(w) / wi) - 0.5;
            sx = std::clamp(sx, 0.0, static_cast<double>(w - 1));
            const int x0 = static_cast<int>(sx);
            const int x1 = std::min(x0 + 1, w - 1);
            const double fx = sx - x0;
            for (int k = 0; k < kk; ++k) {
                const double u = upstream(y * wi + x, k);
                out(y0 * w + x0, k) += (1.0 - fy) * (1.0 - fx) * u;
                out(y0 * w + x1, k) += (1.0 - fy) * fx * u;
                out(y1 * w + x0, k) += fy * (1.0 - fx) * u;
                out(y1 * w + x1, k) += fy * fx * u;
            }
        }
    }
    return out;
}

} // namespace sinkseg
