#pragma once

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

#include "sinkseg/attention.hpp"
#include "sinkseg/errors.hpp"
#include "sinkseg/mat.hpp"
#include "sinkseg/rng.hpp"
#include "sinkseg/score_map.hpp"
#include "sinkseg/sinkhorn.hpp"

namespace sinkseg {

// ---------------------------------------------------------------------------
// Two-path segmentation head. Decoder path: adapted pixels feed a stack of
// pre-norm blocks over the K*N text stream (prompt attention + feed-forward,
// both residual); the final block's mask logits pass through a sigmoid and
// bilinear upsampling. Score-map path: per-class transport plans refine the
// cosine score map, and the plan-weighted class scores are upsampled
// directly. Both paths share the pixel adapter and the text descriptor
// projection; raw text embeddings stay frozen.
// ---------------------------------------------------------------------------

enum class AttnKind { mpsa, softmax };

struct DecoderConfig {
    int layers = 3;
    int d = 16;        // attention dim
    int ffn_mult = 2;  // feed-forward expansion over the stream width
    int N = 0, K = 0;
    int hi = 0, wi = 0;                  // output (image) grid
    SinkhornConfig sink{0.05, 4, 0.0};   // fixed-iteration plans keep paths smooth
    AttnKind attn = AttnKind::mpsa;

    void validate() const {
        if (layers < 1) throw ConfigError("decoder: layers must be >= 1");
        if (d < 4) throw ConfigError("decoder: d must be >= 4");
        if (ffn_mult < 1) throw ConfigError("decoder: ffn_mult must be >= 1");
        if (K < 1 || N < 1) throw ConfigError("decoder: K and N must be >= 1");
        if (hi < 1 || wi < 1) throw ConfigError("decoder: output grid must be >= 1");
        sink.validate();
    }
};

struct DecoderLayer {
    AttnParams attn;                     // Wq/Wk/Wv: D -> d
    Mat wo;                              // d x D, context back to stream width
    Mat ln1_g, ln1_b, ln2_g, ln2_b;      // 1 x D
    Mat w1, b1;                          // D x F, 1 x F
    Mat w2, b2;                          // F x D, 1 x D
};

// Trainable state. adapter_* and rproj are shared by both paths; the layer
// stack belongs to the decoder path only.
struct PipelineParams {
    Mat adapter_w;  // D x D
    Mat adapter_b;  // 1 x D
    Mat rproj;      // 2D x D descriptor projection
    std::vector<DecoderLayer> layers;
};

// Stable enumeration of every trainable matrix (optimizer state keys off the
// order). The same walk doubles as the gradient container layout.
inline std::vector<Mat *> param_refs(PipelineParams &p) {
    std::vector<Mat *> out{&p.adapter_w, &p.adapter_b, &p.rproj};
    for (auto &l : p.layers) {
        out.push_back(&l.attn.Wq);
        out.push_back(&l.attn.Wk);
        out.push_back(&l.attn.Wv);
        out.push_back(&l.wo);
        out.push_back(&l.ln1_g);
        out.push_back(&l.ln1_b);
        out.push_back(&l.ln2_g);
        out.push_back(&l.ln2_b);
        out.push_back(&l.w1);
        out.push_back(&l.b1);
        out.push_back(&l.w2);
        out.push_back(&l.b2);
    }
    return out;
}

inline std::vector<const Mat *> param_refs(const PipelineParams &p) {
    std::vector<Mat *> mut = param_refs(const_cast<PipelineParams &>(p));
    return {mut.begin(), mut.end()};
}

inline PipelineParams zeros_like(const PipelineParams &p) {
    PipelineParams z = p;
    for (Mat *m : param_refs(z)) std::fill(m->data.begin(), m->data.end(), 0.0);
    return z;
}

// Identity adapter, passthrough descriptor ([0; I] so the raw text survives
// the projection untouched), small random attention/feed-forward weights.
inline PipelineParams pipeline_init(const DecoderConfig &cfg, int D, Rng &rng) {
    cfg.validate();
    if (D < 1) throw ConfigError("pipeline_init: D must be >= 1");
    const int F = D * cfg.ffn_mult;
    PipelineParams p;
    p.adapter_w = Mat::identity(D);
    p.adapter_b = Mat(1, D);
    p.rproj = Mat(2 * D, D);
    for (int j = 0; j < D; ++j) p.rproj(D + j, j) = 1.0;
    const double sq = 1.0 / std::sqrt(static_cast<double>(D));
    const double so = 1.0 / std::sqrt(static_cast<double>(cfg.d));
    const double sf = 1.0 / std::sqrt(static_cast<double>(F));
    p.layers.resize(static_cast<std::size_t>(cfg.layers));
    for (auto &l : p.layers) {
        l.attn.d = cfg.d;
        l.attn.Wq = Mat(D, cfg.d);
        l.attn.Wk = Mat(D, cfg.d);
        l.attn.Wv = Mat(D, cfg.d);
        for (auto &v : l.attn.Wq.data) v = sq * rng.normal();
        for (auto &v : l.attn.Wk.data) v = sq * rng.normal();
        for (auto &v : l.attn.Wv.data) v = sq * rng.normal();
        l.wo = Mat(cfg.d, D);
        for (auto &v : l.wo.data) v = so * rng.normal();
        l.ln1_g = Mat(1, D, 1.0);
        l.ln1_b = Mat(1, D);
        l.ln2_g = Mat(1, D, 1.0);
        l.ln2_b = Mat(1, D);
        l.w1 = Mat(D, F);
        for (auto &v : l.w1.data) v = sq * rng.normal();
        l.b1 = Mat(1, F);
        l.w2 = Mat(F, D);
        for (auto &v : l.w2.data) v = sf * rng.normal();
        l.b2 = Mat(1, D);
    }
    return p;
}

namespace detail {

struct LnCache {
    Mat xhat;
    std::vector<double> inv_std;
};

inline Mat layernorm(const Mat &x, const Mat &gain, const Mat &bias, LnCache *cache,
                     double eps = 1e-5) {
    Mat y(x.rows, x.cols);
    Mat xhat(x.rows, x.cols);
    std::vector<double> inv(static_cast<std::size_t>(x.rows));
    for (int i = 0; i < x.rows; ++i) {
        double mean = 0.0;
        for (int j = 0; j < x.cols; ++j) mean += x(i, j);
        mean /= x.cols;
        double var = 0.0;
        for (int j = 0; j < x.cols; ++j) {
            const double d = x(i, j) - mean;
            var += d * d;
        }
        var /= x.cols;
        const double is = 1.0 / std::sqrt(var + eps);
        inv[static_cast<std::size_t>(i)] = is;
        for (int j = 0; j < x.cols; ++j) {
            xhat(i, j) = (x(i, j) - mean) * is;
            y(i, j) = gain(0, j) * xhat(i, j) + bias(0, j);
        }
    }
    if (cache) {
        cache->xhat = std::move(xhat);
        cache->inv_std = std::move(inv);
    }
    return y;
}

inline Mat layernorm_vjp(const LnCache &c, const Mat &gain, const Mat &dy, Mat &dgain,
                         Mat &dbias) {
    Mat dx(dy.rows, dy.cols);
    for (int i = 0; i < dy.rows; ++i) {
        double m1 = 0.0, m2 = 0.0;
        for (int j = 0; j < dy.cols; ++j) {
            const double dxh = dy(i, j) * gain(0, j);
            m1 += dxh;
            m2 += dxh * c.xhat(i, j);
        }
        m1 /= dy.cols;
        m2 /= dy.cols;
        const double is = c.inv_std[static_cast<std::size_t>(i)];
        for (int j = 0; j < dy.cols; ++j) {
            const double dxh = dy(i, j) * gain(0, j);
            dx(i, j) = is * (dxh - m1 - c.xhat(i, j) * m2);
            dgain(0, j) += dy(i, j) * c.xhat(i, j);
            dbias(0, j) += dy(i, j);
        }
    }
    return dx;
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

inline double gelu_grad(double x) {
    constexpr double inv_sqrt2pi = 0.39894228040143268;
    return 0.5 * (1.0 + std::erf(x / std::sqrt(2.0))) + x * inv_sqrt2pi * std::exp(-0.5 * x * x);
}

inline Mat l2_rows(const Mat &x, std::vector<double> &norms) {
    norms.assign(static_cast<std::size_t>(x.rows), 0.0);
    Mat y(x.rows, x.cols);
    for (int i = 0; i < x.rows; ++i) {
        double s = 0.0;
        for (int j = 0; j < x.cols; ++j) s += x(i, j) * x(i, j);
        s = std::sqrt(s);
        norms[static_cast<std::size_t>(i)] = s;
        if (s == 0.0) continue;
        for (int j = 0; j < x.cols; ++j) y(i, j) = x(i, j) / s;
    }
    return y;
}

// xn: normalized rows; for a zero input row the gradient is zero.
inline Mat l2_rows_vjp(const Mat &xn, const std::vector<double> &norms, const Mat &dn) {
    Mat dx(dn.rows, dn.cols);
    for (int i = 0; i < dn.rows; ++i) {
        const double nrm = norms[static_cast<std::size_t>(i)];
        if (nrm == 0.0) continue;
        double dp = 0.0;
        for (int j = 0; j < dn.cols; ++j) dp += xn(i, j) * dn(i, j);
        for (int j = 0; j < dn.cols; ++j) dx(i, j) = (dn(i, j) - xn(i, j) * dp) / nrm;
    }
    return dx;
}

struct BlockCache {
    Mat x_in;
    LnCache ln1;
    Mat h1;
    Mat context;  // K*N x d
    Mat x_mid;
    LnCache ln2;
    Mat h2;
    Mat pre;  // K*N x F
    Mat act;
};

struct PipelineCache {
    Mat p_ad;            // M x D adapted pixels
    Mat g_ad;            // 1 x D mean of adapted pixels
    Mat cat;             // K*N x 2D descriptor input
    Mat text_desc;       // K*N x D
    Mat p_hat, t_hat;    // row-normalized
    std::vector<double> p_norms, t_norms;
    ScoreMap smap;       // M x K*N cosines
    Mat refined;         // M x K plan-weighted class scores
    std::vector<BlockCache> blocks;
    Mat mask_logits;     // M x K from the final block's attention
    Mat mask;            // sigmoid(mask_logits)
};

} // namespace detail

struct SegForward {
    Mat decoder_pred;   // HI*WI x K, entries in (0,1)
    Mat scoremap_pred;  // HI*WI x K, plan-averaged cosines in [-1,1]
    detail::PipelineCache cache;
};

inline SegForward forward_full(const EmbeddingBundle &bundle, const DecoderConfig &cfg,
                               const PipelineParams &params) {
    bundle.validate();
    cfg.validate();
    if (cfg.K != bundle.K || cfg.N != bundle.N)
        throw ShapeError("decoder: K/N mismatch with bundle");
    if (static_cast<int>(params.layers.size()) != cfg.layers)
        throw ShapeError("decoder: layer count mismatch");
    const int m = bundle.H * bundle.W;
    const int D = bundle.D;
    const int kn = cfg.K * cfg.N;

    detail::PipelineCache c;
    c.p_ad = matmul(bundle.pixels, params.adapter_w);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < D; ++j) c.p_ad(i, j) += params.adapter_b(0, j);
    c.g_ad = Mat(1, D);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < D; ++j) c.g_ad(0, j) += c.p_ad(i, j) / m;

    c.cat = Mat(kn, 2 * D);
    for (int r = 0; r < kn; ++r)
        for (int j = 0; j < D; ++j) {
            c.cat(r, j) = c.g_ad(0, j) * bundle.text(r, j);
            c.cat(r, D + j) = bundle.text(r, j);
        }
    c.text_desc = matmul(c.cat, params.rproj);

    c.p_hat = detail::l2_rows(c.p_ad, c.p_norms);
    c.t_hat = detail::l2_rows(c.text_desc, c.t_norms);
    c.smap = ScoreMap{matmul(c.p_hat, transpose(c.t_hat)), cfg.K, cfg.N, bundle.H, bundle.W};
    c.refined = mps(c.smap, cfg.sink).data;

    Mat x = c.text_desc;
    c.blocks.resize(static_cast<std::size_t>(cfg.layers));
    for (int l = 0; l < cfg.layers; ++l) {
        auto &b = c.blocks[static_cast<std::size_t>(l)];
        const auto &lay = params.layers[static_cast<std::size_t>(l)];
        b.x_in = std::move(x);
        b.h1 = detail::layernorm(b.x_in, lay.ln1_g, lay.ln1_b, &b.ln1);
        MpsaOutput att = cfg.attn == AttnKind::mpsa
                             ? mpsa(b.h1, c.p_ad, lay.attn, cfg.K, cfg.N, cfg.sink)
                             : softmax_prompt_attention(b.h1, c.p_ad, lay.attn, cfg.K, cfg.N);
        b.context = std::move(att.context);
        if (l == cfg.layers - 1) c.mask_logits = std::move(att.mask_logits);
        b.x_mid = add(b.x_in, matmul(b.context, lay.wo));
        b.h2 = detail::layernorm(b.x_mid, lay.ln2_g, lay.ln2_b, &b.ln2);
        b.pre = matmul(b.h2, lay.w1);
        for (int r = 0; r < kn; ++r)
            for (int j = 0; j < b.pre.cols; ++j) b.pre(r, j) += lay.b1(0, j);
        b.act = Mat(b.pre.rows, b.pre.cols);
        for (std::size_t i = 0; i < b.pre.size(); ++i)
            b.act.data[i] = detail::gelu(b.pre.data[i]);
        x = add(b.x_mid, matmul(b.act, lay.w2));
        for (int r = 0; r < kn; ++r)
            for (int j = 0; j < D; ++j) x(r, j) += lay.b2(0, j);
    }
    // Same marginal normalization as the score-map path below: the plan rows
    // sum to 1/M, so the raw reduction is pinned to [-max|S|/M, max|S|/M] and
    // the sigmoid could never saturate at desk scale. Scaling by M feeds it
    // plan-weighted average scores instead.
    c.mask = sigmoid(scale(c.mask_logits, static_cast<double>(m)));

    SegForward out;
    out.decoder_pred = upsample(c.mask, bundle.H, bundle.W, cfg.hi, cfg.wi);
    // Plan rows carry mass 1/M, so the refined scores live in [-1/M, 1/M];
    // scaling by M restores plan-weighted-average cosines in [-1,1], keeping
    // this path comparable with the sigmoid decoder path. Argmax unchanged.
    out.scoremap_pred =
        upsample(scale(c.refined, static_cast<double>(m)), bundle.H, bundle.W, cfg.hi, cfg.wi);
    out.cache = std::move(c);
    return out;
}

inline Mat decoder_forward(const EmbeddingBundle &bundle, const DecoderConfig &cfg,
                           const PipelineParams &params) {
    return forward_full(bundle, cfg, params).decoder_pred;
}

// Reverse mode for both paths. Returns gradients in a PipelineParams-shaped
// container; raw text embeddings are frozen so their cotangent is dropped.
inline PipelineParams backward_full(const EmbeddingBundle &bundle, const DecoderConfig &cfg,
                                    const PipelineParams &params, const SegForward &fwd,
                                    const Mat &d_decoder_pred, const Mat &d_scoremap_pred) {
    const auto &c = fwd.cache;
    const int m = bundle.H * bundle.W;
    const int D = bundle.D;
    const int kn = cfg.K * cfg.N;
    if (d_decoder_pred.rows != cfg.hi * cfg.wi || d_decoder_pred.cols != cfg.K)
        throw ShapeError("backward_full: d_decoder_pred shape");
    if (d_scoremap_pred.rows != cfg.hi * cfg.wi || d_scoremap_pred.cols != cfg.K)
        throw ShapeError("backward_full: d_scoremap_pred shape");
    PipelineParams g = zeros_like(params);

    // Decoder path: upsample -> sigmoid -> blocks in reverse.
    const Mat dmask = upsample_vjp(d_decoder_pred, bundle.H, bundle.W, cfg.hi, cfg.wi);
    Mat dlogits(m, cfg.K);
    for (std::size_t i = 0; i < dlogits.size(); ++i)
        dlogits.data[i] = m * dmask.data[i] * c.mask.data[i] * (1.0 - c.mask.data[i]);

    Mat dx(kn, D);
    Mat dp_ad(m, D);
    for (int l = cfg.layers - 1; l >= 0; --l) {
        const auto &b = c.blocks[static_cast<std::size_t>(l)];
        const auto &lay = params.layers[static_cast<std::size_t>(l)];
        auto &gl = g.layers[static_cast<std::size_t>(l)];

        Mat dact = matmul(dx, transpose(lay.w2));
        add_in_place(gl.w2, matmul(transpose(b.act), dx));
        for (int r = 0; r < kn; ++r)
            for (int j = 0; j < D; ++j) gl.b2(0, j) += dx(r, j);
        Mat dpre(b.pre.rows, b.pre.cols);
        for (std::size_t i = 0; i < dpre.size(); ++i)
            dpre.data[i] = dact.data[i] * detail::gelu_grad(b.pre.data[i]);
        add_in_place(gl.w1, matmul(transpose(b.h2), dpre));
        for (int r = 0; r < kn; ++r)
            for (int j = 0; j < dpre.cols; ++j) gl.b1(0, j) += dpre(r, j);
        const Mat dh2 = matmul(dpre, transpose(lay.w1));
        Mat dx_mid = detail::layernorm_vjp(b.ln2, lay.ln2_g, dh2, gl.ln2_g, gl.ln2_b);
        add_in_place(dx_mid, dx);

        const Mat dctx = matmul(dx_mid, transpose(lay.wo));
        add_in_place(gl.wo, matmul(transpose(b.context), dx_mid));
        const Mat dmask_l = l == cfg.layers - 1 ? dlogits : Mat(m, cfg.K);
        const MpsaGrads ag =
            cfg.attn == AttnKind::mpsa
                ? mpsa_vjp(b.h1, c.p_ad, lay.attn, cfg.K, cfg.N, cfg.sink, dctx, dmask_l)
                : softmax_prompt_attention_vjp(b.h1, c.p_ad, lay.attn, cfg.K, cfg.N, dctx,
                                               dmask_l);
        add_in_place(gl.attn.Wq, ag.dWq);
        add_in_place(gl.attn.Wk, ag.dWk);
        add_in_place(gl.attn.Wv, ag.dWv);
        add_in_place(dp_ad, ag.dpixels);
        Mat dx_in = detail::layernorm_vjp(b.ln1, lay.ln1_g, ag.dtext, gl.ln1_g, gl.ln1_b);
        add_in_place(dx_in, dx_mid);
        dx = std::move(dx_in);
    }
    Mat dtext_desc = std::move(dx);

    // Score-map path: upsample -> M-scale -> plan refinement -> cosines.
    Mat dref = upsample_vjp(d_scoremap_pred, bundle.H, bundle.W, cfg.hi, cfg.wi);
    for (auto &v : dref.data) v *= m;
    const Mat ds = mps_grad(c.smap, cfg.sink, dref);
    add_in_place(dp_ad, detail::l2_rows_vjp(c.p_hat, c.p_norms, matmul(ds, c.t_hat)));
    add_in_place(dtext_desc,
                 detail::l2_rows_vjp(c.t_hat, c.t_norms, matmul(transpose(ds), c.p_hat)));

    // Descriptor: text_desc = cat(g ⊙ t, t) · rproj; only the g block moves.
    add_in_place(g.rproj, matmul(transpose(c.cat), dtext_desc));
    const Mat dcat = matmul(dtext_desc, transpose(params.rproj));
    Mat dg_ad(1, D);
    for (int r = 0; r < kn; ++r)
        for (int j = 0; j < D; ++j) dg_ad(0, j) += dcat(r, j) * bundle.text(r, j);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < D; ++j) dp_ad(i, j) += dg_ad(0, j) / m;

    add_in_place(g.adapter_w, matmul(transpose(bundle.pixels), dp_ad));
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < D; ++j) g.adapter_b(0, j) += dp_ad(i, j);
    return g;
}

// ------------------------------- ensemble ----------------------------------

struct SegOutput {
    Mat decoder_pred;
    Mat scoremap_pred;
    Mat ensemble_pred;  // lambda * decoder + (1 - lambda) * scoremap
    double lambda = 0.5;
};

inline SegOutput ensemble(const Mat &decoder_pred, const Mat &scoremap_pred, double lambda) {
    if (!(lambda >= 0.0 && lambda <= 1.0))
        throw ConfigError("ensemble: lambda must be in [0,1]");
    require_same_shape(decoder_pred, scoremap_pred, "ensemble");
    SegOutput out;
    out.lambda = lambda;
    out.decoder_pred = decoder_pred;
    out.scoremap_pred = scoremap_pred;
    out.ensemble_pred = add(scale(decoder_pred, lambda), scale(scoremap_pred, 1.0 - lambda));
    return out;
}

} // namespace sinkseg
