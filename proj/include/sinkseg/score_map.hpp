#pragma once

#include <vector>

#include "sinkseg/mat.hpp"
#include "sinkseg/sinkhorn.hpp"

namespace sinkseg {

// ---------------------------------------------------------------------------
// Text-pixel alignment: cosine score maps between prompt-conditioned class
// embeddings and pixel embeddings, plus the per-class Sinkhorn refinement
// that redistributes prompt mass across pixels.
// ---------------------------------------------------------------------------

struct EmbeddingBundle {
    Mat text;          // K*N x D, rows class-major: row k*N + n is prompt n of class k
    Mat pixels;        // M x D with M = H*W
    Mat global_token;  // 1 x D image-level token
    int K = 0, N = 0, D = 0, H = 0, W = 0;

    void validate() const {
        if (K < 1 || N < 1 || D < 1 || H < 1 || W < 1)
            throw ShapeError("EmbeddingBundle: all dims must be >= 1");
        if (text.rows != K * N || text.cols != D)
            throw ShapeError("EmbeddingBundle: text must be K*N x D");
        if (pixels.rows != H * W || pixels.cols != D)
            throw ShapeError("EmbeddingBundle: pixels must be H*W x D");
        if (global_token.rows != 1 || global_token.cols != D)
            throw ShapeError("EmbeddingBundle: global token must be 1 x D");
    }
};

// Pixel-major score layout: data[m][k*N + n].
struct ScoreMap {
    Mat data;  // M x K*N
    int K = 0, N = 0, H = 0, W = 0;

    void validate() const {
        if (K < 1 || N < 1 || H < 1 || W < 1)
            throw ShapeError("ScoreMap: all dims must be >= 1");
        if (data.rows != H * W || data.cols != K * N)
            throw ShapeError("ScoreMap: data must be H*W x K*N");
    }
};

struct RefinedScoreMap {
    Mat data;                // M x K, plan-weighted prompt-summed class scores
    std::vector<Mat> plans;  // K transport plans, each M x N
};

// Fuses the image-level token into each text row:
// row -> cat[ global ⊙ row , row ] · proj, proj mapping 2D -> D.
inline Mat relationship_descriptor(const Mat &text_raw, const Mat &global_token,
                                   const Mat &proj) {
    const int d = text_raw.cols;
    if (global_token.rows != 1 || global_token.cols != d)
        throw ShapeError("relationship_descriptor: global token must be 1 x D");
    if (proj.rows != 2 * d)
        throw ShapeError("relationship_descriptor: proj must map 2D -> D'");
    Mat cat(text_raw.rows, 2 * d);
    for (int r = 0; r < text_raw.rows; ++r) {
        for (int j = 0; j < d; ++j) {
            cat(r, j) = global_token(0, j) * text_raw(r, j);
            cat(r, d + j) = text_raw(r, j);
        }
    }
    return matmul(cat, proj);
}

// Unit-normalizes both embedding sets and takes all pairwise dot products:
// S[m][k*N+n] = <pixel_m, text_{k*N+n}>.
inline ScoreMap score_map(const EmbeddingBundle &bundle) {
    bundle.validate();
    ScoreMap out;
    out.K = bundle.K;
    out.N = bundle.N;
    out.H = bundle.H;
    out.W = bundle.W;
    out.data = matmul(l2_normalize_rows(bundle.pixels),
                      transpose(l2_normalize_rows(bundle.text)));
    return out;
}

namespace detail {

inline Mat class_slice(const Mat &score, int k, int n_prompts) {
    Mat s(score.rows, n_prompts);
    for (int m = 0; m < score.rows; ++m)
        for (int n = 0; n < n_prompts; ++n) s(m, n) = score(m, k * n_prompts + n);
    return s;
}

} // namespace detail

// Per class k: cost 1 - S_k, uniform marginals over M pixels and N prompts,
// plan T*_k from the log-domain solver, refined score
// data[:,k] = sum_n (T*_k ⊙ S_k)[:,n]. Plans are retained for export.
inline RefinedScoreMap mps(const ScoreMap &score, const SinkhornConfig &cfg) {
    score.validate();
    cfg.validate();
    const int m = score.data.rows, kk = score.K, nn = score.N;
    const Marginals marg = Marginals::uniform(m, nn);

    RefinedScoreMap out;
    out.data = Mat(m, kk);
    out.plans.reserve(static_cast<std::size_t>(kk));
    for (int k = 0; k < kk; ++k) {
        const Mat sk = detail::class_slice(score.data, k, nn);
        Mat cost(m, nn);
        for (std::size_t i = 0; i < cost.size(); ++i) cost.data[i] = 1.0 - sk.data[i];
        TransportPlan tp = sinkhorn_log(cost, marg, cfg);
        for (int i = 0; i < m; ++i) {
            double s = 0.0;
            for (int n = 0; n < nn; ++n) s += tp.plan(i, n) * sk(i, n);
            out.data(i, k) = s;
        }
        out.plans.push_back(std::move(tp.plan));
    }
    return out;
}

// Gradient of <upstream, mps(S).data> with respect to S (M x K*N).
// Two coupling paths per class: the direct Hadamard factor, and the plan's
// dependence on S through the cost 1 - S_k (dC/dS = -1).
inline Mat mps_grad(const ScoreMap &score, const SinkhornConfig &cfg, const Mat &upstream) {
    score.validate();
    cfg.validate();
    const int m = score.data.rows, kk = score.K, nn = score.N;
    if (upstream.rows != m || upstream.cols != kk)
        throw ShapeError("mps_grad: upstream must be M x K");
    const Marginals marg = Marginals::uniform(m, nn);

    Mat grad(m, kk * nn);
    for (int k = 0; k < kk; ++k) {
        const Mat sk = detail::class_slice(score.data, k, nn);
        Mat cost(m, nn);
        for (std::size_t i = 0; i < cost.size(); ++i) cost.data[i] = 1.0 - sk.data[i];
        TransportPlan tp = sinkhorn_log(cost, marg, cfg);

        // d<U_k, T_k(C)>/dC with U_k[m,n] = upstream[m,k] * S_k[m,n]
        Mat uk(m, nn);
        for (int i = 0; i < m; ++i)
            for (int n = 0; n < nn; ++n) uk(i, n) = upstream(i, k) * sk(i, n);
        const Mat dcost = sinkhorn_grad(cost, marg, cfg, uk);

        for (int i = 0; i < m; ++i)
            for (int n = 0; n < nn; ++n)
                grad(i, k * nn + n) = upstream(i, k) * tp.plan(i, n) - dcost(i, n);
    }
    return grad;
}

} // namespace sinkseg
