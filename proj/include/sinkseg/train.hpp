#pragma once

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

#include "sinkseg/decoder.hpp"
#include "sinkseg/errors.hpp"
#include "sinkseg/losses.hpp"
#include "sinkseg/metrics.hpp"
#include "sinkseg/scene.hpp"

namespace sinkseg {

// ---------------------------------------------------------------------------
// Full-batch training of the two-path head. Inductive runs restrict both the
// class set and the loss to seen classes; transductive runs switch after the
// halfway point to all classes plus confidence-gated pseudo-labels on pixels
// whose ground truth is hidden. Ground truth flows only through LabelGuard.
// ---------------------------------------------------------------------------

struct OptConfig {
    double lr = 1e-3;
    double weight_decay = 1e-4;
    double beta1 = 0.9, beta2 = 0.999;
    double eps = 1e-8;

    void validate() const {
        if (!(lr > 0.0) || weight_decay < 0.0) throw ConfigError("optimizer: bad lr/decay");
        if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
            throw ConfigError("optimizer: betas must be in [0,1)");
        if (!(eps > 0.0)) throw ConfigError("optimizer: eps must be > 0");
    }
};

// Adam with decoupled weight decay. Moment buffers are keyed by the stable
// param_refs ordering and sized lazily on the first step.
struct AdamW {
    OptConfig cfg;
    std::vector<Mat> m, v;
    long t = 0;

    explicit AdamW(const OptConfig &c) : cfg(c) { cfg.validate(); }

    void step(const std::vector<Mat *> &params, const std::vector<const Mat *> &grads) {
        if (params.size() != grads.size()) throw ShapeError("AdamW: param/grad count mismatch");
        if (m.empty()) {
            for (const Mat *p : params) {
                m.emplace_back(p->rows, p->cols);
                v.emplace_back(p->rows, p->cols);
            }
        }
        if (m.size() != params.size()) throw ShapeError("AdamW: state size mismatch");
        ++t;
        const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
        for (std::size_t i = 0; i < params.size(); ++i) {
            Mat &p = *params[i];
            const Mat &g = *grads[i];
            require_same_shape(p, g, "AdamW::step");
            for (std::size_t j = 0; j < p.size(); ++j) {
                p.data[j] -= cfg.lr * cfg.weight_decay * p.data[j];
                m[i].data[j] = cfg.beta1 * m[i].data[j] + (1.0 - cfg.beta1) * g.data[j];
                v[i].data[j] =
                    cfg.beta2 * v[i].data[j] + (1.0 - cfg.beta2) * g.data[j] * g.data[j];
                const double mh = m[i].data[j] / bc1;
                const double vh = v[i].data[j] / bc2;
                p.data[j] -= cfg.lr * mh / (std::sqrt(vh) + cfg.eps);
            }
        }
    }
};

struct TrainConfig {
    int steps = 200;
    double lambda = 0.5;  // ensemble balance for pseudo-labels and eval
    // Confidence gate on the ensemble value. Ensemble scores for classes the
    // decoder has never trained on are bounded well below 1 by the prompt
    // cosine scale of the score-map path, so a gate near 0.9 never admits a
    // pixel at this scale; 0.4 admits the confident majority while still
    // masking ambiguous pixels.
    double pseudo_threshold = 0.4;
    int pseudo_every = 50;  // refresh period in the transductive half
    LossWeights loss;
    OptConfig opt;
    DecoderConfig dec;  // dims must match the scene/bundle, dec.K = all classes

    void validate() const {
        if (steps < 0) throw ConfigError("train: steps must be >= 0");
        if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("train: lambda in [0,1]");
        if (!(pseudo_threshold >= 0.0 && pseudo_threshold <= 1.0))
            throw ConfigError("train: pseudo threshold in [0,1]");
        if (pseudo_every < 1) throw ConfigError("train: pseudo_every must be >= 1");
        loss.validate();
        opt.validate();
        dec.validate();
    }
};

struct TrainResult {
    PipelineParams params;
    std::vector<double> loss_trace;  // one entry per step taken
    bool diverged = false;
    long label_violations = 0;  // unrestricted guard reads observed while training
};

inline std::vector<int> seen_classes(const ToyScene &s) {
    std::vector<int> out;
    for (int k = 0; k < s.K; ++k)
        if (s.seen_mask[static_cast<std::size_t>(k)]) out.push_back(k);
    return out;
}

// Bundle restricted to a class subset (text rows stay class-major).
inline EmbeddingBundle slice_bundle(const EmbeddingBundle &b, const std::vector<int> &classes) {
    if (classes.empty()) throw ConfigError("slice_bundle: empty class list");
    EmbeddingBundle out = b;
    out.K = static_cast<int>(classes.size());
    out.text = Mat(out.K * b.N, b.D);
    for (int ci = 0; ci < out.K; ++ci) {
        const int cls = classes[static_cast<std::size_t>(ci)];
        if (cls < 0 || cls >= b.K) throw ConfigError("slice_bundle: class id out of range");
        for (int n = 0; n < b.N; ++n)
            for (int j = 0; j < b.D; ++j)
                out.text(ci * b.N + n, j) = b.text(cls * b.N + n, j);
    }
    out.validate();
    return out;
}

inline SegOutput predict_full(const EmbeddingBundle &bundle, const DecoderConfig &dcfg,
                              const PipelineParams &params, double lambda) {
    const SegForward f = forward_full(bundle, dcfg, params);
    return ensemble(f.decoder_pred, f.scoremap_pred, lambda);
}

inline Metrics evaluate(const ToyScene &scene, const EmbeddingBundle &bundle,
                        const DecoderConfig &dcfg, const PipelineParams &params, double lambda) {
    const SegOutput p = predict_full(bundle, dcfg, params, lambda);
    return segmentation_metrics(p.ensemble_pred, scene.labels, scene.seen_mask);
}

namespace detail {

struct Targets {
    Mat ygt;                // npix x classes one-hot (zero rows where masked)
    std::vector<double> w;  // per-pixel loss weight, 0 masks the pixel
};

// Sticky pseudo-label update for the self-training half. Unlabeled pixels
// belong to the unseen pool by protocol, so a refresh assigns the ensemble
// argmax over unseen classes wherever it clears the threshold; existing
// assignments may be relabeled by a newly confident refresh but never drop
// out, which keeps the positive set from collapsing between refreshes.
// pseudo holds -1 for unassigned pixels and is ignored on seen pixels.
inline void refresh_pseudo_labels(const LabelGuard &guard, const Mat &ensemble_pred, double thr,
                                  int kk, std::vector<int> &pseudo) {
    const std::size_t npix = guard.size();
    if (ensemble_pred.rows != static_cast<int>(npix) || ensemble_pred.cols != kk)
        throw ShapeError("refresh_pseudo_labels: prediction shape mismatch");
    pseudo.resize(npix, -1);
    for (std::size_t i = 0; i < npix; ++i) {
        if (guard.visible(i)) continue;
        int best = -1;
        for (int k = 0; k < kk; ++k) {
            if (guard.is_seen(k)) continue;
            if (best < 0 ||
                ensemble_pred(static_cast<int>(i), k) > ensemble_pred(static_cast<int>(i), best))
                best = k;
        }
        if (best >= 0 && ensemble_pred(static_cast<int>(i), best) >= thr) pseudo[i] = best;
    }
}

// Full-class targets: seen pixels always keep their ground-truth class
// regardless of any prediction; hidden pixels use their pseudo-label when
// assigned and are masked out of the loss otherwise.
inline Targets pseudo_targets(const LabelGuard &guard, const std::vector<int> &pseudo, int kk,
                              bool &any_pseudo) {
    const std::size_t npix = guard.size();
    if (pseudo.size() != npix) throw ShapeError("pseudo_targets: label count mismatch");
    Targets tg;
    tg.ygt = Mat(static_cast<int>(npix), kk);
    tg.w.assign(npix, 0.0);
    any_pseudo = false;
    for (std::size_t i = 0; i < npix; ++i) {
        if (const auto cls = guard.visible(i)) {
            tg.ygt(static_cast<int>(i), *cls) = 1.0;
            tg.w[i] = 1.0;
        } else if (pseudo[i] >= 0) {
            if (pseudo[i] >= kk) throw ShapeError("pseudo_targets: label out of range");
            tg.ygt(static_cast<int>(i), pseudo[i]) = 1.0;
            tg.w[i] = 1.0;
            any_pseudo = true;
        }
    }
    return tg;
}

// One optimizer update; returns the loss. Non-finite losses leave the
// parameters untouched so the caller can abort with a clean trace.
inline double train_step(const EmbeddingBundle &b, const DecoderConfig &dcfg,
                         const TrainConfig &tcfg, PipelineParams &params, AdamW &opt,
                         const Targets &tg) {
    const SegForward f = forward_full(b, dcfg, params);
    const TotalLoss tl =
        loss_total(f.decoder_pred, f.scoremap_pred, tg.ygt, tcfg.loss, &tg.w);
    if (!std::isfinite(tl.value)) return tl.value;
    const PipelineParams grads =
        backward_full(b, dcfg, params, f, tl.grad_decoder, tl.grad_scoremap);
    opt.step(param_refs(params), param_refs(grads));
    return tl.value;
}

inline TrainResult train_loop(const ToyScene &scene, const EmbeddingBundle &bundle,
                              const TrainConfig &cfg, PipelineParams params,
                              bool transductive) {
    cfg.validate();
    if (cfg.dec.K != scene.K || cfg.dec.hi != scene.HI || cfg.dec.wi != scene.WI)
        throw ConfigError("train: decoder config must match the scene dims");
    const LabelGuard guard(scene);
    const std::size_t npix = guard.size();

    const std::vector<int> seen = seen_classes(scene);
    const EmbeddingBundle sliced = slice_bundle(bundle, seen);
    DecoderConfig dcfg_s = cfg.dec;
    dcfg_s.K = static_cast<int>(seen.size());
    std::vector<int> col(static_cast<std::size_t>(scene.K), -1);
    for (std::size_t i = 0; i < seen.size(); ++i)
        col[static_cast<std::size_t>(seen[i])] = static_cast<int>(i);

    Targets tg_seen;
    tg_seen.ygt = Mat(static_cast<int>(npix), dcfg_s.K);
    tg_seen.w.assign(npix, 0.0);
    for (std::size_t i = 0; i < npix; ++i)
        if (const auto cls = guard.visible(i)) {
            tg_seen.ygt(static_cast<int>(i), col[static_cast<std::size_t>(*cls)]) = 1.0;
            tg_seen.w[i] = 1.0;
        }

    AdamW opt(cfg.opt);
    TrainResult out;
    const int half = cfg.steps / 2;
    bool any_pseudo = false;
    std::vector<int> pseudo(npix, -1);
    Targets tg_full;

    for (int s = 0; s < cfg.steps; ++s) {
        const bool phase2 = transductive && s >= half;
        if (phase2 && (s - half) % cfg.pseudo_every == 0) {
            // Self-training labels from the model's own ensemble; hidden
            // ground truth is never consulted and seen labels always win.
            const SegOutput p = predict_full(bundle, cfg.dec, params, cfg.lambda);
            refresh_pseudo_labels(guard, p.ensemble_pred, cfg.pseudo_threshold, scene.K, pseudo);
            tg_full = pseudo_targets(guard, pseudo, scene.K, any_pseudo);
        }
        const double loss = phase2 && any_pseudo
                                ? train_step(bundle, cfg.dec, cfg, params, opt, tg_full)
                                : train_step(sliced, dcfg_s, cfg, params, opt, tg_seen);
        out.loss_trace.push_back(loss);
        if (!std::isfinite(loss)) {
            out.diverged = true;
            break;
        }
    }
    out.params = std::move(params);
    out.label_violations = guard.violations;
    return out;
}

} // namespace detail

inline TrainResult train_inductive(const ToyScene &scene, const EmbeddingBundle &bundle,
                                   const TrainConfig &cfg, PipelineParams params) {
    return detail::train_loop(scene, bundle, cfg, std::move(params), false);
}

// First half identical to inductive training; the second half adds
// confidence-gated pseudo-labels for hidden pixels. An empty pseudo set
// falls back to the seen-class step, so a threshold no prediction reaches
// reduces to plain inductive training with the same optimizer state.
inline TrainResult train_transductive(const ToyScene &scene, const EmbeddingBundle &bundle,
                                      const TrainConfig &cfg, PipelineParams params) {
    return detail::train_loop(scene, bundle, cfg, std::move(params), true);
}

// Convenience for the fully-supervised mode: every class marked seen.
inline ToyScene with_all_seen(ToyScene scene) {
    std::fill(scene.seen_mask.begin(), scene.seen_mask.end(), 1);
    return scene;
}

} // namespace sinkseg
