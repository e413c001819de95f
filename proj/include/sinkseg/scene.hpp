#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <utility>
#include <vector>

#include "sinkseg/errors.hpp"
#include "sinkseg/mat.hpp"
#include "sinkseg/rng.hpp"
#include "sinkseg/score_map.hpp"

namespace sinkseg {

// ---------------------------------------------------------------------------
// Synthetic desk-scale scenes: K orthonormal class prototypes, N jittered
// unit prompts per class, a Voronoi label partition of the feature grid, and
// noisy pixel embeddings planted on the prototypes. Ground truth lives on an
// integer-multiple image grid obtained by block upscaling.
// ---------------------------------------------------------------------------

struct SceneConfig {
    int K = 4, N = 3, D = 24;
    int H = 8, W = 8;        // feature grid
    int HI = 16, WI = 16;    // image (ground-truth) grid
    double noise = 0.3;      // pixel embedding jitter, std per coordinate
    double prompt_spread = 0.3;  // prompt jitter orthogonal to the prototype
    int n_seen = 3;          // classes 0..n_seen-1 are seen during training
    std::uint64_t seed = 0;

    void validate() const {
        if (K < 1 || N < 1 || D < 1 || H < 1 || W < 1) throw ConfigError("scene: dims must be >= 1");
        if (K > D) throw ConfigError("scene: need K <= D for orthonormal prototypes");
        if (HI < H || WI < W || HI % H != 0 || WI % W != 0)
            throw ConfigError("scene: image grid must be an integer multiple of the feature grid");
        if (noise < 0.0 || prompt_spread < 0.0) throw ConfigError("scene: jitter must be >= 0");
        if (n_seen < 1 || n_seen > K) throw ConfigError("scene: n_seen must be in [1, K]");
        if (K > H * W) throw ConfigError("scene: need K <= H*W distinct region centers");
    }
};

struct ToyScene {
    Mat pixels;                     // H*W x D planted embeddings
    std::vector<int> labels;        // HI*WI ground-truth class ids, row-major
    std::vector<int> grid_labels;   // H*W class ids on the feature grid
    std::vector<char> seen_mask;          // per class
    Mat prototypes;                 // K x D orthonormal rows
    int K = 0, H = 0, W = 0, HI = 0, WI = 0;
    std::uint64_t seed = 0;
};

namespace detail {

// Gram-Schmidt rows of a random Gaussian draw; rejects near-dependent draws.
inline Mat orthonormal_rows(Rng &rng, int k, int d) {
    Mat p(k, d);
    for (int i = 0; i < k; ++i) {
        for (int attempt = 0;; ++attempt) {
            if (attempt > 64) throw EvalError("orthonormal_rows: degenerate draws");
            for (int j = 0; j < d; ++j) p(i, j) = rng.normal();
            for (int prev = 0; prev < i; ++prev) {
                double dp = 0.0;
                for (int j = 0; j < d; ++j) dp += p(i, j) * p(prev, j);
                for (int j = 0; j < d; ++j) p(i, j) -= dp * p(prev, j);
            }
            double nrm = 0.0;
            for (int j = 0; j < d; ++j) nrm += p(i, j) * p(i, j);
            nrm = std::sqrt(nrm);
            if (nrm > 1e-8) {
                for (int j = 0; j < d; ++j) p(i, j) /= nrm;
                break;
            }
        }
    }
    return p;
}

} // namespace detail

// Nearest-prototype classification of embedding rows — the Bayes-optimal
// decision rule for isotropic planted noise. Ties break to the lowest id.
inline std::vector<int> nearest_prototype(const Mat &points, const Mat &prototypes) {
    if (points.cols != prototypes.cols) throw ShapeError("nearest_prototype: dim mismatch");
    std::vector<int> out(static_cast<std::size_t>(points.rows));
    for (int i = 0; i < points.rows; ++i) {
        int best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (int k = 0; k < prototypes.rows; ++k) {
            double d2 = 0.0;
            for (int j = 0; j < points.cols; ++j) {
                const double t = points(i, j) - prototypes(k, j);
                d2 += t * t;
            }
            if (d2 < best_d) {
                best_d = d2;
                best = k;
            }
        }
        out[static_cast<std::size_t>(i)] = best;
    }
    return out;
}

inline std::pair<ToyScene, EmbeddingBundle> gen_toy_scene(const SceneConfig &cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    const int m = cfg.H * cfg.W;

    ToyScene scene;
    scene.K = cfg.K;
    scene.H = cfg.H;
    scene.W = cfg.W;
    scene.HI = cfg.HI;
    scene.WI = cfg.WI;
    scene.seed = cfg.seed;
    scene.prototypes = detail::orthonormal_rows(rng, cfg.K, cfg.D);

    // Prompts: prototype plus spread-scaled jitter orthogonal to it, then
    // renormalized, so every prompt keeps the same cosine-ranked class.
    Mat text(cfg.K * cfg.N, cfg.D);
    for (int k = 0; k < cfg.K; ++k)
        for (int n = 0; n < cfg.N; ++n) {
            std::vector<double> g(static_cast<std::size_t>(cfg.D));
            double dp = 0.0;
            for (int j = 0; j < cfg.D; ++j) {
                g[static_cast<std::size_t>(j)] = rng.normal();
                dp += g[static_cast<std::size_t>(j)] * scene.prototypes(k, j);
            }
            double nrm = 0.0;
            for (int j = 0; j < cfg.D; ++j) {
                const double v = scene.prototypes(k, j) +
                                 cfg.prompt_spread * (g[static_cast<std::size_t>(j)] -
                                                      dp * scene.prototypes(k, j));
                text(k * cfg.N + n, j) = v;
                nrm += v * v;
            }
            nrm = std::sqrt(nrm);
            for (int j = 0; j < cfg.D; ++j) text(k * cfg.N + n, j) /= nrm;
        }

    // Voronoi partition of the feature grid around K distinct cell centers;
    // each center claims its own cell, so every class is present.
    std::vector<int> centers;
    while (static_cast<int>(centers.size()) < cfg.K) {
        const int c = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(m)));
        if (std::find(centers.begin(), centers.end(), c) == centers.end()) centers.push_back(c);
    }
    scene.grid_labels.resize(static_cast<std::size_t>(m));
    for (int r = 0; r < cfg.H; ++r)
        for (int c = 0; c < cfg.W; ++c) {
            int best = 0;
            long best_d = std::numeric_limits<long>::max();
            for (int k = 0; k < cfg.K; ++k) {
                const long dr = r - centers[static_cast<std::size_t>(k)] / cfg.W;
                const long dc = c - centers[static_cast<std::size_t>(k)] % cfg.W;
                const long d2 = dr * dr + dc * dc;
                if (d2 < best_d) {
                    best_d = d2;
                    best = k;
                }
            }
            scene.grid_labels[static_cast<std::size_t>(r * cfg.W + c)] = best;
        }

    scene.pixels = Mat(m, cfg.D);
    for (int i = 0; i < m; ++i) {
        const int k = scene.grid_labels[static_cast<std::size_t>(i)];
        for (int j = 0; j < cfg.D; ++j)
            scene.pixels(i, j) = scene.prototypes(k, j) + cfg.noise * rng.normal();
    }

    // Block-upscale feature-grid labels onto the image grid.
    const int fh = cfg.HI / cfg.H, fw = cfg.WI / cfg.W;
    scene.labels.resize(static_cast<std::size_t>(cfg.HI * cfg.WI));
    for (int r = 0; r < cfg.HI; ++r)
        for (int c = 0; c < cfg.WI; ++c)
            scene.labels[static_cast<std::size_t>(r * cfg.WI + c)] =
                scene.grid_labels[static_cast<std::size_t>((r / fh) * cfg.W + c / fw)];

    scene.seen_mask.assign(static_cast<std::size_t>(cfg.K), 0);
    for (int k = 0; k < cfg.n_seen; ++k) scene.seen_mask[static_cast<std::size_t>(k)] = 1;

    EmbeddingBundle bundle;
    bundle.text = text;
    bundle.pixels = scene.pixels;
    bundle.global_token = Mat(1, cfg.D);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < cfg.D; ++j) bundle.global_token(0, j) += scene.pixels(i, j) / m;
    bundle.K = cfg.K;
    bundle.N = cfg.N;
    bundle.D = cfg.D;
    bundle.H = cfg.H;
    bundle.W = cfg.W;
    bundle.validate();
    return {std::move(scene), std::move(bundle)};
}

// Guarded view of ground-truth labels for training code. Targets must come
// from visible(); raw() records a violation whenever it exposes an
// unseen-class label, and tests assert the counter stays zero.
struct LabelGuard {
    const ToyScene *scene = nullptr;
    mutable long violations = 0;

    explicit LabelGuard(const ToyScene &s) : scene(&s) {}

    std::size_t size() const { return scene->labels.size(); }

    bool is_seen(int cls) const {
        return scene->seen_mask[static_cast<std::size_t>(cls)] != 0;
    }

    // Label if its class is seen, nullopt otherwise. Never a violation.
    std::optional<int> visible(std::size_t i) const {
        const int cls = scene->labels[i];
        if (!is_seen(cls)) return std::nullopt;
        return cls;
    }

    // Unrestricted access; counts every unseen-class read.
    int raw(std::size_t i) const {
        const int cls = scene->labels[i];
        if (!is_seen(cls)) ++violations;
        return cls;
    }
};

} // namespace sinkseg
