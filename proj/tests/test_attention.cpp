#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "sinkseg/attention.hpp"
#include "sinkseg/rng.hpp"

using namespace sinkseg;

namespace {

Mat random_mat(Rng &rng, int r, int c, double lo = -1.0, double hi = 1.0) {
    Mat m(r, c);
    for (auto &v : m.data) v = rng.uniform(lo, hi);
    return m;
}

AttnParams random_params(Rng &rng, int din, int d) {
    AttnParams p;
    p.d = d;
    p.Wq = random_mat(rng, din, d, -0.5, 0.5);
    p.Wk = random_mat(rng, din, d, -0.5, 0.5);
    p.Wv = random_mat(rng, din, d, -0.5, 0.5);
    return p;
}

double inner(const Mat &a, const Mat &b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a.data[i] * b.data[i];
    return s;
}

// Reference attention with explicit loops and per-row exp sums.
Mat attention_naive(const Mat &q, const Mat &k, const Mat &v, double scale) {
    Mat out(q.rows, v.cols);
    for (int i = 0; i < q.rows; ++i) {
        std::vector<double> score(static_cast<std::size_t>(k.rows));
        double denom = 0.0;
        for (int j = 0; j < k.rows; ++j) {
            double s = 0.0;
            for (int t = 0; t < q.cols; ++t) s += q(i, t) * k(j, t);
            score[static_cast<std::size_t>(j)] = std::exp(s / scale);
            denom += score[static_cast<std::size_t>(j)];
        }
        for (int j = 0; j < k.rows; ++j)
            for (int t = 0; t < v.cols; ++t)
                out(i, t) += score[static_cast<std::size_t>(j)] / denom * v(j, t);
    }
    return out;
}

} // namespace

TEST_CASE("self_attention degenerate cases") {
    Rng rng(1);
    AttnParams p = random_params(rng, 5, 3);

    Mat one = random_mat(rng, 1, 5);
    CHECK(max_abs_diff(self_attention(one, p), matmul(one, p.Wv)) < 1e-12);

    Mat two(2, 5);
    for (int j = 0; j < 5; ++j) two(0, j) = two(1, j) = one(0, j);
    Mat out = self_attention(two, p);
    Mat vrow = matmul(one, p.Wv);
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 3; ++j) CHECK(out(i, j) == Catch::Approx(vrow(0, j)).margin(1e-12));

    CHECK_THROWS_AS(self_attention(Mat(2, 4), p), ShapeError);
}

TEST_CASE("self_attention matches naive reference") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Rng rng(10 + seed);
        AttnParams p = random_params(rng, 8, 4);
        Mat x = random_mat(rng, 4, 8);
        Mat want = attention_naive(matmul(x, p.Wq), matmul(x, p.Wk), matmul(x, p.Wv), p.scale());
        CHECK(max_abs_diff(self_attention(x, p), want) < 1e-10);
    }
}

TEST_CASE("self_attention gradients match finite differences") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(20 + seed);
        AttnParams p = random_params(rng, 6, 3);
        Mat x = random_mat(rng, 4, 6);
        Mat u = random_mat(rng, 4, 3);
        SelfAttnGrads g = self_attention_vjp(x, p, u);

        Mat fdx = finite_diff_grad([&](const Mat &xx) { return inner(u, self_attention(xx, p)); },
                                   x, 1e-5);
        CHECK(max_rel_err(g.dx, fdx, 1e-6) < 1e-4);

        AttnParams probe = p;
        Mat fwq = finite_diff_grad(
            [&](const Mat &ww) {
                probe.Wq = ww;
                return inner(u, self_attention(x, probe));
            },
            p.Wq, 1e-5);
        probe = p;
        Mat fwk = finite_diff_grad(
            [&](const Mat &ww) {
                probe.Wk = ww;
                return inner(u, self_attention(x, probe));
            },
            p.Wk, 1e-5);
        probe = p;
        Mat fwv = finite_diff_grad(
            [&](const Mat &ww) {
                probe.Wv = ww;
                return inner(u, self_attention(x, probe));
            },
            p.Wv, 1e-5);
        CHECK(max_rel_err(g.dWq, fwq, 1e-6) < 1e-4);
        CHECK(max_rel_err(g.dWk, fwk, 1e-6) < 1e-4);
        CHECK(max_rel_err(g.dWv, fwv, 1e-6) < 1e-4);
    }
}

TEST_CASE("sinkformer one-iteration reduces to scaled softmax attention") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Rng rng(30 + seed);
        AttnParams p = random_params(rng, 6, 4);
        Mat x = random_mat(rng, 5, 6);
        SinkhornConfig cfg;
        cfg.max_iters = 1;
        Mat got = sinkformer_attention(x, p, cfg);
        Mat want = scale(self_attention(x, p), 1.0 / 5.0);
        CHECK(max_abs_diff(got, want) < 1e-12);
    }
}

TEST_CASE("sinkformer converged plan is doubly stochastic") {
    // With x = I and Wv = I the output IS the plan.
    const int m = 6;
    Rng rng(36);
    AttnParams p;
    p.d = m;
    p.Wq = random_mat(rng, m, m);
    p.Wk = random_mat(rng, m, m);
    p.Wv = Mat::identity(m);
    SinkhornConfig cfg;
    cfg.max_iters = 20000;
    cfg.tol = 1e-9;
    Mat plan = sinkformer_attention(Mat::identity(m), p, cfg);
    for (int i = 0; i < m; ++i) {
        double rs = 0.0, cs = 0.0;
        for (int j = 0; j < m; ++j) {
            rs += plan(i, j);
            cs += plan(j, i);
        }
        CHECK(rs == Catch::Approx(1.0 / m).margin(1e-6));
        CHECK(cs == Catch::Approx(1.0 / m).margin(1e-6));
    }
}

TEST_CASE("sinkformer permutation equivariance") {
    Rng rng(37);
    AttnParams p = random_params(rng, 6, 3);
    Mat x = random_mat(rng, 4, 6);
    SinkhornConfig cfg;
    cfg.max_iters = 50;
    cfg.tol = 0.0;
    Mat base = sinkformer_attention(x, p, cfg);
    const int perm[4] = {3, 1, 0, 2};
    Mat xp(4, 6);
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 6; ++j) xp(i, j) = x(perm[i], j);
    Mat out = sinkformer_attention(xp, p, cfg);
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 3; ++j)
            CHECK(out(i, j) == Catch::Approx(base(perm[i], j)).margin(1e-10));
}

TEST_CASE("sinkformer gradients match finite differences") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(40 + seed);
        AttnParams p = random_params(rng, 5, 3);
        Mat x = random_mat(rng, 4, 5);
        Mat u = random_mat(rng, 4, 3);
        SinkhornConfig cfg;
        cfg.max_iters = (seed % 2 == 0) ? 5 : 1;  // both solver path and half-step path
        cfg.tol = 0.0;
        SelfAttnGrads g = sinkformer_attention_vjp(x, p, cfg, u);
        Mat fdx = finite_diff_grad(
            [&](const Mat &xx) { return inner(u, sinkformer_attention(xx, p, cfg)); }, x, 1e-5);
        CHECK(max_rel_err(g.dx, fdx, 1e-6) < 1e-4);
        AttnParams probe = p;
        Mat fwv = finite_diff_grad(
            [&](const Mat &ww) {
                probe.Wv = ww;
                return inner(u, sinkformer_attention(x, probe, cfg));
            },
            p.Wv, 1e-5);
        CHECK(max_rel_err(g.dWv, fwv, 1e-6) < 1e-4);
    }
}

TEST_CASE("cross_attention degenerate cases") {
    Rng rng(50);
    AttnParams p = random_params(rng, 6, 3);

    Mat text = random_mat(rng, 4, 6);
    Mat pixel = random_mat(rng, 1, 6);
    Mat out = cross_attention(text, pixel, p);
    Mat vrow = matmul(pixel, p.Wv);
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 3; ++j) CHECK(out(i, j) == Catch::Approx(vrow(0, j)).margin(1e-12));

    // zero queries -> uniform weights -> mean of value rows
    AttnParams pz = p;
    pz.Wq = Mat(6, 3);
    Mat pixels = random_mat(rng, 5, 6);
    Mat got = cross_attention(text, pixels, pz);
    Mat v = matmul(pixels, pz.Wv);
    for (int j = 0; j < 3; ++j) {
        double mean = 0.0;
        for (int i = 0; i < 5; ++i) mean += v(i, j) / 5.0;
        for (int i = 0; i < 4; ++i) CHECK(got(i, j) == Catch::Approx(mean).margin(1e-12));
    }
}

TEST_CASE("cross_attention matches naive reference") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Rng rng(60 + seed);
        AttnParams p = random_params(rng, 7, 4);
        Mat text = random_mat(rng, 6, 7);
        Mat pixels = random_mat(rng, 5, 7);
        Mat want = attention_naive(matmul(text, p.Wq), matmul(pixels, p.Wk),
                                   matmul(pixels, p.Wv), p.scale());
        CHECK(max_abs_diff(cross_attention(text, pixels, p), want) < 1e-10);
    }
}

TEST_CASE("cross_attention gradients match finite differences") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(70 + seed);
        AttnParams p = random_params(rng, 5, 3);
        Mat text = random_mat(rng, 4, 5);
        Mat pixels = random_mat(rng, 6, 5);
        Mat u = random_mat(rng, 4, 3);
        CrossAttnGrads g = cross_attention_vjp(text, pixels, p, u);
        Mat ft = finite_diff_grad(
            [&](const Mat &tt) { return inner(u, cross_attention(tt, pixels, p)); }, text, 1e-5);
        Mat fp = finite_diff_grad(
            [&](const Mat &pp) { return inner(u, cross_attention(text, pp, p)); }, pixels, 1e-5);
        CHECK(max_rel_err(g.dtext, ft, 1e-6) < 1e-4);
        CHECK(max_rel_err(g.dpixels, fp, 1e-6) < 1e-4);
        AttnParams probe = p;
        Mat fwk = finite_diff_grad(
            [&](const Mat &ww) {
                probe.Wk = ww;
                return inner(u, cross_attention(text, pixels, probe));
            },
            p.Wk, 1e-5);
        CHECK(max_rel_err(g.dWk, fwk, 1e-6) < 1e-4);
    }
}

TEST_CASE("mpsa single-prompt constant scores average the values") {
    // Arrange G == 1 everywhere: text = [1,0], pixel first coordinate 1,
    // Wq = Wk = first basis column.
    const int m = 5;
    AttnParams p;
    p.d = 1;
    p.Wq = Mat(2, 1);
    p.Wq(0, 0) = 1.0;
    p.Wk = p.Wq;
    p.Wv = Mat(2, 1);
    p.Wv(1, 0) = 1.0;  // value = second coordinate
    Mat text(1, 2);
    text(0, 0) = 1.0;
    Mat pixels(m, 2);
    Rng rng(80);
    for (int i = 0; i < m; ++i) {
        pixels(i, 0) = 1.0;
        pixels(i, 1) = rng.uniform(-2.0, 2.0);
    }
    SinkhornConfig cfg;
    cfg.epsilon = 0.05;
    cfg.max_iters = 4;
    MpsaOutput out = mpsa(text, pixels, p, 1, 1, cfg);
    double mean = 0.0;
    for (int i = 0; i < m; ++i) mean += pixels(i, 1) / m;
    REQUIRE(out.context.rows == 1);
    CHECK(out.context(0, 0) == Catch::Approx(mean).margin(1e-12));
    for (int i = 0; i < m; ++i)
        CHECK(out.mask_logits(i, 0) == Catch::Approx(1.0 / m).margin(1e-12));
}

TEST_CASE("mpsa mask logits equal the score-map refinement of G^T") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Rng rng(90 + seed);
        const int kk = 3, nn = 2, m = 6, din = 5, d = 4;
        AttnParams p = random_params(rng, din, d);
        Mat text = random_mat(rng, kk * nn, din);
        Mat pixels = random_mat(rng, m, din);
        SinkhornConfig cfg;
        cfg.epsilon = 0.1;
        cfg.max_iters = 4;
        cfg.tol = 0.0;  // same fixed iteration count on both sides
        MpsaOutput out = mpsa(text, pixels, p, kk, nn, cfg);

        ScoreMap s;
        s.K = kk;
        s.N = nn;
        s.H = 1;
        s.W = m;
        s.data = transpose(matmul(matmul(text, p.Wq), transpose(matmul(pixels, p.Wk))));
        RefinedScoreMap r = mps(s, cfg);  // cost 1-S vs -S: plans agree by shift invariance
        CHECK(max_abs_diff(out.mask_logits, r.data) < 1e-10);
    }
}

TEST_CASE("mpsa planted blocks recover the partition through the mask head") {
    const int kk = 2, nn = 2, m = 8;
    AttnParams p;
    p.d = 2;
    p.Wq = Mat::identity(2);
    p.Wk = Mat::identity(2);
    p.Wv = Mat::identity(2);
    Mat text(kk * nn, 2);
    Rng rng(100);
    for (int k = 0; k < kk; ++k)
        for (int n = 0; n < nn; ++n) {
            text(k * nn + n, 0) = (k == 0 ? 1.0 : -1.0) + 0.05 * rng.uniform(-1.0, 1.0);
            text(k * nn + n, 1) = (k == 0 ? -1.0 : 1.0) + 0.05 * rng.uniform(-1.0, 1.0);
        }
    Mat pixels(m, 2);
    std::vector<int> label(m);
    for (int i = 0; i < m; ++i) {
        label[static_cast<std::size_t>(i)] = i % kk;
        pixels(i, 0) = (label[static_cast<std::size_t>(i)] == 0 ? 1.0 : -1.0);
        pixels(i, 1) = -pixels(i, 0);
    }
    SinkhornConfig cfg;
    cfg.epsilon = 0.05;
    cfg.max_iters = 4;
    MpsaOutput out = mpsa(text, pixels, p, kk, nn, cfg);
    Mat mask = mask_head(out);
    for (int i = 0; i < m; ++i)
        for (int k = 0; k < kk; ++k) {
            if (k == label[static_cast<std::size_t>(i)])
                CHECK(mask(i, k) > 0.5);
            else
                CHECK(mask(i, k) < 0.5);
        }
}

TEST_CASE("mpsa prompt permutation moves context rows, fixes mask logits") {
    Rng rng(110);
    const int kk = 2, nn = 3, m = 5, din = 4;
    AttnParams p = random_params(rng, din, 3);
    Mat text = random_mat(rng, kk * nn, din);
    Mat pixels = random_mat(rng, m, din);
    SinkhornConfig cfg;
    cfg.epsilon = 0.2;
    cfg.max_iters = 6;
    cfg.tol = 0.0;
    MpsaOutput base = mpsa(text, pixels, p, kk, nn, cfg);

    const int perm[3] = {2, 0, 1};
    Mat tp = text;
    for (int n = 0; n < nn; ++n)
        for (int j = 0; j < din; ++j) tp(0 * nn + n, j) = text(0 * nn + perm[n], j);
    MpsaOutput out = mpsa(tp, pixels, p, kk, nn, cfg);
    CHECK(max_abs_diff(out.mask_logits, base.mask_logits) < 1e-10);
    for (int n = 0; n < nn; ++n)
        for (int j = 0; j < 3; ++j)
            CHECK(out.context(n, j) == Catch::Approx(base.context(perm[n], j)).margin(1e-10));
    // untouched class block unchanged
    for (int n = 0; n < nn; ++n)
        for (int j = 0; j < 3; ++j)
            CHECK(out.context(nn + n, j) == Catch::Approx(base.context(nn + n, j)).margin(1e-10));
}

TEST_CASE("mpsa gradients match finite differences") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(120 + seed);
        const int kk = 2, nn = 2, m = 5, din = 4, d = 3;
        AttnParams p = random_params(rng, din, d);
        Mat text = random_mat(rng, kk * nn, din);
        Mat pixels = random_mat(rng, m, din);
        Mat uc = random_mat(rng, kk * nn, d);
        Mat um = random_mat(rng, m, kk);
        SinkhornConfig cfg;
        cfg.epsilon = 0.3;
        cfg.max_iters = 4;
        cfg.tol = 0.0;
        MpsaGrads g = mpsa_vjp(text, pixels, p, kk, nn, cfg, uc, um);

        auto f = [&](const Mat &tt, const Mat &pp, const AttnParams &pa) {
            MpsaOutput o = mpsa(tt, pp, pa, kk, nn, cfg);
            return inner(uc, o.context) + inner(um, o.mask_logits);
        };
        Mat ft = finite_diff_grad([&](const Mat &tt) { return f(tt, pixels, p); }, text, 1e-5);
        Mat fp = finite_diff_grad([&](const Mat &pp) { return f(text, pp, p); }, pixels, 1e-5);
        CHECK(max_rel_err(g.dtext, ft, 1e-6) < 1e-4);
        CHECK(max_rel_err(g.dpixels, fp, 1e-6) < 1e-4);

        AttnParams probe = p;
        Mat fwq = finite_diff_grad(
            [&](const Mat &ww) {
                probe.Wq = ww;
                return f(text, pixels, probe);
            },
            p.Wq, 1e-5);
        probe = p;
        Mat fwk = finite_diff_grad(
            [&](const Mat &ww) {
                probe.Wk = ww;
                return f(text, pixels, probe);
            },
            p.Wk, 1e-5);
        probe = p;
        Mat fwv = finite_diff_grad(
            [&](const Mat &ww) {
                probe.Wv = ww;
                return f(text, pixels, probe);
            },
            p.Wv, 1e-5);
        CHECK(max_rel_err(g.dWq, fwq, 1e-6) < 1e-4);
        CHECK(max_rel_err(g.dWk, fwk, 1e-6) < 1e-4);
        CHECK(max_rel_err(g.dWv, fwv, 1e-6) < 1e-4);
    }
}

TEST_CASE("softmax_prompt_attention context matches plain cross attention") {
    Rng rng(77);
    const int kk = 3, nn = 2, m = 6, din = 5, d = 4;
    AttnParams p = random_params(rng, din, d);
    Mat text = random_mat(rng, kk * nn, din);
    Mat pixels = random_mat(rng, m, din);
    MpsaOutput o = softmax_prompt_attention(text, pixels, p, kk, nn);
    CHECK(max_abs_diff(o.context, cross_attention(text, pixels, p)) < 1e-12);

    // Mask logits are the attention-weighted score sums per class.
    Mat a = row_softmax(scale(matmul(matmul(text, p.Wq), transpose(matmul(pixels, p.Wk))),
                              1.0 / p.scale()));
    Mat g = matmul(matmul(text, p.Wq), transpose(matmul(pixels, p.Wk)));
    for (int k = 0; k < kk; ++k)
        for (int i = 0; i < m; ++i) {
            double s = 0.0;
            for (int n = 0; n < nn; ++n) s += a(k * nn + n, i) * g(k * nn + n, i);
            CHECK(o.mask_logits(i, k) == Catch::Approx(s).margin(1e-12));
        }
}

TEST_CASE("softmax_prompt_attention gradients match finite differences") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(200 + seed);
        const int kk = 2, nn = 2, m = 5, din = 4, d = 3;
        AttnParams p = random_params(rng, din, d);
        Mat text = random_mat(rng, kk * nn, din);
        Mat pixels = random_mat(rng, m, din);
        Mat uc = random_mat(rng, kk * nn, d);
        Mat um = random_mat(rng, m, kk);
        MpsaGrads g = softmax_prompt_attention_vjp(text, pixels, p, kk, nn, uc, um);

        auto f = [&](const Mat &tt, const Mat &pp, const AttnParams &pa) {
            MpsaOutput o = softmax_prompt_attention(tt, pp, pa, kk, nn);
            return inner(uc, o.context) + inner(um, o.mask_logits);
        };
        Mat ft = finite_diff_grad([&](const Mat &tt) { return f(tt, pixels, p); }, text, 1e-5);
        Mat fp = finite_diff_grad([&](const Mat &pp) { return f(text, pp, p); }, pixels, 1e-5);
        CHECK(max_rel_err(g.dtext, ft, 1e-6) < 1e-4);
        CHECK(max_rel_err(g.dpixels, fp, 1e-6) < 1e-4);

        AttnParams probe = p;
        Mat fwq = finite_diff_grad(
            [&](const Mat &ww) {
                probe.Wq = ww;
                return f(text, pixels, probe);
            },
            p.Wq, 1e-5);
        probe = p;
        Mat fwv = finite_diff_grad(
            [&](const Mat &ww) {
                probe.Wv = ww;
                return f(text, pixels, probe);
            },
            p.Wv, 1e-5);
        CHECK(max_rel_err(g.dWq, fwq, 1e-6) < 1e-4);
        CHECK(max_rel_err(g.dWv, fwv, 1e-6) < 1e-4);
    }
}

TEST_CASE("mask_head") {
    MpsaOutput o;
    o.mask_logits = Mat(1, 3);
    o.mask_logits.data = {0.0, 1e3, -4.0};
    Mat m = mask_head(o);
    CHECK(m(0, 0) == Catch::Approx(0.5).margin(1e-15));
    CHECK(m(0, 1) == Catch::Approx(1.0).margin(1e-12));
    REQUIRE(all_finite(m));

    Rng rng(130);
    MpsaOutput o2;
    o2.mask_logits = Mat(4, 4);
    for (auto &v : o2.mask_logits.data) v = rng.uniform(-6.0, 6.0);
    Mat m2 = mask_head(o2);
    for (std::size_t i = 0; i < m2.size(); ++i) {
        CHECK(m2.data[i] > 0.0);
        CHECK(m2.data[i] < 1.0);
    }
    // monotone in the logit
    CHECK(sigmoid_scalar(1.2) > sigmoid_scalar(1.1));
}

TEST_CASE("upsample identity, constants, and checkerboard stencil") {
    Rng rng(140);
    Mat mask(6, 2);
    for (auto &v : mask.data) v = rng.uniform(0.0, 1.0);
    CHECK(max_abs_diff(upsample(mask, 2, 3, 2, 3), mask) == 0.0);

    Mat flat(4, 1, 0.7);
    Mat up = upsample(flat, 2, 2, 5, 7);
    for (double v : up.data) CHECK(v == Catch::Approx(0.7).margin(1e-12));

    Mat board(4, 1);
    board.data = {1.0, 0.0, 0.0, 1.0};
    Mat got = upsample(board, 2, 2, 4, 4);
    const double want[16] = {1.0, 0.75, 0.25, 0.0,  0.75, 0.625, 0.375, 0.25,
                             0.25, 0.375, 0.625, 0.75, 0.0,  0.25,  0.75,  1.0};
    for (int i = 0; i < 16; ++i) CHECK(got(i, 0) == Catch::Approx(want[i]).margin(1e-12));

    CHECK_THROWS_AS(upsample(board, 2, 2, 1, 4), SizeError);
    CHECK_THROWS_AS(upsample(board, 2, 3, 4, 4), ShapeError);
}

TEST_CASE("upsample adjoint identity and gradient") {
    Rng rng(150);
    Mat x(6, 2);
    for (auto &v : x.data) v = rng.uniform(-1.0, 1.0);
    Mat u(35, 2);
    for (auto &v : u.data) v = rng.uniform(-1.0, 1.0);
    // <U(x), u> == <x, U^T(u)> for the linear operator
    CHECK(inner(upsample(x, 2, 3, 5, 7), u) ==
          Catch::Approx(inner(x, upsample_vjp(u, 2, 3, 5, 7))).margin(1e-12));

    Mat fd = finite_diff_grad([&](const Mat &xx) { return inner(u, upsample(xx, 2, 3, 5, 7)); },
                              x, 1e-5);
    CHECK(max_rel_err(upsample_vjp(u, 2, 3, 5, 7), fd, 1e-6) < 1e-6);
}
