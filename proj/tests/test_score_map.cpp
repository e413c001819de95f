#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "sinkseg/rng.hpp"
#include "sinkseg/score_map.hpp"

using namespace sinkseg;

namespace {

Mat random_mat(Rng &rng, int r, int c, double lo = -1.0, double hi = 1.0) {
    Mat m(r, c);
    for (auto &v : m.data) v = rng.uniform(lo, hi);
    return m;
}

Mat block_proj(int d, bool first_block) {
    Mat p(2 * d, d);
    for (int j = 0; j < d; ++j) p(first_block ? j : d + j, j) = 1.0;
    return p;
}

double marginal_l1_uniform(const Mat &plan) {
    double err = 0.0;
    for (int i = 0; i < plan.rows; ++i) {
        double s = 0.0;
        for (int j = 0; j < plan.cols; ++j) s += plan(i, j);
        err += std::abs(s - 1.0 / plan.rows);
    }
    for (int j = 0; j < plan.cols; ++j) {
        double s = 0.0;
        for (int i = 0; i < plan.rows; ++i) s += plan(i, j);
        err += std::abs(s - 1.0 / plan.cols);
    }
    return err;
}

double inner(const Mat &a, const Mat &b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a.data[i] * b.data[i];
    return s;
}

} // namespace

TEST_CASE("relationship_descriptor block projections") {
    Rng rng(1);
    const int d = 6;
    Mat text = random_mat(rng, 8, d);

    Mat ones(1, d, 1.0);
    CHECK(max_abs_diff(relationship_descriptor(text, ones, block_proj(d, true)), text) == 0.0);

    Mat zeros(1, d, 0.0);
    CHECK(max_abs_diff(relationship_descriptor(text, zeros, block_proj(d, true)), Mat(8, d)) ==
          0.0);

    Mat g = random_mat(rng, 1, d);
    CHECK(max_abs_diff(relationship_descriptor(text, g, block_proj(d, false)), text) == 0.0);

    CHECK_THROWS_AS(relationship_descriptor(text, Mat(1, d + 1), block_proj(d, true)),
                    ShapeError);
    CHECK_THROWS_AS(relationship_descriptor(text, ones, Mat(d, d)), ShapeError);
}

TEST_CASE("score_map cosine structure") {
    EmbeddingBundle b;
    b.K = 2;
    b.N = 1;
    b.D = 3;
    b.H = 1;
    b.W = 2;
    b.text = Mat(2, 3);
    b.text.data = {2.0, 0.0, 0.0,   // class 0 prompt: x axis (unnormalized)
                   0.0, 5.0, 0.0};  // class 1 prompt: y axis
    b.pixels = Mat(2, 3);
    b.pixels.data = {7.0, 0.0, 0.0, 0.0, 0.0, 1.0};
    b.global_token = Mat(1, 3);
    ScoreMap s = score_map(b);
    CHECK(s.data(0, 0) == Catch::Approx(1.0).margin(1e-14));  // parallel rows
    CHECK(s.data(0, 1) == Catch::Approx(0.0).margin(1e-14));  // orthogonal
    CHECK(s.data(1, 0) == Catch::Approx(0.0).margin(1e-14));
    CHECK(s.data(1, 1) == Catch::Approx(0.0).margin(1e-14));
}

TEST_CASE("score_map matches naive normalized dot products") {
    Rng rng(2);
    EmbeddingBundle b;
    b.K = 3;
    b.N = 2;
    b.D = 7;
    b.H = 2;
    b.W = 3;
    b.text = random_mat(rng, 6, 7);
    b.pixels = random_mat(rng, 6, 7);
    b.global_token = random_mat(rng, 1, 7);
    ScoreMap s = score_map(b);
    for (int m = 0; m < 6; ++m) {
        for (int t = 0; t < 6; ++t) {
            double dot = 0.0, np = 0.0, nt = 0.0;
            for (int j = 0; j < 7; ++j) {
                dot += b.pixels(m, j) * b.text(t, j);
                np += b.pixels(m, j) * b.pixels(m, j);
                nt += b.text(t, j) * b.text(t, j);
            }
            const double want = dot / (std::sqrt(np) * std::sqrt(nt));
            CHECK(s.data(m, t) == Catch::Approx(want).margin(1e-12));
            CHECK(std::abs(s.data(m, t)) <= 1.0 + 1e-12);
        }
    }

    b.pixels = Mat(5, 7);
    CHECK_THROWS_AS(score_map(b), ShapeError);
}

TEST_CASE("mps single-prompt closed form") {
    ScoreMap s;
    s.K = 2;
    s.N = 1;
    s.H = 2;
    s.W = 2;
    Rng rng(3);
    s.data = random_mat(rng, 4, 2);
    SinkhornConfig cfg;
    cfg.epsilon = 0.5;
    RefinedScoreMap r = mps(s, cfg);
    for (int m = 0; m < 4; ++m)
        for (int k = 0; k < 2; ++k)
            CHECK(r.data(m, k) == Catch::Approx(s.data(m, k) / 4.0).margin(1e-12));
}

TEST_CASE("mps constant score map") {
    ScoreMap s;
    s.K = 2;
    s.N = 3;
    s.H = 2;
    s.W = 3;
    s.data = Mat(6, 6, 0.37);
    SinkhornConfig cfg;
    cfg.epsilon = 0.25;
    RefinedScoreMap r = mps(s, cfg);
    for (double v : r.data.data) CHECK(v == Catch::Approx(0.37 / 6.0).margin(1e-12));
    for (const Mat &p : r.plans)
        for (double v : p.data) CHECK(v == Catch::Approx(1.0 / 18.0).margin(1e-12));
}

TEST_CASE("mps planted blocks recover labels and keep plans feasible") {
    const int kk = 3, nn = 2, h = 3, w = 4, m = h * w;
    ScoreMap s;
    s.K = kk;
    s.N = nn;
    s.H = h;
    s.W = w;
    s.data = Mat(m, kk * nn);
    Rng rng(4);
    std::vector<int> label(static_cast<std::size_t>(m));
    for (int i = 0; i < m; ++i) {
        label[static_cast<std::size_t>(i)] = i % kk;
        for (int k = 0; k < kk; ++k)
            for (int n = 0; n < nn; ++n)
                s.data(i, k * nn + n) =
                    (k == i % kk ? 0.9 : 0.1) + 0.05 * rng.uniform(-1.0, 1.0);
    }
    SinkhornConfig cfg;
    cfg.epsilon = 0.1;
    cfg.max_iters = 5000;
    cfg.tol = 1e-8;
    RefinedScoreMap r = mps(s, cfg);
    REQUIRE(static_cast<int>(r.plans.size()) == kk);
    for (int i = 0; i < m; ++i) {
        int best = 0;
        for (int k = 1; k < kk; ++k)
            if (r.data(i, k) > r.data(i, best)) best = k;
        CHECK(best == label[static_cast<std::size_t>(i)]);
    }
    for (const Mat &p : r.plans) CHECK(marginal_l1_uniform(p) <= cfg.tol);
    // reduction identity: data really is the plan-weighted prompt sum
    for (int i = 0; i < m; ++i)
        for (int k = 0; k < kk; ++k) {
            double v = 0.0;
            for (int n = 0; n < nn; ++n) v += r.plans[static_cast<std::size_t>(k)](i, n) *
                                               s.data(i, k * nn + n);
            CHECK(r.data(i, k) == Catch::Approx(v).margin(1e-10));
        }
}

TEST_CASE("mps class permutation equivariance, prompt permutation invariance") {
    Rng rng(5);
    ScoreMap s;
    s.K = 3;
    s.N = 3;
    s.H = 2;
    s.W = 2;
    s.data = random_mat(rng, 4, 9);
    SinkhornConfig cfg;
    cfg.epsilon = 0.3;
    cfg.max_iters = 5000;
    RefinedScoreMap base = mps(s, cfg);

    const int cperm[3] = {1, 2, 0};
    ScoreMap sc = s;
    for (int m = 0; m < 4; ++m)
        for (int k = 0; k < 3; ++k)
            for (int n = 0; n < 3; ++n) sc.data(m, k * 3 + n) = s.data(m, cperm[k] * 3 + n);
    RefinedScoreMap rc = mps(sc, cfg);
    for (int m = 0; m < 4; ++m)
        for (int k = 0; k < 3; ++k)
            CHECK(rc.data(m, k) == Catch::Approx(base.data(m, cperm[k])).margin(1e-12));

    const int pperm[3] = {2, 0, 1};
    ScoreMap sp = s;
    for (int m = 0; m < 4; ++m)
        for (int k = 0; k < 3; ++k)
            for (int n = 0; n < 3; ++n) sp.data(m, k * 3 + n) = s.data(m, k * 3 + pperm[n]);
    RefinedScoreMap rp = mps(sp, cfg);
    CHECK(max_abs_diff(rp.data, base.data) < 1e-10);
}

TEST_CASE("mps_grad zero upstream and shapes") {
    Rng rng(6);
    ScoreMap s;
    s.K = 2;
    s.N = 3;
    s.H = 2;
    s.W = 3;
    s.data = random_mat(rng, 6, 6);
    SinkhornConfig cfg;
    cfg.epsilon = 0.5;
    Mat g = mps_grad(s, cfg, Mat(6, 2));
    CHECK(max_abs_diff(g, Mat(6, 6)) == 0.0);
    CHECK_THROWS_AS(mps_grad(s, cfg, Mat(6, 3)), ShapeError);
}

TEST_CASE("mps_grad matches finite differences") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(40 + seed);
        ScoreMap s;
        s.K = 2;
        s.N = 3;
        s.H = 2;
        s.W = 3;
        s.data = random_mat(rng, 6, 6);
        Mat upstream = random_mat(rng, 6, 2);
        SinkhornConfig cfg;
        cfg.epsilon = 0.5;
        cfg.max_iters = 30;
        cfg.tol = 0.0;  // fixed iteration count for smoothness
        Mat analytic = mps_grad(s, cfg, upstream);
        ScoreMap probe = s;
        Mat fd = finite_diff_grad(
            [&](const Mat &x) {
                probe.data = x;
                return inner(upstream, mps(probe, cfg).data);
            },
            s.data, 1e-5);
        CHECK(max_rel_err(analytic, fd, 1e-6) < 1e-4);
    }
}

TEST_CASE("mps_grad single-prompt closed form") {
    Rng rng(7);
    ScoreMap s;
    s.K = 3;
    s.N = 1;
    s.H = 2;
    s.W = 2;
    s.data = random_mat(rng, 4, 3);
    Mat upstream = random_mat(rng, 4, 3);
    SinkhornConfig cfg;
    cfg.epsilon = 0.4;
    Mat g = mps_grad(s, cfg, upstream);
    // with one prompt the plan is the fixed 1/M column regardless of S
    for (int m = 0; m < 4; ++m)
        for (int k = 0; k < 3; ++k)
            CHECK(g(m, k) == Catch::Approx(upstream(m, k) / 4.0).margin(1e-12));
}
