#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "sinkseg/losses.hpp"
#include "sinkseg/metrics.hpp"
#include "sinkseg/rng.hpp"

using namespace sinkseg;

namespace {

Mat random_pred(Rng &rng, int r, int c, double lo = -2.0, double hi = 2.0) {
    Mat m(r, c);
    for (auto &v : m.data) v = rng.uniform(lo, hi);
    return m;
}

Mat random_targets(Rng &rng, int r, int c) {
    Mat m(r, c);
    for (auto &v : m.data) v = rng.uniform() < 0.5 ? 0.0 : 1.0;
    return m;
}

} // namespace

TEST_CASE("ce_loss analytic single pixel") {
    Mat pred(1, 1), y(1, 1, 1.0);
    LossResult r = ce_loss(pred, y);
    CHECK(r.value == Catch::Approx(std::log(2.0)).margin(1e-14));
    CHECK(r.grad(0, 0) == Catch::Approx(-0.5).margin(1e-14));
}

TEST_CASE("focal_loss analytic at sigma one half") {
    // sigma(0) = 0.5 with target 1: per-pixel term -(1-0.5)^2 ln 0.5
    Mat pred(3, 1), y(3, 1, 1.0);
    LossResult r = focal_loss(pred, y, 2.0);
    CHECK(r.value == Catch::Approx(0.25 * std::log(2.0)).margin(1e-14));
}

TEST_CASE("dice_loss perfect binary prediction is zero") {
    Mat y(4, 2);
    y.data = {1, 0, 1, 0, 0, 1, 0, 1};
    LossResult r = dice_loss(y, y);
    CHECK(r.value == Catch::Approx(0.0).margin(1e-14));
}

TEST_CASE("dice_loss hand value") {
    Mat pred(2, 1), y(2, 1);
    pred.data = {0.5, 0.5};
    y.data = {1.0, 0.0};
    // overlap 0.5, masses 1 + 0.5 -> 1 - 1/1.5
    LossResult r = dice_loss(pred, y);
    CHECK(r.value == Catch::Approx(1.0 - 1.0 / 1.5).margin(1e-14));
}

TEST_CASE("loss gradients match finite differences") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(200 + seed);
        const int m = 5, kk = 3;
        Mat pred = random_pred(rng, m, kk);
        Mat y = random_targets(rng, m, kk);
        std::vector<double> w(static_cast<std::size_t>(m), 1.0);
        w[1] = 0.0;
        w[3] = 0.5;

        auto check = [&](auto &&loss_fn, const LossResult &r) {
            Mat fd = finite_diff_grad([&](const Mat &p) { return loss_fn(p); }, pred, 1e-5);
            CHECK(max_rel_err(r.grad, fd, 1e-7) < 1e-5);
        };
        check([&](const Mat &p) { return ce_loss(p, y, &w).value; }, ce_loss(pred, y, &w));
        check([&](const Mat &p) { return focal_loss(p, y, 2.0, &w).value; },
              focal_loss(pred, y, 2.0, &w));
        check([&](const Mat &p) { return dice_loss(p, y, &w).value; }, dice_loss(pred, y, &w));

        LossWeights lw;
        check([&](const Mat &p) { return seg_loss(p, y, lw, &w).value; },
              seg_loss(pred, y, lw, &w));
    }
}

TEST_CASE("seg_loss is the weighted term sum") {
    Rng rng(210);
    Mat pred = random_pred(rng, 4, 2);
    Mat y = random_targets(rng, 4, 2);
    LossWeights lw;
    lw.lambda_ce = 1.0;
    lw.lambda_focal = 20.0;
    lw.lambda_dice = 1.0;
    const double want = ce_loss(pred, y).value + 20.0 * focal_loss(pred, y, lw.gamma).value +
                        dice_loss(pred, y).value;
    CHECK(seg_loss(pred, y, lw).value == Catch::Approx(want).margin(1e-12));

    lw.lambda_ce = 0.0;  // main-text form: focal + dice only
    const double want2 = 20.0 * focal_loss(pred, y, lw.gamma).value + dice_loss(pred, y).value;
    CHECK(seg_loss(pred, y, lw).value == Catch::Approx(want2).margin(1e-12));
}

TEST_CASE("masked pixels are inert") {
    Rng rng(220);
    Mat pred = random_pred(rng, 4, 2);
    Mat y = random_targets(rng, 4, 2);
    std::vector<double> w(4, 1.0);
    w[2] = 0.0;
    LossWeights lw;
    LossResult base = seg_loss(pred, y, lw, &w);
    Mat poked = pred;
    poked(2, 0) += 5.0;
    poked(2, 1) -= 3.0;
    LossResult same = seg_loss(poked, y, lw, &w);
    CHECK(same.value == Catch::Approx(base.value).margin(1e-14));
    CHECK(base.grad(2, 0) == 0.0);
    CHECK(base.grad(2, 1) == 0.0);
}

TEST_CASE("loss_total sums both paths") {
    Rng rng(230);
    Mat a = random_pred(rng, 4, 2), b = random_pred(rng, 4, 2);
    Mat y = random_targets(rng, 4, 2);
    LossWeights lw;
    TotalLoss t = loss_total(a, b, y, lw);
    CHECK(t.value ==
          Catch::Approx(seg_loss(a, y, lw).value + seg_loss(b, y, lw).value).margin(1e-12));
    CHECK(max_abs_diff(t.grad_decoder, seg_loss(a, y, lw).grad) == 0.0);
    CHECK(max_abs_diff(t.grad_scoremap, seg_loss(b, y, lw).grad) == 0.0);
}

TEST_CASE("loss input validation") {
    Mat pred(2, 2), bad(2, 2, 0.5);
    CHECK_THROWS_AS(ce_loss(pred, Mat(2, 3)), ShapeError);
    CHECK_THROWS_AS(ce_loss(pred, bad), std::invalid_argument);
    std::vector<double> w(3, 1.0);
    CHECK_THROWS_AS(ce_loss(pred, Mat(2, 2), &w), ShapeError);
    CHECK_THROWS_AS(focal_loss(pred, Mat(2, 2), -1.0), ConfigError);
}

TEST_CASE("harmonic_iou reference pairs round as expected") {
    CHECK(std::abs(harmonic_iou(77.8, 91.9) - 84.3) < 0.05);
    CHECK(std::abs(harmonic_iou(94.3, 94.2) - 94.2) < 0.05);
    CHECK(harmonic_iou(0.0, 0.0) == 0.0);
    CHECK(harmonic_iou(1.0, 1.0) == Catch::Approx(1.0).margin(1e-15));
}

TEST_CASE("segmentation_metrics perfect prediction") {
    Mat scores(4, 2);
    std::vector<int> gt = {0, 1, 0, 1};
    for (int i = 0; i < 4; ++i) scores(i, gt[static_cast<std::size_t>(i)]) = 1.0;
    Metrics m = segmentation_metrics(scores, gt, {1, 0});
    CHECK(m.miou_seen == 1.0);
    CHECK(m.miou_unseen == 1.0);
    CHECK(m.hiou == Catch::Approx(1.0).margin(1e-15));
}

TEST_CASE("segmentation_metrics hand confusion") {
    // predictions 0,1,1,1 against truth 0,0,1,1
    Mat scores(4, 2);
    scores.data = {1, 0, 0, 1, 0, 1, 0, 1};
    std::vector<int> gt = {0, 0, 1, 1};
    Metrics m = segmentation_metrics(scores, gt, {1, 0});
    CHECK(m.per_class[0] == Catch::Approx(0.5).margin(1e-15));        // 1 of 2
    CHECK(m.per_class[1] == Catch::Approx(2.0 / 3.0).margin(1e-15));  // 2 of 3
    CHECK(m.miou_seen == Catch::Approx(0.5).margin(1e-15));
    CHECK(m.miou_unseen == Catch::Approx(2.0 / 3.0).margin(1e-15));
    CHECK(m.hiou == Catch::Approx(4.0 / 7.0).margin(1e-12));
}

TEST_CASE("segmentation_metrics class exclusion") {
    // class 2 never appears in prediction or truth -> excluded
    Mat scores(3, 3);
    scores.data = {1, 0, 0, 0, 1, 0, 1, 0, 0};
    std::vector<int> gt = {0, 1, 0};
    Metrics m = segmentation_metrics(scores, gt, {1, 1, 0});
    CHECK_FALSE(m.valid[2]);
    CHECK(m.valid[0]);
    CHECK(m.miou_seen == Catch::Approx(1.0).margin(1e-15));
    CHECK(m.miou_unseen == 0.0);  // no unseen class present
    CHECK(m.hiou == 0.0);

    // class present in truth but never predicted scores IoU 0 and counts
    Mat s2(2, 2);
    s2.data = {1, 0, 1, 0};
    Metrics m2 = segmentation_metrics(s2, {0, 1}, {1, 1});
    CHECK(m2.valid[1]);
    CHECK(m2.per_class[1] == 0.0);
    CHECK(m2.miou_seen == Catch::Approx((0.5 + 0.0) / 2.0).margin(1e-15));
}

TEST_CASE("segmentation_metrics properties on random instances") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(300 + seed);
        const int m = 24, kk = 4;
        Mat scores(m, kk);
        for (auto &v : scores.data) v = rng.uniform();
        std::vector<int> gt(static_cast<std::size_t>(m));
        for (auto &g : gt) g = rng.uniform_int(kk);
        std::vector<char> seen = {1, 1, 0, 0};
        Metrics mt = segmentation_metrics(scores, gt, seen);
        CHECK(mt.miou_seen >= 0.0);
        CHECK(mt.miou_seen <= 1.0);
        CHECK(mt.miou_unseen >= 0.0);
        CHECK(mt.miou_unseen <= 1.0);
        CHECK(mt.hiou <= 0.5 * (mt.miou_seen + mt.miou_unseen) + 1e-12);
        CHECK(mt.hiou <= 2.0 * std::min(mt.miou_seen, mt.miou_unseen) + 1e-12);
        for (int k = 0; k < kk; ++k)
            if (mt.valid[static_cast<std::size_t>(k)]) {
                CHECK(mt.per_class[static_cast<std::size_t>(k)] >= 0.0);
                CHECK(mt.per_class[static_cast<std::size_t>(k)] <= 1.0);
            }
    }
}

TEST_CASE("argmax ties take the lowest class index") {
    Mat scores(1, 3, 0.5);
    CHECK(argmax_labels(scores)[0] == 0);
    CHECK_THROWS_AS(segmentation_metrics(scores, {3}, {1, 1, 1}), std::invalid_argument);
    CHECK_THROWS_AS(segmentation_metrics(scores, {0, 0}, {1, 1, 1}), ShapeError);
}
