#include <cmath>
#include <sstream>

#include "doctest.h"
#include "punet/metrics.hpp"
#include "punet/rng.hpp"
#include "punet/verify.hpp"

using namespace punet;

namespace {

BinaryMask block(Index h, Index w, Index y0, Index x0, Index bh, Index bw) {
    BinaryMask m(h, w);
    for (Index y = y0; y < y0 + bh; ++y)
        for (Index x = x0; x < x0 + bw; ++x) m.set(y, x, true);
    return m;
}

BinaryMask random_mask(Rng& rng, Index h, Index w, double p) {
    BinaryMask m(h, w);
    for (Index y = 0; y < h; ++y)
        for (Index x = 0; x < w; ++x) m.set(y, x, rng.uniform() < p);
    return m;
}

}  // namespace

TEST_CASE("dice examples") {
    const auto a = block(4, 4, 1, 0, 2, 2);
    CHECK(dice(a, a) == 1.0);
    CHECK(dice(a, block(4, 4, 1, 2, 2, 2)) == 0.0);
    CHECK(dice(a, block(4, 4, 1, 1, 2, 2)) == 0.5);
    CHECK(dice(BinaryMask(3, 3), BinaryMask(3, 3)) == 1.0);
    Rng rng(1);
    for (int t = 0; t < 50; ++t) {
        const auto x = random_mask(rng, 8, 8, 0.4), y = random_mask(rng, 8, 8, 0.4);
        REQUIRE(dice(x, y) == dice(y, x));
        if (!x.empty()) REQUIRE(dice(x, x) == 1.0);
    }
}

TEST_CASE("hausdorff examples") {
    BinaryMask a(5, 5), b(5, 5);
    a.set(0, 0, true);
    b.set(3, 4, true);
    CHECK(hausdorff(a, b) == 5.0);
    CHECK(hausdorff(a, b, 100, HausdorffMethod::BruteForce) == 5.0);
    CHECK(hausdorff(a, a) == 0.0);
    CHECK_THROWS_AS(hausdorff(a, BinaryMask(5, 5)), EmptyMaskError);
    Rng rng(2);
    for (int t = 0; t < 100; ++t) {
        const auto x = random_mask(rng, 12, 12, 0.3), y = random_mask(rng, 12, 12, 0.3);
        if (x.empty() || y.empty()) continue;
        REQUIRE(hausdorff(x, y) == hausdorff(y, x));
        REQUIRE(hausdorff(x, y, 95) <= hausdorff(x, y));
        REQUIRE(hausdorff(x, x) == 0.0);
        REQUIRE(hausdorff(x, y, 95, HausdorffMethod::Grid) == hausdorff(x, y, 95, HausdorffMethod::BruteForce));
    }
}

TEST_CASE("boundary uses 4-neighbours and the image border") {
    const auto m = block(5, 5, 1, 1, 3, 3);
    const auto pts = boundary_points(m);
    CHECK(pts.size() == 8);
    for (const auto& p : pts) CHECK_FALSE((p.y == 2 && p.x == 2));
    const auto full = block(3, 3, 0, 0, 3, 3);
    CHECK(boundary_points(full).size() == 8);
}

TEST_CASE("percentile interpolation") {
    CHECK(percentile_linear({1, 2, 3, 4, 5}, 50) == 3.0);
    CHECK(percentile_linear({0, 10}, 95) == doctest::Approx(9.5));
    CHECK(percentile_linear({4}, 95) == 4.0);
}

TEST_CASE("accelerated distances agree with brute force on 1000 mask pairs") {
    const auto s = metrics_oracle(7, 1000);
    CHECK(s.pairs == 1000);
    CHECK(s.dice_mismatch == 0);
    CHECK(s.hd_mismatch == 0);
    CHECK(s.hd95_mismatch == 0);
    CHECK(s.hd95_above_hd == 0);
}

TEST_CASE("evaluate conventions") {
    LabelMap truth(2, 6, 6);
    for (Index b = 0; b < 2; ++b)
        for (Index y = 1; y < 4; ++y)
            for (Index x = 1; x < 3 + b; ++x) truth.at(b, y, x) = 1;
    truth.at(0, 5, 5) = 2;
    auto t = evaluate(truth, truth, 3);
    CHECK(t.mean_dice == 1.0);
    REQUIRE(t.mean_hd.has_value());
    CHECK(*t.mean_hd == 0.0);

    LabelMap bg(2, 6, 6);
    t = evaluate(bg, truth, 3);
    REQUIRE(t.classes.size() == 2);
    CHECK(t.classes[0].dice == 0.0);
    CHECK_FALSE(t.classes[0].hd.has_value());
    std::ostringstream os;
    write_evaluation_csv(os, t);
    CHECK(os.str().rfind("class,dice,hd,hd95\n", 0) == 0);
    CHECK(os.str().find("NA") != std::string::npos);
}

TEST_CASE("evaluate matches per-class manual computation") {
    Rng rng(3);
    LabelMap pred(3, 10, 10), truth(3, 10, 10);
    for (auto& v : pred.data) v = static_cast<std::int32_t>(rng.uniform_int(0, 2));
    for (auto& v : truth.data) v = static_cast<std::int32_t>(rng.uniform_int(0, 2));
    const auto t = evaluate(pred, truth, 3);
    REQUIRE(t.classes.size() == 2);
    double mean = 0;
    for (int cls = 1; cls <= 2; ++cls) {
        double dsum = 0, hsum = 0, h95 = 0;
        for (Index b = 0; b < 3; ++b) {
            const auto p = BinaryMask::from_labels(pred, b, cls), q = BinaryMask::from_labels(truth, b, cls);
            dsum += dice(p, q);
            hsum += hausdorff(p, q, 100, HausdorffMethod::BruteForce);
            h95 += hausdorff(p, q, 95, HausdorffMethod::BruteForce);
        }
        const auto& c = t.classes[cls - 1];
        CHECK(c.cls == cls);
        CHECK(c.dice == doctest::Approx(dsum / 3));
        REQUIRE(c.hd.has_value());
        CHECK(*c.hd == doctest::Approx(hsum / 3));
        CHECK(*c.hd95 == doctest::Approx(h95 / 3));
        mean += c.dice / 2;
    }
    CHECK(t.mean_dice == doctest::Approx(mean));
}
