#include <cmath>
#include <numeric>
#include <sstream>

#include "doctest.h"
#include "punet/enlsa.hpp"
#include "punet/gradcheck.hpp"
#include "test_util.hpp"

using namespace punet;
using punet::test::randn;
using punet::test::randv;

namespace {

Linear<double> const_linear(Index c, double w_diag, std::vector<double> bias) {
    Linear<double> l;
    Tensor<double> w(Shape::matrix(c, c));
    for (Index i = 0; i < c; ++i) w[i * c + i] = w_diag;
    l.weight = Var<double>(w);
    l.bias = Var<double>(Tensor<double>(Shape::vector(c), std::move(bias)));
    return l;
}

std::vector<double> row(const Tensor<double>& t, Index r) {
    return std::vector<double>(t.ptr() + r * t.w(), t.ptr() + (r + 1) * t.w());
}

}  // namespace

TEST_CASE("feature bank is seeded standard normal") {
    const auto a = make_feature_bank<double>(512, 8, 77);
    const auto b = make_feature_bank<double>(512, 8, 77);
    const auto c = make_feature_bank<double>(512, 8, 78);
    CHECK(test::bit_equal(a.phi, b.phi));
    CHECK_FALSE(test::bit_equal(a.phi, c.phi));
    double s = 0, s2 = 0;
    for (Index i = 0; i < a.phi.numel(); ++i) s += a.phi[i], s2 += a.phi[i] * a.phi[i];
    const double n = static_cast<double>(a.phi.numel());
    CHECK(std::abs(s / n) < 0.05);
    CHECK(std::abs(s2 / n - 1.0) < 0.06);
    CHECK_THROWS_AS(make_feature_bank<double>(0, 8, 1), std::invalid_argument);
    CHECK_FALSE(test::bit_equal(redraw_feature_bank<double>(16, 4, 1, 0).phi,
                                redraw_feature_bank<double>(16, 4, 1, 1).phi));
}

TEST_CASE("feature map at the origin") {
    const Index m = 64;
    const auto bank = make_feature_bank<double>(m, 5, 3);
    double s = 0;
    const auto f = feature_map(Var<double>(Tensor<double>::matrix(2, 5)), bank.phi, {}, &s);
    for (Index j = 0; j < 2 * m; ++j) CHECK(f.value[j] == doctest::Approx(std::exp(-s) / std::sqrt(double(m))));
    double dot = 0;
    for (Index j = 0; j < m; ++j) dot += f.value[j] * f.value[m + j];
    CHECK(dot * std::exp(2 * s) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("feature map with a single zero feature") {
    FeatureBank<double> bank;
    bank.phi = Tensor<double>::matrix(1, 3);
    Tensor<double> x = test::from_list<double>(Shape::matrix(2, 3), {0.3, -0.2, 0.5, 1.0, 0.1, -0.4});
    double s = 0;
    const auto f = feature_map(Var<double>(x), bank.phi, {}, &s);
    const double nq = 0.09 + 0.04 + 0.25, nk = 1.0 + 0.01 + 0.16;
    CHECK(f.value[0] * f.value[1] * std::exp(2 * s) == doctest::Approx(std::exp(-(nq + nk) / 2)).epsilon(1e-12));
    CHECK(kernel_estimate(row(x, 0), row(x, 1), bank) == doctest::Approx(std::exp(-(nq + nk) / 2)).epsilon(1e-12));
}

TEST_CASE("feature map outputs are positive and finite for large inputs") {
    Rng rng(4);
    const auto bank = make_feature_bank<double>(32, 6, 5);
    for (auto scope : {ShiftScope::Global, ShiftScope::PerMatrix, ShiftScope::PerRow}) {
        FeatureMapOptions o;
        o.scope = scope;
        const auto f = feature_map(randv(Shape::matrix(10, 6), rng, 30.0), bank.phi, o);
        for (Index i = 0; i < f.value.numel(); ++i) {
            REQUIRE(std::isfinite(f.value[i]));
            REQUIRE(f.value[i] >= 0.0);
        }
    }
}

TEST_CASE("kernel estimate is unbiased over bank redraws") {
    Rng rng(6);
    const Index c = 4, m = 16;
    const int draws = 10000;
    for (int pair = 0; pair < 4; ++pair) {
        std::vector<double> q(c), k(c);
        for (auto* v : {&q, &k}) {
            for (auto& e : *v) e = rng.normal();
            const double norm = std::sqrt(std::inner_product(v->begin(), v->end(), v->begin(), 0.0));
            const double target = rng.uniform(0.2, 0.6);
            for (auto& e : *v) e *= target / norm;
        }
        const double exact = std::exp(std::inner_product(q.begin(), q.end(), k.begin(), 0.0));
        double mean = 0, literal = 0;
        for (int d = 0; d < draws; ++d) {
            const auto bank = redraw_feature_bank<double>(m, c, 1000 + pair, d);
            mean += kernel_estimate(q, k, bank);
            literal += kernel_estimate(q, k, bank, FeatureForm::LiteralGaussian);
        }
        mean /= draws;
        literal /= draws;
        CHECK(std::abs(mean - exact) / exact < 0.01);
        // Literal form: E = exp(q.k) 3^{-c/2} exp(-|q+k|^2 / 3).
        double a2 = 0;
        for (Index i = 0; i < c; ++i) a2 += (q[i] + k[i]) * (q[i] + k[i]);
        CHECK(literal / exact == doctest::Approx(std::pow(3.0, -double(c) / 2) * std::exp(-a2 / 3)).epsilon(0.05));
    }
}

TEST_CASE("estimator error curve") {
    ErrorCurveOptions opt;
    const auto rows = estimator_error_curve(opt);
    REQUIRE(rows.size() == 3);
    CHECK(rows[0].m == 256);
    CHECK(rows[1].median_rel_error < rows[0].median_rel_error);
    CHECK(rows[2].median_rel_error < rows[1].median_rel_error);
    CHECK(rows[2].median_rel_error * 2 <= rows[0].median_rel_error);
    CHECK(test::bit_equal(Tensor<double>::vector(1, rows[2].median_rel_error),
                          Tensor<double>::vector(1, estimator_error_curve(opt)[2].median_rel_error)));
    for (Index m : {1, 16, 4096}) {
        const auto bank = make_feature_bank<double>(m, 8, 9);
        const std::vector<double> zero(8, 0.0);
        CHECK(std::abs(kernel_estimate(zero, zero, bank) - 1.0) < 1e-12);
    }
    std::ostringstream os;
    write_error_curve_csv(os, rows);
    CHECK(os.str().rfind("m,median_rel_error", 0) == 0);
}

TEST_CASE("single token attends to itself") {
    Rng rng(7);
    for (Index m : {1, 32, 512}) {
        EnlsaConfig cfg{6, m};
        cfg.eps = 0;
        auto p = make_enlsa<double>(cfg, rng);
        const Var<double> x = randv(Shape{1, 1, 1, 6}, rng);
        const auto v = linear(x, p.v.weight, p.v.bias);
        CHECK(max_abs_diff(enlsa_attention(x, p).value, v.value) < 1e-12);
        CHECK(max_abs_diff(exact_attention(x, p).value, v.value) < 1e-12);
        // Default eps shrinks the row by den / (den + eps), uniformly.
        p.cfg.eps = 1e-6;
        const auto y = enlsa_attention(x, p);
        const double f = y.value[0] / v.value[0];
        CHECK(f <= 1.0);
        CHECK(f > 0.99);
        for (Index i = 1; i < 6; ++i) CHECK(std::abs(y.value[i] / v.value[i] - f) < 1e-12);
    }
    CHECK_THROWS_AS(make_enlsa<double>(EnlsaConfig{6, 4, -1, -1.0}, rng), std::invalid_argument);
}

TEST_CASE("constant values pass through unchanged") {
    Rng rng(8);
    for (Index m : {1, 8, 256}) {
        EnlsaConfig cfg{4, m};
        cfg.eps = 0;
        auto p = make_enlsa<double>(cfg, rng);
        p.v = const_linear(4, 0.0, {1, 1, 1, 1});
        const auto x = randv(Shape{2, 1, 9, 4}, rng, 2.0);
        auto y = enlsa_attention(x, p);
        for (Index i = 0; i < y.value.numel(); ++i) REQUIRE(std::abs(y.value[i] - 1.0) < 1e-12);
        p.cfg.eps = 1e-6;
        y = enlsa_attention(x, p);
        for (Index i = 0; i < y.value.numel(); ++i) {
            REQUIRE(y.value[i] <= 1.0);
            REQUIRE(y.value[i] > 0.99);
            REQUIRE(y.value[i] == y.value[i - i % 4]);
        }
    }
}

TEST_CASE("exact attention hand cases") {
    EnlsaConfig cfg{2, 4};
    cfg.scale = 1.0;
    auto p = make_enlsa_identity<double>(cfg, 1);
    // Zero logits: uniform weights.
    p.q = const_linear(2, 0.0, {0, 0});
    Rng rng(9);
    const Var<double> x = randv(Shape{1, 1, 5, 2}, rng);
    const auto y = exact_attention(x, p);
    for (Index j = 0; j < 2; ++j) {
        double mean = 0;
        for (Index i = 0; i < 5; ++i) mean += x.value[i * 2 + j] / 5;
        for (Index i = 0; i < 5; ++i) CHECK(y.value[i * 2 + j] == doctest::Approx(mean));
    }
    // Row 0 logits (0, ln 2, 0).
    p.q = const_linear(2, 0.0, {1, 0});
    const Var<double> t(test::from_list<double>(Shape{1, 1, 3, 2}, {0, 0, std::log(2.0), 0, 0, 5}));
    const auto z = exact_attention(t, p);
    CHECK(z.value[0] == doctest::Approx((0 + 2 * std::log(2.0) + 0) / 4));
    CHECK(z.value[1] == doctest::Approx((0 + 0 + 5.0) / 4));
}

TEST_CASE("exact attention refuses oversized inputs") {
    auto p = make_enlsa_identity<float>(EnlsaConfig{2, 4}, 1);
    const Var<float> x(Tensor<float>(Shape{1, 1, kExactAttentionMaxTokens + 1, 2}));
    CHECK_THROWS_AS(exact_attention(x, p), std::length_error);
}

TEST_CASE("attention weights are row-stochastic") {
    Rng rng(10);
    auto p = make_enlsa<double>(EnlsaConfig{8, 64}, rng);
    const auto w = enlsa_weights(randn(Shape{1, 1, 20, 8}, rng, 1.5), p);
    REQUIRE(w.shape() == Shape{1, 1, 20, 20});
    for (Index r = 0; r < 20; ++r) {
        double s = 0;
        for (Index j = 0; j < 20; ++j) {
            REQUIRE(w[r * 20 + j] >= 0.0);
            s += w[r * 20 + j];
        }
        CHECK(std::abs(s - 1.0) < 1e-5);
    }
}

TEST_CASE("stabilization shift cancels in the output") {
    Rng rng(11);
    EnlsaConfig cfg{8, 128};
    cfg.eps = 0;
    auto stable = make_enlsa<double>(cfg, rng);
    auto raw = stable;
    raw.cfg.stabilize = false;
    const Var<double> x = randv(Shape{2, 1, 30, 8}, rng);
    const auto a = enlsa_attention(x, stable), b = enlsa_attention(x, raw);
    CHECK(max_abs_diff(a.value, b.value) < 1e-5);
    auto fa = make_enlsa<float>(cfg, rng), fb = fa;
    fb.cfg.stabilize = false;
    const Var<float> xf = randv<float>(Shape{1, 1, 30, 8}, rng);
    CHECK(max_abs_diff(enlsa_attention(xf, fa).value, enlsa_attention(xf, fb).value) < 1e-5f);
}

TEST_CASE("unnormalized mode skips the denominator") {
    Rng rng(12);
    EnlsaConfig cfg{4, 16};
    cfg.normalize = false;
    auto p = make_enlsa<double>(cfg, rng);
    p.v = const_linear(4, 0.0, {1, 1, 1, 1});
    const auto y = enlsa_attention(randv(Shape{1, 1, 6, 4}, rng), p);
    // Without normalization each output is the unnormalized row sum.
    CHECK(std::abs(y.value[0] - 1.0) > 1e-3);
}

TEST_CASE("non-finite tokens are reported") {
    Rng rng(13);
    auto p = make_enlsa<float>(EnlsaConfig{4, 8}, rng);
    Tensor<float> x(Shape{1, 1, 3, 4}, 0.5f);
    x[2] = std::numeric_limits<float>::infinity();
    CHECK_THROWS_AS(enlsa_attention(Var<float>(x), p), NumericError);
    CHECK_THROWS_AS(enlsa_attention(Var<float>(Tensor<float>(Shape{1, 1, 3, 5})), p), ShapeError);
}

TEST_CASE("enlsa gradients match finite differences") {
    Rng rng(14);
    auto p = make_enlsa<double>(EnlsaConfig{5, 24}, rng);
    Var<double> x = randv(Shape{2, 1, 7, 5}, rng);
    const Var<double> r = randv(Shape{2, 1, 7, 5}, rng);
    auto leaves = param_leaves(p, "attn");
    leaves.emplace_back("tokens", &x);
    CHECK(worst_rel_error(grad_check(leaves, [&] { return sum_all(mul(enlsa_attention(x, p), r)); })) < 1e-3);
    CHECK(worst_rel_error(grad_check(leaves, [&] { return sum_all(mul(exact_attention(x, p), r)); })) < 1e-3);
}

TEST_CASE("redraw mode changes the bank") {
    Rng rng(15);
    EnlsaConfig cfg{4, 16};
    cfg.redraw = true;
    auto p = make_enlsa<double>(cfg, rng);
    const Var<double> x = randv(Shape{1, 1, 5, 4}, rng);
    const auto a = enlsa_attention_redraw(x, p);
    const auto b = enlsa_attention_redraw(x, p);
    CHECK(max_abs_diff(a.value, b.value) > 0.0);
}

TEST_CASE("scaling benchmark degenerate size") {
    ScalingOptions opt;
    opt.c = 8;
    opt.m = 16;
    opt.n_list = {1, 2};
    opt.repeats = 1;
    const auto rows = scaling_benchmark(opt);
    REQUIRE(rows.size() == 2);
    for (const auto& r : rows) {
        CHECK(r.enlsa_seconds > 0);
        CHECK(r.exact_seconds > 0);
    }
    opt.c = 0;
    CHECK_THROWS_AS(scaling_benchmark(opt), std::invalid_argument);
}
