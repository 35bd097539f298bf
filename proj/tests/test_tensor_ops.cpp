#include <cmath>
#include <numeric>

#include "doctest.h"
#include "punet/gradcheck.hpp"
#include "punet/ops.hpp"
#include "test_util.hpp"

using namespace punet;
using punet::test::from_list;
using punet::test::randn;
using punet::test::randv;

TEST_CASE("tensor storage and finiteness") {
    Tensor<float> t(Shape{2, 3, 4, 5}, 1.f);
    CHECK(t.numel() == 120);
    CHECK(t.data().size() == 120);
    CHECK(t(1, 2, 3, 4) == 1.f);
    t(0, 1, 2, 3) = 7.f;
    CHECK(t[((0 * 3 + 1) * 4 + 2) * 5 + 3] == 7.f);
    CHECK_THROWS_AS(t.reshaped(Shape{1, 1, 1, 7}), std::invalid_argument);
    CHECK(t.reshaped(Shape::matrix(6, 20)).shape() == Shape{1, 1, 6, 20});
    CHECK(t.all_finite());
    t[5] = std::nanf("");
    CHECK_FALSE(t.all_finite());
    CHECK_THROWS_AS(check_finite("probe", t), NumericError);
    try {
        check_finite("probe", t);
    } catch (const NumericError& e) {
        CHECK(e.stage() == "probe");
    }
}

TEST_CASE("op outputs are checked for non-finite values") {
    Var<float> x(Tensor<float>::vector(2, 100.f));
    CHECK_THROWS_AS(exponential(x), NumericError);
    set_finite_checks(false);
    CHECK_NOTHROW(exponential(x));
    set_finite_checks(true);
}

TEST_CASE("rng is deterministic and forks independently") {
    Rng a(123), b(123), c(124);
    for (int i = 0; i < 100; ++i) {
        const auto va = a.next_u64();
        CHECK(va == b.next_u64());
        CHECK(va != c.next_u64());
    }
    Rng f1 = Rng(9).fork(1), f2 = Rng(9).fork(2), f1b = Rng(9).fork(1);
    CHECK(f1.next_u64() == f1b.next_u64());
    CHECK(f1.next_u64() != f2.next_u64());
    Rng u(5);
    double mean = 0, sq = 0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        const double x = u.uniform();
        REQUIRE(x >= 0.0);
        REQUIRE(x < 1.0);
        const double z = u.normal();
        mean += z;
        sq += z * z;
    }
    CHECK(std::abs(mean / n) < 0.03);
    CHECK(std::abs(sq / n - 1.0) < 0.05);
    for (int i = 0; i < 200; ++i) {
        const auto k = u.uniform_int(-2, 3);
        REQUIRE(k >= -2);
        REQUIRE(k <= 3);
    }
}

TEST_CASE("conv2d: identity 1x1 kernel") {
    Rng rng(1);
    Var<float> x = randv<float>(Shape{2, 3, 5, 4}, rng);
    Tensor<float> w(Shape{3, 3, 1, 1});
    for (Index i = 0; i < 3; ++i) w(i, i, 0, 0) = 1.f;
    const auto y = conv2d(x, Var<float>(w), Var<float>(Tensor<float>::vector(3)), {});
    CHECK(y.value.shape() == x.value.shape());
    CHECK(max_abs_diff(y.value, x.value) == 0.f);
}

TEST_CASE("conv2d: stage-3 downsampling shape") {
    Rng rng(2);
    Var<float> x = randv<float>(Shape{1, 128, 112, 112}, rng);
    Var<float> w = randv<float>(Shape{256, 128, 3, 3}, rng, 0.03);
    const auto y = conv2d(x, w, Var<float>(Tensor<float>::vector(256)), {2, 1, 1});
    CHECK(y.value.shape() == Shape{1, 256, 56, 56});
    CHECK(conv_output_size(112, 3, 2, 1, 1) == 56);
    CHECK(conv_output_size(9, 3, 1, 2, 2) == 9);
}

TEST_CASE("conv2d: dilated taps match direct summation") {
    Rng rng(3);
    Tensor<double> x = randn(Shape{1, 1, 9, 9}, rng);
    Tensor<double> w(Shape{1, 1, 3, 3}, 1.0);
    const auto y = conv2d(Var<double>(x), Var<double>(w), Var<double>(Tensor<double>::vector(1)), {1, 2, 2});
    REQUIRE(y.value.shape() == Shape{1, 1, 9, 9});
    for (Index oy = 0; oy < 9; ++oy) {
        for (Index ox = 0; ox < 9; ++ox) {
            double ref = 0;
            for (int dy = -1; dy <= 1; ++dy) {
                for (int dx = -1; dx <= 1; ++dx) {
                    const Index iy = oy + 2 * dy, ix = ox + 2 * dx;
                    if (iy >= 0 && iy < 9 && ix >= 0 && ix < 9) ref += x(0, 0, iy, ix);
                }
            }
            REQUIRE(y.value(0, 0, oy, ox) == doctest::Approx(ref).epsilon(1e-12));
        }
    }
}

TEST_CASE("conv2d: delta input touches exactly the dilated taps") {
    for (int d : {1, 2, 3}) {
        for (Index k : {3, 5}) {
            const Index side = 2 * d * (k - 1) + 1;
            Tensor<double> x(Shape{1, 1, side, side});
            x(0, 0, side / 2, side / 2) = 1.0;
            Tensor<double> w(Shape{1, 1, k, k}, 1.0);
            const int pad = d * static_cast<int>(k - 1) / 2;
            const auto y = conv2d(Var<double>(x), Var<double>(w), Var<double>(Tensor<double>::vector(1)), {1, d, pad});
            const Index half = d * (k - 1) / 2;
            for (Index oy = 0; oy < side; ++oy) {
                for (Index ox = 0; ox < side; ++ox) {
                    const Index ry = side / 2 - oy, rx = side / 2 - ox;
                    const bool tap = std::abs(ry) <= half && std::abs(rx) <= half && ry % d == 0 && rx % d == 0;
                    REQUIRE(y.value(0, 0, oy, ox) == (tap ? 1.0 : 0.0));
                }
            }
        }
    }
}

TEST_CASE("conv2d: channel mismatch names the axis") {
    Var<float> x(Tensor<float>(Shape{1, 2, 4, 4}));
    Var<float> w(Tensor<float>(Shape{1, 3, 3, 3}));
    try {
        conv2d(x, w, Var<float>(Tensor<float>::vector(1)), {1, 1, 1});
        FAIL("expected a shape error");
    } catch (const ShapeError& e) {
        CHECK(e.op() == "conv2d");
        CHECK(e.axis() == "channel");
    }
}

TEST_CASE("batch_norm examples") {
    BnState<float> st{Tensor<float>::vector(2), Tensor<float>::vector(2, 1.f)};
    Var<float> g(Tensor<float>::vector(2, 1.f)), b(Tensor<float>::vector(2));
    Tensor<float> x(Shape{2, 2, 3, 3});
    for (Index n = 0; n < 2; ++n)
        for (Index i = 0; i < 9; ++i) {
            x[(n * 2 + 0) * 9 + i] = 3.f;
            x[(n * 2 + 1) * 9 + i] = -1.f;
        }
    auto y = batch_norm(Var<float>(x), g, b, st, {true, 0.1, 1e-5});
    for (Index i = 0; i < y.value.numel(); ++i) REQUIRE(y.value[i] == 0.f);
    CHECK(st.running_mean[0] == doctest::Approx(0.3));
    CHECK(st.running_mean[1] == doctest::Approx(-0.1));
    CHECK(st.running_var[0] == doctest::Approx(0.9));

    Rng rng(4);
    BnState<float> id{Tensor<float>::vector(2), Tensor<float>::vector(2, 1.f)};
    Var<float> xr = randv<float>(Shape{3, 2, 4, 4}, rng, 2.0);
    y = batch_norm(xr, g, b, id, {false, 0.1, 1e-12});
    CHECK(max_abs_diff(y.value, xr.value) < 1e-6f);

    y = batch_norm(xr, g, b, id, {true, 0.1, 1e-5});
    for (Index c = 0; c < 2; ++c) {
        double m = 0, v = 0;
        for (Index n = 0; n < 3; ++n)
            for (Index i = 0; i < 16; ++i) m += y.value[(n * 2 + c) * 16 + i];
        m /= 48;
        for (Index n = 0; n < 3; ++n)
            for (Index i = 0; i < 16; ++i) v += std::pow(y.value[(n * 2 + c) * 16 + i] - m, 2);
        v /= 48;
        CHECK(std::abs(m) < 1e-5);
        CHECK(std::abs(v - 1.0) < 1e-3);
    }
    CHECK_THROWS_AS(batch_norm(xr, g, b, id, {false, 0.1, 0.0}), std::invalid_argument);
}

TEST_CASE("layer_norm examples") {
    Var<double> g(Tensor<double>::vector(2, 1.0)), b(Tensor<double>::vector(2));
    auto y = layer_norm(Var<double>(from_list<double>(Shape::matrix(1, 2), {1, -1})), g, b, 1e-14);
    CHECK(y.value[0] == doctest::Approx(1.0));
    CHECK(y.value[1] == doctest::Approx(-1.0));
    y = layer_norm(Var<double>(Tensor<double>::matrix(3, 2, 4.0)), g, b, 1e-5);
    for (Index i = 0; i < 6; ++i) CHECK(y.value[i] == 0.0);

    Rng rng(5);
    Var<float> x = randv<float>(Shape::matrix(16, 32), rng, 3.0);
    Var<float> g32(Tensor<float>::vector(32, 1.f)), b32(Tensor<float>::vector(32));
    const auto z = layer_norm(x, g32, b32, 1e-5);
    for (Index r = 0; r < 16; ++r) {
        double m = 0, v = 0;
        for (Index j = 0; j < 32; ++j) m += z.value[r * 32 + j];
        m /= 32;
        for (Index j = 0; j < 32; ++j) v += std::pow(z.value[r * 32 + j] - m, 2);
        v /= 32;
        CHECK(std::abs(m) < 1e-6);
        CHECK(std::abs(v - 1.0) < 1e-3);
    }
    CHECK_THROWS_AS(layer_norm(x, g32, b32, -1.0), std::invalid_argument);
}

TEST_CASE("matmul examples") {
    Var<float> a(from_list<float>(Shape::matrix(2, 2), {1, 2, 3, 4}));
    Var<float> b(from_list<float>(Shape::matrix(2, 1), {5, 6}));
    const auto y = matmul(a, b);
    CHECK(y.value.shape() == Shape::matrix(2, 1));
    CHECK(y.value[0] == 17.f);
    CHECK(y.value[1] == 39.f);

    Tensor<float> eye = Tensor<float>::matrix(2, 2);
    eye[0] = eye[3] = 1.f;
    CHECK(max_abs_diff(matmul(a, Var<float>(eye)).value, a.value) == 0.f);

    Rng rng(6);
    Var<float> p = randv<float>(Shape::matrix(7, 5), rng), q = randv<float>(Shape::matrix(5, 3), rng);
    const auto r = matmul(p, q);
    for (Index i = 0; i < 7; ++i)
        for (Index j = 0; j < 3; ++j) {
            double ref = 0;
            for (Index k = 0; k < 5; ++k) ref += double(p.value[i * 5 + k]) * q.value[k * 3 + j];
            REQUIRE(std::abs(r.value[i * 3 + j] - ref) < 1e-5);
        }
    CHECK_THROWS_AS(matmul(p, p), ShapeError);
}

TEST_CASE("elementwise examples") {
    Var<float> x(from_list<float>(Shape::vector(3), {-1, 0, 2}));
    const auto r = relu(x);
    CHECK(r.value[0] == 0.f);
    CHECK(r.value[1] == 0.f);
    CHECK(r.value[2] == 2.f);
    CHECK(max_abs_diff(add(x, Var<float>(Tensor<float>::vector(3))).value, x.value) == 0.f);
    const double exact = 0.5 * (1.0 + std::erf(1.0 / std::sqrt(2.0)));
    const auto g = gelu(Var<double>(Tensor<double>::scalar(1.0)));
    CHECK(std::abs(g.value[0] - exact) < 1e-3);
    CHECK(g.value[0] == doctest::Approx(0.8412).epsilon(1e-3));
    CHECK(scale(x, 2.0).value[2] == 4.f);
    CHECK(mul(x, x).value[0] == 1.f);
    CHECK(sub(x, x).value[2] == 0.f);
    CHECK(add_scalar(x, 1.0).value[0] == 0.f);
    CHECK_THROWS_AS(add(x, Var<float>(Tensor<float>::vector(2))), ShapeError);
}

TEST_CASE("softmax examples") {
    auto y = softmax_lastdim(Var<double>(Tensor<double>::matrix(1, 4, 3.0)));
    for (Index i = 0; i < 4; ++i) CHECK(y.value[i] == doctest::Approx(0.25));
    y = softmax_lastdim(Var<double>(from_list<double>(Shape::matrix(1, 2), {1000, 1000})));
    CHECK(y.value[0] == 0.5);
    CHECK(y.value[1] == 0.5);
    y = softmax_lastdim(Var<double>(from_list<double>(Shape::matrix(1, 3), {1, 2, 3})));
    CHECK(std::abs(y.value[0] - 0.0900) < 1e-4);
    CHECK(std::abs(y.value[1] - 0.2447) < 1e-4);
    CHECK(std::abs(y.value[2] - 0.6652) < 1e-4);

    Rng rng(7);
    const auto z = softmax_lastdim(randv<float>(Shape::matrix(32, 17), rng, 1e4));
    for (Index r = 0; r < 32; ++r) {
        double s = 0;
        for (Index j = 0; j < 17; ++j) {
            REQUIRE(z.value[r * 17 + j] >= 0.f);
            s += z.value[r * 17 + j];
        }
        REQUIRE(std::abs(s - 1.0) < 1e-6);
    }
}

TEST_CASE("bilinear upsample examples") {
    auto y = bilinear_upsample2x(Var<float>(Tensor<float>(Shape{1, 2, 3, 5}, 1.5f)));
    CHECK(y.value.shape() == Shape{1, 2, 6, 10});
    for (Index i = 0; i < y.value.numel(); ++i) REQUIRE(y.value[i] == 1.5f);
    y = bilinear_upsample2x(Var<float>(from_list<float>(Shape{1, 1, 1, 2}, {0, 1})));
    REQUIRE(y.value.shape() == Shape{1, 1, 2, 4});
    const float expect[4] = {0.f, 0.25f, 0.75f, 1.f};
    for (Index r = 0; r < 2; ++r)
        for (Index j = 0; j < 4; ++j) CHECK(y.value(0, 0, r, j) == doctest::Approx(expect[j]));
    y = bilinear_upsample2x(Var<float>(Tensor<float>(Shape{1, 1024, 14, 14})));
    CHECK(y.value.shape() == Shape{1, 1024, 28, 28});
}

TEST_CASE("space_to_depth examples") {
    const auto y = space_to_depth2(Var<float>(from_list<float>(Shape{1, 1, 2, 2}, {1, 2, 3, 4})));
    REQUIRE(y.value.shape() == Shape{1, 4, 1, 1});
    for (Index i = 0; i < 4; ++i) CHECK(y.value[i] == float(i + 1));
    Rng rng(8);
    Var<float> x = randv<float>(Shape{2, 3, 6, 4}, rng);
    CHECK(max_abs_diff(depth_to_space2(space_to_depth2(x)).value, x.value) == 0.f);
    CHECK(space_to_depth2(Var<float>(Tensor<float>(Shape{1, 256, 56, 56}))).value.shape() ==
          Shape{1, 1024, 28, 28});
    CHECK_THROWS_AS(space_to_depth2(Var<float>(Tensor<float>(Shape{1, 1, 3, 4}))), ShapeError);
}

TEST_CASE("token reshapes round trip") {
    Rng rng(9);
    Var<float> x = randv<float>(Shape{2, 5, 3, 4}, rng);
    const auto t = to_tokens(x);
    CHECK(t.value.shape() == Shape{2, 1, 12, 5});
    CHECK(t.value(1, 0, 4, 2) == x.value(1, 2, 1, 0));
    CHECK(test::bit_equal(from_tokens(t, 3, 4).value, x.value));
    const auto cat = concat_rows<float>({slice_rows(t, 0, 5), slice_rows(t, 5, 7)});
    CHECK(test::bit_equal(cat.value, t.value));
}

TEST_CASE("backward basics") {
    Tape<double> tape;
    Rng rng(10);
    Var<double> x = tape.leaf(randn(Shape{1, 2, 3, 3}, rng));
    Var<double> unused = tape.leaf(randn(Shape::vector(2), rng));
    auto g = backward(tape, sum_all(x));
    for (Index i = 0; i < x.value.numel(); ++i) REQUIRE(g.at(x)[i] == 1.0);
    CHECK(g.find(unused) == nullptr);

    Tape<double> t2;
    Var<double> y = t2.leaf(randn(Shape{1, 1, 4, 4}, rng));
    g = backward(t2, sum_all(mul(y, y)));
    for (Index i = 0; i < 16; ++i) REQUIRE(g.at(y)[i] == doctest::Approx(2 * y.value[i]));

    // fan-out accumulates
    Tape<double> t3;
    Var<double> z = t3.leaf(randn(Shape::vector(3), rng));
    g = backward(t3, sum_all(add(z, scale(z, 3.0))));
    for (Index i = 0; i < 3; ++i) REQUIRE(g.at(z)[i] == doctest::Approx(4.0));

    CHECK_THROWS_AS(backward(t3, add(z, z)), ShapeError);
}

TEST_CASE("detached inputs record nothing") {
    Tape<float> tape;
    Var<float> a(Tensor<float>::vector(3, 1.f));
    const auto b = relu(a);
    CHECK_FALSE(b.tracked());
    CHECK(tape.size() == 0);
}

TEST_CASE("forward is bit-identical across runs") {
    auto run = [] {
        Rng rng(11);
        Var<float> x = randv<float>(Shape{1, 4, 8, 8}, rng);
        Var<float> w = randv<float>(Shape{6, 4, 3, 3}, rng);
        Var<float> b = randv<float>(Shape::vector(6), rng);
        return gelu(conv2d(x, w, b, {1, 2, 2})).value;
    };
    CHECK(test::bit_equal(run(), run()));
}

namespace {

double probe_check(std::vector<Leaf> leaves, const std::function<Var<double>()>& f) {
    return worst_rel_error(grad_check(leaves, f));
}

}  // namespace

TEST_CASE("finite-difference checks for core ops") {
    Rng rng(12);
    Var<double> x = randv(Shape{2, 3, 5, 5}, rng);
    Var<double> w = randv(Shape{4, 3, 3, 3}, rng);
    Var<double> b = randv(Shape::vector(4), rng);
    Var<double> r = randv(Shape{2, 4, 3, 3}, rng);
    CHECK(probe_check({{"x", &x}, {"w", &w}, {"b", &b}},
                      [&] { return sum_all(mul(conv2d(x, w, b, {2, 2, 2}), r)); }) < 1e-3);

    Var<double> m1 = randv(Shape{1, 2, 4, 3}, rng), m2 = randv(Shape{1, 2, 3, 5}, rng);
    Var<double> rm = randv(Shape{1, 2, 4, 5}, rng);
    CHECK(probe_check({{"a", &m1}, {"b", &m2}}, [&] { return sum_all(mul(matmul(m1, m2), rm)); }) < 1e-3);

    Var<double> s = randv(Shape::matrix(4, 6), rng), rs = randv(Shape::matrix(4, 6), rng);
    CHECK(probe_check({{"s", &s}}, [&] { return sum_all(mul(softmax_lastdim(s), rs)); }) < 1e-3);
    CHECK(probe_check({{"s", &s}}, [&] { return sum_all(mul(gelu(s), rs)); }) < 1e-3);

    Var<double> u = randv(Shape{1, 2, 3, 4}, rng), ru = randv(Shape{1, 2, 6, 8}, rng);
    CHECK(probe_check({{"u", &u}}, [&] { return sum_all(mul(bilinear_upsample2x(u), ru)); }) < 1e-3);

    Var<double> ln = randv(Shape::matrix(5, 6), rng), g = randv(Shape::vector(6), rng), be = randv(Shape::vector(6), rng);
    Var<double> rl = randv(Shape::matrix(5, 6), rng);
    CHECK(probe_check({{"x", &ln}, {"g", &g}, {"b", &be}},
                      [&] { return sum_all(mul(layer_norm(ln, g, be, 1e-5), rl)); }) < 1e-3);

    BnState<double> st{Tensor<double>::vector(3), Tensor<double>::vector(3, 1.0)};
    Var<double> bg = randv(Shape::vector(3), rng), bb = randv(Shape::vector(3), rng);
    Var<double> rb = randv(x.shape(), rng);
    CHECK(probe_check({{"x", &x}, {"g", &bg}, {"b", &bb}}, [&] {
              BnState<double> tmp = st;
              return sum_all(mul(batch_norm(x, bg, bb, tmp, {true, 0.1, 1e-5}), rb));
          }) < 1e-3);
}
