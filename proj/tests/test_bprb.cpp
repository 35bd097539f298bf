#include <algorithm>

#include "doctest.h"
#include "punet/bprb.hpp"
#include "punet/gradcheck.hpp"
#include "test_util.hpp"

using namespace punet;
using punet::test::randv;

namespace {

// Extent (rows, cols) of the nonzero entries of a single-sample map summed
// over channels.
std::pair<Index, Index> support_extent(const Tensor<double>& g) {
    Index y0 = g.h(), y1 = -1, x0 = g.w(), x1 = -1;
    for (Index c = 0; c < g.c(); ++c)
        for (Index y = 0; y < g.h(); ++y)
            for (Index x = 0; x < g.w(); ++x)
                if (g(0, c, y, x) != 0.0) {
                    y0 = std::min(y0, y), y1 = std::max(y1, y);
                    x0 = std::min(x0, x), x1 = std::max(x1, x);
                }
    if (y1 < 0) return {0, 0};
    return {y1 - y0 + 1, x1 - x0 + 1};
}

}  // namespace

TEST_CASE("receptive field closed form") {
    BprbConfig cfg{4, 4, 1, 1};
    CHECK(bprb_receptive_field(cfg) == ReceptiveField{5, 5});
    cfg.dilation = 2;
    CHECK(bprb_receptive_field(cfg) == ReceptiveField{5, 9});
    cfg.dilation = 3;
    CHECK(bprb_receptive_field(cfg) == ReceptiveField{5, 13});
}

TEST_CASE("receptive field matches gradient support") {
    for (int k : {1, 2, 3}) {
        CAPTURE(k);
        BprbConfig cfg{3, 6, 1, k};
        Rng rng(100 + k);
        auto p = make_bprb<double>(cfg, rng);
        const Index side = 21, mid = 10;
        const auto rf = bprb_receptive_field(cfg);
        for (int path = 0; path < 2; ++path) {
            Tape<double> tape;
            Rng xr(7);
            Var<double> x = tape.leaf(test::randn(Shape{1, 3, side, side}, xr));
            const auto paths = bprb_forward_paths(x, p, BnOptions{});
            const Var<double>& out = path == 0 ? paths.local : paths.global;
            Tensor<double> pick(out.shape());
            for (Index c = 0; c < out.shape().c; ++c) pick(0, c, mid, mid) = 1.0;
            const auto g = backward(tape, sum_all(mul(out, Var<double>(pick))));
            const auto ext = support_extent(g.at(x));
            const Index want = path == 0 ? rf.local : rf.global;
            CHECK(ext.first == want);
            CHECK(ext.second == want);
        }
    }
}

TEST_CASE("dilation 1 with shared weights makes the two paths equal") {
    BprbConfig cfg{3, 5, 1, 1};
    Rng rng(3);
    auto p = make_bprb<float>(cfg, rng);
    p.global1 = p.local1;
    p.global2 = p.local2;
    p.global_bn1 = p.local_bn1;
    p.global_bn2 = p.local_bn2;
    Rng xr(4);
    const auto paths = bprb_forward_paths(randv<float>(Shape{2, 3, 8, 8}, xr), p, BnOptions{});
    CHECK(test::bit_equal(paths.local.value, paths.global.value));
}

TEST_CASE("stage-3 block shape") {
    BprbConfig cfg{128, 256, 2, 2};
    Rng rng(5);
    auto p = make_bprb<float>(cfg, rng);
    Rng xr(6);
    const auto y = bprb_forward(randv<float>(Shape{1, 128, 112, 112}, xr), p, BnOptions{});
    CHECK(y.value.shape() == Shape{1, 256, 56, 56});
}

TEST_CASE("zero input gives a finite field, constant away from the border") {
    for (bool training : {false, true}) {
        BprbConfig cfg{2, 4, 2, 2};
        Rng rng(8);
        auto p = make_bprb<float>(cfg, rng);
        Rng br(9);
        FnVisitor<float> fv([&](const std::string& n, Var<float>& v) {
            if (n.ends_with(".bias") || n.ends_with(".beta"))
                for (Index i = 0; i < v.value.numel(); ++i) v.value[i] = static_cast<float>(br.normal());
        });
        visit(p, "b", fv);
        const auto y = bprb_forward(Var<float>(Tensor<float>(Shape{1, 2, 40, 40})), p, BnOptions{training});
        REQUIRE(y.value.all_finite());
        // Zero padding only reaches outputs within the receptive radius of the edge.
        const auto rf = bprb_receptive_field(cfg);
        const Index r = (std::max(rf.local, rf.global) / 2 + 1) / 2 + 1;
        REQUIRE(20 - 2 * r >= 2);
        for (Index c = 0; c < 4; ++c)
            for (Index yy = r; yy < 20 - r; ++yy)
                for (Index xx = r; xx < 20 - r; ++xx) REQUIRE(y.value(0, c, yy, xx) == y.value(0, c, r, r));
    }
}

TEST_CASE("ablation switches drop parameters") {
    Rng rng(10);
    BprbConfig full{3, 4, 1, 2};
    BprbConfig local_only = full;
    local_only.use_global = false;
    BprbConfig literal = full;
    literal.residual = false;
    auto a = make_bprb<float>(full, rng);
    auto b = make_bprb<float>(local_only, rng);
    auto c = make_bprb<float>(literal, rng);
    const Index conv3 = 4 * 4 * 9 + 4;
    CHECK(count_params<float>(a) - count_params<float>(b) == 3 * 4 * 9 + 4 + conv3 + 2 * 8 + (8 * 4 + 4));
    CHECK(count_params<float>(a) - count_params<float>(c) == 3 * 4 + 4);
    Rng xr(11);
    const auto y = bprb_forward(randv<float>(Shape{1, 3, 6, 6}, xr), b, BnOptions{});
    CHECK(y.value.shape() == Shape{1, 4, 6, 6});
}

TEST_CASE("channel mismatch is rejected") {
    Rng rng(12);
    auto p = make_bprb<float>(BprbConfig{3, 4, 1, 2}, rng);
    CHECK_THROWS_AS(bprb_forward(Var<float>(Tensor<float>(Shape{1, 2, 6, 6})), p, BnOptions{}), ShapeError);
    CHECK_THROWS_AS(make_bprb<float>(BprbConfig{3, 4, 3, 2}, rng), std::invalid_argument);
}

TEST_CASE("bprb gradients match finite differences") {
    Rng rng(13);
    auto p = make_bprb<double>(BprbConfig{2, 3, 2, 2}, rng);
    Rng xr(14);
    Var<double> x = randv(Shape{2, 2, 6, 6}, xr);
    Var<double> r = randv(Shape{2, 3, 3, 3}, xr);
    auto leaves = param_leaves(p, "bprb");
    leaves.emplace_back("x", &x);
    GradCheckOptions opt;
    opt.coords = 6;
    const auto res = grad_check(leaves, [&] {
        auto q = p;
        return sum_all(mul(bprb_forward(x, q, BnOptions{true}), r));
    }, opt);
    CHECK(worst_rel_error(res) < 1e-3);
}
