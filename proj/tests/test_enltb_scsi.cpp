#include <algorithm>
#include <numeric>

#include "doctest.h"
#include "punet/enltb.hpp"
#include "punet/gradcheck.hpp"
#include "punet/net.hpp"
#include "punet/scsi.hpp"
#include "test_util.hpp"

using namespace punet;
using punet::test::randv;

namespace {

template <typename T>
void zero(Var<T>& v) {
    v.value.fill(T(0));
}

template <typename T>
void identity_1x1(Conv<T>& c) {
    c.weight.value.fill(T(0));
    c.bias.value.fill(T(0));
    const Index n = std::min(c.c_out(), c.c_in());
    for (Index i = 0; i < n; ++i) c.weight.value(i, i, 0, 0) = T(1);
}

template <typename T>
void zero_layers(ScsiParams<T>& p) {
    for (auto& l : p.layers) {
        zero(l.o.weight);
        zero(l.o.bias);
        zero(l.mlp2.weight);
        zero(l.mlp2.bias);
    }
}

}  // namespace

TEST_CASE("first block passes its input through the fusion step") {
    Rng rng(1);
    auto p = make_enltb<float>(EnltbConfig{8, 0, EnlsaConfig{0, 16}}, rng);
    CHECK_FALSE(p.fuse.has_value());
    const Var<float> x = randv<float>(Shape{1, 8, 4, 4}, rng);
    CHECK(test::bit_equal(enltb_fuse_inputs<float>(x, nullptr, p).value, x.value));
}

TEST_CASE("stage-4 fusion shape") {
    Rng rng(2);
    auto p = make_enltb<float>(EnltbConfig{512, 256, EnlsaConfig{0, 256}}, rng);
    REQUIRE(p.fuse.has_value());
    const Var<float> x = randv<float>(Shape{1, 512, 28, 28}, rng);
    const Var<float> prev = randv<float>(Shape{1, 256, 56, 56}, rng);
    CHECK(enltb_fuse_inputs(x, &prev, p).value.shape() == Shape{1, 512, 28, 28});
    const Var<float> bad = randv<float>(Shape{1, 256, 28, 28}, rng);
    CHECK_THROWS_AS(enltb_fuse_inputs(x, &bad, p), ShapeError);
}

TEST_CASE("stage-5 block shape") {
    Rng rng(3);
    auto p = make_enltb<float>(EnltbConfig{1024, 512, EnlsaConfig{0, 256}}, rng);
    const Var<float> x = randv<float>(Shape{1, 1024, 14, 14}, rng);
    const Var<float> prev = randv<float>(Shape{1, 512, 28, 28}, rng);
    CHECK(enltb_forward(x, &prev, p).value.shape() == Shape{1, 1024, 14, 14});
}

TEST_CASE("zero-weighted previous half makes the fusion ignore prev") {
    Rng rng(4);
    auto p = make_enltb<double>(EnltbConfig{6, 3, EnlsaConfig{0, 16}}, rng);
    auto& w = p.fuse->concat_proj.weight.value;
    for (Index o = 0; o < 6; ++o)
        for (Index i = 6; i < 12; ++i) w(o, i, 0, 0) = 0.0;
    const Var<double> x = randv(Shape{1, 6, 3, 3}, rng);
    const Var<double> zeros(Tensor<double>(Shape{1, 3, 6, 6}));
    const Var<double> noise = randv(Shape{1, 3, 6, 6}, rng);
    const auto a = enltb_fuse_inputs(x, &zeros, p), b = enltb_fuse_inputs(x, &noise, p);
    CHECK(test::bit_equal(a.value, b.value));
    // Linear in x once prev is ignored.
    const auto two = enltb_fuse_inputs(Var<double>(scale(x, 2.0).value), &zeros, p);
    const auto bias_only = enltb_fuse_inputs(Var<double>(Tensor<double>(x.shape())), &zeros, p);
    for (Index i = 0; i < a.value.numel(); ++i)
        CHECK(two.value[i] - bias_only.value[i] == doctest::Approx(2 * (a.value[i] - bias_only.value[i])));
}

TEST_CASE("zero attention and MLP make the block the identity on its fused input") {
    Rng rng(5);
    auto p = make_enltb<float>(EnltbConfig{6, 3, EnlsaConfig{0, 16}}, rng);
    zero(p.attn.v.weight);
    zero(p.attn.v.bias);
    zero(p.mlp2.weight);
    zero(p.mlp2.bias);
    const Var<float> x = randv<float>(Shape{2, 6, 4, 4}, rng);
    const Var<float> prev = randv<float>(Shape{2, 3, 8, 8}, rng);
    const auto fused = enltb_fuse_inputs(x, &prev, p);
    CHECK(test::bit_equal(enltb_forward(x, &prev, p).value, fused.value));
}

TEST_CASE("token mixer is equivariant to spatial shuffles") {
    Rng rng(6);
    auto p = make_enltb<double>(EnltbConfig{5, 0, EnlsaConfig{0, 32}}, rng);
    const Index h = 4, w = 5, n = h * w;
    const Var<double> x = randv(Shape{1, 5, h, w}, rng);
    std::vector<Index> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    for (Index i = n - 1; i > 0; --i) std::swap(perm[i], perm[rng.uniform_int(0, i)]);
    Tensor<double> xs(x.shape());
    for (Index c = 0; c < 5; ++c)
        for (Index t = 0; t < n; ++t) xs(0, c, t / w, t % w) = x.value(0, c, perm[t] / w, perm[t] % w);
    const auto y = enltb_forward<double>(x, nullptr, p);
    const auto ys = enltb_forward<double>(Var<double>(xs), nullptr, p);
    double dev = 0;
    for (Index c = 0; c < 5; ++c)
        for (Index t = 0; t < n; ++t)
            dev = std::max(dev, std::abs(ys.value(0, c, t / w, t % w) - y.value(0, c, perm[t] / w, perm[t] % w)));
    CHECK(dev < 1e-5);
}

TEST_CASE("enltb gradients match finite differences") {
    Rng rng(7);
    auto p = make_enltb<double>(EnltbConfig{8, 4, EnlsaConfig{0, 16}}, rng);
    Var<double> x = randv(Shape{1, 8, 4, 4}, rng);
    Var<double> prev = randv(Shape{1, 4, 8, 8}, rng);
    auto leaves = param_leaves(p, "enltb");
    leaves.emplace_back("x", &x);
    leaves.emplace_back("prev", &prev);
    GradCheckOptions opt;
    opt.coords = 6;
    CHECK(worst_rel_error(grad_check(leaves, [&] { return sum_all(enltb_forward(x, &prev, p)); }, opt)) < 1e-3);
}

TEST_CASE("token layout") {
    const auto full = scsi_token_layout({{56, 56}, {28, 28}, {14, 14}});
    REQUIRE(full.size() == 3);
    CHECK(full[0] == TokenSegment{3, 0, 3136});
    CHECK(full[1] == TokenSegment{4, 3136, 784});
    CHECK(full[2] == TokenSegment{5, 3920, 196});
    const auto toy = scsi_token_layout(preset_config("toy"));
    REQUIRE(toy.size() == 3);
    CHECK(toy[0].length == 256);
    CHECK(toy[1].length == 64);
    CHECK(toy[2].length == 16);
    CHECK(toy[1].offset == 256);
    const auto one = scsi_token_layout({{6, 7}});
    REQUIRE(one.size() == 1);
    CHECK(one[0] == TokenSegment{3, 0, 42});
}

TEST_CASE("scsi with matching widths and zero layers is the identity") {
    Rng rng(8);
    auto p = make_scsi<float>(ScsiConfig{{8, 8, 8}, 8, 2, 2}, rng);
    for (auto& c : p.in_proj) identity_1x1(c);
    for (auto& c : p.out_proj) identity_1x1(c);
    zero_layers(p);
    const std::vector<Var<float>> maps{randv<float>(Shape{2, 8, 8, 8}, rng), randv<float>(Shape{2, 8, 4, 4}, rng),
                                       randv<float>(Shape{2, 8, 2, 2}, rng)};
    const auto out = scsi_forward(maps, p);
    for (int i = 0; i < 3; ++i) CHECK(test::bit_equal(out[i].value, maps[i].value));
}

TEST_CASE("scsi with pseudo-inverse projections and zero layers is the identity") {
    Rng rng(9);
    auto p = make_scsi<float>(ScsiConfig{{4, 8, 16}, 32, 1, 4}, rng);
    for (auto& c : p.in_proj) identity_1x1(c);
    for (auto& c : p.out_proj) identity_1x1(c);
    zero_layers(p);
    const std::vector<Var<float>> maps{randv<float>(Shape{1, 4, 8, 8}, rng), randv<float>(Shape{1, 8, 4, 4}, rng),
                                       randv<float>(Shape{1, 16, 2, 2}, rng)};
    const auto out = scsi_forward(maps, p);
    for (int i = 0; i < 3; ++i) CHECK(max_abs_diff(out[i].value, maps[i].value) < 1e-4f);
}

TEST_CASE("full-scale scsi shapes") {
    Rng rng(10);
    ScsiConfig cfg{{256, 512, 1024}};
    cfg.depth = 1;
    auto p = make_scsi<float>(cfg, rng);
    const std::vector<Var<float>> maps{randv<float>(Shape{1, 256, 56, 56}, rng),
                                       randv<float>(Shape{1, 512, 28, 28}, rng),
                                       randv<float>(Shape{1, 1024, 14, 14}, rng)};
    const auto out = scsi_forward(maps, p);
    REQUIRE(out.size() == 3);
    for (int i = 0; i < 3; ++i) CHECK(out[i].value.shape() == maps[i].value.shape());
    const auto layout = scsi_token_layout({{56, 56}, {28, 28}, {14, 14}});
    CHECK(layout.back().offset + layout.back().length == 4116);
}

TEST_CASE("scsi mixes tokens across stages and is equivariant to token swaps") {
    for (auto mode : {ScsiAttention::Exact, ScsiAttention::Enlsa}) {
        Rng rng(11);
        ScsiConfig cfg{{4, 6, 8}, 8, 1, 2};
        cfg.attention = mode;
        cfg.m = 32;
        auto p = make_scsi<double>(cfg, rng);
        std::vector<Var<double>> maps{randv(Shape{1, 4, 4, 4}, rng), randv(Shape{1, 6, 2, 2}, rng),
                                      randv(Shape{1, 8, 1, 1}, rng)};
        const auto base = scsi_forward(maps, p);

        // Perturbing one stage-3 token moves the stage-5 output.
        auto poked = maps;
        poked[0].value(0, 0, 0, 0) += 1.0;
        CHECK(max_abs_diff(scsi_forward(poked, p)[2].value, base[2].value) > 1e-6);

        // Swapping two stage-3 tokens and swapping back afterwards gives the
        // unswapped result: there is no positional term.
        auto swapped = maps;
        for (Index c = 0; c < 4; ++c) std::swap(swapped[0].value(0, c, 0, 1), swapped[0].value(0, c, 3, 2));
        auto out = scsi_forward(swapped, p);
        for (Index c = 0; c < 4; ++c) std::swap(out[0].value(0, c, 0, 1), out[0].value(0, c, 3, 2));
        for (int i = 0; i < 3; ++i) CHECK(max_abs_diff(out[i].value, base[i].value) < 1e-10);
    }
}

TEST_CASE("scsi rejects mismatched stages") {
    Rng rng(12);
    auto p = make_scsi<float>(ScsiConfig{{4, 8}, 8, 1, 2}, rng);
    CHECK_THROWS_AS(scsi_forward<float>({randv<float>(Shape{1, 4, 4, 4}, rng)}, p), ShapeError);
    try {
        scsi_forward<float>({randv<float>(Shape{1, 4, 4, 4}, rng), randv<float>(Shape{1, 7, 2, 2}, rng)}, p);
        FAIL("expected a shape error");
    } catch (const ShapeError& e) {
        CHECK(e.axis() == "stage 1 channel");
    }
    CHECK_THROWS_AS(make_scsi<float>(ScsiConfig{{4}, 10, 1, 3}, rng), std::invalid_argument);
}

TEST_CASE("token flatten and split round trip") {
    Rng rng(13);
    const std::vector<Var<float>> maps{randv<float>(Shape{2, 3, 4, 4}, rng), randv<float>(Shape{2, 3, 2, 2}, rng)};
    const auto seq = concat_rows<float>({to_tokens(maps[0]), to_tokens(maps[1])});
    const auto layout = scsi_token_layout({{4, 4}, {2, 2}});
    for (int i = 0; i < 2; ++i) {
        const auto back = from_tokens(slice_rows(seq, layout[i].offset, layout[i].length), maps[i].shape().h,
                                      maps[i].shape().w);
        CHECK(test::bit_equal(back.value, maps[i].value));
    }
}

TEST_CASE("scsi gradients match finite differences") {
    for (auto mode : {ScsiAttention::Exact, ScsiAttention::Enlsa}) {
        Rng rng(14);
        ScsiConfig cfg{{3, 5}, 4, 1, 2};
        cfg.attention = mode;
        cfg.m = 16;
        auto p = make_scsi<double>(cfg, rng);
        Var<double> a = randv(Shape{1, 3, 4, 4}, rng), b = randv(Shape{1, 5, 2, 2}, rng);
        const Var<double> ra = randv(a.shape(), rng), rb = randv(b.shape(), rng);
        auto leaves = param_leaves(p, "scsi");
        leaves.emplace_back("a", &a);
        leaves.emplace_back("b", &b);
        GradCheckOptions opt;
        opt.coords = 6;
        CHECK(worst_rel_error(grad_check(leaves, [&] {
                  const auto out = scsi_forward<double>({a, b}, p);
                  return add(sum_all(mul(out[0], ra)), sum_all(mul(out[1], rb)));
              }, opt)) < 1e-3);
    }
}
