#include "punet/verify.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <stdexcept>

#include "punet/enlsa.hpp"
#include "punet/gradcheck.hpp"
#include "punet/metrics.hpp"
#include "punet/net.hpp"
#include "punet/rng.hpp"

namespace punet {

int VerifyReport::failures() const {
    return static_cast<int>(std::count_if(checks.begin(), checks.end(), [](const VerifyCheck& c) { return !c.pass; }));
}

std::string VerifyReport::text() const {
    std::string out;
    for (const auto& l : lines) out += l + "\n";
    return out;
}

namespace {

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

void check(VerifyReport& r, const std::string& name, bool pass, const std::string& detail) {
    r.checks.push_back({name, pass, detail});
    r.lines.push_back(std::string(pass ? "PASS " : "FAIL ") + name + (detail.empty() ? "" : "  " + detail));
}

void append(VerifyReport& into, const VerifyReport& r) {
    into.lines.insert(into.lines.end(), r.lines.begin(), r.lines.end());
    into.checks.insert(into.checks.end(), r.checks.begin(), r.checks.end());
}

Tensor<double> randn(Shape s, Rng& rng, double sd = 1.0) {
    Tensor<double> t(s);
    for (Index i = 0; i < t.numel(); ++i) t[i] = rng.normal(0.0, sd);
    return t;
}

// Random values with |x| >= margin, for ops with a kink at zero.
Tensor<double> randn_off_zero(Shape s, Rng& rng, double margin) {
    Tensor<double> t = randn(s, rng);
    for (Index i = 0; i < t.numel(); ++i) {
        if (std::abs(t[i]) < margin) t[i] = t[i] < 0 ? t[i] - margin : t[i] + margin;
    }
    return t;
}

// Scalar probe sum(y * R) with a fixed random R.
Var<double> probe(const Var<double>& y, std::uint64_t seed) {
    Rng rng(seed, 77);
    return sum_all(mul(y, Var<double>(randn(y.shape(), rng))));
}

LabelMap random_labels(Index n, Index h, Index w, Index classes, Rng& rng) {
    LabelMap m(n, h, w);
    for (auto& v : m.data) v = static_cast<std::int32_t>(rng.uniform_int(0, classes - 1));
    return m;
}

}  // namespace

const std::vector<std::string>& verify_suites() {
    static const std::vector<std::string> s{"kernel", "oracle", "grad", "shapes", "metrics"};
    return s;
}

VerifyReport run_verify(const std::string& suite, std::uint64_t seed) {
    VerifyReport r;
    auto one = [&](const std::string& s) {
        r.lines.push_back("== " + s + " (seed " + std::to_string(seed) + ")");
        if (s == "kernel") append(r, verify_kernel(seed));
        else if (s == "oracle") append(r, verify_oracle(seed));
        else if (s == "grad") append(r, verify_grad(seed));
        else if (s == "shapes") append(r, verify_shapes(seed));
        else if (s == "metrics") append(r, verify_metrics(seed));
        else throw std::invalid_argument("unknown suite '" + s + "'");
    };
    if (suite == "all") {
        for (const auto& s : verify_suites()) one(s);
    } else {
        one(suite);
    }
    const int f = r.failures();
    r.lines.push_back("summary: " + std::to_string(r.checks.size() - f) + " passed, " + std::to_string(f) +
                      " failed");
    return r;
}

// ------------------------------------------------------------------ kernel

VerifyReport verify_kernel(std::uint64_t seed) {
    VerifyReport r;
    ErrorCurveOptions opt;
    opt.seed = seed;
    const auto rows = estimator_error_curve(opt);
    r.lines.push_back("m,median_rel_error,mean_rel_error");
    for (const auto& row : rows) {
        r.lines.push_back(std::to_string(row.m) + "," + fmt("%.6f", row.median_rel_error) + "," +
                          fmt("%.6f", row.mean_rel_error));
    }
    bool decreasing = true;
    for (std::size_t i = 1; i < rows.size(); ++i) decreasing &= rows[i].median_rel_error < rows[i - 1].median_rel_error;
    check(r, "kernel.median_decreasing_in_m", decreasing, "");
    const double e_small = rows.front().median_rel_error;
    const double e_large = rows.back().median_rel_error;
    check(r, "kernel.median_below_5pct_at_m4096", e_large < 0.05, "median=" + fmt("%.6f", e_large) + " limit=0.05");
    check(r, "kernel.m4096_at_most_half_of_m256", e_large <= 0.5 * e_small,
          "ratio=" + fmt("%.4f", e_large / e_small) + " limit=0.5");
    // q = k = 0: every feature is equal, the estimate is exactly 1.
    double worst = 0;
    for (Index m : opt.m_list) {
        const auto bank = make_feature_bank<double>(m, opt.c, seed);
        const std::vector<double> z(static_cast<std::size_t>(opt.c), 0.0);
        worst = std::max(worst, std::abs(kernel_estimate(z, z, bank) - 1.0));
    }
    check(r, "kernel.exact_at_origin", worst < 1e-12, "max_abs_error=" + fmt("%.3e", worst));
    return r;
}

// ------------------------------------------------------------------ oracle

OracleStats oracle_trials(std::uint64_t seed, int trials, Index n, Index c, Index m_small, Index m_large) {
    OracleStats s;
    s.trials = trials;
    EnlsaConfig cfg;
    cfg.c = c;
    std::vector<double> devs;
    for (int t = 0; t < trials; ++t) {
        Rng rng = Rng(seed).fork(0x0ac1e000 + static_cast<std::uint64_t>(t));
        const Var<double> x(randn(Shape{1, 1, n, c}, rng));
        auto dev_at = [&](Index m) {
            cfg.m = m;
            EnlsaParams<double> p = make_enlsa_identity<double>(cfg, 0);
            p.bank = redraw_feature_bank<double>(m, c, seed, static_cast<std::uint64_t>(t));
            const auto approx = enlsa_attention(x, p);
            const auto exact = exact_attention(x, p);
            return max_abs_diff(approx.value, exact.value);
        };
        const double d_large = dev_at(m_large);
        const double d_small = dev_at(m_small);
        if (t == 0) s.first_trial_max_dev = d_large;
        s.worst_max_dev = std::max(s.worst_max_dev, d_large);
        s.improved += d_large < d_small;
        devs.push_back(d_large);
    }
    if (!devs.empty()) {
        std::sort(devs.begin(), devs.end());
        const std::size_t k = devs.size();
        s.median_max_dev = k % 2 ? devs[k / 2] : 0.5 * (devs[k / 2 - 1] + devs[k / 2]);
    }
    return s;
}

VerifyReport verify_oracle(std::uint64_t seed) {
    VerifyReport r;
    const OracleStats s = oracle_trials(seed, 100);
    r.lines.push_back("N=64 c=16 scale=c^-1/4 identity projections, m 256 vs 16384, 100 trials");
    r.lines.push_back("max_dev_m16384: first=" + fmt("%.6f", s.first_trial_max_dev) + " median=" +
                      fmt("%.6f", s.median_max_dev) + " worst=" + fmt("%.6f", s.worst_max_dev));
    check(r, "oracle.max_dev_below_0.05_at_m16384", s.first_trial_max_dev < 0.05,
          "max_dev=" + fmt("%.6f", s.first_trial_max_dev) + " limit=0.05");
    check(r, "oracle.large_m_beats_small_m_in_95_of_100", s.improved >= 95,
          "improved=" + std::to_string(s.improved) + "/" + std::to_string(s.trials));

    // Materialized weights at small N: non-negative, rows sum to one.
    Rng rng = Rng(seed).fork(0x5706);
    EnlsaConfig cfg;
    cfg.c = 8;
    cfg.m = 64;
    Rng prng = rng.fork(1);
    const auto p = make_enlsa<double>(cfg, prng);
    const auto w = enlsa_weights(randn(Shape{1, 1, 12, 8}, rng), p);
    double worst_sum = 0, min_w = std::numeric_limits<double>::infinity();
    for (Index i = 0; i < 12; ++i) {
        double sum = 0;
        for (Index j = 0; j < 12; ++j) {
            sum += w(0, 0, i, j);
            min_w = std::min(min_w, w(0, 0, i, j));
        }
        worst_sum = std::max(worst_sum, std::abs(sum - 1.0));
    }
    check(r, "oracle.weights_row_stochastic", worst_sum < 1e-5 && min_w >= 0,
          "max_row_sum_error=" + fmt("%.3e", worst_sum));
    return r;
}

// -------------------------------------------------------------------- grad

namespace {

void grad_line(VerifyReport& r, const std::string& name, const std::vector<GradCheckResult>& res, double limit) {
    const double w = worst_rel_error(res);
    Index n = 0, refined = 0;
    std::string worst_name;
    double wv = -1;
    for (const auto& x : res) {
        n += x.checked;
        refined += x.refined;
        if (x.max_rel_error > wv) {
            wv = x.max_rel_error;
            worst_name = x.name;
        }
    }
    check(r, "grad." + name, w < limit,
          "max_rel=" + fmt("%.2e", w) + " coords=" + std::to_string(n) + " refined=" + std::to_string(refined) +
              " worst=" + worst_name);
}

}  // namespace

VerifyReport verify_grad(std::uint64_t seed) {
    VerifyReport r;
    constexpr double kLimit = 1e-3;
    GradCheckOptions go;
    go.seed = seed;
    Rng rng = Rng(seed).fork(0x6bad);
    std::uint64_t probe_seed = seed;
    auto op1 = [&](const std::string& name, Tensor<double> a, auto f) {
        Var<double> va(std::move(a));
        const std::uint64_t ps = ++probe_seed;
        grad_line(r, name, grad_check({{"x", &va}}, [&] { return probe(f(va), ps); }, go), kLimit);
    };
    auto op2 = [&](const std::string& name, Tensor<double> a, Tensor<double> b, auto f) {
        Var<double> va(std::move(a)), vb(std::move(b));
        const std::uint64_t ps = ++probe_seed;
        grad_line(r, name, grad_check({{"a", &va}, {"b", &vb}}, [&] { return probe(f(va, vb), ps); }, go), kLimit);
    };

    {
        Var<double> x(randn(Shape{2, 3, 6, 6}, rng)), w(randn(Shape{4, 3, 3, 3}, rng)), b(randn(Shape::vector(4), rng));
        const auto ps = ++probe_seed;
        grad_line(r, "conv2d_stride2_dilation2",
                  grad_check({{"x", &x}, {"w", &w}, {"b", &b}},
                             [&] { return probe(conv2d(x, w, b, Conv2dOptions{2, 2, 2}), ps); }, go),
                  kLimit);
        Var<double> w1(randn(Shape{5, 3, 1, 1}, rng)), b1(randn(Shape::vector(5), rng));
        grad_line(r, "conv2d_pointwise",
                  grad_check({{"x", &x}, {"w", &w1}, {"b", &b1}},
                             [&] { return probe(conv2d(x, w1, b1, Conv2dOptions{}), ps); }, go),
                  kLimit);
    }
    for (bool training : {true, false}) {
        Var<double> x(randn(Shape{3, 2, 3, 3}, rng)), g(randn(Shape::vector(2), rng)), b(randn(Shape::vector(2), rng));
        BnState<double> st{Tensor<double>(Shape::vector(2), 0.1), Tensor<double>(Shape::vector(2), 1.5)};
        const auto ps = ++probe_seed;
        grad_line(r, training ? "batch_norm_train" : "batch_norm_eval",
                  grad_check({{"x", &x}, {"gamma", &g}, {"beta", &b}},
                             [&] {
                                 BnState<double> s = st;
                                 return probe(batch_norm(x, g, b, s, BnOptions{training, 0.1, 1e-5}), ps);
                             },
                             go),
                  kLimit);
    }
    {
        Var<double> x(randn(Shape{1, 1, 4, 6}, rng)), g(randn(Shape::vector(6), rng)), b(randn(Shape::vector(6), rng));
        const auto ps = ++probe_seed;
        grad_line(r, "layer_norm",
                  grad_check({{"x", &x}, {"gamma", &g}, {"beta", &b}},
                             [&] { return probe(layer_norm(x, g, b, 1e-5), ps); }, go),
                  kLimit);
    }
    op2("matmul", randn(Shape{2, 1, 3, 4}, rng), randn(Shape{2, 1, 4, 5}, rng),
        [](auto& a, auto& b) { return matmul(a, b); });
    op2("matmul_broadcast", randn(Shape{2, 1, 3, 4}, rng), randn(Shape{1, 1, 4, 5}, rng),
        [](auto& a, auto& b) { return matmul(a, b); });
    op1("transpose", randn(Shape{2, 1, 3, 4}, rng), [](auto& a) { return transpose(a); });
    {
        Var<double> x(randn(Shape{1, 1, 5, 4}, rng)), w(randn(Shape{1, 1, 3, 4}, rng)), b(randn(Shape::vector(3), rng));
        const auto ps = ++probe_seed;
        grad_line(r, "linear",
                  grad_check({{"x", &x}, {"w", &w}, {"b", &b}}, [&] { return probe(linear(x, w, b), ps); }, go),
                  kLimit);
    }
    op2("add", randn(Shape{1, 2, 3, 4}, rng), randn(Shape{1, 2, 3, 4}, rng), [](auto& a, auto& b) { return add(a, b); });
    op2("sub", randn(Shape{1, 2, 3, 4}, rng), randn(Shape{1, 2, 3, 4}, rng), [](auto& a, auto& b) { return sub(a, b); });
    op2("mul", randn(Shape{1, 2, 3, 4}, rng), randn(Shape{1, 2, 3, 4}, rng), [](auto& a, auto& b) { return mul(a, b); });
    op1("scale", randn(Shape{1, 2, 3, 4}, rng), [](auto& a) { return scale(a, -1.7); });
    op1("add_scalar", randn(Shape{1, 2, 3, 4}, rng), [](auto& a) { return add_scalar(a, 0.3); });
    op1("relu", randn_off_zero(Shape{1, 2, 3, 4}, rng, 0.05), [](auto& a) { return relu(a); });
    op1("gelu", randn(Shape{1, 2, 3, 4}, rng), [](auto& a) { return gelu(a); });
    op1("exponential", randn(Shape{1, 2, 3, 4}, rng), [](auto& a) { return exponential(a); });
    op1("softmax_lastdim", randn(Shape{1, 2, 3, 4}, rng), [](auto& a) { return softmax_lastdim(a); });
    op1("bilinear_upsample2x", randn(Shape{1, 2, 3, 4}, rng), [](auto& a) { return bilinear_upsample2x(a); });
    op1("space_to_depth2", randn(Shape{1, 2, 4, 4}, rng), [](auto& a) { return space_to_depth2(a); });
    op1("depth_to_space2", randn(Shape{1, 8, 2, 2}, rng), [](auto& a) { return depth_to_space2(a); });
    op2("concat_channels", randn(Shape{1, 2, 3, 3}, rng), randn(Shape{1, 3, 3, 3}, rng),
        [](auto& a, auto& b) { return concat_channels(a, b); });
    op1("tokens_roundtrip", randn(Shape{2, 3, 2, 4}, rng), [](auto& a) { return from_tokens(scale(to_tokens(a), 2.0), 2, 4); });
    op2("concat_slice_rows", randn(Shape{1, 1, 3, 4}, rng), randn(Shape{1, 1, 2, 4}, rng),
        [](auto& a, auto& b) { return slice_rows(concat_rows(std::vector<Var<double>>{a, b}), 1, 3); });
    op2("concat_slice_cols", randn(Shape{1, 1, 3, 4}, rng), randn(Shape{1, 1, 3, 2}, rng),
        [](auto& a, auto& b) { return slice_cols(concat_cols(std::vector<Var<double>>{a, b}), 2, 3); });
    {
        const Tensor<double> phi = randn(Shape{1, 1, 7, 3}, rng);
        op1("feature_map_positive", randn(Shape{1, 1, 5, 3}, rng, 0.5),
            [&](auto& a) { return feature_map(a, phi, FeatureMapOptions{FeatureForm::Positive, false}); });
        op1("feature_map_literal", randn(Shape{1, 1, 5, 3}, rng, 0.5),
            [&](auto& a) { return feature_map(a, phi, FeatureMapOptions{FeatureForm::LiteralGaussian, false}); });
    }
    op1("sum_over_rows", randn(Shape{1, 2, 3, 4}, rng), [](auto& a) { return sum_over_rows(a); });
    {
        Tensor<double> d = randn(Shape{1, 2, 3, 1}, rng);
        for (Index i = 0; i < d.numel(); ++i) d[i] = 1.0 + std::abs(d[i]);
        op2("div_rows", randn(Shape{1, 2, 3, 4}, rng), d, [](auto& a, auto& b) { return div_rows(a, b); });
    }
    {
        const LabelMap lab = random_labels(2, 2, 2, 3, rng);
        Var<double> x(randn(Shape{2, 3, 2, 2}, rng));
        grad_line(r, "cross_entropy", grad_check({{"logits", &x}}, [&] { return cross_entropy(x, lab); }, go), kLimit);
        grad_line(r, "soft_dice_loss", grad_check({{"logits", &x}}, [&] { return soft_dice_loss(x, lab); }, go), kLimit);
        grad_line(r, "seg_loss", grad_check({{"logits", &x}}, [&] { return seg_loss(x, lab, 0.5, 0.5); }, go), kLimit);
    }

    // Attention and blocks.
    {
        EnlsaConfig cfg;
        cfg.c = 6;
        cfg.m = 16;
        Rng prng = rng.fork(11);
        auto p = make_enlsa<double>(cfg, prng);
        Var<double> x(randn(Shape{1, 1, 5, 6}, rng));
        auto leaves = param_leaves(p, "enlsa");
        leaves.emplace_back("tokens", &x);
        const auto ps = ++probe_seed;
        grad_line(r, "enlsa_attention", grad_check(leaves, [&] { return probe(enlsa_attention(x, p), ps); }, go), kLimit);
        grad_line(r, "exact_attention", grad_check(leaves, [&] { return probe(exact_attention(x, p), ps); }, go), kLimit);
    }
    {
        BprbConfig bc;
        bc.c_in = 2;
        bc.c_out = 3;
        bc.stride = 2;
        Rng prng = rng.fork(12);
        auto p = make_bprb<double>(bc, prng);
        Var<double> x(randn(Shape{2, 2, 6, 6}, rng));
        auto leaves = param_leaves(p, "bprb");
        leaves.emplace_back("x", &x);
        const auto ps = ++probe_seed;
        grad_line(r, "bprb",
                  grad_check(leaves, [&] { return probe(bprb_forward(x, p, BnOptions{true, 0.1, 1e-5}), ps); }, go),
                  kLimit);
    }
    {
        EnltbConfig ec;
        ec.c = 8;
        ec.c_prev = 4;
        ec.attn.m = 16;
        Rng prng = rng.fork(13);
        auto p = make_enltb<double>(ec, prng);
        Var<double> x(randn(Shape{1, 8, 2, 2}, rng)), prev(randn(Shape{1, 4, 4, 4}, rng));
        auto leaves = param_leaves(p, "enltb");
        leaves.emplace_back("x", &x);
        leaves.emplace_back("prev", &prev);
        const auto ps = ++probe_seed;
        grad_line(r, "enltb", grad_check(leaves, [&] { return probe(enltb_forward(x, &prev, p), ps); }, go), kLimit);
    }
    for (ScsiAttention mode : {ScsiAttention::Exact, ScsiAttention::Enlsa}) {
        ScsiConfig sc;
        sc.channels = {4, 6};
        sc.d_model = 8;
        sc.depth = 1;
        sc.heads = 2;
        sc.attention = mode;
        sc.m = 16;
        Rng prng = rng.fork(14);
        auto p = make_scsi<double>(sc, prng);
        Var<double> a(randn(Shape{1, 4, 4, 4}, rng)), b(randn(Shape{1, 6, 2, 2}, rng));
        auto leaves = param_leaves(p, "scsi");
        leaves.emplace_back("map0", &a);
        leaves.emplace_back("map1", &b);
        const auto ps = ++probe_seed;
        grad_line(r, mode == ScsiAttention::Exact ? "scsi_exact" : "scsi_enlsa",
                  grad_check(leaves,
                             [&] {
                                 const auto outs = scsi_forward(std::vector<Var<double>>{a, b}, p);
                                 return add(probe(outs[0], ps), probe(outs[1], ps + 1000));
                             },
                             go),
                  kLimit);
    }

    // End to end: every parameter tensor, 8 coordinates each.
    {
        const NetConfig cfg = preset_config("micro");
        auto net = make_net<double>(cfg);
        Var<double> x(randn(Shape{2, cfg.in_channels, cfg.input_h, cfg.input_w}, rng));
        const LabelMap lab = random_labels(2, cfg.input_h, cfg.input_w, cfg.num_classes, rng);
        GradCheckOptions no = go;
        no.coords = 8;
        const auto res = grad_check(param_leaves(net), [&] {
            return seg_loss(net_forward(x, net, ForwardOptions{true}), lab, cfg.loss_w_ce, cfg.loss_w_dice);
        }, no);
        grad_line(r, "micro_net_end_to_end", res, kLimit);
        r.lines.push_back("micro_net parameter tensors checked: " + std::to_string(res.size()));
    }
    return r;
}

// ------------------------------------------------------------------ shapes

VerifyReport verify_shapes(std::uint64_t seed) {
    VerifyReport r;
    NetConfig cfg;
    cfg.seed = seed;
    auto net = make_net<float>(cfg);
    Rng rng(seed, 0x5a9e);
    Tensor<float> x(Shape{1, cfg.in_channels, cfg.input_h, cfg.input_w});
    for (Index i = 0; i < x.numel(); ++i) x[i] = static_cast<float>(rng.uniform());
    NetTrace<float> trace;
    const auto logits = net_forward(Var<float>(x), net, ForwardOptions{false}, &trace);

    struct Pair {
        const char* block;
        Index stage;
        Shape in, out;
    };
    const std::vector<Pair> expected{
        {"BPRB", 1, {1, 3, 224, 224}, {1, 64, 224, 224}},   {"BPRB", 2, {1, 64, 224, 224}, {1, 128, 112, 112}},
        {"BPRB", 3, {1, 128, 112, 112}, {1, 256, 56, 56}}, {"BPRB", 4, {1, 256, 56, 56}, {1, 512, 28, 28}},
        {"BPRB", 5, {1, 512, 28, 28}, {1, 1024, 14, 14}},  {"ENLTB", 3, {1, 256, 56, 56}, {1, 256, 56, 56}},
        {"ENLTB", 4, {1, 512, 28, 28}, {1, 512, 28, 28}},  {"ENLTB", 5, {1, 1024, 14, 14}, {1, 1024, 14, 14}},
    };
    r.lines.push_back("block,stage,input,output");
    for (const auto& e : expected) {
        const auto& list = std::string(e.block) == "BPRB" ? trace.bprb : trace.enltb;
        auto it = std::find_if(list.begin(), list.end(), [&](const StageShapes& s) { return s.stage == e.stage; });
        const bool found = it != list.end();
        const std::string got = found ? it->input.str() + " -> " + it->output.str() : "missing";
        r.lines.push_back(std::string(e.block) + "," + std::to_string(e.stage) + "," +
                          (found ? it->input.str() + "," + it->output.str() : "missing,missing"));
        check(r, std::string("shapes.") + e.block + std::to_string(e.stage),
              found && it->input == e.in && it->output == e.out,
              "expected " + e.in.str() + " -> " + e.out.str() + ", got " + got);
    }
    check(r, "shapes.scsi_tokens", trace.scsi_tokens == 4116,
          "tokens=" + std::to_string(trace.scsi_tokens) + " expected=4116");
    const Shape want{1, cfg.num_classes, cfg.input_h, cfg.input_w};
    check(r, "shapes.logits", logits.shape() == want, logits.shape().str());
    return r;
}

// ----------------------------------------------------------------- metrics

namespace {

// Reference implementations written without the library's helpers.
std::vector<std::pair<Index, Index>> ref_boundary(const std::vector<int>& m, Index h, Index w) {
    std::vector<std::pair<Index, Index>> out;
    auto on = [&](Index y, Index x) { return y >= 0 && y < h && x >= 0 && x < w && m[y * w + x]; };
    for (Index y = 0; y < h; ++y) {
        for (Index x = 0; x < w; ++x) {
            if (on(y, x) && !(on(y - 1, x) && on(y + 1, x) && on(y, x - 1) && on(y, x + 1))) out.emplace_back(y, x);
        }
    }
    return out;
}

std::vector<double> ref_directed(const std::vector<std::pair<Index, Index>>& a,
                                 const std::vector<std::pair<Index, Index>>& b) {
    std::vector<double> out;
    for (auto [ay, ax] : a) {
        Index best = std::numeric_limits<Index>::max();
        for (auto [by, bx] : b) best = std::min(best, (ay - by) * (ay - by) + (ax - bx) * (ax - bx));
        out.push_back(std::sqrt(static_cast<double>(best)));
    }
    return out;
}

double ref_percentile(std::vector<double> v, double p) {
    std::sort(v.begin(), v.end());
    const double pos = p / 100.0 * static_cast<double>(v.size() - 1);
    const auto i = static_cast<std::size_t>(pos);
    if (i + 1 >= v.size()) return v.back();
    return v[i] + (pos - static_cast<double>(i)) * (v[i + 1] - v[i]);
}

}  // namespace

MetricsOracleStats metrics_oracle(std::uint64_t seed, int pairs, Index h, Index w) {
    MetricsOracleStats s;
    s.pairs = pairs;
    for (int t = 0; t < pairs; ++t) {
        Rng rng = Rng(seed).fork(0x3e7c0000 + static_cast<std::uint64_t>(t));
        std::vector<int> ma(static_cast<std::size_t>(h * w)), mb(ma.size());
        const double pa = rng.uniform(0.05, 0.7), pb = rng.uniform(0.05, 0.7);
        for (auto& v : ma) v = rng.uniform() < pa;
        for (auto& v : mb) v = rng.uniform() < pb;
        ma[static_cast<std::size_t>(rng.uniform_int(0, h * w - 1))] = 1;
        mb[static_cast<std::size_t>(rng.uniform_int(0, h * w - 1))] = 1;
        BinaryMask a(h, w), b(h, w);
        Index inter = 0, na = 0, nb = 0;
        for (Index i = 0; i < h * w; ++i) {
            a.bits[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(ma[i]);
            b.bits[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(mb[i]);
            inter += ma[i] && mb[i];
            na += ma[i];
            nb += mb[i];
        }
        const double ref_dice = 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
        s.dice_mismatch += dice(a, b) != ref_dice;

        const auto ba = ref_boundary(ma, h, w), bb = ref_boundary(mb, h, w);
        auto dab = ref_directed(ba, bb), dba = ref_directed(bb, ba);
        const double ref_hd = std::max(*std::max_element(dab.begin(), dab.end()), *std::max_element(dba.begin(), dba.end()));
        std::vector<double> pooled = dab;
        pooled.insert(pooled.end(), dba.begin(), dba.end());
        const double ref_hd95 = ref_percentile(pooled, 95.0);
        const double hd = hausdorff(a, b, 100.0);
        const double hd95 = hausdorff(a, b, 95.0);
        s.hd_mismatch += hd != ref_hd || hausdorff(a, b, 100.0, HausdorffMethod::BruteForce) != ref_hd;
        s.hd95_mismatch += hd95 != ref_hd95;
        s.hd95_above_hd += hd95 > hd;
    }
    return s;
}

VerifyReport verify_metrics(std::uint64_t seed) {
    VerifyReport r;
    const auto s = metrics_oracle(seed, 1000);
    r.lines.push_back("random 16x16 mask pairs: " + std::to_string(s.pairs));
    check(r, "metrics.dice_matches_reference", s.dice_mismatch == 0, "mismatches=" + std::to_string(s.dice_mismatch));
    check(r, "metrics.hd_matches_reference", s.hd_mismatch == 0, "mismatches=" + std::to_string(s.hd_mismatch));
    check(r, "metrics.hd95_matches_reference", s.hd95_mismatch == 0, "mismatches=" + std::to_string(s.hd95_mismatch));
    check(r, "metrics.hd95_not_above_hd", s.hd95_above_hd == 0, "violations=" + std::to_string(s.hd95_above_hd));
    return r;
}

}  // namespace punet
