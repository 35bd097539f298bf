#include "punet/enlsa.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cmath>
#include <limits>
#include <ostream>
#include <stdexcept>

namespace punet {

template <typename T>
FeatureBank<T> make_feature_bank(Index m, Index c, std::uint64_t seed) {
    if (m < 1 || c < 1) {
        throw std::invalid_argument("make_feature_bank: m and c must be >= 1");
    }
    Rng rng(seed);
    FeatureBank<T> bank;
    bank.seed = seed;
    bank.phi = Tensor<T>(Shape::matrix(m, c));
    for (Index i = 0; i < bank.phi.numel(); ++i) {
        bank.phi[i] = static_cast<T>(rng.normal());
    }
    return bank;
}

template <typename T>
FeatureBank<T> redraw_feature_bank(Index m, Index c, std::uint64_t seed, std::uint64_t draw) {
    FeatureBank<T> bank = make_feature_bank<T>(m, c, mix64(seed ^ mix64(draw + 1)));
    bank.seed = seed;
    return bank;
}

double EnlsaConfig::effective_scale() const {
    return scale < 0 ? std::pow(static_cast<double>(c), -0.25) : scale;
}

template <typename T>
EnlsaParams<T> make_enlsa(const EnlsaConfig& cfg, Rng& rng) {
    if (cfg.c < 1 || cfg.m < 1) {
        throw std::invalid_argument("make_enlsa: c and m must be >= 1");
    }
    if (!(cfg.eps >= 0)) {
        throw std::invalid_argument("make_enlsa: eps must be >= 0");
    }
    EnlsaParams<T> p;
    p.cfg = cfg;
    Rng proj = rng.fork(1);
    p.q = make_linear<T>(proj, cfg.c, cfg.c);
    p.k = make_linear<T>(proj, cfg.c, cfg.c);
    p.v = make_linear<T>(proj, cfg.c, cfg.c);
    p.bank = make_feature_bank<T>(cfg.m, cfg.c, rng.fork(2).next_u64());
    return p;
}

template <typename T>
EnlsaParams<T> make_enlsa_identity(const EnlsaConfig& cfg, std::uint64_t bank_seed) {
    EnlsaParams<T> p;
    p.cfg = cfg;
    auto identity = [&] {
        Linear<T> l;
        Tensor<T> w(Shape::matrix(cfg.c, cfg.c));
        for (Index i = 0; i < cfg.c; ++i) w[i * cfg.c + i] = T(1);
        l.weight = Var<T>(std::move(w));
        l.bias = Var<T>(Tensor<T>::vector(cfg.c));
        return l;
    };
    p.q = identity();
    p.k = identity();
    p.v = identity();
    p.bank = make_feature_bank<T>(cfg.m, cfg.c, bank_seed);
    return p;
}

namespace {

template <typename T, typename F>
Var<T> stage(const char* name, F&& f) {
    Var<T> out;
    try {
        out = f();
    } catch (const NumericError&) {
        throw NumericError(std::string("enlsa.") + name);
    }
    if (!out.value.all_finite()) {
        throw NumericError(std::string("enlsa.") + name);
    }
    return out;
}

template <typename T>
void check_tokens(const char* op, const Var<T>& tokens, const EnlsaParams<T>& p) {
    const Shape& s = tokens.shape();
    if (s.c != 1) {
        throw ShapeError(op, "channel", 1, s.c);
    }
    if (s.h < 1) {
        throw ShapeError(op, "token count must be >= 1");
    }
    if (s.w != p.cfg.c) {
        throw ShapeError(op, "feature", p.cfg.c, s.w);
    }
    if (p.bank.c() != p.cfg.c) {
        throw ShapeError(op, "bank_dim", p.cfg.c, p.bank.c());
    }
}

template <typename T>
struct Projected {
    Var<T> q, k, v;
};

template <typename T>
Projected<T> project(const Var<T>& tokens, const EnlsaParams<T>& p) {
    const double s = p.cfg.effective_scale();
    Projected<T> out;
    out.q = stage<T>("q_proj", [&] { return scale(apply(p.q, tokens), s); });
    out.k = stage<T>("k_proj", [&] { return scale(apply(p.k, tokens), s); });
    out.v = stage<T>("v_proj", [&] { return apply(p.v, tokens); });
    return out;
}

}  // namespace

template <typename T>
Var<T> enlsa_attention(const Var<T>& tokens, const EnlsaParams<T>& p) {
    check_tokens("enlsa_attention", tokens, p);
    Projected<T> pr = project(tokens, p);
    // Per-row query shifts and per-matrix key shifts; both cancel in the
    // ratio apart from eps, which is added to the shifted denominator.
    // Without the normalizer nothing cancels, so no shift is applied.
    const bool shift = p.cfg.stabilize && p.cfg.normalize;
    const FeatureMapOptions fq{p.cfg.form, shift, ShiftScope::PerRow};
    const FeatureMapOptions fk{p.cfg.form, shift, ShiftScope::PerMatrix};
    Var<T> sq = stage<T>("feature_map_q", [&] { return feature_map(pr.q, p.bank.phi, fq); });
    Var<T> sk = stage<T>("feature_map_k", [&] { return feature_map(pr.k, p.bank.phi, fk); });
    Var<T> kv = stage<T>("kv", [&] { return matmul(transpose(sk), pr.v); });  // (n, 1, m, c)
    Var<T> num = stage<T>("numerator", [&] { return matmul(sq, kv); });       // (n, 1, N, c)
    if (!p.cfg.normalize) {
        return num;
    }
    Var<T> den = stage<T>("denominator", [&] {
        Var<T> ksum = sum_over_rows(sk);  // (n, 1, 1, m)
        return add_scalar(matmul(sq, transpose(ksum)), p.cfg.eps);
    });
    return stage<T>("output", [&] { return div_rows(num, den); });
}

template <typename T>
Var<T> enlsa_attention_redraw(const Var<T>& tokens, EnlsaParams<T>& p) {
    p.bank = redraw_feature_bank<T>(p.cfg.m, p.cfg.c, p.bank.seed, p.draws++);
    return enlsa_attention(tokens, p);
}

template <typename T>
Var<T> exact_attention(const Var<T>& tokens, const EnlsaParams<T>& p) {
    if (tokens.shape().h > kExactAttentionMaxTokens) {
        throw std::length_error("exact_attention: " + std::to_string(tokens.shape().h) +
                                " tokens exceeds the guard of " +
                                std::to_string(kExactAttentionMaxTokens));
    }
    check_tokens("exact_attention", tokens, p);
    Projected<T> pr = project(tokens, p);
    Var<T> w = softmax_lastdim(matmul(pr.q, transpose(pr.k)));
    return matmul(w, pr.v);
}

template <typename T>
Tensor<T> enlsa_weights(const Tensor<T>& tokens, const EnlsaParams<T>& p) {
    Var<T> x(tokens);
    check_tokens("enlsa_weights", x, p);
    Projected<T> pr = project(x, p);
    Var<T> sq = feature_map(pr.q, p.bank.phi, FeatureMapOptions{p.cfg.form, p.cfg.stabilize, ShiftScope::PerRow});
    Var<T> sk = feature_map(pr.k, p.bank.phi, FeatureMapOptions{p.cfg.form, p.cfg.stabilize, ShiftScope::PerMatrix});
    Var<T> w = matmul(sq, transpose(sk));
    Tensor<T> out = w.value;
    const Index n = out.w();
    for (Index r = 0; r < out.rows(); ++r) {
        double s = 0;
        for (Index j = 0; j < n; ++j) s += out[r * n + j];
        for (Index j = 0; j < n; ++j) out[r * n + j] = static_cast<T>(out[r * n + j] / s);
    }
    return out;
}

double kernel_estimate(const std::vector<double>& q, const std::vector<double>& k,
                       const FeatureBank<double>& bank, FeatureForm form) {
    const Index c = static_cast<Index>(q.size());
    if (static_cast<Index>(k.size()) != c) {
        throw ShapeError("kernel_estimate", "feature", c, static_cast<Index>(k.size()));
    }
    Tensor<double> x(Shape::matrix(2, c));
    std::copy(q.begin(), q.end(), x.ptr());
    std::copy(k.begin(), k.end(), x.ptr() + c);
    double shift = 0;
    Var<double> f = feature_map(Var<double>(x), bank.phi, FeatureMapOptions{form, true}, &shift);
    const Index m = bank.m();
    double dot = 0;
    for (Index j = 0; j < m; ++j) dot += f.value[j] * f.value[m + j];
    return dot * std::exp(2.0 * shift);
}

namespace {

double median(std::vector<double> v) {
    if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

std::vector<ErrorCurveRow> estimator_error_curve(const ErrorCurveOptions& opt) {
    if (opt.c < 1 || opt.trials < 1) {
        throw std::invalid_argument("estimator_error_curve: c and trials must be >= 1");
    }
    Rng data = Rng(opt.seed).fork(0x5eed);
    std::vector<std::vector<double>> qs;
    std::vector<std::vector<double>> ks;
    for (Index t = 0; t < opt.trials; ++t) {
        std::vector<double> q(static_cast<std::size_t>(opt.c));
        std::vector<double> k(static_cast<std::size_t>(opt.c));
        for (auto& v : q) v = data.normal(0.0, opt.input_sd);
        for (auto& v : k) v = data.normal(0.0, opt.input_sd);
        qs.push_back(std::move(q));
        ks.push_back(std::move(k));
    }
    std::vector<ErrorCurveRow> rows;
    for (std::size_t mi = 0; mi < opt.m_list.size(); ++mi) {
        const Index m = opt.m_list[mi];
        std::vector<double> errs;
        for (Index t = 0; t < opt.trials; ++t) {
            const auto draw = static_cast<std::uint64_t>(t) * opt.m_list.size() + mi;
            FeatureBank<double> bank = redraw_feature_bank<double>(m, opt.c, opt.seed, draw);
            double exact_dot = 0;
            for (Index i = 0; i < opt.c; ++i) exact_dot += qs[t][i] * ks[t][i];
            const double exact = std::exp(exact_dot);
            const double est = kernel_estimate(qs[t], ks[t], bank, opt.form);
            errs.push_back(std::abs(est - exact) / exact);
        }
        double mean = 0;
        for (double e : errs) mean += e;
        rows.push_back({m, median(errs), mean / static_cast<double>(errs.size())});
    }
    return rows;
}

void write_error_curve_csv(std::ostream& os, const std::vector<ErrorCurveRow>& rows) {
    os << "m,median_rel_error,mean_rel_error\n";
    char buf[128];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%lld,%.6e,%.6e\n", static_cast<long long>(r.m),
                      r.median_rel_error, r.mean_rel_error);
        os << buf;
    }
}

std::vector<ScalingRow> scaling_benchmark(const ScalingOptions& opt) {
    if (opt.c < 1 || opt.m < 1 || opt.repeats < 1) {
        throw std::invalid_argument("scaling_benchmark: c, m and repeats must be >= 1");
    }
    EnlsaConfig cfg;
    cfg.c = opt.c;
    cfg.m = opt.m;
    Rng rng(opt.seed);
    const EnlsaParams<float> params = make_enlsa<float>(cfg, rng);
    using Clock = std::chrono::steady_clock;
    auto time_it = [&](auto&& fn) {
        std::vector<double> samples;
        for (int r = 0; r < opt.repeats; ++r) {
            const auto t0 = Clock::now();
            fn();
            samples.push_back(std::chrono::duration<double>(Clock::now() - t0).count());
        }
        return median(samples);
    };
    std::vector<ScalingRow> rows;
    for (Index n : opt.n_list) {
        if (n < 1) {
            throw std::invalid_argument("scaling_benchmark: N must be >= 1");
        }
        Rng tr = Rng(opt.seed).fork(static_cast<std::uint64_t>(n));
        Tensor<float> x(Shape{1, 1, n, opt.c});
        for (Index i = 0; i < x.numel(); ++i) x[i] = static_cast<float>(tr.normal());
        const Var<float> tokens(x);
        ScalingRow row;
        row.n = n;
        row.enlsa_seconds = time_it([&] { (void)enlsa_attention(tokens, params); });
        if (n <= kExactAttentionMaxTokens) {
            row.exact_seconds = time_it([&] { (void)exact_attention(tokens, params); });
        }
        rows.push_back(row);
    }
    return rows;
}

void write_scaling_csv(std::ostream& os, const std::vector<ScalingRow>& rows) {
    os << "n,enlsa_seconds,exact_seconds\n";
    char buf[128];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%lld,%.6e,%.6e\n", static_cast<long long>(r.n),
                      r.enlsa_seconds, r.exact_seconds);
        os << buf;
    }
}

#define PUNET_INSTANTIATE_ENLSA(T)                                                     \
    template FeatureBank<T> make_feature_bank(Index, Index, std::uint64_t);            \
    template FeatureBank<T> redraw_feature_bank(Index, Index, std::uint64_t, std::uint64_t); \
    template EnlsaParams<T> make_enlsa(const EnlsaConfig&, Rng&);                      \
    template EnlsaParams<T> make_enlsa_identity(const EnlsaConfig&, std::uint64_t);    \
    template Var<T> enlsa_attention(const Var<T>&, const EnlsaParams<T>&);             \
    template Var<T> enlsa_attention_redraw(const Var<T>&, EnlsaParams<T>&);            \
    template Var<T> exact_attention(const Var<T>&, const EnlsaParams<T>&);             \
    template Tensor<T> enlsa_weights(const Tensor<T>&, const EnlsaParams<T>&);

PUNET_INSTANTIATE_ENLSA(float)
PUNET_INSTANTIATE_ENLSA(double)

}  // namespace punet
