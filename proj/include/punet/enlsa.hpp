#pragma once

// Random-feature linear attention and the exact softmax attention it
// approximates.
//
//   sigma(x)_j = m^-1/2 exp(phi_j . x - |x|^2 / 2 - s),   phi_j ~ N(0, I_c)
//   out        = sigma(Q') (sigma(K')^T V) / (sigma(Q') sigma(K')^T 1 + eps)
//
// with Q' = scale * Q, K' = scale * K. The N x N weight matrix is never
// formed.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "punet/layers.hpp"

namespace punet {

template <typename T>
struct FeatureBank {
    Tensor<T> phi;  // (1, 1, m, c)
    std::uint64_t seed = 0;

    Index m() const { return phi.h(); }
    Index c() const { return phi.w(); }
};

/// Rows drawn iid from N(0, I_c) with Rng(seed).
template <typename T>
FeatureBank<T> make_feature_bank(Index m, Index c, std::uint64_t seed);

/// Independent bank number `draw` of the family rooted at `seed`.
template <typename T>
FeatureBank<T> redraw_feature_bank(Index m, Index c, std::uint64_t seed, std::uint64_t draw);

struct EnlsaConfig {
    Index c = 0;
    Index m = 256;
    /// Multiplier on Q and K; negative selects c^-1/4.
    double scale = -1.0;
    double eps = 1e-6;
    /// Off: out = sigma(Q') (sigma(K')^T V) without the row normalizer (and
    /// without stabilization shifts).
    bool normalize = true;
    FeatureForm form = FeatureForm::Positive;
    bool stabilize = true;
    /// Draw a fresh bank on every call of enlsa_attention_redraw.
    bool redraw = false;

    double effective_scale() const;
};

template <typename T>
struct EnlsaParams {
    EnlsaConfig cfg;
    Linear<T> q, k, v;
    FeatureBank<T> bank;
    std::uint64_t draws = 0;
};

template <typename T>
EnlsaParams<T> make_enlsa(const EnlsaConfig& cfg, Rng& rng);

/// Identity projections with zero bias.
template <typename T>
EnlsaParams<T> make_enlsa_identity(const EnlsaConfig& cfg, std::uint64_t bank_seed);

/// tokens (n, 1, N, c) -> (n, 1, N, c). Non-finite intermediates raise
/// NumericError naming the stage ("enlsa.<stage>").
template <typename T>
Var<T> enlsa_attention(const Var<T>& tokens, const EnlsaParams<T>& p);

/// As enlsa_attention, but first replaces the bank with the next draw of
/// its seed family.
template <typename T>
Var<T> enlsa_attention_redraw(const Var<T>& tokens, EnlsaParams<T>& p);

/// Largest N the exact oracle will materialize.
constexpr Index kExactAttentionMaxTokens = 8192;

/// softmax(Q' K'^T) V with the same projections and scale. Refuses N above
/// kExactAttentionMaxTokens with std::length_error.
template <typename T>
Var<T> exact_attention(const Var<T>& tokens, const EnlsaParams<T>& p);

/// The N x N weights sigma(Q') sigma(K')^T / rowsum (without eps), for
/// small-N inspection. Shape (n, 1, N, N).
template <typename T>
Tensor<T> enlsa_weights(const Tensor<T>& tokens, const EnlsaParams<T>& p);

/// De-shifted estimate sigma(q) . sigma(k) exp(2 s) of exp(q . k), with s
/// the shared shift of the two feature rows.
double kernel_estimate(const std::vector<double>& q, const std::vector<double>& k,
                       const FeatureBank<double>& bank, FeatureForm form = FeatureForm::Positive);

struct ErrorCurveRow {
    Index m = 0;
    double median_rel_error = 0;
    double mean_rel_error = 0;
};

struct ErrorCurveOptions {
    Index c = 8;
    std::vector<Index> m_list{256, 1024, 4096};
    Index trials = 100;
    /// Standard deviation of the entries of q and k.
    double input_sd = 0.5;
    std::uint64_t seed = 42;
    FeatureForm form = FeatureForm::Positive;
};

/// Median over trials of |estimate - exp(q.k)| / exp(q.k) for each m.
/// Trial t uses the same (q, k) pair for every m.
std::vector<ErrorCurveRow> estimator_error_curve(const ErrorCurveOptions& opt);
void write_error_curve_csv(std::ostream& os, const std::vector<ErrorCurveRow>& rows);

struct ScalingRow {
    Index n = 0;
    double enlsa_seconds = 0;
    /// Negative when N exceeds the exact-attention guard.
    double exact_seconds = -1;
};

struct ScalingOptions {
    Index c = 64;
    Index m = 256;
    std::vector<Index> n_list{1024, 2048, 4096};
    int repeats = 5;
    std::uint64_t seed = 42;
};

/// Median wall-clock time of detached forward passes.
std::vector<ScalingRow> scaling_benchmark(const ScalingOptions& opt);
void write_scaling_csv(std::ostream& os, const std::vector<ScalingRow>& rows);

template <typename T>
void visit(EnlsaParams<T>& p, const std::string& prefix, ParamVisitor<T>& v) {
    visit(p.q, prefix + ".q", v);
    visit(p.k, prefix + ".k", v);
    visit(p.v, prefix + ".v", v);
    v.buffer(prefix + ".phi", p.bank.phi);
}

}  // namespace punet
