#pragma once

// Cross-scale integrator: per-stage 1x1 projections to a shared width,
// flatten and concatenate all stage tokens into one sequence, run pre-norm
// transformer layers over it, then split the sequence back per stage and
// project to the original widths.

#include <string>
#include <utility>
#include <vector>

#include "punet/enlsa.hpp"

namespace punet {

enum class ScsiAttention { Exact, Enlsa };

struct ScsiConfig {
    /// Channel width of each input stage, in sequence order.
    std::vector<Index> channels;
    Index d_model = 256;
    int depth = 2;
    int heads = 8;
    Index mlp_ratio = 4;
    double ln_eps = 1e-5;
    ScsiAttention attention = ScsiAttention::Exact;
    /// Used when attention == Enlsa (single head per layer).
    Index m = 256;
};

template <typename T>
struct TransformerLayer {
    LayerNormParams<T> ln1, ln2;
    Linear<T> q, k, v, o;
    Linear<T> mlp1, mlp2;
    FeatureBank<T> bank;  // Enlsa mode only
};

template <typename T>
struct ScsiParams {
    ScsiConfig cfg;
    std::vector<Conv<T>> in_proj;   // c_s -> d_model
    std::vector<Conv<T>> out_proj;  // d_model -> c_s
    std::vector<TransformerLayer<T>> layers;
};

template <typename T>
ScsiParams<T> make_scsi(const ScsiConfig& cfg, Rng& rng);

struct TokenSegment {
    int stage = 0;
    Index offset = 0;
    Index length = 0;
    bool operator==(const TokenSegment&) const = default;
};

/// Contiguous partition of the compound sequence. `spatial` holds (h, w)
/// per stage; stages are numbered from `first_stage`.
std::vector<TokenSegment> scsi_token_layout(const std::vector<std::pair<Index, Index>>& spatial,
                                            int first_stage = 3);

/// One pre-norm transformer layer over tokens (n, 1, N, d).
template <typename T>
Var<T> transformer_layer(const Var<T>& x, const TransformerLayer<T>& p, const ScsiConfig& cfg);

/// Maps must match the configured stage widths; outputs keep each input's
/// shape.
template <typename T>
std::vector<Var<T>> scsi_forward(const std::vector<Var<T>>& maps, const ScsiParams<T>& p);

template <typename T>
void visit(ScsiParams<T>& p, const std::string& prefix, ParamVisitor<T>& v) {
    for (std::size_t i = 0; i < p.in_proj.size(); ++i) {
        visit(p.in_proj[i], prefix + ".in_proj." + std::to_string(i), v);
    }
    for (std::size_t i = 0; i < p.layers.size(); ++i) {
        auto& l = p.layers[i];
        const std::string lp = prefix + ".layers." + std::to_string(i);
        visit(l.ln1, lp + ".ln1", v);
        visit(l.q, lp + ".q", v);
        visit(l.k, lp + ".k", v);
        visit(l.v, lp + ".v", v);
        visit(l.o, lp + ".o", v);
        visit(l.ln2, lp + ".ln2", v);
        visit(l.mlp1, lp + ".mlp1", v);
        visit(l.mlp2, lp + ".mlp2", v);
        if (p.cfg.attention == ScsiAttention::Enlsa) {
            v.buffer(lp + ".phi", l.bank.phi);
        }
    }
    for (std::size_t i = 0; i < p.out_proj.size(); ++i) {
        visit(p.out_proj[i], prefix + ".out_proj." + std::to_string(i), v);
    }
}

}  // namespace punet
