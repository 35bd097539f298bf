#pragma once

// Pre-norm transformer block with random-feature attention as the token
// mixer, and the patch-merging fusion of the previous block's output.
//
//   x_in = x                                         (first block)
//   x_in = P2(concat[x, P1(space_to_depth2(prev))])  (later blocks)
//   y    = x_in + attn(LN1(x_in))
//   out  = y + MLP(LN2(y)),   MLP = Linear(c, 4c) -> GELU -> Linear(4c, c)
//
// P1, P2 are 1x1 convs (4 c_prev -> c and 2c -> c).

#include <optional>
#include <string>

#include "punet/enlsa.hpp"

namespace punet {

struct EnltbConfig {
    Index c = 0;
    /// Channels of the previous block's output; 0 means no fusion.
    Index c_prev = 0;
    EnlsaConfig attn;  // attn.c is forced to c
    Index mlp_ratio = 4;
    double ln_eps = 1e-5;
};

template <typename T>
struct EnltbFuse {
    Conv<T> merge_proj;   // 4 c_prev -> c
    Conv<T> concat_proj;  // 2 c -> c
};

template <typename T>
struct EnltbParams {
    EnltbConfig cfg;
    std::optional<EnltbFuse<T>> fuse;
    LayerNormParams<T> ln1, ln2;
    EnlsaParams<T> attn;
    Linear<T> mlp1, mlp2;
};

template <typename T>
EnltbParams<T> make_enltb(const EnltbConfig& cfg, Rng& rng);

/// Returns x unchanged when prev is null, otherwise the fused map with the
/// channels and spatial size of x.
template <typename T>
Var<T> enltb_fuse_inputs(const Var<T>& x, const Var<T>* prev, const EnltbParams<T>& p);

template <typename T>
Var<T> enltb_forward(const Var<T>& x, const Var<T>* prev, const EnltbParams<T>& p);

template <typename T>
void visit(EnltbParams<T>& p, const std::string& prefix, ParamVisitor<T>& v) {
    if (p.fuse) {
        visit(p.fuse->merge_proj, prefix + ".merge_proj", v);
        visit(p.fuse->concat_proj, prefix + ".concat_proj", v);
    }
    visit(p.ln1, prefix + ".ln1", v);
    visit(p.attn, prefix + ".attn", v);
    visit(p.ln2, prefix + ".ln2", v);
    visit(p.mlp1, prefix + ".mlp1", v);
    visit(p.mlp2, prefix + ".mlp2", v);
}

}  // namespace punet
