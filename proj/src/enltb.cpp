#include "punet/enltb.hpp"

namespace punet {

template <typename T>
EnltbParams<T> make_enltb(const EnltbConfig& cfg, Rng& rng) {
    if (cfg.c < 1 || cfg.c_prev < 0 || cfg.mlp_ratio < 1) {
        throw std::invalid_argument("make_enltb: invalid channel configuration");
    }
    EnltbParams<T> p;
    p.cfg = cfg;
    p.cfg.attn.c = cfg.c;
    if (cfg.c_prev > 0) {
        Rng fr = rng.fork(1);
        EnltbFuse<T> f;
        f.merge_proj = make_conv<T>(fr, 4 * cfg.c_prev, cfg.c, 1);
        f.concat_proj = make_conv<T>(fr, 2 * cfg.c, cfg.c, 1);
        p.fuse = std::move(f);
    }
    p.ln1 = make_layer_norm<T>(cfg.c, cfg.ln_eps);
    p.ln2 = make_layer_norm<T>(cfg.c, cfg.ln_eps);
    Rng ar = rng.fork(2);
    p.attn = make_enlsa<T>(p.cfg.attn, ar);
    Rng mr = rng.fork(3);
    p.mlp1 = make_linear<T>(mr, cfg.c, cfg.mlp_ratio * cfg.c);
    p.mlp2 = make_linear<T>(mr, cfg.mlp_ratio * cfg.c, cfg.c);
    return p;
}

template <typename T>
Var<T> enltb_fuse_inputs(const Var<T>& x, const Var<T>* prev, const EnltbParams<T>& p) {
    if (x.shape().c != p.cfg.c) {
        throw ShapeError("enltb_fuse_inputs", "channel", p.cfg.c, x.shape().c);
    }
    if (prev == nullptr) {
        return x;
    }
    if (!p.fuse) {
        throw std::invalid_argument("enltb_fuse_inputs: block has no fusion parameters");
    }
    const Shape& ps = prev->shape();
    if (ps.c != p.cfg.c_prev) {
        throw ShapeError("enltb_fuse_inputs", "prev_channel", p.cfg.c_prev, ps.c);
    }
    if (ps.h != 2 * x.shape().h) {
        throw ShapeError("enltb_fuse_inputs", "prev_height", 2 * x.shape().h, ps.h);
    }
    if (ps.w != 2 * x.shape().w) {
        throw ShapeError("enltb_fuse_inputs", "prev_width", 2 * x.shape().w, ps.w);
    }
    Var<T> merged = apply(p.fuse->merge_proj, space_to_depth2(*prev));
    return apply(p.fuse->concat_proj, concat_channels(x, merged));
}

template <typename T>
Var<T> enltb_forward(const Var<T>& x, const Var<T>* prev, const EnltbParams<T>& p) {
    const Var<T> xin = enltb_fuse_inputs(x, prev, p);
    const Index h = xin.shape().h;
    const Index w = xin.shape().w;
    if (h * w < 1) {
        throw ShapeError("enltb_forward", "empty spatial extent");
    }
    const Var<T> tokens = to_tokens(xin);
    const Var<T> y = add(tokens, enlsa_attention(apply(p.ln1, tokens), p.attn));
    const Var<T> mlp = apply(p.mlp2, gelu(apply(p.mlp1, apply(p.ln2, y))));
    return from_tokens(add(y, mlp), h, w);
}

#define PUNET_INSTANTIATE_ENLTB(T)                                                          \
    template EnltbParams<T> make_enltb(const EnltbConfig&, Rng&);                           \
    template Var<T> enltb_fuse_inputs(const Var<T>&, const Var<T>*, const EnltbParams<T>&); \
    template Var<T> enltb_forward(const Var<T>&, const Var<T>*, const EnltbParams<T>&);

PUNET_INSTANTIATE_ENLTB(float)
PUNET_INSTANTIATE_ENLTB(double)

}  // namespace punet
