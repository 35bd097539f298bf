#include "punet/scsi.hpp"

#include <cmath>

namespace punet {

template <typename T>
ScsiParams<T> make_scsi(const ScsiConfig& cfg, Rng& rng) {
    if (cfg.d_model < 1 || cfg.depth < 0 || cfg.heads < 1 || cfg.mlp_ratio < 1) {
        throw std::invalid_argument("make_scsi: invalid transformer configuration");
    }
    if (cfg.attention == ScsiAttention::Exact && cfg.d_model % cfg.heads != 0) {
        throw std::invalid_argument("make_scsi: d_model must be divisible by heads");
    }
    ScsiParams<T> p;
    p.cfg = cfg;
    Rng proj = rng.fork(1);
    for (Index c : cfg.channels) {
        p.in_proj.push_back(make_conv<T>(proj, c, cfg.d_model, 1));
    }
    for (Index c : cfg.channels) {
        p.out_proj.push_back(make_conv<T>(proj, cfg.d_model, c, 1));
    }
    const Index d = cfg.d_model;
    for (int i = 0; i < cfg.depth; ++i) {
        Rng lr = rng.fork(100 + static_cast<std::uint64_t>(i));
        TransformerLayer<T> l;
        l.ln1 = make_layer_norm<T>(d, cfg.ln_eps);
        l.ln2 = make_layer_norm<T>(d, cfg.ln_eps);
        l.q = make_linear<T>(lr, d, d);
        l.k = make_linear<T>(lr, d, d);
        l.v = make_linear<T>(lr, d, d);
        l.o = make_linear<T>(lr, d, d);
        l.mlp1 = make_linear<T>(lr, d, cfg.mlp_ratio * d);
        l.mlp2 = make_linear<T>(lr, cfg.mlp_ratio * d, d);
        if (cfg.attention == ScsiAttention::Enlsa) {
            l.bank = make_feature_bank<T>(cfg.m, d, lr.next_u64());
        }
        p.layers.push_back(std::move(l));
    }
    return p;
}

std::vector<TokenSegment> scsi_token_layout(const std::vector<std::pair<Index, Index>>& spatial,
                                            int first_stage) {
    std::vector<TokenSegment> out;
    Index offset = 0;
    for (std::size_t i = 0; i < spatial.size(); ++i) {
        const Index len = spatial[i].first * spatial[i].second;
        out.push_back({first_stage + static_cast<int>(i), offset, len});
        offset += len;
    }
    return out;
}

namespace {

template <typename T>
Var<T> multi_head_attention(const Var<T>& x, const TransformerLayer<T>& p, const ScsiConfig& cfg) {
    if (cfg.attention == ScsiAttention::Enlsa) {
        EnlsaParams<T> ep;
        ep.cfg.c = cfg.d_model;
        ep.cfg.m = cfg.m;
        ep.q = p.q;
        ep.k = p.k;
        ep.v = p.v;
        ep.bank = p.bank;
        return apply(p.o, enlsa_attention(x, ep));
    }
    const Var<T> q = apply(p.q, x);
    const Var<T> k = apply(p.k, x);
    const Var<T> v = apply(p.v, x);
    const Index dh = cfg.d_model / cfg.heads;
    const double s = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Var<T>> heads;
    for (int h = 0; h < cfg.heads; ++h) {
        const Var<T> qh = slice_cols(q, h * dh, dh);
        const Var<T> kh = slice_cols(k, h * dh, dh);
        const Var<T> vh = slice_cols(v, h * dh, dh);
        const Var<T> w = softmax_lastdim(scale(matmul(qh, transpose(kh)), s));
        heads.push_back(matmul(w, vh));
    }
    return apply(p.o, concat_cols(heads));
}

}  // namespace

template <typename T>
Var<T> transformer_layer(const Var<T>& x, const TransformerLayer<T>& p, const ScsiConfig& cfg) {
    const Var<T> y = add(x, multi_head_attention(apply(p.ln1, x), p, cfg));
    return add(y, apply(p.mlp2, gelu(apply(p.mlp1, apply(p.ln2, y)))));
}

template <typename T>
std::vector<Var<T>> scsi_forward(const std::vector<Var<T>>& maps, const ScsiParams<T>& p) {
    const std::size_t stages = p.cfg.channels.size();
    if (maps.size() != stages) {
        throw ShapeError("scsi_forward", "stage_count", static_cast<Index>(stages),
                         static_cast<Index>(maps.size()));
    }
    std::vector<std::pair<Index, Index>> spatial;
    std::vector<Var<T>> tokens;
    for (std::size_t i = 0; i < stages; ++i) {
        const Shape& s = maps[i].shape();
        if (s.c != p.cfg.channels[i]) {
            throw ShapeError("scsi_forward", "stage " + std::to_string(i) + " channel",
                             p.cfg.channels[i], s.c);
        }
        if (i > 0 && s.n != maps[0].shape().n) {
            throw ShapeError("scsi_forward", "stage " + std::to_string(i) + " batch",
                             maps[0].shape().n, s.n);
        }
        spatial.emplace_back(s.h, s.w);
        tokens.push_back(to_tokens(apply(p.in_proj[i], maps[i])));
    }
    Var<T> seq = concat_rows(tokens);
    for (const auto& layer : p.layers) {
        seq = transformer_layer(seq, layer, p.cfg);
    }
    const auto layout = scsi_token_layout(spatial);
    std::vector<Var<T>> out;
    for (std::size_t i = 0; i < stages; ++i) {
        const Var<T> seg = slice_rows(seq, layout[i].offset, layout[i].length);
        out.push_back(apply(p.out_proj[i], from_tokens(seg, spatial[i].first, spatial[i].second)));
    }
    return out;
}

#define PUNET_INSTANTIATE_SCSI(T)                                                            \
    template ScsiParams<T> make_scsi(const ScsiConfig&, Rng&);                               \
    template Var<T> transformer_layer(const Var<T>&, const TransformerLayer<T>&,             \
                                      const ScsiConfig&);                                    \
    template std::vector<Var<T>> scsi_forward(const std::vector<Var<T>>&, const ScsiParams<T>&);

PUNET_INSTANTIATE_SCSI(float)
PUNET_INSTANTIATE_SCSI(double)

}  // namespace punet
