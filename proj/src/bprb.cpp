#include "punet/bprb.hpp"

namespace punet {

template <typename T>
BprbParams<T> make_bprb(const BprbConfig& cfg, Rng& rng) {
    if (cfg.c_in < 1 || cfg.c_out < 1) {
        throw std::invalid_argument("make_bprb: channel counts must be positive");
    }
    if (cfg.stride != 1 && cfg.stride != 2) {
        throw std::invalid_argument("make_bprb: stride must be 1 or 2");
    }
    if (cfg.dilation < 1) {
        throw std::invalid_argument("make_bprb: dilation must be >= 1");
    }
    BprbParams<T> p;
    p.cfg = cfg;
    const Index k = cfg.kernel;
    Rng local = rng.fork(1);
    Rng global = rng.fork(2);
    Rng head = rng.fork(3);
    p.local1 = make_conv<T>(local, cfg.c_in, cfg.c_out, k, cfg.stride, 1);
    p.local2 = make_conv<T>(local, cfg.c_out, cfg.c_out, k, 1, 1);
    p.local_bn1 = make_batch_norm<T>(cfg.c_out);
    p.local_bn2 = make_batch_norm<T>(cfg.c_out);
    if (cfg.use_global) {
        p.global1 = make_conv<T>(global, cfg.c_in, cfg.c_out, k, cfg.stride, cfg.dilation);
        p.global2 = make_conv<T>(global, cfg.c_out, cfg.c_out, k, 1, cfg.dilation);
        p.global_bn1 = make_batch_norm<T>(cfg.c_out);
        p.global_bn2 = make_batch_norm<T>(cfg.c_out);
        p.fuse = make_conv<T>(head, 2 * cfg.c_out, cfg.c_out, 1);
    }
    if (cfg.residual) {
        p.skip = make_conv<T>(head, cfg.c_in, cfg.c_out, 1, cfg.stride, 1);
    }
    return p;
}

namespace {

template <typename T>
Var<T> conv_bn_relu(const Var<T>& x, const Conv<T>& conv, BatchNormParams<T>& bn,
                    const BnOptions& opt) {
    return relu(apply(bn, apply(conv, x), opt));
}

}  // namespace

template <typename T>
BprbPaths<T> bprb_forward_paths(const Var<T>& x, BprbParams<T>& p, const BnOptions& bn) {
    if (x.shape().c != p.cfg.c_in) {
        throw ShapeError("bprb", "channel", p.cfg.c_in, x.shape().c);
    }
    BprbPaths<T> out;
    out.local = conv_bn_relu(conv_bn_relu(x, p.local1, p.local_bn1, bn), p.local2, p.local_bn2, bn);
    if (p.cfg.use_global) {
        out.global =
            conv_bn_relu(conv_bn_relu(x, p.global1, p.global_bn1, bn), p.global2, p.global_bn2, bn);
    }
    return out;
}

template <typename T>
Var<T> bprb_forward(const Var<T>& x, BprbParams<T>& p, const BnOptions& bn) {
    BprbPaths<T> paths = bprb_forward_paths(x, p, bn);
    Var<T> y = p.cfg.use_global ? apply(p.fuse, concat_channels(paths.local, paths.global))
                                : std::move(paths.local);
    if (p.cfg.residual) {
        y = add(y, apply(p.skip, x));
    }
    return y;
}

ReceptiveField bprb_receptive_field(const BprbConfig& cfg) {
    auto path = [&](Index dilation) {
        // conv1 sees stride-1 input; conv2 runs on the strided grid.
        return 1 + (cfg.kernel - 1) * dilation + (cfg.kernel - 1) * dilation * cfg.stride;
    };
    ReceptiveField rf;
    rf.local = path(1);
    rf.global = cfg.use_global ? path(cfg.dilation) : 0;
    return rf;
}

#define PUNET_INSTANTIATE_BPRB(T)                                                           \
    template BprbParams<T> make_bprb(const BprbConfig&, Rng&);                              \
    template BprbPaths<T> bprb_forward_paths(const Var<T>&, BprbParams<T>&, const BnOptions&); \
    template Var<T> bprb_forward(const Var<T>&, BprbParams<T>&, const BnOptions&);

PUNET_INSTANTIATE_BPRB(float)
PUNET_INSTANTIATE_BPRB(double)

}  // namespace punet
