#pragma once

// Bi-path residual block: a standard 3x3 conv path and a dilated 3x3 conv
// path, each conv followed by BatchNorm and ReLU, concatenated and fused by
// a 1x1 conv, plus a 1x1 projected skip of the input.

#include <string>
#include <utility>

#include "punet/layers.hpp"

namespace punet {

struct BprbConfig {
    Index c_in = 0;
    Index c_out = 0;
    /// Applied in the first conv of each path and in the skip projection.
    int stride = 1;
    int dilation = 2;
    Index kernel = 3;
    /// Off: the dilated path and the fusion conv are dropped; the block
    /// output is the local path (plus skip).
    bool use_global = true;
    /// Off: no skip projection, output is the fusion conv alone.
    bool residual = true;
};

template <typename T>
struct BprbParams {
    BprbConfig cfg;
    Conv<T> local1, local2;
    BatchNormParams<T> local_bn1, local_bn2;
    Conv<T> global1, global2;
    BatchNormParams<T> global_bn1, global_bn2;
    Conv<T> fuse;  // 1x1, 2 c_out -> c_out
    Conv<T> skip;  // 1x1, c_in -> c_out, strided
};

template <typename T>
BprbParams<T> make_bprb(const BprbConfig& cfg, Rng& rng);

template <typename T>
struct BprbPaths {
    Var<T> local;
    Var<T> global;  // empty value when the global path is disabled
};

template <typename T>
BprbPaths<T> bprb_forward_paths(const Var<T>& x, BprbParams<T>& p, const BnOptions& bn);

template <typename T>
Var<T> bprb_forward(const Var<T>& x, BprbParams<T>& p, const BnOptions& bn);

struct ReceptiveField {
    Index local = 0;
    Index global = 0;
    bool operator==(const ReceptiveField&) const = default;
};

/// Closed-form receptive field of each path: 1 + sum_i (k - 1) d_i J_i with
/// J_i the product of strides before conv i.
ReceptiveField bprb_receptive_field(const BprbConfig& cfg);

template <typename T>
void visit(BprbParams<T>& p, const std::string& prefix, ParamVisitor<T>& v) {
    visit(p.local1, prefix + ".local1", v);
    visit(p.local_bn1, prefix + ".local_bn1", v);
    visit(p.local2, prefix + ".local2", v);
    visit(p.local_bn2, prefix + ".local_bn2", v);
    if (p.cfg.use_global) {
        visit(p.global1, prefix + ".global1", v);
        visit(p.global_bn1, prefix + ".global_bn1", v);
        visit(p.global2, prefix + ".global2", v);
        visit(p.global_bn2, prefix + ".global_bn2", v);
        visit(p.fuse, prefix + ".fuse", v);
    }
    if (p.cfg.residual) {
        visit(p.skip, prefix + ".skip", v);
    }
}

}  // namespace punet
