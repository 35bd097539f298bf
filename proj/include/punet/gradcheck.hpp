#pragma once

// Central finite-difference checks of tape gradients in double precision.

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "punet/layers.hpp"

namespace punet {

struct GradCheckResult {
    std::string name;
    Index checked = 0;
    double max_rel_error = 0;
    double max_abs_error = 0;
    /// Step reductions made to clear kinks or curvature.
    Index refined = 0;
};

struct GradCheckOptions {
    double step = 1e-3;
    /// Coordinates sampled per tensor; 0 checks every coordinate.
    Index coords = 0;
    /// Denominator floor: rel = |a - n| / max(|a|, |n|, floor).
    double floor = 1e-6;
    std::uint64_t seed = 1;
    /// Accept a step once its kink error bound and its disagreement with the
    /// previous step, both relative to the estimate, are at most this.
    double smooth_tol = 1e-4;
    /// Times the step may shrink tenfold; at least one shrink always happens.
    int refinements = 4;
};

using Leaf = std::pair<std::string, Var<double>*>;

/// `loss` must build a scalar from the current values of the leaves. The
/// leaves are tracked for the analytic pass and detached afterwards.
std::vector<GradCheckResult> grad_check(const std::vector<Leaf>& leaves,
                                        const std::function<Var<double>()>& loss,
                                        const GradCheckOptions& opt = {});

/// Trainable parameters of a module tree as leaves.
template <typename P>
std::vector<Leaf> param_leaves(P& p, const std::string& prefix = std::string()) {
    std::vector<Leaf> out;
    FnVisitor<double> fv([&](const std::string& n, Var<double>& v) { out.emplace_back(n, &v); });
    visit(p, prefix, fv);
    return out;
}

double worst_rel_error(const std::vector<GradCheckResult>& r);

}  // namespace punet
