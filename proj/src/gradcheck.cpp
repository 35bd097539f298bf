#include "punet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "punet/rng.hpp"

namespace punet {

std::vector<GradCheckResult> grad_check(const std::vector<Leaf>& leaves,
                                        const std::function<Var<double>()>& loss,
                                        const GradCheckOptions& opt) {
    std::vector<Tensor<double>> analytic;
    {
        Tape<double> tape;
        for (const auto& [name, v] : leaves) tape.track(*v);
        const Var<double> l = loss();
        const Gradients<double> g = backward(tape, l);
        for (const auto& [name, v] : leaves) {
            const Tensor<double>* gv = g.find(*v);
            analytic.push_back(gv ? *gv : Tensor<double>(v->shape()));
        }
        for (const auto& [name, v] : leaves) v->detach();
    }
    const double f0 = loss().value[0];
    Rng rng(opt.seed);
    std::vector<GradCheckResult> out;
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        Var<double>& v = *leaves[li].second;
        const Index n = v.value.numel();
        std::vector<Index> coords;
        if (opt.coords <= 0 || opt.coords >= n) {
            for (Index i = 0; i < n; ++i) coords.push_back(i);
        } else {
            for (Index i = 0; i < opt.coords; ++i) coords.push_back(rng.uniform_int(0, n - 1));
        }
        GradCheckResult r;
        r.name = leaves[li].first;
        for (Index i : coords) {
            const double x0 = v.value[i];
            // For a kink inside [x - h, x + h] the central-difference error is
            // half the one-sided asymmetry |f(x+h) + f(x-h) - 2 f(x)| / h; for
            // smooth f that bound is O(h f''). Kinks on both sides can cancel in
            // the asymmetry, so a step is accepted only when it also agrees with
            // the next smaller one, and the larger step of the pair is reported.
            // Otherwise the pair with the smallest combined score wins. The
            // analytic value plays no part in the choice.
            double num = 0, best = std::numeric_limits<double>::infinity();
            double h = opt.step, prev_d = 0, prev_bound = 0;
            for (int k = 0; k <= opt.refinements; ++k, h /= 10) {
                v.value[i] = x0 + h;
                const double fp = loss().value[0];
                v.value[i] = x0 - h;
                const double fm = loss().value[0];
                v.value[i] = x0;
                const double d = (fp - fm) / (2 * h);
                const double scale = std::max(std::abs(d), opt.floor);
                const double bound = std::abs(fp + fm - 2 * f0) / (2 * h) / scale;
                if (k > 0) {
                    const double score = std::max({bound, prev_bound, std::abs(d - prev_d) / scale});
                    if (score < best) {
                        best = score;
                        num = prev_d;
                    }
                    if (score <= opt.smooth_tol) break;
                    if (k < opt.refinements) ++r.refined;
                } else {
                    num = d;
                }
                prev_d = d;
                prev_bound = bound;
            }
            const double ana = analytic[li][i];
            const double abs_err = std::abs(num - ana);
            const double rel = abs_err / std::max({std::abs(num), std::abs(ana), opt.floor});
            r.max_abs_error = std::max(r.max_abs_error, abs_err);
            r.max_rel_error = std::max(r.max_rel_error, rel);
            ++r.checked;
        }
        out.push_back(r);
    }
    return out;
}

double worst_rel_error(const std::vector<GradCheckResult>& r) {
    double w = 0;
    for (const auto& x : r) w = std::max(w, x.max_rel_error);
    return w;
}

}  // namespace punet
