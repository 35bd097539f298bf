#pragma once

// Overlap and boundary-distance metrics for label masks. Distances are in
// pixels.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "punet/tensor.hpp"

namespace punet {

struct BinaryMask {
    Index h = 0;
    Index w = 0;
    std::vector<std::uint8_t> bits;  // row-major, 0 or 1

    BinaryMask() = default;
    BinaryMask(Index h_, Index w_);

    bool at(Index y, Index x) const { return bits[static_cast<std::size_t>(y * w + x)] != 0; }
    void set(Index y, Index x, bool v) { bits[static_cast<std::size_t>(y * w + x)] = v ? 1 : 0; }
    Index count() const;
    bool empty() const { return count() == 0; }

    /// Pixels of `labels` slice `b` equal to `cls`.
    static BinaryMask from_labels(const LabelMap& labels, Index b, std::int32_t cls);
};

/// Raised by hausdorff when either mask has no foreground.
class EmptyMaskError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

/// 2|A n B| / (|A| + |B|); 1.0 when both are empty.
double dice(const BinaryMask& a, const BinaryMask& b);

struct Point {
    Index y = 0;
    Index x = 0;
};

/// Foreground pixels with at least one 4-neighbor outside the mask (image
/// border counts as outside).
std::vector<Point> boundary_points(const BinaryMask& m);

enum class HausdorffMethod { BruteForce, Grid };

/// Symmetric Hausdorff distance between boundary sets. percentile 100 is
/// the classic maximum; other values take that percentile (linear
/// interpolation) of both directed distance sets pooled together.
double hausdorff(const BinaryMask& a, const BinaryMask& b, double percentile = 100.0,
                 HausdorffMethod method = HausdorffMethod::Grid);

/// Squared distance from every point of `from` to its nearest point of `to`.
std::vector<std::int64_t> directed_sq_distances(const std::vector<Point>& from,
                                                const std::vector<Point>& to,
                                                HausdorffMethod method);

/// Linear-interpolated percentile of unsorted values, p in [0, 100].
double percentile_linear(std::vector<double> v, double p);

struct ClassMetrics {
    std::int32_t cls = 0;
    double dice = 0;
    /// Mean over cases where the distance is defined; empty when none is.
    std::optional<double> hd;
    std::optional<double> hd95;
};

struct EvaluationTable {
    std::vector<ClassMetrics> classes;  // foreground classes 1..C-1
    double mean_dice = 0;
    std::optional<double> mean_hd;
    std::optional<double> mean_hd95;
};

/// Per-class metrics over a stack of cases (masks are (n, h, w)).
EvaluationTable evaluate(const LabelMap& pred, const LabelMap& truth, Index num_classes);

/// Columns: class,dice,hd,hd95; undefined distances are written as NA and
/// the last row is "mean".
void write_evaluation_csv(std::ostream& os, const EvaluationTable& t);

}  // namespace punet
