#include "punet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>

namespace punet {

BinaryMask::BinaryMask(Index h_, Index w_) : h(h_), w(w_) {
    if (h_ < 1 || w_ < 1) {
        throw std::invalid_argument("BinaryMask: dims must be positive");
    }
    bits.assign(static_cast<std::size_t>(h_ * w_), 0);
}

Index BinaryMask::count() const {
    Index n = 0;
    for (auto b : bits) n += b != 0;
    return n;
}

BinaryMask BinaryMask::from_labels(const LabelMap& labels, Index b, std::int32_t cls) {
    BinaryMask m(labels.h, labels.w);
    for (Index y = 0; y < labels.h; ++y) {
        for (Index x = 0; x < labels.w; ++x) m.set(y, x, labels.at(b, y, x) == cls);
    }
    return m;
}

double dice(const BinaryMask& a, const BinaryMask& b) {
    if (a.h != b.h) throw ShapeError("dice", "height", a.h, b.h);
    if (a.w != b.w) throw ShapeError("dice", "width", a.w, b.w);
    std::int64_t inter = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.bits.size(); ++i) {
        const bool pa = a.bits[i] != 0;
        const bool pb = b.bits[i] != 0;
        inter += pa && pb;
        na += pa;
        nb += pb;
    }
    if (na + nb == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

std::vector<Point> boundary_points(const BinaryMask& m) {
    std::vector<Point> out;
    auto inside = [&](Index y, Index x) { return y >= 0 && y < m.h && x >= 0 && x < m.w && m.at(y, x); };
    for (Index y = 0; y < m.h; ++y) {
        for (Index x = 0; x < m.w; ++x) {
            if (!m.at(y, x)) continue;
            if (!inside(y - 1, x) || !inside(y + 1, x) || !inside(y, x - 1) || !inside(y, x + 1)) {
                out.push_back({y, x});
            }
        }
    }
    return out;
}

namespace {

std::int64_t sq_dist(const Point& a, const Point& b) {
    const std::int64_t dy = a.y - b.y;
    const std::int64_t dx = a.x - b.x;
    return dy * dy + dx * dx;
}

std::vector<std::int64_t> brute_force(const std::vector<Point>& from, const std::vector<Point>& to) {
    std::vector<std::int64_t> out;
    out.reserve(from.size());
    for (const Point& p : from) {
        std::int64_t best = std::numeric_limits<std::int64_t>::max();
        for (const Point& q : to) best = std::min(best, sq_dist(p, q));
        out.push_back(best);
    }
    return out;
}

// Buckets `to` on a square grid and searches rings of cells outward from
// each query until no unvisited cell can hold a closer point.
std::vector<std::int64_t> grid_search(const std::vector<Point>& from, const std::vector<Point>& to) {
    constexpr Index kCell = 8;
    Index max_y = 0, max_x = 0;
    for (const Point& q : to) {
        max_y = std::max(max_y, q.y);
        max_x = std::max(max_x, q.x);
    }
    for (const Point& p : from) {
        max_y = std::max(max_y, p.y);
        max_x = std::max(max_x, p.x);
    }
    const Index gh = max_y / kCell + 1;
    const Index gw = max_x / kCell + 1;
    std::vector<std::vector<Point>> cells(static_cast<std::size_t>(gh * gw));
    for (const Point& q : to) {
        cells[static_cast<std::size_t>((q.y / kCell) * gw + q.x / kCell)].push_back(q);
    }
    const Index max_ring = std::max(gh, gw);
    std::vector<std::int64_t> out;
    out.reserve(from.size());
    for (const Point& p : from) {
        const Index cy = p.y / kCell;
        const Index cx = p.x / kCell;
        std::int64_t best = std::numeric_limits<std::int64_t>::max();
        for (Index r = 0; r <= max_ring; ++r) {
            for (Index y = cy - r; y <= cy + r; ++y) {
                if (y < 0 || y >= gh) continue;
                const bool edge_row = y == cy - r || y == cy + r;
                for (Index x = cx - r; x <= cx + r; x += (edge_row || r == 0) ? 1 : 2 * r) {
                    if (x < 0 || x >= gw) continue;
                    for (const Point& q : cells[static_cast<std::size_t>(y * gw + x)]) {
                        best = std::min(best, sq_dist(p, q));
                    }
                }
            }
            // Points outside rings 0..r differ by at least r*kCell + 1 on
            // some axis.
            const std::int64_t bound = r * kCell + 1;
            if (best <= bound * bound) break;
        }
        out.push_back(best);
    }
    return out;
}

}  // namespace

std::vector<std::int64_t> directed_sq_distances(const std::vector<Point>& from,
                                                const std::vector<Point>& to,
                                                HausdorffMethod method) {
    if (to.empty()) {
        throw EmptyMaskError("directed_sq_distances: target set is empty");
    }
    return method == HausdorffMethod::BruteForce ? brute_force(from, to) : grid_search(from, to);
}

double percentile_linear(std::vector<double> v, double p) {
    if (v.empty()) throw std::invalid_argument("percentile_linear: empty input");
    if (!(p >= 0 && p <= 100)) throw std::invalid_argument("percentile_linear: p outside [0, 100]");
    std::sort(v.begin(), v.end());
    const double rank = p / 100.0 * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(rank));
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    const double frac = rank - static_cast<double>(lo);
    return v[lo] + frac * (v[hi] - v[lo]);
}

double hausdorff(const BinaryMask& a, const BinaryMask& b, double percentile, HausdorffMethod method) {
    if (a.h != b.h) throw ShapeError("hausdorff", "height", a.h, b.h);
    if (a.w != b.w) throw ShapeError("hausdorff", "width", a.w, b.w);
    const auto pa = boundary_points(a);
    const auto pb = boundary_points(b);
    if (pa.empty() || pb.empty()) {
        throw EmptyMaskError("hausdorff: undefined for an empty mask");
    }
    const auto dab = directed_sq_distances(pa, pb, method);
    const auto dba = directed_sq_distances(pb, pa, method);
    if (percentile >= 100.0) {
        const std::int64_t mx = std::max(*std::max_element(dab.begin(), dab.end()),
                                         *std::max_element(dba.begin(), dba.end()));
        return std::sqrt(static_cast<double>(mx));
    }
    std::vector<double> all;
    all.reserve(dab.size() + dba.size());
    for (auto d : dab) all.push_back(std::sqrt(static_cast<double>(d)));
    for (auto d : dba) all.push_back(std::sqrt(static_cast<double>(d)));
    return percentile_linear(std::move(all), percentile);
}

EvaluationTable evaluate(const LabelMap& pred, const LabelMap& truth, Index num_classes) {
    if (pred.n != truth.n) throw ShapeError("evaluate", "batch", truth.n, pred.n);
    if (pred.h != truth.h) throw ShapeError("evaluate", "height", truth.h, pred.h);
    if (pred.w != truth.w) throw ShapeError("evaluate", "width", truth.w, pred.w);
    if (num_classes < 2) throw std::invalid_argument("evaluate: need at least one foreground class");
    EvaluationTable t;
    double dice_sum = 0;
    double hd_sum = 0, hd95_sum = 0;
    int hd_n = 0, hd95_n = 0;
    for (Index c = 1; c < num_classes; ++c) {
        ClassMetrics cm;
        cm.cls = static_cast<std::int32_t>(c);
        double ds = 0, hs = 0, h95 = 0;
        int hn = 0;
        for (Index b = 0; b < pred.n; ++b) {
            const BinaryMask pm = BinaryMask::from_labels(pred, b, cm.cls);
            const BinaryMask tm = BinaryMask::from_labels(truth, b, cm.cls);
            ds += dice(pm, tm);
            if (!pm.empty() && !tm.empty()) {
                hs += hausdorff(pm, tm, 100.0);
                h95 += hausdorff(pm, tm, 95.0);
                ++hn;
            }
        }
        cm.dice = pred.n > 0 ? ds / static_cast<double>(pred.n) : 1.0;
        if (hn > 0) {
            cm.hd = hs / hn;
            cm.hd95 = h95 / hn;
            hd_sum += *cm.hd;
            hd95_sum += *cm.hd95;
            ++hd_n;
            ++hd95_n;
        }
        dice_sum += cm.dice;
        t.classes.push_back(cm);
    }
    t.mean_dice = dice_sum / static_cast<double>(t.classes.size());
    if (hd_n > 0) t.mean_hd = hd_sum / hd_n;
    if (hd95_n > 0) t.mean_hd95 = hd95_sum / hd95_n;
    return t;
}

void write_evaluation_csv(std::ostream& os, const EvaluationTable& t) {
    auto fmt = [](const std::optional<double>& v) {
        if (!v) return std::string("NA");
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.4f", *v);
        return std::string(buf);
    };
    os << "class,dice,hd,hd95\n";
    for (const auto& c : t.classes) {
        os << c.cls << ',' << fmt(c.dice) << ',' << fmt(c.hd) << ',' << fmt(c.hd95) << '\n';
    }
    os << "mean," << fmt(t.mean_dice) << ',' << fmt(t.mean_hd) << ',' << fmt(t.mean_hd95) << '\n';
}

}  // namespace punet
