#pragma once

// Analytic FLOP and parameter counts. All counts are exact 64-bit integers;
// rounding happens only in the display helpers.
//
// Convention: one multiply-accumulate counts as `mac_flops` FLOPs (1 or 2).
// The headline attention number is the three c x c projections, 3 c^2 N
// MACs; the m-dependent feature-map and sigma-product terms are reported in
// their own fields.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "punet/net.hpp"

namespace punet {

enum class MacConvention { One = 1, Two = 2 };

struct CostReport {
    std::int64_t projection_flops = 0;
    std::int64_t attention_flops = 0;
    std::int64_t feature_map_flops = 0;
    /// Convolutions, normalization, MLP and other layers.
    std::int64_t other_flops = 0;
    std::int64_t params = 0;
    /// Bias terms, kept apart from `params`.
    std::int64_t bias_params = 0;
    MacConvention convention = MacConvention::One;

    std::int64_t total_flops() const {
        return projection_flops + attention_flops + feature_map_flops + other_flops;
    }
    /// Linear-layer work only (projections and other layers), the count
    /// the published tables use.
    std::int64_t headline_flops() const { return projection_flops + other_flops; }
    CostReport& operator+=(const CostReport& o);
    bool operator==(const CostReport&) const = default;
};

/// Three c x c projections over N = h w tokens, two feature maps (m c N
/// each) and the two sigma products (m c N each).
CostReport enlsa_cost(std::int64_t c, std::int64_t h, std::int64_t w, std::int64_t m,
                      MacConvention conv = MacConvention::One);

/// Three projections plus QK^T and AV (N^2 c each).
CostReport exact_attention_cost(std::int64_t c, std::int64_t h, std::int64_t w,
                                MacConvention conv = MacConvention::One);

/// Per-layer building blocks used by net_cost.
CostReport conv_cost(std::int64_t c_in, std::int64_t c_out, std::int64_t k, std::int64_t h_out,
                     std::int64_t w_out, MacConvention conv = MacConvention::One);
/// Per-element scale and shift (2 FLOPs), 2c parameters.
CostReport norm_cost(std::int64_t c, std::int64_t elements);
CostReport linear_cost(std::int64_t in, std::int64_t out, std::int64_t rows,
                       MacConvention conv = MacConvention::One);

struct CostRow {
    std::string module;
    Shape input;
    CostReport cost;
};

/// One row per network module in forward order.
std::vector<CostRow> net_cost(const NetConfig& cfg, MacConvention conv = MacConvention::One);
CostReport sum_rows(const std::vector<CostRow>& rows);

/// Two-decimal display in units of 1e9 / 1e6, rounded half up on the exact
/// integer.
std::string format_giga(std::int64_t v);
std::string format_mega(std::int64_t v);

/// Columns: module,input_size,flops,params,flops_display,params_display,
/// projection_flops,feature_map_flops,attention_flops,other_flops,
/// total_flops,bias_params,convention. `flops` is headline_flops().
void write_cost_csv(std::ostream& os, const std::vector<CostRow>& rows);

struct ReferenceRow {
    std::string module;
    std::int64_t c = 0;
    std::int64_t size = 0;  // h = w
    const char* flops = "";
    const char* params = "";
};

/// Published ENLSA cells (the five-stage ladder and the 256-channel entry
/// at 224 x 224).
const std::vector<ReferenceRow>& enlsa_reference_rows();
/// Published cells of the non-local baseline, for display only.
const std::vector<ReferenceRow>& nlsa_reference_rows();

struct CheckLine {
    std::string label;
    std::string expected;
    std::string actual;
    bool pass = false;
};

/// Recomputes every ENLSA reference cell with enlsa_cost (mac = 1).
std::vector<CheckLine> check_enlsa_reference();

/// ENLSA cost at every stage shape of the config, in the reference-table
/// layout.
std::vector<CostRow> enlsa_stage_rows(const NetConfig& cfg, MacConvention conv = MacConvention::One);

}  // namespace punet
