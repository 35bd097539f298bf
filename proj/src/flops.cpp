#include "punet/flops.hpp"

#include <cstdio>
#include <ostream>
#include <stdexcept>

namespace punet {

CostReport& CostReport::operator+=(const CostReport& o) {
    if (o.convention != convention) {
        throw std::invalid_argument("CostReport: mixing MAC conventions");
    }
    projection_flops += o.projection_flops;
    attention_flops += o.attention_flops;
    feature_map_flops += o.feature_map_flops;
    other_flops += o.other_flops;
    params += o.params;
    bias_params += o.bias_params;
    return *this;
}

namespace {

std::int64_t mac(MacConvention c) { return static_cast<std::int64_t>(c); }

void require_positive(const char* op, std::initializer_list<std::int64_t> v) {
    for (auto x : v) {
        if (x < 1) throw std::invalid_argument(std::string(op) + ": arguments must be positive");
    }
}

}  // namespace

CostReport enlsa_cost(std::int64_t c, std::int64_t h, std::int64_t w, std::int64_t m,
                      MacConvention conv) {
    require_positive("enlsa_cost", {c, h, w, m});
    const std::int64_t n = h * w;
    CostReport r;
    r.convention = conv;
    r.projection_flops = mac(conv) * 3 * c * c * n;
    r.feature_map_flops = mac(conv) * 2 * m * c * n;
    r.attention_flops = mac(conv) * 2 * m * c * n;
    r.params = 3 * c * c;
    r.bias_params = 3 * c;
    return r;
}

CostReport exact_attention_cost(std::int64_t c, std::int64_t h, std::int64_t w, MacConvention conv) {
    require_positive("exact_attention_cost", {c, h, w});
    const std::int64_t n = h * w;
    CostReport r;
    r.convention = conv;
    r.projection_flops = mac(conv) * 3 * c * c * n;
    r.attention_flops = mac(conv) * 2 * n * n * c;
    r.params = 3 * c * c;
    r.bias_params = 3 * c;
    return r;
}

CostReport conv_cost(std::int64_t c_in, std::int64_t c_out, std::int64_t k, std::int64_t h_out,
                     std::int64_t w_out, MacConvention conv) {
    CostReport r;
    r.convention = conv;
    r.other_flops = mac(conv) * c_out * h_out * w_out * c_in * k * k;
    r.params = c_out * c_in * k * k;
    r.bias_params = c_out;
    return r;
}

CostReport norm_cost(std::int64_t c, std::int64_t elements) {
    CostReport r;
    r.other_flops = 2 * elements;
    r.params = 2 * c;
    return r;
}

CostReport linear_cost(std::int64_t in, std::int64_t out, std::int64_t rows, MacConvention conv) {
    CostReport r;
    r.convention = conv;
    r.other_flops = mac(conv) * in * out * rows;
    r.params = in * out;
    r.bias_params = out;
    return r;
}

namespace {

CostReport zero(MacConvention conv) {
    CostReport r;
    r.convention = conv;
    return r;
}

CostReport norm_cost_conv(std::int64_t c, std::int64_t elements, MacConvention conv) {
    CostReport r = norm_cost(c, elements);
    r.convention = conv;
    return r;
}

}  // namespace

std::vector<CostRow> net_cost(const NetConfig& cfg, MacConvention conv) {
    std::vector<CostRow> rows;
    const Index L = cfg.num_stages();
    if (L == 0) return rows;
    cfg.validate();
    std::vector<Index> hs(static_cast<std::size_t>(L)), ws(static_cast<std::size_t>(L));
    for (Index i = 0; i < L; ++i) {
        hs[i] = cfg.input_h >> i;
        ws[i] = cfg.input_w >> i;
    }
    const auto& ch = cfg.stage_channels;
    for (Index i = 0; i < L; ++i) {
        const Index c_in = i == 0 ? cfg.in_channels : ch[i - 1];
        const Index c = ch[i];
        const Index px = hs[i] * ws[i];
        CostReport r = zero(conv);
        const int paths = cfg.use_bprb_global_path ? 2 : 1;
        for (int p = 0; p < paths; ++p) {
            r += conv_cost(c_in, c, 3, hs[i], ws[i], conv);
            r += norm_cost_conv(c, c * px, conv);
            r += conv_cost(c, c, 3, hs[i], ws[i], conv);
            r += norm_cost_conv(c, c * px, conv);
        }
        if (cfg.use_bprb_global_path) r += conv_cost(2 * c, c, 1, hs[i], ws[i], conv);
        if (cfg.bprb_residual) r += conv_cost(c_in, c, 1, hs[i], ws[i], conv);
        const Index in_h = i == 0 ? cfg.input_h : hs[i - 1];
        const Index in_w = i == 0 ? cfg.input_w : ws[i - 1];
        rows.push_back({"encoder." + std::to_string(i), Shape{1, c_in, in_h, in_w}, r});
    }
    std::vector<Index> attn;
    for (Index i = NetConfig::kFirstAttentionStage; i < L; ++i) attn.push_back(i);
    if (cfg.use_enltb) {
        for (Index i : attn) {
            const Index c = ch[i];
            const Index n = hs[i] * ws[i];
            CostReport r = zero(conv);
            if (i > NetConfig::kFirstAttentionStage) {
                r += conv_cost(4 * ch[i - 1], c, 1, hs[i], ws[i], conv);
                r += conv_cost(2 * c, c, 1, hs[i], ws[i], conv);
            }
            r += norm_cost_conv(c, c * n, conv);
            r += enlsa_cost(c, hs[i], ws[i], cfg.m, conv);
            r += norm_cost_conv(c, c * n, conv);
            r += linear_cost(c, 4 * c, n, conv);
            r += linear_cost(4 * c, c, n, conv);
            rows.push_back({"enltb." + std::to_string(i + 1), Shape{1, c, hs[i], ws[i]}, r});
        }
    }
    if (cfg.use_scsi && !attn.empty()) {
        const Index d = cfg.scsi_d_model;
        Index n = 0;
        CostReport r = zero(conv);
        for (Index i : attn) {
            n += hs[i] * ws[i];
            r += conv_cost(ch[i], d, 1, hs[i], ws[i], conv);
            r += conv_cost(d, ch[i], 1, hs[i], ws[i], conv);
        }
        for (int l = 0; l < cfg.scsi_depth; ++l) {
            r += norm_cost_conv(d, d * n, conv);
            if (cfg.scsi_attention == ScsiAttention::Exact) {
                r += exact_attention_cost(d, n, 1, conv);
            } else {
                r += enlsa_cost(d, n, 1, cfg.m, conv);
            }
            r += linear_cost(d, d, n, conv);
            r += norm_cost_conv(d, d * n, conv);
            r += linear_cost(d, 4 * d, n, conv);
            r += linear_cost(4 * d, d, n, conv);
        }
        rows.push_back({"scsi", Shape{1, d, n, 1}, r});
    }
    for (Index i = L - 2; i >= 0; --i) {
        const Index c = ch[i];
        const Index px = hs[i] * ws[i];
        CostReport r = zero(conv);
        r += conv_cost(c + ch[i + 1], c, 3, hs[i], ws[i], conv);
        r += norm_cost_conv(c, c * px, conv);
        r += conv_cost(c, c, 3, hs[i], ws[i], conv);
        r += norm_cost_conv(c, c * px, conv);
        rows.push_back({"decoder." + std::to_string(i), Shape{1, ch[i + 1], hs[i + 1], ws[i + 1]}, r});
    }
    rows.push_back({"head", Shape{1, ch[0], cfg.input_h, cfg.input_w},
                    conv_cost(ch[0], cfg.num_classes, 1, cfg.input_h, cfg.input_w, conv)});
    return rows;
}

CostReport sum_rows(const std::vector<CostRow>& rows) {
    CostReport r;
    if (!rows.empty()) r.convention = rows.front().cost.convention;
    for (const auto& row : rows) r += row.cost;
    return r;
}

namespace {

std::string format_scaled(std::int64_t v, std::int64_t unit) {
    const std::int64_t hundredth = unit / 100;
    const std::int64_t q = (v + hundredth / 2) / hundredth;
    char buf[64];
    std::snprintf(buf, sizeof buf, "%lld.%02lld", static_cast<long long>(q / 100),
                  static_cast<long long>(q % 100));
    return buf;
}

}  // namespace

std::string format_giga(std::int64_t v) { return format_scaled(v, 1000000000) + "G"; }
std::string format_mega(std::int64_t v) { return format_scaled(v, 1000000) + "M"; }

void write_cost_csv(std::ostream& os, const std::vector<CostRow>& rows) {
    os << "module,input_size,flops,params,flops_display,params_display,projection_flops,"
          "feature_map_flops,attention_flops,other_flops,total_flops,bias_params,convention\n";
    for (const auto& r : rows) {
        const auto& c = r.cost;
        os << r.module << ",[" << r.input.n << " " << r.input.c << " " << r.input.h << " "
           << r.input.w << "]," << c.headline_flops() << ',' << c.params << ','
           << format_giga(c.headline_flops()) << ',' << format_mega(c.params) << ','
           << c.projection_flops << ',' << c.feature_map_flops << ',' << c.attention_flops << ','
           << c.other_flops << ',' << c.total_flops() << ',' << c.bias_params << ",mac=" << static_cast<int>(c.convention)
           << '\n';
    }
}

const std::vector<ReferenceRow>& enlsa_reference_rows() {
    static const std::vector<ReferenceRow> rows{
        {"ENLSA-64", 64, 224, "0.62G", "0.01M"},    {"ENLSA-128", 128, 112, "0.62G", "0.05M"},
        {"ENLSA-256", 256, 56, "0.62G", "0.20M"},   {"ENLSA-512", 512, 28, "0.62G", "0.79M"},
        {"ENLSA-1024", 1024, 14, "0.62G", "3.15M"}, {"ENLSA-256", 256, 224, "9.87G", "0.20M"},
    };
    return rows;
}

const std::vector<ReferenceRow>& nlsa_reference_rows() {
    static const std::vector<ReferenceRow> rows{
        {"NLSA-64", 64, 224, "2.06G", "0.04M"},    {"NLSA-128", 128, 112, "2.06G", "0.16M"},
        {"NLSA-256", 256, 56, "2.06G", "0.66M"},   {"NLSA-512", 512, 28, "2.06G", "2.62M"},
        {"NLSA-1024", 1024, 14, "2.06G", "10.49M"}, {"NLSA-256", 256, 224, "32.88G", "0.66M"},
    };
    return rows;
}

std::vector<CheckLine> check_enlsa_reference() {
    std::vector<CheckLine> out;
    for (const auto& ref : enlsa_reference_rows()) {
        // m does not enter the headline projection count.
        const CostReport r = enlsa_cost(ref.c, ref.size, ref.size, 1, MacConvention::One);
        const std::string where = ref.module + " [1, " + std::to_string(ref.c) + ", " +
                                  std::to_string(ref.size) + ", " + std::to_string(ref.size) + "]";
        const std::string f = format_giga(r.projection_flops);
        const std::string p = format_mega(r.params);
        out.push_back({where + " flops", ref.flops, f, f == ref.flops});
        out.push_back({where + " params", ref.params, p, p == ref.params});
    }
    return out;
}

std::vector<CostRow> enlsa_stage_rows(const NetConfig& cfg, MacConvention conv) {
    std::vector<CostRow> rows;
    for (Index i = 0; i < cfg.num_stages(); ++i) {
        const Index c = cfg.stage_channels[i];
        const Index h = cfg.input_h >> i;
        const Index w = cfg.input_w >> i;
        CostReport r = enlsa_cost(c, h, w, cfg.m, conv);
        // Headline layout: projections only; the m-dependent terms stay in
        // their own columns.
        rows.push_back({"ENLSA-" + std::to_string(c), Shape{1, c, h, w}, r});
    }
    return rows;
}

}  // namespace punet
