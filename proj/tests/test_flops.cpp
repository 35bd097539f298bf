#include <sstream>

#include "doctest.h"
#include "punet/flops.hpp"

using namespace punet;

TEST_CASE("enlsa cost cells") {
    auto r = enlsa_cost(64, 224, 224, 256);
    CHECK(r.projection_flops == 616562688);
    CHECK(r.params == 12288);
    CHECK(r.bias_params == 192);
    CHECK(format_giga(r.projection_flops) == "0.62G");
    CHECK(format_mega(r.params) == "0.01M");
    r = enlsa_cost(256, 56, 56, 256);
    CHECK(r.params == 196608);
    CHECK(format_mega(r.params) == "0.20M");
    CHECK(format_giga(r.projection_flops) == "0.62G");
    r = enlsa_cost(1024, 14, 14, 256);
    CHECK(r.params == 3145728);
    CHECK(format_mega(r.params) == "3.15M");
    CHECK(r.feature_map_flops == 2 * 256 * 1024 * 196);
    CHECK(r.attention_flops == 2 * 256 * 1024 * 196);
    const auto two = enlsa_cost(1024, 14, 14, 256, MacConvention::Two);
    CHECK(two.projection_flops == 2 * r.projection_flops);
    CHECK(two.params == r.params);
    CHECK_THROWS_AS(enlsa_cost(0, 1, 1, 1), std::invalid_argument);
}

TEST_CASE("every published enlsa cell is reproduced") {
    const auto lines = check_enlsa_reference();
    CHECK(lines.size() == 2 * enlsa_reference_rows().size());
    for (const auto& l : lines) {
        CAPTURE(l.label);
        CHECK(l.pass);
        CHECK(l.expected == l.actual);
    }
}

TEST_CASE("stage ladder keeps projection flops constant and quadruples params") {
    const auto rows = enlsa_stage_rows(NetConfig{});
    REQUIRE(rows.size() == 5);
    for (std::size_t i = 1; i < rows.size(); ++i) {
        CHECK(rows[i].cost.projection_flops == rows[0].cost.projection_flops);
        CHECK(rows[i].cost.params == 4 * rows[i - 1].cost.params);
    }
}

TEST_CASE("exact attention cost") {
    auto r = exact_attention_cost(7, 1, 1);
    CHECK(r.attention_flops == 2 * 7);
    r = exact_attention_cost(16, 8, 8);
    CHECK(r.attention_flops == 131072);
    CHECK(r.projection_flops == 49152);
    CHECK(r.attention_flops + r.projection_flops == 131072 + 49152);
    double last = 0;
    for (std::int64_t s : {4, 8, 16, 32, 64}) {
        const double ratio = double(exact_attention_cost(32, s, s).attention_flops) /
                             double(enlsa_cost(32, s, s, 64).attention_flops);
        CHECK(ratio > last);
        last = ratio;
    }
}

TEST_CASE("zero-stage network costs nothing") {
    NetConfig cfg;
    cfg.stage_channels.clear();
    cfg.dilation_rates.clear();
    const auto rows = net_cost(cfg);
    CHECK(rows.empty());
    CHECK(sum_rows(rows) == CostReport{});
}

TEST_CASE("toy network totals are additive and match the parameter count") {
    const NetConfig cfg = preset_config("toy");
    const auto rows = net_cost(cfg);
    CostReport manual;
    for (const auto& r : rows) {
        manual.projection_flops += r.cost.projection_flops;
        manual.attention_flops += r.cost.attention_flops;
        manual.feature_map_flops += r.cost.feature_map_flops;
        manual.other_flops += r.cost.other_flops;
        manual.params += r.cost.params;
        manual.bias_params += r.cost.bias_params;
    }
    CHECK(sum_rows(rows) == manual);

    // Per-op queries for the first encoder block.
    const Index c0 = cfg.stage_channels[0];
    CostReport enc0;
    for (int path = 0; path < 2; ++path) {
        enc0 += conv_cost(cfg.in_channels, c0, 3, 64, 64);
        enc0 += norm_cost(c0, c0 * 64 * 64);
        enc0 += conv_cost(c0, c0, 3, 64, 64);
        enc0 += norm_cost(c0, c0 * 64 * 64);
    }
    enc0 += conv_cost(2 * c0, c0, 1, 64, 64);
    enc0 += conv_cost(cfg.in_channels, c0, 1, 64, 64);
    CHECK(rows[0].module == "encoder.0");
    CHECK(rows[0].cost == enc0);

    auto net = make_net<float>(cfg);
    const auto total = sum_rows(rows);
    CHECK(total.params + total.bias_params == count_params<float>(net));
}

TEST_CASE("full network has identical enlsa projections at stages 3 to 5") {
    const auto rows = net_cost(NetConfig{});
    std::vector<std::int64_t> proj;
    for (const auto& r : rows)
        if (r.module.rfind("enltb.", 0) == 0) proj.push_back(r.cost.projection_flops);
    REQUIRE(proj.size() == 3);
    CHECK(proj[0] == 616562688);
    CHECK(proj[1] == proj[0]);
    CHECK(proj[2] == proj[0]);
}

TEST_CASE("cost csv layout") {
    std::ostringstream os;
    write_cost_csv(os, enlsa_stage_rows(NetConfig{}));
    const std::string s = os.str();
    CHECK(s.rfind("module,input_size,flops,params", 0) == 0);
    CHECK(s.find("ENLSA-64,[1 64 224 224],616562688,12288,0.62G,0.01M") != std::string::npos);
    CHECK(format_giga(994999999) == "0.99G");
    CHECK(format_giga(995000000) == "1.00G");
    CHECK(format_mega(0) == "0.00M");
}
