// punet: command-line entry point. Exit codes: 0 success, 1 verification or
// run failure, 2 usage error.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "punet/dataio.hpp"
#include "punet/enlsa.hpp"
#include "punet/flops.hpp"
#include "punet/net.hpp"
#include "punet/verify.hpp"

namespace fs = std::filesystem;
using namespace punet;

namespace {

constexpr int kOk = 0;
constexpr int kFailed = 1;
constexpr int kUsage = 2;

class UsageError : public std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string quote(const std::string& s) {
    if (!s.empty() && s.find_first_not_of("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789-_./=,:+") ==
                          std::string::npos) {
        return s;
    }
    std::string out = "'";
    for (char c : s) out += c == '\'' ? std::string("'\\''") : std::string(1, c);
    return out + "'";
}

std::string command_line(int argc, char** argv) {
    std::string out;
    for (int i = 0; i < argc; ++i) {
        if (i) out += ' ';
        out += quote(argv[i]);
    }
    return out;
}

void make_out_dir(const fs::path& dir, const std::string& cmd) {
    fs::create_directories(dir);
    std::ofstream(dir / "command.txt") << cmd << "\n";
}

/// Preset name, or a key=value file.
NetConfig resolve_config(const std::string& spec) {
    for (const char* p : {"default", "full", "toy", "micro"}) {
        if (spec == p) return preset_config(spec);
    }
    if (!fs::exists(spec)) throw UsageError("config file not found: " + spec);
    return config_load(spec);
}

template <typename F>
void write_to(const std::string& path, F&& f) {
    if (path.empty() || path == "-") {
        f(std::cout);
        return;
    }
    std::ofstream out(path);
    if (!out) throw UsageError("cannot write " + path);
    f(out);
}

std::vector<SegSample> load_dataset(const fs::path& dir, const NetConfig& cfg) {
    if (!fs::is_directory(dir)) throw UsageError("data directory not found: " + dir.string());
    std::vector<fs::path> images;
    for (const auto& e : fs::directory_iterator(dir)) {
        const auto name = e.path().filename().string();
        if (name.rfind("image_", 0) == 0 && e.path().extension() == ".pgm") images.push_back(e.path());
    }
    std::sort(images.begin(), images.end());
    if (images.empty()) throw UsageError("no image_*.pgm files in " + dir.string());
    std::vector<SegSample> out;
    for (const auto& img : images) {
        auto mask_path = img.parent_path() / ("mask_" + img.filename().string().substr(6));
        if (!fs::exists(mask_path)) throw UsageError("missing mask for " + img.string());
        SegSample s;
        s.image = gray_to_image(pgm_read(img), cfg.in_channels);
        s.mask = gray_to_mask(pgm_read(mask_path));
        s.num_classes = cfg.num_classes;
        for (auto v : s.mask.data) {
            if (v >= cfg.num_classes) {
                throw UsageError(mask_path.string() + ": label " + std::to_string(v) + " outside config classes");
            }
        }
        out.push_back(std::move(s));
    }
    return out;
}

NetParams<float> load_model(const std::string& checkpoint, const std::string& config) {
    std::string cfg_path = config;
    if (cfg_path.empty()) {
        const fs::path guess = fs::path(checkpoint).parent_path() / "config.txt";
        if (!fs::exists(guess)) throw UsageError("no --config given and " + guess.string() + " does not exist");
        cfg_path = guess.string();
    }
    if (!fs::exists(checkpoint)) throw UsageError("checkpoint not found: " + checkpoint);
    auto net = make_net<float>(resolve_config(cfg_path));
    load_net_state(net, load_checkpoint(checkpoint));
    return net;
}

Tensor<float> load_image(const std::string& path, const NetConfig& cfg) {
    if (!fs::exists(path)) throw UsageError("image not found: " + path);
    const GrayImage g = pgm_read(path);
    if (g.h != cfg.input_h || g.w != cfg.input_w) {
        throw UsageError(path + ": image is " + std::to_string(g.w) + "x" + std::to_string(g.h) + ", config expects " +
                         std::to_string(cfg.input_w) + "x" + std::to_string(cfg.input_h));
    }
    return gray_to_image(g, cfg.in_channels);
}

void write_heat_maps(const fs::path& dir, const InferResult& r) {
    for (std::size_t i = 0; i < r.heat_maps.size(); ++i) {
        GrayImage g{r.heat_dims[i].first, r.heat_dims[i].second, r.heat_maps[i]};
        pgm_write(dir / ("heat_stage" + std::to_string(i + NetConfig::kFirstAttentionStage + 1) + ".pgm"), g);
    }
}

}  // namespace

int main(int argc, char** argv) {
    const std::string cmd = command_line(argc, argv);
    CLI::App app{"punet: efficient non-local segmentation network toolkit"};
    app.require_subcommand(1);

    // bench-attn
    auto* bench = app.add_subcommand("bench-attn", "Time linear vs exact attention over token counts");
    ScalingOptions so;
    std::string bench_out;
    bench->add_option("--c", so.c, "Token width")->check(CLI::PositiveNumber);
    bench->add_option("--m", so.m, "Random features")->check(CLI::PositiveNumber);
    bench->add_option("--n-list", so.n_list, "Token counts")->delimiter(',')->check(CLI::PositiveNumber);
    bench->add_option("--repeats", so.repeats, "Timed repeats per size")->check(CLI::PositiveNumber);
    bench->add_option("--seed", so.seed, "Seed");
    bench->add_option("--out", bench_out, "CSV path (stdout if omitted)");

    // verify
    auto* verify = app.add_subcommand("verify", "Run invariant suites");
    std::string suite = "all";
    std::uint64_t verify_seed = 42;
    std::string verify_out;
    std::vector<std::string> suites = verify_suites();
    suites.push_back("all");
    verify->add_option("--suite", suite, "Suite")->check(CLI::IsMember(suites));
    verify->add_option("--seed", verify_seed, "Seed");
    verify->add_option("--out", verify_out, "Also write the report here");

    // flops
    auto* flops = app.add_subcommand("flops", "Analytic FLOP and parameter audit");
    std::string flops_config = "default";
    std::string flops_out;
    bool flops_check = false;
    int mac = 1;
    flops->add_option("--config", flops_config, "Preset name or config file");
    flops->add_option("--out", flops_out, "CSV path (stdout if omitted)");
    flops->add_option("--mac", mac, "FLOPs per multiply-accumulate")->check(CLI::IsMember({1, 2}));
    flops->add_flag("--check", flops_check, "Compare ENLSA cells with the published reference");

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "Write synthetic image/mask PGM pairs");
    SyntheticSpec spec;
    Index gen_count = 16, gen_size = 64;
    std::string gen_out = "data";
    gen->add_option("--count", gen_count, "Number of pairs")->check(CLI::NonNegativeNumber);
    gen->add_option("--size", gen_size, "Image side")->check(CLI::Range(4, 4096));
    gen->add_option("--classes", spec.num_classes, "Classes including background")->check(CLI::Range(2, 255));
    gen->add_option("--seed", spec.seed, "Seed");
    gen->add_option("--noise", spec.noise_sd, "Noise standard deviation")->check(CLI::NonNegativeNumber);
    gen->add_option("--min-shapes", spec.min_shapes, "Fewest ellipses")->check(CLI::PositiveNumber);
    gen->add_option("--max-shapes", spec.max_shapes, "Most ellipses")->check(CLI::PositiveNumber);
    gen->add_option("--out", gen_out, "Output directory");

    // train
    auto* trn = app.add_subcommand("train", "Train on a PGM dataset directory");
    std::string train_config = "toy", train_data, train_out = "run";
    TrainOptions to;
    trn->add_option("--config", train_config, "Preset name or config file");
    trn->add_option("--data", train_data, "Directory from gen-data")->required();
    trn->add_option("--out", train_out, "Output directory");
    trn->add_option("--epochs", to.epochs, "Epochs")->check(CLI::NonNegativeNumber);
    trn->add_option("--lr", to.lr, "Learning rate")->check(CLI::NonNegativeNumber);
    trn->add_option("--momentum", to.momentum, "Momentum")->check(CLI::Range(0.0, 1.0));
    trn->add_option("--weight-decay", to.weight_decay, "L2 weight decay")->check(CLI::NonNegativeNumber);
    trn->add_option("--batch", to.batch, "Batch size")->check(CLI::PositiveNumber);
    trn->add_option("--seed", to.seed, "Shuffle and augmentation seed");
    trn->add_flag("--augment", to.augment, "Random flips and Gaussian noise");
    trn->add_option("--threads", to.threads, "Workers (default PUNT_THREADS or 1)")->check(CLI::NonNegativeNumber);

    // infer
    auto* inf = app.add_subcommand("infer", "Predict a mask for one PGM image");
    std::string inf_ckpt, inf_config, inf_image, inf_out = "infer";
    bool inf_heat = false;
    inf->add_option("--checkpoint", inf_ckpt, "Checkpoint file")->required();
    inf->add_option("--config", inf_config, "Preset or config file (default: config.txt beside the checkpoint)");
    inf->add_option("--image", inf_image, "Input PGM")->required();
    inf->add_option("--out", inf_out, "Output directory");
    inf->add_flag("--heatmaps", inf_heat, "Also write one heat map per attention stage");

    // heatmap
    auto* heat = app.add_subcommand("heatmap", "Write per-stage attention heat maps for one image");
    std::string heat_ckpt, heat_config, heat_image, heat_out = "heatmaps";
    heat->add_option("--checkpoint", heat_ckpt, "Checkpoint file")->required();
    heat->add_option("--config", heat_config, "Preset or config file (default: config.txt beside the checkpoint)");
    heat->add_option("--image", heat_image, "Input PGM")->required();
    heat->add_option("--out", heat_out, "Output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kUsage;
    }

    try {
        if (*bench) {
            const auto rows = scaling_benchmark(so);
            write_to(bench_out, [&](std::ostream& os) { write_scaling_csv(os, rows); });
            return kOk;
        }
        if (*verify) {
            const VerifyReport r = run_verify(suite, verify_seed);
            std::cout << r.text();
            if (!verify_out.empty()) write_to(verify_out, [&](std::ostream& os) { os << r.text(); });
            return r.failures() == 0 ? kOk : kFailed;
        }
        if (*flops) {
            const NetConfig cfg = resolve_config(flops_config);
            const auto conv = mac == 2 ? MacConvention::Two : MacConvention::One;
            const auto rows = net_cost(cfg, conv);
            write_to(flops_out, [&](std::ostream& os) { write_cost_csv(os, rows); });
            const auto total = sum_rows(rows);
            std::ostream& info = flops_out.empty() ? std::cerr : std::cout;
            info << "total: " << format_giga(total.headline_flops()) << " FLOPs (linear layers), "
                 << format_giga(total.total_flops()) << " FLOPs (all terms), " << format_mega(total.params)
                 << " params\n";
            info << "ENLSA per stage (mac=" << mac << "):\n";
            for (const auto& r : enlsa_stage_rows(cfg, conv)) {
                info << "  " << r.module << " " << r.input.str() << "  " << format_giga(r.cost.projection_flops)
                     << "  " << format_mega(r.cost.params) << "\n";
            }
            if (!flops_check) return kOk;
            const NetConfig ref;
            if (cfg.stage_channels != ref.stage_channels || cfg.input_h != 224 || cfg.input_w != 224) {
                info << "check skipped: no reference row for this config\n";
                return kOk;
            }
            int failed = 0;
            for (const auto& c : check_enlsa_reference()) {
                info << (c.pass ? "PASS " : "FAIL ") << c.label << " expected=" << c.expected << " actual=" << c.actual
                     << "\n";
                failed += !c.pass;
            }
            return failed == 0 ? kOk : kFailed;
        }
        if (*gen) {
            spec.height = spec.width = gen_size;
            if (spec.max_shapes < spec.min_shapes) throw UsageError("--max-shapes is below --min-shapes");
            make_out_dir(gen_out, cmd);
            for (Index i = 0; i < gen_count; ++i) {
                const auto scene = gen_scene(spec, i);
                char stem[32];
                std::snprintf(stem, sizeof stem, "%03lld.pgm", static_cast<long long>(i));
                pgm_write(fs::path(gen_out) / ("image_" + std::string(stem)), image_to_gray(scene.sample.image));
                pgm_write(fs::path(gen_out) / ("mask_" + std::string(stem)), mask_to_gray(scene.sample.mask));
            }
            std::cout << "wrote " << 2 * gen_count << " PGM files to " << gen_out << "\n";
            return kOk;
        }
        if (*trn) {
            NetConfig cfg = resolve_config(train_config);
            const auto data = load_dataset(train_data, cfg);
            make_out_dir(train_out, cmd);
            std::ofstream(fs::path(train_out) / "config.txt") << config_serialize(cfg);
            auto net = make_net<float>(cfg);
            std::ofstream metrics(fs::path(train_out) / "metrics.csv");
            const TrainResult res = train(net, data, to, [&](const EpochMetrics& e) {
                std::fprintf(stdout, "epoch %d loss %.6f train_dice %.4f\n", e.epoch, e.loss, e.train_dice);
                std::fflush(stdout);
            });
            write_history_csv(metrics, res.history);
            save_checkpoint(fs::path(train_out) / "model.punt", net_state(net));
            if (res.diverged) {
                std::cerr << "training stopped: " << res.message << "\n";
                return kFailed;
            }
            return kOk;
        }
        if (*inf) {
            auto net = load_model(inf_ckpt, inf_config);
            const auto r = infer(net, load_image(inf_image, net.cfg));
            make_out_dir(inf_out, cmd);
            pgm_write(fs::path(inf_out) / "mask.pgm", mask_to_gray(r.mask));
            if (inf_heat) write_heat_maps(inf_out, r);
            return kOk;
        }
        if (*heat) {
            auto net = load_model(heat_ckpt, heat_config);
            const auto r = infer(net, load_image(heat_image, net.cfg));
            make_out_dir(heat_out, cmd);
            write_heat_maps(heat_out, r);
            std::cout << "wrote " << r.heat_maps.size() << " heat maps to " << heat_out << "\n";
            return kOk;
        }
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const FormatError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kFailed;
    }
    return kUsage;
}
