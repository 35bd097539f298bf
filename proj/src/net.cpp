#include "punet/net.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ostream>
#include <stdexcept>
#include <thread>

namespace punet {

void NetConfig::validate() const {
    auto fail = [](const std::string& what) {
        throw std::invalid_argument("config: " + what);
    };
    if (in_channels < 1) fail("in_channels must be >= 1");
    if (num_classes < 1) fail("num_classes must be >= 1");
    if (stage_channels.empty()) fail("stage_channels is empty");
    for (std::size_t i = 0; i < stage_channels.size(); ++i) {
        if (stage_channels[i] < 1) {
            fail("stage_channels[" + std::to_string(i) + "] must be >= 1");
        }
    }
    if (dilation_rates.size() != stage_channels.size()) {
        fail("dilation_rates has " + std::to_string(dilation_rates.size()) +
             " entries, stage_channels has " + std::to_string(stage_channels.size()));
    }
    for (int d : dilation_rates) {
        if (d < 1) fail("dilation rates must be >= 1");
    }
    const Index factor = Index(1) << (num_stages() - 1);
    if (input_h < 1 || input_w < 1 || input_h % factor != 0 || input_w % factor != 0) {
        fail("input size " + std::to_string(input_h) + "x" + std::to_string(input_w) +
             " must be positive and divisible by " + std::to_string(factor));
    }
    if (m < 1) fail("m must be >= 1");
    if (scsi_d_model < 1 || scsi_depth < 0 || scsi_heads < 1) fail("invalid scsi settings");
    if (scsi_attention == ScsiAttention::Exact && scsi_d_model % scsi_heads != 0) {
        fail("scsi_d_model must be divisible by scsi_heads");
    }
    if (!(bn_eps > 0)) fail("bn_eps must be positive");
}

NetConfig preset_config(const std::string& name) {
    NetConfig c;
    if (name == "default" || name == "full") {
        return c;
    }
    if (name == "toy") {
        c.in_channels = 1;
        c.stage_channels = {8, 16, 32, 64, 128};
        c.input_h = c.input_w = 64;
        c.num_classes = 3;
        c.m = 64;
        c.scsi_d_model = 32;
        c.scsi_heads = 4;
        return c;
    }
    if (name == "micro") {
        c.in_channels = 1;
        c.stage_channels = {4, 8, 16, 32, 64};
        c.input_h = c.input_w = 16;
        c.num_classes = 3;
        c.m = 8;
        c.scsi_d_model = 8;
        c.scsi_heads = 2;
        return c;
    }
    throw std::invalid_argument("unknown preset '" + name + "' (expected default, toy, micro)");
}

namespace {

bool has_attention_stages(const NetConfig& c) {
    return c.num_stages() > NetConfig::kFirstAttentionStage;
}

}  // namespace

template <typename T>
NetParams<T> make_net(const NetConfig& cfg) {
    cfg.validate();
    NetParams<T> p;
    p.cfg = cfg;
    Rng root(cfg.seed);
    const Index L = cfg.num_stages();
    for (Index i = 0; i < L; ++i) {
        BprbConfig bc;
        bc.c_in = i == 0 ? cfg.in_channels : cfg.stage_channels[i - 1];
        bc.c_out = cfg.stage_channels[i];
        bc.stride = i == 0 ? 1 : 2;
        bc.dilation = cfg.dilation_rates[i];
        bc.use_global = cfg.use_bprb_global_path;
        bc.residual = cfg.bprb_residual;
        Rng r = root.fork(100 + static_cast<std::uint64_t>(i));
        p.encoder.push_back(make_bprb<T>(bc, r));
    }
    std::vector<Index> attn_channels;
    for (Index i = NetConfig::kFirstAttentionStage; i < L; ++i) {
        attn_channels.push_back(cfg.stage_channels[i]);
    }
    if (cfg.use_enltb) {
        for (Index i = NetConfig::kFirstAttentionStage; i < L; ++i) {
            EnltbConfig ec;
            ec.c = cfg.stage_channels[i];
            ec.c_prev = i > NetConfig::kFirstAttentionStage ? cfg.stage_channels[i - 1] : 0;
            ec.attn.m = cfg.m;
            ec.attn.scale = cfg.enlsa_scale;
            ec.attn.normalize = cfg.enlsa_normalize;
            Rng r = root.fork(200 + static_cast<std::uint64_t>(i));
            p.enltb.push_back(make_enltb<T>(ec, r));
        }
    }
    if (cfg.use_scsi && has_attention_stages(cfg)) {
        ScsiConfig sc;
        sc.channels = attn_channels;
        sc.d_model = cfg.scsi_d_model;
        sc.depth = cfg.scsi_depth;
        sc.heads = cfg.scsi_heads;
        sc.attention = cfg.scsi_attention;
        sc.m = cfg.m;
        Rng r = root.fork(300);
        p.scsi = make_scsi<T>(sc, r);
    }
    for (Index i = 0; i + 1 < L; ++i) {
        Rng r = root.fork(400 + static_cast<std::uint64_t>(i));
        DecoderStage<T> d;
        const Index c = cfg.stage_channels[i];
        d.conv1 = make_conv<T>(r, c + cfg.stage_channels[i + 1], c, 3);
        d.conv2 = make_conv<T>(r, c, c, 3);
        d.bn1 = make_batch_norm<T>(c);
        d.bn2 = make_batch_norm<T>(c);
        p.decoder.push_back(std::move(d));
    }
    Rng hr = root.fork(500);
    p.head = make_conv<T>(hr, cfg.stage_channels[0], cfg.num_classes, 1);
    return p;
}

template <typename T>
Var<T> net_forward(const Var<T>& x, NetParams<T>& p, const ForwardOptions& opt,
                   NetTrace<T>* trace) {
    const NetConfig& cfg = p.cfg;
    const Shape& xs = x.shape();
    if (xs.c != cfg.in_channels) throw ShapeError("net_forward", "input channel", cfg.in_channels, xs.c);
    if (xs.h != cfg.input_h) throw ShapeError("net_forward", "input height", cfg.input_h, xs.h);
    if (xs.w != cfg.input_w) throw ShapeError("net_forward", "input width", cfg.input_w, xs.w);
    const BnOptions bn{opt.training, cfg.bn_momentum, cfg.bn_eps};
    const Index L = cfg.num_stages();

    std::vector<Var<T>> enc;
    enc.reserve(static_cast<std::size_t>(L));
    for (Index i = 0; i < L; ++i) {
        const Var<T>& in = i == 0 ? x : enc.back();
        enc.push_back(bprb_forward(in, p.encoder[i], bn));
        if (trace) trace->bprb.push_back({i + 1, in.shape(), enc.back().shape()});
    }

    // Maps feeding the integrator / decoder skips for attention stages.
    std::vector<Var<T>> deep;
    for (Index i = NetConfig::kFirstAttentionStage; i < L; ++i) {
        if (p.enltb.empty()) {
            deep.push_back(enc[i]);
            continue;
        }
        const auto j = static_cast<std::size_t>(i - NetConfig::kFirstAttentionStage);
        const Var<T>* prev = j == 0 ? nullptr : &deep.back();
        Var<T> out = enltb_forward(enc[i], prev, p.enltb[j]);
        if (trace) {
            trace->enltb.push_back({i + 1, enc[i].shape(), out.shape()});
            trace->enltb_outputs.push_back(out.value);
        }
        deep.push_back(std::move(out));
    }
    if (p.scsi) {
        if (trace) {
            for (const auto& d : deep) trace->scsi_tokens += d.shape().h * d.shape().w;
        }
        deep = scsi_forward(deep, *p.scsi);
    }

    auto skip = [&](Index i) -> const Var<T>& {
        return i >= NetConfig::kFirstAttentionStage ? deep[i - NetConfig::kFirstAttentionStage]
                                                    : enc[i];
    };
    Var<T> d = skip(L - 1);
    for (Index i = L - 2; i >= 0; --i) {
        DecoderStage<T>& ds = p.decoder[i];
        Var<T> up = concat_channels(skip(i), bilinear_upsample2x(d));
        d = relu(apply(ds.bn1, apply(ds.conv1, up), bn));
        d = relu(apply(ds.bn2, apply(ds.conv2, d), bn));
    }
    return apply(p.head, d);
}

template <typename T>
Var<T> seg_loss(const Var<T>& logits, const LabelMap& mask, double w_ce, double w_dice) {
    Var<T> ce = scale(cross_entropy(logits, mask), w_ce);
    if (w_dice == 0) {
        return ce;
    }
    Var<T> dice = scale(soft_dice_loss(logits, mask), w_dice);
    return w_ce == 0 ? dice : add(ce, dice);
}

std::vector<TokenSegment> scsi_token_layout(const NetConfig& cfg) {
    std::vector<std::pair<Index, Index>> spatial;
    for (Index i = NetConfig::kFirstAttentionStage; i < cfg.num_stages(); ++i) {
        spatial.emplace_back(cfg.input_h >> i, cfg.input_w >> i);
    }
    return scsi_token_layout(spatial, static_cast<int>(NetConfig::kFirstAttentionStage) + 1);
}

// ------------------------------------------------------------- training

int env_threads() {
    const char* v = std::getenv("PUNT_THREADS");
    if (v == nullptr || *v == '\0') return 1;
    char* end = nullptr;
    const long n = std::strtol(v, &end, 10);
    if (end == v || *end != '\0' || n < 1) return 1;
    return static_cast<int>(std::min<long>(n, 256));
}

namespace {

struct Batch {
    Tensor<float> image;
    LabelMap mask;
};

Batch stack(const std::vector<SegSample>& data, const std::vector<std::size_t>& idx,
            std::size_t begin, std::size_t end, bool augment, double flip_prob, double noise_sd,
            Rng* aug) {
    const Shape s0 = data[idx[begin]].image.shape();
    const Index n = static_cast<Index>(end - begin);
    const Index plane = s0.c * s0.h * s0.w;
    Batch b;
    b.image = Tensor<float>(Shape{n, s0.c, s0.h, s0.w});
    b.mask = LabelMap(n, s0.h, s0.w);
    for (Index k = 0; k < n; ++k) {
        const SegSample& smp = data[idx[begin + static_cast<std::size_t>(k)]];
        if (smp.image.shape() != Shape{1, s0.c, s0.h, s0.w}) {
            throw ShapeError("train", "sample image shape " + smp.image.shape().str() +
                                          " differs from " + s0.str());
        }
        const bool flip = augment && aug->uniform() < flip_prob;
        for (Index c = 0; c < s0.c; ++c) {
            for (Index y = 0; y < s0.h; ++y) {
                for (Index x = 0; x < s0.w; ++x) {
                    const Index sx = flip ? s0.w - 1 - x : x;
                    float v = smp.image(0, c, y, sx);
                    if (augment && noise_sd > 0) {
                        v = static_cast<float>(std::clamp(v + aug->normal(0.0, noise_sd), 0.0, 1.0));
                    }
                    b.image[k * plane + (c * s0.h + y) * s0.w + x] = v;
                }
            }
        }
        for (Index y = 0; y < s0.h; ++y) {
            for (Index x = 0; x < s0.w; ++x) {
                b.mask.at(k, y, x) = smp.mask.at(0, y, flip ? s0.w - 1 - x : x);
            }
        }
    }
    return b;
}

Batch slice_batch(const Batch& b, Index begin, Index end) {
    const Shape s = b.image.shape();
    const Index plane = s.c * s.h * s.w;
    const Index pix = s.h * s.w;
    Batch out;
    out.image = Tensor<float>(Shape{end - begin, s.c, s.h, s.w});
    std::copy_n(b.image.ptr() + begin * plane, (end - begin) * plane, out.image.ptr());
    out.mask = LabelMap(end - begin, s.h, s.w);
    std::copy_n(b.mask.data.begin() + begin * pix, (end - begin) * pix, out.mask.data.begin());
    return out;
}

std::vector<Var<float>*> param_list(NetParams<float>& p) {
    std::vector<Var<float>*> out;
    FnVisitor<float> fv([&](const std::string&, Var<float>& v) { out.push_back(&v); });
    visit(p, std::string(), fv);
    return out;
}

std::vector<Tensor<float>*> buffer_list(NetParams<float>& p) {
    std::vector<Tensor<float>*> out;
    FnVisitor<float> fv({}, [&](const std::string& name, Tensor<float>& t) {
        if (name.find("running_") != std::string::npos) out.push_back(&t);
    });
    visit(p, std::string(), fv);
    return out;
}

struct ShardResult {
    double loss = 0;
    std::vector<Tensor<float>> grads;
    std::string error;
};

// Forward/backward of one shard on `p`, which must not be shared with other
// threads. Gradients follow param_list order.
ShardResult run_shard(NetParams<float>& p, const Batch& b, double weight) {
    ShardResult r;
    try {
        Tape<float> tape;
        track_params<float>(p, tape);
        Var<float> x(b.image);
        Var<float> logits = net_forward(x, p, ForwardOptions{true});
        Var<float> loss = seg_loss(logits, b.mask, p.cfg.loss_w_ce, p.cfg.loss_w_dice);
        r.loss = loss.value[0];
        if (!std::isfinite(r.loss)) {
            r.error = "loss is not finite";
        } else {
            Var<float> weighted = scale(loss, weight);
            Gradients<float> g = backward(tape, weighted);
            for (Var<float>* v : param_list(p)) {
                const Tensor<float>* gt = g.find(*v);
                r.grads.push_back(gt ? *gt : Tensor<float>(v->shape()));
            }
        }
    } catch (const NumericError& e) {
        r.error = std::string("non-finite value at ") + e.stage();
    }
    detach_params<float>(p);
    return r;
}

}  // namespace

LabelMap argmax_labels(const Tensor<float>& logits) {
    const Shape& s = logits.shape();
    LabelMap out(s.n, s.h, s.w);
    for (Index n = 0; n < s.n; ++n) {
        for (Index y = 0; y < s.h; ++y) {
            for (Index x = 0; x < s.w; ++x) {
                std::int32_t best = 0;
                float bv = logits(n, 0, y, x);
                for (Index c = 1; c < s.c; ++c) {
                    const float v = logits(n, c, y, x);
                    if (v > bv) {
                        bv = v;
                        best = static_cast<std::int32_t>(c);
                    }
                }
                out.at(n, y, x) = best;
            }
        }
    }
    return out;
}

double foreground_dice(const LabelMap& pred, const LabelMap& truth, Index num_classes) {
    if (pred.data.size() != truth.data.size()) {
        throw ShapeError("foreground_dice", "mask sizes differ");
    }
    if (num_classes < 2) return 1.0;
    double total = 0;
    for (Index c = 1; c < num_classes; ++c) {
        std::int64_t inter = 0, sp = 0, st = 0;
        for (std::size_t i = 0; i < pred.data.size(); ++i) {
            const bool a = pred.data[i] == c;
            const bool b = truth.data[i] == c;
            inter += a && b;
            sp += a;
            st += b;
        }
        total += sp + st == 0 ? 1.0 : 2.0 * static_cast<double>(inter) / static_cast<double>(sp + st);
    }
    return total / static_cast<double>(num_classes - 1);
}

TrainResult train(NetParams<float>& params, const std::vector<SegSample>& data,
                  const TrainOptions& opt, const std::function<void(const EpochMetrics&)>& on_epoch) {
    if (data.empty()) throw std::invalid_argument("train: dataset is empty");
    if (opt.batch < 1) throw std::invalid_argument("train: batch must be >= 1");
    if (opt.epochs < 0) throw std::invalid_argument("train: epochs must be >= 0");
    for (const auto& s : data) {
        if (s.num_classes > params.cfg.num_classes) {
            throw std::invalid_argument("train: sample has more classes than the network");
        }
    }
    const int threads = opt.threads > 0 ? opt.threads : env_threads();
    const Rng root(opt.seed);
    std::vector<Var<float>*> plist = param_list(params);
    std::vector<Tensor<float>> momentum;
    for (Var<float>* v : plist) momentum.emplace_back(v->shape());

    TrainResult result;
    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    const Index nc = params.cfg.num_classes;

    for (int epoch = 1; epoch <= opt.epochs; ++epoch) {
        const NetParams<float> snapshot = params;
        const std::vector<Tensor<float>> momentum_snapshot = momentum;
        Rng er = root.fork(static_cast<std::uint64_t>(epoch));
        if (opt.shuffle) {
            for (std::size_t i = order.size() - 1; i > 0; --i) {
                const auto j = static_cast<std::size_t>(er.uniform_int(0, static_cast<std::int64_t>(i)));
                std::swap(order[i], order[j]);
            }
        }
        double loss_sum = 0;
        std::string failure;
        for (std::size_t begin = 0; begin < order.size() && failure.empty(); begin += opt.batch) {
            const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(opt.batch));
            const Batch b = stack(data, order, begin, end, opt.augment, opt.flip_prob, opt.noise_sd, &er);
            const Index bn = b.image.n();
            const Index shards = std::min<Index>(threads, bn);
            std::vector<ShardResult> results(static_cast<std::size_t>(shards));
            if (shards == 1) {
                results[0] = run_shard(params, b, 1.0);
            } else {
                std::vector<NetParams<float>> copies(static_cast<std::size_t>(shards), params);
                std::vector<std::thread> pool;
                for (Index s = 0; s < shards; ++s) {
                    const Index lo = bn * s / shards;
                    const Index hi = bn * (s + 1) / shards;
                    pool.emplace_back([&, s, lo, hi] {
                        results[s] = run_shard(copies[s], slice_batch(b, lo, hi),
                                               static_cast<double>(hi - lo) / static_cast<double>(bn));
                    });
                }
                for (auto& t : pool) t.join();
                // Running statistics: average of the shard copies.
                std::vector<Tensor<float>*> dst = buffer_list(params);
                std::vector<std::vector<Tensor<float>*>> src;
                for (auto& c : copies) src.push_back(buffer_list(c));
                for (std::size_t k = 0; k < dst.size(); ++k) {
                    for (Index e = 0; e < dst[k]->numel(); ++e) {
                        double acc = 0;
                        for (auto& sv : src) acc += (*sv[k])[e];
                        (*dst[k])[e] = static_cast<float>(acc / static_cast<double>(shards));
                    }
                }
            }
            double batch_loss = 0;
            for (Index s = 0; s < shards; ++s) {
                const auto& r = results[static_cast<std::size_t>(s)];
                if (!r.error.empty()) {
                    failure = r.error;
                    break;
                }
                const Index lo = bn * s / shards;
                const Index hi = bn * (s + 1) / shards;
                batch_loss += r.loss * static_cast<double>(hi - lo) / static_cast<double>(bn);
            }
            if (!failure.empty()) break;
            loss_sum += batch_loss * static_cast<double>(bn);
            for (std::size_t k = 0; k < plist.size(); ++k) {
                Tensor<float>& p = plist[k]->value;
                Tensor<float>& buf = momentum[k];
                for (Index e = 0; e < p.numel(); ++e) {
                    double g = 0;
                    for (const auto& r : results) g += r.grads[k][e];
                    g += opt.weight_decay * p[e];
                    const double nb = opt.momentum * buf[e] + g;
                    buf[e] = static_cast<float>(nb);
                    p[e] = static_cast<float>(p[e] - opt.lr * nb);
                }
            }
        }
        const double epoch_loss = loss_sum / static_cast<double>(data.size());
        if (failure.empty() && !std::isfinite(epoch_loss)) failure = "epoch loss is not finite";
        if (failure.empty()) {
            for (const Var<float>* v : plist) {
                if (!v->value.all_finite()) {
                    failure = "parameters are not finite";
                    break;
                }
            }
        }
        // Inference-mode evaluation on the (unaugmented) training set.
        double train_dice = 0;
        if (failure.empty()) {
            try {
                std::vector<std::size_t> all(data.size());
                for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
                LabelMap pred_all, truth_all;
                for (std::size_t begin = 0; begin < all.size(); begin += opt.batch) {
                    const std::size_t end = std::min(all.size(), begin + static_cast<std::size_t>(opt.batch));
                    const Batch b = stack(data, all, begin, end, false, 0, 0, nullptr);
                    Var<float> logits = net_forward(Var<float>(b.image), params, ForwardOptions{false});
                    LabelMap pred = argmax_labels(logits.value);
                    pred_all.data.insert(pred_all.data.end(), pred.data.begin(), pred.data.end());
                    truth_all.data.insert(truth_all.data.end(), b.mask.data.begin(), b.mask.data.end());
                }
                train_dice = foreground_dice(pred_all, truth_all, nc);
            } catch (const NumericError& e) {
                failure = std::string("non-finite value at ") + e.stage() + " during evaluation";
            }
        }
        if (!failure.empty()) {
            params = snapshot;
            momentum = momentum_snapshot;
            result.diverged = true;
            result.message = "epoch " + std::to_string(epoch) + ": " + failure +
                             "; restored parameters from the last completed epoch";
            break;
        }
        EpochMetrics em{epoch, epoch_loss, train_dice};
        result.history.push_back(em);
        if (on_epoch) on_epoch(em);
    }
    return result;
}

void write_history_csv(std::ostream& os, const std::vector<EpochMetrics>& history) {
    os << "epoch,loss,train_dice\n";
    char buf[96];
    for (const auto& e : history) {
        std::snprintf(buf, sizeof buf, "%d,%.8f,%.6f\n", e.epoch, e.loss, e.train_dice);
        os << buf;
    }
}

std::vector<std::uint8_t> heat_map(const Tensor<float>& map) {
    const Shape& s = map.shape();
    if (s.n != 1) throw ShapeError("heat_map", "batch", 1, s.n);
    const Index plane = s.h * s.w;
    std::vector<double> mean(static_cast<std::size_t>(plane), 0.0);
    for (Index c = 0; c < s.c; ++c) {
        for (Index i = 0; i < plane; ++i) mean[i] += std::abs(map[c * plane + i]);
    }
    for (auto& v : mean) v /= static_cast<double>(std::max<Index>(s.c, 1));
    double lo = 0, hi = 0;
    if (plane > 0) {
        lo = *std::min_element(mean.begin(), mean.end());
        hi = *std::max_element(mean.begin(), mean.end());
    }
    std::vector<std::uint8_t> out(static_cast<std::size_t>(plane), 0);
    if (hi > lo) {
        for (Index i = 0; i < plane; ++i) {
            out[i] = static_cast<std::uint8_t>(std::lround(255.0 * (mean[i] - lo) / (hi - lo)));
        }
    }
    return out;
}

InferResult infer(NetParams<float>& params, const Tensor<float>& image) {
    NetTrace<float> trace;
    Var<float> logits = net_forward(Var<float>(image), params, ForwardOptions{false}, &trace);
    InferResult r;
    r.mask = argmax_labels(logits.value);
    for (const auto& t : trace.enltb_outputs) {
        r.heat_maps.push_back(heat_map(t));
        r.heat_dims.emplace_back(t.h(), t.w());
    }
    return r;
}

#define PUNET_INSTANTIATE_NET(T)                                                          \
    template NetParams<T> make_net(const NetConfig&);                                     \
    template Var<T> net_forward(const Var<T>&, NetParams<T>&, const ForwardOptions&,      \
                                NetTrace<T>*);                                            \
    template Var<T> seg_loss(const Var<T>&, const LabelMap&, double, double);

PUNET_INSTANTIATE_NET(float)
PUNET_INSTANTIATE_NET(double)

}  // namespace punet
