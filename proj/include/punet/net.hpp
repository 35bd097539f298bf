#pragma once

// Full segmentation network: BPRB encoder stages, an ENLTB chain from the
// third stage on, the cross-scale integrator, a U-Net style decoder and a
// 1x1 classification head. Also the training loss, SGD training loop and
// inference helpers.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "punet/bprb.hpp"
#include "punet/enltb.hpp"
#include "punet/scsi.hpp"

namespace punet {

struct NetConfig {
    Index in_channels = 3;
    std::vector<Index> stage_channels{64, 128, 256, 512, 1024};
    /// Global-path dilation per stage.
    std::vector<int> dilation_rates{2, 2, 2, 2, 2};
    Index input_h = 224;
    Index input_w = 224;
    Index num_classes = 9;
    /// Random features per ENLTB attention.
    Index m = 256;
    /// Negative selects c^-1/4.
    double enlsa_scale = -1.0;
    bool enlsa_normalize = true;
    Index scsi_d_model = 256;
    int scsi_depth = 2;
    int scsi_heads = 8;
    ScsiAttention scsi_attention = ScsiAttention::Exact;
    bool use_bprb_global_path = true;
    bool use_enltb = true;
    bool use_scsi = true;
    bool bprb_residual = true;
    double bn_momentum = 0.1;
    double bn_eps = 1e-5;
    double loss_w_ce = 0.5;
    double loss_w_dice = 0.5;
    std::uint64_t seed = 42;

    Index num_stages() const { return static_cast<Index>(stage_channels.size()); }
    /// Index (0-based) of the first stage carrying an ENLTB.
    static constexpr Index kFirstAttentionStage = 2;
    /// Throws std::invalid_argument naming the inconsistent field.
    void validate() const;
};

/// Named presets: "default" (full scale), "toy" (channels / 8, 64x64,
/// 3 classes, 1 input channel, m 64, d_model 32, 4 heads) and "micro"
/// (channels 4..64, 16x16, m 8).
NetConfig preset_config(const std::string& name);

template <typename T>
struct DecoderStage {
    Conv<T> conv1, conv2;
    BatchNormParams<T> bn1, bn2;
};

template <typename T>
struct NetParams {
    NetConfig cfg;
    std::vector<BprbParams<T>> encoder;
    std::vector<EnltbParams<T>> enltb;  // stages >= kFirstAttentionStage
    std::optional<ScsiParams<T>> scsi;
    std::vector<DecoderStage<T>> decoder;  // decoder[i] produces stage-i width
    Conv<T> head;
};

template <typename T>
NetParams<T> make_net(const NetConfig& cfg);

/// Shapes and intermediate maps of a forward pass.
struct StageShapes {
    Index stage = 0;  // 1-based
    Shape input;
    Shape output;
};

template <typename T>
struct NetTrace {
    std::vector<StageShapes> bprb;
    std::vector<StageShapes> enltb;
    std::vector<Tensor<T>> enltb_outputs;
    Index scsi_tokens = 0;
};

struct ForwardOptions {
    bool training = false;
};

/// x (n, in_channels, H, W) -> logits (n, num_classes, H, W).
template <typename T>
Var<T> net_forward(const Var<T>& x, NetParams<T>& p, const ForwardOptions& opt,
                   NetTrace<T>* trace = nullptr);

/// w_ce * cross-entropy + w_dice * (1 - mean soft Dice).
template <typename T>
Var<T> seg_loss(const Var<T>& logits, const LabelMap& mask, double w_ce, double w_dice);

std::vector<TokenSegment> scsi_token_layout(const NetConfig& cfg);

template <typename T>
void visit(NetParams<T>& p, const std::string& prefix, ParamVisitor<T>& v) {
    const std::string pre = prefix.empty() ? std::string() : prefix + ".";
    for (std::size_t i = 0; i < p.encoder.size(); ++i) {
        visit(p.encoder[i], pre + "encoder." + std::to_string(i), v);
    }
    for (std::size_t i = 0; i < p.enltb.size(); ++i) {
        visit(p.enltb[i], pre + "enltb." + std::to_string(i), v);
    }
    if (p.scsi) {
        visit(*p.scsi, pre + "scsi", v);
    }
    for (std::size_t i = 0; i < p.decoder.size(); ++i) {
        const std::string dp = pre + "decoder." + std::to_string(i);
        visit(p.decoder[i].conv1, dp + ".conv1", v);
        visit(p.decoder[i].bn1, dp + ".bn1", v);
        visit(p.decoder[i].conv2, dp + ".conv2", v);
        visit(p.decoder[i].bn2, dp + ".bn2", v);
    }
    visit(p.head, pre + "head", v);
}

/// Image/mask pair. image (n, c, h, w) in [0, 1]; mask (n, h, w).
struct SegSample {
    Tensor<float> image;
    LabelMap mask;
    Index num_classes = 0;
};

struct TrainOptions {
    int epochs = 200;
    double lr = 0.05;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    int batch = 4;
    bool shuffle = true;
    bool augment = false;
    double flip_prob = 0.5;
    double noise_sd = 0.02;
    /// Worker threads for batch sharding; 0 reads PUNT_THREADS (default 1).
    int threads = 0;
    std::uint64_t seed = 42;
};

struct EpochMetrics {
    int epoch = 0;  // 1-based
    double loss = 0;
    /// Mean foreground Dice of argmax predictions in inference mode,
    /// pooled over the training set.
    double train_dice = 0;
};

struct TrainResult {
    std::vector<EpochMetrics> history;
    bool diverged = false;
    /// Set when training stopped on a non-finite loss.
    std::string message;
};

/// SGD with momentum and L2 weight decay (buf = mu buf + g + wd p;
/// p -= lr buf). On a non-finite loss the parameters of the last completed
/// epoch are restored and training stops. `on_epoch` may be null.
TrainResult train(NetParams<float>& params, const std::vector<SegSample>& data,
                  const TrainOptions& opt,
                  const std::function<void(const EpochMetrics&)>& on_epoch = {});

void write_history_csv(std::ostream& os, const std::vector<EpochMetrics>& history);

/// Argmax over classes, ties to the lowest index. logits (n, C, h, w).
LabelMap argmax_labels(const Tensor<float>& logits);

/// Mean over foreground classes of per-class Dice pooled over the batch.
double foreground_dice(const LabelMap& pred, const LabelMap& truth, Index num_classes);

/// Channel-mean absolute activation of a (1, c, h, w) map, min-max scaled
/// to 0..255 and returned as (h, w) intensities.
std::vector<std::uint8_t> heat_map(const Tensor<float>& map);

struct InferResult {
    LabelMap mask;
    /// One (h_s, w_s) heat map per ENLTB stage.
    std::vector<std::vector<std::uint8_t>> heat_maps;
    std::vector<std::pair<Index, Index>> heat_dims;
};

/// Inference-mode forward of a single image (1, c, h, w).
InferResult infer(NetParams<float>& params, const Tensor<float>& image);

/// Worker count from PUNT_THREADS (>= 1).
int env_threads();

}  // namespace punet
