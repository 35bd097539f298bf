#pragma once

// Synthetic segmentation data, PGM image/mask files, PUNT checkpoints and
// key=value configuration files.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "punet/net.hpp"

namespace punet {

/// Malformed or unreadable input file. `offset()` is the byte position of
/// the problem, or -1 when not applicable.
class FormatError : public std::runtime_error {
  public:
    FormatError(const std::string& what, std::int64_t offset = -1);
    std::int64_t offset() const { return offset_; }

  private:
    std::int64_t offset_;
};

// ------------------------------------------------------------ synthetic

struct SyntheticSpec {
    Index height = 64;
    Index width = 64;
    Index channels = 1;
    Index num_classes = 3;
    /// Ellipses per image, inclusive range.
    int min_shapes = 2;
    int max_shapes = 4;
    double noise_sd = 0.05;
    std::uint64_t seed = 7;
    /// Redraw a scene until every class is present, at most this often.
    int max_attempts = 32;
};

struct Ellipse {
    double cy = 0, cx = 0;  // center, pixel units
    double ry = 0, rx = 0;  // semi-axes
    double angle = 0;       // radians
    std::int32_t label = 1;

    /// Pixel (y, x) belongs when its center (y + 0.5, x + 0.5) lies inside.
    bool contains(Index y, Index x) const;
};

struct SyntheticScene {
    std::vector<Ellipse> ellipses;  // painted in order, later ones on top
    SegSample sample;
};

/// Sample `index` of the family defined by `spec` (independent of count).
SyntheticScene gen_scene(const SyntheticSpec& spec, Index index);
std::vector<SegSample> gen_synthetic(const SyntheticSpec& spec, Index count);

/// Class intensity before smoothing and noise.
double class_intensity(std::int32_t label, Index num_classes);

// ------------------------------------------------------------------ PGM

struct GrayImage {
    Index h = 0;
    Index w = 0;
    std::vector<std::uint8_t> pixels;
};

/// Binary P5, maxval 255, header "P5\n<w> <h>\n255\n".
void pgm_write(const std::filesystem::path& path, const GrayImage& img);
GrayImage pgm_read(const std::filesystem::path& path);
std::vector<std::uint8_t> pgm_encode(const GrayImage& img);
GrayImage pgm_decode(const std::vector<std::uint8_t>& bytes);

/// Channel 0 of image (1, c, h, w), values in [0, 1] scaled by 255 and
/// rounded.
GrayImage image_to_gray(const Tensor<float>& image);
/// (1, channels, h, w) image with every channel set to value / 255.
Tensor<float> gray_to_image(const GrayImage& g, Index channels = 1);
/// Class indices stored directly as pixel values.
GrayImage mask_to_gray(const LabelMap& mask, Index b = 0);
LabelMap gray_to_mask(const GrayImage& g);

// ----------------------------------------------------------- checkpoint

struct NamedTensor {
    std::string name;
    Tensor<float> value;
};

constexpr std::uint32_t kCheckpointVersion = 1;

/// "PUNT", u32 version, u32 count, then per tensor: u32 name length, name
/// bytes, u32 rank (4), u32 dims, float32 data. All little-endian.
void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path);
std::vector<std::uint8_t> encode_checkpoint(const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> decode_checkpoint(const std::vector<std::uint8_t>& bytes);

/// Parameters and buffers of a network in traversal order.
std::vector<NamedTensor> net_state(NetParams<float>& p);
/// Loads values by name into an identically configured network. Missing,
/// extra or mis-shaped tensors are errors.
void load_net_state(NetParams<float>& p, const std::vector<NamedTensor>& state);

// --------------------------------------------------------------- config

/// key=value lines, '#' starts a comment, blank lines ignored. Keys not in
/// the documented set are errors (FormatError with the line number).
NetConfig config_parse(const std::string& text);
NetConfig config_parse(const std::string& text, NetConfig base);
NetConfig config_load(const std::filesystem::path& path);
/// Every key, in documentation order; round-trips through config_parse.
std::string config_serialize(const NetConfig& cfg);
/// Documented keys with their defaults, one per line.
const std::vector<std::pair<std::string, std::string>>& config_keys();

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

}  // namespace punet
