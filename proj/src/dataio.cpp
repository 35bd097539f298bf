#include "punet/dataio.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <sstream>

#include "punet/rng.hpp"

namespace punet {

FormatError::FormatError(const std::string& what, std::int64_t offset)
    : std::runtime_error(offset >= 0 ? what + " (at byte " + std::to_string(offset) + ")" : what),
      offset_(offset) {}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::vector<std::uint8_t> out((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return out;
}

void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

// ------------------------------------------------------------ synthetic

bool Ellipse::contains(Index y, Index x) const {
    const double dy = static_cast<double>(y) + 0.5 - cy;
    const double dx = static_cast<double>(x) + 0.5 - cx;
    const double c = std::cos(angle), s = std::sin(angle);
    const double u = dx * c + dy * s;
    const double v = -dx * s + dy * c;
    return (u * u) / (rx * rx) + (v * v) / (ry * ry) <= 1.0;
}

double class_intensity(std::int32_t label, Index num_classes) {
    return (static_cast<double>(label) + 0.5) / static_cast<double>(num_classes);
}

namespace {

void check_spec(const SyntheticSpec& s) {
    if (s.height < 4 || s.width < 4) throw std::invalid_argument("synthetic: size must be >= 4");
    if (s.num_classes < 2 || s.num_classes > 255) {
        throw std::invalid_argument("synthetic: num_classes must be in [2, 255]");
    }
    if (s.channels < 1) throw std::invalid_argument("synthetic: channels must be >= 1");
    if (s.min_shapes < 1 || s.max_shapes < s.min_shapes) {
        throw std::invalid_argument("synthetic: need 1 <= min_shapes <= max_shapes");
    }
    if (s.noise_sd < 0) throw std::invalid_argument("synthetic: noise_sd must be >= 0");
    if (s.max_attempts < 1) throw std::invalid_argument("synthetic: max_attempts must be >= 1");
}

std::vector<Ellipse> draw_ellipses(const SyntheticSpec& s, Rng& rng) {
    const Index fg = s.num_classes - 1;
    // Labels without replacement, so the count is capped at the number of
    // foreground classes.
    const auto k = std::min<std::int64_t>(rng.uniform_int(s.min_shapes, s.max_shapes), fg);
    std::vector<std::int32_t> labels(static_cast<std::size_t>(fg));
    for (Index i = 0; i < fg; ++i) labels[static_cast<std::size_t>(i)] = static_cast<std::int32_t>(i + 1);
    for (Index i = fg - 1; i > 0; --i) {
        std::swap(labels[static_cast<std::size_t>(i)],
                  labels[static_cast<std::size_t>(rng.uniform_int(0, i))]);
    }
    const double side = static_cast<double>(std::min(s.height, s.width));
    std::vector<Ellipse> out;
    for (Index i = 0; i < k; ++i) {
        Ellipse e;
        e.ry = rng.uniform(0.12, 0.28) * side;
        e.rx = rng.uniform(0.12, 0.28) * side;
        const double r = std::max(e.ry, e.rx);
        e.cy = rng.uniform(std::min(r, s.height / 2.0), std::max(s.height - r, s.height / 2.0));
        e.cx = rng.uniform(std::min(r, s.width / 2.0), std::max(s.width - r, s.width / 2.0));
        e.angle = rng.uniform(0.0, std::numbers::pi);
        e.label = labels[static_cast<std::size_t>(i)];
        out.push_back(e);
    }
    return out;
}

LabelMap paint(const SyntheticSpec& s, const std::vector<Ellipse>& es) {
    LabelMap m(1, s.height, s.width, 0);
    for (const auto& e : es) {
        for (Index y = 0; y < s.height; ++y) {
            for (Index x = 0; x < s.width; ++x) {
                if (e.contains(y, x)) m.at(0, y, x) = e.label;
            }
        }
    }
    return m;
}

bool all_present(const LabelMap& m, Index num_classes) {
    std::vector<char> seen(static_cast<std::size_t>(num_classes), 0);
    for (auto v : m.data) seen[static_cast<std::size_t>(v)] = 1;
    return std::all_of(seen.begin(), seen.end(), [](char c) { return c != 0; });
}

}  // namespace

SyntheticScene gen_scene(const SyntheticSpec& spec, Index index) {
    check_spec(spec);
    Rng rng = Rng(spec.seed).fork(static_cast<std::uint64_t>(index));
    SyntheticScene scene;
    LabelMap mask;
    for (int attempt = 0; attempt < spec.max_attempts; ++attempt) {
        scene.ellipses = draw_ellipses(spec, rng);
        mask = paint(spec, scene.ellipses);
        if (all_present(mask, spec.num_classes)) break;
    }
    const Index H = spec.height, W = spec.width;
    std::vector<double> base(static_cast<std::size_t>(H * W));
    for (Index i = 0; i < H * W; ++i) {
        base[static_cast<std::size_t>(i)] = class_intensity(mask.data[static_cast<std::size_t>(i)], spec.num_classes);
    }
    // 3x3 box blur, edges clamped.
    std::vector<double> smooth(base.size());
    for (Index y = 0; y < H; ++y) {
        for (Index x = 0; x < W; ++x) {
            double acc = 0;
            for (Index dy = -1; dy <= 1; ++dy) {
                for (Index dx = -1; dx <= 1; ++dx) {
                    const Index yy = std::clamp<Index>(y + dy, 0, H - 1);
                    const Index xx = std::clamp<Index>(x + dx, 0, W - 1);
                    acc += base[static_cast<std::size_t>(yy * W + xx)];
                }
            }
            smooth[static_cast<std::size_t>(y * W + x)] = acc / 9.0;
        }
    }
    Tensor<float> img(Shape{1, spec.channels, H, W});
    Rng noise = rng.fork(0xa015e);
    for (Index c = 0; c < spec.channels; ++c) {
        for (Index i = 0; i < H * W; ++i) {
            double v = smooth[static_cast<std::size_t>(i)];
            if (spec.noise_sd > 0) v += noise.normal(0.0, spec.noise_sd);
            img[c * H * W + i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
    }
    scene.sample.image = std::move(img);
    scene.sample.mask = std::move(mask);
    scene.sample.num_classes = spec.num_classes;
    return scene;
}

std::vector<SegSample> gen_synthetic(const SyntheticSpec& spec, Index count) {
    if (count < 0) throw std::invalid_argument("gen_synthetic: count must be >= 0");
    check_spec(spec);
    std::vector<SegSample> out;
    out.reserve(static_cast<std::size_t>(count));
    for (Index i = 0; i < count; ++i) out.push_back(gen_scene(spec, i).sample);
    return out;
}

// ------------------------------------------------------------------ PGM

std::vector<std::uint8_t> pgm_encode(const GrayImage& img) {
    if (img.h < 1 || img.w < 1 || static_cast<Index>(img.pixels.size()) != img.h * img.w) {
        throw std::invalid_argument("pgm_encode: pixel count does not match dims");
    }
    const std::string header = "P5\n" + std::to_string(img.w) + " " + std::to_string(img.h) + "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    out.insert(out.end(), img.pixels.begin(), img.pixels.end());
    return out;
}

GrayImage pgm_decode(const std::vector<std::uint8_t>& b) {
    if (b.size() < 2 || b[0] != 'P' || b[1] != '5') {
        throw FormatError("pgm: expected magic P5", 0);
    }
    std::size_t pos = 2;
    auto is_space = [](std::uint8_t c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f'; };
    if (pos >= b.size() || !is_space(b[pos])) throw FormatError("pgm: expected whitespace after magic", 2);
    auto skip = [&] {
        for (;;) {
            while (pos < b.size() && is_space(b[pos])) ++pos;
            if (pos < b.size() && b[pos] == '#') {
                while (pos < b.size() && b[pos] != '\n') ++pos;
                continue;
            }
            return;
        }
    };
    auto number = [&](const char* what) -> Index {
        skip();
        const std::size_t start = pos;
        Index v = 0;
        while (pos < b.size() && b[pos] >= '0' && b[pos] <= '9') {
            v = v * 10 + (b[pos] - '0');
            if (v > (Index(1) << 30)) throw FormatError(std::string("pgm: ") + what + " too large", static_cast<std::int64_t>(start));
            ++pos;
        }
        if (pos == start) throw FormatError(std::string("pgm: expected ") + what, static_cast<std::int64_t>(pos));
        return v;
    };
    const Index w = number("width");
    const Index h = number("height");
    const std::size_t maxval_at = pos;
    const Index maxval = number("maxval");
    if (w < 1 || h < 1) throw FormatError("pgm: dims must be positive", static_cast<std::int64_t>(maxval_at));
    if (maxval != 255) throw FormatError("pgm: only maxval 255 is supported", static_cast<std::int64_t>(maxval_at));
    if (pos >= b.size() || !is_space(b[pos])) {
        throw FormatError("pgm: expected single whitespace before raster", static_cast<std::int64_t>(pos));
    }
    ++pos;
    const auto need = static_cast<std::size_t>(w * h);
    if (b.size() - pos < need) {
        throw FormatError("pgm: raster truncated, expected " + std::to_string(need) + " bytes",
                          static_cast<std::int64_t>(b.size()));
    }
    GrayImage g;
    g.h = h;
    g.w = w;
    g.pixels.assign(b.begin() + static_cast<std::ptrdiff_t>(pos), b.begin() + static_cast<std::ptrdiff_t>(pos + need));
    return g;
}

void pgm_write(const std::filesystem::path& path, const GrayImage& img) { write_file(path, pgm_encode(img)); }

GrayImage pgm_read(const std::filesystem::path& path) { return pgm_decode(read_file(path)); }

GrayImage image_to_gray(const Tensor<float>& image) {
    if (image.n() != 1) throw ShapeError("image_to_gray", "batch", 1, image.n());
    GrayImage g;
    g.h = image.h();
    g.w = image.w();
    g.pixels.resize(static_cast<std::size_t>(g.h * g.w));
    for (Index i = 0; i < g.h * g.w; ++i) {
        const double v = std::clamp(static_cast<double>(image[i]), 0.0, 1.0);
        g.pixels[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
    return g;
}

Tensor<float> gray_to_image(const GrayImage& g, Index channels) {
    if (channels < 1) throw std::invalid_argument("gray_to_image: channels must be >= 1");
    Tensor<float> t(Shape{1, channels, g.h, g.w});
    for (Index c = 0; c < channels; ++c) {
        for (Index i = 0; i < g.h * g.w; ++i) {
            t[c * g.h * g.w + i] = static_cast<float>(g.pixels[static_cast<std::size_t>(i)]) / 255.0f;
        }
    }
    return t;
}

GrayImage mask_to_gray(const LabelMap& mask, Index b) {
    if (b < 0 || b >= mask.n) throw std::out_of_range("mask_to_gray: batch index");
    GrayImage g;
    g.h = mask.h;
    g.w = mask.w;
    g.pixels.resize(static_cast<std::size_t>(g.h * g.w));
    for (Index y = 0; y < g.h; ++y) {
        for (Index x = 0; x < g.w; ++x) {
            const auto v = mask.at(b, y, x);
            if (v < 0 || v > 255) throw std::invalid_argument("mask_to_gray: label outside 0..255");
            g.pixels[static_cast<std::size_t>(y * g.w + x)] = static_cast<std::uint8_t>(v);
        }
    }
    return g;
}

LabelMap gray_to_mask(const GrayImage& g) {
    LabelMap m(1, g.h, g.w);
    for (std::size_t i = 0; i < g.pixels.size(); ++i) m.data[i] = g.pixels[i];
    return m;
}

// ----------------------------------------------------------- checkpoint

namespace {

void put_u32(std::vector<std::uint8_t>& o, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) o.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
  public:
    explicit Reader(const std::vector<std::uint8_t>& b) : b_(b) {}

    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }
    std::string bytes(std::size_t n, const char* what) {
        need(n, what);
        std::string s(b_.begin() + static_cast<std::ptrdiff_t>(pos_), b_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
        pos_ += n;
        return s;
    }
    std::size_t pos() const { return pos_; }
    bool done() const { return pos_ == b_.size(); }

  private:
    void need(std::size_t n, const char* what) {
        if (b_.size() - pos_ < n) {
            throw FormatError(std::string("checkpoint: truncated ") + what, static_cast<std::int64_t>(pos_));
        }
    }
    const std::vector<std::uint8_t>& b_;
    std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const std::vector<NamedTensor>& tensors) {
    std::vector<std::uint8_t> o{'P', 'U', 'N', 'T'};
    put_u32(o, kCheckpointVersion);
    put_u32(o, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& t : tensors) {
        put_u32(o, static_cast<std::uint32_t>(t.name.size()));
        o.insert(o.end(), t.name.begin(), t.name.end());
        put_u32(o, 4);
        const Shape& s = t.value.shape();
        for (Index d : {s.n, s.c, s.h, s.w}) put_u32(o, static_cast<std::uint32_t>(d));
        for (float f : t.value.data()) put_u32(o, std::bit_cast<std::uint32_t>(f));
    }
    return o;
}

std::vector<NamedTensor> decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
    Reader r(bytes);
    if (r.bytes(4, "magic") != "PUNT") throw FormatError("checkpoint: bad magic", 0);
    const std::uint32_t version = r.u32("version");
    if (version != kCheckpointVersion) {
        throw FormatError("checkpoint: unsupported version " + std::to_string(version), 4);
    }
    const std::uint32_t count = r.u32("tensor count");
    std::vector<NamedTensor> out;
    for (std::uint32_t i = 0; i < count; ++i) {
        NamedTensor t;
        const std::uint32_t len = r.u32("name length");
        t.name = r.bytes(len, "name");
        const std::size_t rank_at = r.pos();
        const std::uint32_t rank = r.u32("rank");
        if (rank < 1 || rank > 4) throw FormatError("checkpoint: rank must be 1..4", static_cast<std::int64_t>(rank_at));
        Index dims[4] = {1, 1, 1, 1};
        for (std::uint32_t d = 0; d < rank; ++d) dims[4 - rank + d] = r.u32("dims");
        const Shape shape{dims[0], dims[1], dims[2], dims[3]};
        if (static_cast<std::size_t>(shape.numel()) * 4 > bytes.size() - r.pos()) {
            throw FormatError("checkpoint: truncated data of " + t.name, static_cast<std::int64_t>(r.pos()));
        }
        std::vector<float> data(static_cast<std::size_t>(shape.numel()));
        for (auto& f : data) f = std::bit_cast<float>(r.u32("data"));
        t.value = Tensor<float>(shape, std::move(data));
        out.push_back(std::move(t));
    }
    if (!r.done()) throw FormatError("checkpoint: trailing bytes", static_cast<std::int64_t>(r.pos()));
    return out;
}

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
    write_file(path, encode_checkpoint(tensors));
}

std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path) {
    return decode_checkpoint(read_file(path));
}

std::vector<NamedTensor> net_state(NetParams<float>& p) {
    std::vector<NamedTensor> out;
    FnVisitor<float> fv([&](const std::string& n, Var<float>& v) { out.push_back({n, v.value}); },
                        [&](const std::string& n, Tensor<float>& t) { out.push_back({n, t}); });
    visit(p, std::string(), fv);
    return out;
}

void load_net_state(NetParams<float>& p, const std::vector<NamedTensor>& state) {
    std::map<std::string, const Tensor<float>*> by_name;
    for (const auto& t : state) {
        if (!by_name.emplace(t.name, &t.value).second) {
            throw std::invalid_argument("checkpoint: duplicate tensor " + t.name);
        }
    }
    std::size_t used = 0;
    auto take = [&](const std::string& n, Tensor<float>& dst) {
        auto it = by_name.find(n);
        if (it == by_name.end()) throw std::invalid_argument("checkpoint: missing tensor " + n);
        if (it->second->shape() != dst.shape()) {
            throw std::invalid_argument("checkpoint: " + n + " has shape " + it->second->shape().str() +
                                        ", network expects " + dst.shape().str());
        }
        dst = *it->second;
        ++used;
    };
    FnVisitor<float> fv([&](const std::string& n, Var<float>& v) { take(n, v.value); },
                        [&](const std::string& n, Tensor<float>& t) { take(n, t); });
    visit(p, std::string(), fv);
    if (used != state.size()) {
        throw std::invalid_argument("checkpoint: " + std::to_string(state.size() - used) +
                                    " tensors do not belong to this network");
    }
}

// --------------------------------------------------------------- config

namespace {

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return {};
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    // Prefer the shortest string that round-trips.
    for (int prec = 1; prec <= 17; ++prec) {
        char t[40];
        std::snprintf(t, sizeof t, "%.*g", prec, v);
        if (std::strtod(t, nullptr) == v) return t;
    }
    return buf;
}

template <typename I>
I parse_int(const std::string& s) {
    I v{};
    const auto* end = s.data() + s.size();
    auto [p, ec] = std::from_chars(s.data(), end, v);
    if (ec != std::errc() || p != end) throw std::invalid_argument("expected an integer, got '" + s + "'");
    return v;
}

double parse_double(const std::string& s) {
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (s.empty() || end != s.c_str() + s.size() || !std::isfinite(v)) {
        throw std::invalid_argument("expected a number, got '" + s + "'");
    }
    return v;
}

bool parse_bool(const std::string& s) {
    if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
    if (s == "false" || s == "0" || s == "no" || s == "off") return false;
    throw std::invalid_argument("expected true or false, got '" + s + "'");
}

template <typename I>
std::vector<I> parse_list(const std::string& s) {
    std::vector<I> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(parse_int<I>(trim(item)));
    if (out.empty()) throw std::invalid_argument("expected a comma-separated list");
    return out;
}

template <typename I>
std::string join(const std::vector<I>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ',';
        out += std::to_string(v[i]);
    }
    return out;
}

const char* attention_name(ScsiAttention a) { return a == ScsiAttention::Exact ? "exact" : "enlsa"; }

ScsiAttention parse_attention(const std::string& s) {
    if (s == "exact") return ScsiAttention::Exact;
    if (s == "enlsa") return ScsiAttention::Enlsa;
    throw std::invalid_argument("expected exact or enlsa, got '" + s + "'");
}

struct Field {
    std::string key;
    std::function<void(NetConfig&, const std::string&)> set;
    std::function<std::string(const NetConfig&)> get;
};

const std::vector<Field>& fields() {
    auto b = [](bool v) { return std::string(v ? "true" : "false"); };
    static const std::vector<Field> f{
        {"in_channels", [](NetConfig& c, const std::string& v) { c.in_channels = parse_int<Index>(v); },
         [](const NetConfig& c) { return std::to_string(c.in_channels); }},
        {"stage_channels", [](NetConfig& c, const std::string& v) { c.stage_channels = parse_list<Index>(v); },
         [](const NetConfig& c) { return join(c.stage_channels); }},
        {"dilation_rates", [](NetConfig& c, const std::string& v) { c.dilation_rates = parse_list<int>(v); },
         [](const NetConfig& c) { return join(c.dilation_rates); }},
        {"input_h", [](NetConfig& c, const std::string& v) { c.input_h = parse_int<Index>(v); },
         [](const NetConfig& c) { return std::to_string(c.input_h); }},
        {"input_w", [](NetConfig& c, const std::string& v) { c.input_w = parse_int<Index>(v); },
         [](const NetConfig& c) { return std::to_string(c.input_w); }},
        {"num_classes", [](NetConfig& c, const std::string& v) { c.num_classes = parse_int<Index>(v); },
         [](const NetConfig& c) { return std::to_string(c.num_classes); }},
        {"m", [](NetConfig& c, const std::string& v) { c.m = parse_int<Index>(v); },
         [](const NetConfig& c) { return std::to_string(c.m); }},
        {"enlsa_scale", [](NetConfig& c, const std::string& v) { c.enlsa_scale = parse_double(v); },
         [](const NetConfig& c) { return fmt_double(c.enlsa_scale); }},
        {"enlsa_normalize", [](NetConfig& c, const std::string& v) { c.enlsa_normalize = parse_bool(v); },
         [b](const NetConfig& c) { return b(c.enlsa_normalize); }},
        {"scsi_d_model", [](NetConfig& c, const std::string& v) { c.scsi_d_model = parse_int<Index>(v); },
         [](const NetConfig& c) { return std::to_string(c.scsi_d_model); }},
        {"scsi_depth", [](NetConfig& c, const std::string& v) { c.scsi_depth = parse_int<int>(v); },
         [](const NetConfig& c) { return std::to_string(c.scsi_depth); }},
        {"scsi_heads", [](NetConfig& c, const std::string& v) { c.scsi_heads = parse_int<int>(v); },
         [](const NetConfig& c) { return std::to_string(c.scsi_heads); }},
        {"scsi_attention", [](NetConfig& c, const std::string& v) { c.scsi_attention = parse_attention(v); },
         [](const NetConfig& c) { return std::string(attention_name(c.scsi_attention)); }},
        {"use_bprb_global_path", [](NetConfig& c, const std::string& v) { c.use_bprb_global_path = parse_bool(v); },
         [b](const NetConfig& c) { return b(c.use_bprb_global_path); }},
        {"use_enltb", [](NetConfig& c, const std::string& v) { c.use_enltb = parse_bool(v); },
         [b](const NetConfig& c) { return b(c.use_enltb); }},
        {"use_scsi", [](NetConfig& c, const std::string& v) { c.use_scsi = parse_bool(v); },
         [b](const NetConfig& c) { return b(c.use_scsi); }},
        {"bprb_residual", [](NetConfig& c, const std::string& v) { c.bprb_residual = parse_bool(v); },
         [b](const NetConfig& c) { return b(c.bprb_residual); }},
        {"bn_momentum", [](NetConfig& c, const std::string& v) { c.bn_momentum = parse_double(v); },
         [](const NetConfig& c) { return fmt_double(c.bn_momentum); }},
        {"bn_eps", [](NetConfig& c, const std::string& v) { c.bn_eps = parse_double(v); },
         [](const NetConfig& c) { return fmt_double(c.bn_eps); }},
        {"loss_w_ce", [](NetConfig& c, const std::string& v) { c.loss_w_ce = parse_double(v); },
         [](const NetConfig& c) { return fmt_double(c.loss_w_ce); }},
        {"loss_w_dice", [](NetConfig& c, const std::string& v) { c.loss_w_dice = parse_double(v); },
         [](const NetConfig& c) { return fmt_double(c.loss_w_dice); }},
        {"seed", [](NetConfig& c, const std::string& v) { c.seed = parse_int<std::uint64_t>(v); },
         [](const NetConfig& c) { return std::to_string(c.seed); }},
    };
    return f;
}

}  // namespace

const std::vector<std::pair<std::string, std::string>>& config_keys() {
    static const std::vector<std::pair<std::string, std::string>> keys = [] {
        std::vector<std::pair<std::string, std::string>> k{{"preset", "default"}};
        const NetConfig d;
        for (const auto& f : fields()) k.emplace_back(f.key, f.get(d));
        return k;
    }();
    return keys;
}

NetConfig config_parse(const std::string& text) { return config_parse(text, NetConfig{}); }

// `preset=<name>` is accepted only before any other key and replaces the
// base config.
NetConfig config_parse(const std::string& text, NetConfig base) {
    NetConfig cfg = std::move(base);
    std::size_t line_start = 0;
    int line_no = 0;
    bool any_key = false;
    while (line_start <= text.size()) {
        std::size_t nl = text.find('\n', line_start);
        if (nl == std::string::npos) nl = text.size();
        ++line_no;
        std::string line = text.substr(line_start, nl - line_start);
        const auto offset = static_cast<std::int64_t>(line_start);
        line_start = nl + 1;
        if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) {
            if (nl == text.size()) break;
            continue;
        }
        const auto eq = line.find('=');
        const std::string where = "config line " + std::to_string(line_no);
        if (eq == std::string::npos) throw FormatError(where + ": expected key=value", offset);
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        try {
            if (key == "preset") {
                if (any_key) throw std::invalid_argument("preset must precede every other key");
                cfg = preset_config(value);
            } else {
                auto it = std::find_if(fields().begin(), fields().end(), [&](const Field& f) { return f.key == key; });
                if (it == fields().end()) throw std::invalid_argument("unknown key '" + key + "'");
                it->set(cfg, value);
            }
        } catch (const std::invalid_argument& e) {
            throw FormatError(where + ": " + e.what(), offset);
        }
        any_key = true;
        if (nl == text.size()) break;
    }
    cfg.validate();
    return cfg;
}

NetConfig config_load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return config_parse(ss.str());
}

std::string config_serialize(const NetConfig& cfg) {
    std::string out;
    for (const auto& f : fields()) out += f.key + "=" + f.get(cfg) + "\n";
    return out;
}

}  // namespace punet
