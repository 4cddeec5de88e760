#include "donet/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>

#include "donet/ops.hpp"

namespace donet {

namespace fs = std::filesystem;

namespace {

bool is_pnm_space(std::uint8_t c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f'; }

class HeaderReader {
public:
    explicit HeaderReader(const std::vector<std::uint8_t>& bytes) : b_(bytes) {}

    // Skips whitespace and '#' comments (which run to end of line).
    void skip_separators() {
        while (pos_ < b_.size()) {
            if (is_pnm_space(b_[pos_])) {
                ++pos_;
            } else if (b_[pos_] == '#') {
                while (pos_ < b_.size() && b_[pos_] != '\n' && b_[pos_] != '\r') ++pos_;
            } else {
                break;
            }
        }
    }

    std::size_t read_uint(const char* what) {
        const std::size_t start = pos_;
        std::size_t value = 0;
        while (pos_ < b_.size() && b_[pos_] >= '0' && b_[pos_] <= '9') {
            value = value * 10 + (b_[pos_] - '0');
            if (value > (1u << 24)) throw ParseError(std::string(what) + " is too large", start);
            ++pos_;
        }
        if (pos_ == start) {
            throw ParseError(pos_ >= b_.size() ? std::string("header ends before ") + what
                                               : std::string("expected ") + what,
                             pos_);
        }
        return value;
    }

    std::size_t pos() const { return pos_; }
    void advance(std::size_t n) { pos_ += n; }

private:
    const std::vector<std::uint8_t>& b_;
    std::size_t pos_ = 0;
};

std::vector<std::uint8_t> read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("write failed for " + path.string());
}

}  // namespace

Tensorf decode_pnm(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) {
        throw ParseError("not a binary PGM/PPM file (expected P5 or P6)", 0);
    }
    const std::size_t channels = bytes[1] == '5' ? 1 : 3;
    HeaderReader r(bytes);
    r.advance(2);
    if (r.pos() >= bytes.size() || !(is_pnm_space(bytes[r.pos()]) || bytes[r.pos()] == '#')) {
        throw ParseError("expected whitespace after magic number", r.pos());
    }
    r.skip_separators();
    const std::size_t width = r.read_uint("width");
    r.skip_separators();
    const std::size_t height = r.read_uint("height");
    r.skip_separators();
    const std::size_t maxval_at = r.pos();
    const std::size_t maxval = r.read_uint("maxval");
    if (maxval != 255) throw ParseError("unsupported maxval " + std::to_string(maxval) + " (only 255)", maxval_at);
    if (width == 0 || height == 0) throw ParseError("zero image extent", maxval_at);
    if (r.pos() >= bytes.size() || !is_pnm_space(bytes[r.pos()])) {
        throw ParseError("expected single whitespace before raster", r.pos());
    }
    r.advance(1);
    const std::size_t need = width * height * channels;
    const std::size_t have = bytes.size() - r.pos();
    if (have < need) {
        throw ParseError("truncated raster: need " + std::to_string(need) + " bytes, have " + std::to_string(have),
                         bytes.size());
    }
    if (have > need) throw ParseError("trailing bytes after raster", r.pos() + need);
    std::vector<float> data(need);
    const std::uint8_t* raster = bytes.data() + r.pos();
    const std::size_t hw = width * height;
    for (std::size_t i = 0; i < hw; ++i) {
        for (std::size_t c = 0; c < channels; ++c) data[c * hw + i] = static_cast<float>(raster[i * channels + c]) / 255.0f;
    }
    return Tensorf::from_data({1, channels, height, width}, std::move(data));
}

std::vector<std::uint8_t> encode_pnm(const Tensorf& image) {
    const Shape s = image.shape();
    if (s.n != 1 || (s.c != 1 && s.c != 3)) throw ShapeError("encode_pnm: expected (1,1|3,H,W), got " + s.str());
    const std::string header = std::string(s.c == 1 ? "P5" : "P6") + "\n" + std::to_string(s.w) + " " +
                               std::to_string(s.h) + "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    const std::size_t hw = s.spatial();
    out.reserve(out.size() + hw * s.c);
    const auto d = image.data();
    for (std::size_t i = 0; i < hw; ++i) {
        for (std::size_t c = 0; c < s.c; ++c) {
            const float v = std::clamp(d[c * hw + i], 0.0f, 1.0f);
            out.push_back(static_cast<std::uint8_t>(std::lround(v * 255.0f)));
        }
    }
    return out;
}

Tensorf load_image(const fs::path& path) {
    try {
        return decode_pnm(read_file(path));
    } catch (const ParseError& e) {
        throw ParseError(path.string() + ": " + e.what(), e.offset());
    }
}

void save_image(const Tensorf& image, const fs::path& path) { write_file(path, encode_pnm(image)); }

void save_mask(const BinaryMask& mask, const fs::path& path) {
    const Shape s = mask.shape;
    if (s.n != 1 || s.c != 1) throw ShapeError("save_mask: expected (1,1,H,W), got " + s.str());
    std::string header = "P5\n" + std::to_string(s.w) + " " + std::to_string(s.h) + "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    for (auto b : mask.bits) out.push_back(b ? 255 : 0);
    write_file(path, out);
}

BinaryMask load_mask(const fs::path& path) {
    const auto t = load_image(path);
    if (t.shape().c != 1) throw DataError(path.string() + ": mask must be a P5 file");
    BinaryMask m{t.shape(), std::vector<std::uint8_t>(t.numel())};
    const auto d = t.data();
    for (std::size_t i = 0; i < d.size(); ++i) {
        if (d[i] != 0.0f && d[i] != 1.0f) throw DataError(path.string() + ": mask values must be 0 or 255");
        m.bits[i] = d[i] == 1.0f ? 1 : 0;
    }
    return m;
}

// ---------------------------------------------------------------------------

void SyntheticSpec::validate() const {
    if (!(area_fraction_min > 0 && area_fraction_min <= area_fraction_max && area_fraction_max < 1)) {
        throw ConfigError("area fraction range must satisfy 0 < min <= max < 1");
    }
    if (height == 0 || width == 0) throw ConfigError("synthetic image size must be positive");
    if (channels != 1 && channels != 3) throw ConfigError("synthetic channels must be 1 or 3");
    if (!(blob_irregularity >= 0 && blob_irregularity < 0.5)) throw ConfigError("blob_irregularity must be in [0, 0.5)");
    if (!(noise_std >= 0)) throw ConfigError("noise_std must be >= 0");
    if (!(min_contrast >= 0 && min_contrast < 0.5)) throw ConfigError("min_contrast must be in [0, 0.5)");
    const double pixels = static_cast<double>(height * width);
    const double lo = std::max(1.0, std::ceil(area_fraction_min * pixels));
    const double hi = std::floor(area_fraction_max * pixels);
    if (lo > hi) {
        throw DataError("infeasible lesion area: no pixel count in [" + std::to_string(area_fraction_min) + ", " +
                        std::to_string(area_fraction_max) + "] of a " + std::to_string(height) + "x" +
                        std::to_string(width) + " image");
    }
}

namespace {

struct Blob {
    double cx, cy;
    double radius;
    double amp[4];
    double phase[4];

    double harmonics(double theta) const {
        double r = 1.0;
        for (int k = 0; k < 4; ++k) r += amp[k] * std::cos((k + 2) * theta + phase[k]);
        return r;
    }

    // Signed distance proxy: positive inside.
    double depth(double x, double y, double s) const {
        const double dx = x - cx;
        const double dy = y - cy;
        return s * radius * harmonics(std::atan2(dy, dx)) - std::hypot(dx, dy);
    }
};

// Per-pixel outline factor and center distance, so the area search does not
// redo the trigonometry for every trial scale.
struct BlobGrid {
    std::vector<double> outline;
    std::vector<double> dist;

    BlobGrid(const Blob& b, std::size_t h, std::size_t w) {
        outline.reserve(h * w);
        dist.reserve(h * w);
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) {
                const double dx = x + 0.5 - b.cx, dy = y + 0.5 - b.cy;
                outline.push_back(b.harmonics(std::atan2(dy, dx)));
                dist.push_back(std::hypot(dx, dy));
            }
        }
    }

    std::size_t pixels(double s, double radius) const {
        std::size_t count = 0;
        for (std::size_t i = 0; i < dist.size(); ++i) count += s * radius * outline[i] - dist[i] > 0 ? 1 : 0;
        return count;
    }
};

}  // namespace

Sample generate_synthetic_sample(const SyntheticSpec& spec, std::size_t index) {
    const std::size_t H = spec.height;
    const std::size_t W = spec.width;
    const double pixels = static_cast<double>(H * W);
    CounterRng rng(derive_key(spec.seed, index));

    const double target = std::exp(rng.uniform(std::log(spec.area_fraction_min), std::log(spec.area_fraction_max)));
    Blob blob{};
    const double side = static_cast<double>(std::min(H, W));
    for (int k = 0; k < 4; ++k) {
        blob.amp[k] = spec.blob_irregularity * rng.uniform(0.0, 1.0) / (k + 1);
        blob.phase[k] = rng.uniform(0.0, 2.0 * std::numbers::pi);
    }
    // Large lesions sit near the middle; small ones may wander.
    const double reach = std::max(0.0, 0.5 - std::sqrt(target)) * side * 0.8;
    blob.cx = W / 2.0 + rng.uniform(-reach, reach);
    blob.cy = H / 2.0 + rng.uniform(-reach, reach);
    blob.radius = std::sqrt(target * pixels / std::numbers::pi);

    // Scale the outline until the rasterized area matches the target.
    const std::size_t lo_px = static_cast<std::size_t>(std::max(1.0, std::ceil(spec.area_fraction_min * pixels)));
    const std::size_t hi_px = static_cast<std::size_t>(std::floor(spec.area_fraction_max * pixels));
    const std::size_t want = std::clamp(static_cast<std::size_t>(std::llround(target * pixels)), lo_px, hi_px);
    const BlobGrid grid(blob, H, W);
    auto blob_pixels = [&](double sc) { return grid.pixels(sc, blob.radius); };
    double s_lo = 0.0, s_hi = 1.0;
    while (blob_pixels(s_hi) < want) s_hi *= 2.0;
    for (int it = 0; it < 60; ++it) {
        const double mid = 0.5 * (s_lo + s_hi);
        if (blob_pixels(mid) < want) s_lo = mid; else s_hi = mid;
    }
    double scale = s_hi;
    std::size_t area = blob_pixels(scale);
    if (area > hi_px) {
        scale = s_lo;
        area = blob_pixels(scale);
    }
    if (area < lo_px || area > hi_px) {
        throw DataError("synthetic sample " + std::to_string(index) + ": cannot realize a lesion area inside the range");
    }

    // Intensities: light background, darker lesion.
    const std::size_t C = spec.channels;
    const double contrast = spec.min_contrast + 0.1 + rng.uniform(0.0, 0.25);
    std::vector<double> bg(C), fg(C);
    const double base = rng.uniform(0.6, 0.8);
    for (std::size_t c = 0; c < C; ++c) {
        bg[c] = base + rng.uniform(-0.05, 0.05);
        fg[c] = bg[c] - contrast + rng.uniform(-0.03, 0.03);
    }
    // Low-frequency texture: three random plane waves.
    double wave_k[3][2], wave_phase[3], wave_amp[3];
    for (int k = 0; k < 3; ++k) {
        const double ang = rng.uniform(0.0, 2.0 * std::numbers::pi);
        const double freq = rng.uniform(0.5, 2.0) * 2.0 * std::numbers::pi / side;
        wave_k[k][0] = freq * std::cos(ang);
        wave_k[k][1] = freq * std::sin(ang);
        wave_phase[k] = rng.uniform(0.0, 2.0 * std::numbers::pi);
        wave_amp[k] = rng.uniform(0.01, 0.04);
    }
    const double softness = rng.uniform(0.6, 1.5);

    std::vector<float> img(C * H * W);
    std::vector<float> mask(H * W);
    for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t x = 0; x < W; ++x) {
            const double px = x + 0.5, py = y + 0.5;
            const double d = blob.depth(px, py, scale);
            mask[y * W + x] = d > 0 ? 1.0f : 0.0f;
            const double alpha = 1.0 / (1.0 + std::exp(-d / softness));
            double tex = 0;
            for (int k = 0; k < 3; ++k) tex += wave_amp[k] * std::sin(wave_k[k][0] * px + wave_k[k][1] * py + wave_phase[k]);
            for (std::size_t c = 0; c < C; ++c) {
                const double v = alpha * fg[c] + (1.0 - alpha) * bg[c] + tex + rng.normal(0.0, spec.noise_std);
                img[c * H * W + y * W + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
            }
        }
    }
    char id[32];
    std::snprintf(id, sizeof id, "synth%05zu", index);
    return {Tensorf::from_data({1, C, H, W}, std::move(img)), Tensorf::from_data({1, 1, H, W}, std::move(mask)), id};
}

std::vector<Sample> generate_synthetic(const SyntheticSpec& spec) {
    spec.validate();
    std::vector<Sample> out;
    out.reserve(spec.count);
    for (std::size_t i = 0; i < spec.count; ++i) out.push_back(generate_synthetic_sample(spec, i));
    return out;
}

double lesion_contrast(const Sample& sample) {
    const Shape s = sample.image.shape();
    const std::size_t hw = s.spatial();
    double in = 0, out = 0;
    std::size_t nin = 0, nout = 0;
    for (std::size_t i = 0; i < hw; ++i) {
        double v = 0;
        for (std::size_t c = 0; c < s.c; ++c) v += sample.image.data()[c * hw + i];
        v /= static_cast<double>(s.c);
        if (sample.mask.data()[i] > 0.5f) {
            in += v;
            ++nin;
        } else {
            out += v;
            ++nout;
        }
    }
    if (nin == 0 || nout == 0) return 0.0;
    return std::abs(out / nout - in / nin);
}

// ---------------------------------------------------------------------------

void AugmentConfig::validate() const {
    if (!(rotation_degrees >= 0 && rotation_degrees <= 180)) throw ConfigError("rotation_degrees must be in [0, 180]");
    if (!(hflip_prob >= 0 && hflip_prob <= 1)) throw ConfigError("hflip_prob must be in [0, 1]");
    if (!(crop_fraction > 0 && crop_fraction <= 1)) throw ConfigError("crop_fraction must be in (0, 1]");
}

AugmentDraw draw_augment(const AugmentConfig& cfg, CounterRng& rng) {
    AugmentDraw d;
    d.angle_degrees = rng.uniform(-cfg.rotation_degrees, cfg.rotation_degrees);
    d.flip = rng.bernoulli(cfg.hflip_prob);
    d.crop_scale = rng.uniform(cfg.crop_fraction, 1.0);
    // Origin as a fraction of the free margin; scaled by the image size in apply.
    d.crop_x = rng.uniform();
    d.crop_y = rng.uniform();
    return d;
}

Sample apply_augment(const Sample& sample, const AugmentDraw& draw) {
    const Shape s = sample.image.shape();
    const std::size_t H = s.h, W = s.w, C = s.c;
    const double scale = std::clamp(draw.crop_scale, 1e-3, 1.0);
    const double ox = std::clamp(draw.crop_x, 0.0, 1.0) * (1.0 - scale) * W;
    const double oy = std::clamp(draw.crop_y, 0.0, 1.0) * (1.0 - scale) * H;
    const double theta = draw.angle_degrees * std::numbers::pi / 180.0;
    const double ct = std::cos(theta), st = std::sin(theta);
    const double cx = (W - 1) / 2.0, cy = (H - 1) / 2.0;
    const bool identity_rotation = draw.angle_degrees == 0.0;

    std::vector<float> img(C * H * W);
    std::vector<float> mask(H * W);
    const auto src_img = sample.image.data();
    const auto src_mask = sample.mask.data();
    for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t x = 0; x < W; ++x) {
            // Output pixel -> crop window -> unflipped -> unrotated source.
            double qx = ox + (x + 0.5) * scale - 0.5;
            double qy = oy + (y + 0.5) * scale - 0.5;
            if (draw.flip) qx = (W - 1) - qx;
            double sx = qx, sy = qy;
            if (!identity_rotation) {
                const double dx = qx - cx, dy = qy - cy;
                sx = cx + ct * dx + st * dy;
                sy = cy - st * dx + ct * dy;
            }
            sx = std::clamp(sx, 0.0, static_cast<double>(W - 1));
            sy = std::clamp(sy, 0.0, static_cast<double>(H - 1));

            const std::size_t nx = static_cast<std::size_t>(std::lround(sx));
            const std::size_t ny = static_cast<std::size_t>(std::lround(sy));
            mask[y * W + x] = src_mask[ny * W + nx];

            const std::size_t x0 = static_cast<std::size_t>(std::floor(sx));
            const std::size_t y0 = static_cast<std::size_t>(std::floor(sy));
            const std::size_t x1 = std::min(x0 + 1, W - 1);
            const std::size_t y1 = std::min(y0 + 1, H - 1);
            const double fx = sx - x0, fy = sy - y0;
            for (std::size_t c = 0; c < C; ++c) {
                const float* p = src_img.data() + c * H * W;
                if (fx == 0.0 && fy == 0.0) {
                    img[c * H * W + y * W + x] = p[y0 * W + x0];
                    continue;
                }
                const double v = (1 - fy) * ((1 - fx) * p[y0 * W + x0] + fx * p[y0 * W + x1]) +
                                 fy * ((1 - fx) * p[y1 * W + x0] + fx * p[y1 * W + x1]);
                img[c * H * W + y * W + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
            }
        }
    }
    return {Tensorf::from_data(s, std::move(img)), Tensorf::from_data(sample.mask.shape(), std::move(mask)), sample.id};
}

Sample augment(const Sample& sample, const AugmentConfig& cfg, CounterRng& rng) {
    return apply_augment(sample, draw_augment(cfg, rng));
}

template <typename T>
std::vector<Tensor<T>> pyramid_inputs(const Tensor<T>& image, std::size_t stages) {
    const Shape s = image.shape();
    const std::size_t div = std::size_t{1} << stages;
    if (s.h % div != 0 || s.w % div != 0) {
        throw ShapeError("pyramid_inputs: " + s.str() + " is not divisible by 2^" + std::to_string(stages));
    }
    std::vector<Tensor<T>> out;
    Tensor<T> cur = image;
    for (std::size_t k = 0; k < stages; ++k) {
        cur = avgpool2x2(cur);
        out.push_back(cur);
    }
    return out;
}

template std::vector<Tensor<float>> pyramid_inputs(const Tensor<float>&, std::size_t);
template std::vector<Tensor<double>> pyramid_inputs(const Tensor<double>&, std::size_t);

// ---------------------------------------------------------------------------

std::vector<Sample> load_split(const fs::path& root, const std::string& split) {
    const fs::path dir = root / split;
    if (!fs::is_directory(dir)) throw DataError("dataset split directory not found: " + dir.string());
    std::vector<fs::path> images;
    for (const auto& entry : fs::directory_iterator(dir)) {
        const auto& p = entry.path();
        const auto stem = p.stem().string();
        if (stem.size() >= 5 && stem.ends_with("_mask")) continue;
        if (p.extension() == ".ppm" || p.extension() == ".pgm") images.push_back(p);
    }
    std::sort(images.begin(), images.end());
    if (images.empty()) throw DataError("no images in " + dir.string());
    std::vector<Sample> out;
    for (const auto& p : images) {
        const auto id = p.stem().string();
        const fs::path mask_path = dir / (id + "_mask.pgm");
        if (!fs::exists(mask_path)) throw DataError("missing mask for " + p.string());
        Sample s{load_image(p), to_tensor<float>(load_mask(mask_path)), id};
        const Shape is = s.image.shape();
        const Shape ms = s.mask.shape();
        if (is.h != ms.h || is.w != ms.w) throw DataError("image and mask extents differ for " + id);
        if (!out.empty() && out.front().image.shape() != is) throw DataError("images in a split must share a shape");
        out.push_back(std::move(s));
    }
    return out;
}

void save_split(const std::vector<Sample>& samples, const fs::path& root, const std::string& split) {
    const fs::path dir = root / split;
    fs::create_directories(dir);
    for (const auto& s : samples) {
        const char* ext = s.image.shape().c == 1 ? ".pgm" : ".ppm";
        save_image(s.image, dir / (s.id + ext));
        save_mask(binarize(s.mask), dir / (s.id + "_mask.pgm"));
    }
}

Batch make_batch(const std::vector<Sample>& samples, const std::vector<std::size_t>& indices) {
    if (indices.empty()) throw ContractError("make_batch: empty selection");
    std::vector<Tensorf> images, masks;
    for (auto i : indices) {
        images.push_back(samples.at(i).image);
        masks.push_back(samples.at(i).mask);
    }
    NoGradGuard guard;
    return {concat(images, 0), concat(masks, 0)};
}

}  // namespace donet
