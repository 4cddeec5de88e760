#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "donet/metrics.hpp"
#include "donet/rng.hpp"
#include "donet/tensor.hpp"

namespace donet {

// ---------------------------------------------------------------------------
// PNM codec: binary P5 (gray) and P6 (RGB), maxval 255.

// Decodes to a (1, C, H, W) tensor scaled to [0, 1]. Throws ParseError with
// the offending byte offset.
Tensorf decode_pnm(const std::vector<std::uint8_t>& bytes);
// 1 channel -> P5, 3 channels -> P6. Values are clamped to [0,1] and rounded.
std::vector<std::uint8_t> encode_pnm(const Tensorf& image);

Tensorf load_image(const std::filesystem::path& path);
void save_image(const Tensorf& image, const std::filesystem::path& path);

// Mask files are P5 with values {0, 255}.
void save_mask(const BinaryMask& mask, const std::filesystem::path& path);
BinaryMask load_mask(const std::filesystem::path& path);

// ---------------------------------------------------------------------------

struct Sample {
    Tensorf image;  // (1, C, H, W) in [0, 1]
    Tensorf mask;   // (1, 1, H, W) in {0, 1}
    std::string id;
};

struct SyntheticSpec {
    std::size_t count = 16;
    std::size_t height = 64;
    std::size_t width = 64;
    std::size_t channels = 3;
    double area_fraction_min = 0.003;
    double area_fraction_max = 0.987;
    double blob_irregularity = 0.35;  // relative amplitude of the radial harmonics
    double noise_std = 0.04;
    double min_contrast = 0.2;  // lower bound on lesion/background mean intensity gap
    std::uint64_t seed = 1;

    void validate() const;
};

// Lesion-like images: textured background, one irregular blob with a soft
// edge, additive noise. Sample i depends only on (seed, i).
std::vector<Sample> generate_synthetic(const SyntheticSpec& spec);
Sample generate_synthetic_sample(const SyntheticSpec& spec, std::size_t index);

// Mean channel-averaged intensity inside minus outside the mask.
double lesion_contrast(const Sample& sample);

struct AugmentConfig {
    double rotation_degrees = 20.0;  // angle drawn from [-r, r]
    double hflip_prob = 0.5;
    double crop_fraction = 0.85;  // crop side drawn from [crop_fraction, 1] of the image side

    void validate() const;
};

// One realized augmentation.
struct AugmentDraw {
    double angle_degrees = 0.0;
    bool flip = false;
    double crop_scale = 1.0;  // crop side / image side
    double crop_x = 0.0;      // crop origin in pixels
    double crop_y = 0.0;
};

AugmentDraw draw_augment(const AugmentConfig& cfg, CounterRng& rng);
// Rotation about the center (bilinear image, nearest mask, edge clamped),
// then horizontal flip, then crop resized back to the full extent.
Sample apply_augment(const Sample& sample, const AugmentDraw& draw);
Sample augment(const Sample& sample, const AugmentConfig& cfg, CounterRng& rng);

// Entry k (k = 1..stages) is the image average-pooled k times.
template <typename T>
std::vector<Tensor<T>> pyramid_inputs(const Tensor<T>& image, std::size_t stages);

// ---------------------------------------------------------------------------
// Dataset directories: <root>/<split>/<id>.ppm (or .pgm) + <id>_mask.pgm

std::vector<Sample> load_split(const std::filesystem::path& root, const std::string& split);
void save_split(const std::vector<Sample>& samples, const std::filesystem::path& root, const std::string& split);

struct Batch {
    Tensorf images;
    Tensorf masks;
};

// Stacks the selected samples along the batch axis.
Batch make_batch(const std::vector<Sample>& samples, const std::vector<std::size_t>& indices);

}  // namespace donet
