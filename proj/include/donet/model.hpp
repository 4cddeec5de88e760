#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "donet/nn.hpp"
#include "donet/rcem.hpp"

namespace donet {

struct DonetConfig {
    std::size_t input_channels = 3;
    std::size_t input_height = 64;
    std::size_t input_width = 64;
    std::size_t base_channels = 16;
    std::size_t stages = 4;
    std::vector<std::size_t> dilation_rates{1, 2, 4, 8};
    bool use_rcem = true;
    bool use_dual = true;
    bool use_pyramid_inputs = true;

    // Width of encoder stage k: base * 2^k.
    std::size_t stage_channels(std::size_t k) const { return base_channels << k; }
    // Throws ConfigError on an unusable configuration.
    void validate() const;
};

// Probability maps of the two decoders and their element-wise product.
// With a single decoder, y2 and y_joint alias y1.
template <typename T>
struct PredictionTriple {
    Tensor<T> y1;
    Tensor<T> y2;
    Tensor<T> y_joint;
    bool dual = true;
};

template <typename T>
struct EncoderStage {
    Conv2d<T> conv;
    BatchNorm2d<T> bn;
    Conv2d<T> pyramid;  // undefined weight when the stage takes no pyramid input
    RcemBlock<T> rcem;  // empty bank when RCEM is disabled
};

template <typename T>
struct DecoderStage {
    MultiScaleSkip<T> skip;  // used with RCEM
    ConvTranspose2d<T> up;   // plain skip path without RCEM
    Conv2d<T> fuse;
    BatchNorm2d<T> bn;
};

template <typename T>
struct Decoder {
    std::vector<DecoderStage<T>> stages;  // index k serves encoder stage k
    Conv2d<T> head;
};

// Shared encoder (conv-bn-relu, RCEM, maxpool per stage, pyramid inputs) and
// one or two structurally identical decoders joined by an element-wise product.
template <typename T>
class DonetModel {
public:
    DonetModel() = default;
    DonetModel(const DonetConfig& config, std::uint64_t seed);

    const DonetConfig& config() const { return config_; }
    std::uint64_t seed() const { return seed_; }

    PredictionTriple<T> forward(const Tensor<T>& image, Mode mode);

    // encoder.*, rcem.*, decoder1.*, decoder2.* in a fixed order.
    NamedTensors<T> parameters() const;
    // Batchnorm running statistics, in the same order as parameters().
    NamedTensors<T> buffers() const;
    void load_buffer(const std::string& name, std::span<const T> values);
    std::size_t parameter_count() const;
    std::size_t decoder_count() const { return decoders_.size(); }

private:
    struct EncodedFeatures {
        Tensor<T> bottleneck;
        std::vector<SkipBundle<T>> skips;
    };

    EncodedFeatures encode(const Tensor<T>& image, Mode mode);
    Tensor<T> decode(Decoder<T>& decoder, const EncodedFeatures& enc, Mode mode);
    std::map<std::string, BatchNorm2d<T>*> batchnorm_index();

    DonetConfig config_;
    std::uint64_t seed_ = 0;
    std::vector<EncoderStage<T>> encoder_;
    EncoderStage<T> bottleneck_;
    std::vector<Decoder<T>> decoders_;
};

template <typename T>
DonetModel<T> build(const DonetConfig& config, std::uint64_t seed) {
    return DonetModel<T>(config, seed);
}

}  // namespace donet
