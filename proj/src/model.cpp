#include "donet/model.hpp"

#include "donet/data.hpp"
#include "donet/ops.hpp"
#include "donet/rng.hpp"

namespace donet {

void DonetConfig::validate() const {
    if (stages < 1) throw ConfigError("stages must be >= 1");
    if (input_channels < 1) throw ConfigError("input_channels must be >= 1");
    if (base_channels < 1) throw ConfigError("base_channels must be >= 1");
    const std::size_t div = std::size_t{1} << stages;
    if (input_height == 0 || input_width == 0 || input_height % div != 0 || input_width % div != 0) {
        throw ConfigError("input size " + std::to_string(input_height) + "x" + std::to_string(input_width) +
                          " is not divisible by 2^stages = " + std::to_string(div));
    }
    validate_rates(dilation_rates);
}

template <typename T>
DonetModel<T>::DonetModel(const DonetConfig& config, std::uint64_t seed) : config_(config), seed_(seed) {
    config_.validate();
    const auto& cfg = config_;
    const std::size_t S = cfg.stages;
    auto seed_for = [seed](const std::string& name) { return param_seed(seed, name); };

    for (std::size_t k = 0; k < S; ++k) {
        const std::string p = "encoder.stage" + std::to_string(k);
        const std::size_t ck = cfg.stage_channels(k);
        EncoderStage<T> st;
        std::size_t in = cfg.input_channels;
        if (k > 0) {
            const std::size_t prev = cfg.stage_channels(k - 1);
            in = prev;
            if (cfg.use_pyramid_inputs) {
                st.pyramid = Conv2d<T>(cfg.input_channels, prev, 3, 1, 1, 1, seed_for(p + ".pyramid"));
                in += prev;
            }
        }
        st.conv = Conv2d<T>(in, ck, 3, 1, 1, 1, seed_for(p + ".conv"));
        st.bn = BatchNorm2d<T>(ck);
        if (cfg.use_rcem) st.rcem = RcemBlock<T>(ck, cfg.dilation_rates, seed_for("rcem.stage" + std::to_string(k)));
        encoder_.push_back(std::move(st));
    }

    {
        const std::size_t prev = cfg.stage_channels(S - 1);
        std::size_t in = prev;
        if (cfg.use_pyramid_inputs) {
            bottleneck_.pyramid = Conv2d<T>(cfg.input_channels, prev, 3, 1, 1, 1, seed_for("encoder.bottleneck.pyramid"));
            in += prev;
        }
        bottleneck_.conv = Conv2d<T>(in, 2 * prev, 3, 1, 1, 1, seed_for("encoder.bottleneck.conv"));
        bottleneck_.bn = BatchNorm2d<T>(2 * prev);
    }

    const std::size_t T_steps = cfg.dilation_rates.size();
    const std::size_t n_decoders = cfg.use_dual ? 2 : 1;
    for (std::size_t d = 0; d < n_decoders; ++d) {
        const std::string p = "decoder" + std::to_string(d + 1);
        Decoder<T> dec;
        for (std::size_t k = 0; k < S; ++k) {
            const std::string q = p + ".stage" + std::to_string(k);
            const std::size_t ck = cfg.stage_channels(k);
            DecoderStage<T> st;
            std::size_t fused_in = 0;
            if (cfg.use_rcem) {
                st.skip = MultiScaleSkip<T>(ck, cfg.dilation_rates, seed_for(q + ".skip"));
                fused_in = (T_steps + 1) * ck;
            } else {
                st.up = ConvTranspose2d<T>(2 * ck, ck, 2, 2, 0, seed_for(q + ".up"));
                fused_in = 2 * ck;
            }
            st.fuse = Conv2d<T>(fused_in, ck, 3, 1, 1, 1, seed_for(q + ".fuse"));
            st.bn = BatchNorm2d<T>(ck);
            dec.stages.push_back(std::move(st));
        }
        dec.head = Conv2d<T>(cfg.stage_channels(0), 1, 1, 1, 0, 1, seed_for(p + ".head"));
        decoders_.push_back(std::move(dec));
    }
}

template <typename T>
typename DonetModel<T>::EncodedFeatures DonetModel<T>::encode(const Tensor<T>& image, Mode mode) {
    const auto& cfg = config_;
    const Shape expected{image.shape().n, cfg.input_channels, cfg.input_height, cfg.input_width};
    if (image.shape() != expected || image.shape().n == 0) {
        throw ShapeError("forward: image " + image.shape().str() + " does not match configured input " + expected.str());
    }
    std::vector<Tensor<T>> pyramid;
    if (cfg.use_pyramid_inputs) pyramid = pyramid_inputs(image, cfg.stages);

    EncodedFeatures enc;
    Tensor<T> x = image;
    for (std::size_t k = 0; k < encoder_.size(); ++k) {
        auto& st = encoder_[k];
        if (k > 0 && cfg.use_pyramid_inputs) x = concat_channels<T>({x, relu(st.pyramid.forward(pyramid[k - 1]))});
        Tensor<T> f = relu(st.bn.forward(st.conv.forward(x), mode));
        SkipBundle<T> bundle;
        if (cfg.use_rcem) {
            auto out = st.rcem.forward(f);
            f = out.final_state;
            bundle = std::move(out.bundle);
        } else {
            bundle.states.push_back(f);
        }
        enc.skips.push_back(std::move(bundle));
        x = maxpool2x2(f);
    }
    if (cfg.use_pyramid_inputs) {
        x = concat_channels<T>({x, relu(bottleneck_.pyramid.forward(pyramid[cfg.stages - 1]))});
    }
    enc.bottleneck = relu(bottleneck_.bn.forward(bottleneck_.conv.forward(x), mode));
    return enc;
}

template <typename T>
Tensor<T> DonetModel<T>::decode(Decoder<T>& decoder, const EncodedFeatures& enc, Mode mode) {
    Tensor<T> r = enc.bottleneck;
    for (std::size_t k = decoder.stages.size(); k-- > 0;) {
        auto& st = decoder.stages[k];
        Tensor<T> merged = config_.use_rcem ? st.skip.forward(enc.skips[k], r)
                                            : concat_channels<T>({enc.skips[k].states.front(), st.up.forward(r)});
        r = relu(st.bn.forward(st.fuse.forward(merged), mode));
    }
    return sigmoid(decoder.head.forward(r));
}

template <typename T>
PredictionTriple<T> DonetModel<T>::forward(const Tensor<T>& image, Mode mode) {
    const auto enc = encode(image, mode);
    PredictionTriple<T> out;
    out.y1 = decode(decoders_[0], enc, mode);
    if (decoders_.size() == 2) {
        out.y2 = decode(decoders_[1], enc, mode);
        out.y_joint = hadamard(out.y1, out.y2);
        out.dual = true;
    } else {
        out.y2 = out.y1;
        out.y_joint = out.y1;
        out.dual = false;
    }
    return out;
}

template <typename T>
NamedTensors<T> DonetModel<T>::parameters() const {
    NamedTensors<T> out;
    for (std::size_t k = 0; k < encoder_.size(); ++k) {
        const std::string p = "encoder.stage" + std::to_string(k);
        const auto& st = encoder_[k];
        if (st.pyramid.weight.defined()) st.pyramid.parameters(p + ".pyramid", out);
        st.conv.parameters(p + ".conv", out);
        st.bn.parameters(p + ".bn", out);
    }
    if (bottleneck_.pyramid.weight.defined()) bottleneck_.pyramid.parameters("encoder.bottleneck.pyramid", out);
    bottleneck_.conv.parameters("encoder.bottleneck.conv", out);
    bottleneck_.bn.parameters("encoder.bottleneck.bn", out);
    if (config_.use_rcem) {
        for (std::size_t k = 0; k < encoder_.size(); ++k) encoder_[k].rcem.parameters("rcem.stage" + std::to_string(k), out);
    }
    for (std::size_t d = 0; d < decoders_.size(); ++d) {
        const std::string p = "decoder" + std::to_string(d + 1);
        const auto& dec = decoders_[d];
        for (std::size_t k = 0; k < dec.stages.size(); ++k) {
            const std::string q = p + ".stage" + std::to_string(k);
            const auto& st = dec.stages[k];
            if (config_.use_rcem) {
                st.skip.parameters(q + ".skip", out);
            } else {
                st.up.parameters(q + ".up", out);
            }
            st.fuse.parameters(q + ".fuse", out);
            st.bn.parameters(q + ".bn", out);
        }
        dec.head.parameters(p + ".head", out);
    }
    return out;
}

template <typename T>
std::map<std::string, BatchNorm2d<T>*> DonetModel<T>::batchnorm_index() {
    std::map<std::string, BatchNorm2d<T>*> index;
    for (std::size_t k = 0; k < encoder_.size(); ++k) index["encoder.stage" + std::to_string(k) + ".bn"] = &encoder_[k].bn;
    index["encoder.bottleneck.bn"] = &bottleneck_.bn;
    for (std::size_t d = 0; d < decoders_.size(); ++d) {
        for (std::size_t k = 0; k < decoders_[d].stages.size(); ++k) {
            index["decoder" + std::to_string(d + 1) + ".stage" + std::to_string(k) + ".bn"] = &decoders_[d].stages[k].bn;
        }
    }
    return index;
}

template <typename T>
NamedTensors<T> DonetModel<T>::buffers() const {
    NamedTensors<T> out;
    for (std::size_t k = 0; k < encoder_.size(); ++k) encoder_[k].bn.buffers("encoder.stage" + std::to_string(k) + ".bn", out);
    bottleneck_.bn.buffers("encoder.bottleneck.bn", out);
    for (std::size_t d = 0; d < decoders_.size(); ++d) {
        for (std::size_t k = 0; k < decoders_[d].stages.size(); ++k) {
            decoders_[d].stages[k].bn.buffers("decoder" + std::to_string(d + 1) + ".stage" + std::to_string(k) + ".bn",
                                              out);
        }
    }
    return out;
}

template <typename T>
void DonetModel<T>::load_buffer(const std::string& name, std::span<const T> values) {
    const auto dot = name.rfind('.');
    if (dot == std::string::npos) throw ContractError("malformed buffer name " + name);
    auto index = batchnorm_index();
    auto it = index.find(name.substr(0, dot));
    if (it == index.end()) throw ContractError("unknown buffer " + name);
    it->second->load_buffer(name.substr(dot + 1), values);
}

template <typename T>
std::size_t DonetModel<T>::parameter_count() const {
    std::size_t total = 0;
    for (const auto& p : parameters()) total += p.tensor.numel();
    return total;
}

template class DonetModel<float>;
template class DonetModel<double>;

}  // namespace donet
