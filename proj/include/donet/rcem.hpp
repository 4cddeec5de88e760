#pragma once

#include <cstdint>
#include <vector>

#include "donet/nn.hpp"

namespace donet {

// Context states {H_t} captured at one encoder stage.
template <typename T>
struct SkipBundle {
    std::vector<Tensor<T>> states;

    std::size_t size() const { return states.size(); }
};

// Recurrent context encoding: a bank of "same"-padded dilated 3x3
// convolutions with ascending rates, read in order by a ConvLSTM whose hidden
// width equals the input width.
template <typename T>
struct RcemBlock {
    std::vector<std::size_t> dilation_rates;
    std::vector<Conv2d<T>> bank;
    ConvLstmCell<T> cell;

    RcemBlock() = default;
    RcemBlock(std::size_t channels, std::vector<std::size_t> rates, std::uint64_t seed);

    std::size_t steps() const { return bank.size(); }
    std::size_t channels() const { return cell.hidden; }

    struct Output {
        Tensor<T> final_state;  // H_T
        SkipBundle<T> bundle;
    };

    Output forward(const Tensor<T>& features) const;
    void parameters(const std::string& prefix, NamedTensors<T>& out) const;
};

template <typename T>
typename RcemBlock<T>::Output rcem_forward(const RcemBlock<T>& block, const Tensor<T>& features) {
    return block.forward(features);
}

// Decoder side of the multi-scale skip. R (channels 2C, half resolution) is
// lifted to the skip resolution by one shared stride-2 transposed conv, then
// each rate of the bank produces R_t, which gates H_t; a second transposed
// conv of R gives Z. Output: concat(A_1..A_T, Z) with (T+1)*C channels.
template <typename T>
struct MultiScaleSkip {
    std::vector<std::size_t> dilation_rates;
    ConvTranspose2d<T> lift;
    std::vector<Conv2d<T>> rbank;
    std::vector<AttentionGate<T>> gates;
    ConvTranspose2d<T> zproj;

    MultiScaleSkip() = default;
    // `channels` is C, the width of each H_t; R carries 2C.
    MultiScaleSkip(std::size_t channels, std::vector<std::size_t> rates, std::uint64_t seed);

    std::size_t output_channels() const { return (gates.size() + 1) * lift.weight.shape().c; }

    Tensor<T> forward(const SkipBundle<T>& bundle, const Tensor<T>& decoder_feature) const;
    void parameters(const std::string& prefix, NamedTensors<T>& out) const;
};

template <typename T>
Tensor<T> multi_scale_skip(const MultiScaleSkip<T>& skip, const SkipBundle<T>& bundle, const Tensor<T>& r) {
    return skip.forward(bundle, r);
}

void validate_rates(const std::vector<std::size_t>& rates);

}  // namespace donet
