#include "donet/rcem.hpp"

#include "donet/ops.hpp"
#include "donet/rng.hpp"

namespace donet {

void validate_rates(const std::vector<std::size_t>& rates) {
    if (rates.empty()) throw ConfigError("dilation rate list is empty");
    for (std::size_t i = 0; i < rates.size(); ++i) {
        if (rates[i] == 0) throw ConfigError("dilation rates must be positive");
        if (i > 0 && rates[i] <= rates[i - 1]) throw ConfigError("dilation rates must be strictly ascending");
    }
}

template <typename T>
RcemBlock<T>::RcemBlock(std::size_t channels, std::vector<std::size_t> rates, std::uint64_t seed)
    : dilation_rates(std::move(rates)) {
    validate_rates(dilation_rates);
    for (std::size_t t = 0; t < dilation_rates.size(); ++t) {
        const std::size_t r = dilation_rates[t];
        bank.emplace_back(channels, channels, 3, 1, r, r, derive_key(seed, 100 + t));
    }
    cell = ConvLstmCell<T>(channels, channels, derive_key(seed, 1));
}

template <typename T>
typename RcemBlock<T>::Output RcemBlock<T>::forward(const Tensor<T>& features) const {
    const Shape s = features.shape();
    if (s.c != channels()) {
        throw ShapeError("rcem_forward: input " + s.str() + " does not match block width " +
                         std::to_string(channels()));
    }
    auto state = cell.zero_state(s.n, s.h, s.w);
    Output out;
    for (const auto& conv : bank) {
        state = cell.step(conv.forward(features), state);
        out.bundle.states.push_back(state.h);
    }
    out.final_state = state.h;
    return out;
}

template <typename T>
void RcemBlock<T>::parameters(const std::string& prefix, NamedTensors<T>& out) const {
    for (std::size_t t = 0; t < bank.size(); ++t) bank[t].parameters(prefix + ".bank" + std::to_string(t), out);
    cell.parameters(prefix + ".cell", out);
}

template <typename T>
MultiScaleSkip<T>::MultiScaleSkip(std::size_t channels, std::vector<std::size_t> rates, std::uint64_t seed)
    : dilation_rates(std::move(rates)) {
    validate_rates(dilation_rates);
    lift = ConvTranspose2d<T>(2 * channels, channels, 2, 2, 0, derive_key(seed, 1));
    zproj = ConvTranspose2d<T>(2 * channels, channels, 2, 2, 0, derive_key(seed, 2));
    for (std::size_t t = 0; t < dilation_rates.size(); ++t) {
        const std::size_t r = dilation_rates[t];
        rbank.emplace_back(channels, channels, 3, 1, r, r, derive_key(seed, 100 + t));
        gates.emplace_back(channels, channels, derive_key(seed, 200 + t));
    }
}

template <typename T>
Tensor<T> MultiScaleSkip<T>::forward(const SkipBundle<T>& bundle, const Tensor<T>& r) const {
    if (bundle.size() != gates.size()) {
        throw ShapeError("multi_scale_skip: bundle has " + std::to_string(bundle.size()) + " states, expected " +
                         std::to_string(gates.size()));
    }
    const Shape hs = bundle.states.front().shape();
    const Shape rs = r.shape();
    if (rs.n != hs.n || 2 * rs.h != hs.h || 2 * rs.w != hs.w || rs.c != 2 * hs.c) {
        throw ShapeError("multi_scale_skip: decoder feature " + rs.str() + " must be half the resolution and twice " +
                         "the channels of " + hs.str());
    }
    const auto lifted = lift.forward(r);
    std::vector<Tensor<T>> parts;
    parts.reserve(gates.size() + 1);
    for (std::size_t t = 0; t < gates.size(); ++t) {
        if (bundle.states[t].shape() != hs) throw ShapeError("multi_scale_skip: bundle states are not congruent");
        parts.push_back(gates[t].forward(bundle.states[t], rbank[t].forward(lifted)));
    }
    parts.push_back(zproj.forward(r));
    return concat_channels(parts);
}

template <typename T>
void MultiScaleSkip<T>::parameters(const std::string& prefix, NamedTensors<T>& out) const {
    lift.parameters(prefix + ".lift", out);
    for (std::size_t t = 0; t < rbank.size(); ++t) {
        rbank[t].parameters(prefix + ".rbank" + std::to_string(t), out);
        gates[t].parameters(prefix + ".gate" + std::to_string(t), out);
    }
    zproj.parameters(prefix + ".zproj", out);
}

template struct RcemBlock<float>;
template struct RcemBlock<double>;
template struct MultiScaleSkip<float>;
template struct MultiScaleSkip<double>;

}  // namespace donet
