#include "donet/gradcheck_suite.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

#include "donet/data.hpp"
#include "donet/losses.hpp"
#include "donet/model.hpp"
#include "donet/nn.hpp"
#include "donet/ops.hpp"
#include "donet/rng.hpp"

namespace donet {

namespace {

using Fn = std::function<Tensord()>;

// Scalar readout with a fixed random weighting, so every output element
// contributes a distinct slope.
Tensord probe(const Tensord& out, std::uint64_t seed) {
    const Tensord r = Tensord::normal(out.shape(), 0.0, 1.0, seed);
    return sum(hadamard(out, r));
}

Tensord leaf(Shape s, std::uint64_t seed, double stddev = 1.0) { return Tensord::normal(s, 0.0, stddev, seed, true); }

// Probabilities in [0.05, 0.95] and a binary target with both classes.
std::pair<Tensord, Tensord> loss_inputs(Shape s, std::uint64_t seed) {
    CounterRng rng(seed);
    std::vector<double> p(s.numel()), y(s.numel());
    for (auto& v : p) v = rng.uniform(0.05, 0.95);
    for (auto& v : y) v = rng.bernoulli(0.4) ? 1.0 : 0.0;
    y[0] = 1.0;
    y[1] = 0.0;
    return {Tensord::from_data(s, std::move(p), true), Tensord::from_data(s, std::move(y))};
}

struct Recorder {
    std::vector<GradCheckCase>& out;
    GradCheckOptions opt;
    std::size_t index;

    void check(const std::string& op, const std::string& settings, const std::string& wrt, const Fn& fn,
               Tensord target) {
        GradCheckCase c;
        c.op = op;
        c.name = op + "[" + settings + "] wrt " + wrt + " #" + std::to_string(index);
        c.report = grad_check_param(fn, target, opt);
        out.push_back(std::move(c));
    }
};

std::size_t pick(CounterRng& rng, std::size_t lo, std::size_t hi) { return lo + rng.below(hi - lo + 1); }

void conv_case(Recorder& r, CounterRng& rng, std::size_t dilation) {
    const std::size_t n = pick(rng, 1, 2), cin = pick(rng, 1, 3), cout = pick(rng, 1, 3);
    const std::size_t h = pick(rng, 4, 8), w = pick(rng, 4, 8);
    const std::size_t stride = (dilation == 1 && rng.bernoulli(0.3)) ? 2 : 1;
    const std::uint64_t s = rng.next_u64();
    Tensord x = leaf({n, cin, h, w}, s);
    Tensord wt = leaf({cout, cin, 3, 3}, s + 1, 0.5);
    Tensord b = leaf({1, cout, 1, 1}, s + 2);
    const Fn f = [=] { return probe(conv2d(x, wt, b, stride, dilation, dilation), s + 3); };
    const std::string settings = "d=" + std::to_string(dilation) + ",s=" + std::to_string(stride);
    r.check("conv2d", settings, "input", f, x);
    r.check("conv2d", settings, "weight", f, wt);
    r.check("conv2d", settings, "bias", f, b);
}

void tconv_case(Recorder& r, CounterRng& rng) {
    const std::size_t n = pick(rng, 1, 2), cin = pick(rng, 1, 3), cout = pick(rng, 1, 3);
    const std::size_t h = pick(rng, 2, 5), w = pick(rng, 2, 5);
    const bool k3 = rng.bernoulli(0.5);
    const std::size_t k = k3 ? 3 : 2, pad = k3 ? 1 : 0;
    const std::uint64_t s = rng.next_u64();
    Tensord x = leaf({n, cin, h, w}, s);
    Tensord wt = leaf({cin, cout, k, k}, s + 1, 0.5);
    Tensord b = leaf({1, cout, 1, 1}, s + 2);
    const Fn f = [=] { return probe(conv_transpose2d(x, wt, b, 2, pad), s + 3); };
    const std::string settings = "k=" + std::to_string(k) + ",s=2,p=" + std::to_string(pad);
    r.check("conv_transpose2d", settings, "input", f, x);
    r.check("conv_transpose2d", settings, "weight", f, wt);
    r.check("conv_transpose2d", settings, "bias", f, b);
}

void maxpool_case(Recorder& r, CounterRng& rng) {
    const std::size_t n = pick(rng, 1, 2), c = pick(rng, 1, 3);
    const std::size_t h = 2 * pick(rng, 1, 4), w = 2 * pick(rng, 1, 4);
    const std::uint64_t s = rng.next_u64();
    Tensord x = leaf({n, c, h, w}, s);
    r.check("maxpool2x2", "", "input", [=] { return probe(maxpool2x2(x), s + 1); }, x);
}

void batchnorm_case(Recorder& r, CounterRng& rng) {
    const std::size_t n = pick(rng, 2, 3), c = pick(rng, 1, 3), h = pick(rng, 2, 5), w = pick(rng, 2, 5);
    const std::uint64_t s = rng.next_u64();
    Tensord x = leaf({n, c, h, w}, s);
    BatchNorm2d<double> bn(c);
    Tensord gamma = leaf({1, c, 1, 1}, s + 1);
    Tensord beta = leaf({1, c, 1, 1}, s + 2);
    bn.gamma = gamma;
    bn.beta = beta;
    const Fn f = [=]() mutable { return probe(bn.forward(x, Mode::train), s + 3); };
    r.check("batchnorm", "train", "input", f, x);
    r.check("batchnorm", "train", "gamma", f, gamma);
    r.check("batchnorm", "train", "beta", f, beta);
}

void lstm_case(Recorder& r, CounterRng& rng) {
    const std::size_t n = pick(rng, 1, 2), in = pick(rng, 1, 3), hid = pick(rng, 1, 3);
    const std::size_t h = pick(rng, 3, 5), w = pick(rng, 3, 5);
    const std::uint64_t s = rng.next_u64();
    ConvLstmCell<double> cell(in, hid, s);
    // Nonzero peepholes so their gradients are exercised.
    cell.w_ci = leaf({1, hid, 1, 1}, s + 10, 0.5);
    cell.w_cf = leaf({1, hid, 1, 1}, s + 11, 0.5);
    cell.w_co = leaf({1, hid, 1, 1}, s + 12, 0.5);
    Tensord x = leaf({n, in, h, w}, s + 1);
    Tensord h0 = leaf({n, hid, h, w}, s + 2, 0.5);
    Tensord c0 = leaf({n, hid, h, w}, s + 3, 0.5);
    const Fn f = [=] {
        const auto st = cell.step(x, {h0, c0});
        return add(probe(st.h, s + 4), probe(st.c, s + 5));
    };
    r.check("convlstm", "", "input", f, x);
    r.check("convlstm", "", "h_prev", f, h0);
    r.check("convlstm", "", "c_prev", f, c0);
    r.check("convlstm", "", "w_fi", f, cell.w_fi);
    r.check("convlstm", "", "w_hc", f, cell.w_hc);
    r.check("convlstm", "", "w_co", f, cell.w_co);
    r.check("convlstm", "", "w_cf", f, cell.w_cf);
    r.check("convlstm", "", "b_f", f, cell.b_f);
}

void attention_case(Recorder& r, CounterRng& rng) {
    const std::size_t n = pick(rng, 1, 2), c = pick(rng, 1, 4), h = pick(rng, 2, 5), w = pick(rng, 2, 5);
    const std::uint64_t s = rng.next_u64();
    AttentionGate<double> gate(c, c, s);
    Tensord skip = leaf({n, c, h, w}, s + 1);
    Tensord gating = leaf({n, c, h, w}, s + 2);
    const Fn f = [=] { return probe(gate.forward(skip, gating), s + 3); };
    r.check("attention_gate", "", "skip", f, skip);
    r.check("attention_gate", "", "gating", f, gating);
    r.check("attention_gate", "", "query.weight", f, gate.query.weight);
    r.check("attention_gate", "", "key.weight", f, gate.key.weight);
    r.check("attention_gate", "", "psi.weight", f, gate.psi.weight);
}

void loss_case(Recorder& r, CounterRng& rng, LossKind kind) {
    const std::size_t n = pick(rng, 1, 2), h = pick(rng, 2, 6), w = pick(rng, 2, 6);
    auto [yhat, y] = loss_inputs({n, 1, h, w}, rng.next_u64());
    LossParams params;
    const Fn f = [=] { return loss(kind, yhat, y, params); };
    r.check(to_string(kind), "", "yhat", f, yhat);
}

}  // namespace

std::vector<GradCheckCase> run_unit_gradchecks(std::size_t cases, std::uint64_t seed, double tolerance) {
    std::vector<GradCheckCase> out;
    CounterRng rng(derive_key(seed, 0x756e6974));
    GradCheckOptions opt;
    opt.tolerance = tolerance;
    const std::size_t kinds = 11;
    for (std::size_t i = 0; out.size() < cases; ++i) {
        opt.seed = derive_key(seed, i);
        Recorder r{out, opt, i};
        switch (i % kinds) {
            case 0: conv_case(r, rng, 1); break;
            case 1: conv_case(r, rng, 2); break;
            case 2: conv_case(r, rng, 4); break;
            case 3: conv_case(r, rng, 8); break;
            case 4: tconv_case(r, rng); break;
            case 5: maxpool_case(r, rng); break;
            case 6: batchnorm_case(r, rng); break;
            case 7: lstm_case(r, rng); break;
            case 8: attention_case(r, rng); break;
            case 9: loss_case(r, rng, LossKind::dl); break;
            default: loss_case(r, rng, LossKind::ftl); break;
        }
    }
    return out;
}

std::vector<GradCheckCase> run_model_gradcheck(const ModelGradCheckOptions& o) {
    DonetConfig cfg;
    cfg.input_channels = 3;
    cfg.input_height = o.size;
    cfg.input_width = o.size;
    cfg.base_channels = o.base_channels;
    cfg.stages = o.stages;
    cfg.dilation_rates = o.dilation_rates;
    DonetModel<double> model(cfg, o.seed);

    SyntheticSpec spec;
    spec.count = o.batch;
    spec.height = o.size;
    spec.width = o.size;
    spec.seed = o.seed;
    const auto samples = generate_synthetic(spec);
    std::vector<std::size_t> idx(o.batch);
    for (std::size_t i = 0; i < o.batch; ++i) idx[i] = i;
    const Batch b = make_batch(samples, idx);
    const Tensord image = cast_tensor<double>(b.images);
    const Tensord mask = cast_tensor<double>(b.masks);
    const ObjectiveConfig objective;

    const Fn f = [&] { return combined_objective(objective, model.forward(image, Mode::train), mask).total; };

    const auto params = model.parameters();
    const std::size_t total = model.parameter_count();
    std::vector<GradCheckCase> out;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& p = params[i];
        GradCheckOptions opt;
        opt.tolerance = o.tolerance;
        opt.seed = derive_key(o.seed, i);
        opt.max_coordinates =
            std::max<std::size_t>(1, (o.coordinates * p.tensor.numel() + total - 1) / total);
        GradCheckCase c;
        c.op = "donet";
        c.name = "donet[total] wrt " + p.name;
        c.report = grad_check_param(f, p.tensor, opt);
        out.push_back(std::move(c));
    }
    return out;
}

bool all_pass(const std::vector<GradCheckCase>& cases) {
    return std::all_of(cases.begin(), cases.end(), [](const GradCheckCase& c) { return c.report.pass; });
}

}  // namespace donet
