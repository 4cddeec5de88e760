#include <doctest.h>

#include <cmath>
#include <cstring>

#include "donet/grad_check.hpp"
#include "donet/nn.hpp"
#include "donet/ops.hpp"
#include "donet/rng.hpp"

using namespace donet;

namespace {

// Small integers keep every float sum exact, so the fast path and the
// oracle can be compared with ==.
Tensorf integer_tensor(Shape s, CounterRng& rng, int lo = -3, int hi = 3) {
    std::vector<float> v(s.numel());
    for (auto& x : v) x = static_cast<float>(lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(hi - lo + 1))));
    return Tensorf::from_data(s, std::move(v));
}

Tensorf naive_conv(const Tensorf& x, const Tensorf& w, const Tensorf& b, std::size_t stride, std::size_t pad,
                   std::size_t dil) {
    const Shape xs = x.shape(), ws = w.shape();
    const std::size_t oh = (xs.h + 2 * pad - dil * (ws.h - 1) - 1) / stride + 1;
    const std::size_t ow = (xs.w + 2 * pad - dil * (ws.w - 1) - 1) / stride + 1;
    auto out = Tensorf::zeros({xs.n, ws.n, oh, ow});
    for (std::size_t n = 0; n < xs.n; ++n)
        for (std::size_t o = 0; o < ws.n; ++o)
            for (std::size_t i = 0; i < oh; ++i)
                for (std::size_t j = 0; j < ow; ++j) {
                    float acc = b.defined() ? b.at(0, o, 0, 0) : 0.0f;
                    for (std::size_t c = 0; c < xs.c; ++c)
                        for (std::size_t ki = 0; ki < ws.h; ++ki)
                            for (std::size_t kj = 0; kj < ws.w; ++kj) {
                                const long y = static_cast<long>(i * stride + ki * dil) - static_cast<long>(pad);
                                const long z = static_cast<long>(j * stride + kj * dil) - static_cast<long>(pad);
                                if (y < 0 || z < 0 || y >= static_cast<long>(xs.h) || z >= static_cast<long>(xs.w))
                                    continue;
                                acc += x.at(n, c, static_cast<std::size_t>(y), static_cast<std::size_t>(z)) *
                                       w.at(o, c, ki, kj);
                            }
                    out.at(n, o, i, j) = acc;
                }
    return out;
}

Tensorf naive_tconv(const Tensorf& x, const Tensorf& w, std::size_t stride, std::size_t pad) {
    const Shape xs = x.shape(), ws = w.shape();
    const std::size_t oh = stride * (xs.h - 1) + ws.h - 2 * pad;
    const std::size_t ow = stride * (xs.w - 1) + ws.w - 2 * pad;
    auto out = Tensorf::zeros({xs.n, ws.c, oh, ow});
    for (std::size_t n = 0; n < xs.n; ++n)
        for (std::size_t c = 0; c < xs.c; ++c)
            for (std::size_t i = 0; i < xs.h; ++i)
                for (std::size_t j = 0; j < xs.w; ++j)
                    for (std::size_t o = 0; o < ws.c; ++o)
                        for (std::size_t ki = 0; ki < ws.h; ++ki)
                            for (std::size_t kj = 0; kj < ws.w; ++kj) {
                                const long y = static_cast<long>(i * stride + ki) - static_cast<long>(pad);
                                const long z = static_cast<long>(j * stride + kj) - static_cast<long>(pad);
                                if (y < 0 || z < 0 || y >= static_cast<long>(oh) || z >= static_cast<long>(ow)) continue;
                                out.at(n, o, static_cast<std::size_t>(y), static_cast<std::size_t>(z)) +=
                                    x.at(n, c, i, j) * w.at(c, o, ki, kj);
                            }
    return out;
}

bool same_bits(const Tensorf& a, const Tensorf& b) {
    return a.shape() == b.shape() && std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(float)) == 0;
}

double dot(const Tensord& a, const Tensord& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) s += a.data()[i] * b.data()[i];
    return s;
}

}  // namespace

TEST_CASE("conv2d: identity kernel") {
    auto x = Tensorf::normal({2, 1, 5, 4}, 0, 1, 3);
    auto w = Tensorf::constant({1, 1, 1, 1}, 1.0);
    auto b = Tensorf::zeros({1, 1, 1, 1});
    CHECK(same_bits(conv2d(x, w, b, 1, 0, 1), x));
}

TEST_CASE("conv2d: counting taps") {
    auto x = Tensorf::constant({1, 1, 4, 4}, 1.0);
    auto w = Tensorf::constant({1, 1, 3, 3}, 1.0);
    auto y = conv2d(x, w, Tensorf(), 1, 1, 1);
    CHECK(y.at(0, 0, 1, 1) == 9.0f);
    CHECK(y.at(0, 0, 2, 2) == 9.0f);
    CHECK(y.at(0, 0, 0, 0) == 4.0f);
    CHECK(y.at(0, 0, 3, 3) == 4.0f);
    CHECK(y.at(0, 0, 0, 1) == 6.0f);
}

TEST_CASE("conv2d matches the nested-loop oracle exactly") {
    CounterRng rng(101);
    for (std::size_t dil : {1u, 2u, 4u, 8u}) {
        for (int trial = 0; trial < 6; ++trial) {
            const std::size_t n = 1 + rng.below(2), cin = 1 + rng.below(3), cout = 1 + rng.below(3);
            const std::size_t h = 4 + rng.below(9), w = 4 + rng.below(9);
            const std::size_t stride = 1 + rng.below(2);
            const std::size_t pad = dil;
            auto x = integer_tensor({n, cin, h, w}, rng);
            auto wt = integer_tensor({cout, cin, 3, 3}, rng);
            auto b = integer_tensor({1, cout, 1, 1}, rng);
            CHECK(same_bits(conv2d(x, wt, b, stride, pad, dil), naive_conv(x, wt, b, stride, pad, dil)));
        }
    }
}

TEST_CASE("conv2d: dilation 2 keeps an 8x8 extent") {
    CounterRng rng(4);
    auto x = integer_tensor({1, 2, 8, 8}, rng);
    auto w = integer_tensor({3, 2, 3, 3}, rng);
    auto y = conv2d(x, w, Tensorf(), 1, 2, 2);
    CHECK(y.shape() == Shape{1, 3, 8, 8});
    CHECK(same_bits(y, naive_conv(x, w, Tensorf(), 1, 2, 2)));
}

TEST_CASE("conv2d shape errors") {
    auto x = Tensorf::zeros({1, 2, 4, 4});
    CHECK_THROWS_AS(conv2d(x, Tensorf::zeros({1, 3, 3, 3}), Tensorf(), 1, 1, 1), ShapeError);
    CHECK_THROWS_AS(conv2d(x, Tensorf::zeros({1, 2, 3, 3}), Tensorf(), 1, 0, 4), ShapeError);
    CHECK_THROWS_AS(conv2d(x, Tensorf::zeros({1, 2, 3, 3}), Tensorf::zeros({1, 2, 1, 1}), 1, 1, 1), ShapeError);
    Conv2d<float> layer(2, 4, 3, 2, 1, 1, 9);
    const auto [h, w] = layer.output_extent(9, 6);
    CHECK(h == 5);
    CHECK(w == 3);
    CHECK_THROWS_AS(Conv2d<float>(2, 4, 3, 1, 0, 1, 9).output_extent(2, 2), ShapeError);
}

TEST_CASE("conv layer init is He-normal with zero bias and reproducible") {
    Conv2d<double> a(16, 32, 3, 1, 1, 1, 77), b(16, 32, 3, 1, 1, 1, 77);
    CHECK(std::memcmp(a.weight.data().data(), b.weight.data().data(), a.weight.numel() * sizeof(double)) == 0);
    double sq = 0;
    for (double v : a.weight.data()) sq += v * v;
    const double stddev = std::sqrt(sq / static_cast<double>(a.weight.numel()));
    CHECK(stddev == doctest::Approx(std::sqrt(2.0 / (16 * 9))).epsilon(0.05));
    for (double v : a.bias.data()) CHECK(v == 0.0);
}

TEST_CASE("transposed conv: ones example and shape") {
    auto x = Tensorf::constant({1, 1, 2, 2}, 1.0);
    auto w = Tensorf::constant({1, 1, 2, 2}, 1.0);
    auto y = conv_transpose2d(x, w, Tensorf(), 2, 0);
    CHECK(y.shape() == Shape{1, 1, 4, 4});
    double s = 0;
    for (float v : y.data()) s += v;
    CHECK(s == 16.0);

    ConvTranspose2d<float> up(8, 5, 2, 2, 0, 3);
    CHECK(up.forward(Tensorf::zeros({1, 8, 16, 16})).shape() == Shape{1, 5, 32, 32});
    CHECK_THROWS_AS(up.forward(Tensorf::zeros({1, 7, 16, 16})), ShapeError);
}

TEST_CASE("transposed conv matches the scatter oracle exactly") {
    CounterRng rng(55);
    for (int trial = 0; trial < 10; ++trial) {
        const std::size_t k = 2 + rng.below(2), pad = k == 3 ? rng.below(2) : 0;
        auto x = integer_tensor({1 + rng.below(2), 1 + rng.below(3), 2 + rng.below(4), 2 + rng.below(4)}, rng);
        auto w = integer_tensor({x.shape().c, 1 + rng.below(3), k, k}, rng);
        CHECK(same_bits(conv_transpose2d(x, w, Tensorf(), 2, pad), naive_tconv(x, w, 2, pad)));
    }
}

TEST_CASE("conv and transposed conv are adjoint") {
    CounterRng rng(66);
    struct Geo {
        std::size_t k, stride, pad, h;
    };
    for (const Geo g : {Geo{2, 2, 0, 8}, Geo{3, 1, 1, 7}, Geo{3, 2, 1, 9}}) {
        for (int trial = 0; trial < 5; ++trial) {
            const std::size_t cin = 1 + rng.below(3), cout = 1 + rng.below(3);
            auto w = Tensord::normal({cout, cin, g.k, g.k}, 0, 1, rng.next_u64());
            auto x = Tensord::normal({2, cin, g.h, g.h}, 0, 1, rng.next_u64());
            auto cx = conv2d(x, w, Tensord(), g.stride, g.pad, 1);
            auto y = Tensord::normal(cx.shape(), 0, 1, rng.next_u64());
            auto ty = conv_transpose2d(y, w, Tensord(), g.stride, g.pad);
            if (ty.shape() != x.shape()) continue;  // geometry without an exact inverse extent
            const double lhs = dot(cx, y), rhs = dot(x, ty);
            CHECK(std::abs(lhs - rhs) <= 1e-5 * std::max(1.0, std::abs(lhs)));
        }
    }
}

TEST_CASE("transposed conv input gradient is the forward conv") {
    auto w = Tensord::normal({3, 2, 2, 2}, 0, 1, 5);
    auto x = Tensord::normal({1, 3, 4, 4}, 0, 1, 6, true);
    auto g = Tensord::normal({1, 2, 8, 8}, 0, 1, 7);
    sum(hadamard(conv_transpose2d(x, w, Tensord(), 2, 0), g)).backward();
    auto expect = conv2d(g, w, Tensord(), 2, 0, 1);
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(x.grad()[i] == doctest::Approx(expect.data()[i]).epsilon(1e-12));
}

TEST_CASE("maxpool") {
    auto x = Tensorf::from_data({1, 1, 2, 2}, {1, 2, 3, 4});
    CHECK(maxpool2x2(x).item() == 4.0f);

    auto c = Tensorf::constant({1, 2, 4, 4}, 1.5, true);
    auto y = maxpool2x2(c);
    for (float v : y.data()) CHECK(v == 1.5f);
    sum(y).backward();
    // Ties route the whole gradient to the first element of each block.
    for (std::size_t ch = 0; ch < 2; ++ch)
        for (std::size_t i = 0; i < 4; ++i)
            for (std::size_t j = 0; j < 4; ++j) {
                const float want = (i % 2 == 0 && j % 2 == 0) ? 1.0f : 0.0f;
                CHECK(c.grad()[(ch * 4 + i) * 4 + j] == want);
            }

    CHECK_THROWS_AS(maxpool2x2(Tensorf::zeros({1, 1, 3, 4})), ShapeError);
}

TEST_CASE("maxpool matches the nested-loop oracle exactly") {
    CounterRng rng(31);
    for (int trial = 0; trial < 20; ++trial) {
        auto x = Tensorf::normal({2, 3, 8, 8}, 0, 1, rng.next_u64());
        auto y = maxpool2x2(x);
        for (std::size_t n = 0; n < 2; ++n)
            for (std::size_t c = 0; c < 3; ++c)
                for (std::size_t i = 0; i < 4; ++i)
                    for (std::size_t j = 0; j < 4; ++j) {
                        float m = x.at(n, c, 2 * i, 2 * j);
                        m = std::max(m, x.at(n, c, 2 * i, 2 * j + 1));
                        m = std::max(m, x.at(n, c, 2 * i + 1, 2 * j));
                        m = std::max(m, x.at(n, c, 2 * i + 1, 2 * j + 1));
                        CHECK(y.at(n, c, i, j) == m);
                    }
    }
}

TEST_CASE("batchnorm train mode normalizes per channel") {
    BatchNorm2d<double> bn(3);
    auto x = Tensord::normal({4, 3, 5, 5}, 2.0, 3.0, 19);
    auto y = bn.forward(x, Mode::train);
    for (std::size_t c = 0; c < 3; ++c) {
        double mean = 0, var = 0;
        for (std::size_t n = 0; n < 4; ++n)
            for (std::size_t i = 0; i < 25; ++i) mean += y.data()[(n * 3 + c) * 25 + i];
        mean /= 100;
        for (std::size_t n = 0; n < 4; ++n)
            for (std::size_t i = 0; i < 25; ++i) var += std::pow(y.data()[(n * 3 + c) * 25 + i] - mean, 2);
        var /= 100;
        CHECK(std::abs(mean) < 1e-5);
        CHECK(std::abs(var - 1.0) < 1e-5);
    }
    // Running statistics move by momentum 0.1 from (0, 1).
    for (std::size_t c = 0; c < 3; ++c) {
        CHECK(bn.running_mean[c] != 0.0);
        CHECK(std::abs(bn.running_mean[c] - 0.2) < 0.2);
    }
}

TEST_CASE("batchnorm on a normalized batch is near identity") {
    auto x = Tensord::from_data({1, 1, 2, 2}, {-1, 1, -1, 1});
    BatchNorm2d<double> bn(1);
    auto y = bn.forward(x, Mode::train);
    for (std::size_t i = 0; i < 4; ++i) CHECK(y.data()[i] == doctest::Approx(x.data()[i]).epsilon(1e-5));
}

TEST_CASE("batchnorm eval mode is the running affine map") {
    BatchNorm2d<double> bn(1);
    bn.gamma.data()[0] = 2.0;
    bn.beta.data()[0] = 1.0;
    auto y = bn.forward(Tensord::constant({1, 1, 1, 1}, 1.0), Mode::eval);
    CHECK(y.item() == doctest::Approx(2.0 / std::sqrt(1.0 + 1e-5) + 1.0).epsilon(1e-12));
    CHECK(y.item() == doctest::Approx(3.0).epsilon(1e-5));
}

TEST_CASE("batchnorm rejects a single element in train mode") {
    BatchNorm2d<float> bn(2);
    CHECK_THROWS_AS(bn.forward(Tensorf::zeros({1, 2, 1, 1}), Mode::train), ContractError);
    CHECK_NOTHROW(bn.forward(Tensorf::zeros({1, 2, 1, 1}), Mode::eval));
}

namespace {

// Gate-by-gate rollout of the cell equations with separate convolutions.
ConvLstmCell<double>::State reference_step(const ConvLstmCell<double>& c, const Tensord& f,
                                           const ConvLstmCell<double>::State& s) {
    auto cv = [](const Tensord& x, const Tensord& w) { return conv2d(x, w, Tensord(), 1, 1, 1); };
    auto lin = [&](const Tensord& wf, const Tensord& wh, const Tensord& b) {
        auto z = add(cv(f, wf), cv(s.h, wh));
        const Shape zs = z.shape();
        std::vector<double> out(z.data().begin(), z.data().end());
        for (std::size_t n = 0; n < zs.n; ++n)
            for (std::size_t ch = 0; ch < zs.c; ++ch)
                for (std::size_t p = 0; p < zs.spatial(); ++p) out[(n * zs.c + ch) * zs.spatial() + p] += b.data()[ch];
        return Tensord::from_data(zs, std::move(out));
    };
    auto i = sigmoid(add(lin(c.w_fi, c.w_hi, c.b_i), channel_scale(s.c, c.w_ci)));
    auto fg = sigmoid(add(lin(c.w_ff, c.w_hf, c.b_f), channel_scale(s.c, c.w_cf)));
    auto cn = add(hadamard(fg, s.c), hadamard(i, tanh(lin(c.w_fc, c.w_hc, c.b_c))));
    auto o = sigmoid(add(lin(c.w_fo, c.w_ho, c.b_o), channel_scale(cn, c.w_co)));
    return {hadamard(o, tanh(cn)), cn};
}

}  // namespace

TEST_CASE("convlstm: zero weights give half-open gates and zero state") {
    ConvLstmCell<float> cell(2, 3, 1);
    for (Tensorf* t : {&cell.w_fi, &cell.w_ff, &cell.w_fc, &cell.w_fo, &cell.w_hi, &cell.w_hf, &cell.w_hc, &cell.w_ho,
                       &cell.w_ci, &cell.w_cf, &cell.w_co, &cell.b_i, &cell.b_f, &cell.b_c, &cell.b_o}) {
        for (auto& v : t->data()) v = 0.0f;
    }
    auto f = Tensorf::normal({2, 2, 5, 5}, 0, 1, 2);
    auto s = cell.step(f, cell.zero_state(2, 5, 5));
    CHECK(s.h.shape() == Shape{2, 3, 5, 5});
    for (float v : s.h.data()) CHECK(v == 0.0f);
    for (float v : s.c.data()) CHECK(v == 0.0f);
}

TEST_CASE("convlstm: initialization conventions") {
    ConvLstmCell<float> cell(4, 4, 3);
    for (float v : cell.b_f.data()) CHECK(v == 1.0f);
    for (float v : cell.b_i.data()) CHECK(v == 0.0f);
    for (float v : cell.w_ci.data()) CHECK(v == 0.0f);
    CHECK(cell.w_fi.shape() == Shape{4, 4, 3, 3});
    CHECK(cell.w_co.shape() == Shape{1, 4, 1, 1});
}

TEST_CASE("convlstm matches a gate-by-gate reference rollout") {
    CounterRng rng(88);
    ConvLstmCell<double> cell(2, 3, 17);
    for (Tensord* t : {&cell.w_ci, &cell.w_cf, &cell.w_co, &cell.b_i, &cell.b_c, &cell.b_o}) {
        *t = Tensord::normal(t->shape(), 0, 0.5, rng.next_u64(), true);
    }
    auto s = cell.zero_state(2, 6, 5);
    auto r = s;
    for (int t = 0; t < 4; ++t) {
        auto f = Tensord::normal({2, 2, 6, 5}, 0, 1, rng.next_u64());
        s = cell.step(f, s);
        r = reference_step(cell, f, r);
        for (std::size_t i = 0; i < s.h.numel(); ++i) {
            CHECK(s.h.data()[i] == doctest::Approx(r.h.data()[i]).epsilon(1e-12));
            CHECK(s.c.data()[i] == doctest::Approx(r.c.data()[i]).epsilon(1e-12));
        }
    }
}

TEST_CASE("convlstm hidden state stays inside (-1, 1)") {
    CounterRng rng(9);
    ConvLstmCell<float> cell(3, 3, 4);
    auto s = cell.zero_state(1, 6, 6);
    for (int t = 0; t < 8; ++t) {
        s = cell.step(Tensorf::normal({1, 3, 6, 6}, 0, 50, rng.next_u64()), s);
        for (float v : s.h.data()) CHECK(std::abs(v) <= 1.0f);
        CHECK(s.h.all_finite());
    }
    CHECK_THROWS_AS(cell.step(Tensorf::zeros({1, 3, 6, 6}), cell.zero_state(1, 5, 6)), ShapeError);
}

TEST_CASE("convlstm: four-step rollout passes gradient checks for every kernel") {
    ConvLstmCell<double> cell(2, 2, 23);
    cell.w_ci = Tensord::normal({1, 2, 1, 1}, 0, 0.5, 1, true);
    cell.w_cf = Tensord::normal({1, 2, 1, 1}, 0, 0.5, 2, true);
    cell.w_co = Tensord::normal({1, 2, 1, 1}, 0, 0.5, 3, true);
    std::vector<Tensord> inputs;
    for (int t = 0; t < 4; ++t) inputs.push_back(Tensord::normal({1, 2, 4, 4}, 0, 1, 100 + t));
    auto readout = Tensord::normal({1, 2, 4, 4}, 0, 1, 200);
    auto fn = [&] {
        auto s = cell.zero_state(1, 4, 4);
        for (const auto& f : inputs) s = cell.step(f, s);
        return sum(hadamard(s.h, readout));
    };
    NamedTensors<double> params;
    cell.parameters("cell", params);
    CHECK(params.size() == 15);
    for (const auto& p : params) {
        const auto r = grad_check_param(fn, p.tensor);
        CHECK_MESSAGE(r.pass, p.name << ": " << r.summary());
    }
}

TEST_CASE("attention gate") {
    AttentionGate<float> gate(4, 4, 12);
    auto h = Tensorf::normal({2, 4, 5, 5}, 0, 1, 1);
    auto r = Tensorf::normal({2, 4, 5, 5}, 0, 1, 2);
    auto a = gate.forward(h, r);
    CHECK(a.shape() == h.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) CHECK(std::abs(a.data()[i]) <= std::abs(h.data()[i]));
    auto alpha = gate.coefficients(h, r);
    CHECK(alpha.shape() == Shape{2, 1, 5, 5});
    for (float v : alpha.data()) {
        CHECK(v > 0.0f);
        CHECK(v < 1.0f);
    }
    CHECK(gate.query.out_channels() == 2);

    for (auto& v : gate.psi.weight.data()) v = 0.0f;
    for (auto& v : gate.psi.bias.data()) v = 0.0f;
    auto half = gate.forward(h, r);
    for (std::size_t i = 0; i < h.numel(); ++i) CHECK(half.data()[i] == 0.5f * h.data()[i]);

    CHECK_THROWS_AS(gate.forward(h, Tensorf::zeros({2, 4, 4, 5})), ShapeError);
    CHECK(AttentionGate<float>(1, 2, 3).query.out_channels() == 1);
}

TEST_CASE("attention gate passes gradient to both inputs") {
    AttentionGate<double> gate(3, 3, 5);
    auto h = Tensord::normal({1, 3, 4, 4}, 0, 1, 6, true);
    auto r = Tensord::normal({1, 3, 4, 4}, 0, 1, 7, true);
    sum(gate.forward(h, r)).backward();
    auto nonzero = [](std::span<const double> g) {
        return std::any_of(g.begin(), g.end(), [](double v) { return v != 0.0; });
    };
    CHECK(nonzero(h.grad()));
    CHECK(nonzero(r.grad()));
}

TEST_CASE("param seeds depend on name and model seed") {
    CHECK(param_seed(1, "a.weight") == param_seed(1, "a.weight"));
    CHECK(param_seed(1, "a.weight") != param_seed(1, "b.weight"));
    CHECK(param_seed(1, "a.weight") != param_seed(2, "a.weight"));
}
