// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.
//   acceptance [--work-dir DIR] [--only 1,5,...]
#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

#include "donet/data.hpp"
#include "donet/gradcheck_suite.hpp"
#include "donet/losses.hpp"
#include "donet/metrics.hpp"
#include "donet/nn.hpp"
#include "donet/ops.hpp"
#include "donet/train.hpp"

using namespace donet;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

void progress(const std::string& line) { std::cerr << "  " << line << std::endl; }

bool same_bits(const Tensorf& a, const Tensorf& b) {
    return a.shape() == b.shape() && std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(float)) == 0;
}

bool same_state(const DonetModel<float>& a, const DonetModel<float>& b) {
    auto pa = a.parameters(), pb = b.parameters();
    auto ba = a.buffers(), bb = b.buffers();
    pa.insert(pa.end(), ba.begin(), ba.end());
    pb.insert(pb.end(), bb.begin(), bb.end());
    if (pa.size() != pb.size()) return false;
    for (std::size_t i = 0; i < pa.size(); ++i) {
        if (pa[i].name != pb[i].name || !same_bits(pa[i].tensor, pb[i].tensor)) return false;
    }
    return true;
}

bool same_losses(const std::vector<StepLosses>& a, const std::vector<StepLosses>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (std::memcmp(&a[i], &b[i], sizeof(StepLosses)) != 0) return false;
    }
    return true;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// The desk-scale synthetic benchmark: 200 train and 35 validation images drawn
// from one pool, plus 50 held-out test images, all 64x64. Thirty epochs is a
// short budget, so it trains with more and larger steps than the defaults.
TrainConfig benchmark_config() {
    TrainConfig c;
    c.synthetic.count = 235;
    c.val_fraction = 0.15;
    c.synthetic_test_count = 50;
    c.epochs = 30;
    c.batch_size = 4;
    c.lr = 0.1;
    c.val_every = 5;
    return c;
}

// ---------------------------------------------------------------------------

Outcome gradient_suite() {
    const auto t0 = Clock::now();
    const auto cases = run_unit_gradchecks(120, 1, 1e-4);
    const double elapsed = seconds_since(t0);
    std::set<std::string> covered;
    std::size_t failed = 0;
    double worst = 0;
    for (const auto& c : cases) {
        covered.insert(c.op == "conv2d" ? c.name.substr(0, c.name.find(',')) : c.op);
        if (!c.report.pass) {
            ++failed;
            progress("failed: " + c.name + ": " + c.report.summary());
        }
        worst = std::max(worst, c.report.max_rel_err);
    }
    const std::set<std::string> required{"conv2d[d=1", "conv2d[d=2", "conv2d[d=4", "conv2d[d=8", "conv_transpose2d",
                                         "maxpool2x2", "batchnorm", "convlstm", "attention_gate", "dl", "ftl"};
    std::size_t missing = 0;
    for (const auto& r : required) missing += covered.count(r) ? 0 : 1;
    return {failed == 0 && missing == 0 && cases.size() >= 100 && elapsed <= 300,
            fmt("%zu cases, %zu failed, %zu ops missing, max rel err %.2e (tol 1e-4), %.1f s (limit 300 s)",
                cases.size(), failed, missing, worst, elapsed)};
}

Outcome model_gradient() {
    const auto t0 = Clock::now();
    ModelGradCheckOptions o;  // 16x16, base 4, T = 4 (rates 1,2,4,8)
    const auto cases = run_model_gradcheck(o);
    const double elapsed = seconds_since(t0);
    std::size_t failed = 0, coords = 0;
    double worst = 0;
    for (const auto& c : cases) {
        if (!c.report.pass) {
            ++failed;
            progress("failed: " + c.name + ": " + c.report.summary());
        }
        coords += c.report.checked;
        worst = std::max(worst, c.report.max_rel_err);
    }
    return {failed == 0 && !cases.empty() && elapsed <= 300,
            fmt("%zu parameter tensors, %zu coordinates, %zu failed, max rel err %.2e (tol 1e-3), %.1f s (limit 300 s)",
                cases.size(), coords, failed, worst, elapsed)};
}

// Small integers keep every float sum exact, so fast path and oracle compare with ==.
Tensorf integer_tensor(Shape s, CounterRng& rng) {
    std::vector<float> v(s.numel());
    for (auto& x : v) x = static_cast<float>(static_cast<int>(rng.below(7)) - 3);
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
                    float acc = b.at(0, o, 0, 0);
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

Outcome oracles() {
    CounterRng rng(2024);
    std::size_t conv_bad = 0, conv_cases = 0;
    for (std::size_t dil : {1u, 2u, 4u, 8u}) {
        for (int trial = 0; trial < 25; ++trial, ++conv_cases) {
            const std::size_t n = 1 + rng.below(2), cin = 1 + rng.below(4), cout = 1 + rng.below(4);
            const std::size_t h = 4 + rng.below(13), w = 4 + rng.below(13), stride = 1 + rng.below(2);
            const auto x = integer_tensor({n, cin, h, w}, rng);
            const auto wt = integer_tensor({cout, cin, 3, 3}, rng);
            const auto b = integer_tensor({1, cout, 1, 1}, rng);
            if (!same_bits(conv2d(x, wt, b, stride, dil, dil), naive_conv(x, wt, b, stride, dil, dil))) ++conv_bad;
        }
    }

    std::size_t pool_bad = 0;
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t h = 2 * (1 + rng.below(8)), w = 2 * (1 + rng.below(8));
        const auto x = Tensorf::normal({2, 3, h, w}, 0, 1, rng.next_u64());
        const auto y = maxpool2x2(x);
        for (std::size_t n = 0; n < 2; ++n)
            for (std::size_t c = 0; c < 3; ++c)
                for (std::size_t i = 0; i < h / 2; ++i)
                    for (std::size_t j = 0; j < w / 2; ++j) {
                        float m = x.at(n, c, 2 * i, 2 * j);
                        m = std::max(m, x.at(n, c, 2 * i, 2 * j + 1));
                        m = std::max(m, x.at(n, c, 2 * i + 1, 2 * j));
                        m = std::max(m, x.at(n, c, 2 * i + 1, 2 * j + 1));
                        if (y.at(n, c, i, j) != m) ++pool_bad;
                    }
    }

    std::size_t metric_bad = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const Shape s{1, 1, 1 + rng.below(32), 1 + rng.below(32)};
        BinaryMask sr{s, std::vector<std::uint8_t>(s.numel())}, gt = sr;
        const double ps = rng.uniform(), pg = rng.uniform();
        for (std::size_t i = 0; i < s.numel(); ++i) {
            sr.bits[i] = rng.bernoulli(ps);
            gt.bits[i] = rng.bernoulli(pg);
        }
        std::uint64_t tp = 0, tn = 0, fp = 0, fn = 0;
        for (std::size_t i = 0; i < s.numel(); ++i) {
            if (sr.bits[i] && gt.bits[i]) ++tp;
            else if (sr.bits[i]) ++fp;
            else if (gt.bits[i]) ++fn;
            else ++tn;
        }
        const auto r = compute_metrics(sr, gt);
        const bool empty = tp + fp + fn == 0;
        const double d = static_cast<double>(tp), dfp = static_cast<double>(fp), dfn = static_cast<double>(fn);
        const double dsc = empty ? 1.0 : 2 * d / (2 * d + dfp + dfn);
        const double ji = empty ? 1.0 : d / (d + dfp + dfn);
        const double recall = empty ? 1.0 : (tp + fn ? d / (d + dfn) : 0.0);
        const double precision = empty ? 1.0 : (tp + fp ? d / (d + dfp) : 0.0);
        const double accuracy = static_cast<double>(tp + tn) / static_cast<double>(s.numel());
        if (!(r.counts == ConfusionCounts{tp, tn, fp, fn}) || r.metrics.dsc != dsc || r.metrics.ji != ji ||
            r.metrics.recall != recall || r.metrics.precision != precision || r.metrics.accuracy != accuracy)
            ++metric_bad;
    }

    const LossParams q;  // alpha 0.7, beta 0.3, gamma 0.75, eps 1e-6
    const double dl = dice_loss(Tensord::from_data({1, 1, 1, 4}, {1, 1, 0, 0}),
                                Tensord::from_data({1, 1, 1, 4}, {1, 0, 0, 0}), q.epsilon)
                          .item();
    const auto half = Tensord::constant({1, 1, 4, 4}, 0.5), ones = Tensord::constant({1, 1, 4, 4}, 1.0);
    const double ti = tversky_index(half, ones, q.alpha, q.beta, q.epsilon).item();
    const double ftl = focal_tversky_loss(half, ones, q).item();
    // Scalar hand values: 1 - 2/3, 8/13.6, (1 - 8/13.6)^(4/3).
    const bool losses_ok = std::abs(dl - 0.333333) <= 1e-6 && std::abs(ti - 0.588235) <= 1e-6 &&
                           std::abs(ftl - 0.306337) <= 1e-6;

    return {conv_bad == 0 && pool_bad == 0 && metric_bad == 0 && losses_ok,
            fmt("conv %zu/%zu exact, maxpool mismatches %zu, metrics mismatches %zu/1000, "
                "DL %.6f, TI %.6f, FTL %.6f",
                conv_cases - conv_bad, conv_cases, pool_bad, metric_bad, dl, ti, ftl)};
}

Outcome joint_invariants() {
    CounterRng rng(4);
    std::size_t violations = 0, pixels = 0;
    for (int trial = 0; trial < 10000; ++trial) {
        const Shape s{1, 1, 1 + rng.below(12), 1 + rng.below(12)};
        std::vector<float> a(s.numel()), b(s.numel());
        for (std::size_t i = 0; i < a.size(); ++i) {
            // Mix uniform draws with values straddling the threshold and the ends.
            auto draw = [&] {
                switch (rng.below(4)) {
                    case 0: return 0.5f + static_cast<float>(rng.uniform(-1e-3, 1e-3));
                    case 1: return rng.bernoulli(0.5) ? 0.0f : 1.0f;
                    default: return static_cast<float>(rng.uniform());
                }
            };
            a[i] = draw();
            b[i] = draw();
        }
        const auto y1 = Tensorf::from_data(s, a), y2 = Tensorf::from_data(s, b);
        const auto yj = hadamard(y1, y2);
        const auto m1 = binarize(y1), m2 = binarize(y2), mj = binarize(yj);
        for (std::size_t i = 0; i < a.size(); ++i, ++pixels) {
            const float p = yj.data()[i];
            if (p != a[i] * b[i] || p > std::min(a[i], b[i]) || (mj.bits[i] && !(m1.bits[i] && m2.bits[i])))
                ++violations;
        }
    }

    // The same invariants on the model's own outputs.
    DonetConfig mc;
    mc.input_height = mc.input_width = 16;
    mc.base_channels = 4;
    mc.stages = 2;
    mc.dilation_rates = {1, 2};
    DonetModel<float> model(mc, 9);
    std::size_t model_violations = 0;
    for (int trial = 0; trial < 20; ++trial) {
        const auto x = Tensorf::normal({2, 3, 16, 16}, 0.5, 0.5, rng.next_u64());
        const auto out = model.forward(x, trial % 2 ? Mode::eval : Mode::train);
        const auto m1 = binarize(out.y1), m2 = binarize(out.y2), mj = binarize(out.y_joint);
        for (std::size_t i = 0; i < out.y_joint.numel(); ++i) {
            const float a = out.y1.data()[i], b = out.y2.data()[i], p = out.y_joint.data()[i];
            if (p != a * b || p > std::min(a, b) || (mj.bits[i] && !(m1.bits[i] && m2.bits[i]))) ++model_violations;
        }
    }
    return {violations == 0 && model_violations == 0,
            fmt("10000 map pairs (%zu pixels): %zu violations; 20 model forwards: %zu violations", pixels,
                violations, model_violations)};
}

Outcome overfit() {
    TrainConfig c;  // default objective: DL + FTL, alpha 0.7, beta 0.3, gamma 0.75; 64x64
    c.synthetic.count = 4;
    c.overfit = true;
    c.batch_size = 4;  // one step per epoch
    c.epochs = 500;
    c.lr = 0.1;
    c.decay_every = 1000;
    c.val_every = 500;  // score once, after the last step
    const auto t0 = Clock::now();
    Trainer t(c, load_datasets(c));
    while (!t.finished()) {
        t.run_epoch();
        if (t.epoch() % 50 == 0) {
            progress(fmt("overfit step %zu loss %.5f (%.0f s)", t.steps_taken(), t.step_log().back().total,
                         seconds_since(t0)));
        }
    }
    const auto r = evaluate(t.model(), t.data().train);
    const double dsc = summarize(r.joint).mean.dsc;
    const double elapsed = seconds_since(t0);
    return {t.steps_taken() == 500 && dsc >= 0.98 && elapsed <= 900,
            fmt("%zu steps, joint DSC %.4f (need >= 0.98), %.0f s (limit 900 s)", t.steps_taken(), dsc, elapsed)};
}

Outcome generalization(const fs::path& work) {
    const TrainConfig c = benchmark_config();
    const auto t0 = Clock::now();
    Trainer t(c, load_datasets(c));
    const RunReport report = train(t, work / "generalization", progress);
    std::istringstream best(report.best_checkpoint, std::ios::binary);
    LoadedCheckpoint ck = read_checkpoint(best);
    const auto r = evaluate(ck.model, t.data().test);
    const auto s = summarize(r.joint);
    std::ofstream(work / "generalization" / "test_metrics.csv", std::ios::binary) << metrics_csv(r.joint);
    const double elapsed = seconds_since(t0);
    return {t.data().train.size() == 200 && t.data().test.size() == 50 && s.mean.dsc >= 0.90 && elapsed <= 3600,
            fmt("train %zu / val %zu / test %zu, best val DSC %.4f at epoch %zu, test joint DSC %.4f±%.4f "
                "(need >= 0.90), %.0f s (limit 3600 s)",
                t.data().train.size(), t.data().val.size(), t.data().test.size(), report.best_val_dsc,
                report.best_epoch, s.mean.dsc, s.stddev.dsc, elapsed)};
}

Outcome ablation(const fs::path& work) {
    TrainConfig c = benchmark_config();
    c.model.base_channels = 8;
    const auto t0 = Clock::now();
    const AblationReport r = ablate(c, {1, 2, 3}, progress);
    std::ostringstream tsv;
    write_ablation_tsv(tsv, r);
    fs::create_directories(work);
    std::ofstream(work / "ablation.tsv", std::ios::binary) << tsv.str();
    std::cerr << tsv.str();
    bool format_ok = r.rows.size() == 4;
    for (const auto& row : r.rows) format_ok = format_ok && row.per_seed.size() == 3;
    const double full = r.rows.back().summary.mean.dsc, base = r.rows.front().summary.mean.dsc;
    return {format_ok && r.ordering_ok,
            fmt("4-row table written; mean DSC baseline %.4f, full %.4f, ordering full>=baseline %s; %.0f s",
                base, full, r.ordering_ok ? "holds" : "VIOLATED", seconds_since(t0))};
}

Outcome determinism(const fs::path& work) {
    TrainConfig c;
    c.model.input_height = c.model.input_width = 32;
    c.model.base_channels = 4;
    c.model.stages = 3;
    c.synthetic.count = 14;
    c.synthetic_test_count = 0;
    c.val_fraction = 0.15;
    c.batch_size = 4;
    c.epochs = 3;
    c.lr = 0.05;
    c.augment = true;

    const fs::path dir = work / "determinism";
    fs::remove_all(dir);
    train(c, dir / "a");
    train(c, dir / "b");
    const bool curves = slurp(dir / "a" / "loss_curve.csv") == slurp(dir / "b" / "loss_curve.csv") &&
                        slurp(dir / "a" / "last.ckpt") == slurp(dir / "b" / "last.ckpt");

    Trainer straight(c, load_datasets(c));
    straight.run_epoch();
    straight.save_checkpoint(dir / "epoch1.ckpt");
    straight.run_epoch();
    straight.run_epoch();
    Trainer resumed = Trainer::resume(dir / "epoch1.ckpt");
    while (!resumed.finished()) resumed.run_epoch();
    const std::vector<StepLosses> tail(straight.step_log().end() - static_cast<long>(resumed.step_log().size()),
                                       straight.step_log().end());
    const bool resume_ok = !resumed.step_log().empty() && same_losses(resumed.step_log(), tail) &&
                           same_state(resumed.model(), straight.model());
    return {curves && resume_ok, fmt("repeat run curves and checkpoints identical: %s; resume from epoch 1 "
                                     "bit-exact over %zu steps: %s",
                                     curves ? "yes" : "no", resumed.step_log().size(), resume_ok ? "yes" : "no")};
}

BinaryMask mask4x4(std::initializer_list<int> on) {
    BinaryMask m{{1, 1, 4, 4}, std::vector<std::uint8_t>(16, 0)};
    for (int i : on) m.bits[static_cast<std::size_t>(i)] = 1;
    return m;
}

Outcome formats() {
    CounterRng rng(9);
    std::size_t roundtrip_bad = 0;
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t ch = trial % 2 ? 3 : 1, h = 1 + rng.below(20), w = 1 + rng.below(20);
        std::string header = fmt("P%d\n%zu %zu\n255\n", ch == 3 ? 6 : 5, w, h);
        std::vector<std::uint8_t> bytes(header.begin(), header.end());
        for (std::size_t i = 0; i < ch * h * w; ++i) bytes.push_back(static_cast<std::uint8_t>(rng.below(256)));
        const Tensorf img = decode_pnm(bytes);
        if (img.shape() != Shape{1, ch, h, w} || encode_pnm(img) != bytes || !same_bits(decode_pnm(encode_pnm(img)), img))
            ++roundtrip_bad;
    }

    const fs::path corpus = fs::path(DONET_TEST_DATA) / "pnm";
    std::size_t bad_files = 0, rejected = 0, good_files = 0, accepted = 0;
    for (const auto& e : fs::directory_iterator(corpus / "bad")) {
        ++bad_files;
        try {
            load_image(e.path());
        } catch (const DataError&) {
            ++rejected;
        }
    }
    for (const auto& e : fs::directory_iterator(corpus / "good")) {
        ++good_files;
        try {
            load_image(e.path());
            ++accepted;
        } catch (const Error&) {
        }
    }

    const std::vector<MetricsRow> rows{
        {"lesion_a", compute_metrics(mask4x4({1, 2, 3, 4, 5, 6}), mask4x4({0, 1, 2, 3})).metrics},
        {"lesion_b", compute_metrics(mask4x4({5, 6, 9, 10}), mask4x4({5, 6, 9, 10})).metrics},
        {"lesion_c", compute_metrics(mask4x4({14, 15}), mask4x4({0, 1})).metrics},
    };
    const bool golden = metrics_csv(rows) == slurp(fs::path(DONET_TEST_DATA) / "metrics_golden.csv");

    return {roundtrip_bad == 0 && bad_files > 0 && rejected == bad_files && accepted == good_files && golden,
            fmt("round trips %zu/50 exact, corrupted corpus rejected %zu/%zu, valid corpus accepted %zu/%zu, "
                "golden CSV %s",
                50 - roundtrip_bad, rejected, bad_files, accepted, good_files, golden ? "identical" : "DIFFERS")};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"DONet acceptance criteria"};
    std::string work = "acceptance_runs";
    std::vector<int> only;
    app.add_option("--work-dir", work, "Directory for training artifacts");
    app.add_option("--only", only, "Run only these criteria")->delimiter(',');
    CLI11_PARSE(app, argc, argv);
    const fs::path dir(work);
    fs::create_directories(dir);

    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"gradient suite", gradient_suite},
        {"end-to-end gradient", model_gradient},
        {"oracle equivalence", oracles},
        {"joint-decision invariants", joint_invariants},
        {"overfit", overfit},
        {"generalization", [&] { return generalization(dir); }},
        {"ablation direction", [&] { return ablation(dir); }},
        {"determinism and persistence", [&] { return determinism(dir); }},
        {"format compliance", formats},
    };

    std::size_t failures = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int number = static_cast<int>(i + 1);
        if (!only.empty() && std::find(only.begin(), only.end(), number) == only.end()) continue;
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        if (!o.pass) ++failures;
        std::cout << (o.pass ? "PASS" : "FAIL") << " " << number << " " << criteria[i].first << ": " << o.detail
                  << std::endl;
    }
    return failures ? 1 : 0;
}
