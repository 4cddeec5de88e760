#include <doctest.h>

#include <cmath>

#include "donet/grad_check.hpp"
#include "donet/losses.hpp"
#include "donet/rng.hpp"

using namespace donet;

namespace {

Tensord row(std::vector<double> v, bool grad = false) {
    const std::size_t n = v.size();
    return Tensord::from_data({1, 1, 1, n}, std::move(v), grad);
}

struct Counts {
    double tp = 0, fn = 0, fp = 0, sum_p = 0, sum_y = 0;
};

Counts soft_counts(const std::vector<double>& p, const std::vector<double>& y) {
    Counts c;
    for (std::size_t i = 0; i < p.size(); ++i) {
        c.tp += p[i] * y[i];
        c.fn += (1 - p[i]) * y[i];
        c.fp += p[i] * (1 - y[i]);
        c.sum_p += p[i];
        c.sum_y += y[i];
    }
    return c;
}

// Scalar references, written from the loss definitions.
double ref_dice(const std::vector<double>& p, const std::vector<double>& y, double eps) {
    const Counts c = soft_counts(p, y);
    return 1 - 2 * (c.tp + eps) / (c.sum_p + c.sum_y + eps);
}
double ref_ti(const std::vector<double>& p, const std::vector<double>& y, double a, double b, double eps) {
    const Counts c = soft_counts(p, y);
    return (c.tp + eps) / (c.tp + a * c.fn + b * c.fp + eps);
}
double ref_ftl(const std::vector<double>& p, const std::vector<double>& y, const LossParams& q) {
    return std::pow(std::max(1 - ref_ti(p, y, q.alpha, q.beta, q.epsilon), 1e-8), 1 / q.gamma);
}
double ref_focal(const std::vector<double>& p, const std::vector<double>& y, double g, double a) {
    double s = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double q = std::clamp(p[i], 1e-7, 1 - 1e-7);
        s += a * std::pow(1 - q, g) * y[i] * std::log(q) + (1 - a) * std::pow(q, g) * (1 - y[i]) * std::log(1 - q);
    }
    return -s / static_cast<double>(p.size());
}
double ref_loss(LossKind k, const std::vector<double>& p, const std::vector<double>& y, const LossParams& q) {
    switch (k) {
        case LossKind::dl: return ref_dice(p, y, q.epsilon);
        case LossKind::tl: return 1 - ref_ti(p, y, q.alpha, q.beta, q.epsilon);
        case LossKind::fl: return ref_focal(p, y, q.focal_gamma, q.focal_alpha);
        case LossKind::ftl: return ref_ftl(p, y, q);
    }
    return 0;
}

std::vector<double> random_probs(CounterRng& rng, std::size_t n) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(0.01, 0.99);
    return v;
}
std::vector<double> random_mask(CounterRng& rng, std::size_t n) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.bernoulli(0.4) ? 1.0 : 0.0;
    v[0] = 1.0;
    return v;
}

constexpr LossKind kAll[] = {LossKind::dl, LossKind::tl, LossKind::fl, LossKind::ftl};

}  // namespace

TEST_CASE("dice loss examples") {
    const double eps = 1e-6;
    CHECK(std::abs(dice_loss(row({1, 1, 0, 0}), row({1, 0, 0, 0}), eps).item() - (1 - 2 * (1 + eps) / (3 + eps))) < 1e-15);
    CHECK(std::abs(dice_loss(row({1, 1, 0, 0}), row({1, 0, 0, 0}), eps).item() - 0.333333) < 1e-6);

    auto ones = Tensord::constant({1, 1, 4, 4}, 1.0);
    CHECK(std::abs(dice_loss(ones, ones, eps).item() - (1 - 2 * (16 + eps) / (32 + eps))) < 1e-15);
    CHECK(dice_loss(ones, ones, eps).item() < 1e-6);

    std::vector<double> y(16), p(16);
    for (std::size_t i = 0; i < 16; ++i) {
        y[i] = i < 8 ? 1.0 : 0.0;
        p[i] = 1 - y[i];
    }
    auto disjoint = dice_loss(Tensord::from_data({1, 1, 4, 4}, p), Tensord::from_data({1, 1, 4, 4}, y), eps).item();
    CHECK(std::abs(disjoint - (1 - 2 * eps / (16 + eps))) < 1e-15);
}

TEST_CASE("tversky and focal tversky examples") {
    LossParams q;
    auto half = Tensord::constant({1, 1, 4, 4}, 0.5);
    auto ones = Tensord::constant({1, 1, 4, 4}, 1.0);
    const double ti = tversky_index(half, ones, q.alpha, q.beta, q.epsilon).item();
    CHECK(std::abs(ti - 0.58824) < 1e-5);
    CHECK(std::abs(ti - (8 + 1e-6) / (8 + 0.7 * 8 + 1e-6)) < 1e-15);
    const double ftl = focal_tversky_loss(half, ones, q).item();
    CHECK(std::abs(ftl - 0.306337) < 1e-6);
    CHECK(std::abs(ftl - std::pow(1 - ti, 4.0 / 3.0)) < 1e-15);

    CHECK(tversky_index(ones, ones, q.alpha, q.beta, q.epsilon).item() == doctest::Approx(1.0));
    CHECK(focal_tversky_loss(ones, ones, q).item() < 1e-5);

    LossParams g1 = q;
    g1.gamma = 1.0;
    CounterRng rng(3);
    for (int trial = 0; trial < 10; ++trial) {
        auto p = row(random_probs(rng, 20));
        auto y = row(random_mask(rng, 20));
        CHECK(focal_tversky_loss(p, y, g1).item() == doctest::Approx(tversky_loss(p, y, g1).item()).epsilon(1e-14));
    }
}

TEST_CASE("focal loss examples") {
    const double single = focal_loss(row({0.9}), row({1}), 2.0, 0.25).item();
    CHECK(std::abs(single - (-0.25 * 0.01 * std::log(0.9))) < 1e-15);
    CHECK(std::abs(single - 2.634e-4) < 1e-6);

    auto y = row({1, 0, 1, 0});
    CHECK(focal_loss(y, y, 2.0, 0.25).item() < 1e-5);

    CounterRng rng(4);
    for (int trial = 0; trial < 10; ++trial) {
        const auto p = random_probs(rng, 12), m = random_mask(rng, 12);
        double bce = 0;
        for (std::size_t i = 0; i < 12; ++i) bce -= m[i] * std::log(p[i]) + (1 - m[i]) * std::log(1 - p[i]);
        bce /= 12;
        CHECK(focal_loss(row(p), row(m), 0.0, 0.5).item() == doctest::Approx(0.5 * bce).epsilon(1e-12));
    }
}

TEST_CASE("losses match scalar references on random maps") {
    CounterRng rng(5);
    LossParams q;
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 1 + rng.below(64);
        const auto p = random_probs(rng, n), y = random_mask(rng, n);
        for (LossKind k : kAll) {
            CHECK(std::abs(loss(k, row(p), row(y), q).item() - ref_loss(k, p, y, q)) < 1e-12);
        }
    }
}

TEST_CASE("symmetric tversky with unit exponent is dice up to epsilon placement") {
    LossParams q;
    q.alpha = q.beta = 0.5;
    q.gamma = 1.0;
    q.epsilon = 1e-12;
    CounterRng rng(6);
    for (int trial = 0; trial < 20; ++trial) {
        auto p = row(random_probs(rng, 30));
        auto y = row(random_mask(rng, 30));
        CHECK(std::abs(focal_tversky_loss(p, y, q).item() - dice_loss(p, y, q.epsilon).item()) < 1e-6);
    }
}

TEST_CASE("losses are non-negative and vanish on exact binary predictions") {
    CounterRng rng(7);
    LossParams q;
    for (int trial = 0; trial < 20; ++trial) {
        const auto p = random_probs(rng, 25), y = random_mask(rng, 25);
        for (LossKind k : kAll) {
            CHECK(loss(k, row(p), row(y), q).item() >= 0.0);
            CHECK(loss(k, row(y), row(y), q).item() < 1e-5);
        }
    }
}

TEST_CASE("raising a positive pixel never raises any loss") {
    CounterRng rng(8);
    LossParams q;
    for (int trial = 0; trial < 200; ++trial) {
        auto p = random_probs(rng, 16);
        const auto y = random_mask(rng, 16);
        std::size_t pos = rng.below(16);
        while (y[pos] != 1.0) pos = (pos + 1) % 16;
        auto raised = p;
        raised[pos] = std::min(1.0, p[pos] + rng.uniform(0.001, 0.5));
        for (LossKind k : kAll) {
            CHECK(loss(k, row(raised), row(y), q).item() <= loss(k, row(p), row(y), q).item());
        }
    }
}

TEST_CASE("loss errors") {
    LossParams q;
    CHECK_THROWS_AS(dice_loss(row({0.5, 0.5}), row({1, 0, 0}), 1e-6), ShapeError);
    CHECK_THROWS_AS(dice_loss(row({0.5, 0.5}), row({1, 0.5}), 1e-6), ContractError);
    for (LossKind k : kAll) CHECK_THROWS_AS(loss(k, row({0.5}), row({0.3}), q), ContractError);
    CHECK_THROWS_AS(parse_loss_kind("bce"), ConfigError);
    for (LossKind k : kAll) CHECK(parse_loss_kind(to_string(k)) == k);
    q.gamma = 0;
    CHECK_THROWS_AS(q.validate(), ConfigError);
    CHECK_THROWS_AS(focal_tversky_loss(row({0.5}), row({1}), q), ContractError);
}

TEST_CASE("focal tversky gradient stays finite at a perfect prediction") {
    auto p = Tensord::constant({1, 1, 2, 2}, 1.0, true);
    focal_tversky_loss(p, Tensord::constant({1, 1, 2, 2}, 1.0), LossParams{}).backward();
    for (double g : p.grad()) CHECK(std::isfinite(g));
}

TEST_CASE("loss gradients pass finite-difference checks") {
    CounterRng rng(9);
    LossParams q;
    for (int trial = 0; trial < 10; ++trial) {
        auto p = row(random_probs(rng, 24), true);
        auto y = row(random_mask(rng, 24));
        for (LossKind k : kAll) {
            const auto r = grad_check([&](const Tensord& t) { return loss(k, t, y, q); }, p);
            CHECK_MESSAGE(r.pass, to_string(k) << ": " << r.summary());
        }
    }
}

TEST_CASE("combined objective") {
    CounterRng rng(10);
    ObjectiveConfig cfg;
    for (int trial = 0; trial < 20; ++trial) {
        const auto p1 = random_probs(rng, 32), p2 = random_probs(rng, 32), y = random_mask(rng, 32);
        std::vector<double> pj(32);
        for (std::size_t i = 0; i < 32; ++i) pj[i] = p1[i] * p2[i];
        PredictionTriple<double> t{row(p1), row(p2), row(pj), true};
        const auto terms = combined_objective(cfg, t, row(y));
        const double l1 = ref_loss(cfg.l1_kind, p1, y, cfg.params);
        const double l2 = ref_loss(cfg.l2_kind, p2, y, cfg.params);
        const double lf = ref_loss(cfg.l1_kind, pj, y, cfg.params) + ref_loss(cfg.l2_kind, pj, y, cfg.params);
        CHECK(std::abs(terms.l1.item() - l1) < 1e-12);
        CHECK(std::abs(terms.l2.item() - l2) < 1e-12);
        CHECK(std::abs(terms.lf.item() - lf) < 1e-12);
        CHECK(std::abs(terms.total.item() - (l1 + l2 + lf)) < 1e-7);
    }

    const auto y = random_mask(rng, 16);
    PredictionTriple<double> perfect{row(y), row(y), row(y), true};
    CHECK(combined_objective(cfg, perfect, row(y)).total.item() < 1e-5);

    const auto p = random_probs(rng, 16);
    PredictionTriple<double> single{row(p), row(p), row(p), false};
    const auto terms = combined_objective(cfg, single, row(y));
    CHECK(terms.l2.item() == 0.0);
    const double lf = ref_dice(p, y, 1e-6) + ref_ftl(p, y, cfg.params);
    CHECK(std::abs(terms.total.item() - (ref_dice(p, y, 1e-6) + lf)) < 1e-12);
}
