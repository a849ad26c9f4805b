#include <cmath>
#include <numbers>

#include "doctest.h"
#include "helpers.hpp"
#include "tnseg/gradcheck.hpp"
#include "tnseg/losses.hpp"
#include "tnseg/networks.hpp"

using namespace tnseg;
using test::random_tensor;

namespace {

// [1,2,1,n] probabilities from (p0, p1) pairs.
Tensor pairs(std::vector<std::pair<double, double>> ps) {
    const std::size_t n = ps.size();
    Tensor t(Shape{1, 2, 1, n});
    for (std::size_t i = 0; i < n; ++i) {
        t[i] = ps[i].first;
        t[n + i] = ps[i].second;
    }
    return t;
}

double value(const std::function<Var(Tape&)>& f) {
    Tape t;
    return f(t).value()[0];
}

}  // namespace

TEST_SUITE("losses") {

TEST_CASE("entropy map anchors") {
    Tape t;
    const Tensor e = entropy_map(t.constant(pairs({{0.5, 0.5}, {1.0, 0.0}, {0.0, 1.0}, {0.9, 0.1}}))).value();
    CHECK(e.shape() == Shape{1, 1, 1, 4});
    CHECK(e[0] == 1.0);
    CHECK(e[1] == 0.0);
    CHECK(e[2] == 0.0);
    const double oracle = -(0.9 * std::log(0.9) + 0.1 * std::log(0.1)) / std::log(2.0);
    CHECK(e[3] == doctest::Approx(oracle).epsilon(1e-15));
    CHECK(std::abs(e[3] - 0.4690) < 1e-4);
}

TEST_CASE("entropy map range and channel-permutation invariance") {
    Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t C = 2 + rng.index(3);
        Tensor logits = random_tensor(Shape{2, C, 3, 3}, rng, -6, 6);
        Tape t;
        const Tensor p = ops::softmax_channels(t.constant(logits)).value();
        Tensor q(p.shape());
        const std::size_t shift = 1 + rng.index(C - 1);
        for (std::size_t n = 0; n < 2; ++n)
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t i = 0; i < 9; ++i) q[(n * C + c) * 9 + i] = p[(n * C + (c + shift) % C) * 9 + i];
        const Tensor ep = entropy_map(t.constant(p)).value();
        const Tensor eq = entropy_map(t.constant(q)).value();
        for (std::size_t i = 0; i < ep.size(); ++i) {
            CHECK(ep[i] >= 0.0);
            CHECK(ep[i] <= 1.0);
            CHECK(std::abs(ep[i] - eq[i]) < 1e-15);
        }
    }
}

TEST_CASE("discriminator loss anchors") {
    const Tensor half(Shape{2, 1, 2, 2}, 0.5);
    const double l = value([&](Tape& t) { return discriminator_loss(t.constant(half), t.constant(half)); });
    CHECK(std::abs(l - 2.0 * std::numbers::ln2) < 1e-12);
    const double perfect = value([](Tape& t) {
        return discriminator_loss(t.constant(Tensor(Shape{1, 1, 1, 1}, 1.0)), t.constant(Tensor(Shape{1, 1, 1, 1}, 0.0)));
    });
    CHECK(perfect >= 0.0);
    CHECK(perfect < 1e-6);
    const double inverted = value([](Tape& t) {
        return discriminator_loss(t.constant(Tensor(Shape{1, 1, 1, 1}, 0.0)), t.constant(Tensor(Shape{1, 1, 1, 1}, 1.0)));
    });
    CHECK(inverted == doctest::Approx(-2.0 * std::log(1e-7)).epsilon(1e-9));
    CHECK(std::abs(inverted / 2.0 - 16.12) < 5e-3);
}

TEST_CASE("adversarial loss anchors") {
    CHECK(value([](Tape& t) { return adversarial_loss(t.constant(Tensor(Shape{3, 1, 2, 2}, 0.5))); }) ==
          doctest::Approx(std::numbers::ln2).epsilon(1e-15));
    const double fooled = value([](Tape& t) { return adversarial_loss(t.constant(Tensor(Shape{1, 1, 1, 1}, 1.0))); });
    CHECK(fooled >= 0.0);
    CHECK(fooled < 1e-6);
    CHECK(value([](Tape& t) { return adversarial_loss(t.constant(Tensor(Shape{1, 1, 1, 1}, 1e-9))); }) ==
          doctest::Approx(-std::log(1e-7)).epsilon(1e-12));
}

TEST_CASE("supervised cross-entropy") {
    const Tensor labels(Shape{1, 1, 3}, std::vector<double>{1, 0, 1});
    const Tensor all(Shape{1, 1, 3}, 1.0);
    const Tensor sure = pairs({{1e-7, 1 - 1e-7}, {1 - 1e-7, 1e-7}, {1e-7, 1 - 1e-7}});
    const double l0 = value([&](Tape& t) { return supervised_ce(t.constant(sure), labels, all); });
    CHECK(l0 >= 0.0);
    CHECK(l0 < 2e-7);
    const Tensor half = pairs({{0.5, 0.5}, {0.5, 0.5}, {0.5, 0.5}});
    CHECK(value([&](Tape& t) { return supervised_ce(t.constant(half), labels, all); }) ==
          doctest::Approx(std::numbers::ln2).epsilon(1e-15));
    // Pixel 1 is confidently wrong but masked out.
    const Tensor wrong = pairs({{0.2, 0.8}, {0.0, 1.0}, {0.4, 0.6}});
    const Tensor mask(Shape{1, 1, 3}, std::vector<double>{1, 0, 1});
    CHECK(value([&](Tape& t) { return supervised_ce(t.constant(wrong), labels, mask); }) ==
          doctest::Approx(-(std::log(0.8) + std::log(0.6)) / 2.0).epsilon(1e-14));
    Tape t;
    CHECK_THROWS(supervised_ce(t.constant(half), labels, Tensor(Shape{1, 1, 3}, 0.0)));
}

TEST_CASE("minent loss") {
    const Tensor ones(Shape{1, 1, 4}, 1.0);
    const Tensor uniform = pairs({{0.5, 0.5}, {0.5, 0.5}, {0.5, 0.5}, {0.5, 0.5}});
    const Tensor onehot = pairs({{1, 0}, {0, 1}, {1, 0}, {1, 0}});
    const Tensor mixed = pairs({{0.5, 0.5}, {0, 1}, {0.5, 0.5}, {1, 0}});
    auto run = [&](const Tensor& p, const Tensor& m) {
        return value([&](Tape& t) { return minent_loss(entropy_map(t.constant(p)), m); });
    };
    CHECK(run(uniform, ones) == 1.0);
    CHECK(run(onehot, ones) == 0.0);
    CHECK(run(mixed, ones) == 0.5);
    CHECK(run(mixed, Tensor(Shape{1, 1, 4}, std::vector<double>{1, 0, 1, 0})) == 1.0);
    Tape t;
    CHECK_THROWS(minent_loss(entropy_map(t.constant(mixed)), Tensor(Shape{1, 1, 4}, 0.0)));
}

TEST_CASE("segmenter objective") {
    LossWeights w;
    CHECK(w.lambda_d == 1e-3);
    auto obj = [](double sup, std::optional<double> adv, std::optional<double> ent, LossWeights lw) {
        return value([&](Tape& t) {
            std::optional<Var> a, e;
            if (adv) a = t.constant(Tensor::scalar(*adv));
            if (ent) e = t.constant(Tensor::scalar(*ent));
            return segmenter_objective(t.constant(Tensor::scalar(sup)), a, e, lw);
        });
    };
    CHECK(obj(1.0, 2.0, 0.0, w) == doctest::Approx(1.002).epsilon(1e-15));
    CHECK(obj(0.7, 5.0, 3.0, LossWeights{0.0, 0.0}) == 0.7);
    CHECK(obj(0.7, std::nullopt, std::nullopt, w) == 0.7);
    CHECK(obj(1.0, 0.0, 1.0, LossWeights{1e-3, 0.01}) == doctest::Approx(1.01).epsilon(1e-15));
    CHECK_THROWS(LossWeights{-1e-3, 0.0}.validate());
    CHECK_THROWS(LossWeights{0.0, -1.0}.validate());
}

TEST_CASE("losses are non-negative on random inputs") {
    Rng rng(5);
    for (int trial = 0; trial < 100; ++trial) {
        Tape t;
        const Var p = ops::softmax_channels(t.constant(random_tensor(Shape{2, 2, 4, 4}, rng, -30, 30)));
        Tensor labels(Shape{2, 4, 4}), mask(Shape{2, 4, 4}, 1.0);
        for (double& v : labels.data()) v = rng.coin() ? 1.0 : 0.0;
        const Var s = t.constant(random_tensor(Shape{2, 1, 2, 2}, rng, 0, 1));
        const Var u = t.constant(random_tensor(Shape{2, 1, 2, 2}, rng, 0, 1));
        CHECK(supervised_ce(p, labels, mask).value()[0] >= 0.0);
        CHECK(discriminator_loss(s, u).value()[0] >= 0.0);
        CHECK(adversarial_loss(u).value()[0] >= 0.0);
        CHECK(minent_loss(entropy_map(p), mask).value()[0] >= 0.0);
    }
}

TEST_CASE("gradient checks through softmax and entropy") {
    Rng rng(7);
    for (int seed = 0; seed < 10; ++seed) {
        const Tensor logits = random_tensor(Shape{2, 2, 3, 3}, rng, -2, 2);
        Tensor labels(Shape{2, 3, 3}), mask(Shape{2, 3, 3}, 1.0);
        for (double& v : labels.data()) v = rng.coin() ? 1.0 : 0.0;
        mask[4] = 0.0;
        const double e1 = grad_check(
            [&](Tape&, std::span<const Var> v) { return minent_loss(entropy_map(ops::softmax_channels(v[0])), mask); },
            {logits});
        const double e2 = grad_check(
            [&](Tape&, std::span<const Var> v) { return supervised_ce(ops::softmax_channels(v[0]), labels, mask); },
            {logits});
        const double e3 = grad_check(
            [&](Tape&, std::span<const Var> v) { return discriminator_loss(ops::sigmoid(v[0]), ops::sigmoid(v[1])); },
            {random_tensor(Shape{2, 1, 2, 2}, rng), random_tensor(Shape{2, 1, 2, 2}, rng)});
        const double e4 =
            grad_check([&](Tape&, std::span<const Var> v) { return adversarial_loss(ops::sigmoid(v[0])); },
                       {random_tensor(Shape{2, 1, 2, 2}, rng)});
        CHECK(e1 < 1e-4);
        CHECK(e2 < 1e-4);
        CHECK(e3 < 1e-4);
        CHECK(e4 < 1e-4);
    }
}

TEST_CASE("adversarial gradient reaches the segmenter through a fixed discriminator") {
    SegmenterConfig cfg;
    cfg.depth = 1;
    cfg.base_channels = 4;
    cfg.norm = NormKind::tn;
    Segmenter seg(cfg, 3);
    DiscriminatorConfig dc;
    dc.widths = {4, 4, 4, 1};
    Discriminator disc(dc, 4);
    // The final layer outputs logit 0: D = 0.5 everywhere regardless of input.
    auto dp = disc.parameters();
    dp[dp.size() - 2]->value.fill(0.0);
    dp[dp.size() - 1]->value.fill(0.0);
    Rng rng(8);
    Tape t;
    const auto out = seg.forward(t, random_tensor(Shape{2, 1, 16, 16}, rng, 0, 1),
                                 random_tensor(Shape{2, 1, 16, 16}, rng, 0, 1), Mode::train);
    const Var adv = adversarial_loss(disc.forward(entropy_map(*out.tgt), true));
    CHECK(adv.value()[0] == doctest::Approx(std::numbers::ln2).epsilon(1e-15));
    t.backward(adv);
    for (Parameter* p : disc.parameters()) CHECK(p->grad.empty());
    for (Parameter* p : seg.parameters()) CHECK((p->grad.empty() || test::max_abs(p->grad) == 0.0));
    // A live final layer makes the score depend on the entropy map.
    Rng wr(9);
    for (double& v : dp[dp.size() - 2]->value.data()) v = wr.uniform(-0.5, 0.5);
    for (Parameter* p : seg.parameters()) p->zero_grad();
    Tape t2;
    const auto out2 = seg.forward(t2, random_tensor(Shape{2, 1, 16, 16}, rng, 0, 1),
                                  random_tensor(Shape{2, 1, 16, 16}, rng, 0, 1), Mode::train);
    t2.backward(adversarial_loss(disc.forward(entropy_map(*out2.tgt), true)));
    double total = 0.0;
    bool finite = true;
    for (Parameter* p : seg.parameters()) {
        if (p->grad.empty()) continue;
        finite = finite && p->grad.all_finite();
        total += test::max_abs(p->grad);
    }
    CHECK(finite);
    CHECK(total > 0.0);
    for (Parameter* p : disc.parameters()) CHECK(p->grad.empty());
}

}  // TEST_SUITE
