#include <doctest.h>

#include <cmath>

#include "dmt/objectives.hpp"
#include "test_util.hpp"

using namespace dmt;
using testutil::random_tensor;

TEST_CASE("bce closed forms") {
    Tensor half = Tensor::full({4, 4}, 0.5f);
    Tensor target = Tensor::zeros({4, 4});
    for (int y = 0; y < 4; ++y) target(y, 1) = 1.0f;
    CHECK(bce(half, target) == doctest::Approx(std::log(2.0)).epsilon(1e-6));

    CHECK(bce(target, target) <= 1e-6);  // clipped perfect prediction

    Tensor p = Tensor::full({1, 1}, 0.9f);
    Tensor t = Tensor::full({1, 1}, 1.0f);
    CHECK(bce(p, t) == doctest::Approx(0.1053605).epsilon(1e-5));

    CHECK_THROWS_AS(bce(half, Tensor::zeros({2, 2})), ShapeMismatch);
    CHECK(bce(half, target) >= 0.0);
}

TEST_CASE("bce_grad matches finite differences") {
    Rng rng(121);
    Tensor pred = random_tensor({5, 5}, rng, 0.05, 0.95);
    Tensor target = random_tensor({5, 5}, rng, 0.0, 1.0);
    Tensor g = bce_grad(pred, target);

    std::vector<double> theta(pred.data().begin(), pred.data().end());
    std::vector<double> analytic(g.data().begin(), g.data().end());
    std::vector<double> tvec(target.data().begin(), target.data().end());
    auto fn = [&](const std::vector<double>& x) {
        double acc = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            double p = std::clamp(x[i], 1e-7, 1.0 - 1e-7);
            acc -= tvec[i] * std::log(p) + (1.0 - tvec[i]) * std::log(1.0 - p);
        }
        return acc / static_cast<double>(x.size());
    };
    CHECK(fd_gradcheck(fn, theta, analytic, 1e-6) < 1e-3);
}

TEST_CASE("loss_coarse averages per-level BCE on the foreground channel") {
    Tensor mask = Tensor::full({8, 8}, 1.0f);
    CoarseMask perfect;
    perfect.push_back({Tensor::full({4, 4}, 1.0f), Tensor::zeros({4, 4})});
    perfect.push_back({Tensor::full({2, 2}, 1.0f), Tensor::zeros({2, 2})});
    CHECK(loss_coarse(perfect, mask) <= 1e-6);

    CoarseMask uniform;
    uniform.push_back({Tensor::full({4, 4}, 0.5f), Tensor::full({4, 4}, 0.5f)});
    CHECK(loss_coarse(uniform, mask) == doctest::Approx(std::log(2.0)).epsilon(1e-6));

    // Mean over levels, against per-level BCE computed by hand.
    Rng rng(123);
    Tensor q = random_tensor({8, 8}, rng, 0.0, 1.0);
    CoarseMask mixed;
    mixed.push_back({random_tensor({4, 4}, rng, 0.01, 0.99), Tensor::zeros({4, 4})});
    mixed.push_back({random_tensor({2, 2}, rng, 0.01, 0.99), Tensor::zeros({2, 2})});
    double want = 0.5 * (bce(mixed[0].fg, bilinear_resize_2d(q, 4, 4)) +
                         bce(mixed[1].fg, bilinear_resize_2d(q, 2, 2)));
    CHECK(loss_coarse(mixed, q) == doctest::Approx(want).epsilon(1e-9));
}

TEST_CASE("loss_dual and loss_total follow the stated arithmetic") {
    LossWeights w;  // alpha1 = 1, alpha2 = 0.5
    Tensor half = Tensor::full({3, 3}, 0.5f);
    Tensor mask = Tensor::zeros({3, 3});
    mask(1, 1) = 1.0f;
    CHECK(loss_dual(half, half, mask, w) == doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-6));

    LossWeights a0{0.0f, 0.5f};
    CHECK(loss_dual(half, half, mask, a0) == doctest::Approx(std::log(2.0)).epsilon(1e-6));

    Tensor inv = Tensor::zeros({3, 3});
    for (std::size_t i = 0; i < inv.size(); ++i) inv.data()[i] = 1.0f - mask.data()[i];
    CHECK(loss_dual(mask, inv, mask, w) <= 1e-5);  // both heads perfect

    CHECK(loss_total(0.0, 1.25, w) == doctest::Approx(1.25));
    CHECK(loss_total(2.0, 1.0, w) == doctest::Approx(2.0));
    LossWeights ablate{1.0f, 0.0f};
    CHECK(loss_total(7.0, 1.0, ablate) == doctest::Approx(1.0));
}

TEST_CASE("loss_total is monotone in each component") {
    LossWeights w;
    Rng rng(131);
    for (int trial = 0; trial < 50; ++trial) {
        double l1 = rng.uniform(0.0, 3.0), l2 = rng.uniform(0.0, 3.0);
        double d1 = rng.uniform(0.0, 1.0), d2 = rng.uniform(0.0, 1.0);
        CHECK(loss_total(l1 + d1, l2, w) >= loss_total(l1, l2, w));
        CHECK(loss_total(l1, l2 + d2, w) >= loss_total(l1, l2, w));
    }
}

TEST_CASE("loss_tsf is the mean of per-shot BCEs") {
    Tensor mask = Tensor::zeros({2, 2});
    mask(0, 0) = 1.0f;
    CHECK(loss_tsf({mask}, {mask}) <= 1e-6);

    Tensor half = Tensor::full({2, 2}, 0.5f);
    CHECK(loss_tsf({half, half}, {mask, mask}) == doctest::Approx(std::log(2.0)).epsilon(1e-6));

    Rng rng(125);
    Tensor p1 = random_tensor({2, 2}, rng, 0.1, 0.9);
    Tensor p2 = random_tensor({2, 2}, rng, 0.1, 0.9);
    double want = 0.5 * (bce(p1, mask) + bce(p2, mask));
    CHECK(loss_tsf({p1, p2}, {mask, mask}) == doctest::Approx(want).epsilon(1e-9));

    CHECK_THROWS_AS(loss_tsf({}, {}), ShapeMismatch);
}

TEST_CASE("adam zero gradient is a fixed point that still counts steps") {
    Rng rng(127);
    Tensor p = random_tensor({3, 3}, rng);
    Tensor before = p;
    Tensor g = Tensor::zeros({3, 3});
    AdamState optim;
    AdamConfig cfg;
    optim.step({{"p", &p}}, {{"p", &g}}, cfg);
    CHECK(max_abs_diff(p, before) == 0.0f);
    CHECK(optim.step_count() == 1);
}

TEST_CASE("first adam step moves by roughly lr times the gradient sign") {
    Tensor p = Tensor::from_data({4}, {1.0f, -2.0f, 0.5f, 3.0f});
    Tensor g = Tensor::from_data({4}, {0.3f, -0.7f, 2.0f, -0.01f});
    Tensor before = p;
    AdamState optim;
    AdamConfig cfg;
    cfg.lr = 1e-3f;
    optim.step({{"p", &p}}, {{"p", &g}}, cfg);
    for (int i = 0; i < 4; ++i) {
        double delta = static_cast<double>(p(i)) - before(i);
        double sign = g(i) > 0 ? 1.0 : -1.0;
        CHECK(delta == doctest::Approx(-cfg.lr * sign).epsilon(1e-3));
    }
}

TEST_CASE("adam trajectories are deterministic and permutation-consistent") {
    Rng rng(129);
    Tensor g1 = random_tensor({8}, rng);
    auto run = [&](std::vector<int> order) {
        Tensor a = Tensor::from_data({8}, {1, 2, 3, 4, 5, 6, 7, 8});
        Tensor b = Tensor::from_data({8}, {8, 7, 6, 5, 4, 3, 2, 1});
        Tensor ga = g1, gb = g1;
        AdamState optim;
        AdamConfig cfg;
        for (int step = 0; step < 5; ++step) {
            std::vector<ParamRef> ps, gs;
            for (int which : order) {
                ps.push_back({which == 0 ? "a" : "b", which == 0 ? &a : &b});
                gs.push_back({which == 0 ? "a" : "b", which == 0 ? &ga : &gb});
            }
            optim.step(ps, gs, cfg);
        }
        return std::make_pair(a, b);
    };
    auto [a1, b1] = run({0, 1});
    auto [a2, b2] = run({1, 0});
    CHECK(max_abs_diff(a1, a2) == 0.0f);
    CHECK(max_abs_diff(b1, b2) == 0.0f);

    Tensor p = Tensor::zeros({2});
    Tensor bad = Tensor::zeros({3});
    AdamState optim;
    CHECK_THROWS_AS(optim.step({{"p", &p}}, {{"p", &bad}}, AdamConfig{}), ShapeMismatch);
}

TEST_CASE("fd_gradcheck is exact on quadratics and detects wrong gradients") {
    auto quad = [](const std::vector<double>& x) {
        double acc = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) acc += (i + 1.0) * x[i] * x[i];
        return acc;
    };
    std::vector<double> x{0.3, -1.2, 2.0};
    std::vector<double> grad{2.0 * 1.0 * 0.3, 2.0 * 2.0 * -1.2, 2.0 * 3.0 * 2.0};
    CHECK(fd_gradcheck(quad, x, grad) <= 1e-6);

    std::vector<double> doubled{2.0 * grad[0], 2.0 * grad[1], 2.0 * grad[2]};
    CHECK(fd_gradcheck(quad, x, doubled) >= 0.4);  // clearly detected

    auto bad = [](const std::vector<double>& x) { return std::log(x[0]); };
    std::vector<double> near_zero{1e-9};
    std::vector<double> g1{1e9};
    CHECK_THROWS_AS(fd_gradcheck(bad, near_zero, g1), NonFiniteLoss);
}
