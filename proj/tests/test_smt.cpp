#include <doctest.h>

#include <cmath>

#include "dmt/feature_provider.hpp"
#include "dmt/smt.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace dmt;
using testutil::random_tensor;

namespace {

Tensor vec(std::vector<float> v) {
    const int n = static_cast<int>(v.size());
    return Tensor::from_data({n}, std::move(v));
}

// A blobby binary mask at image resolution.
Tensor disk_mask(int size, double cx, double cy, double r) {
    Tensor m = Tensor::zeros({size, size});
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
            if (dx * dx + dy * dy <= r * r) m(y, x) = 1.0f;
        }
    }
    return m;
}

}  // namespace

TEST_CASE("masked_avg_pool closed forms") {
    Tensor f = Tensor::from_data({1, 2, 2}, {1, 2, 3, 4});
    Tensor ones = Tensor::full({2, 2}, 1.0f);
    CHECK(masked_avg_pool(f, ones)(0) == doctest::Approx(2.5));

    Tensor diag = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    CHECK(masked_avg_pool(f, diag)(0) == doctest::Approx(2.5));

    Tensor zero = Tensor::zeros({2, 2});
    CHECK_THROWS_AS(masked_avg_pool(f, zero), EmptyMask);
}

TEST_CASE("masked_avg_pool matches the scalar oracle") {
    Rng rng(41);
    for (int trial = 0; trial < 50; ++trial) {
        Tensor f = random_tensor({3, 8, 8}, rng);
        Tensor m = random_tensor({8, 8}, rng, 0.0, 1.0);
        Tensor got = masked_avg_pool(f, m);
        auto want = oracle::masked_avg_pool(oracle::from_tensor(f), oracle::from_tensor(m));
        for (int c = 0; c < 3; ++c) {
            CHECK(got(c) == doctest::Approx(want[static_cast<std::size_t>(c)]).epsilon(1e-5));
        }
    }
}

TEST_CASE("split_local tiles row-major") {
    Tensor f = Tensor::zeros({1, 4, 4});
    Tensor m = Tensor::zeros({4, 4});
    for (int y = 0; y < 4; ++y) {
        for (int x = 0; x < 4; ++x) {
            f(0, y, x) = static_cast<float>(y * 4 + x);
            m(y, x) = static_cast<float>(y * 4 + x) / 16.0f;
        }
    }
    auto tiles = split_local(f, m, 0.5f);
    REQUIRE(tiles.size() == 4);
    CHECK(tiles[0].features.shape() == std::vector<int>{1, 2, 2});
    CHECK(tiles[0].features(0, 0, 0) == 0.0f);
    CHECK(tiles[1].features(0, 0, 0) == 2.0f);   // second tile starts at column 2
    CHECK(tiles[2].features(0, 0, 0) == 8.0f);   // third tile starts at row 2
    CHECK(tiles[3].features(0, 1, 1) == 15.0f);
    CHECK(tiles[3].mask(1, 1) == doctest::Approx(15.0f / 16.0f));

    Tensor f16 = Tensor::zeros({2, 16, 16});
    Tensor m16 = Tensor::zeros({16, 16});
    auto tiles16 = split_local(f16, m16, 0.25f);
    CHECK(tiles16.size() == 16);
    CHECK(tiles16[0].features.shape() == std::vector<int>{2, 4, 4});

    CHECK_THROWS_AS(split_local(f, m, 0.3f), DimensionMismatch);
    Tensor f6 = Tensor::zeros({1, 6, 6});
    Tensor m6 = Tensor::zeros({6, 6});
    CHECK_THROWS_AS(split_local(f6, m6, 0.25f), DimensionMismatch);
}

TEST_CASE("self_match closed forms") {
    // Constant query equal to the fg prototype, orthogonal bg prototype.
    Tensor f = Tensor::zeros({2, 3, 3});
    for (int y = 0; y < 3; ++y) {
        for (int x = 0; x < 3; ++x) f(0, y, x) = 1.0f;
    }
    std::vector<LocalPair> pairs;
    pairs.push_back({vec({1, 0}), vec({0, 1}), true});
    CoarseMaskLevel cm = self_match(f, pairs);
    double expect = std::exp(1.0) / (std::exp(1.0) + 1.0);
    for (float v : cm.fg.data()) CHECK(v == doctest::Approx(expect).epsilon(1e-6));

    // Identical prototypes give an uninformative 0.5 map.
    std::vector<LocalPair> same;
    same.push_back({vec({1, 2}), vec({1, 2}), true});
    CoarseMaskLevel cm2 = self_match(f, same);
    for (float v : cm2.fg.data()) CHECK(v == doctest::Approx(0.5));
}

TEST_CASE("self_match averages pairs") {
    Rng rng(43);
    Tensor f = random_tensor({4, 5, 5}, rng);
    std::vector<LocalPair> p1{{random_tensor({4}, rng), random_tensor({4}, rng), true}};
    std::vector<LocalPair> p2{{random_tensor({4}, rng), random_tensor({4}, rng), true}};
    std::vector<LocalPair> both{p1[0], p2[0]};

    CoarseMaskLevel a = self_match(f, p1);
    CoarseMaskLevel b = self_match(f, p2);
    CoarseMaskLevel ab = self_match(f, both);
    for (std::size_t i = 0; i < ab.fg.size(); ++i) {
        CHECK(ab.fg.data()[i] ==
              doctest::Approx(0.5 * (a.fg.data()[i] + b.fg.data()[i])).epsilon(1e-6));
    }
}

TEST_CASE("self_match skips invalid pairs and falls back to the global pair") {
    Rng rng(44);
    Tensor f = random_tensor({3, 4, 4}, rng);
    LocalPair valid{random_tensor({3}, rng), random_tensor({3}, rng), true};
    LocalPair invalid{Tensor{}, Tensor{}, false};

    CoarseMaskLevel direct = self_match(f, {valid});
    CoarseMaskLevel mixed = self_match(f, {invalid, valid, invalid});
    CHECK(max_abs_diff(direct.fg, mixed.fg) == 0.0f);

    LocalPair global{random_tensor({3}, rng), random_tensor({3}, rng), true};
    CoarseMaskLevel fb = self_match(f, {invalid}, &global);
    CoarseMaskLevel want = self_match(f, {global});
    CHECK(max_abs_diff(fb.fg, want.fg) == 0.0f);

    CHECK_THROWS_AS(self_match(f, {invalid}), NoValidPrototypes);
    CHECK_THROWS_AS(self_match(f, {}), NoValidPrototypes);
}

TEST_CASE("self_match matches the scalar confidence-matching oracle") {
    Rng rng(45);
    for (int trial = 0; trial < 50; ++trial) {
        Tensor f = random_tensor({4, 8, 8}, rng);
        std::vector<LocalPair> pairs;
        std::vector<oracle::ProtoPair> opairs;
        int n = 1 + static_cast<int>(rng.below(3));
        for (int p = 0; p < n; ++p) {
            Tensor cf = random_tensor({4}, rng);
            Tensor cb = random_tensor({4}, rng);
            opairs.push_back({{cf.data().begin(), cf.data().end()},
                              {cb.data().begin(), cb.data().end()}});
            pairs.push_back({std::move(cf), std::move(cb), true});
        }
        CoarseMaskLevel got = self_match(f, pairs);
        auto [ofg, obg] = oracle::self_match(oracle::from_tensor(f), opairs);
        CHECK(oracle::max_abs_diff(ofg, got.fg) < 1e-5);
        CHECK(oracle::max_abs_diff(obg, got.bg) < 1e-5);
    }
}

TEST_CASE("query_prototypes soft pooling") {
    Tensor f = Tensor::zeros({1, 2, 4});
    for (int x = 0; x < 4; ++x) {
        f(0, 0, x) = x < 2 ? 1.0f : 5.0f;
        f(0, 1, x) = x < 2 ? 1.0f : 5.0f;
    }
    CoarseMaskLevel uniform{Tensor::full({2, 4}, 1.0f), Tensor::zeros({2, 4})};
    CHECK_THROWS_AS(query_prototypes(f, uniform), EmptyMask);  // bg weights empty

    Tensor left = Tensor::zeros({2, 4});
    Tensor right = Tensor::zeros({2, 4});
    for (int y = 0; y < 2; ++y) {
        for (int x = 0; x < 4; ++x) {
            left(y, x) = x < 2 ? 1.0f : 0.0f;
            right(y, x) = x < 2 ? 0.0f : 1.0f;
        }
    }
    auto [cf, cb] = query_prototypes(f, {left, right});
    CHECK(cf(0) == doctest::Approx(1.0));
    CHECK(cb(0) == doctest::Approx(5.0));
}

TEST_CASE("build_prototype_matrix normalizes columns") {
    Tensor m = build_prototype_matrix(vec({3, 0}), vec({0, 4}));
    CHECK(m(0, 0) == doctest::Approx(1.0));
    CHECK(m(1, 0) == doctest::Approx(0.0));
    CHECK(m(0, 1) == doctest::Approx(0.0));
    CHECK(m(1, 1) == doctest::Approx(1.0));

    Tensor m2 = build_prototype_matrix(vec({1, 1}), vec({1, 0}));
    CHECK(m2(0, 0) == doctest::Approx(0.7071).epsilon(1e-3));
    CHECK(m2(1, 0) == doctest::Approx(0.7071).epsilon(1e-3));
    CHECK(m2(0, 1) == doctest::Approx(1.0));

    // Duplicate columns build fine; the singularity is flagged downstream.
    Tensor dup = build_prototype_matrix(vec({1, 2}), vec({1, 2}));
    CHECK(min_singular_value_2col(dup) < 1e-6f);
    CHECK_THROWS_AS(pinv2(dup, 0.0f), SingularPrototypeMatrix);

    CHECK_THROWS_AS(build_prototype_matrix(vec({0, 0}), vec({1, 0})), ZeroPrototype);
}

TEST_CASE("blend_pinv is the stated affine combination") {
    Rng rng(47);
    Tensor a = random_tensor({2, 5}, rng);
    Tensor b = random_tensor({2, 5}, rng);
    CHECK(max_abs_diff(blend_pinv(a, b, 1.0f), a) == 0.0f);
    CHECK(max_abs_diff(blend_pinv(a, b, 0.0f), b) == 0.0f);

    Tensor two_a = Tensor::zeros(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) two_a.data()[i] = 2.0f * a.data()[i];
    Tensor mixed = blend_pinv(two_a, Tensor::zeros(a.shape()), 0.5f);
    CHECK(max_abs_diff(mixed, a) < 1e-6f);
}

TEST_CASE("solve_transform fixed points and exactness") {
    Tensor c = Tensor::from_data({3, 2}, {1, 0, 0, 1, 0, 0});
    Tensor w = solve_transform(c, pinv2(c, 0.0f));
    CHECK(max_abs_diff(matmul(w, c), c) < 1e-6f);

    Tensor zero_a = Tensor::zeros({3, 2});
    Tensor wz = solve_transform(zero_a, pinv2(c, 0.0f));
    for (float v : wz.data()) CHECK(v == 0.0f);

    Rng rng(49);
    int checked = 0;
    while (checked < 30) {
        Tensor cm = random_tensor({8, 2}, rng);
        if (min_singular_value_2col(cm) < 1e-3f) continue;
        Tensor am = random_tensor({8, 2}, rng);
        Tensor wr = solve_transform(am, pinv2(cm, 0.0f));
        CHECK(max_abs_diff(matmul(wr, cm), am) <= 1e-4f);
        ++checked;
    }
}

TEST_CASE("apply_transform identities and scalar loop") {
    Rng rng(51);
    Tensor f = random_tensor({3, 4, 4}, rng);
    Tensor eye = Tensor::from_data({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    CHECK(max_abs_diff(apply_transform(eye, f), f) == 0.0f);

    Tensor two = Tensor::from_data({3, 3}, {2, 0, 0, 0, 2, 0, 0, 0, 2});
    Tensor scaled = apply_transform(two, f);
    for (std::size_t i = 0; i < f.size(); ++i) {
        CHECK(scaled.data()[i] == doctest::Approx(2.0f * f.data()[i]));
    }

    Tensor w = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    Tensor g = Tensor::from_data({2, 1, 1}, {5, 7});
    Tensor out = apply_transform(w, g);
    CHECK(out(0, 0, 0) == doctest::Approx(1 * 5 + 2 * 7));
    CHECK(out(1, 0, 0) == doctest::Approx(3 * 5 + 4 * 7));
}

namespace {

struct FixtureEpisode {
    PyramidSpec spec;
    FeaturePyramid support;
    FeaturePyramid query;
    Tensor mask;
    AnchorSet anchors;

    static FixtureEpisode make(std::uint64_t seed) {
        FixtureEpisode e;
        FeatureExtractor ex(e.spec, seed);
        Tensor img = Tensor::zeros({3, 64, 64});
        Rng rng(seed);
        for (float& v : img.data()) v = static_cast<float>(rng.uniform(0.0, 1.0));
        Image image = Image::from_tensor(std::move(img));
        e.support = ex.extract(image, ExtractMode::kFixture);
        e.query = e.support;  // same image on both sides
        e.mask = disk_mask(64, 30.0, 34.0, 16.0);
        e.anchors = AnchorSet::seeded(e.spec, seed + 1);
        return e;
    }
};

}  // namespace

TEST_CASE("smt_forward coarse mask concentrates on the masked region") {
    FixtureEpisode e = FixtureEpisode::make(7);
    SmtConfig cfg;
    SmtResult res = smt_forward({{&e.support, &e.mask}}, e.query, e.anchors, e.spec, cfg);

    REQUIRE(res.coarse.size() == 3);
    for (int l = 0; l < 3; ++l) {
        const CoarseMaskLevel& cm = res.coarse[static_cast<std::size_t>(l)];
        Tensor mask_l = bilinear_resize_2d(e.mask, cm.fg.dim(0), cm.fg.dim(1));
        double in_sum = 0.0, out_sum = 0.0, in_n = 0.0, out_n = 0.0;
        for (std::size_t i = 0; i < mask_l.size(); ++i) {
            if (mask_l.data()[i] > 0.5f) {
                in_sum += cm.fg.data()[i];
                in_n += 1.0;
            } else {
                out_sum += cm.fg.data()[i];
                out_n += 1.0;
            }
        }
        CHECK(in_sum / in_n > out_sum / out_n);
    }

    // Channels sum to one everywhere.
    for (const CoarseMaskLevel& cm : res.coarse) {
        for (std::size_t i = 0; i < cm.fg.size(); ++i) {
            CHECK(cm.fg.data()[i] + cm.bg.data()[i] == doctest::Approx(1.0).epsilon(1e-6));
        }
    }
}

TEST_CASE("smt_forward coarse mask equals the scalar oracle on the fixture episode") {
    FixtureEpisode e = FixtureEpisode::make(9);
    SmtConfig cfg;
    SmtResult res = smt_forward({{&e.support, &e.mask}}, e.query, e.anchors, e.spec, cfg);

    // Rebuild the level-0 pairs with the same tiling rule and compare maps.
    const Tensor& f_s = e.support[0];
    Tensor mask_l = bilinear_resize_2d(e.mask, f_s.dim(1), f_s.dim(2));
    LevelPrototypes protos = compute_level_prototypes(f_s, mask_l, cfg.gamma);
    std::vector<oracle::ProtoPair> opairs;
    for (const LocalPair& p : protos.locals) {
        if (!p.valid) continue;
        opairs.push_back({{p.c_f.data().begin(), p.c_f.data().end()},
                          {p.c_b.data().begin(), p.c_b.data().end()}});
    }
    REQUIRE(!opairs.empty());
    auto [ofg, obg] = oracle::self_match(oracle::from_tensor(e.query[0]), opairs);
    CHECK(oracle::max_abs_diff(ofg, res.coarse[0].fg) < 1e-5);
}

TEST_CASE("smt_forward transform exactness for the support role") {
    FixtureEpisode e = FixtureEpisode::make(11);
    SmtConfig cfg;
    cfg.ridge = 0.0f;
    SmtResult res = smt_forward({{&e.support, &e.mask}}, e.query, e.anchors, e.spec, cfg);
    for (const SmtLevel& lvl : res.levels) {
        if (min_singular_value_2col(lvl.c_s) < 1e-3f) continue;
        CHECK(max_abs_diff(matmul(lvl.w_s, lvl.c_s), lvl.a_s) <= 1e-4f);
    }
}

TEST_CASE("beta zero makes the query transform depend only on support prototypes") {
    FixtureEpisode e = FixtureEpisode::make(13);
    SmtConfig cfg;
    cfg.beta = 0.0f;
    SmtResult res = smt_forward({{&e.support, &e.mask}}, e.query, e.anchors, e.spec, cfg);
    for (const SmtLevel& lvl : res.levels) {
        Tensor want = matmul(lvl.a_q, lvl.cs_pinv);
        CHECK(max_abs_diff(lvl.w_q, want) < 1e-6f);
    }
}

TEST_CASE("five identical shots equal one shot") {
    FixtureEpisode e = FixtureEpisode::make(15);
    SmtConfig cfg;
    SmtResult one = smt_forward({{&e.support, &e.mask}}, e.query, e.anchors, e.spec, cfg);
    std::vector<SupportShot> five(5, SupportShot{&e.support, &e.mask});
    SmtResult multi = smt_forward(five, e.query, e.anchors, e.spec, cfg);
    for (std::size_t l = 0; l < one.levels.size(); ++l) {
        CHECK(max_abs_diff(one.levels[l].w_s, multi.levels[l].w_s) < 1e-6f);
        CHECK(max_abs_diff(one.levels[l].w_q, multi.levels[l].w_q) < 1e-6f);
        CHECK(max_abs_diff(one.coarse[l].fg, multi.coarse[l].fg) < 1e-6f);
    }
}

TEST_CASE("coarse mask is invariant to query feature scaling") {
    FixtureEpisode e = FixtureEpisode::make(17);
    SmtConfig cfg;
    SmtResult base = smt_forward({{&e.support, &e.mask}}, e.query, e.anchors, e.spec, cfg);
    for (float lambda : {0.1f, 10.0f}) {
        FeaturePyramid scaled = e.query;
        for (Tensor& level : scaled) {
            for (float& v : level.data()) v *= lambda;
        }
        SmtResult res = smt_forward({{&e.support, &e.mask}}, scaled, e.anchors, e.spec, cfg);
        for (std::size_t l = 0; l < base.coarse.size(); ++l) {
            CHECK(max_abs_diff(base.coarse[l].fg, res.coarse[l].fg) <= 1e-6f);
        }
    }
}

TEST_CASE("gamma 1 reduces to global-prototype matching") {
    FixtureEpisode e = FixtureEpisode::make(19);
    SmtConfig cfg;
    cfg.gamma = 1.0f;
    SmtResult res = smt_forward({{&e.support, &e.mask}}, e.query, e.anchors, e.spec, cfg);

    const Tensor& f_s = e.support[0];
    Tensor mask_l = bilinear_resize_2d(e.mask, f_s.dim(1), f_s.dim(2));
    LevelPrototypes protos = compute_level_prototypes(f_s, mask_l, 1.0f);
    std::vector<LocalPair> global{{protos.c_f, protos.c_b, true}};
    CoarseMaskLevel want = self_match(e.query[0], global);
    CHECK(max_abs_diff(res.coarse[0].fg, want.fg) < 1e-6f);
}

TEST_CASE("anchor gradients flow through the solve") {
    FixtureEpisode e = FixtureEpisode::make(21);
    SmtConfig cfg;
    SmtResult res = smt_forward({{&e.support, &e.mask}}, e.query, e.anchors, e.spec, cfg);

    std::vector<Tensor> d_w_s, d_w_q;
    Rng rng(55);
    for (const SmtLevel& lvl : res.levels) {
        d_w_s.push_back(testutil::random_tensor(lvl.w_s.shape(), rng));
        d_w_q.push_back(testutil::random_tensor(lvl.w_q.shape(), rng));
    }
    AnchorGrads grads = AnchorGrads::zeros_like(e.anchors);
    accumulate_anchor_grads(e.anchors, e.spec, res, d_w_s, d_w_q, grads);

    // Every populated group received a non-zero gradient.
    for (int g = 0; g < 3; ++g) {
        auto gs = static_cast<std::size_t>(g);
        float mag = 0.0f;
        for (float v : grads.support[gs].a_f.data()) mag += std::abs(v);
        for (float v : grads.query[gs].a_f.data()) mag += std::abs(v);
        CHECK(mag > 0.0f);
    }
}
