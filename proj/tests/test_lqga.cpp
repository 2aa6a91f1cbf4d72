#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "mpers/lqga.hpp"

using namespace mpers;

namespace {

Tensor random_tensor(Shape shape, uint64_t seed, float scale = 1.0f) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> dist(-scale, scale);
    Tensor t = Tensor::zeros(std::move(shape));
    for (float& v : t.data()) v = dist(rng);
    return t;
}

LqgaBlockParams make_block(int text_c, int vision_c, int embed_c, uint64_t seed = 3) {
    ParamRegistry reg;
    Rng rng(seed);
    return LqgaBlockParams::init(text_c, vision_c, embed_c, reg, rng, "b");
}

}  // namespace

TEST_CASE("projection shape contract and row-major flatten order") {
    LqgaBlockParams p = make_block(12, 8, 6);
    Tensor visual = random_tensor({8, 4, 4}, 1);
    Tensor text = random_tensor({16, 12}, 2);
    LqgaProjection proj = project(visual, text, p);
    CHECK(proj.q.shape() == Shape{16, 6});
    CHECK(proj.k.shape() == Shape{16, 6});
    CHECK(proj.v.shape() == Shape{16, 8});

    // flatten puts position (y,x) at row y*W+x: check via an identity-ish key map
    std::fill(p.vision_key.data().begin(), p.vision_key.data().end(), 0.0f);
    for (int i = 0; i < 6; ++i) p.vision_key.data()[i * 6 + i] = 1.0f;  // first 6 channels pass through
    LqgaProjection proj2 = project(visual, text, p);
    const int y = 2, x = 3, n = y * 4 + x;
    for (int c = 0; c < 6; ++c)
        CHECK(proj2.k.data()[n * 6 + c] == doctest::Approx(visual.data()[(c * 4 + y) * 4 + x]));

    CHECK_THROWS_AS(project(random_tensor({7, 4, 4}, 3), text, p), DimensionError);
    CHECK_THROWS_AS(project(visual, random_tensor({16, 11}, 4), p), DimensionError);

    // zero projections give zero outputs
    std::fill(p.text_query.data().begin(), p.text_query.data().end(), 0.0f);
    LqgaProjection proj3 = project(visual, text, p);
    for (float v : proj3.q.data()) CHECK(v == 0.0f);
}

TEST_CASE("guided weights: single visual token reduces to sigmoid(value)") {
    Tensor q = random_tensor({3, 4}, 11);
    Tensor k = random_tensor({1, 4}, 12);
    Tensor v = random_tensor({1, 5}, 13);
    Tensor w = guided_weights(q, k, v);
    REQUIRE(w.shape() == Shape{5});
    for (int c = 0; c < 5; ++c)
        CHECK(w.data()[c] == doctest::Approx(1.0f / (1.0f + std::exp(-v.data()[c]))).epsilon(1e-6));
}

TEST_CASE("guided weights: zero values give 0.5 per channel; range is (0,1)") {
    Tensor q = random_tensor({3, 4}, 21);
    Tensor k = random_tensor({6, 4}, 22);
    Tensor w0 = guided_weights(q, k, Tensor::zeros({6, 5}));
    for (float v : w0.data()) CHECK(v == doctest::Approx(0.5));

    Tensor w = guided_weights(q, k, random_tensor({6, 5}, 23, 3.0f));
    for (float v : w.data()) {
        CHECK(v > 0.0f);
        CHECK(v < 1.0f);
    }
}

TEST_CASE("guided weights match a dense double-precision oracle") {
    const int L = 3, N = 4, C = 2, D = 5;
    Tensor q = random_tensor({L, D}, 31);
    Tensor k = random_tensor({N, D}, 32);
    Tensor v = random_tensor({N, C}, 33);
    Tensor w = guided_weights(q, k, v);

    const double scale = 1.0 / std::sqrt(static_cast<double>(D));
    std::vector<double> mean_rows(C, 0.0);
    for (int i = 0; i < L; ++i) {
        std::vector<double> logits(N, 0.0);
        double mx = -1e300;
        for (int j = 0; j < N; ++j) {
            for (int d = 0; d < D; ++d) logits[j] += static_cast<double>(q.data()[i * D + d]) * k.data()[j * D + d];
            logits[j] *= scale;
            mx = std::max(mx, logits[j]);
        }
        double denom = 0.0;
        for (int j = 0; j < N; ++j) denom += std::exp(logits[j] - mx);
        for (int j = 0; j < N; ++j) {
            const double a = std::exp(logits[j] - mx) / denom;
            for (int c = 0; c < C; ++c) mean_rows[c] += a * v.data()[j * C + c] / L;
        }
    }
    for (int c = 0; c < C; ++c) CHECK(std::abs(w.data()[c] - 1.0 / (1.0 + std::exp(-mean_rows[c]))) < 1e-5);
}

TEST_CASE("guidance: zero weights are the identity, unit weights double the input") {
    Tensor f = random_tensor({4, 3, 3}, 41);
    Tensor id = apply_guidance(Tensor::zeros({4}), f);
    for (int i = 0; i < f.numel(); ++i) CHECK(id.data()[i] == f.data()[i]);  // exact

    Tensor dbl = apply_guidance(Tensor::full({4}, 1.0f), f);
    for (int i = 0; i < f.numel(); ++i) CHECK(dbl.data()[i] == doctest::Approx(2.0f * f.data()[i]));

    Tensor w = random_tensor({4}, 42);
    Tensor g = apply_guidance(w, f);
    for (int c = 0; c < 4; ++c)
        for (int i = 0; i < 9; ++i)
            CHECK(g.data()[c * 9 + i] == w.data()[c] * f.data()[c * 9 + i] + f.data()[c * 9 + i]);  // exact
}

TEST_CASE("fusion: zero kernel yields the bias constant; per-pixel dot-product oracle") {
    LqgaBlockParams p = make_block(12, 4, 6);
    Tensor guided = random_tensor({4, 3, 3}, 51);
    Tensor stream = random_tensor({4, 3, 3}, 52);

    std::fill(p.fuse.kernel.data().begin(), p.fuse.kernel.data().end(), 0.0f);
    for (int o = 0; o < 4; ++o) p.fuse.bias.data()[o] = 0.25f * o;
    Tensor z0 = fuse_output(guided, stream, p.fuse);
    CHECK(z0.shape() == Shape{4, 3, 3});
    for (int o = 0; o < 4; ++o)
        for (int i = 0; i < 9; ++i) CHECK(z0.data()[o * 9 + i] == doctest::Approx(0.25f * o));

    LqgaBlockParams p2 = make_block(12, 4, 6, 7);
    Tensor z = fuse_output(guided, stream, p2.fuse);
    for (int o = 0; o < 4; ++o)
        for (int i = 0; i < 9; ++i) {
            double want = p2.fuse.bias.data()[o];
            for (int c = 0; c < 4; ++c) {
                want += static_cast<double>(p2.fuse.kernel.data()[(o * 8 + c)]) * guided.data()[c * 9 + i];
                want += static_cast<double>(p2.fuse.kernel.data()[(o * 8 + 4 + c)]) * stream.data()[c * 9 + i];
            }
            CHECK(z.data()[o * 9 + i] == doctest::Approx(want).epsilon(1e-5));
        }

    CHECK_THROWS_AS(fuse_output(guided, random_tensor({4, 2, 2}, 53), p.fuse), DimensionError);
}

TEST_CASE("stack: B=1 equals one block; B=2 equals the hand-unrolled composition") {
    ParamRegistry reg;
    Rng rng(9);
    LqgaParams params = LqgaParams::init(12, 4, 6, 2, reg, rng);
    Tensor deep = random_tensor({4, 3, 3}, 61);
    Tensor text = random_tensor({5, 12}, 62);

    LqgaParams one;
    one.embed_c = params.embed_c;
    one.blocks.push_back(params.blocks[0]);
    Tensor z1 = lqga_stack(deep, text, one);
    Tensor direct = lqga_block(deep, deep, text, params.blocks[0]);
    CHECK(z1.data() == direct.data());

    std::vector<Tensor> w_per_block;
    Tensor z2 = lqga_stack(deep, text, params, &w_per_block);
    Tensor manual = lqga_block(direct, direct, text, params.blocks[1]);
    CHECK(z2.shape() == deep.shape());
    for (int i = 0; i < z2.numel(); ++i) CHECK(z2.data()[i] == doctest::Approx(manual.data()[i]));
    REQUIRE(w_per_block.size() == 2);
    for (const Tensor& w : w_per_block)
        for (float v : w.data()) {
            CHECK(v > 0.0f);
            CHECK(v < 1.0f);
        }
}

TEST_CASE("w_text is invariant to a joint permutation of keys and values") {
    Tensor q = random_tensor({3, 4}, 71);
    Tensor k = random_tensor({5, 4}, 72);
    Tensor v = random_tensor({5, 2}, 73);
    Tensor w = guided_weights(q, k, v);

    const int perm[5] = {3, 0, 4, 1, 2};
    Tensor kp = Tensor::zeros({5, 4});
    Tensor vp = Tensor::zeros({5, 2});
    for (int j = 0; j < 5; ++j) {
        for (int d = 0; d < 4; ++d) kp.data()[j * 4 + d] = k.data()[perm[j] * 4 + d];
        for (int c = 0; c < 2; ++c) vp.data()[j * 2 + c] = v.data()[perm[j] * 2 + c];
    }
    Tensor wp = guided_weights(q, kp, vp);
    for (int c = 0; c < 2; ++c) CHECK(w.data()[c] == doctest::Approx(wp.data()[c]).epsilon(1e-6));
}

TEST_CASE("end-to-end gradients through a block match finite differences") {
    for (uint64_t seed = 0; seed < 10; ++seed) {
        LqgaBlockParams p = make_block(6, 4, 5, 100 + seed);
        Tensor text = random_tensor({3, 6}, 200 + seed);
        Tensor target = random_tensor({4, 3, 3}, 300 + seed);
        auto loss = [&](const Tensor& vis) {
            Tensor z = lqga_block(vis, vis, text, p);
            Tensor diff = add(z, mul_scalar(target, -1.0f));
            return add(mean_all(mul(diff, diff)), sum_all(vis));
        };
        CHECK(grad_check(loss, random_tensor({4, 3, 3}, 400 + seed), 1e-2f) < 1e-2f);
    }
}
