#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "mpers/tensor.hpp"
#include "mpers/tensor_io.hpp"

using namespace mpers;

namespace {

using Rng = std::mt19937_64;

Tensor random_tensor(Shape shape, uint64_t seed, float scale = 1.0f) {
    Rng rng = Rng(seed);
    std::uniform_real_distribution<float> dist(-scale, scale);
    Tensor t = Tensor::zeros(std::move(shape));
    for (float& v : t.data()) v = dist(rng);
    return t;
}

// strictly positive entries: keeps finite-difference checks well conditioned
// (no sign cancellation driving analytic gradients toward zero)
Tensor random_positive(Shape shape, uint64_t seed, float lo = 0.1f, float hi = 0.6f) {
    Rng rng = Rng(seed);
    std::uniform_real_distribution<float> dist(lo, hi);
    Tensor t = Tensor::zeros(std::move(shape));
    for (float& v : t.data()) v = dist(rng);
    return t;
}

// independent triple-loop oracle
std::vector<float> matmul_oracle(const Tensor& a, const Tensor& b) {
    const int m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    std::vector<float> c(static_cast<size_t>(m) * n, 0.0f);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int l = 0; l < k; ++l) acc += static_cast<double>(a.data()[i * k + l]) * b.data()[l * n + j];
            c[i * n + j] = static_cast<float>(acc);
        }
    return c;
}

// per-output-pixel direct summation oracle
std::vector<float> conv2d_oracle(const Tensor& x, const Tensor& k, const std::vector<float>& bias, int stride,
                                 int padding, int dilation, int& Ho, int& Wo) {
    const int C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
    const int O = k.shape()[0], kh = k.shape()[2], kw = k.shape()[3];
    Ho = (H + 2 * padding - dilation * (kh - 1) - 1) / stride + 1;
    Wo = (W + 2 * padding - dilation * (kw - 1) - 1) / stride + 1;
    std::vector<float> out(static_cast<size_t>(O) * Ho * Wo, 0.0f);
    for (int o = 0; o < O; ++o)
        for (int oy = 0; oy < Ho; ++oy)
            for (int ox = 0; ox < Wo; ++ox) {
                double acc = bias.empty() ? 0.0 : bias[o];
                for (int c = 0; c < C; ++c)
                    for (int ky = 0; ky < kh; ++ky)
                        for (int kx = 0; kx < kw; ++kx) {
                            const int iy = oy * stride - padding + ky * dilation;
                            const int ix = ox * stride - padding + kx * dilation;
                            if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                            acc += static_cast<double>(x.data()[(c * H + iy) * W + ix]) *
                                   k.data()[((o * C + c) * kh + ky) * kw + kx];
                        }
                out[(o * Ho + oy) * Wo + ox] = static_cast<float>(acc);
            }
    return out;
}

}  // namespace

TEST_CASE("matmul identity and zeros") {
    Tensor eye = Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    Tensor b = random_tensor({3, 4}, 7);
    Tensor c = matmul(eye, b);
    for (int i = 0; i < b.numel(); ++i) CHECK(c.data()[i] == doctest::Approx(b.data()[i]).epsilon(1e-6));

    Tensor z = matmul(Tensor::zeros({2, 3}), random_tensor({3, 4}, 9));
    CHECK(z.shape() == Shape{2, 4});
    for (float v : z.data()) CHECK(v == 0.0f);
}

TEST_CASE("matmul matches triple-loop oracle") {
    Tensor a = random_tensor({3, 3}, 11);
    Tensor b = random_tensor({3, 3}, 13);
    Tensor c = matmul(a, b);
    auto want = matmul_oracle(a, b);
    for (int i = 0; i < 9; ++i) CHECK(std::abs(c.data()[i] - want[i]) < 1e-6f);
}

TEST_CASE("matmul shape mismatch names both shapes") {
    try {
        matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 2}));
        FAIL("expected DimensionError");
    } catch (const DimensionError& e) {
        CHECK(std::string(e.what()).find("[2x3]") != std::string::npos);
        CHECK(std::string(e.what()).find("[4x2]") != std::string::npos);
    }
}

TEST_CASE("conv2d 1x1 identity kernel is the identity map") {
    Tensor x = random_tensor({1, 5, 5}, 21);
    Tensor k = Tensor::from({1, 1, 1, 1}, {1.0f});
    Tensor y = conv2d(x, k);
    CHECK(y.shape() == x.shape());
    for (int i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == x.data()[i]);  // exact
}

TEST_CASE("conv2d zero kernel gives zero output") {
    Tensor y = conv2d(random_tensor({2, 6, 6}, 3), Tensor::zeros({3, 2, 3, 3}), Tensor(), 1, 1);
    for (float v : y.data()) CHECK(v == 0.0f);
}

TEST_CASE("conv2d dilation 2 matches direct-summation oracle") {
    Tensor x = random_tensor({2, 8, 8}, 31);
    Tensor k = random_tensor({3, 2, 3, 3}, 37);
    Tensor y = conv2d(x, k, Tensor(), 1, 1, 2);
    int Ho = 0, Wo = 0;
    auto want = conv2d_oracle(x, k, {}, 1, 1, 2, Ho, Wo);
    CHECK(y.shape() == Shape{3, Ho, Wo});
    for (int i = 0; i < y.numel(); ++i) CHECK(y.data()[i] == doctest::Approx(want[i]).epsilon(1e-6));
}

TEST_CASE("conv2d footprint larger than padded input fails") {
    CHECK_THROWS_AS(conv2d(Tensor::zeros({1, 4, 4}), Tensor::zeros({1, 1, 3, 3}), Tensor(), 1, 0, 3),
                    DimensionError);
}

TEST_CASE("pointwise basics") {
    CHECK(sigmoid(Tensor::scalar(0.0f)).item() == doctest::Approx(0.5));
    CHECK(relu(Tensor::scalar(-2.0f)).item() == 0.0f);

    Tensor c = Tensor::full({4, 3}, 2.5f);
    Tensor m = mean_axis(c, 0);
    for (float v : m.data()) CHECK(v == doctest::Approx(2.5f));

    Tensor up = upsample_nearest(Tensor::from({1, 2, 2}, {1, 2, 3, 4}), 2);
    CHECK(up.shape() == Shape{1, 4, 4});
    CHECK(up.data()[0] == 1.0f);
    CHECK(up.data()[1] == 1.0f);
    CHECK(up.data()[5] == 1.0f);
    CHECK(up.data()[2] == 2.0f);
    CHECK(up.data()[8] == 3.0f);
    CHECK(up.data()[15] == 4.0f);
}

TEST_CASE("bilinear upsample: constants preserved, hand-computed interior, gradients") {
    // a constant map stays constant under interpolation
    Tensor flat = upsample_bilinear(Tensor::full({2, 3, 3}, 1.75f), 4);
    CHECK(flat.shape() == Shape{2, 12, 12});
    for (float v : flat.data()) CHECK(v == doctest::Approx(1.75f));

    // 1x1x2 input [a, b], factor 2: output x positions map to source
    // coordinates -0.25, 0.25, 0.75, 1.25 (clamped), so the interior pair
    // interpolates at fractions 0.25 and 0.75 while the borders clamp
    Tensor up = upsample_bilinear(Tensor::from({1, 1, 2}, {1.0f, 3.0f}), 2);
    REQUIRE(up.shape() == Shape{1, 2, 4});
    CHECK(up.data()[0] == doctest::Approx(1.0f));
    CHECK(up.data()[1] == doctest::Approx(1.5f));
    CHECK(up.data()[2] == doctest::Approx(2.5f));
    CHECK(up.data()[3] == doctest::Approx(3.0f));

    // each output row is a convex combination of inputs: weights sum to 1, so
    // the all-ones gradient pushed back distributes factor^2 mass in total
    Tensor src = random_tensor({1, 3, 3}, 91);
    src.set_requires_grad(true);
    {
        Tape tape;
        Tape::Scope scope(tape);
        tape.backward(sum_all(upsample_bilinear(src, 4)));
    }
    float total = 0.0f;
    for (float g : src.grad()) total += g;
    CHECK(total == doctest::Approx(16.0f * 9.0f).epsilon(1e-4));
    src.set_requires_grad(false);

    CHECK_THROWS_AS(upsample_bilinear(Tensor::zeros({2, 2}), 2), DimensionError);
    CHECK_THROWS_AS(upsample_bilinear(Tensor::zeros({1, 2, 2}), 0), ContractError);
}

TEST_CASE("concat rejects mismatched off-axis extents") {
    CHECK_THROWS_AS(concat({Tensor::zeros({2, 3}), Tensor::zeros({2, 4})}, 0), DimensionError);
    Tensor c = concat({Tensor::full({2, 3}, 1.0f), Tensor::full({1, 3}, 2.0f)}, 0);
    CHECK(c.shape() == Shape{3, 3});
    CHECK(c.data()[0] == 1.0f);
    CHECK(c.data()[8] == 2.0f);
}

TEST_CASE("softmax examples and row-sum invariant") {
    Tensor u = softmax(Tensor::full({1, 4}, 3.0f), 1);
    for (float v : u.data()) CHECK(v == doctest::Approx(0.25).epsilon(1e-6));

    CHECK(softmax(Tensor::scalar(42.0f), 0).item() == doctest::Approx(1.0));

    Tensor r = softmax(Tensor::from({1, 3}, {1, 2, 3}), 1);
    double denom = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
    CHECK(std::abs(r.data()[0] - std::exp(1.0) / denom) < 1e-6);
    CHECK(std::abs(r.data()[1] - std::exp(2.0) / denom) < 1e-6);
    CHECK(std::abs(r.data()[2] - std::exp(3.0) / denom) < 1e-6);

    for (uint64_t seed = 0; seed < 10; ++seed) {
        Tensor x = random_tensor({4, 5, 3}, 100 + seed, 5.0f);
        for (int axis = 0; axis < 3; ++axis) {
            Tensor s = softmax(x, axis);
            for (float v : s.data()) CHECK(v >= 0.0f);
            auto sp = detail::split(x.shape(), axis);
            for (int o = 0; o < sp.outer; ++o)
                for (int in = 0; in < sp.inner; ++in) {
                    double sum = 0.0;
                    for (int a = 0; a < sp.extent; ++a) sum += s.data()[(o * sp.extent + a) * sp.inner + in];
                    CHECK(std::abs(sum - 1.0) < 1e-6);
                }
        }
    }
}

TEST_CASE("cross_entropy examples") {
    // +100 margin on the correct class
    Tensor dominant = Tensor::zeros({2, 2, 2});
    for (int p = 0; p < 4; ++p) dominant.data()[p] = 100.0f;
    CHECK(cross_entropy(dominant, {0, 0, 0, 0}).item() == doctest::Approx(0.0).epsilon(1e-6));

    Tensor uniform = Tensor::zeros({5, 3, 3});
    CHECK(cross_entropy(uniform, std::vector<int>(9, 2)).item() == doctest::Approx(std::log(5.0)).epsilon(1e-6));
}

TEST_CASE("cross_entropy matches per-pixel summation oracle") {
    Tensor logits = random_tensor({3, 4, 4}, 55, 2.0f);
    Rng rng(77);
    std::vector<int> targets(16);
    for (int& t : targets) t = static_cast<int>(rng() % 3);
    targets[5] = kIgnoreLabel;

    double want = 0.0;
    int n = 0;
    for (int p = 0; p < 16; ++p) {
        if (targets[p] == kIgnoreLabel) continue;
        double denom = 0.0;
        for (int k = 0; k < 3; ++k) denom += std::exp(static_cast<double>(logits.data()[k * 16 + p]));
        want -= std::log(std::exp(static_cast<double>(logits.data()[targets[p] * 16 + p])) / denom);
        ++n;
    }
    want /= n;
    CHECK(std::abs(cross_entropy(logits, targets).item() - want) < 1e-5);
}

TEST_CASE("cross_entropy rejects out-of-range labels with coordinate") {
    Tensor logits = Tensor::zeros({2, 2, 2});
    try {
        cross_entropy(logits, {0, 1, 7, 0});
        FAIL("expected LabelError");
    } catch (const LabelError& e) {
        CHECK(std::string(e.what()).find("(1,0)") != std::string::npos);
    }
}

TEST_CASE("cross_entropy gradient is (softmax - onehot) / n_valid") {
    Tensor logits = random_tensor({3, 2, 2}, 91, 1.5f);
    logits.set_requires_grad(true);
    std::vector<int> targets = {0, 2, 1, kIgnoreLabel};
    Tape tape;
    {
        Tape::Scope scope(tape);
        tape.backward(cross_entropy(logits, targets));
    }
    for (int p = 0; p < 4; ++p) {
        double denom = 0.0;
        for (int k = 0; k < 3; ++k) denom += std::exp(static_cast<double>(logits.data()[k * 4 + p]));
        for (int k = 0; k < 3; ++k) {
            double want = 0.0;
            if (targets[p] != kIgnoreLabel) {
                const double soft = std::exp(static_cast<double>(logits.data()[k * 4 + p])) / denom;
                want = (soft - (targets[p] == k ? 1.0 : 0.0)) / 3.0;
            }
            CHECK(std::abs(logits.grad()[k * 4 + p] - want) < 1e-5);
        }
    }
}

TEST_CASE("backward fills leaf grads and accumulates until zeroed") {
    Tensor x = random_tensor({2, 3}, 5);
    x.set_requires_grad(true);
    {
        Tape tape;
        Tape::Scope scope(tape);
        tape.backward(sum_all(x));
    }
    for (float g : x.grad()) CHECK(g == 1.0f);

    {
        Tape tape;
        Tape::Scope scope(tape);
        tape.backward(sum_all(mul(x, x)));
    }
    // grads accumulate: 1 + 2x
    for (int i = 0; i < x.numel(); ++i) CHECK(x.grad()[i] == doctest::Approx(1.0f + 2.0f * x.data()[i]));

    x.zero_grad();
    for (float g : x.grad()) CHECK(g == 0.0f);
}

TEST_CASE("backward rejects non-scalar loss") {
    Tensor x = Tensor::zeros({2, 2});
    x.set_requires_grad(true);
    Tape tape;
    Tape::Scope scope(tape);
    Tensor y = mul_scalar(x, 2.0f);
    CHECK_THROWS_AS(tape.backward(y), ContractError);
}

TEST_CASE("grad_check: linear map sits at the float noise floor") {
    Tensor x = random_tensor({3, 3}, 17);
    CHECK(grad_check([](const Tensor& t) { return mul_scalar(sum_all(t), 3.0f); }, x) < 5e-4f);
}

TEST_CASE("grad_check: sigmoid of matmul chain") {
    Tensor w = random_positive({4, 4}, 19);
    Tensor x = random_tensor({4, 4}, 23);
    CHECK(grad_check([&](const Tensor& t) { return sum_all(sigmoid(matmul(t, w))); }, x, 1e-2f) < 1e-3f);
}

TEST_CASE("finite differences across the differentiable operation suite") {
    for (uint64_t seed = 0; seed < 10; ++seed) {
        Tensor x = random_positive({2, 4, 4}, 200 + seed);
        Tensor k = random_positive({3, 2, 3, 3}, 300 + seed);
        // the trailing sum_all(t) term offsets every gradient by 1 so the
        // relative-error denominator stays away from zero
        CHECK(grad_check([&](const Tensor& t) { return add(sum_all(sigmoid(conv2d(t, k, Tensor(), 1, 1, 2))),
                                                           sum_all(t)); },
                         x, 1e-2f) < 1e-3f);
        CHECK(grad_check([&](const Tensor& t) { return add(sum_all(sigmoid(conv2d(x, t, Tensor(), 2, 1, 1))),
                                                           sum_all(t)); },
                         k, 1e-2f) < 1e-3f);

        Tensor m = random_tensor({3, 5}, 400 + seed);
        CHECK(grad_check([](const Tensor& t) { return add(sum_all(mul(softmax(t, 1), t)), sum_all(t)); }, m, 1e-2f) <
              1e-3f);
        CHECK(grad_check([](const Tensor& t) { return sum_all(relu(t)); }, Tensor::full({3, 3}, 0.7f)) < 1e-3f);
        CHECK(grad_check([](const Tensor& t) { return add(sum_all(mul(upsample_nearest(t, 2), upsample_nearest(t, 2))),
                                                          sum_all(t)); },
                         random_positive({2, 3, 3}, 500 + seed), 1e-2f) < 1e-3f);
        CHECK(grad_check([&](const Tensor& t) { return mean_all(sigmoid(concat({t, m}, 0))); },
                         random_tensor({3, 5}, 600 + seed), 1e-2f) < 1e-3f);
        CHECK(grad_check([](const Tensor& t) { return sum_all(mul(mean_axis(t, 1), mean_axis(t, 1))); },
                         random_tensor({3, 4}, 700 + seed)) < 1e-3f);

        // weight the normalized output elementwise so mean subtraction
        // cannot cancel the upstream gradient to ~0
        Tensor g = random_tensor({4}, 800 + seed);
        Tensor b = random_tensor({4}, 900 + seed);
        // the added identity term offsets every gradient by 1, keeping the
        // relative-error denominator away from zero
        Tensor lw = random_tensor({3, 4}, 850 + seed);
        CHECK(grad_check([&](const Tensor& t) { return sum_all(add(mul(layer_norm(t, g, b), lw), t)); },
                         random_tensor({3, 4}, 1000 + seed, 2.0f), 1e-2f) < 1e-3f);
        Tensor cg = random_tensor({2}, 1100 + seed);
        Tensor cb = random_tensor({2}, 1200 + seed);
        Tensor cw = random_positive({2, 3, 3}, 1250 + seed, 0.5f, 1.5f);
        CHECK(grad_check([&](const Tensor& t) { return sum_all(add(mul(channel_norm(t, cg, cb), cw), t)); },
                         random_tensor({2, 3, 3}, 1300 + seed, 2.0f), 1e-2f) < 1e-3f);

        Tensor w = random_tensor({3}, 1400 + seed);
        CHECK(grad_check([&](const Tensor& t) { return add(sum_all(mul(channel_scale(t, w), t)), sum_all(t)); },
                         random_tensor({3, 2, 2}, 1500 + seed), 1e-2f) < 1e-3f);
        CHECK(grad_check([&](const Tensor& t) { return sum_all(channel_scale(x, reshape(sigmoid(t), {2}))); },
                         random_tensor({2}, 1600 + seed)) < 1e-3f);
        CHECK(grad_check([](const Tensor& t) { return scale_by(sum_all(t), select_index(reshape(t, {t.numel()}), 0)); },
                         random_tensor({2, 2}, 1700 + seed)) < 1e-3f);
    }
}

TEST_CASE("forward passes are bitwise deterministic") {
    Tensor x = random_tensor({2, 8, 8}, 9001);
    Tensor k = random_tensor({4, 2, 3, 3}, 9002);
    Tensor a = conv2d(x, k, Tensor(), 1, 1, 2);
    Tensor b = conv2d(x, k, Tensor(), 1, 1, 2);
    CHECK(a.data() == b.data());
    Tensor s1 = softmax(reshape(a, {4, 36}), 1);
    Tensor s2 = softmax(reshape(b, {4, 36}), 1);
    CHECK(s1.data() == s2.data());
}

TEST_CASE("MPT1 round trip and header layout") {
    Tensor t = random_tensor({2, 3, 4}, 404);
    auto bytes = write_tensor(t);
    CHECK(bytes[0] == 'M');
    CHECK(bytes[4] == 3);                      // rank
    CHECK(detail::get_u32(&bytes[5]) == 2u);   // extents little-endian
    CHECK(detail::get_u32(&bytes[9]) == 3u);
    CHECK(detail::get_u32(&bytes[13]) == 4u);
    Tensor back = read_tensor(bytes);
    CHECK(back.shape() == t.shape());
    CHECK(back.data() == t.data());

    bytes[1] = 'X';
    CHECK_THROWS_AS(read_tensor(bytes), FormatError);
}
