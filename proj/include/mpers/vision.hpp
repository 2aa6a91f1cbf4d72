#pragma once

// Vision feature extraction: a frozen convolutional stub backbone with taps
// at strides {4, 8, 16, 16}, the trainable Lite Detail Prior encoder, a
// single-dilation local-window attention over each deep stream followed by
// 1x1 fusion, and the three skip-feature taps for the decoder.

#include <cmath>
#include <string>
#include <vector>

#include "mpers/errors.hpp"
#include "mpers/init.hpp"
#include "mpers/tensor.hpp"

namespace mpers {

// ---------------------------------------------------------------------------
// dilated local-window attention core
//
// Q, K, V are C x N token matrices over an H x W grid (N = H*W, row-major).
// For each query pixel, keys/values are gathered at offsets spaced by the
// dilation rate within a window x window neighborhood; out-of-bounds samples
// are skipped, so softmax runs over the valid keys only.
inline Tensor dilated_window_mix(const Tensor& q, const Tensor& k, const Tensor& v, int height, int width,
                                 int dilation, int window) {
    if (q.rank() != 2 || q.shape() != k.shape() || q.shape() != v.shape())
        throw DimensionError("dilated_window_mix expects matching CxN inputs, got " + shape_str(q.shape()));
    const int C = q.shape()[0], N = q.shape()[1];
    if (N != height * width) throw DimensionError("dilated_window_mix: N != H*W");
    if (window < 1 || dilation < 1) throw ContractError("window and dilation must be >= 1");
    const int half = (window - 1) / 2;
    if (half * dilation >= std::max(height, width))
        throw DimensionError("dilated window span " + std::to_string(2 * half * dilation + 1) +
                             " exceeds feature extent " + std::to_string(height) + "x" + std::to_string(width));
    const float scale = 1.0f / std::sqrt(static_cast<float>(C));

    bool track = q.requires_grad() || k.requires_grad() || v.requires_grad();
    Tensor out = detail::result({C, N}, track);

    // per query: sampled key indices and softmax weights, kept for backward
    std::vector<std::vector<int>> samples(N);
    std::vector<std::vector<float>> weights(N);
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) {
            const int p = y * width + x;
            auto& idx = samples[p];
            for (int dy = -half; dy <= half; ++dy)
                for (int dx = -half; dx <= half; ++dx) {
                    const int sy = y + dy * dilation, sx = x + dx * dilation;
                    if (sy < 0 || sy >= height || sx < 0 || sx >= width) continue;
                    idx.push_back(sy * width + sx);
                }
            std::vector<float> logits(idx.size());
            float mx = -std::numeric_limits<float>::infinity();
            for (size_t j = 0; j < idx.size(); ++j) {
                double dot = 0.0;
                for (int c = 0; c < C; ++c)
                    dot += static_cast<double>(q.data()[c * N + p]) * k.data()[c * N + idx[j]];
                logits[j] = static_cast<float>(dot) * scale;
                mx = std::max(mx, logits[j]);
            }
            double denom = 0.0;
            for (float l : logits) denom += std::exp(static_cast<double>(l - mx));
            auto& w = weights[p];
            w.resize(idx.size());
            for (size_t j = 0; j < idx.size(); ++j)
                w[j] = static_cast<float>(std::exp(static_cast<double>(logits[j] - mx)) / denom);
            for (int c = 0; c < C; ++c) {
                double acc = 0.0;
                for (size_t j = 0; j < idx.size(); ++j) acc += static_cast<double>(w[j]) * v.data()[c * N + idx[j]];
                out.data()[c * N + p] = static_cast<float>(acc);
            }
        }

    if (out.requires_grad()) {
        detail::record([q, k, v, out, samples, weights, C, N, scale]() {
            for (int p = 0; p < N; ++p) {
                const auto& idx = samples[p];
                const auto& w = weights[p];
                // dv and d(attention weights)
                std::vector<float> da(idx.size(), 0.0f);
                for (size_t j = 0; j < idx.size(); ++j) {
                    double acc = 0.0;
                    for (int c = 0; c < C; ++c) {
                        const float g = out.grad()[c * N + p];
                        acc += static_cast<double>(v.data()[c * N + idx[j]]) * g;
                        if (v.requires_grad()) v.grad()[c * N + idx[j]] += w[j] * g;
                    }
                    da[j] = static_cast<float>(acc);
                }
                // softmax backward
                double dot = 0.0;
                for (size_t j = 0; j < idx.size(); ++j) dot += static_cast<double>(da[j]) * w[j];
                for (size_t j = 0; j < idx.size(); ++j) {
                    const float dz = w[j] * (da[j] - static_cast<float>(dot)) * scale;
                    if (dz == 0.0f) continue;
                    for (int c = 0; c < C; ++c) {
                        if (q.requires_grad()) q.grad()[c * N + p] += dz * k.data()[c * N + idx[j]];
                        if (k.requires_grad()) k.grad()[c * N + idx[j]] += dz * q.data()[c * N + p];
                    }
                }
            }
        });
    }
    return out;
}

struct DilatedAttentionParams {
    Tensor wq, wk, wv, wo;  // C x C projections
    int dilation = 2;
    int window = 3;

    static DilatedAttentionParams init(int channels, int dilation, int window, ParamRegistry& reg, Rng& rng,
                                       const std::string& prefix) {
        DilatedAttentionParams p;
        p.dilation = dilation;
        p.window = window;
        p.wq = reg.add(prefix + ".wq", init_weight({channels, channels}, rng));
        p.wk = reg.add(prefix + ".wk", init_weight({channels, channels}, rng));
        p.wv = reg.add(prefix + ".wv", init_weight({channels, channels}, rng));
        p.wo = reg.add(prefix + ".wo", init_weight({channels, channels}, rng));
        return p;
    }
};

inline Tensor dilated_window_attention(const Tensor& x, const DilatedAttentionParams& p) {
    if (x.rank() != 3) throw DimensionError("dilated_window_attention expects CxHxW, got " + shape_str(x.shape()));
    const int C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
    Tensor flat = reshape(x, {C, H * W});
    Tensor mixed = dilated_window_mix(matmul(p.wq, flat), matmul(p.wk, flat), matmul(p.wv, flat), H, W,
                                      p.dilation, p.window);
    return reshape(matmul(p.wo, mixed), {C, H, W});
}

// ---------------------------------------------------------------------------
// frozen stub backbone: random conv pyramid, taps at strides 4, 8, 16, 16

struct ConvStage {
    Tensor kernel, bias;
    int stride = 1;

    static ConvStage init(int in_c, int out_c, int stride, ParamRegistry& reg, Rng& rng,
                          const std::string& prefix, bool trainable = true) {
        ConvStage s;
        s.stride = stride;
        s.kernel = reg.add(prefix + ".kernel", init_weight({out_c, in_c, 3, 3}, rng), trainable);
        s.bias = reg.add(prefix + ".bias", Tensor::zeros({out_c}), trainable);
        return s;
    }

    Tensor apply(const Tensor& x) const { return relu(conv2d(x, kernel, bias, stride, 1)); }
};

struct BackboneWidths {
    int w1 = 16, w2 = 32, w3 = 64, w4 = 64;
};

class StubBackbone {
public:
    StubBackbone() = default;

    static StubBackbone init(uint64_t seed, BackboneWidths widths, ParamRegistry& reg) {
        Rng rng(seed);
        StubBackbone b;
        b.widths_ = widths;
        b.stem1_ = ConvStage::init(3, widths.w1, 2, reg, rng, "backbone.stem1", false);
        b.stem2_ = ConvStage::init(widths.w1, widths.w1, 2, reg, rng, "backbone.stem2", false);
        b.stage2_ = ConvStage::init(widths.w1, widths.w2, 2, reg, rng, "backbone.stage2", false);
        b.stage3_ = ConvStage::init(widths.w2, widths.w3, 2, reg, rng, "backbone.stage3", false);
        b.stage4_ = ConvStage::init(widths.w3, widths.w4, 1, reg, rng, "backbone.stage4", false);
        return b;
    }

    // taps at strides 4, 8, 16, 16
    std::vector<Tensor> encode(const Tensor& image) const {
        if (image.rank() != 3 || image.shape()[0] != 3)
            throw DimensionError("backbone expects 3xHxW image, got " + shape_str(image.shape()));
        if (image.shape()[1] % 16 != 0 || image.shape()[2] % 16 != 0)
            throw DimensionError("backbone input extents must be divisible by 16, got " + shape_str(image.shape()));
        Tensor t1 = stem2_.apply(stem1_.apply(image));
        Tensor t2 = stage2_.apply(t1);
        Tensor t3 = stage3_.apply(t2);
        Tensor t4 = stage4_.apply(t3);
        return {t1, t2, t3, t4};
    }

    const BackboneWidths& widths() const { return widths_; }

private:
    BackboneWidths widths_;
    ConvStage stem1_, stem2_, stage2_, stage3_, stage4_;
};

// ---------------------------------------------------------------------------
// Lite Detail Prior encoder: trainable conv stages at strides 4, 8, 16

struct NormConvStage {
    Tensor kernel, bias, gamma, beta;
    int stride = 2;

    static NormConvStage init(int in_c, int out_c, ParamRegistry& reg, Rng& rng, const std::string& prefix) {
        NormConvStage s;
        s.kernel = reg.add(prefix + ".kernel", init_weight({out_c, in_c, 3, 3}, rng));
        s.bias = reg.add(prefix + ".bias", Tensor::zeros({out_c}));
        s.gamma = reg.add(prefix + ".gamma", Tensor::full({out_c}, 1.0f));
        s.beta = reg.add(prefix + ".beta", Tensor::zeros({out_c}));
        return s;
    }

    Tensor apply(const Tensor& x) const {
        return relu(channel_norm(conv2d(x, kernel, bias, stride, 1), gamma, beta));
    }
};

struct LdpeWidths {
    int c1 = 16, c2 = 32, c3 = 64;
};

struct LdpeParams {
    ConvStage stem;  // stride 2, into c1
    NormConvStage stage1, stage2, stage3;
    LdpeWidths widths;

    static LdpeParams init(LdpeWidths widths, ParamRegistry& reg, Rng& rng) {
        LdpeParams p;
        p.widths = widths;
        p.stem = ConvStage::init(3, widths.c1, 2, reg, rng, "ldpe.stem");
        p.stage1 = NormConvStage::init(widths.c1, widths.c1, reg, rng, "ldpe.stage1");
        p.stage2 = NormConvStage::init(widths.c1, widths.c2, reg, rng, "ldpe.stage2");
        p.stage3 = NormConvStage::init(widths.c2, widths.c3, reg, rng, "ldpe.stage3");
        return p;
    }
};

// three detail maps at strides 4, 8, 16
inline std::vector<Tensor> ldpe_encode(const Tensor& image, const LdpeParams& p) {
    if (image.rank() != 3) throw DimensionError("ldpe_encode expects 3xHxW, got " + shape_str(image.shape()));
    if (image.shape()[1] % 16 != 0 || image.shape()[2] % 16 != 0)
        throw DimensionError("ldpe_encode input extents must be divisible by 16, got " + shape_str(image.shape()));
    Tensor l1 = p.stage1.apply(p.stem.apply(image));
    Tensor l2 = p.stage2.apply(l1);
    Tensor l3 = p.stage3.apply(l2);
    return {l1, l2, l3};
}

// ---------------------------------------------------------------------------
// deep fusion and skip collection

struct Conv1x1 {
    Tensor kernel, bias;

    static Conv1x1 init(int in_c, int out_c, ParamRegistry& reg, Rng& rng, const std::string& prefix) {
        Conv1x1 c;
        c.kernel = reg.add(prefix + ".kernel", init_weight({out_c, in_c, 1, 1}, rng));
        c.bias = reg.add(prefix + ".bias", Tensor::zeros({out_c}));
        return c;
    }

    Tensor apply(const Tensor& x) const { return conv2d(x, kernel, bias, 1, 0); }
};

struct FusionParams {
    Conv1x1 align_backbone, align_detail;
    DilatedAttentionParams attn_backbone, attn_detail;
    Conv1x1 fuse;
    int channels = 0;

    static FusionParams init(int backbone_c, int detail_c, int channels, int dilation, int window,
                             ParamRegistry& reg, Rng& rng) {
        FusionParams p;
        p.channels = channels;
        p.align_backbone = Conv1x1::init(backbone_c, channels, reg, rng, "fusion.align_backbone");
        p.align_detail = Conv1x1::init(detail_c, channels, reg, rng, "fusion.align_detail");
        p.attn_backbone = DilatedAttentionParams::init(channels, dilation, window, reg, rng, "fusion.attn_backbone");
        p.attn_detail = DilatedAttentionParams::init(channels, dilation, window, reg, rng, "fusion.attn_detail");
        p.fuse = Conv1x1::init(2 * channels, channels, reg, rng, "fusion.fuse");
        return p;
    }
};

// both deep streams through one dilated local-window attention each, then
// concat + 1x1 reduction
inline Tensor dilate_fuse(const Tensor& backbone_deep, const Tensor& detail_deep, const FusionParams& p) {
    if (backbone_deep.shape()[1] != detail_deep.shape()[1] || backbone_deep.shape()[2] != detail_deep.shape()[2])
        throw DimensionError("dilate_fuse spatial mismatch " + shape_str(backbone_deep.shape()) + " vs " +
                             shape_str(detail_deep.shape()));
    Tensor a = dilated_window_attention(p.align_backbone.apply(backbone_deep), p.attn_backbone);
    Tensor b = dilated_window_attention(p.align_detail.apply(detail_deep), p.attn_detail);
    return p.fuse.apply(concat({a, b}, 0));
}

struct SkipParams {
    std::vector<Conv1x1> reduce;  // one per level
    int channels = 0;

    static SkipParams init(const std::vector<int>& in_widths, int channels, ParamRegistry& reg, Rng& rng) {
        SkipParams p;
        p.channels = channels;
        for (size_t i = 0; i < in_widths.size(); ++i)
            p.reduce.push_back(Conv1x1::init(in_widths[i], channels, reg, rng, "skips.reduce" + std::to_string(i + 1)));
        return p;
    }
};

// per level: concat(backbone tap, detail level) reduced by 1x1; detail may be
// absent (ablation without the LDPE stream)
inline std::vector<Tensor> collect_skips(const std::vector<Tensor>& backbone_taps,
                                         const std::vector<Tensor>& detail_levels, const SkipParams& p) {
    std::vector<Tensor> skips;
    for (size_t i = 0; i < 3; ++i) {
        Tensor in;
        if (!detail_levels.empty()) {
            if (backbone_taps[i].shape()[1] != detail_levels[i].shape()[1] ||
                backbone_taps[i].shape()[2] != detail_levels[i].shape()[2])
                throw DimensionError("collect_skips level " + std::to_string(i + 1) + " spatial mismatch");
            in = concat({backbone_taps[i], detail_levels[i]}, 0);
        } else {
            in = backbone_taps[i];
        }
        skips.push_back(p.reduce[i].apply(in));
    }
    return skips;
}

}  // namespace mpers
