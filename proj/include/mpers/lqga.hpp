#pragma once

// Linguistic Query Guided Attention: text tokens query the flattened visual
// tokens, the attended values are pooled and squashed into per-channel
// guidance weights, applied as a gated residual, then fused with the
// incoming visual stream by a 1x1 convolution. Blocks chain: each block
// after the first consumes the previous block's output on both inputs.

#include <cmath>
#include <string>
#include <vector>

#include "mpers/errors.hpp"
#include "mpers/init.hpp"
#include "mpers/tensor.hpp"
#include "mpers/vision.hpp"

namespace mpers {

struct LqgaBlockParams {
    Tensor text_query;  // d_t x d_e
    Tensor vision_key;  // C x d_e
    Tensor vision_value;  // C x C, value width matches the guidance length
    Conv1x1 fuse;       // 2C -> C

    static LqgaBlockParams init(int text_c, int vision_c, int embed_c, ParamRegistry& reg, Rng& rng,
                                const std::string& prefix) {
        LqgaBlockParams p;
        p.text_query = reg.add(prefix + ".text_query", init_weight({text_c, embed_c}, rng));
        p.vision_key = reg.add(prefix + ".vision_key", init_weight({vision_c, embed_c}, rng));
        p.vision_value = reg.add(prefix + ".vision_value", init_weight({vision_c, vision_c}, rng));
        p.fuse = Conv1x1::init(2 * vision_c, vision_c, reg, rng, prefix + ".fuse");
        return p;
    }
};

struct LqgaParams {
    std::vector<LqgaBlockParams> blocks;
    int embed_c = 64;

    static LqgaParams init(int text_c, int vision_c, int embed_c, int num_blocks, ParamRegistry& reg, Rng& rng) {
        if (num_blocks < 1) throw ContractError("lqga needs at least one block");
        LqgaParams p;
        p.embed_c = embed_c;
        for (int b = 0; b < num_blocks; ++b)
            p.blocks.push_back(LqgaBlockParams::init(text_c, vision_c, embed_c, reg, rng,
                                                     "lqga.block" + std::to_string(b)));
        return p;
    }
};

struct LqgaProjection {
    Tensor q;  // L x d_e
    Tensor k;  // N x d_e
    Tensor v;  // N x C
};

// flatten the visual map to N tokens (position (y,x) -> y*W + x) and project
inline LqgaProjection project(const Tensor& visual, const Tensor& text, const LqgaBlockParams& p) {
    if (visual.rank() != 3 || text.rank() != 2)
        throw DimensionError("project expects CxHxW visual and Lxd text, got " + shape_str(visual.shape()) +
                             " and " + shape_str(text.shape()));
    if (text.shape()[1] != p.text_query.shape()[0])
        throw DimensionError("project text width " + shape_str(text.shape()) + " vs query map " +
                             shape_str(p.text_query.shape()));
    if (visual.shape()[0] != p.vision_key.shape()[0])
        throw DimensionError("project visual channels " + shape_str(visual.shape()) + " vs key map " +
                             shape_str(p.vision_key.shape()));
    const int C = visual.shape()[0], N = visual.shape()[1] * visual.shape()[2];
    Tensor tokens = transpose(reshape(visual, {C, N}));  // N x C
    LqgaProjection out;
    out.q = matmul(text, p.text_query);
    out.k = matmul(tokens, p.vision_key);
    out.v = matmul(tokens, p.vision_value);
    return out;
}

// w_text = sigmoid(mean over query rows of softmax(Q K^T / sqrt(d_e)) V)
inline Tensor guided_weights(const Tensor& q, const Tensor& k, const Tensor& v) {
    if (q.shape()[1] != k.shape()[1] || k.shape()[0] != v.shape()[0])
        throw DimensionError("guided_weights shapes q=" + shape_str(q.shape()) + " k=" + shape_str(k.shape()) +
                             " v=" + shape_str(v.shape()));
    const float scale = 1.0f / std::sqrt(static_cast<float>(q.shape()[1]));
    Tensor attn = softmax(mul_scalar(matmul(q, transpose(k)), scale), 1);
    Tensor mixed = matmul(attn, v);       // L x C
    return sigmoid(mean_axis(mixed, 0));  // C
}

// F'[c,y,x] = w[c] * F[c,y,x] + F[c,y,x]
inline Tensor apply_guidance(const Tensor& w_text, const Tensor& visual) {
    return add(channel_scale(visual, w_text), visual);
}

// Z = Conv1x1(concat(F', f^v))
inline Tensor fuse_output(const Tensor& guided, const Tensor& stream, const Conv1x1& fuse) {
    if (guided.shape() != stream.shape())
        throw DimensionError("fuse_output shape mismatch " + shape_str(guided.shape()) + " vs " +
                             shape_str(stream.shape()));
    return fuse.apply(concat({guided, stream}, 0));
}

inline Tensor lqga_block(const Tensor& visual, const Tensor& stream, const Tensor& text,
                         const LqgaBlockParams& p, Tensor* w_text_out = nullptr) {
    LqgaProjection proj = project(visual, text, p);
    Tensor w = guided_weights(proj.q, proj.k, proj.v);
    if (w_text_out) *w_text_out = w;
    return fuse_output(apply_guidance(w, visual), stream, p.fuse);
}

// block 1 consumes the encoder's deep fused feature on both inputs; each
// later block consumes the previous block's output
inline Tensor lqga_stack(const Tensor& deep_fused, const Tensor& text, const LqgaParams& params,
                         std::vector<Tensor>* w_text_per_block = nullptr) {
    Tensor current = deep_fused;
    for (const auto& block : params.blocks) {
        Tensor w;
        current = lqga_block(current, current, text, block, &w);
        if (w_text_per_block) w_text_per_block->push_back(w);
    }
    return current;
}

}  // namespace mpers
