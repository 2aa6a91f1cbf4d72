#pragma once

// U-Net style decoding of the text-guided feature with the three skip
// levels, down to full-resolution class logits, plus the argmax readout.

#include <string>
#include <vector>

#include "mpers/errors.hpp"
#include "mpers/init.hpp"
#include "mpers/tensor.hpp"
#include "mpers/tensor_io.hpp"
#include "mpers/vision.hpp"

namespace mpers {

struct DecoderStage {
    NormConvStage conv1, conv2;  // 3x3, stride 1

    static DecoderStage init(int in_c, int out_c, ParamRegistry& reg, Rng& rng, const std::string& prefix) {
        DecoderStage s;
        s.conv1 = NormConvStage::init(in_c, out_c, reg, rng, prefix + ".conv1");
        s.conv2 = NormConvStage::init(out_c, out_c, reg, rng, prefix + ".conv2");
        s.conv1.stride = 1;
        s.conv2.stride = 1;
        return s;
    }

    Tensor apply(const Tensor& x) const { return conv2.apply(conv1.apply(x)); }
};

struct DecoderParams {
    std::vector<DecoderStage> stages;  // stage i consumes skip f_F(4-i)
    Conv1x1 head;                      // 1x1 classification to K channels
    std::vector<int> widths;
    int num_classes = 0;

    // channel widths halve per up-stage
    static DecoderParams init(int in_c, int skip_c, int num_classes, ParamRegistry& reg, Rng& rng) {
        DecoderParams p;
        p.num_classes = num_classes;
        int current = in_c;
        for (int i = 0; i < 3; ++i) {
            const int out_c = std::max(8, in_c >> (i + 1));
            p.stages.push_back(DecoderStage::init(current + skip_c, out_c, reg, rng,
                                                  "decoder.stage" + std::to_string(i + 1)));
            p.widths.push_back(out_c);
            current = out_c;
        }
        p.head = Conv1x1::init(current, num_classes, reg, rng, "decoder.head");
        return p;
    }
};

// skips = {f_F1 @ stride 4, f_F2 @ stride 8, f_F3 @ stride 16}; the guided
// feature arrives at stride 16, so the first stage concatenates in place and
// the later stages upsample x2 before taking their skip; a final x4 bilinear
// upsample precedes the classification head (bilinear, not nearest, so the
// argmax boundary can sit at any pixel instead of snapping to a 4 px grid).
inline Tensor decode(const Tensor& guided, const std::vector<Tensor>& skips, const DecoderParams& p) {
    if (skips.size() != 3) throw DimensionError("decode expects 3 skip levels, got " + std::to_string(skips.size()));
    Tensor x = guided;
    for (int i = 0; i < 3; ++i) {
        const Tensor& skip = skips[2 - i];
        if (i > 0) x = upsample_nearest(x, 2);
        if (x.shape()[1] != skip.shape()[1] || x.shape()[2] != skip.shape()[2])
            throw DimensionError("decode stage " + std::to_string(i + 1) + " spatial mismatch: " +
                                 shape_str(x.shape()) + " vs skip " + shape_str(skip.shape()));
        x = p.stages[i].apply(concat({x, skip}, 0));
    }
    return p.head.apply(upsample_bilinear(x, 4));
}

// per-pixel argmax, ties broken toward the lowest class index
inline LabelRaster segment(const Tensor& logits) {
    if (logits.rank() != 3) throw DimensionError("segment expects KxHxW logits, got " + shape_str(logits.shape()));
    const int K = logits.shape()[0], H = logits.shape()[1], W = logits.shape()[2];
    LabelRaster out{H, W, std::vector<uint8_t>(static_cast<size_t>(H) * W, 0)};
    for (int p = 0; p < H * W; ++p) {
        int best = 0;
        float best_v = logits.data()[p];
        for (int k = 1; k < K; ++k) {
            const float v = logits.data()[k * H * W + p];
            if (v > best_v) {
                best = k;
                best_v = v;
            }
        }
        out.labels[p] = static_cast<uint8_t>(best);
    }
    return out;
}

}  // namespace mpers
