#pragma once

// Full segmentation model: frozen stub backbone + optional LDPE stream and
// dilated-attention fusion, optional text guidance (single-expert or dynamic
// mixture of experts), LQGA fusion stack, U-Net style decoder.

#include <cstring>
#include <memory>
#include <string>
#include <vector>

#include "mpers/caption.hpp"
#include "mpers/decoder.hpp"
#include "mpers/errors.hpp"
#include "mpers/lqga.hpp"
#include "mpers/text_experts.hpp"
#include "mpers/vision.hpp"

namespace mpers {

struct ModelConfig {
    int num_classes = 5;
    BackboneWidths backbone_widths;
    LdpeWidths ldpe_widths;
    int fusion_c = 64;   // deep feature width C
    int skip_c = 32;     // skip feature width
    int dilation = 2;    // single-dilation attention rate
    int window = 3;      // attention window
    int text_tokens = 16;  // L
    int text_c = 32;       // d_t
    int embed_c = 64;      // d_e shared embedding width
    int num_experts = 3;   // E = M
    int lqga_blocks = 2;   // B
    bool use_ldpe = true;
    bool use_lqga = true;
    bool use_dmte = true;
    uint64_t param_seed = 1;
    uint64_t backbone_seed = 2;
    uint64_t text_seed = 17;

    void validate() const {
        if (use_dmte && !use_lqga)
            throw ValidationError("flag dependency violated: use_dmte requires use_lqga");
        if (num_classes < 2) throw ValidationError("num_classes must be >= 2");
        if (num_experts < 1) throw ValidationError("num_experts must be >= 1");
        if (lqga_blocks < 1 || lqga_blocks > 4) throw ValidationError("lqga_blocks must be in [1,4]");
    }
};

class Model {
public:
    explicit Model(const ModelConfig& cfg) : cfg_(cfg) {
        cfg.validate();
        Rng rng(cfg.param_seed);
        backbone_ = StubBackbone::init(cfg.backbone_seed, cfg.backbone_widths, reg_);
        encoder_ = std::make_unique<HashStubEncoder>(cfg.text_tokens, cfg.text_c, cfg.text_seed);

        std::vector<int> skip_in = {cfg.backbone_widths.w1, cfg.backbone_widths.w2, cfg.backbone_widths.w3};
        if (cfg.use_ldpe) {
            ldpe_ = LdpeParams::init(cfg.ldpe_widths, reg_, rng);
            fusion_ = FusionParams::init(cfg.backbone_widths.w4, cfg.ldpe_widths.c3, cfg.fusion_c, cfg.dilation,
                                         cfg.window, reg_, rng);
            skip_in = {cfg.backbone_widths.w1 + cfg.ldpe_widths.c1, cfg.backbone_widths.w2 + cfg.ldpe_widths.c2,
                       cfg.backbone_widths.w3 + cfg.ldpe_widths.c3};
        } else {
            baseline_align_ = Conv1x1::init(cfg.backbone_widths.w4, cfg.fusion_c, reg_, rng, "baseline.align");
        }
        skips_ = SkipParams::init(skip_in, cfg.skip_c, reg_, rng);
        if (cfg.use_dmte) dmte_ = DmteParams::init(cfg.text_c, cfg.num_experts, reg_, rng);
        if (cfg.use_lqga) lqga_ = LqgaParams::init(cfg.text_c, cfg.fusion_c, cfg.embed_c, cfg.lqga_blocks, reg_, rng);
        decoder_ = DecoderParams::init(cfg.fusion_c, cfg.skip_c, cfg.num_classes, reg_, rng);
    }

    // text path: dynamic mixture over all experts, or the first expert's raw
    // tokens when gating is disabled
    Tensor encode_text(const std::vector<CaptionRecord>& captions) const {
        if (!cfg_.use_lqga) throw ContractError("text path disabled in this configuration");
        if (cfg_.use_dmte) {
            if (static_cast<int>(captions.size()) != cfg_.num_experts)
                throw ContractError("expected " + std::to_string(cfg_.num_experts) + " expert captions, got " +
                                    std::to_string(captions.size()));
            return dmte_forward(encode_captions(*encoder_, captions), dmte_);
        }
        if (captions.empty()) throw ContractError("single-expert text path needs one caption");
        return encoder_->encode(captions.front().text);
    }

    Tensor forward(const Tensor& image, const std::vector<CaptionRecord>& captions,
                   std::vector<Tensor>* w_text_per_block = nullptr) const {
        std::vector<Tensor> taps = backbone_.encode(image);
        Tensor deep;
        std::vector<Tensor> skips;
        if (cfg_.use_ldpe) {
            std::vector<Tensor> levels = ldpe_encode(image, ldpe_);
            deep = dilate_fuse(taps[3], levels[2], fusion_);
            skips = collect_skips(taps, levels, skips_);
        } else {
            deep = baseline_align_.apply(taps[3]);
            skips = collect_skips(taps, {}, skips_);
        }
        Tensor guided = deep;
        if (cfg_.use_lqga) guided = lqga_stack(deep, encode_text(captions), lqga_, w_text_per_block);
        return decode(guided, skips, decoder_);
    }

    const ModelConfig& config() const { return cfg_; }
    ParamRegistry& registry() { return reg_; }
    const ParamRegistry& registry() const { return reg_; }
    const TextEncoder& text_encoder() const { return *encoder_; }
    const StubBackbone& backbone() const { return backbone_; }

    // checksum over all frozen parameters plus probe encodings of the text
    // encoder (which has no stored buffers)
    uint64_t frozen_checksum() const {
        uint64_t h = 1469598103934665603ull;
        auto mix = [&h](const std::vector<float>& v) {
            for (float f : v) {
                uint32_t bits;
                std::memcpy(&bits, &f, 4);
                h ^= bits;
                h *= 1099511628211ull;
            }
        };
        for (const auto& p : reg_.all())
            if (!p.trainable) mix(p.tensor.data());
        mix(encoder_->encode("frozen probe one two building road left").data());
        return h;
    }

private:
    ModelConfig cfg_;
    ParamRegistry reg_;
    StubBackbone backbone_;
    std::unique_ptr<HashStubEncoder> encoder_;
    LdpeParams ldpe_;
    FusionParams fusion_;
    Conv1x1 baseline_align_;
    SkipParams skips_;
    DmteParams dmte_;
    LqgaParams lqga_;
    DecoderParams decoder_;
};

}  // namespace mpers
