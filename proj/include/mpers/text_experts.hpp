#pragma once

// Per-expert caption encoding and the dynamic mixture-of-experts text path:
// a frozen hash-embedding encoder stands in for the CLIP text encoder, a
// shared single-head self-attention adapts each expert's tokens, a sigmoid
// gate weights experts from the pooled tokens, and the mixed token matrix
// is the weighted sum over experts.

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "mpers/caption.hpp"
#include "mpers/errors.hpp"
#include "mpers/init.hpp"
#include "mpers/tensor.hpp"

namespace mpers {

class TextEncoder {
public:
    virtual ~TextEncoder() = default;
    virtual Tensor encode(const std::string& text) const = 0;  // L x d, no grad
    virtual int token_count() const = 0;
    virtual int channels() const = 0;
};

// Frozen stand-in encoder: each whitespace token hashes to a fixed random
// embedding row; captions are padded with zeros / truncated to L tokens.
class HashStubEncoder : public TextEncoder {
public:
    HashStubEncoder(int max_tokens = 16, int channels = 32, uint64_t seed = 17)
        : max_tokens_(max_tokens), channels_(channels), seed_(seed) {}

    Tensor encode(const std::string& text) const override {
        Tensor out = Tensor::zeros({max_tokens_, channels_});
        const std::vector<std::string> tokens = tokenize(text);
        const int n = std::min<int>(max_tokens_, static_cast<int>(tokens.size()));
        for (int i = 0; i < n; ++i) {
            Rng rng(fnv1a(tokens[i]) ^ seed_);
            std::normal_distribution<float> dist(0.0f, 1.0f);
            for (int j = 0; j < channels_; ++j) out.data()[i * channels_ + j] = dist(rng);
        }
        return out;
    }

    int token_count() const override { return max_tokens_; }
    int channels() const override { return channels_; }

private:
    int max_tokens_;
    int channels_;
    uint64_t seed_;
};

struct TextTokenSet {
    std::vector<Tensor> tokens;  // one L x d matrix per expert
    std::vector<int> expert_ids;
};

inline TextTokenSet encode_captions(const TextEncoder& encoder, const std::vector<CaptionRecord>& captions) {
    TextTokenSet set;
    for (const auto& c : captions) {
        set.tokens.push_back(encoder.encode(c.text));
        set.expert_ids.push_back(c.expert_id);
    }
    return set;
}

// shared single-head self-attention adapter + gating network + expert weights
struct DmteParams {
    Tensor wq, wk, wv, wo;          // d x d each, shared across experts
    Tensor gate_w;                  // d x M
    Tensor gate_b;                  // M, zero-init so training starts at G = 0.5
    std::vector<Tensor> expert_w;   // M learnable scalars, init 1.0
    int channels = 0;
    int num_experts = 0;

    static DmteParams init(int channels, int num_experts, ParamRegistry& reg, Rng& rng,
                           const std::string& prefix = "dmte") {
        DmteParams p;
        p.channels = channels;
        p.num_experts = num_experts;
        p.wq = reg.add(prefix + ".attn.wq", init_weight({channels, channels}, rng));
        p.wk = reg.add(prefix + ".attn.wk", init_weight({channels, channels}, rng));
        p.wv = reg.add(prefix + ".attn.wv", init_weight({channels, channels}, rng));
        p.wo = reg.add(prefix + ".attn.wo", init_weight({channels, channels}, rng));
        p.gate_w = reg.add(prefix + ".gate.w", init_weight({channels, num_experts}, rng));
        p.gate_b = reg.add(prefix + ".gate.b", Tensor::zeros({num_experts}));
        for (int m = 0; m < num_experts; ++m)
            p.expert_w.push_back(reg.add(prefix + ".expert_w." + std::to_string(m), Tensor::scalar(1.0f)));
        return p;
    }
};

// softmax(Q K^T / sqrt(d)) V projected by Wo, plus residual
inline Tensor linguistic_attention(const Tensor& tokens, const DmteParams& params) {
    if (tokens.rank() != 2 || tokens.shape()[1] != params.channels)
        throw DimensionError("linguistic_attention tokens " + shape_str(tokens.shape()) + " vs d=" +
                             std::to_string(params.channels));
    const float scale = 1.0f / std::sqrt(static_cast<float>(params.channels));
    Tensor q = matmul(tokens, params.wq);
    Tensor k = matmul(tokens, params.wk);
    Tensor v = matmul(tokens, params.wv);
    Tensor attn = softmax(mul_scalar(matmul(q, transpose(k)), scale), 1);
    Tensor mixed = matmul(matmul(attn, v), params.wo);
    return add(mixed, tokens);
}

// G_m = sigmoid(g(mean over experts and tokens of adapted tokens))_m
inline Tensor compute_gates(const std::vector<Tensor>& adapted, const DmteParams& params) {
    if (static_cast<int>(adapted.size()) != params.num_experts)
        throw ContractError("compute_gates: expert count mismatch");
    Tensor pooled = adapted[0];
    for (size_t i = 1; i < adapted.size(); ++i) pooled = add(pooled, adapted[i]);
    pooled = mul_scalar(pooled, 1.0f / static_cast<float>(adapted.size()));
    Tensor pooled_vec = mean_axis(pooled, 0);                         // d
    Tensor logits = linear(reshape(pooled_vec, {1, params.channels}), params.gate_w, params.gate_b);
    return reshape(sigmoid(logits), {params.num_experts});
}

// T = sum_m W_m * G_m * Phi_m
inline Tensor mix_experts(const std::vector<Tensor>& adapted, const Tensor& gates,
                          const std::vector<Tensor>& expert_w) {
    if (adapted.empty() || gates.shape()[0] != static_cast<int>(adapted.size()) ||
        expert_w.size() != adapted.size())
        throw ContractError("mix_experts: gate / weight / expert count mismatch");
    Tensor mixed;
    for (size_t m = 0; m < adapted.size(); ++m) {
        Tensor coeff = mul(expert_w[m], select_index(gates, static_cast<int>(m)));
        Tensor term = scale_by(adapted[m], coeff);
        mixed = m == 0 ? term : add(mixed, term);
    }
    return mixed;
}

// full text path: adapt each expert's tokens, gate, mix
inline Tensor dmte_forward(const TextTokenSet& tokens, const DmteParams& params) {
    std::vector<Tensor> adapted;
    for (const Tensor& t : tokens.tokens) adapted.push_back(linguistic_attention(t, params));
    Tensor gates = compute_gates(adapted, params);
    return mix_experts(adapted, gates, params.expert_w);
}

}  // namespace mpers
