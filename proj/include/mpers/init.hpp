#pragma once

// Seeded parameter initialization and the named-parameter registry shared by
// the model components, the optimizer, and checkpointing.

#include <map>
#include <random>
#include <string>
#include <vector>

#include "mpers/tensor.hpp"

namespace mpers {

using Rng = std::mt19937_64;

inline Tensor randn(Shape shape, Rng& rng, float stddev = 1.0f) {
    Tensor t = Tensor::zeros(std::move(shape));
    std::normal_distribution<float> dist(0.0f, stddev);
    for (float& v : t.data()) v = dist(rng);
    return t;
}

// fan-in scaled init for weight matrices / conv kernels
inline Tensor init_weight(Shape shape, Rng& rng) {
    int fan_in = 1;
    for (size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
    return randn(std::move(shape), rng, std::sqrt(2.0f / static_cast<float>(fan_in)));
}

struct NamedParam {
    std::string name;
    Tensor tensor;
    bool trainable = true;
};

class ParamRegistry {
public:
    Tensor add(const std::string& name, Tensor t, bool trainable = true) {
        t.set_requires_grad(trainable);
        params_.push_back({name, t, trainable});
        return t;
    }

    std::vector<Tensor> trainable() const {
        std::vector<Tensor> out;
        for (const auto& p : params_)
            if (p.trainable) out.push_back(p.tensor);
        return out;
    }

    const std::vector<NamedParam>& all() const { return params_; }

    long long count_trainable() const {
        long long n = 0;
        for (const auto& p : params_)
            if (p.trainable) n += p.tensor.numel();
        return n;
    }

    void zero_grads() {
        for (auto& p : params_)
            if (p.trainable) p.tensor.zero_grad();
    }

    std::map<std::string, Tensor> as_map() const {
        std::map<std::string, Tensor> out;
        for (const auto& p : params_) out.emplace(p.name, p.tensor);
        return out;
    }

    // overwrite values in place from a checkpoint map
    void load(const std::map<std::string, Tensor>& saved) {
        for (auto& p : params_) {
            auto it = saved.find(p.name);
            if (it == saved.end()) throw IoError("checkpoint missing parameter: " + p.name);
            if (it->second.shape() != p.tensor.shape())
                throw DimensionError("checkpoint shape mismatch for " + p.name + ": " +
                                     shape_str(it->second.shape()) + " vs " + shape_str(p.tensor.shape()));
            p.tensor.data() = it->second.data();
        }
    }

private:
    std::vector<NamedParam> params_;
};

}  // namespace mpers
