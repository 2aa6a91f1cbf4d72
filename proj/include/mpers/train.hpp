#pragma once

// Training loop: decoupled-weight-decay adaptive-moment optimizer, milestone
// learning-rate decay, per-step loss log, atomic checkpointing, evaluation.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "mpers/errors.hpp"
#include "mpers/metrics.hpp"
#include "mpers/model.hpp"
#include "mpers/tensor_io.hpp"

namespace mpers {

class AdamW {
public:
    struct Options {
        float lr = 0.001f;
        float beta1 = 0.9f;
        float beta2 = 0.999f;
        float eps = 1e-8f;
        float weight_decay = 0.01f;
    };

    explicit AdamW(std::vector<Tensor> params) : AdamW(std::move(params), Options()) {}

    AdamW(std::vector<Tensor> params, Options opts) : params_(std::move(params)), opts_(opts) {
        for (const Tensor& p : params_) {
            m_.emplace_back(p.numel(), 0.0f);
            v_.emplace_back(p.numel(), 0.0f);
        }
    }

    void step(float lr_scale = 1.0f) {
        ++step_count_;
        const float lr = opts_.lr * lr_scale;
        const float bc1 = 1.0f - std::pow(opts_.beta1, static_cast<float>(step_count_));
        const float bc2 = 1.0f - std::pow(opts_.beta2, static_cast<float>(step_count_));
        for (size_t i = 0; i < params_.size(); ++i) {
            Tensor& p = params_[i];
            for (int j = 0; j < p.numel(); ++j) {
                const float g = p.grad()[j];
                m_[i][j] = opts_.beta1 * m_[i][j] + (1.0f - opts_.beta1) * g;
                v_[i][j] = opts_.beta2 * v_[i][j] + (1.0f - opts_.beta2) * g * g;
                const float mhat = m_[i][j] / bc1;
                const float vhat = v_[i][j] / bc2;
                p.data()[j] -= lr * (mhat / (std::sqrt(vhat) + opts_.eps) + opts_.weight_decay * p.data()[j]);
            }
        }
    }

    void zero_grads() {
        for (Tensor& p : params_) p.zero_grad();
    }

    long long step_count() const { return step_count_; }
    const Options& options() const { return opts_; }

    // moment buffers for checkpointing, keyed alongside the registry names
    std::map<std::string, Tensor> state(const ParamRegistry& reg) const {
        std::map<std::string, Tensor> out;
        size_t i = 0;
        for (const auto& np : reg.all()) {
            if (!np.trainable) continue;
            out.emplace("opt.m." + np.name, Tensor::from(np.tensor.shape(), m_[i]));
            out.emplace("opt.v." + np.name, Tensor::from(np.tensor.shape(), v_[i]));
            ++i;
        }
        out.emplace("opt.step", Tensor::scalar(static_cast<float>(step_count_)));
        return out;
    }

private:
    std::vector<Tensor> params_;
    Options opts_;
    std::vector<std::vector<float>> m_, v_;
    long long step_count_ = 0;
};

struct TrainSample {
    Tensor image;
    std::vector<int> targets;  // H*W labels
    std::vector<CaptionRecord> captions;
};

inline std::vector<int> raster_targets(const LabelRaster& r) {
    return std::vector<int>(r.labels.begin(), r.labels.end());
}

// one optimizer step over a batch: forward, mean cross-entropy, backward,
// update, grads zeroed; frozen components untouched by construction
inline float train_step(Model& model, const std::vector<TrainSample>& batch, AdamW& opt, float lr_scale = 1.0f) {
    if (batch.empty()) throw ContractError("train_step: empty batch");
    Tape tape;
    Tensor total;
    {
        Tape::Scope scope(tape);
        for (size_t i = 0; i < batch.size(); ++i) {
            Tensor logits = model.forward(batch[i].image, batch[i].captions);
            Tensor loss = cross_entropy(logits, batch[i].targets);
            total = i == 0 ? loss : add(total, loss);
        }
        total = mul_scalar(total, 1.0f / static_cast<float>(batch.size()));
    }
    const float loss_value = total.item();
    if (!std::isfinite(loss_value))
        throw TrainingError("non-finite loss at optimizer step " + std::to_string(opt.step_count() + 1));
    tape.backward(total);
    opt.step(lr_scale);
    opt.zero_grads();
    return loss_value;
}

struct TrainOptions {
    int epochs = 10;
    int batch_size = 8;
    AdamW::Options adam;
    std::vector<double> milestones = {0.6, 0.85};  // fractions of total steps, x0.1 each
    uint64_t shuffle_seed = 0;
};

struct LossLogEntry {
    int step = 0;
    float lr = 0.0f;
    float loss = 0.0f;
};

struct TrainResult {
    std::vector<LossLogEntry> loss_log;
    float final_loss = 0.0f;
};

inline TrainResult train_loop(Model& model, const std::vector<TrainSample>& dataset, const TrainOptions& opts,
                              AdamW& opt, const std::function<void(int, float)>& on_step = {}) {
    if (dataset.empty()) throw ContractError("train_loop: empty dataset");
    const int batches_per_epoch = (static_cast<int>(dataset.size()) + opts.batch_size - 1) / opts.batch_size;
    const int total_steps = opts.epochs * batches_per_epoch;
    Rng rng(opts.shuffle_seed);

    TrainResult result;
    int step = 0;
    for (int epoch = 0; epoch < opts.epochs; ++epoch) {
        std::vector<size_t> order(dataset.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::shuffle(order.begin(), order.end(), rng);
        for (int b = 0; b < batches_per_epoch; ++b) {
            std::vector<TrainSample> batch;
            for (int i = b * opts.batch_size; i < std::min<int>((b + 1) * opts.batch_size, order.size()); ++i)
                batch.push_back(dataset[order[i]]);
            float lr_scale = 1.0f;
            for (double m : opts.milestones)
                if (step >= static_cast<int>(m * total_steps)) lr_scale *= 0.1f;
            const float loss = train_step(model, batch, opt, lr_scale);
            ++step;
            result.loss_log.push_back({step, opt.options().lr * lr_scale, loss});
            result.final_loss = loss;
            if (on_step) on_step(step, loss);
        }
    }
    return result;
}

inline TrainResult train_loop(Model& model, const std::vector<TrainSample>& dataset, const TrainOptions& opts,
                              const std::function<void(int, float)>& on_step = {}) {
    AdamW opt(model.registry().trainable(), opts.adam);
    return train_loop(model, dataset, opts, opt, on_step);
}

inline MetricsReport evaluate(const Model& model, const std::vector<TrainSample>& dataset) {
    ConfusionMatrix cm(model.config().num_classes);
    for (const auto& sample : dataset) {
        Tensor logits = model.forward(sample.image, sample.captions);
        LabelRaster pred = segment(logits);
        LabelRaster gt{logits.shape()[1], logits.shape()[2], {}};
        gt.labels.assign(sample.targets.begin(), sample.targets.end());
        accumulate(cm, pred, gt);
    }
    return summarize(cm);
}

inline void save_checkpoint(const std::string& path, const Model& model, const AdamW* opt = nullptr) {
    std::map<std::string, Tensor> tensors = model.registry().as_map();
    if (opt) {
        auto state = opt->state(model.registry());
        tensors.insert(state.begin(), state.end());
    }
    save_bytes_atomic(path, write_archive(tensors));
}

inline void load_checkpoint(const std::string& path, Model& model) {
    model.registry().load(read_archive(load_bytes(path)));
}

inline std::string loss_log_csv(const std::vector<LossLogEntry>& log) {
    std::ostringstream os;
    os << "step,lr,loss\n";
    for (const auto& e : log) os << e.step << "," << e.lr << "," << e.loss << "\n";
    return os.str();
}

}  // namespace mpers
