#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "bdtk/dataset.hpp"
#include "bdtk/loss.hpp"
#include "bdtk/model.hpp"
#include "bdtk/optim.hpp"

namespace bdtk {

struct TrainConfig {
    int epochs = 50;
    int batch_size = 64;
    OptimizerConfig optimizer{.kind = "sgd", .lr = 0.1, .momentum = 0.9, .weight_decay = 1e-4};
    LrMilestones lr_milestones{{20, 0.1}, {35, 0.1}};
    AugmentationPolicy augmentation;
    std::uint64_t seed = 0;

    void validate() const {
        if (epochs < 0) throw std::invalid_argument("train: epochs must be >= 0");
        if (batch_size <= 0) throw std::invalid_argument("train: batch_size must be > 0");
        if (optimizer.lr <= 0.0) throw std::invalid_argument("train: lr must be > 0");
        for (std::size_t i = 1; i < lr_milestones.size(); ++i) {
            if (lr_milestones[i].first < lr_milestones[i - 1].first) {
                throw std::invalid_argument("train: lr milestones must be ascending");
            }
        }
    }
};

struct EpochMetric {
    int epoch = 0;
    double loss = 0.0;
    double lr = 0.0;
};

inline json epoch_metrics_json(const std::vector<EpochMetric>& metrics) {
    json arr = json::array();
    for (const auto& m : metrics) {
        arr.push_back({{"epoch", m.epoch}, {"loss", m.loss}, {"lr", m.lr}});
    }
    return arr;
}

// Cross-entropy minimization over the dataset. Mutates the model in place and
// returns the per-epoch loss trace. Deterministic under a fixed seed.
inline std::vector<EpochMetric> train_supervised(SplitModel& model, const Dataset& d,
                                                 const TrainConfig& cfg) {
    cfg.validate();
    if (d.samples.empty()) throw std::invalid_argument("train: dataset is empty");
    if (model.num_classes != d.num_classes) {
        throw std::invalid_argument("train: model outputs " + std::to_string(model.num_classes) +
                                    " classes, dataset declares " + std::to_string(d.num_classes));
    }

    std::vector<EpochMetric> trace;
    if (cfg.epochs == 0) return trace;

    SgdOptimizer opt(model, cfg.optimizer);
    Rng shuffle_rng(mix_seed(cfg.seed, 0x7a11));
    Rng aug_rng(mix_seed(cfg.augmentation.seed, 0xa46));

    std::vector<std::size_t> order(d.size());
    std::iota(order.begin(), order.end(), 0);

    const auto bs = static_cast<std::size_t>(cfg.batch_size);
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        opt.set_lr(lr_at_epoch(cfg.optimizer.lr, cfg.lr_milestones, epoch));
        shuffle_rng.shuffle(order);
        double epoch_loss = 0.0;
        std::size_t steps = 0;
        for (std::size_t start = 0; start < order.size(); start += bs) {
            const std::size_t end = std::min(start + bs, order.size());
            std::vector<Tensor> augmented;
            std::vector<const Tensor*> imgs;
            std::vector<int> labels;
            augmented.reserve(end - start);
            for (std::size_t i = start; i < end; ++i) {
                const Sample& s = d.samples[order[i]];
                augmented.push_back(augment(s.image, cfg.augmentation, aug_rng));
                labels.push_back(s.label);
            }
            for (const Tensor& t : augmented) imgs.push_back(&t);
            const Mat x = batch_from_images(imgs);

            model.zero_grad();
            const Mat logits = model.logits(x, /*training=*/true);
            const CeResult ce = softmax_cross_entropy(logits, labels);
            if (!std::isfinite(ce.value)) {
                std::vector<double> losses;
                for (const auto& m : trace) losses.push_back(m.loss);
                throw NumericalError("train: loss diverged at epoch " + std::to_string(epoch),
                                     losses);
            }
            model.extractor.backward(model.head.backward(ce.grad));
            opt.step();
            epoch_loss += ce.value;
            ++steps;
        }
        trace.push_back({epoch, epoch_loss / static_cast<double>(steps), opt.lr()});
    }
    model.param_version += cfg.epochs;
    return trace;
}

inline TrainConfig defense_finetune_defaults() {
    TrainConfig cfg;
    cfg.epochs = 20;
    cfg.lr_milestones = {{2, 0.1}, {10, 0.1}};
    return cfg;
}

// Fine-tuning baseline defense: plain supervised training on the clean
// subset under the defense schedule.
inline std::vector<EpochMetric> finetune_baseline(SplitModel& model, const Dataset& clean,
                                                  const TrainConfig& cfg) {
    if (clean.provenance != Provenance::clean) {
        throw std::invalid_argument("finetune_baseline: dataset must be clean");
    }
    return train_supervised(model, clean, cfg);
}

}  // namespace bdtk
