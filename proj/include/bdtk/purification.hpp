#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "bdtk/dataset.hpp"
#include "bdtk/model.hpp"
#include "bdtk/optim.hpp"
#include "bdtk/trigger.hpp"

namespace bdtk {

// Feature triples for one batch. z comes from the model being purified on
// stamped inputs; z_cle / z_poi come from the frozen original on clean and
// stamped inputs and carry no gradient. (z, z_cle) is the positive pair,
// (z, z_poi) the negative pair.
struct PairBatch {
    Mat z;
    Mat z_cle;
    Mat z_poi;

    Eigen::Index size() const { return z.rows(); }
};

struct DefenseConfig {
    double tau = 0.5;
    int epochs = 20;
    int batch_size = 64;
    OptimizerConfig optimizer{.kind = "sgd", .lr = 0.1, .momentum = 0.9, .weight_decay = 1e-4};
    LrMilestones lr_milestones{{2, 0.1}, {10, 0.1}};
    AugmentationPolicy augmentation{.random_crop = true, .padding = 4, .random_hflip = true};
    bool stage3_enabled = false;
    int stage3_epochs = 10;
    std::uint64_t seed = 0;

    void validate() const {
        if (tau <= 0.0) throw std::invalid_argument("defense: tau must be > 0");
        if (epochs < 0 || batch_size <= 0 || stage3_epochs < 0) {
            throw std::invalid_argument("defense: bad schedule");
        }
        if (optimizer.lr <= 0.0) throw std::invalid_argument("defense: lr must be > 0");
    }
};

// Builds the feature triples for a batch of clean samples. The frozen
// passes run first (eval mode, gradient-free); the purified pass runs last
// and in training mode when requested, so its layer caches are ready for the
// immediately following backward.
inline PairBatch build_pair_batch(SplitModel& purified, SplitModel& frozen,
                                  const Dataset& clean, const std::vector<std::size_t>& indices,
                                  const TriggerSpec& trigger, const AugmentationPolicy& policy,
                                  Rng& rng, bool training = true) {
    if (!purified.same_architecture(frozen)) {
        throw std::invalid_argument("build_pair_batch: purified/frozen architecture mismatch");
    }
    std::vector<Tensor> clean_imgs, stamped_imgs;
    clean_imgs.reserve(indices.size());
    stamped_imgs.reserve(indices.size());
    for (std::size_t i : indices) {
        const Tensor& x = clean.samples[i].image;
        Tensor x_hat = apply_trigger(x, trigger);
        auto [xa, xha] = augment_pairwise(x, x_hat, policy, rng);
        clean_imgs.push_back(std::move(xa));
        stamped_imgs.push_back(std::move(xha));
    }
    std::vector<const Tensor*> cp, sp;
    for (const auto& t : clean_imgs) cp.push_back(&t);
    for (const auto& t : stamped_imgs) sp.push_back(&t);
    const Mat x_clean = batch_from_images(cp);
    const Mat x_stamped = batch_from_images(sp);

    PairBatch pb;
    pb.z_cle = frozen.features(x_clean, /*training=*/false);
    pb.z_poi = frozen.features(x_stamped, /*training=*/false);
    pb.z = purified.features(x_stamped, training);
    return pb;
}

namespace contrastive_detail {

inline double stable_softplus(double t) {
    return std::max(t, 0.0) + std::log1p(std::exp(-std::abs(t)));
}

inline double stable_sigmoid(double t) {
    if (t >= 0.0) return 1.0 / (1.0 + std::exp(-t));
    const double e = std::exp(t);
    return e / (1.0 + e);
}

struct RowCosine {
    double value;
    Eigen::RowVectorXd grad_z;  // d cos / d z
};

inline RowCosine row_cosine(const Mat& z, const Mat& other, Eigen::Index i, const char* what) {
    const double nz = z.row(i).norm();
    const double no = other.row(i).norm();
    if (nz < 1e-300 || no < 1e-300) {
        throw NumericalError(std::string("contrastive loss: zero-norm ") + what +
                             " feature at sample " + std::to_string(i));
    }
    RowCosine rc;
    const Eigen::RowVectorXd z_hat = z.row(i) / nz;
    const Eigen::RowVectorXd o_hat = other.row(i) / no;
    rc.value = z_hat.dot(o_hat);
    rc.grad_z = (o_hat - rc.value * z_hat) / nz;
    return rc;
}

}  // namespace contrastive_detail

struct ContrastiveValue {
    double sum = 0.0;
    double mean = 0.0;
    double mean_pos_cos = 0.0;
    double mean_neg_cos = 0.0;
};

// Per-sample loss -log( e^{u/tau} / (e^{u/tau} + e^{v/tau}) ) with
// u = cos(z, z_cle), v = cos(z, z_poi); summed over the batch. When grad_z is
// non-null it receives dLoss/dz.
inline ContrastiveValue contrastive_loss_full(const PairBatch& batch, double tau,
                                              Mat* grad_z = nullptr) {
    if (tau <= 0.0) throw std::invalid_argument("contrastive loss: tau must be > 0");
    if (batch.z.rows() != batch.z_cle.rows() || batch.z.rows() != batch.z_poi.rows() ||
        batch.z.cols() != batch.z_cle.cols() || batch.z.cols() != batch.z_poi.cols()) {
        throw std::invalid_argument("contrastive loss: feature shapes disagree");
    }
    using namespace contrastive_detail;
    ContrastiveValue out;
    if (grad_z != nullptr) *grad_z = Mat::Zero(batch.z.rows(), batch.z.cols());
    for (Eigen::Index i = 0; i < batch.z.rows(); ++i) {
        const RowCosine u = row_cosine(batch.z, batch.z_cle, i, "positive-pair");
        const RowCosine v = row_cosine(batch.z, batch.z_poi, i, "negative-pair");
        const double t = (v.value - u.value) / tau;
        out.sum += stable_softplus(t);
        out.mean_pos_cos += u.value;
        out.mean_neg_cos += v.value;
        if (grad_z != nullptr) {
            const double s = stable_sigmoid(t);
            grad_z->row(i) = (s / tau) * (v.grad_z - u.grad_z);
        }
    }
    const double n = static_cast<double>(batch.z.rows());
    out.mean = out.sum / n;
    out.mean_pos_cos /= n;
    out.mean_neg_cos /= n;
    return out;
}

inline double contrastive_loss(const PairBatch& batch, double tau) {
    return contrastive_loss_full(batch, tau).sum;
}

// Positive pairs only: sum of -cos(z, z_cle).
inline ContrastiveValue corrective_loss_full(const PairBatch& batch, Mat* grad_z = nullptr) {
    if (batch.z.rows() != batch.z_cle.rows() || batch.z.cols() != batch.z_cle.cols()) {
        throw std::invalid_argument("corrective loss: feature shapes disagree");
    }
    using namespace contrastive_detail;
    ContrastiveValue out;
    if (grad_z != nullptr) *grad_z = Mat::Zero(batch.z.rows(), batch.z.cols());
    for (Eigen::Index i = 0; i < batch.z.rows(); ++i) {
        const RowCosine u = row_cosine(batch.z, batch.z_cle, i, "positive-pair");
        out.sum -= u.value;
        out.mean_pos_cos += u.value;
        if (grad_z != nullptr) grad_z->row(i) = -u.grad_z;
    }
    const double n = static_cast<double>(batch.z.rows());
    out.mean = out.sum / n;
    out.mean_pos_cos /= n;
    return out;
}

inline double corrective_loss(const PairBatch& batch) { return corrective_loss_full(batch).sum; }

struct DefenseEpochMetric {
    int epoch = 0;
    int stage = 2;
    double contrastive_loss = 0.0;
    double mean_pos_cos = 0.0;
    double mean_neg_cos = 0.0;
};

inline json defense_metrics_json(const std::vector<DefenseEpochMetric>& metrics) {
    json arr = json::array();
    for (const auto& m : metrics) {
        arr.push_back({{"epoch", m.epoch},
                       {"stage", m.stage},
                       {"contrastive_loss", m.contrastive_loss},
                       {"mean_pos_cos", m.mean_pos_cos},
                       {"mean_neg_cos", m.mean_neg_cos}});
    }
    return arr;
}

struct PurifyResult {
    SplitModel model;
    std::vector<DefenseEpochMetric> log;
};

namespace purify_detail {

// Deterministic whole-set pair statistics, no augmentation, eval mode.
inline DefenseEpochMetric eval_pair_stats(SplitModel& purified, SplitModel& frozen,
                                          const Dataset& clean, const TriggerSpec& trigger,
                                          double tau, int epoch, int stage, int batch_size) {
    AugmentationPolicy none;
    Rng rng(0);
    DefenseEpochMetric m;
    m.epoch = epoch;
    m.stage = stage;
    std::vector<std::size_t> idx(clean.size());
    std::iota(idx.begin(), idx.end(), 0);
    double n = 0.0;
    for (std::size_t start = 0; start < idx.size();
         start += static_cast<std::size_t>(batch_size)) {
        const std::size_t end = std::min(start + static_cast<std::size_t>(batch_size), idx.size());
        const std::vector<std::size_t> part(idx.begin() + static_cast<std::ptrdiff_t>(start),
                                            idx.begin() + static_cast<std::ptrdiff_t>(end));
        PairBatch pb = build_pair_batch(purified, frozen, clean, part, trigger, none, rng,
                                        /*training=*/false);
        const ContrastiveValue v = contrastive_loss_full(pb, tau);
        const auto bsz = static_cast<double>(pb.size());
        m.contrastive_loss += v.sum;
        m.mean_pos_cos += v.mean_pos_cos * bsz;
        m.mean_neg_cos += v.mean_neg_cos * bsz;
        n += bsz;
    }
    m.mean_pos_cos /= n;
    m.mean_neg_cos /= n;
    return m;
}

enum class StageLoss { contrastive, corrective };

inline void run_stage(SplitModel& purified, SplitModel& frozen, const Dataset& clean,
                      const TriggerSpec& trigger, const DefenseConfig& cfg, StageLoss which,
                      int epochs, double base_lr, int epoch_offset, int stage_tag,
                      std::vector<DefenseEpochMetric>& log, Rng& shuffle_rng, Rng& aug_rng) {
    SgdOptimizer opt(purified, cfg.optimizer, SgdOptimizer::Scope::extractor_only);
    // Batch statistics normalize the purified forward, but the stored running
    // statistics must keep describing the clean data distribution.
    purified.extractor.set_update_running_stats(false);
    std::vector<std::size_t> order(clean.size());
    std::iota(order.begin(), order.end(), 0);
    const auto bs = static_cast<std::size_t>(cfg.batch_size);

    for (int epoch = 1; epoch <= epochs; ++epoch) {
        const double lr = which == StageLoss::contrastive
                              ? lr_at_epoch(base_lr, cfg.lr_milestones, epoch)
                              : base_lr;
        opt.set_lr(lr);
        shuffle_rng.shuffle(order);
        for (std::size_t start = 0; start < order.size(); start += bs) {
            const std::size_t end = std::min(start + bs, order.size());
            const std::vector<std::size_t> part(
                order.begin() + static_cast<std::ptrdiff_t>(start),
                order.begin() + static_cast<std::ptrdiff_t>(end));
            PairBatch pb = build_pair_batch(purified, frozen, clean, part, trigger,
                                            cfg.augmentation, aug_rng, /*training=*/true);
            Mat dz;
            const ContrastiveValue v = which == StageLoss::contrastive
                                           ? contrastive_loss_full(pb, cfg.tau, &dz)
                                           : corrective_loss_full(pb, &dz);
            if (!std::isfinite(v.sum)) {
                std::vector<double> losses;
                for (const auto& e : log) losses.push_back(e.contrastive_loss);
                throw NumericalError("purify: loss diverged at epoch " +
                                         std::to_string(epoch_offset + epoch) + " step " +
                                         std::to_string(start / bs),
                                     losses);
            }
            purified.extractor.zero_grad();
            purified.extractor.backward(dz);
            opt.step();
        }
        log.push_back(eval_pair_stats(purified, frozen, clean, trigger, cfg.tau,
                                      epoch_offset + epoch, stage_tag, cfg.batch_size));
    }
    purified.extractor.set_update_running_stats(true);
}

inline void check_purify_inputs(const SplitModel& backdoored, const Dataset& clean,
                                const TriggerSpec& trigger) {
    if (clean.samples.empty()) throw std::invalid_argument("purify: empty clean set");
    if (clean.provenance != Provenance::clean) {
        throw std::invalid_argument("purify: dataset must be clean");
    }
    if (trigger.empty()) throw std::invalid_argument("purify: empty trigger");
    if (clean.channels() != backdoored.input_shape.c ||
        clean.height() != backdoored.input_shape.h ||
        clean.width() != backdoored.input_shape.w) {
        throw std::invalid_argument("purify: dataset/model shape mismatch");
    }
}

}  // namespace purify_detail

// Stage 2: copies the backdoored model, freezes the original as reference,
// and minimizes the contrastive loss over the extractor parameters. The head
// receives no gradient and is left untouched.
inline PurifyResult purify(const SplitModel& backdoored, const Dataset& clean,
                           const TriggerSpec& trigger, const DefenseConfig& cfg) {
    cfg.validate();
    purify_detail::check_purify_inputs(backdoored, clean, trigger);

    PurifyResult res;
    res.model = backdoored.clone();
    SplitModel frozen = backdoored.clone();

    res.log.push_back(purify_detail::eval_pair_stats(res.model, frozen, clean, trigger, cfg.tau,
                                                     0, 2, cfg.batch_size));
    Rng shuffle_rng(mix_seed(cfg.seed, 0x5a2));
    Rng aug_rng(mix_seed(cfg.augmentation.seed, 0xa47));
    purify_detail::run_stage(res.model, frozen, clean, trigger, cfg,
                             purify_detail::StageLoss::contrastive, cfg.epochs,
                             cfg.optimizer.lr, 0, 2, res.log, shuffle_rng, aug_rng);
    res.model.param_version += cfg.epochs;
    return res;
}

// Stages 2+3: after purify, keeps pulling positive pairs together with the
// corrective loss. The frozen reference remains the original backdoored
// model; stage 3 runs at the final stage-2 learning rate.
inline PurifyResult purify_plus(const SplitModel& backdoored, const Dataset& clean,
                                const TriggerSpec& trigger, const DefenseConfig& cfg) {
    if (!cfg.stage3_enabled) {
        throw std::invalid_argument("purify_plus: stage3_enabled must be set");
    }
    PurifyResult res = purify(backdoored, clean, trigger, cfg);
    if (cfg.stage3_epochs == 0) return res;

    SplitModel frozen = backdoored.clone();
    Rng shuffle_rng(mix_seed(cfg.seed, 0x5a3));
    Rng aug_rng(mix_seed(cfg.augmentation.seed, 0xa48));
    const double stage3_lr = lr_at_epoch(cfg.optimizer.lr, cfg.lr_milestones, cfg.epochs);
    purify_detail::run_stage(res.model, frozen, clean, trigger, cfg,
                             purify_detail::StageLoss::corrective, cfg.stage3_epochs, stage3_lr,
                             cfg.epochs, 3, res.log, shuffle_rng, aug_rng);
    res.model.param_version += cfg.stage3_epochs;
    return res;
}

}  // namespace bdtk
