#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "bdtk/dataset.hpp"
#include "bdtk/loss.hpp"
#include "bdtk/model.hpp"
#include "bdtk/optim.hpp"
#include "bdtk/trigger.hpp"

namespace bdtk {

struct InversionConfig {
    int target_label = 5;
    double lambda_reg = 0.01;
    int epochs = 100;
    int batch_size = 64;
    double lr = 0.005;
    double beta1 = 0.9;
    double beta2 = 0.999;
    std::uint64_t seed = 0;

    void validate() const {
        if (lambda_reg < 0.0) throw std::invalid_argument("inversion: lambda must be >= 0");
        if (epochs < 0 || batch_size <= 0 || lr <= 0.0) {
            throw std::invalid_argument("inversion: bad schedule");
        }
    }
};

struct InversionResult {
    TriggerSpec trigger;  // continuous mask in [0,1]
    double final_objective = 0.0;
    double mask_l1 = 0.0;
    std::vector<double> loss_trace;  // full-set objective per epoch
};

// Recovers a trigger by gradient descent on the stamped-classification loss
// plus an l1 mask penalty. Pattern and mask live in [0,1] through a sigmoid
// squash of unconstrained parameters; the continuous mask is used throughout,
// binarization (if any) is a reporting concern. The model is read-only.
//
// The per-batch objective is mean cross-entropy toward the target label plus
// lambda * sum(mask); exposed separately so tests can difference it.
class TriggerInversionProblem {
public:
    TriggerInversionProblem(SplitModel& model, int target_label, double lambda)
        : model_(model), target_(target_label), lambda_(lambda), shape_(model.input_shape) {
        if (target_label < 0 || target_label >= model.num_classes) {
            throw std::invalid_argument("inversion: target label out of range");
        }
    }

    std::size_t pattern_count() const { return shape_.numel(); }
    std::size_t mask_count() const { return shape_.h * shape_.w; }
    std::size_t param_count() const { return pattern_count() + mask_count(); }

    // theta = [pattern logits | mask logits]
    static std::vector<double> initial_theta(const Shape3& shape, double mask_logit = -3.0) {
        std::vector<double> theta(shape.numel() + shape.h * shape.w, 0.0);
        std::fill(theta.begin() + static_cast<std::ptrdiff_t>(shape.numel()), theta.end(),
                  mask_logit);
        return theta;
    }

    TriggerSpec materialize(std::span<const double> theta) const {
        TriggerSpec t;
        t.pattern = Tensor({shape_.c, shape_.h, shape_.w});
        t.mask = Tensor({shape_.h, shape_.w});
        for (std::size_t i = 0; i < pattern_count(); ++i) t.pattern[i] = sigmoid(theta[i]);
        for (std::size_t i = 0; i < mask_count(); ++i) {
            t.mask[i] = sigmoid(theta[pattern_count() + i]);
        }
        t.binary = false;
        return t;
    }

    double objective(const Mat& images, std::span<const double> theta) {
        return run(images, theta, nullptr);
    }

    double objective_and_gradient(const Mat& images, std::span<const double> theta,
                                  std::span<double> grad) {
        return run(images, theta, &grad);
    }

private:
    static double sigmoid(double t) { return 1.0 / (1.0 + std::exp(-t)); }

    double run(const Mat& images, std::span<const double> theta, std::span<double>* grad_out) {
        const std::size_t np = pattern_count();
        const std::size_t nm = mask_count();
        const std::size_t spatial = nm;
        const auto batch = images.rows();

        std::vector<double> pattern(np), mask(nm);
        for (std::size_t i = 0; i < np; ++i) pattern[i] = sigmoid(theta[i]);
        for (std::size_t i = 0; i < nm; ++i) mask[i] = sigmoid(theta[np + i]);

        // Stamp with the continuous mask; the blend of [0,1] values stays in
        // [0,1], so no clamp enters the gradient path.
        Mat stamped(batch, images.cols());
        for (Eigen::Index b = 0; b < batch; ++b) {
            for (std::size_t c = 0; c < shape_.c; ++c) {
                for (std::size_t p = 0; p < spatial; ++p) {
                    const std::size_t j = c * spatial + p;
                    const double x = images(b, static_cast<Eigen::Index>(j));
                    stamped(b, static_cast<Eigen::Index>(j)) =
                        (1.0 - mask[p]) * x + mask[p] * pattern[j];
                }
            }
        }

        const Mat logits = model_.logits(stamped, /*training=*/false);
        const CeResult ce = softmax_cross_entropy_to_target(logits, target_);
        double mask_l1 = 0.0;
        for (double m : mask) mask_l1 += m;
        const double obj = ce.value + lambda_ * mask_l1;

        if (grad_out != nullptr) {
            ParamGradGuard frozen(model_);
            const Mat gx = model_.extractor.backward(model_.head.backward(ce.grad));
            std::span<double> grad = *grad_out;
            std::fill(grad.begin(), grad.end(), 0.0);
            for (Eigen::Index b = 0; b < batch; ++b) {
                for (std::size_t c = 0; c < shape_.c; ++c) {
                    for (std::size_t p = 0; p < spatial; ++p) {
                        const std::size_t j = c * spatial + p;
                        const double g = gx(b, static_cast<Eigen::Index>(j));
                        grad[j] += g * mask[p];
                        grad[np + p] +=
                            g * (pattern[j] - images(b, static_cast<Eigen::Index>(j)));
                    }
                }
            }
            for (std::size_t p = 0; p < nm; ++p) grad[np + p] += lambda_;
            // Chain through the sigmoid squash.
            for (std::size_t i = 0; i < np; ++i) grad[i] *= pattern[i] * (1.0 - pattern[i]);
            for (std::size_t p = 0; p < nm; ++p) {
                grad[np + p] *= mask[p] * (1.0 - mask[p]);
            }
        }
        return obj;
    }

    SplitModel& model_;
    int target_;
    double lambda_;
    Shape3 shape_;
};

inline InversionResult invert_trigger(SplitModel& model, const Dataset& clean,
                                      const InversionConfig& cfg) {
    cfg.validate();
    if (clean.samples.empty()) throw std::invalid_argument("invert_trigger: empty clean set");
    if (clean.provenance != Provenance::clean) {
        throw std::invalid_argument("invert_trigger: dataset must be clean");
    }
    if (clean.channels() != model.input_shape.c || clean.height() != model.input_shape.h ||
        clean.width() != model.input_shape.w) {
        throw std::invalid_argument("invert_trigger: dataset/model shape mismatch");
    }

    TriggerInversionProblem problem(model, cfg.target_label, cfg.lambda_reg);
    std::vector<double> theta = TriggerInversionProblem::initial_theta(model.input_shape);
    std::vector<double> grad(theta.size(), 0.0);
    AdamOptimizer adam(theta.size(), cfg.lr, cfg.beta1, cfg.beta2);

    Rng rng(mix_seed(cfg.seed, 0x1f2e));
    std::vector<std::size_t> order(clean.size());
    std::iota(order.begin(), order.end(), 0);
    const auto bs = static_cast<std::size_t>(cfg.batch_size);

    const Mat full = batch_from_dataset(clean, order);

    InversionResult best;
    best.final_objective = problem.objective(full, theta);
    best.trigger = problem.materialize(theta);
    best.mask_l1 = best.trigger.mask_l1();
    std::vector<double> trace;

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        rng.shuffle(order);
        for (std::size_t start = 0; start < order.size(); start += bs) {
            const std::size_t end = std::min(start + bs, order.size());
            const Mat batch = batch_from_dataset(
                clean, std::vector<std::size_t>(order.begin() + static_cast<std::ptrdiff_t>(start),
                                                order.begin() + static_cast<std::ptrdiff_t>(end)));
            const double obj = problem.objective_and_gradient(batch, theta, grad);
            if (!std::isfinite(obj)) {
                throw NumericalError("invert_trigger: objective diverged at epoch " +
                                         std::to_string(epoch),
                                     trace);
            }
            adam.step(theta, grad);
        }
        const double obj = problem.objective(full, theta);
        if (!std::isfinite(obj)) {
            throw NumericalError("invert_trigger: objective diverged at epoch " +
                                     std::to_string(epoch),
                                 trace);
        }
        trace.push_back(obj);
        if (obj < best.final_objective) {
            best.final_objective = obj;
            best.trigger = problem.materialize(theta);
            best.mask_l1 = best.trigger.mask_l1();
        }
    }
    best.loss_trace = std::move(trace);
    return best;
}

// ---------------------------------------------------------------------------
// Persistence: trigger files plus result.json.
// ---------------------------------------------------------------------------

inline void save_inversion_result(const fs::path& dir, const InversionResult& res,
                                  json extra = json::object()) {
    save_trigger(dir, res.trigger, json{{"kind", "inverted"}});
    json j = {
        {"final_objective", res.final_objective},
        {"mask_l1", res.mask_l1},
        {"loss_trace", res.loss_trace},
    };
    for (auto& [k, v] : extra.items()) j[k] = v;
    write_json_file(dir / "result.json", j);
}

inline InversionResult load_inversion_result(const fs::path& dir) {
    InversionResult res;
    res.trigger = load_trigger(dir);
    const json j = read_json_file(dir / "result.json");
    res.final_objective = j.at("final_objective").get<double>();
    res.mask_l1 = j.at("mask_l1").get<double>();
    res.loss_trace = j.at("loss_trace").get<std::vector<double>>();
    return res;
}

}  // namespace bdtk
