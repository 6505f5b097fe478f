#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "bdtk/model.hpp"
#include "bdtk/nn.hpp"

namespace bdtk {

struct OptimizerConfig {
    std::string kind = "sgd";
    double lr = 0.1;
    double momentum = 0.9;
    double weight_decay = 1e-4;
};

// Multiplicative learning-rate drops keyed by 1-based epoch number.
using LrMilestones = std::vector<std::pair<int, double>>;

inline double lr_at_epoch(double base_lr, const LrMilestones& milestones, int epoch) {
    double lr = base_lr;
    for (const auto& [e, factor] : milestones) {
        if (epoch >= e) lr *= factor;
    }
    return lr;
}

// SGD with momentum and decoupled-from-nothing classic weight decay
// (gradient += wd * w). Holds raw views into the model's parameters, so the
// model must outlive the optimizer.
class SgdOptimizer {
public:
    enum class Scope { all, extractor_only };

    SgdOptimizer(SplitModel& model, OptimizerConfig cfg, Scope scope = Scope::all)
        : cfg_(std::move(cfg)), lr_(cfg_.lr) {
        auto collect = [&](const ParamRef& p) {
            if (p.is_buffer) return;
            params_.push_back(p);
            velocity_.emplace_back(p.count, 0.0);
        };
        if (scope == Scope::extractor_only) {
            model.extractor.visit_params("extractor.", collect);
        } else {
            model.visit_params(collect);
        }
    }

    void set_lr(double lr) { lr_ = lr; }
    double lr() const { return lr_; }

    void step() {
        for (std::size_t k = 0; k < params_.size(); ++k) {
            const ParamRef& p = params_[k];
            std::vector<double>& v = velocity_[k];
            for (std::size_t i = 0; i < p.count; ++i) {
                const double g = p.grad[i] + cfg_.weight_decay * p.value[i];
                v[i] = cfg_.momentum * v[i] + g;
                p.value[i] -= lr_ * v[i];
            }
        }
    }

private:
    OptimizerConfig cfg_;
    double lr_;
    std::vector<ParamRef> params_;
    std::vector<std::vector<double>> velocity_;
};

// Adam over a raw parameter vector; used by the trigger-inversion loop.
class AdamOptimizer {
public:
    AdamOptimizer(std::size_t n, double lr, double beta1 = 0.9, double beta2 = 0.999,
                  double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), m_(n, 0.0), v_(n, 0.0) {}

    void step(std::span<double> w, std::span<const double> g) {
        if (w.size() != m_.size() || g.size() != m_.size()) {
            throw std::invalid_argument("adam: parameter size mismatch");
        }
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, t_);
        const double bc2 = 1.0 - std::pow(beta2_, t_);
        for (std::size_t i = 0; i < w.size(); ++i) {
            m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g[i];
            v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g[i] * g[i];
            w[i] -= lr_ * (m_[i] / bc1) / (std::sqrt(v_[i] / bc2) + eps_);
        }
    }

private:
    double lr_, beta1_, beta2_, eps_;
    int t_ = 0;
    std::vector<double> m_, v_;
};

}  // namespace bdtk
