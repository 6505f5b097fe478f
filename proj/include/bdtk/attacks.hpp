#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "bdtk/dataset.hpp"
#include "bdtk/loss.hpp"
#include "bdtk/model.hpp"
#include "bdtk/trigger.hpp"

namespace bdtk {

enum class AttackKind { badnets, trojan, blend, cl, sig };

inline std::string to_string(AttackKind k) {
    switch (k) {
        case AttackKind::badnets: return "badnets";
        case AttackKind::trojan: return "trojan";
        case AttackKind::blend: return "blend";
        case AttackKind::cl: return "cl";
        case AttackKind::sig: return "sig";
    }
    return "badnets";
}

inline AttackKind attack_kind_from_string(const std::string& s) {
    if (s == "badnets") return AttackKind::badnets;
    if (s == "trojan") return AttackKind::trojan;
    if (s == "blend") return AttackKind::blend;
    if (s == "cl") return AttackKind::cl;
    if (s == "sig") return AttackKind::sig;
    throw std::invalid_argument("unknown attack kind: " + s);
}

inline bool is_clean_label(AttackKind k) { return k == AttackKind::cl || k == AttackKind::sig; }

// PGD hyperparameters on the 0..255 pixel scale.
struct PgdConfig {
    double epsilon = 8.0;
    int steps = 10;
    double step_size = 2.0;
};

struct SigParams {
    double amplitude = 20.0;
    double frequency = 6.0;
};

struct AttackConfig {
    AttackKind kind = AttackKind::badnets;
    double poison_rate = 0.10;
    int target_label = 5;
    TriggerGeometry geometry;
    double blend_alpha = 0.1;
    PgdConfig pgd;
    SigParams sig;
    std::uint64_t trigger_seed = 1;
    TriggerSpec trigger;  // materialized lazily by ensure_trigger

    void validate(int num_classes) const {
        if (poison_rate < 0.0 || poison_rate > 1.0) {
            throw std::invalid_argument("attack: poison_rate must be in [0,1]");
        }
        if (target_label < 0 || target_label >= num_classes) {
            throw std::invalid_argument("attack: target_label out of range");
        }
    }
};

// Builds the attack trigger for the configured kind and image shape.
inline TriggerSpec make_trigger(const AttackConfig& cfg, std::size_t c, std::size_t h,
                                std::size_t w) {
    switch (cfg.kind) {
        case AttackKind::badnets:
        case AttackKind::cl:
            return make_grid_trigger(c, h, w, cfg.geometry);
        case AttackKind::trojan:
            return make_patch_trigger(c, h, w, cfg.geometry, cfg.trigger_seed);
        case AttackKind::blend: {
            TriggerGeometry g = cfg.geometry;
            g.position = TriggerPosition::center;
            return make_blend_trigger(c, h, w, g, cfg.blend_alpha, cfg.trigger_seed);
        }
        case AttackKind::sig:
            return make_sig_trigger(c, h, w, cfg.sig.amplitude, cfg.sig.frequency);
    }
    throw std::invalid_argument("make_trigger: unknown kind");
}

inline void ensure_trigger(AttackConfig& cfg, std::size_t c, std::size_t h, std::size_t w) {
    if (cfg.trigger.empty()) cfg.trigger = make_trigger(cfg, c, h, w);
}

// Untargeted l-inf PGD ascent on the classification loss, starting from x.
// epsilon/step_size are on the 0..255 scale per convention.
inline Tensor pgd_perturb(const Tensor& x, int label, SplitModel& model, double epsilon,
                          int steps, double step_size) {
    if (epsilon < 0.0) throw std::invalid_argument("pgd: epsilon must be >= 0");
    if (epsilon == 0.0 || steps <= 0) return x;
    const double eps = epsilon / 255.0;
    const double alpha = step_size / 255.0;

    ParamGradGuard frozen(model);
    Tensor adv = x;
    std::vector<const Tensor*> imgs{&adv};
    for (int step = 0; step < steps; ++step) {
        const Mat xb = batch_from_images(imgs);
        const Mat logits = model.logits(xb, /*training=*/false);
        const CeResult ce = softmax_cross_entropy(logits, {label});
        const Mat gx = model.extractor.backward(model.head.backward(ce.grad));
        for (std::size_t j = 0; j < adv.numel(); ++j) {
            const double g = gx(0, static_cast<Eigen::Index>(j));
            double v = adv[j] + alpha * (g > 0.0 ? 1.0 : (g < 0.0 ? -1.0 : 0.0));
            v = std::clamp(v, x[j] - eps, x[j] + eps);
            adv[j] = std::clamp(v, 0.0, 1.0);
        }
    }
    return adv;
}

// Poisons ceil(rate * N) samples. Poisoned-label kinds draw uniformly over the
// whole set, stamp the trigger and rewrite labels to the target; clean-label
// kinds draw from the target class only and leave labels untouched. The CL
// kind additionally applies PGD (w.r.t. `cl_reference`, a clean-trained
// model) before stamping.
inline Dataset poison_dataset(const Dataset& d, const AttackConfig& cfg_in, std::uint64_t seed,
                              SplitModel* cl_reference = nullptr) {
    if (d.provenance != Provenance::clean) {
        throw std::invalid_argument("poison_dataset: input must be clean");
    }
    cfg_in.validate(d.num_classes);
    AttackConfig cfg = cfg_in;
    ensure_trigger(cfg, d.channels(), d.height(), d.width());

    const std::size_t count =
        static_cast<std::size_t>(std::ceil(cfg.poison_rate * static_cast<double>(d.size())));

    Dataset out = d;
    out.provenance = Provenance::mixed;
    out.name = d.name + "-" + to_string(cfg.kind);
    out.init_bookkeeping();

    if (count == 0) return out;

    std::vector<std::size_t> pool;
    if (is_clean_label(cfg.kind)) {
        for (std::size_t i = 0; i < d.size(); ++i) {
            if (d.samples[i].label == cfg.target_label) pool.push_back(i);
        }
        if (count > pool.size()) {
            throw std::invalid_argument(
                "poison_dataset: clean-label attack needs " + std::to_string(count) +
                " target-class samples but only " + std::to_string(pool.size()) + " exist");
        }
        if (cfg.kind == AttackKind::cl && cl_reference == nullptr) {
            throw std::invalid_argument("poison_dataset: CL attack requires a reference model");
        }
    } else {
        pool.resize(d.size());
        std::iota(pool.begin(), pool.end(), 0);
    }

    Rng rng(mix_seed(seed, 0xa77ac));
    rng.shuffle(pool);
    pool.resize(count);

    for (std::size_t i : pool) {
        Sample& s = out.samples[i];
        if (cfg.kind == AttackKind::cl) {
            s.image = pgd_perturb(s.image, s.label, *cl_reference, cfg.pgd.epsilon,
                                  cfg.pgd.steps, cfg.pgd.step_size);
        }
        s.image = apply_trigger(s.image, cfg.trigger);
        if (!is_clean_label(cfg.kind)) s.label = cfg.target_label;
        out.poisoned[i] = 1;
    }
    return out;
}

}  // namespace bdtk
