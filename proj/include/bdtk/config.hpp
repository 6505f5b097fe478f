#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "bdtk/attacks.hpp"
#include "bdtk/inversion.hpp"
#include "bdtk/purification.hpp"
#include "bdtk/train.hpp"

namespace bdtk {

// JSON (de)serialization for the experiment configuration tree. Parsing is
// partial: absent keys keep their defaults, so a config file only states what
// it overrides. Serialization always materializes every field.

inline json to_json(const AugmentationPolicy& a) {
    return json{{"random_crop", a.random_crop},
                {"padding", a.padding},
                {"random_hflip", a.random_hflip},
                {"seed", a.seed}};
}

inline AugmentationPolicy augmentation_from_json(const json& j, AugmentationPolicy base = {}) {
    base.random_crop = j.value("random_crop", base.random_crop);
    base.padding = j.value("padding", base.padding);
    base.random_hflip = j.value("random_hflip", base.random_hflip);
    base.seed = j.value("seed", base.seed);
    return base;
}

inline json to_json(const OptimizerConfig& o) {
    return json{{"kind", o.kind},
                {"lr", o.lr},
                {"momentum", o.momentum},
                {"weight_decay", o.weight_decay}};
}

inline OptimizerConfig optimizer_from_json(const json& j, OptimizerConfig base = {}) {
    base.kind = j.value("kind", base.kind);
    base.lr = j.value("lr", base.lr);
    base.momentum = j.value("momentum", base.momentum);
    base.weight_decay = j.value("weight_decay", base.weight_decay);
    return base;
}

inline json milestones_to_json(const LrMilestones& ms) {
    json arr = json::array();
    for (const auto& [e, f] : ms) arr.push_back(json::array({e, f}));
    return arr;
}

inline LrMilestones milestones_from_json(const json& j) {
    LrMilestones ms;
    for (const auto& item : j) {
        ms.emplace_back(item.at(0).get<int>(), item.at(1).get<double>());
    }
    return ms;
}

inline json to_json(const TrainConfig& t) {
    return json{{"epochs", t.epochs},
                {"batch_size", t.batch_size},
                {"optimizer", to_json(t.optimizer)},
                {"lr_milestones", milestones_to_json(t.lr_milestones)},
                {"augmentation", to_json(t.augmentation)},
                {"seed", t.seed}};
}

inline TrainConfig train_from_json(const json& j, TrainConfig base = {}) {
    base.epochs = j.value("epochs", base.epochs);
    base.batch_size = j.value("batch_size", base.batch_size);
    if (j.contains("optimizer")) base.optimizer = optimizer_from_json(j["optimizer"], base.optimizer);
    if (j.contains("lr_milestones")) base.lr_milestones = milestones_from_json(j["lr_milestones"]);
    if (j.contains("augmentation")) {
        base.augmentation = augmentation_from_json(j["augmentation"], base.augmentation);
    }
    base.seed = j.value("seed", base.seed);
    return base;
}

inline json to_json(const AttackConfig& a) {
    return json{{"kind", to_string(a.kind)},
                {"poison_rate", a.poison_rate},
                {"target_label", a.target_label},
                {"geometry",
                 {{"size", a.geometry.size}, {"position", to_string(a.geometry.position)}}},
                {"blend_alpha", a.blend_alpha},
                {"pgd",
                 {{"epsilon", a.pgd.epsilon},
                  {"steps", a.pgd.steps},
                  {"step_size", a.pgd.step_size}}},
                {"sig", {{"amplitude", a.sig.amplitude}, {"frequency", a.sig.frequency}}},
                {"trigger_seed", a.trigger_seed}};
}

inline AttackConfig attack_from_json(const json& j, AttackConfig base = {}) {
    if (j.contains("kind")) base.kind = attack_kind_from_string(j["kind"].get<std::string>());
    base.poison_rate = j.value("poison_rate", base.poison_rate);
    base.target_label = j.value("target_label", base.target_label);
    if (j.contains("geometry")) {
        base.geometry.size = j["geometry"].value("size", base.geometry.size);
        if (j["geometry"].contains("position")) {
            base.geometry.position =
                trigger_position_from_string(j["geometry"]["position"].get<std::string>());
        }
    }
    base.blend_alpha = j.value("blend_alpha", base.blend_alpha);
    if (j.contains("pgd")) {
        base.pgd.epsilon = j["pgd"].value("epsilon", base.pgd.epsilon);
        base.pgd.steps = j["pgd"].value("steps", base.pgd.steps);
        base.pgd.step_size = j["pgd"].value("step_size", base.pgd.step_size);
    }
    if (j.contains("sig")) {
        base.sig.amplitude = j["sig"].value("amplitude", base.sig.amplitude);
        base.sig.frequency = j["sig"].value("frequency", base.sig.frequency);
    }
    base.trigger_seed = j.value("trigger_seed", base.trigger_seed);
    return base;
}

inline json to_json(const InversionConfig& c) {
    return json{{"target_label", c.target_label},
                {"lambda", c.lambda_reg},
                {"epochs", c.epochs},
                {"batch_size", c.batch_size},
                {"lr", c.lr},
                {"beta1", c.beta1},
                {"beta2", c.beta2},
                {"seed", c.seed}};
}

inline InversionConfig inversion_from_json(const json& j, InversionConfig base = {}) {
    base.target_label = j.value("target_label", base.target_label);
    base.lambda_reg = j.value("lambda", base.lambda_reg);
    base.epochs = j.value("epochs", base.epochs);
    base.batch_size = j.value("batch_size", base.batch_size);
    base.lr = j.value("lr", base.lr);
    base.beta1 = j.value("beta1", base.beta1);
    base.beta2 = j.value("beta2", base.beta2);
    base.seed = j.value("seed", base.seed);
    return base;
}

inline json to_json(const DefenseConfig& c) {
    return json{{"tau", c.tau},
                {"epochs", c.epochs},
                {"batch_size", c.batch_size},
                {"optimizer", to_json(c.optimizer)},
                {"lr_milestones", milestones_to_json(c.lr_milestones)},
                {"augmentation", to_json(c.augmentation)},
                {"stage3_enabled", c.stage3_enabled},
                {"stage3_epochs", c.stage3_epochs},
                {"seed", c.seed}};
}

inline DefenseConfig defense_from_json(const json& j, DefenseConfig base = {}) {
    base.tau = j.value("tau", base.tau);
    base.epochs = j.value("epochs", base.epochs);
    base.batch_size = j.value("batch_size", base.batch_size);
    if (j.contains("optimizer")) base.optimizer = optimizer_from_json(j["optimizer"], base.optimizer);
    if (j.contains("lr_milestones")) base.lr_milestones = milestones_from_json(j["lr_milestones"]);
    if (j.contains("augmentation")) {
        base.augmentation = augmentation_from_json(j["augmentation"], base.augmentation);
    }
    base.stage3_enabled = j.value("stage3_enabled", base.stage3_enabled);
    base.stage3_epochs = j.value("stage3_epochs", base.stage3_epochs);
    base.seed = j.value("seed", base.seed);
    return base;
}

// Full experiment description: attack -> train -> invert -> purify -> report.
struct ExperimentConfig {
    std::string dataset;  // directory containing train/ and test/ dataset dirs
    std::string arch = "toy_cnn";
    double clean_rate = 0.05;
    std::string output_dir = "out";
    std::string cache_dir;  // defaults to <output_dir>/cache
    std::uint64_t seed = 1;
    AttackConfig attack;
    TrainConfig train;
    InversionConfig inversion;
    DefenseConfig defense;
    // "inverted", "ground_truth", or a path to an external trigger directory.
    std::string defense_trigger = "inverted";
    double feature_export_fraction = 0.2;  // clean fraction for feature dumps; <0 disables
    bool no_augment = false;               // strips augmentation everywhere (ablation mode)

    std::string resolved_cache_dir() const {
        return cache_dir.empty() ? output_dir + "/cache" : cache_dir;
    }
};

inline json to_json(const ExperimentConfig& c) {
    return json{{"dataset", c.dataset},
                {"arch", c.arch},
                {"clean_rate", c.clean_rate},
                {"output_dir", c.output_dir},
                {"cache_dir", c.cache_dir},
                {"seed", c.seed},
                {"attack", to_json(c.attack)},
                {"train", to_json(c.train)},
                {"inversion", to_json(c.inversion)},
                {"defense", to_json(c.defense)},
                {"defense_trigger", c.defense_trigger},
                {"feature_export_fraction", c.feature_export_fraction},
                {"no_augment", c.no_augment}};
}

inline ExperimentConfig experiment_from_json(const json& j, ExperimentConfig base = {}) {
    base.dataset = j.value("dataset", base.dataset);
    base.arch = j.value("arch", base.arch);
    base.clean_rate = j.value("clean_rate", base.clean_rate);
    base.output_dir = j.value("output_dir", base.output_dir);
    base.cache_dir = j.value("cache_dir", base.cache_dir);
    base.seed = j.value("seed", base.seed);
    if (j.contains("attack")) base.attack = attack_from_json(j["attack"], base.attack);
    if (j.contains("train")) base.train = train_from_json(j["train"], base.train);
    if (j.contains("inversion")) base.inversion = inversion_from_json(j["inversion"], base.inversion);
    if (j.contains("defense")) base.defense = defense_from_json(j["defense"], base.defense);
    base.defense_trigger = j.value("defense_trigger", base.defense_trigger);
    base.feature_export_fraction = j.value("feature_export_fraction", base.feature_export_fraction);
    base.no_augment = j.value("no_augment", base.no_augment);
    return base;
}

// Materializes derived defaults: stage seeds and target labels are pinned so
// the resolved config reproduces the run exactly.
inline ExperimentConfig resolve_experiment(ExperimentConfig cfg) {
    if (cfg.cache_dir.empty()) cfg.cache_dir = cfg.output_dir + "/cache";
    if (cfg.train.seed == 0) cfg.train.seed = mix_seed(cfg.seed, 0x101);
    if (cfg.inversion.seed == 0) cfg.inversion.seed = mix_seed(cfg.seed, 0x102);
    if (cfg.defense.seed == 0) cfg.defense.seed = mix_seed(cfg.seed, 0x103);
    if (cfg.train.augmentation.seed == 0) cfg.train.augmentation.seed = mix_seed(cfg.seed, 0x104);
    if (cfg.defense.augmentation.seed == 0) {
        cfg.defense.augmentation.seed = mix_seed(cfg.seed, 0x105);
    }
    cfg.inversion.target_label = cfg.attack.target_label;
    if (cfg.no_augment) {
        cfg.train.augmentation.random_crop = false;
        cfg.train.augmentation.random_hflip = false;
        cfg.defense.augmentation.random_crop = false;
        cfg.defense.augmentation.random_hflip = false;
    }
    return cfg;
}

}  // namespace bdtk
