#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "bdtk/attacks.hpp"
#include "bdtk/config.hpp"
#include "bdtk/evaluation.hpp"
#include "bdtk/inversion.hpp"
#include "bdtk/model.hpp"
#include "bdtk/purification.hpp"
#include "bdtk/train.hpp"

namespace bdtk {

// Pipeline failures carry the stage they occurred in.
class StageError : public std::runtime_error {
public:
    StageError(std::string stage, const std::string& what)
        : std::runtime_error("[stage:" + stage + "] " + what), stage_(std::move(stage)) {}

    const std::string& stage() const { return stage_; }

private:
    std::string stage_;
};

namespace pipeline_detail {

inline std::uint64_t hash_json(const json& j, std::uint64_t h = 14695981039346656037ull) {
    return fnv1a(j.dump(), h);
}

// A cached stage directory is complete iff stage.json exists and records the
// same input hash. Incomplete directories are rebuilt from scratch.
inline bool stage_complete(const fs::path& dir, std::uint64_t hash) {
    const fs::path marker = dir / "stage.json";
    if (!fs::exists(marker)) return false;
    try {
        const json j = read_json_file(marker);
        return j.at("input_hash").get<std::string>() == hex64(hash);
    } catch (const std::exception&) {
        return false;
    }
}

// Runs `build` into the stage directory unless a completed artifact with the
// same input hash already exists. `config_slice` records exactly what
// produced the artifact.
template <typename BuildFn>
fs::path ensure_stage(const fs::path& cache_root, const std::string& stage,
                      std::uint64_t input_hash, const json& config_slice, BuildFn&& build) {
    const fs::path dir = cache_root / (stage + "-" + hex64(input_hash));
    if (stage_complete(dir, input_hash)) return dir;
    std::error_code ec;
    fs::remove_all(dir, ec);
    fs::create_directories(dir);
    try {
        build(dir);
    } catch (const StageError&) {
        throw;
    } catch (const std::exception& e) {
        throw StageError(stage, e.what());
    }
    write_json_file(dir / "stage.json", json{{"stage", stage},
                                             {"input_hash", hex64(input_hash)},
                                             {"config", config_slice}});
    return dir;
}

}  // namespace pipeline_detail

// Executes attack -> train -> invert -> purify -> evaluate, persisting every
// intermediate artifact under the cache directory keyed by input hashes, so
// reruns and sweeps reuse whatever is unchanged.
inline DefenseReport run_pipeline(const ExperimentConfig& raw_cfg) {
    using pipeline_detail::ensure_stage;
    using pipeline_detail::hash_json;

    const ExperimentConfig cfg = resolve_experiment(raw_cfg);
    const fs::path out_dir = cfg.output_dir;
    const fs::path cache = cfg.resolved_cache_dir();
    fs::create_directories(out_dir);
    fs::create_directories(cache);
    write_json_file(out_dir / "config.resolved.json", to_json(cfg));

    // --- load datasets -----------------------------------------------------
    Dataset train_ds, test_ds;
    std::uint64_t ds_fp = 0;
    try {
        const fs::path root = cfg.dataset;
        ds_fp = quick_dir_fingerprint(root);
        train_ds = load_dataset(root / "train");
        test_ds = load_dataset(root / "test");
    } catch (const std::exception& e) {
        throw StageError("load-dataset", e.what());
    }
    const Shape3 input{train_ds.channels(), train_ds.height(), train_ds.width()};

    // --- CL reference model (clean-trained, for PGD) ------------------------
    SplitModel cl_reference;
    bool have_reference = false;
    if (cfg.attack.kind == AttackKind::cl) {
        const std::uint64_t h = hash_json(
            json{{"ds", hex64(ds_fp)}, {"train", to_json(cfg.train)}, {"arch", cfg.arch}},
            fnv1a("cleanref"));
        const fs::path dir = ensure_stage(
            cache, "cleanref", h, json{{"train", to_json(cfg.train)}, {"arch", cfg.arch}},
            [&](const fs::path& d) {
                SplitModel m = build_model(cfg.arch, input, train_ds.num_classes,
                                           mix_seed(cfg.seed, 0x7e0));
                const auto trace = train_supervised(m, train_ds, cfg.train);
                save_checkpoint(d / "checkpoint", m,
                                json{{"config_hash", hex64(hash_json(to_json(cfg.train)))}});
                write_json_file(d / "train_log.json", epoch_metrics_json(trace));
            });
        try {
            cl_reference = load_checkpoint(dir / "checkpoint");
            have_reference = true;
        } catch (const std::exception& e) {
            throw StageError("cleanref", e.what());
        }
    }

    // --- poison ------------------------------------------------------------
    const std::uint64_t poison_seed = mix_seed(cfg.seed, 0x201);
    const std::uint64_t poison_hash = hash_json(
        json{{"ds", hex64(ds_fp)}, {"attack", to_json(cfg.attack)}, {"seed", poison_seed}},
        fnv1a("poison"));
    const fs::path poison_dir = ensure_stage(
        cache, "poison", poison_hash, json{{"attack", to_json(cfg.attack)}},
        [&](const fs::path& d) {
            AttackConfig atk = cfg.attack;
            ensure_trigger(atk, input.c, input.h, input.w);
            const Dataset poisoned =
                poison_dataset(train_ds, atk, poison_seed, have_reference ? &cl_reference : nullptr);
            save_dataset(d / "dataset", poisoned);
            save_trigger(d / "trigger", atk.trigger,
                         json{{"kind", to_string(atk.kind)}, {"seed", atk.trigger_seed}});
        });
    Dataset poisoned_ds = load_dataset(poison_dir / "dataset");
    const TriggerSpec attack_trigger = load_trigger(poison_dir / "trigger");

    // --- train backdoored model --------------------------------------------
    const std::uint64_t train_hash = hash_json(
        json{{"poison", hex64(poison_hash)}, {"train", to_json(cfg.train)}, {"arch", cfg.arch}},
        fnv1a("train"));
    const fs::path train_dir = ensure_stage(
        cache, "train", train_hash, json{{"train", to_json(cfg.train)}, {"arch", cfg.arch}},
        [&](const fs::path& d) {
            SplitModel m =
                build_model(cfg.arch, input, train_ds.num_classes, mix_seed(cfg.seed, 0x7e1));
            const auto trace = train_supervised(m, poisoned_ds, cfg.train);
            save_checkpoint(d / "checkpoint", m,
                            json{{"config_hash", hex64(hash_json(to_json(cfg.train)))}});
            write_json_file(d / "train_log.json", epoch_metrics_json(trace));
        });
    SplitModel backdoored = load_checkpoint(train_dir / "checkpoint");

    // --- clean subset --------------------------------------------------------
    const std::uint64_t subset_seed = mix_seed(cfg.seed, 0x202);
    const std::uint64_t subset_hash = hash_json(
        json{{"ds", hex64(ds_fp)}, {"rate", cfg.clean_rate}, {"seed", subset_seed}},
        fnv1a("subset"));
    const fs::path subset_dir = ensure_stage(
        cache, "subset", subset_hash, json{{"clean_rate", cfg.clean_rate}},
        [&](const fs::path& d) {
            const Dataset subset = sample_clean_subset(train_ds, cfg.clean_rate, subset_seed);
            save_dataset(d / "dataset", subset);
        });
    const Dataset clean_subset = load_dataset(subset_dir / "dataset");

    // --- metrics before ------------------------------------------------------
    DefenseReport report;
    report.attack_summary = to_json(cfg.attack);
    report.defense_summary = to_json(cfg.defense);
    try {
        report.ba_before = eval_ba(backdoored, test_ds);
        report.asr_before = eval_asr(backdoored, test_ds, attack_trigger, cfg.attack.target_label);
    } catch (const std::exception& e) {
        throw StageError("eval-before", e.what());
    }

    // --- defense trigger -----------------------------------------------------
    TriggerSpec defense_trigger;
    std::uint64_t trigger_src_hash = 0;
    if (cfg.defense_trigger == "inverted") {
        report.trigger_provenance = "inverted";
        const std::uint64_t h = hash_json(json{{"train", hex64(train_hash)},
                                               {"subset", hex64(subset_hash)},
                                               {"inversion", to_json(cfg.inversion)}},
                                          fnv1a("invert"));
        const fs::path dir = ensure_stage(
            cache, "invert", h, json{{"inversion", to_json(cfg.inversion)}},
            [&](const fs::path& d) {
                const InversionResult res = invert_trigger(backdoored, clean_subset, cfg.inversion);
                save_inversion_result(
                    d, res, json{{"config_hash", hex64(hash_json(to_json(cfg.inversion)))}});
            });
        defense_trigger = load_trigger(dir);
        trigger_src_hash = h;
    } else if (cfg.defense_trigger == "ground_truth") {
        report.trigger_provenance = "ground_truth";
        defense_trigger = attack_trigger;
        trigger_src_hash = poison_hash;
    } else {
        report.trigger_provenance = "external";
        try {
            defense_trigger = load_trigger(cfg.defense_trigger);
            trigger_src_hash = quick_dir_fingerprint(cfg.defense_trigger);
        } catch (const std::exception& e) {
            throw StageError("load-trigger", e.what());
        }
    }

    // --- purify ---------------------------------------------------------------
    const std::uint64_t purify_hash = hash_json(json{{"train", hex64(train_hash)},
                                                     {"subset", hex64(subset_hash)},
                                                     {"trigger", hex64(trigger_src_hash)},
                                                     {"defense", to_json(cfg.defense)}},
                                                fnv1a("purify"));
    const fs::path purify_dir = ensure_stage(
        cache, "purify", purify_hash, json{{"defense", to_json(cfg.defense)}},
        [&](const fs::path& d) {
            const PurifyResult res =
                cfg.defense.stage3_enabled
                    ? purify_plus(backdoored, clean_subset, defense_trigger, cfg.defense)
                    : purify(backdoored, clean_subset, defense_trigger, cfg.defense);
            SplitModel purified = res.model;
            save_checkpoint(d / "checkpoint", purified,
                            json{{"config_hash", hex64(hash_json(to_json(cfg.defense)))}});
            write_json_file(d / "defense_log.json", defense_metrics_json(res.log));
        });
    SplitModel purified = load_checkpoint(purify_dir / "checkpoint");

    // --- metrics after ---------------------------------------------------------
    try {
        report.ba_after = eval_ba(purified, test_ds);
        report.asr_after = eval_asr(purified, test_ds, attack_trigger, cfg.attack.target_label);
    } catch (const std::exception& e) {
        throw StageError("eval-after", e.what());
    }

    if (cfg.feature_export_fraction >= 0.0) {
        try {
            const FeatureDump before =
                extract_features(backdoored, poisoned_ds, cfg.feature_export_fraction);
            const FeatureDump after =
                extract_features(purified, poisoned_ds, cfg.feature_export_fraction);
            write_feature_csv(out_dir / "features_before.csv", before);
            write_feature_csv(out_dir / "features_after.csv", after);
        } catch (const std::exception& e) {
            throw StageError("export-features", e.what());
        }
    }

    report.validate();
    write_json_file(out_dir / "report.json", defense_report_json(report));
    write_metrics_tsv(out_dir / "metrics.tsv", train_ds.name, to_string(cfg.attack.kind), report);
    return report;
}

// One sweep axis: a dotted path into the experiment config and the values to
// place there.
struct SweepAxis {
    std::string param_path;  // e.g. "defense.tau" or "clean_rate"
    json values = json::array();
};

inline std::string sweep_value_tag(const json& v) {
    std::string s = v.is_string() ? v.get<std::string>() : v.dump();
    for (char& c : s) {
        if (c == '.' || c == '/' || c == ' ') c = '_';
    }
    return s;
}

// Independent seeded runs per value; upstream artifacts are shared through
// the common cache whenever the varied parameter does not affect them.
inline std::vector<DefenseReport> run_sweep(const ExperimentConfig& base, const SweepAxis& axis) {
    const ExperimentConfig resolved = resolve_experiment(base);
    json base_json = to_json(resolved);

    std::string pointer = "/" + axis.param_path;
    for (char& c : pointer) {
        if (c == '.') c = '/';
    }
    const json::json_pointer ptr(pointer);
    try {
        (void)base_json.at(ptr);
    } catch (const std::exception&) {
        throw std::invalid_argument("run_sweep: config has no parameter at " + axis.param_path);
    }

    std::vector<DefenseReport> reports;
    for (const auto& value : axis.values) {
        json run_json = base_json;
        run_json[ptr] = value;
        ExperimentConfig run_cfg = experiment_from_json(run_json);
        run_cfg.output_dir = resolved.output_dir + "/sweep-" + sweep_value_tag(axis.param_path) +
                             "/" + sweep_value_tag(value);
        run_cfg.cache_dir = resolved.resolved_cache_dir();
        reports.push_back(run_pipeline(run_cfg));
    }
    return reports;
}

}  // namespace bdtk
