// Command-line front end: every pipeline stage is independently invocable,
// plus full pipeline and sweep drivers working from JSON config files.

#include <cstdint>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "bdtk/bdtk.hpp"

namespace {

using namespace bdtk;

struct CommonOpts {
    std::string config_path;
    std::string out_dir;
    std::optional<std::uint64_t> seed;
    std::optional<double> clean_rate;
    std::string trigger_path;
    bool no_augment = false;
};

ExperimentConfig load_config(const CommonOpts& opts) {
    ExperimentConfig cfg;
    if (!opts.config_path.empty()) {
        cfg = experiment_from_json(read_json_file(opts.config_path));
    }
    if (opts.seed) cfg.seed = *opts.seed;
    if (opts.clean_rate) cfg.clean_rate = *opts.clean_rate;
    if (!opts.out_dir.empty()) cfg.output_dir = opts.out_dir;
    if (!opts.trigger_path.empty()) cfg.defense_trigger = opts.trigger_path;
    if (opts.no_augment) cfg.no_augment = true;
    return cfg;
}

void add_common(CLI::App* cmd, CommonOpts& opts, bool config_required = true) {
    auto* c = cmd->add_option("--config", opts.config_path, "experiment config JSON");
    if (config_required) c->required();
    cmd->add_option("--out", opts.out_dir, "output directory");
    cmd->add_option("--seed", opts.seed, "override experiment seed");
    cmd->add_option("--clean-rate", opts.clean_rate, "override clean data fraction");
    cmd->add_option("--trigger", opts.trigger_path, "external trigger directory for the defense");
    cmd->add_flag("--no-augment", opts.no_augment, "disable augmentation everywhere");
}

json values_from_csv(const std::string& csv) {
    json arr = json::array();
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t pos = 0;
            const double d = std::stod(item, &pos);
            if (pos == item.size()) {
                arr.push_back(d);
                continue;
            }
        } catch (const std::exception&) {
        }
        arr.push_back(item);
    }
    return arr;
}

void print_report(const DefenseReport& r) {
    std::cout << "asr_before=" << r.asr_before << " ba_before=" << r.ba_before
              << " asr_after=" << r.asr_after << " ba_after=" << r.ba_after
              << " trigger=" << r.trigger_provenance << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"backdoor attack / purification toolkit"};
    app.require_subcommand(1);

    // ---- pipeline ----------------------------------------------------------
    CommonOpts pipe_opts;
    auto* pipe = app.add_subcommand("pipeline", "run attack -> train -> invert -> purify -> report");
    add_common(pipe, pipe_opts);

    // ---- sweep ---------------------------------------------------------------
    CommonOpts sweep_opts;
    std::string sweep_param, sweep_values;
    auto* sweep = app.add_subcommand("sweep", "run the pipeline across one parameter axis");
    add_common(sweep, sweep_opts);
    sweep->add_option("--param", sweep_param, "dotted config path, e.g. defense.tau")->required();
    sweep->add_option("--values", sweep_values, "comma-separated values")->required();

    // ---- make-dataset ----------------------------------------------------------
    std::string mk_out;
    SyntheticSpec mk_spec;
    int mk_test_per_class = 100;
    auto* mk = app.add_subcommand("make-dataset", "generate a synthetic train/test dataset pair");
    mk->add_option("--out", mk_out, "output dataset root")->required();
    mk->add_option("--classes", mk_spec.num_classes, "class count");
    mk->add_option("--per-class", mk_spec.per_class, "train samples per class");
    mk->add_option("--test-per-class", mk_test_per_class, "test samples per class");
    mk->add_option("--size", mk_spec.height, "image height/width");
    mk->add_option("--channels", mk_spec.channels, "image channels");
    mk->add_option("--noise", mk_spec.noise, "per-pixel Gaussian noise sigma");
    mk->add_option("--jitter", mk_spec.brightness_jitter, "per-sample brightness jitter");
    mk->add_flag("--high-contrast", mk_spec.high_contrast, "two-level base patterns");
    mk->add_option("--seed", mk_spec.seed, "generator seed");

    // ---- poison -------------------------------------------------------------
    CommonOpts poison_opts;
    std::string poison_data;
    auto* poison = app.add_subcommand("poison", "poison the train split of a dataset");
    add_common(poison, poison_opts);
    poison->add_option("--data", poison_data, "dataset root (train/ + test/)")->required();

    // ---- train ---------------------------------------------------------------
    CommonOpts train_opts;
    std::string train_data;
    auto* train = app.add_subcommand("train", "train a classifier on a dataset directory");
    add_common(train, train_opts);
    train->add_option("--data", train_data, "dataset directory (single split)")->required();

    // ---- invert ----------------------------------------------------------------
    CommonOpts inv_opts;
    std::string inv_model, inv_data;
    auto* invert = app.add_subcommand("invert", "recover a trigger from a model and clean data");
    add_common(invert, inv_opts);
    invert->add_option("--model", inv_model, "checkpoint directory")->required();
    invert->add_option("--data", inv_data, "clean dataset directory")->required();

    // ---- purify / purify-plus ----------------------------------------------------
    CommonOpts pur_opts, purp_opts;
    std::string pur_model, pur_data, pur_trigger;
    auto* purify_cmd = app.add_subcommand("purify", "contrastive purification (stage 2)");
    add_common(purify_cmd, pur_opts);
    purify_cmd->add_option("--model", pur_model, "backdoored checkpoint")->required();
    purify_cmd->add_option("--data", pur_data, "clean subset directory")->required();
    purify_cmd->add_option("--trigger-dir", pur_trigger, "trigger directory")->required();

    std::string purp_model, purp_data, purp_trigger;
    auto* purify_plus_cmd =
        app.add_subcommand("purify-plus", "purification with positive-pair correction (stages 2+3)");
    add_common(purify_plus_cmd, purp_opts);
    purify_plus_cmd->add_option("--model", purp_model, "backdoored checkpoint")->required();
    purify_plus_cmd->add_option("--data", purp_data, "clean subset directory")->required();
    purify_plus_cmd->add_option("--trigger-dir", purp_trigger, "trigger directory")->required();

    // ---- eval ---------------------------------------------------------------------
    std::string eval_model, eval_data, eval_trigger, eval_out;
    int eval_target = -1;
    auto* eval_cmd = app.add_subcommand("eval", "evaluate benign accuracy and attack success rate");
    eval_cmd->add_option("--model", eval_model, "checkpoint directory")->required();
    eval_cmd->add_option("--data", eval_data, "clean test dataset directory")->required();
    eval_cmd->add_option("--trigger-dir", eval_trigger, "trigger directory (enables ASR)");
    eval_cmd->add_option("--target", eval_target, "target label for ASR");
    eval_cmd->add_option("--out", eval_out, "optional JSON output path");

    // ---- export-features -----------------------------------------------------------
    std::string feat_model, feat_data, feat_out;
    double feat_fraction = 0.2;
    auto* feat = app.add_subcommand("export-features", "dump extractor features to CSV");
    feat->add_option("--model", feat_model, "checkpoint directory")->required();
    feat->add_option("--data", feat_data, "dataset directory (carries poisoned flags)")->required();
    feat->add_option("--out", feat_out, "CSV output path")->required();
    feat->add_option("--clean-fraction", feat_fraction, "per-class clean fraction to include");

    CLI11_PARSE(app, argc, argv);

    try {
        if (pipe->parsed()) {
            print_report(run_pipeline(load_config(pipe_opts)));
        } else if (sweep->parsed()) {
            SweepAxis axis{sweep_param, values_from_csv(sweep_values)};
            const auto reports = run_sweep(load_config(sweep_opts), axis);
            for (std::size_t i = 0; i < reports.size(); ++i) {
                std::cout << sweep_param << "=" << axis.values[i].dump() << " ";
                print_report(reports[i]);
            }
        } else if (mk->parsed()) {
            // One pool with shared class bases, split per class into train/test.
            SyntheticSpec pool_spec = mk_spec;
            pool_spec.width = pool_spec.height;
            pool_spec.per_class = mk_spec.per_class + mk_test_per_class;
            const Dataset all = make_synthetic_dataset(pool_spec);
            Dataset train_ds, test_ds;
            for (Dataset* d : {&train_ds, &test_ds}) {
                d->num_classes = all.num_classes;
                d->provenance = Provenance::clean;
                d->seed = all.seed;
            }
            train_ds.name = all.name + "-train";
            test_ds.name = all.name + "-test";
            for (int k = 0; k < all.num_classes; ++k) {
                std::size_t seen = 0;
                for (const auto& s : all.samples) {
                    if (s.label != k) continue;
                    (seen < static_cast<std::size_t>(mk_spec.per_class) ? train_ds : test_ds)
                        .samples.push_back(s);
                    ++seen;
                }
            }
            train_ds.init_bookkeeping();
            test_ds.init_bookkeeping();
            save_dataset(fs::path(mk_out) / "train", train_ds);
            save_dataset(fs::path(mk_out) / "test", test_ds);
            std::cout << "wrote " << train_ds.size() << " train / " << test_ds.size()
                      << " test samples to " << mk_out << "\n";
        } else if (poison->parsed()) {
            ExperimentConfig cfg = resolve_experiment(load_config(poison_opts));
            const Dataset train_ds = load_dataset(fs::path(poison_data) / "train");
            AttackConfig atk = cfg.attack;
            ensure_trigger(atk, train_ds.channels(), train_ds.height(), train_ds.width());
            SplitModel ref;
            SplitModel* ref_ptr = nullptr;
            if (atk.kind == AttackKind::cl) {
                ref = build_model(cfg.arch,
                                  {train_ds.channels(), train_ds.height(), train_ds.width()},
                                  train_ds.num_classes, mix_seed(cfg.seed, 0x7e0));
                train_supervised(ref, train_ds, cfg.train);
                ref_ptr = &ref;
            }
            const Dataset poisoned =
                poison_dataset(train_ds, atk, mix_seed(cfg.seed, 0x201), ref_ptr);
            const fs::path out = cfg.output_dir;
            save_dataset(out / "dataset", poisoned);
            save_trigger(out / "trigger", atk.trigger, json{{"kind", to_string(atk.kind)}});
            write_json_file(out / "config.resolved.json", to_json(cfg));
            std::cout << "poisoned " << poisoned.size() << " -> " << out << "\n";
        } else if (train->parsed()) {
            ExperimentConfig cfg = resolve_experiment(load_config(train_opts));
            const Dataset ds = load_dataset(train_data);
            SplitModel m = build_model(cfg.arch, {ds.channels(), ds.height(), ds.width()},
                                       ds.num_classes, mix_seed(cfg.seed, 0x7e1));
            const auto trace = train_supervised(m, ds, cfg.train);
            const fs::path out = cfg.output_dir;
            save_checkpoint(out / "checkpoint", m,
                            json{{"config_hash", hex64(fnv1a(to_json(cfg.train).dump()))}});
            write_json_file(out / "train_log.json", epoch_metrics_json(trace));
            write_json_file(out / "config.resolved.json", to_json(cfg));
            std::cout << "trained " << cfg.arch << " for " << cfg.train.epochs << " epochs -> "
                      << out << "\n";
        } else if (invert->parsed()) {
            ExperimentConfig cfg = resolve_experiment(load_config(inv_opts));
            SplitModel m = load_checkpoint(fs::path(inv_model) / "checkpoint");
            const Dataset clean = load_dataset(inv_data);
            const InversionResult res = invert_trigger(m, clean, cfg.inversion);
            const fs::path out = cfg.output_dir;
            save_inversion_result(
                out, res, json{{"config_hash", hex64(fnv1a(to_json(cfg.inversion).dump()))}});
            write_json_file(out / "config.resolved.json", to_json(cfg));
            std::cout << "inverted trigger: objective=" << res.final_objective
                      << " mask_l1=" << res.mask_l1 << " -> " << out << "\n";
        } else if (purify_cmd->parsed() || purify_plus_cmd->parsed()) {
            const bool plus = purify_plus_cmd->parsed();
            ExperimentConfig cfg =
                resolve_experiment(load_config(plus ? purp_opts : pur_opts));
            if (plus) cfg.defense.stage3_enabled = true;
            SplitModel backdoored =
                load_checkpoint(fs::path(plus ? purp_model : pur_model) / "checkpoint");
            const Dataset clean = load_dataset(plus ? purp_data : pur_data);
            const TriggerSpec trig = load_trigger(plus ? purp_trigger : pur_trigger);
            const PurifyResult res = plus ? purify_plus(backdoored, clean, trig, cfg.defense)
                                          : purify(backdoored, clean, trig, cfg.defense);
            SplitModel purified = res.model;
            const fs::path out = cfg.output_dir;
            save_checkpoint(out / "checkpoint", purified,
                            json{{"config_hash", hex64(fnv1a(to_json(cfg.defense).dump()))}});
            write_json_file(out / "defense_log.json", defense_metrics_json(res.log));
            write_json_file(out / "config.resolved.json", to_json(cfg));
            std::cout << (plus ? "purify-plus" : "purify") << " done -> " << out << "\n";
        } else if (eval_cmd->parsed()) {
            SplitModel m = load_checkpoint(fs::path(eval_model) / "checkpoint");
            const Dataset test = load_dataset(eval_data);
            json out = json::object();
            out["ba"] = eval_ba(m, test);
            if (!eval_trigger.empty()) {
                if (eval_target < 0) {
                    throw std::invalid_argument("eval: --target required with --trigger-dir");
                }
                out["asr"] = eval_asr(m, test, load_trigger(eval_trigger), eval_target);
            }
            std::cout << out.dump(2) << "\n";
            if (!eval_out.empty()) write_json_file(eval_out, out);
        } else if (feat->parsed()) {
            SplitModel m = load_checkpoint(fs::path(feat_model) / "checkpoint");
            const Dataset ds = load_dataset(feat_data);
            const FeatureDump dump = extract_features(m, ds, feat_fraction);
            write_feature_csv(feat_out, dump);
            std::cout << "wrote " << dump.rows() << " feature rows -> " << feat_out << "\n";
        }
    } catch (const StageError& e) {
        std::cerr << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "[stage:cli] " << e.what() << "\n";
        return 1;
    }
    return 0;
}
