#include <catch2/catch.hpp>

#include <set>

#include "bdtk/config.hpp"
#include "bdtk/pipeline.hpp"

using namespace bdtk;

namespace {

fs::path fresh_dir(const std::string& tag) {
    const fs::path p = fs::temp_directory_path() / ("bdtk_pipe_" + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

// Minimal dataset root with train/ and test/ splits.
void write_toy_root(const fs::path& root, std::uint64_t seed = 7) {
    SyntheticSpec spec;
    spec.num_classes = 4;
    spec.per_class = 30;
    spec.height = spec.width = 8;
    spec.seed = seed;
    Dataset all = make_synthetic_dataset(spec);
    Dataset train, test;
    for (Dataset* d : {&train, &test}) {
        d->num_classes = 4;
        d->provenance = Provenance::clean;
        d->seed = seed;
    }
    train.name = "micro-train";
    test.name = "micro-test";
    for (int k = 0; k < 4; ++k) {
        std::size_t seen = 0;
        for (const auto& s : all.samples) {
            if (s.label != k) continue;
            (seen < 20 ? train : test).samples.push_back(s);
            ++seen;
        }
    }
    train.init_bookkeeping();
    test.init_bookkeeping();
    save_dataset(root / "train", train);
    save_dataset(root / "test", test);
}

ExperimentConfig micro_config(const fs::path& root, const fs::path& out) {
    ExperimentConfig cfg;
    cfg.dataset = root.string();
    cfg.arch = "toy_mlp";
    cfg.output_dir = out.string();
    cfg.seed = 3;
    cfg.clean_rate = 0.25;
    cfg.attack.kind = AttackKind::badnets;
    cfg.attack.poison_rate = 0.15;
    cfg.attack.target_label = 1;
    cfg.train.epochs = 3;
    cfg.train.batch_size = 16;
    cfg.train.optimizer.lr = 0.05;
    cfg.train.lr_milestones = {};
    cfg.train.augmentation = {};
    cfg.inversion.epochs = 3;
    cfg.inversion.batch_size = 16;
    cfg.defense.epochs = 1;
    cfg.defense.batch_size = 16;
    cfg.defense.optimizer.lr = 0.001;
    cfg.defense.lr_milestones = {};
    cfg.defense.augmentation = {};
    cfg.feature_export_fraction = 0.2;
    return cfg;
}

}  // namespace

TEST_CASE("experiment config JSON round trips with defaults materialized") {
    ExperimentConfig cfg;
    cfg.dataset = "somewhere";
    cfg.attack.kind = AttackKind::sig;
    cfg.defense.tau = 0.25;
    const json j = to_json(cfg);
    const ExperimentConfig back = experiment_from_json(j);
    REQUIRE(back.dataset == "somewhere");
    REQUIRE(back.attack.kind == AttackKind::sig);
    REQUIRE(back.defense.tau == 0.25);
    REQUIRE(to_json(back) == j);

    // Partial JSON keeps defaults for absent keys.
    const ExperimentConfig partial =
        experiment_from_json(json{{"defense", {{"tau", 0.9}}}});
    REQUIRE(partial.defense.tau == 0.9);
    REQUIRE(partial.defense.epochs == 20);
    REQUIRE(partial.train.optimizer.momentum == 0.9);
    REQUIRE(partial.attack.poison_rate == 0.10);
}

TEST_CASE("resolve_experiment pins derived seeds and the no-augment switch") {
    ExperimentConfig cfg;
    cfg.seed = 42;
    cfg.no_augment = true;
    cfg.defense.augmentation.random_crop = true;
    cfg.defense.augmentation.random_hflip = true;
    const ExperimentConfig r = resolve_experiment(cfg);
    REQUIRE(r.train.seed != 0);
    REQUIRE(r.inversion.seed != 0);
    REQUIRE(r.defense.seed != 0);
    REQUIRE_FALSE(r.defense.augmentation.random_crop);
    REQUIRE_FALSE(r.defense.augmentation.random_hflip);
    REQUIRE(r.inversion.target_label == r.attack.target_label);

    // Resolving twice is stable.
    const ExperimentConfig r2 = resolve_experiment(r);
    REQUIRE(to_json(r2) == to_json(r));
}

TEST_CASE("pipeline runs end to end, persists artifacts, and reuses the cache") {
    const fs::path root = fresh_dir("root");
    const fs::path out = fresh_dir("out");
    write_toy_root(root);
    ExperimentConfig cfg = micro_config(root, out);

    const DefenseReport rep = run_pipeline(cfg);
    rep.validate();
    REQUIRE(rep.trigger_provenance == "inverted");

    REQUIRE(fs::exists(out / "config.resolved.json"));
    REQUIRE(fs::exists(out / "report.json"));
    REQUIRE(fs::exists(out / "metrics.tsv"));
    REQUIRE(fs::exists(out / "features_before.csv"));
    REQUIRE(fs::exists(out / "features_after.csv"));

    // Every cache stage carries its stage.json with the resolved slice.
    std::set<std::string> stages;
    for (const auto& e : fs::directory_iterator(out / "cache")) {
        REQUIRE(fs::exists(e.path() / "stage.json"));
        const json s = read_json_file(e.path() / "stage.json");
        REQUIRE(s.contains("config"));
        stages.insert(s.at("stage").get<std::string>());
        // Checkpoints and inversion results record the config hash that
        // produced them.
        if (fs::exists(e.path() / "checkpoint")) {
            const json m = read_json_file(e.path() / "checkpoint" / "manifest.json");
            REQUIRE(m.contains("config_hash"));
        }
        if (fs::exists(e.path() / "result.json")) {
            const json r = read_json_file(e.path() / "result.json");
            REQUIRE(r.contains("config_hash"));
        }
    }
    REQUIRE(stages == std::set<std::string>{"poison", "train", "subset", "invert", "purify"});

    // A second run reproduces the report from cache (identical output).
    auto mtime = fs::last_write_time(out / "cache");
    const DefenseReport rep2 = run_pipeline(cfg);
    REQUIRE(rep2.asr_before == rep.asr_before);
    REQUIRE(rep2.asr_after == rep.asr_after);
    REQUIRE(rep2.ba_before == rep.ba_before);
    REQUIRE(rep2.ba_after == rep.ba_after);
    (void)mtime;

    // No new cache entries appeared.
    std::size_t entries = 0;
    for (const auto& e : fs::directory_iterator(out / "cache")) {
        (void)e;
        ++entries;
    }
    REQUIRE(entries == 5);
}

TEST_CASE("no-op defense with ground-truth trigger keeps the report symmetric") {
    const fs::path root = fresh_dir("root2");
    const fs::path out = fresh_dir("out2");
    write_toy_root(root, 9);
    ExperimentConfig cfg = micro_config(root, out);
    cfg.defense_trigger = "ground_truth";
    cfg.defense.epochs = 0;

    const DefenseReport rep = run_pipeline(cfg);
    REQUIRE(rep.trigger_provenance == "ground_truth");
    REQUIRE(rep.asr_after == rep.asr_before);
    REQUIRE(rep.ba_after == rep.ba_before);
}

TEST_CASE("external trigger file is honored and tagged") {
    const fs::path root = fresh_dir("root3");
    const fs::path out = fresh_dir("out3");
    write_toy_root(root, 10);

    const fs::path trig_dir = fresh_dir("trig");
    save_trigger(trig_dir, make_grid_trigger(3, 8, 8, {}), json{{"kind", "external"}});

    ExperimentConfig cfg = micro_config(root, out);
    cfg.defense_trigger = trig_dir.string();
    const DefenseReport rep = run_pipeline(cfg);
    REQUIRE(rep.trigger_provenance == "external");
}

TEST_CASE("sweep: empty values, unresolvable path, and cache sharing") {
    const fs::path root = fresh_dir("root4");
    const fs::path out = fresh_dir("out4");
    write_toy_root(root, 11);
    ExperimentConfig cfg = micro_config(root, out);

    REQUIRE(run_sweep(cfg, {"defense.tau", json::array()}).empty());
    REQUIRE_THROWS_AS(run_sweep(cfg, {"defense.nonsense", json::array({1.0})}),
                      std::invalid_argument);

    const auto reports = run_sweep(cfg, {"defense.tau", json::array({0.5, 1.0})});
    REQUIRE(reports.size() == 2);
    // tau only affects the purify stage: exactly one poison/train/subset/invert
    // stage each, two purify stages.
    std::map<std::string, int> counts;
    for (const auto& e : fs::directory_iterator(out / "cache")) {
        const json s = read_json_file(e.path() / "stage.json");
        counts[s.at("stage").get<std::string>()]++;
    }
    REQUIRE(counts["train"] == 1);
    REQUIRE(counts["poison"] == 1);
    REQUIRE(counts["subset"] == 1);
    REQUIRE(counts["invert"] == 1);
    REQUIRE(counts["purify"] == 2);
    // Both sweep points share identical before-metrics (same checkpoint).
    REQUIRE(reports[0].asr_before == reports[1].asr_before);
    REQUIRE(reports[0].ba_before == reports[1].ba_before);
}

TEST_CASE("stage errors carry the stage tag") {
    ExperimentConfig cfg;
    cfg.dataset = "/nonexistent/dataset/root";
    cfg.output_dir = (fs::temp_directory_path() / "bdtk_pipe_err").string();
    try {
        run_pipeline(cfg);
        FAIL("expected StageError");
    } catch (const StageError& e) {
        REQUIRE(e.stage() == "load-dataset");
        REQUIRE(std::string(e.what()).find("[stage:load-dataset]") == 0);
    }
}
