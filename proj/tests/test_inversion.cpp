#include <catch2/catch.hpp>

#include <algorithm>
#include <cmath>

#include "bdtk/dataset.hpp"
#include "bdtk/evaluation.hpp"
#include "bdtk/inversion.hpp"
#include "bdtk/model.hpp"

using namespace bdtk;

namespace {

Dataset uniform_images(int n, std::size_t c, std::size_t hw, int label, std::uint64_t seed) {
    Rng rng(seed);
    Dataset d;
    d.num_classes = 4;
    d.name = "uniform";
    for (int i = 0; i < n; ++i) {
        Sample s;
        s.image = Tensor({c, hw, hw});
        for (double& v : s.image.raw()) v = rng.uniform(0.0, 0.85);
        s.label = label;
        d.samples.push_back(std::move(s));
    }
    d.init_bookkeeping();
    return d;
}

// Classifier that outputs the target class iff the bottom-right pixel of
// channel 0 exceeds 0.9: features are (1, x_p); the head turns them into
// logit 100*x_p - 90 for the target and 0 for everyone else.
SplitModel decision_rule_model(std::size_t c, std::size_t hw, int num_classes, int target) {
    Rng rng(1);
    SplitModel m;
    m.arch_id = "decision_rule";
    m.input_shape = {c, hw, hw};
    m.num_classes = num_classes;
    m.feature_dim = 2;

    const std::size_t n = c * hw * hw;
    const std::size_t pixel = (hw - 1) * hw + (hw - 1);  // channel 0, bottom-right

    auto* fc = m.extractor.emplace<Dense>("fc", n, 2, rng);
    fc->visit_params("", [&](const ParamRef& p) {
        std::fill(p.value, p.value + p.count, 0.0);
        if (p.name == "fc.weight") {
            p.value[1 * n + pixel] = 1.0;  // feature 1 reads the pixel
        } else {
            p.value[0] = 1.0;  // feature 0 is the constant 1
        }
    });
    auto* head = m.head.emplace<Dense>("out", 2, static_cast<std::size_t>(num_classes), rng);
    head->visit_params("", [&](const ParamRef& p) {
        std::fill(p.value, p.value + p.count, 0.0);
        if (p.name == "out.weight") {
            p.value[static_cast<std::size_t>(target) * 2 + 0] = -90.0;
            p.value[static_cast<std::size_t>(target) * 2 + 1] = 100.0;
        }
    });
    return m;
}

}  // namespace

TEST_CASE("inversion objective gradient matches central differences on a 4x4 instance") {
    SplitModel m = build_model("toy_mlp", {2, 4, 4}, 3, 5);
    Dataset d = uniform_images(6, 2, 4, 0, 2);
    TriggerInversionProblem problem(m, 1, 0.01);

    std::vector<double> theta = TriggerInversionProblem::initial_theta(m.input_shape);
    Rng rng(3);
    for (double& t : theta) t += rng.uniform(-0.5, 0.5);

    std::vector<std::size_t> idx(d.size());
    std::iota(idx.begin(), idx.end(), 0);
    const Mat batch = batch_from_dataset(d, idx);

    std::vector<double> grad(theta.size());
    problem.objective_and_gradient(batch, theta, grad);

    const double h = 1e-5;
    double worst = 0.0;
    for (std::size_t k = 0; k < theta.size(); ++k) {
        std::vector<double> tp = theta, tm = theta;
        tp[k] += h;
        tm[k] -= h;
        const double fd =
            (problem.objective(batch, tp) - problem.objective(batch, tm)) / (2 * h);
        worst = std::max(worst, std::abs(fd - grad[k]) /
                                    std::max({1.0, std::abs(fd), std::abs(grad[k])}));
    }
    REQUIRE(worst < 1e-3);  // the pinned tolerance; double precision sits far below
    REQUIRE(worst < 1e-7);
}

TEST_CASE("a dominating regularizer drives the recovered mask to zero") {
    SplitModel m = build_model("toy_mlp", {2, 4, 4}, 3, 6);
    Dataset d = uniform_images(8, 2, 4, 0, 3);
    InversionConfig cfg;
    cfg.target_label = 1;
    cfg.lambda_reg = 50.0;
    cfg.epochs = 60;
    cfg.batch_size = 8;
    cfg.lr = 0.05;
    const InversionResult res = invert_trigger(m, d, cfg);
    REQUIRE(res.mask_l1 < 0.1);
}

TEST_CASE("inversion recovers a single-pixel decision rule and its trigger transfers") {
    const int target = 2;
    SplitModel m = decision_rule_model(2, 6, 4, target);
    Dataset clean = uniform_images(24, 2, 6, 0, 4);

    InversionConfig cfg;
    cfg.target_label = target;
    cfg.lambda_reg = 0.05;
    cfg.epochs = 250;
    cfg.batch_size = 8;
    cfg.lr = 0.05;
    cfg.seed = 5;
    const InversionResult res = invert_trigger(m, clean, cfg);

    // Mask mass concentrates on the decisive pixel.
    const auto& mask = res.trigger.mask;
    std::size_t best = 0;
    for (std::size_t i = 1; i < mask.numel(); ++i) {
        if (mask[i] > mask[best]) best = i;
    }
    REQUIRE(best == 5 * 6 + 5);

    // Stamping the recovered trigger flips held-out samples to the target.
    Dataset held_out = uniform_images(50, 2, 6, 0, 9);
    const double asr = eval_asr(m, held_out, res.trigger, target);
    REQUIRE(asr >= 90.0);
}

TEST_CASE("final objective is the best across the trace") {
    SplitModel m = build_model("toy_mlp", {1, 4, 4}, 3, 8);
    Dataset d = uniform_images(8, 1, 4, 0, 6);
    InversionConfig cfg;
    cfg.target_label = 1;
    cfg.lambda_reg = 0.01;
    cfg.epochs = 20;
    cfg.batch_size = 4;
    cfg.lr = 0.02;
    const InversionResult res = invert_trigger(m, d, cfg);
    REQUIRE(res.loss_trace.size() == 20);
    for (double v : res.loss_trace) {
        REQUIRE(res.final_objective <= v + 1e-12);
    }
    REQUIRE(res.mask_l1 == Approx(res.trigger.mask_l1()));
    res.trigger.validate();
}

TEST_CASE("inversion input contract violations are rejected") {
    SplitModel m = build_model("toy_mlp", {1, 4, 4}, 3, 9);
    InversionConfig cfg;
    cfg.target_label = 0;

    Dataset empty;
    empty.num_classes = 3;
    REQUIRE_THROWS_AS(invert_trigger(m, empty, cfg), std::invalid_argument);

    Dataset mixed = uniform_images(4, 1, 4, 0, 7);
    mixed.provenance = Provenance::mixed;
    REQUIRE_THROWS_AS(invert_trigger(m, mixed, cfg), std::invalid_argument);

    InversionConfig bad = cfg;
    bad.lambda_reg = -1.0;
    Dataset d = uniform_images(4, 1, 4, 0, 7);
    REQUIRE_THROWS_AS(invert_trigger(m, d, bad), std::invalid_argument);

    InversionConfig bad_target = cfg;
    bad_target.target_label = 99;
    REQUIRE_THROWS_AS(invert_trigger(m, d, bad_target), std::invalid_argument);
}

TEST_CASE("inversion result directory round trips") {
    const fs::path dir = fs::temp_directory_path() / "bdtk_test_invres";
    fs::remove_all(dir);
    SplitModel m = build_model("toy_mlp", {1, 4, 4}, 3, 10);
    Dataset d = uniform_images(6, 1, 4, 0, 8);
    InversionConfig cfg;
    cfg.target_label = 1;
    cfg.epochs = 3;
    cfg.batch_size = 4;
    const InversionResult res = invert_trigger(m, d, cfg);
    save_inversion_result(dir, res);
    const InversionResult back = load_inversion_result(dir);
    REQUIRE(back.final_objective == Approx(res.final_objective));
    REQUIRE(back.mask_l1 == Approx(res.mask_l1));
    REQUIRE(back.loss_trace == res.loss_trace);
    REQUIRE(back.trigger.mask.shape() == res.trigger.mask.shape());
}
