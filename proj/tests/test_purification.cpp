#include <catch2/catch.hpp>

#include <cmath>

#include "bdtk/dataset.hpp"
#include "bdtk/model.hpp"
#include "bdtk/purification.hpp"
#include "bdtk/trigger.hpp"

using namespace bdtk;

namespace {

PairBatch batch_from_rows(const std::vector<Eigen::RowVectorXd>& z,
                          const std::vector<Eigen::RowVectorXd>& z_cle,
                          const std::vector<Eigen::RowVectorXd>& z_poi) {
    PairBatch pb;
    const auto rows = static_cast<Eigen::Index>(z.size());
    const auto cols = z.front().size();
    pb.z.resize(rows, cols);
    pb.z_cle.resize(rows, cols);
    pb.z_poi.resize(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
        pb.z.row(i) = z[static_cast<std::size_t>(i)];
        pb.z_cle.row(i) = z_cle[static_cast<std::size_t>(i)];
        pb.z_poi.row(i) = z_poi[static_cast<std::size_t>(i)];
    }
    return pb;
}

Eigen::RowVectorXd unit(std::initializer_list<double> v) {
    Eigen::RowVectorXd out(static_cast<Eigen::Index>(v.size()));
    Eigen::Index i = 0;
    for (double x : v) out(i++) = x;
    return out;
}

Dataset tiny_data(std::uint64_t seed, int n = 12, std::size_t hw = 8) {
    SyntheticSpec spec;
    spec.num_classes = 3;
    spec.per_class = n / 3;
    spec.height = spec.width = hw;
    spec.seed = seed;
    return make_synthetic_dataset(spec);
}

}  // namespace

TEST_CASE("contrastive loss equals ln 2 per sample under sim symmetry") {
    // z_cle == z_poi makes both similarities equal regardless of z.
    const auto e1 = unit({1.0, 0.0, 0.0});
    const auto mix = unit({0.6, 0.8, 0.0});
    PairBatch pb = batch_from_rows({e1, mix, unit({0.0, 0.0, 2.0})},
                                   {mix, e1, unit({1.0, 1.0, 1.0})},
                                   {mix, e1, unit({1.0, 1.0, 1.0})});
    const double loss = contrastive_loss(pb, 0.5);
    REQUIRE(loss == Approx(3.0 * std::log(2.0)).margin(1e-6));
}

TEST_CASE("contrastive loss matches the closed forms for unit cosines at tau 0.5") {
    // cos(z, z_cle) = 1, cos(z, z_poi) = 0  ->  ln(1 + e^-2)
    {
        PairBatch pb = batch_from_rows({unit({2.0, 0.0})}, {unit({0.5, 0.0})},
                                       {unit({0.0, 3.0})});
        REQUIRE(contrastive_loss(pb, 0.5) ==
                Approx(std::log(1.0 + std::exp(-2.0))).margin(1e-6));
        REQUIRE(contrastive_loss(pb, 0.5) == Approx(0.126928).margin(1e-6));
    }
    // cos(z, z_cle) = 0, cos(z, z_poi) = 1  ->  ln(1 + e^2)
    {
        PairBatch pb = batch_from_rows({unit({2.0, 0.0})}, {unit({0.0, 3.0})},
                                       {unit({0.5, 0.0})});
        REQUIRE(contrastive_loss(pb, 0.5) ==
                Approx(std::log(1.0 + std::exp(2.0))).margin(1e-6));
        REQUIRE(contrastive_loss(pb, 0.5) == Approx(2.126928).margin(1e-6));
    }
}

TEST_CASE("contrastive loss sums over the batch and records the mean") {
    Rng rng(3);
    std::vector<Eigen::RowVectorXd> z, zc, zp;
    for (int i = 0; i < 5; ++i) {
        Eigen::RowVectorXd a(4), b(4), c(4);
        for (int j = 0; j < 4; ++j) {
            a(j) = rng.uniform(-1, 1);
            b(j) = rng.uniform(-1, 1);
            c(j) = rng.uniform(-1, 1);
        }
        z.push_back(a);
        zc.push_back(b);
        zp.push_back(c);
    }
    PairBatch pb = batch_from_rows(z, zc, zp);
    const ContrastiveValue v = contrastive_loss_full(pb, 0.5);
    double manual = 0.0;
    for (int i = 0; i < 5; ++i) {
        PairBatch one = batch_from_rows({z[static_cast<std::size_t>(i)]},
                                        {zc[static_cast<std::size_t>(i)]},
                                        {zp[static_cast<std::size_t>(i)]});
        manual += contrastive_loss(one, 0.5);
    }
    REQUIRE(v.sum == Approx(manual).epsilon(1e-12));
    REQUIRE(v.mean == Approx(manual / 5.0).epsilon(1e-12));
}

TEST_CASE("contrastive gradient matches central differences on 8-dim batches") {
    Rng rng(7);
    std::vector<Eigen::RowVectorXd> z, zc, zp;
    for (int i = 0; i < 6; ++i) {
        Eigen::RowVectorXd a(8), b(8), c(8);
        for (int j = 0; j < 8; ++j) {
            a(j) = rng.uniform(-1, 1);
            b(j) = rng.uniform(-1, 1);
            c(j) = rng.uniform(-1, 1);
        }
        z.push_back(a);
        zc.push_back(b);
        zp.push_back(c);
    }
    PairBatch pb = batch_from_rows(z, zc, zp);

    for (double tau : {0.5, 1.0}) {
        Mat grad;
        contrastive_loss_full(pb, tau, &grad);
        const double h = 1e-6;
        double worst = 0.0;
        for (Eigen::Index i = 0; i < pb.z.rows(); ++i) {
            for (Eigen::Index j = 0; j < pb.z.cols(); ++j) {
                PairBatch p = pb, m = pb;
                p.z(i, j) += h;
                m.z(i, j) -= h;
                const double fd = (contrastive_loss(p, tau) - contrastive_loss(m, tau)) / (2 * h);
                worst = std::max(worst, std::abs(fd - grad(i, j)) /
                                            std::max({1.0, std::abs(fd), std::abs(grad(i, j))}));
            }
        }
        REQUIRE(worst < 1e-4);  // pinned tolerance
        REQUIRE(worst < 1e-7);
    }

    // Corrective loss gradient too.
    Mat grad;
    corrective_loss_full(pb, &grad);
    const double h = 1e-6;
    for (Eigen::Index i = 0; i < pb.z.rows(); ++i) {
        for (Eigen::Index j = 0; j < pb.z.cols(); ++j) {
            PairBatch p = pb, m = pb;
            p.z(i, j) += h;
            m.z(i, j) -= h;
            const double fd = (corrective_loss(p) - corrective_loss(m)) / (2 * h);
            REQUIRE(grad(i, j) == Approx(fd).margin(1e-7));
        }
    }
}

TEST_CASE("contrastive loss is invariant to positive rescaling of any vector") {
    Rng rng(11);
    Eigen::RowVectorXd a(5), b(5), c(5);
    for (int j = 0; j < 5; ++j) {
        a(j) = rng.uniform(-1, 1);
        b(j) = rng.uniform(-1, 1);
        c(j) = rng.uniform(-1, 1);
    }
    PairBatch pb = batch_from_rows({a}, {b}, {c});
    const double base = contrastive_loss(pb, 0.5);
    for (double scale : {0.25, 3.0, 117.0}) {
        PairBatch s1 = pb, s2 = pb, s3 = pb;
        s1.z *= scale;
        s2.z_cle *= scale;
        s3.z_poi *= scale;
        REQUIRE(contrastive_loss(s1, 0.5) == Approx(base).margin(1e-6));
        REQUIRE(contrastive_loss(s2, 0.5) == Approx(base).margin(1e-6));
        REQUIRE(contrastive_loss(s3, 0.5) == Approx(base).margin(1e-6));
    }
}

TEST_CASE("zero-norm features raise a numerical failure naming the sample") {
    PairBatch pb = batch_from_rows({unit({1.0, 0.0}), unit({0.0, 0.0})},
                                   {unit({1.0, 0.0}), unit({1.0, 0.0})},
                                   {unit({0.0, 1.0}), unit({0.0, 1.0})});
    REQUIRE_THROWS_WITH(contrastive_loss(pb, 0.5), Catch::Contains("sample 1"));
    REQUIRE_THROWS_AS(contrastive_loss(pb, 0.5), NumericalError);
}

TEST_CASE("tau must be positive") {
    PairBatch pb = batch_from_rows({unit({1.0, 0.0})}, {unit({1.0, 0.0})}, {unit({0.0, 1.0})});
    REQUIRE_THROWS_AS(contrastive_loss(pb, 0.0), std::invalid_argument);
    REQUIRE_THROWS_AS(contrastive_loss(pb, -0.5), std::invalid_argument);
}

TEST_CASE("corrective loss hits -B, 0, +B on identical, orthogonal, antipodal batches") {
    const auto e1 = unit({1.0, 0.0});
    const auto e2 = unit({0.0, 1.0});
    {
        PairBatch pb = batch_from_rows({e1, e2, e1}, {2.0 * e1, 0.5 * e2, e1}, {e2, e1, e2});
        REQUIRE(corrective_loss(pb) == Approx(-3.0).margin(1e-9));
    }
    {
        PairBatch pb = batch_from_rows({e1, e2}, {e2, e1}, {e1, e1});
        REQUIRE(corrective_loss(pb) == Approx(0.0).margin(1e-9));
    }
    {
        PairBatch pb = batch_from_rows({e1, e2}, {-e1, -e2}, {e1, e1});
        REQUIRE(corrective_loss(pb) == Approx(2.0).margin(1e-9));
    }
}

TEST_CASE("pair identities at epoch zero and with a zero mask are exact") {
    Dataset d = tiny_data(21);
    SplitModel model = build_model("toy_cnn", {3, 8, 8}, 3, 17);
    SplitModel purified = model.clone();
    SplitModel frozen = model.clone();

    TriggerSpec trig = make_grid_trigger(3, 8, 8, {3, TriggerPosition::bottom_right});
    AugmentationPolicy none;
    Rng rng(5);
    std::vector<std::size_t> idx = {0, 1, 2, 3, 4};

    // purified == frozen (epoch 0): z equals z_poi elementwise.
    {
        PairBatch pb =
            build_pair_batch(purified, frozen, d, idx, trig, none, rng, /*training=*/false);
        REQUIRE((pb.z - pb.z_poi).cwiseAbs().maxCoeff() == 0.0);
    }
    // zero mask: z_poi equals z_cle elementwise.
    {
        TriggerSpec zero = trig;
        zero.mask.fill(0.0);
        zero.binary = false;
        PairBatch pb =
            build_pair_batch(purified, frozen, d, idx, zero, none, rng, /*training=*/false);
        REQUIRE((pb.z_poi - pb.z_cle).cwiseAbs().maxCoeff() == 0.0);
        REQUIRE((pb.z - pb.z_poi).cwiseAbs().maxCoeff() == 0.0);
    }
}

TEST_CASE("epoch-zero loss is the closed form of the frozen pair cosines") {
    Dataset d = tiny_data(22);
    SplitModel model = build_model("toy_cnn_gap", {3, 8, 8}, 3, 18);
    SplitModel purified = model.clone();
    SplitModel frozen = model.clone();
    TriggerSpec trig = make_grid_trigger(3, 8, 8, {3, TriggerPosition::bottom_right});
    AugmentationPolicy none;
    Rng rng(6);
    std::vector<std::size_t> idx = {0, 1, 2, 3, 4, 5};
    PairBatch pb = build_pair_batch(purified, frozen, d, idx, trig, none, rng, false);

    const double tau = 0.5;
    double expected = 0.0;
    for (Eigen::Index i = 0; i < pb.size(); ++i) {
        const double c = pb.z_poi.row(i).dot(pb.z_cle.row(i)) /
                         (pb.z_poi.row(i).norm() * pb.z_cle.row(i).norm());
        expected += std::log(1.0 + std::exp((1.0 - c) / tau));
    }
    REQUIRE(contrastive_loss(pb, tau) == Approx(expected).margin(1e-6));
}

TEST_CASE("purify with zero epochs returns the model unchanged") {
    Dataset d = tiny_data(23);
    SplitModel model = build_model("toy_cnn", {3, 8, 8}, 3, 19);
    TriggerSpec trig = make_grid_trigger(3, 8, 8, {});
    DefenseConfig cfg;
    cfg.epochs = 0;
    cfg.batch_size = 4;
    cfg.augmentation = {};
    const auto before = model.parameter_snapshot();
    PurifyResult res = purify(model, d, trig, cfg);
    REQUIRE(res.model.parameter_snapshot() == before);
    REQUIRE(res.log.size() == 1);  // the epoch-0 evaluation entry
    REQUIRE(res.log[0].mean_neg_cos == Approx(1.0).margin(1e-12));
}

TEST_CASE("purify leaves the frozen reference and the head untouched") {
    Dataset d = tiny_data(24);
    SplitModel model = build_model("toy_cnn", {3, 8, 8}, 3, 20);
    TriggerSpec trig = make_grid_trigger(3, 8, 8, {});
    DefenseConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 4;
    cfg.optimizer.lr = 0.01;
    cfg.augmentation = {};

    const auto original = model.parameter_snapshot();
    PurifyResult res = purify(model, d, trig, cfg);

    // Input model is bit-identical after the run.
    REQUIRE(model.parameter_snapshot() == original);

    // The purified head matches the original head; the extractor moved.
    std::vector<double> head_orig, head_new, ext_orig, ext_new;
    model.head.visit_params("", [&](const ParamRef& p) {
        head_orig.insert(head_orig.end(), p.value, p.value + p.count);
    });
    res.model.head.visit_params("", [&](const ParamRef& p) {
        head_new.insert(head_new.end(), p.value, p.value + p.count);
    });
    model.extractor.visit_params("", [&](const ParamRef& p) {
        ext_orig.insert(ext_orig.end(), p.value, p.value + p.count);
    });
    res.model.extractor.visit_params("", [&](const ParamRef& p) {
        ext_new.insert(ext_new.end(), p.value, p.value + p.count);
    });
    REQUIRE(head_new == head_orig);
    REQUIRE(ext_new != ext_orig);
}

TEST_CASE("purify_plus with zero stage-3 epochs equals purify") {
    Dataset d = tiny_data(25);
    SplitModel model = build_model("toy_cnn", {3, 8, 8}, 3, 21);
    TriggerSpec trig = make_grid_trigger(3, 8, 8, {});
    DefenseConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 4;
    cfg.optimizer.lr = 0.005;
    cfg.augmentation = {};
    cfg.stage3_enabled = true;
    cfg.stage3_epochs = 0;

    PurifyResult a = purify(model, d, trig, cfg);
    PurifyResult b = purify_plus(model, d, trig, cfg);
    REQUIRE(a.model.parameter_snapshot() == b.model.parameter_snapshot());

    DefenseConfig no3 = cfg;
    no3.stage3_enabled = false;
    REQUIRE_THROWS_AS(purify_plus(model, d, trig, no3), std::invalid_argument);
}

TEST_CASE("build_pair_batch rejects architecture mismatch") {
    Dataset d = tiny_data(26);
    SplitModel a = build_model("toy_cnn", {3, 8, 8}, 3, 22);
    SplitModel b = build_model("toy_mlp", {3, 8, 8}, 3, 22);
    TriggerSpec trig = make_grid_trigger(3, 8, 8, {});
    AugmentationPolicy none;
    Rng rng(1);
    REQUIRE_THROWS_AS(build_pair_batch(a, b, d, {0, 1}, trig, none, rng),
                      std::invalid_argument);
}

TEST_CASE("purify validates its inputs") {
    Dataset d = tiny_data(27);
    SplitModel model = build_model("toy_cnn", {3, 8, 8}, 3, 23);
    TriggerSpec trig = make_grid_trigger(3, 8, 8, {});
    DefenseConfig cfg;
    cfg.augmentation = {};

    Dataset empty;
    empty.num_classes = 3;
    REQUIRE_THROWS_AS(purify(model, empty, trig, cfg), std::invalid_argument);

    Dataset mixed = d;
    mixed.provenance = Provenance::mixed;
    REQUIRE_THROWS_AS(purify(model, mixed, trig, cfg), std::invalid_argument);

    DefenseConfig bad_tau = cfg;
    bad_tau.tau = 0.0;
    REQUIRE_THROWS_AS(purify(model, d, trig, bad_tau), std::invalid_argument);
}
