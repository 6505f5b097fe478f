#include <catch2/catch.hpp>

#include <algorithm>
#include <map>
#include <set>

#include "bdtk/dataset.hpp"
#include "bdtk/trigger.hpp"

using namespace bdtk;

namespace {

Dataset balanced_dataset(int classes, int per_class, std::size_t hw = 8) {
    SyntheticSpec spec;
    spec.num_classes = classes;
    spec.per_class = per_class;
    spec.height = spec.width = hw;
    return make_synthetic_dataset(spec);
}

}  // namespace

TEST_CASE("sample_clean_subset rate=1 returns a permutation of the full set") {
    Dataset d = balanced_dataset(3, 5);
    Dataset sub = sample_clean_subset(d, 1.0, 4);
    REQUIRE(sub.size() == d.size());
    // Same multiset of labels.
    std::multiset<int> a, b;
    for (const auto& s : d.samples) a.insert(s.label);
    for (const auto& s : sub.samples) b.insert(s.label);
    REQUIRE(a == b);
}

TEST_CASE("sample_clean_subset draws ceil(rate*N) stratified by class") {
    // 5% of 50000 must be 2500.
    {
        Dataset d = balanced_dataset(10, 40);  // N=400
        Dataset sub = sample_clean_subset(d, 0.05, 1);
        REQUIRE(sub.size() == 20);
    }
    // Balanced 10x100 at rate 0.1 -> exactly 10 per class.
    {
        Dataset d = balanced_dataset(10, 100);
        Dataset sub = sample_clean_subset(d, 0.1, 1);
        REQUIRE(sub.size() == 100);
        std::map<int, int> counts;
        for (const auto& s : sub.samples) counts[s.label]++;
        for (const auto& [cls, n] : counts) {
            INFO("class " << cls);
            REQUIRE(n == 10);
        }
    }
}

TEST_CASE("sample_clean_subset is deterministic and disjoint from its complement") {
    Dataset d = balanced_dataset(4, 25);
    Dataset rest;
    Dataset sub1 = sample_clean_subset(d, 0.3, 9, &rest);
    Dataset sub2 = sample_clean_subset(d, 0.3, 9);
    REQUIRE(sub1.size() == sub2.size());
    for (std::size_t i = 0; i < sub1.size(); ++i) {
        REQUIRE(sub1.samples[i].label == sub2.samples[i].label);
        REQUIRE(sub1.samples[i].image == sub2.samples[i].image);
    }
    REQUIRE(sub1.size() + rest.size() == d.size());

    // Disjoint union: every original image appears exactly once across both.
    auto key = [](const Tensor& t) {
        return fnv1a(t.data(), t.numel() * sizeof(double));
    };
    std::multiset<std::uint64_t> all, split;
    for (const auto& s : d.samples) all.insert(key(s.image));
    for (const auto& s : sub1.samples) split.insert(key(s.image));
    for (const auto& s : rest.samples) split.insert(key(s.image));
    REQUIRE(all == split);
}

TEST_CASE("sample_clean_subset rejects bad rates and non-clean inputs") {
    Dataset d = balanced_dataset(2, 4);
    REQUIRE_THROWS_AS(sample_clean_subset(d, 0.0, 1), std::invalid_argument);
    REQUIRE_THROWS_AS(sample_clean_subset(d, 1.5, 1), std::invalid_argument);
    d.provenance = Provenance::mixed;
    REQUIRE_THROWS_AS(sample_clean_subset(d, 0.5, 1), std::invalid_argument);
}

TEST_CASE("augment_pairwise disabled policy returns inputs unchanged") {
    Dataset d = balanced_dataset(2, 2);
    AugmentationPolicy none;
    Rng rng(1);
    auto [a, b] = augment_pairwise(d.samples[0].image, d.samples[1].image, none, rng);
    REQUIRE(a == d.samples[0].image);
    REQUIRE(b == d.samples[1].image);
}

TEST_CASE("augment_pairwise flips both images together") {
    AugmentationPolicy policy;
    policy.random_hflip = true;
    Tensor x({1, 2, 3});
    for (std::size_t i = 0; i < x.numel(); ++i) x[i] = static_cast<double>(i) / 10.0;
    Tensor y = x;
    for (double& v : y.raw()) v = 1.0 - v;

    // Drive the rng until a flip draw occurs; both outputs must mirror.
    Rng rng(3);
    for (int attempt = 0; attempt < 64; ++attempt) {
        auto [a, b] = augment_pairwise(x, y, policy, rng);
        const bool flipped = !(a == x);
        if (!flipped) continue;
        for (std::size_t r = 0; r < 2; ++r) {
            for (std::size_t c = 0; c < 3; ++c) {
                REQUIRE(a.at3(0, r, c) == Approx(x.at3(0, r, 2 - c)));
                REQUIRE(b.at3(0, r, c) == Approx(y.at3(0, r, 2 - c)));
            }
        }
        return;
    }
    FAIL("no flip drawn in 64 attempts");
}

TEST_CASE("augment_pairwise keeps trigger pixels co-located under crops") {
    // Stamp a trigger, augment the pair, and verify the stamped-minus-clean
    // difference is the crop-shifted original difference.
    SyntheticSpec spec;
    spec.num_classes = 1;
    spec.per_class = 1;
    spec.height = spec.width = 8;
    Dataset d = make_synthetic_dataset(spec);
    const Tensor& x = d.samples[0].image;

    TriggerSpec trig = make_grid_trigger(3, 8, 8, {3, TriggerPosition::bottom_right});
    const Tensor xh = apply_trigger(x, trig);

    AugmentationPolicy policy;
    policy.random_crop = true;
    policy.padding = 2;
    policy.random_hflip = true;
    Rng rng(11);
    for (int rep = 0; rep < 16; ++rep) {
        auto [xa, xha] = augment_pairwise(x, xh, policy, rng);
        // Wherever the clean pair pixel matches, the stamped pair must differ
        // exactly where the (transformed) trigger would be: the difference
        // image of the pair is a rigid transform of the original difference,
        // so its support size is preserved up to cropping.
        std::size_t diff_before = 0, diff_after = 0;
        for (std::size_t i = 0; i < x.numel(); ++i) {
            if (x[i] != xh[i]) ++diff_before;
            if (xa[i] != xha[i]) ++diff_after;
        }
        REQUIRE(diff_after <= diff_before);
        // The pair transforms rigidly: nonzero differences must take the same
        // set of values as the originals (clipped by the crop).
        std::multiset<double> vals_after;
        for (std::size_t i = 0; i < x.numel(); ++i) {
            if (xa[i] != xha[i]) vals_after.insert(xha[i] - xa[i]);
        }
        std::multiset<double> vals_before;
        for (std::size_t i = 0; i < x.numel(); ++i) {
            if (x[i] != xh[i]) vals_before.insert(xh[i] - x[i]);
        }
        for (double v : vals_after) {
            REQUIRE(vals_before.count(v) >= 1);
        }
    }
}

TEST_CASE("augment_pairwise rejects shape mismatch") {
    AugmentationPolicy policy;
    policy.random_hflip = true;
    Rng rng(1);
    Tensor a({1, 4, 4});
    Tensor b({1, 4, 5});
    REQUIRE_THROWS_AS(augment_pairwise(a, b, policy, rng), std::invalid_argument);
}

TEST_CASE("augmentation policy is deterministic under a fixed seed") {
    Dataset d = balanced_dataset(2, 3);
    AugmentationPolicy policy;
    policy.random_crop = true;
    policy.padding = 2;
    policy.random_hflip = true;
    policy.seed = 77;

    Rng r1(policy.seed);
    Rng r2(policy.seed);
    for (const auto& s : d.samples) {
        const Tensor a = augment(s.image, policy, r1);
        const Tensor b = augment(s.image, policy, r2);
        REQUIRE(a == b);
    }
}

TEST_CASE("dataset validate rejects inconsistent shapes and bad labels") {
    Dataset d = balanced_dataset(2, 2);
    d.samples[1].image = Tensor({3, 4, 4});
    REQUIRE_THROWS_AS(d.validate(), std::invalid_argument);

    Dataset d2 = balanced_dataset(2, 2);
    d2.samples[0].label = 5;
    REQUIRE_THROWS_AS(d2.validate(), std::invalid_argument);

    Dataset d3;
    d3.num_classes = 2;
    REQUIRE_THROWS_AS(d3.validate(), std::invalid_argument);
}
