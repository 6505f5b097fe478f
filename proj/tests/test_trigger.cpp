#include <catch2/catch.hpp>

#include <cmath>

#include "bdtk/io.hpp"
#include "bdtk/rng.hpp"
#include "bdtk/trigger.hpp"

using namespace bdtk;

namespace {

Tensor random_image(std::size_t c, std::size_t h, std::size_t w, std::uint64_t seed) {
    Rng rng(seed);
    Tensor x({c, h, w});
    for (double& v : x.raw()) v = rng.uniform();
    return x;
}

}  // namespace

TEST_CASE("apply_trigger identity cases") {
    const Tensor x = random_image(3, 8, 8, 1);

    TriggerSpec zero;
    zero.pattern = Tensor({3, 8, 8}, 0.7);
    zero.mask = Tensor({8, 8}, 0.0);
    REQUIRE(apply_trigger(x, zero) == x);

    TriggerSpec full;
    full.pattern = Tensor({3, 8, 8}, 0.7);
    full.mask = Tensor({8, 8}, 1.0);
    const Tensor out = apply_trigger(x, full);
    for (double v : out.raw()) REQUIRE(v == Approx(0.7));
}

TEST_CASE("apply_trigger single-pixel mask changes exactly that pixel in all channels") {
    Tensor x({3, 8, 8}, 0.5);
    TriggerSpec t;
    t.pattern = Tensor({3, 8, 8}, 0.0);
    t.mask = Tensor({8, 8}, 0.0);
    t.mask.at2(7, 7) = 1.0;
    for (std::size_t c = 0; c < 3; ++c) t.pattern.at3(c, 7, 7) = 1.0;

    const Tensor out = apply_trigger(x, t);
    std::size_t changed = 0;
    for (std::size_t i = 0; i < x.numel(); ++i) {
        if (out[i] != x[i]) ++changed;
    }
    REQUIRE(changed == 3);  // one pixel, every channel
    for (std::size_t c = 0; c < 3; ++c) REQUIRE(out.at3(c, 7, 7) == 1.0);
}

TEST_CASE("apply_trigger is idempotent for binary masks") {
    const Tensor x = random_image(3, 16, 16, 2);
    for (int seed = 0; seed < 4; ++seed) {
        TriggerSpec t = make_patch_trigger(3, 16, 16, {3, TriggerPosition::bottom_right},
                                           static_cast<std::uint64_t>(seed));
        const Tensor once = apply_trigger(x, t);
        const Tensor twice = apply_trigger(once, t);
        REQUIRE(once == twice);
    }
}

TEST_CASE("apply_trigger difference is supported only where mask > 0") {
    const Tensor x = random_image(3, 12, 12, 5);
    TriggerSpec t = make_blend_trigger(3, 12, 12, {3, TriggerPosition::center}, 0.4, 9);
    const Tensor out = apply_trigger(x, t);
    for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t y = 0; y < 12; ++y) {
            for (std::size_t xx = 0; xx < 12; ++xx) {
                if (t.mask.at2(y, xx) == 0.0) {
                    REQUIRE(out.at3(c, y, xx) == x.at3(c, y, xx));
                }
            }
        }
    }
}

TEST_CASE("apply_trigger rejects shape mismatch") {
    const Tensor x = random_image(3, 8, 8, 1);
    TriggerSpec t = make_grid_trigger(3, 16, 16, {});
    REQUIRE_THROWS_AS(apply_trigger(x, t), std::invalid_argument);
}

TEST_CASE("grid trigger on 32x32 has 9-pixel support in rows/cols 29..31") {
    TriggerSpec t = make_grid_trigger(3, 32, 32, {3, TriggerPosition::bottom_right});
    REQUIRE(t.binary);
    std::size_t support = 0;
    for (std::size_t y = 0; y < 32; ++y) {
        for (std::size_t x = 0; x < 32; ++x) {
            if (t.mask.at2(y, x) > 0.0) {
                ++support;
                REQUIRE(y >= 29);
                REQUIRE(x >= 29);
            }
        }
    }
    REQUIRE(support == 9);
    t.validate();
}

TEST_CASE("blend trigger blends at the configured rate in the center") {
    const Tensor x = random_image(3, 32, 32, 3);
    TriggerSpec t = make_blend_trigger(3, 32, 32, {3, TriggerPosition::center}, 0.1, 4);
    REQUIRE_FALSE(t.binary);
    const Tensor out = apply_trigger(x, t);
    std::size_t on_patch = 0;
    for (std::size_t y = 0; y < 32; ++y) {
        for (std::size_t xx = 0; xx < 32; ++xx) {
            if (t.mask.at2(y, xx) == 0.0) continue;
            ++on_patch;
            REQUIRE(t.mask.at2(y, xx) == Approx(0.1));
            for (std::size_t c = 0; c < 3; ++c) {
                const double expected =
                    0.9 * x.at3(c, y, xx) + 0.1 * t.pattern.at3(c, y, xx);
                REQUIRE(out.at3(c, y, xx) == Approx(expected));
            }
        }
    }
    REQUIRE(on_patch == 9);
    // Patch sits in the image center.
    REQUIRE(t.mask.at2(15, 15) > 0.0);
}

TEST_CASE("sig trigger reproduces the sine perturbation and is identity at amplitude 0") {
    const Tensor x = random_image(3, 16, 16, 6);
    {
        TriggerSpec t = make_sig_trigger(3, 16, 16, 0.0, 6.0);
        REQUIRE(apply_trigger(x, t) == x);
    }
    {
        const double amp = 20.0, freq = 6.0;
        TriggerSpec t = make_sig_trigger(3, 16, 16, amp, freq);
        REQUIRE(t.additive);
        const Tensor out = apply_trigger(x, t);
        for (std::size_t c = 0; c < 3; ++c) {
            for (std::size_t y = 0; y < 16; ++y) {
                for (std::size_t xx = 0; xx < 16; ++xx) {
                    const double v =
                        amp * std::sin(2.0 * M_PI * xx * freq / 16.0) / 255.0;
                    const double expected = std::clamp(x.at3(c, y, xx) + v, 0.0, 1.0);
                    REQUIRE(out.at3(c, y, xx) == Approx(expected).margin(1e-12));
                }
            }
        }
    }
}

TEST_CASE("trigger geometry out of bounds is rejected") {
    REQUIRE_THROWS_AS(make_grid_trigger(3, 8, 8, {9, TriggerPosition::bottom_right}),
                      std::invalid_argument);
    REQUIRE_THROWS_AS(make_grid_trigger(3, 8, 8, {0, TriggerPosition::center}),
                      std::invalid_argument);
}

TEST_CASE("trigger save/load round trip") {
    const fs::path dir = fs::temp_directory_path() / "bdtk_test_trigdir";
    fs::remove_all(dir);
    TriggerSpec t = make_sig_trigger(3, 16, 16, 20.0, 6.0);
    save_trigger(dir, t, json{{"kind", "sig"}});
    const TriggerSpec back = load_trigger(dir);
    REQUIRE(back.additive == t.additive);
    REQUIRE(back.binary == t.binary);
    REQUIRE(back.pattern.shape() == t.pattern.shape());
    REQUIRE(back.mask.shape() == t.mask.shape());
    // float32 rounding is the only difference allowed
    REQUIRE(back.mask.max_abs_diff(t.mask) < 1e-7);
}
