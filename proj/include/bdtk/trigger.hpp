#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

#include "bdtk/io.hpp"
#include "bdtk/rng.hpp"
#include "bdtk/tensor.hpp"

namespace bdtk {

// A trigger is a pattern plus a spatial mask, applied by pixel-wise blending:
//   x_hat = (1 - m) * x + m * pattern        (mask broadcast over channels)
// `additive` marks triggers that encode a signed perturbation instead: the
// pattern stores the sign (0 or 1 per pixel) and the mask its magnitude, and
// application is clamped addition x_hat = clip(x + m * (2*pattern - 1)).
// That mode exists because a blend cannot represent signed offsets such as a
// sinusoidal perturbation exactly.
struct TriggerSpec {
    Tensor pattern;  // (C, H, W), values in [0, 1]
    Tensor mask;     // (H, W), values in [0, 1]
    bool binary = false;
    bool additive = false;

    bool empty() const { return pattern.empty() || mask.empty(); }

    double mask_l1() const { return mask.abs_sum(); }

    void validate() const {
        if (pattern.rank() != 3 || mask.rank() != 2) {
            throw std::invalid_argument("trigger: pattern must be (C,H,W), mask (H,W)");
        }
        if (pattern.dim(1) != mask.dim(0) || pattern.dim(2) != mask.dim(1)) {
            throw std::invalid_argument("trigger: pattern/mask spatial dims disagree");
        }
        for (double v : pattern.raw()) {
            if (v < 0.0 || v > 1.0) throw std::invalid_argument("trigger: pattern outside [0,1]");
        }
        for (double v : mask.raw()) {
            if (v < 0.0 || v > 1.0) throw std::invalid_argument("trigger: mask outside [0,1]");
            if (binary && v != 0.0 && v != 1.0) {
                throw std::invalid_argument("trigger: binary spec with fractional mask");
            }
        }
    }
};

inline Tensor apply_trigger(const Tensor& x, const TriggerSpec& t) {
    if (x.rank() != 3) throw std::invalid_argument("apply_trigger: image must be (C,H,W)");
    if (x.dim(0) != t.pattern.dim(0) || x.dim(1) != t.pattern.dim(1) ||
        x.dim(2) != t.pattern.dim(2)) {
        throw std::invalid_argument("apply_trigger: image/trigger shape mismatch " +
                                    shape_str(x.shape()) + " vs " + shape_str(t.pattern.shape()));
    }
    const auto c = x.dim(0);
    const auto h = x.dim(1);
    const auto w = x.dim(2);
    Tensor out({c, h, w});
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t xx = 0; xx < w; ++xx) {
                const double m = t.mask.at2(y, xx);
                const double p = t.pattern.at3(ch, y, xx);
                const double v = t.additive ? x.at3(ch, y, xx) + m * (2.0 * p - 1.0)
                                            : (1.0 - m) * x.at3(ch, y, xx) + m * p;
                out.at3(ch, y, xx) = std::clamp(v, 0.0, 1.0);
            }
        }
    }
    return out;
}

enum class TriggerPosition { bottom_right, center };

inline std::string to_string(TriggerPosition p) {
    return p == TriggerPosition::bottom_right ? "bottom_right" : "center";
}

inline TriggerPosition trigger_position_from_string(const std::string& s) {
    if (s == "bottom_right") return TriggerPosition::bottom_right;
    if (s == "center") return TriggerPosition::center;
    throw std::invalid_argument("unknown trigger position: " + s);
}

struct TriggerGeometry {
    int size = 3;
    TriggerPosition position = TriggerPosition::bottom_right;
};

namespace detail {

// Top-left corner of the patch for the given geometry.
inline std::pair<std::size_t, std::size_t> patch_origin(const TriggerGeometry& g, std::size_t h,
                                                        std::size_t w) {
    const auto s = static_cast<std::size_t>(g.size);
    if (g.size <= 0 || s > h || s > w) {
        throw std::invalid_argument("trigger geometry: " + std::to_string(g.size) +
                                    "x" + std::to_string(g.size) + " patch does not fit in " +
                                    std::to_string(h) + "x" + std::to_string(w));
    }
    if (g.position == TriggerPosition::bottom_right) return {h - s, w - s};
    return {(h - s) / 2, (w - s) / 2};
}

}  // namespace detail

// Fixed checkerboard patch with a binary mask over the patch cells.
inline TriggerSpec make_grid_trigger(std::size_t c, std::size_t h, std::size_t w,
                                     const TriggerGeometry& g) {
    const auto [oy, ox] = detail::patch_origin(g, h, w);
    TriggerSpec t;
    t.pattern = Tensor({c, h, w}, 0.0);
    t.mask = Tensor({h, w}, 0.0);
    t.binary = true;
    const auto s = static_cast<std::size_t>(g.size);
    for (std::size_t y = 0; y < s; ++y) {
        for (std::size_t x = 0; x < s; ++x) {
            t.mask.at2(oy + y, ox + x) = 1.0;
            const double v = ((y + x) % 2 == 0) ? 1.0 : 0.0;
            for (std::size_t ch = 0; ch < c; ++ch) t.pattern.at3(ch, oy + y, ox + x) = v;
        }
    }
    return t;
}

// Seeded high-contrast 0/1 patch. The original optimized patch is not
// published, so a fixed random one stands in; the defense is agnostic to the
// patch content.
inline TriggerSpec make_patch_trigger(std::size_t c, std::size_t h, std::size_t w,
                                      const TriggerGeometry& g, std::uint64_t seed) {
    const auto [oy, ox] = detail::patch_origin(g, h, w);
    TriggerSpec t;
    t.pattern = Tensor({c, h, w}, 0.0);
    t.mask = Tensor({h, w}, 0.0);
    t.binary = true;
    Rng rng(mix_seed(seed, 0x7a0));
    const auto s = static_cast<std::size_t>(g.size);
    bool any_one = false;
    bool any_zero = false;
    for (std::size_t y = 0; y < s; ++y) {
        for (std::size_t x = 0; x < s; ++x) {
            t.mask.at2(oy + y, ox + x) = 1.0;
            const double v = rng.coin() ? 1.0 : 0.0;
            any_one |= v > 0.5;
            any_zero |= v < 0.5;
            for (std::size_t ch = 0; ch < c; ++ch) t.pattern.at3(ch, oy + y, ox + x) = v;
        }
    }
    if (!any_one) {
        for (std::size_t ch = 0; ch < c; ++ch) t.pattern.at3(ch, oy, ox) = 1.0;
    } else if (!any_zero) {
        for (std::size_t ch = 0; ch < c; ++ch) t.pattern.at3(ch, oy, ox) = 0.0;
    }
    return t;
}

// Seeded random-color patch blended in at a fixed rate: mask = alpha on the
// patch, so application yields (1-alpha) * x + alpha * color.
inline TriggerSpec make_blend_trigger(std::size_t c, std::size_t h, std::size_t w,
                                      const TriggerGeometry& g, double alpha,
                                      std::uint64_t seed) {
    if (alpha < 0.0 || alpha > 1.0) {
        throw std::invalid_argument("blend trigger: alpha must be in [0,1]");
    }
    const auto [oy, ox] = detail::patch_origin(g, h, w);
    TriggerSpec t;
    t.pattern = Tensor({c, h, w}, 0.0);
    t.mask = Tensor({h, w}, 0.0);
    t.binary = false;
    Rng rng(mix_seed(seed, 0xb1e));
    const auto s = static_cast<std::size_t>(g.size);
    for (std::size_t y = 0; y < s; ++y) {
        for (std::size_t x = 0; x < s; ++x) {
            t.mask.at2(oy + y, ox + x) = alpha;
            for (std::size_t ch = 0; ch < c; ++ch) {
                t.pattern.at3(ch, oy + y, ox + x) = rng.uniform();
            }
        }
    }
    return t;
}

// Horizontal sinusoid v(i,j) = amplitude * sin(2*pi*j*freq/W) / 255, encoded
// additively: mask holds |v|, pattern the sign.
inline TriggerSpec make_sig_trigger(std::size_t c, std::size_t h, std::size_t w,
                                    double amplitude, double frequency) {
    TriggerSpec t;
    t.pattern = Tensor({c, h, w}, 0.0);
    t.mask = Tensor({h, w}, 0.0);
    t.binary = false;
    t.additive = true;
    for (std::size_t x = 0; x < w; ++x) {
        const double v = amplitude *
                         std::sin(2.0 * 3.14159265358979323846 * static_cast<double>(x) *
                                  frequency / static_cast<double>(w)) /
                         255.0;
        for (std::size_t y = 0; y < h; ++y) {
            t.mask.at2(y, x) = std::abs(v);
            const double sign_enc = v > 0.0 ? 1.0 : 0.0;
            for (std::size_t ch = 0; ch < c; ++ch) t.pattern.at3(ch, y, x) = sign_enc;
        }
    }
    return t;
}

// ---------------------------------------------------------------------------
// Persistence: trigger.json metadata plus pattern.bin / mask.bin blobs.
// ---------------------------------------------------------------------------

inline void save_trigger(const fs::path& dir, const TriggerSpec& t, json metadata = json::object()) {
    fs::create_directories(dir);
    metadata["binary"] = t.binary;
    metadata["additive"] = t.additive;
    metadata["C"] = t.pattern.dim(0);
    metadata["H"] = t.pattern.dim(1);
    metadata["W"] = t.pattern.dim(2);
    write_json_file(dir / "trigger.json", metadata);
    write_f32_blob(dir / "pattern.bin", t.pattern);
    write_f32_blob(dir / "mask.bin", t.mask);
}

inline TriggerSpec load_trigger(const fs::path& dir) {
    const json meta = read_json_file(dir / "trigger.json");
    const auto c = meta.at("C").get<std::size_t>();
    const auto h = meta.at("H").get<std::size_t>();
    const auto w = meta.at("W").get<std::size_t>();
    TriggerSpec t;
    t.binary = meta.at("binary").get<bool>();
    t.additive = meta.value("additive", false);
    t.pattern = read_f32_blob_shaped(dir / "pattern.bin", {c, h, w});
    t.mask = read_f32_blob_shaped(dir / "mask.bin", {h, w});
    t.validate();
    return t;
}

}  // namespace bdtk
