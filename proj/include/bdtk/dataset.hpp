#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "bdtk/io.hpp"
#include "bdtk/rng.hpp"
#include "bdtk/tensor.hpp"

namespace bdtk {

enum class Provenance { clean, poisoned, mixed };

inline std::string to_string(Provenance p) {
    switch (p) {
        case Provenance::clean: return "clean";
        case Provenance::poisoned: return "poisoned";
        case Provenance::mixed: return "mixed";
    }
    return "clean";
}

inline Provenance provenance_from_string(const std::string& s) {
    if (s == "clean") return Provenance::clean;
    if (s == "poisoned") return Provenance::poisoned;
    if (s == "mixed") return Provenance::mixed;
    throw std::invalid_argument("unknown provenance: " + s);
}

// One labeled image. Pixel values live in [0, 1]; integer pixel domains are
// converted at I/O boundaries.
struct Sample {
    Tensor image;  // (C, H, W)
    int label = 0;
};

struct AugmentationPolicy {
    bool random_crop = false;
    int padding = 4;
    bool random_hflip = false;
    std::uint64_t seed = 0;

    bool enabled() const { return random_crop || random_hflip; }
};

struct Dataset {
    std::vector<Sample> samples;
    int num_classes = 0;
    std::string name;
    Provenance provenance = Provenance::clean;
    std::uint64_t seed = 0;

    // Parallel per-sample state. For a clean dataset every flag is 0 and
    // orig_labels mirrors the sample labels; poisoning keeps the pre-attack
    // class here so feature diagnostics can recover it.
    std::vector<std::uint8_t> poisoned;
    std::vector<int> orig_labels;

    std::size_t size() const { return samples.size(); }
    std::size_t channels() const { return samples.at(0).image.dim(0); }
    std::size_t height() const { return samples.at(0).image.dim(1); }
    std::size_t width() const { return samples.at(0).image.dim(2); }

    void init_bookkeeping() {
        poisoned.assign(samples.size(), 0);
        orig_labels.resize(samples.size());
        for (std::size_t i = 0; i < samples.size(); ++i) orig_labels[i] = samples[i].label;
    }

    void validate() const {
        if (samples.empty()) throw std::invalid_argument("dataset " + name + " is empty");
        const auto& shape = samples.front().image.shape();
        if (shape.size() != 3) throw std::invalid_argument("dataset images must be (C, H, W)");
        for (const auto& s : samples) {
            if (s.image.shape() != shape) {
                throw std::invalid_argument("dataset " + name + ": inconsistent image shapes");
            }
            if (s.label < 0 || s.label >= num_classes) {
                throw std::invalid_argument("dataset " + name + ": label out of range");
            }
            for (double v : s.image.raw()) {
                if (v < 0.0 || v > 1.0) {
                    throw std::invalid_argument("dataset " + name + ": pixel outside [0,1]");
                }
            }
        }
        if (poisoned.size() != samples.size() || orig_labels.size() != samples.size()) {
            throw std::invalid_argument("dataset " + name + ": bookkeeping arrays out of sync");
        }
    }
};

// Stratified subsample without replacement: each class contributes
// proportionally (within one sample) to ceil(rate * N) total. Deterministic
// under the seed. If `complement` is given it receives the unselected rest.
inline Dataset sample_clean_subset(const Dataset& d, double rate, std::uint64_t seed,
                                   Dataset* complement = nullptr) {
    if (rate <= 0.0 || rate > 1.0) {
        throw std::invalid_argument("sample_clean_subset: rate must be in (0,1], got " +
                                    std::to_string(rate));
    }
    if (d.provenance != Provenance::clean) {
        throw std::invalid_argument("sample_clean_subset: dataset must be clean");
    }

    const std::size_t n = d.size();
    const auto total = static_cast<std::size_t>(std::ceil(rate * static_cast<double>(n)));

    std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(d.num_classes));
    for (std::size_t i = 0; i < n; ++i) {
        by_class[static_cast<std::size_t>(d.samples[i].label)].push_back(i);
    }

    // Proportional quotas, remainder by largest fractional part (ties by class id).
    std::vector<std::size_t> quota(by_class.size(), 0);
    std::vector<std::pair<double, std::size_t>> fracs;
    std::size_t assigned = 0;
    for (std::size_t c = 0; c < by_class.size(); ++c) {
        const double exact =
            static_cast<double>(total) * static_cast<double>(by_class[c].size()) /
            static_cast<double>(n);
        quota[c] = static_cast<std::size_t>(std::floor(exact));
        assigned += quota[c];
        fracs.emplace_back(exact - static_cast<double>(quota[c]), c);
    }
    std::stable_sort(fracs.begin(), fracs.end(), [](const auto& a, const auto& b) {
        return a.first > b.first;
    });
    for (std::size_t k = 0; assigned < total && k < fracs.size(); ++k) {
        const std::size_t c = fracs[k].second;
        if (quota[c] < by_class[c].size()) {
            ++quota[c];
            ++assigned;
        }
    }
    // Quotas can saturate for very skewed class sizes; top up round-robin.
    for (std::size_t c = 0; assigned < total && c < by_class.size();
         c = (c + 1) % by_class.size()) {
        if (quota[c] < by_class[c].size()) {
            ++quota[c];
            ++assigned;
        }
    }

    Rng rng(mix_seed(seed, 0xda7a5e7));
    std::vector<std::size_t> chosen;
    std::vector<std::uint8_t> in_subset(n, 0);
    for (std::size_t c = 0; c < by_class.size(); ++c) {
        auto idx = by_class[c];
        rng.shuffle(idx);
        for (std::size_t k = 0; k < quota[c]; ++k) {
            chosen.push_back(idx[k]);
            in_subset[idx[k]] = 1;
        }
    }
    rng.shuffle(chosen);

    auto build = [&](const std::vector<std::size_t>& ids, const std::string& suffix) {
        Dataset out;
        out.num_classes = d.num_classes;
        out.name = d.name + suffix;
        out.provenance = Provenance::clean;
        out.seed = seed;
        out.samples.reserve(ids.size());
        for (std::size_t i : ids) out.samples.push_back(d.samples[i]);
        out.init_bookkeeping();
        return out;
    };

    if (complement != nullptr) {
        std::vector<std::size_t> rest;
        for (std::size_t i = 0; i < n; ++i) {
            if (!in_subset[i]) rest.push_back(i);
        }
        *complement = build(rest, "-rest");
    }
    return build(chosen, "-subset");
}

namespace detail {

struct AugDraw {
    int dy = 0;
    int dx = 0;
    bool flip = false;
};

inline AugDraw draw_augmentation(const AugmentationPolicy& policy, Rng& rng) {
    AugDraw d;
    if (policy.random_crop) {
        d.dy = static_cast<int>(rng.index(static_cast<std::size_t>(2 * policy.padding + 1)));
        d.dx = static_cast<int>(rng.index(static_cast<std::size_t>(2 * policy.padding + 1)));
    }
    if (policy.random_hflip) d.flip = rng.coin();
    return d;
}

inline Tensor apply_augmentation(const Tensor& img, const AugmentationPolicy& policy,
                                 const AugDraw& d) {
    Tensor out = img;
    const auto c = img.dim(0);
    const auto h = img.dim(1);
    const auto w = img.dim(2);
    if (policy.random_crop) {
        // Zero-pad by `padding`, then crop an HxW window at offset (dy, dx).
        Tensor cropped({c, h, w}, 0.0);
        const int p = policy.padding;
        for (std::size_t ch = 0; ch < c; ++ch) {
            for (std::size_t y = 0; y < h; ++y) {
                const int sy = static_cast<int>(y) + d.dy - p;
                if (sy < 0 || sy >= static_cast<int>(h)) continue;
                for (std::size_t x = 0; x < w; ++x) {
                    const int sx = static_cast<int>(x) + d.dx - p;
                    if (sx < 0 || sx >= static_cast<int>(w)) continue;
                    cropped.at3(ch, y, x) =
                        out.at3(ch, static_cast<std::size_t>(sy), static_cast<std::size_t>(sx));
                }
            }
        }
        out = std::move(cropped);
    }
    if (d.flip) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            for (std::size_t y = 0; y < h; ++y) {
                for (std::size_t x = 0; x < w / 2; ++x) {
                    std::swap(out.at3(ch, y, x), out.at3(ch, y, w - 1 - x));
                }
            }
        }
    }
    return out;
}

}  // namespace detail

// Applies one augmentation draw to a single image.
inline Tensor augment(const Tensor& x, const AugmentationPolicy& policy, Rng& rng) {
    if (!policy.enabled()) return x;
    return detail::apply_augmentation(x, policy, detail::draw_augmentation(policy, rng));
}

// Applies the SAME crop offsets and flip decision to both images, so a
// clean/poisoned pair stays spatially aligned.
inline std::pair<Tensor, Tensor> augment_pairwise(const Tensor& x, const Tensor& x_hat,
                                                  const AugmentationPolicy& policy, Rng& rng) {
    require_same_shape(x, x_hat, "augment_pairwise");
    if (!policy.enabled()) return {x, x_hat};
    const auto draw = detail::draw_augmentation(policy, rng);
    return {detail::apply_augmentation(x, policy, draw),
            detail::apply_augmentation(x_hat, policy, draw)};
}

// ---------------------------------------------------------------------------
// Persistence. A dataset directory holds manifest.json plus binary blobs:
//   images.bin  float32 (N, C, H, W)
//   labels.bin  uint32 (N)
//   flags.bin / orig_labels.bin  present for non-clean provenance
// ---------------------------------------------------------------------------

inline void save_dataset(const fs::path& dir, const Dataset& d) {
    fs::create_directories(dir);
    const auto c = d.channels();
    const auto h = d.height();
    const auto w = d.width();

    json manifest = {
        {"name", d.name},   {"K", d.num_classes},
        {"C", c},           {"W", w},
        {"H", h},           {"N", d.size()},
        {"provenance", to_string(d.provenance)},
        {"seed", d.seed},
    };
    write_json_file(dir / "manifest.json", manifest);

    Tensor images({d.size(), c, h, w});
    std::vector<std::uint32_t> labels(d.size());
    const std::size_t stride = c * h * w;
    for (std::size_t i = 0; i < d.size(); ++i) {
        std::copy(d.samples[i].image.raw().begin(), d.samples[i].image.raw().end(),
                  images.raw().begin() + static_cast<std::ptrdiff_t>(i * stride));
        labels[i] = static_cast<std::uint32_t>(d.samples[i].label);
    }
    write_f32_blob(dir / "images.bin", images);
    write_u32_blob(dir / "labels.bin", labels);

    if (d.provenance != Provenance::clean) {
        write_u8_blob(dir / "flags.bin", d.poisoned);
        std::vector<std::uint32_t> ol(d.size());
        for (std::size_t i = 0; i < d.size(); ++i) {
            ol[i] = static_cast<std::uint32_t>(d.orig_labels[i]);
        }
        write_u32_blob(dir / "orig_labels.bin", ol);
    }
}

inline Dataset load_dataset(const fs::path& dir) {
    const json manifest = read_json_file(dir / "manifest.json");
    Dataset d;
    d.name = manifest.at("name").get<std::string>();
    d.num_classes = manifest.at("K").get<int>();
    d.provenance = provenance_from_string(manifest.at("provenance").get<std::string>());
    d.seed = manifest.at("seed").get<std::uint64_t>();

    const Tensor images = read_f32_blob(dir / "images.bin");
    const auto labels = read_u32_blob(dir / "labels.bin");
    const auto n = manifest.at("N").get<std::size_t>();
    const auto c = manifest.at("C").get<std::size_t>();
    const auto h = manifest.at("H").get<std::size_t>();
    const auto w = manifest.at("W").get<std::size_t>();
    if (images.numel() != n * c * h * w || labels.size() != n) {
        throw std::runtime_error("dataset " + dir.string() + ": blob sizes disagree with manifest");
    }

    const std::size_t stride = c * h * w;
    d.samples.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        Tensor img({c, h, w});
        std::copy(images.raw().begin() + static_cast<std::ptrdiff_t>(i * stride),
                  images.raw().begin() + static_cast<std::ptrdiff_t>((i + 1) * stride),
                  img.raw().begin());
        d.samples[i] = Sample{std::move(img), static_cast<int>(labels[i])};
    }
    d.init_bookkeeping();

    if (d.provenance != Provenance::clean) {
        d.poisoned = read_u8_blob(dir / "flags.bin");
        const auto ol = read_u32_blob(dir / "orig_labels.bin");
        for (std::size_t i = 0; i < n; ++i) d.orig_labels[i] = static_cast<int>(ol[i]);
    }
    return d;
}

// ---------------------------------------------------------------------------
// Synthetic image classes for desk-scale experiments: one smooth seeded base
// pattern per class, samples are the base plus Gaussian pixel noise.
// ---------------------------------------------------------------------------

struct SyntheticSpec {
    int num_classes = 10;
    int per_class = 200;
    std::size_t channels = 3;
    std::size_t height = 16;
    std::size_t width = 16;
    double noise = 0.10;
    double brightness_jitter = 0.0;  // per-sample global offset, uniform in +/- this
    bool high_contrast = false;      // two-level cells instead of smooth gradients
    std::uint64_t seed = 7;
    std::string name = "synthetic";
};

inline Dataset make_synthetic_dataset(const SyntheticSpec& spec) {
    Rng rng(mix_seed(spec.seed, 0x5f337));

    // Low-frequency base per class: coarse 4x4 grid, bilinear upsample.
    const std::size_t g = 4;
    std::vector<Tensor> bases;
    for (int k = 0; k < spec.num_classes; ++k) {
        Tensor coarse({spec.channels, g, g});
        for (double& v : coarse.raw()) {
            v = spec.high_contrast ? (rng.coin() ? 0.85 : 0.15) : rng.uniform(0.15, 0.85);
        }
        Tensor base({spec.channels, spec.height, spec.width});
        for (std::size_t c = 0; c < spec.channels; ++c) {
            for (std::size_t y = 0; y < spec.height; ++y) {
                for (std::size_t x = 0; x < spec.width; ++x) {
                    const double fy = static_cast<double>(y) / static_cast<double>(spec.height) *
                                      static_cast<double>(g - 1);
                    const double fx = static_cast<double>(x) / static_cast<double>(spec.width) *
                                      static_cast<double>(g - 1);
                    const auto y0 = static_cast<std::size_t>(fy);
                    const auto x0 = static_cast<std::size_t>(fx);
                    const auto y1 = std::min(y0 + 1, g - 1);
                    const auto x1 = std::min(x0 + 1, g - 1);
                    const double wy = fy - static_cast<double>(y0);
                    const double wx = fx - static_cast<double>(x0);
                    base.at3(c, y, x) = (1 - wy) * ((1 - wx) * coarse.at3(c, y0, x0) +
                                                    wx * coarse.at3(c, y0, x1)) +
                                        wy * ((1 - wx) * coarse.at3(c, y1, x0) +
                                              wx * coarse.at3(c, y1, x1));
                }
            }
        }
        bases.push_back(std::move(base));
    }

    Dataset d;
    d.num_classes = spec.num_classes;
    d.name = spec.name;
    d.provenance = Provenance::clean;
    d.seed = spec.seed;
    for (int k = 0; k < spec.num_classes; ++k) {
        for (int i = 0; i < spec.per_class; ++i) {
            Sample s;
            s.image = bases[static_cast<std::size_t>(k)];
            const double shift = spec.brightness_jitter > 0.0
                                     ? rng.uniform(-spec.brightness_jitter, spec.brightness_jitter)
                                     : 0.0;
            for (double& v : s.image.raw()) {
                v = std::clamp(v + shift + rng.normal(0.0, spec.noise), 0.0, 1.0);
            }
            s.label = k;
            d.samples.push_back(std::move(s));
        }
    }
    d.init_bookkeeping();
    return d;
}

}  // namespace bdtk
