#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "bdtk/dataset.hpp"
#include "bdtk/io.hpp"
#include "bdtk/nn.hpp"

namespace bdtk {

// Classifier decomposed into a feature extractor and a classifier head; the
// full network output is always head(extractor(x)).
struct SplitModel {
    std::string arch_id;
    Shape3 input_shape;
    int num_classes = 0;
    std::size_t feature_dim = 0;
    int param_version = 0;
    std::uint64_t init_seed = 0;
    Network extractor;
    Network head;

    Mat features(const Mat& x, bool training = false) { return extractor.forward(x, training); }

    Mat logits_from_features(const Mat& f, bool training = false) {
        return head.forward(f, training);
    }

    Mat logits(const Mat& x, bool training = false) {
        return head.forward(extractor.forward(x, training), training);
    }

    void visit_params(const ParamVisitor& fn) {
        extractor.visit_params("extractor.", fn);
        head.visit_params("head.", fn);
    }

    void zero_grad() {
        extractor.zero_grad();
        head.zero_grad();
    }

    SplitModel clone() const { return *this; }

    bool same_architecture(const SplitModel& other) const {
        return arch_id == other.arch_id && input_shape == other.input_shape &&
               num_classes == other.num_classes && feature_dim == other.feature_dim;
    }

    // Flat copy of every parameter and buffer, for snapshot comparisons.
    std::vector<double> parameter_snapshot() {
        std::vector<double> out;
        visit_params([&](const ParamRef& p) {
            out.insert(out.end(), p.value, p.value + p.count);
        });
        return out;
    }
};

// Scoped "model is frozen" marker: parameter-gradient accumulation is skipped
// while alive, input gradients still flow.
class ParamGradGuard {
public:
    explicit ParamGradGuard(SplitModel& m) : model_(m) {
        model_.extractor.set_param_grads(false);
        model_.head.set_param_grads(false);
    }
    ~ParamGradGuard() {
        model_.extractor.set_param_grads(true);
        model_.head.set_param_grads(true);
    }
    ParamGradGuard(const ParamGradGuard&) = delete;
    ParamGradGuard& operator=(const ParamGradGuard&) = delete;

private:
    SplitModel& model_;
};

inline std::vector<int> predict_labels(const Mat& logits) {
    std::vector<int> out(static_cast<std::size_t>(logits.rows()));
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        Eigen::Index best = 0;
        logits.row(i).maxCoeff(&best);
        out[static_cast<std::size_t>(i)] = static_cast<int>(best);
    }
    return out;
}

// Assembles a batch matrix (rows = samples) from images.
inline Mat batch_from_images(const std::vector<const Tensor*>& images) {
    if (images.empty()) throw std::invalid_argument("batch_from_images: empty batch");
    const auto n = images.front()->numel();
    Mat x(static_cast<Eigen::Index>(images.size()), static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < images.size(); ++i) {
        if (images[i]->numel() != n) {
            throw std::invalid_argument("batch_from_images: inconsistent image sizes");
        }
        for (std::size_t j = 0; j < n; ++j) {
            x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = (*images[i])[j];
        }
    }
    return x;
}

inline Mat batch_from_dataset(const Dataset& d, const std::vector<std::size_t>& indices) {
    std::vector<const Tensor*> imgs;
    imgs.reserve(indices.size());
    for (std::size_t i : indices) imgs.push_back(&d.samples[i].image);
    return batch_from_images(imgs);
}

inline Tensor image_from_row(const Mat& x, Eigen::Index row, const Shape3& shape) {
    Tensor t({shape.c, shape.h, shape.w});
    for (std::size_t j = 0; j < shape.numel(); ++j) {
        t[j] = x(row, static_cast<Eigen::Index>(j));
    }
    return t;
}

// ---------------------------------------------------------------------------
// Architecture registry. Checkpoints refer to architectures by id so they
// can be rebuilt when loading.
//   toy_cnn   two conv blocks + 128-d linear feature layer; desk-scale default
//   toy_mlp   small fully-connected net for fast tests
//   wrn16_1   wide-resnet 16-1 (pre-activation blocks)
//   resnet18  basic-block resnet with 3x3 stem
// ---------------------------------------------------------------------------

inline SplitModel build_model(const std::string& arch_id, Shape3 input, int num_classes,
                              std::uint64_t seed) {
    Rng rng(mix_seed(seed, 0x90de1));
    SplitModel m;
    m.arch_id = arch_id;
    m.input_shape = input;
    m.num_classes = num_classes;
    m.init_seed = seed;

    if (arch_id == "toy_cnn") {
        auto* c1 = m.extractor.emplace<Conv2d>("conv1", input, 16, 3, 1, 1, rng);
        m.extractor.emplace<Relu>(c1->out_size());
        auto* p1 = m.extractor.emplace<MaxPool2d>(c1->out_shape(), 2);
        auto* c2 = m.extractor.emplace<Conv2d>("conv2", p1->out_shape(), 32, 3, 1, 1, rng);
        m.extractor.emplace<Relu>(c2->out_size());
        auto* p2 = m.extractor.emplace<MaxPool2d>(c2->out_shape(), 2);
        m.extractor.emplace<Dense>("fc1", p2->out_size(), 128, rng);
        m.extractor.emplace<Relu>(128);
        m.head.emplace<Dense>("fc2", 128, static_cast<std::size_t>(num_classes), rng);
        m.feature_dim = 128;
    } else if (arch_id == "toy_cnn_gap") {
        // Same two conv blocks, features taken as global channel means; the
        // pooled geometry keeps feature drift local to trigger-sensitive
        // channels during purification.
        auto* c1 = m.extractor.emplace<Conv2d>("conv1", input, 32, 3, 1, 1, rng);
        m.extractor.emplace<Relu>(c1->out_size());
        auto* p1 = m.extractor.emplace<MaxPool2d>(c1->out_shape(), 2);
        auto* c2 = m.extractor.emplace<Conv2d>("conv2", p1->out_shape(), 128, 3, 1, 1, rng);
        m.extractor.emplace<Relu>(c2->out_size());
        auto* p2 = m.extractor.emplace<MaxPool2d>(c2->out_shape(), 2);
        m.extractor.emplace<GlobalAvgPool>(p2->out_shape());
        m.head.emplace<Dense>("fc", 128, static_cast<std::size_t>(num_classes), rng);
        m.feature_dim = 128;
    } else if (arch_id == "toy_cnn_bn") {
        // Batch-normalized variant with signed pooled features. The BN keeps
        // channel scales pinned during fine-tuning, which is what lets the
        // contrastive stage move trigger-sensitive channels without dragging
        // the rest of the feature geometry along.
        auto* c1 = m.extractor.emplace<Conv2d>("conv1", input, 32, 3, 1, 1, rng);
        m.extractor.emplace<BatchNorm2d>("bn1", c1->out_shape());
        m.extractor.emplace<Relu>(c1->out_size());
        auto* p1 = m.extractor.emplace<MaxPool2d>(c1->out_shape(), 2);
        auto* p2 = m.extractor.emplace<MaxPool2d>(p1->out_shape(), 2);
        auto* c2 = m.extractor.emplace<Conv2d>("conv2", p2->out_shape(), 128, 3, 1, 1, rng);
        m.extractor.emplace<BatchNorm2d>("bn2", c2->out_shape());
        m.extractor.emplace<GlobalAvgPool>(c2->out_shape());
        m.head.emplace<Dense>("fc", 128, static_cast<std::size_t>(num_classes), rng);
        m.feature_dim = 128;
    } else if (arch_id == "toy_mlp") {
        const std::size_t in = input.numel();
        m.extractor.emplace<Dense>("fc1", in, 64, rng);
        m.extractor.emplace<Relu>(64);
        m.extractor.emplace<Dense>("fc2", 64, 32, rng);
        m.extractor.emplace<Relu>(32);
        m.head.emplace<Dense>("fc3", 32, static_cast<std::size_t>(num_classes), rng);
        m.feature_dim = 32;
    } else if (arch_id == "wrn16_1") {
        auto* stem = m.extractor.emplace<Conv2d>("conv0", input, 16, 3, 1, 1, rng);
        Shape3 s = stem->out_shape();
        const std::size_t widths[3] = {16, 32, 64};
        const std::size_t strides[3] = {1, 2, 2};
        int bi = 0;
        for (int g = 0; g < 3; ++g) {
            for (int b = 0; b < 2; ++b, ++bi) {
                auto* blk = m.extractor.emplace<PreActBlock>(
                    "block" + std::to_string(bi), s, widths[g], b == 0 ? strides[g] : 1, rng);
                s = blk->out_shape();
            }
        }
        m.extractor.emplace<BatchNorm2d>("bn_out", s);
        m.extractor.emplace<Relu>(s.numel());
        m.extractor.emplace<GlobalAvgPool>(s);
        m.head.emplace<Dense>("fc", s.c, static_cast<std::size_t>(num_classes), rng);
        m.feature_dim = s.c;
    } else if (arch_id == "resnet18") {
        auto* stem = m.extractor.emplace<Conv2d>("conv0", input, 64, 3, 1, 1, rng);
        Shape3 s = stem->out_shape();
        m.extractor.emplace<BatchNorm2d>("bn0", s);
        m.extractor.emplace<Relu>(s.numel());
        const std::size_t widths[4] = {64, 128, 256, 512};
        const std::size_t strides[4] = {1, 2, 2, 2};
        int bi = 0;
        for (int g = 0; g < 4; ++g) {
            for (int b = 0; b < 2; ++b, ++bi) {
                auto* blk = m.extractor.emplace<PostActBlock>(
                    "block" + std::to_string(bi), s, widths[g], b == 0 ? strides[g] : 1, rng);
                s = blk->out_shape();
            }
        }
        m.extractor.emplace<GlobalAvgPool>(s);
        m.head.emplace<Dense>("fc", s.c, static_cast<std::size_t>(num_classes), rng);
        m.feature_dim = s.c;
    } else {
        throw std::invalid_argument("unknown architecture: " + arch_id);
    }
    return m;
}

// ---------------------------------------------------------------------------
// Checkpoints: manifest.json + params/<name>.bin float32 blobs.
// ---------------------------------------------------------------------------

inline void save_checkpoint(const fs::path& dir, SplitModel& model,
                            json extra = json::object()) {
    fs::create_directories(dir / "params");
    json manifest = {
        {"arch_id", model.arch_id},
        {"K", model.num_classes},
        {"feature_dim", model.feature_dim},
        {"input", {{"C", model.input_shape.c}, {"H", model.input_shape.h}, {"W", model.input_shape.w}}},
        {"param_version", model.param_version},
        {"init_seed", model.init_seed},
        {"init", "he_normal"},
    };
    for (auto& [k, v] : extra.items()) manifest[k] = v;
    write_json_file(dir / "manifest.json", manifest);
    model.visit_params([&](const ParamRef& p) {
        Tensor t(p.dims);
        std::copy(p.value, p.value + p.count, t.raw().begin());
        write_f32_blob(dir / "params" / (p.name + ".bin"), t);
    });
}

inline SplitModel load_checkpoint(const fs::path& dir) {
    const json manifest = read_json_file(dir / "manifest.json");
    Shape3 input{manifest.at("input").at("C").get<std::size_t>(),
                 manifest.at("input").at("H").get<std::size_t>(),
                 manifest.at("input").at("W").get<std::size_t>()};
    SplitModel m = build_model(manifest.at("arch_id").get<std::string>(), input,
                               manifest.at("K").get<int>(),
                               manifest.at("init_seed").get<std::uint64_t>());
    m.param_version = manifest.at("param_version").get<int>();
    if (m.feature_dim != manifest.at("feature_dim").get<std::size_t>()) {
        throw std::runtime_error("checkpoint " + dir.string() + ": feature_dim mismatch");
    }
    m.visit_params([&](const ParamRef& p) {
        const Tensor t = read_f32_blob_shaped(dir / "params" / (p.name + ".bin"), p.dims);
        std::copy(t.raw().begin(), t.raw().end(), p.value);
    });
    return m;
}

}  // namespace bdtk
