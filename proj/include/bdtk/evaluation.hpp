#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "bdtk/attacks.hpp"
#include "bdtk/dataset.hpp"
#include "bdtk/model.hpp"
#include "bdtk/trigger.hpp"

namespace bdtk {

inline constexpr std::size_t kEvalBatch = 256;

namespace eval_detail {

inline std::vector<int> predict_dataset(SplitModel& model, const std::vector<const Tensor*>& imgs) {
    std::vector<int> preds;
    preds.reserve(imgs.size());
    for (std::size_t start = 0; start < imgs.size(); start += kEvalBatch) {
        const std::size_t end = std::min(start + kEvalBatch, imgs.size());
        const std::vector<const Tensor*> part(imgs.begin() + static_cast<std::ptrdiff_t>(start),
                                              imgs.begin() + static_cast<std::ptrdiff_t>(end));
        const Mat logits = model.logits(batch_from_images(part), /*training=*/false);
        const auto p = predict_labels(logits);
        preds.insert(preds.end(), p.begin(), p.end());
    }
    return preds;
}

}  // namespace eval_detail

// Benign accuracy: percentage of clean test samples classified correctly.
inline double eval_ba(SplitModel& model, const Dataset& test) {
    if (test.samples.empty()) throw std::invalid_argument("eval_ba: empty test set");
    if (test.provenance != Provenance::clean) {
        throw std::invalid_argument("eval_ba: test set must be clean");
    }
    std::vector<const Tensor*> imgs;
    for (const auto& s : test.samples) imgs.push_back(&s.image);
    const auto preds = eval_detail::predict_dataset(model, imgs);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        if (preds[i] == test.samples[i].label) ++correct;
    }
    return 100.0 * static_cast<double>(correct) / static_cast<double>(preds.size());
}

// Attack success rate: stamps every test sample whose true label differs from
// the target and reports the percentage classified as the target. When
// pgd_model is given, samples are PGD-perturbed against it before stamping
// (test-time variant of the CL attack; off by default).
inline double eval_asr(SplitModel& model, const Dataset& test, const TriggerSpec& trigger,
                       int target_label, SplitModel* pgd_model = nullptr,
                       const PgdConfig* pgd = nullptr) {
    if (test.samples.empty()) throw std::invalid_argument("eval_asr: empty test set");
    std::vector<Tensor> stamped;
    for (const auto& s : test.samples) {
        if (s.label == target_label) continue;
        Tensor img = s.image;
        if (pgd_model != nullptr && pgd != nullptr) {
            img = pgd_perturb(img, s.label, *pgd_model, pgd->epsilon, pgd->steps, pgd->step_size);
        }
        stamped.push_back(apply_trigger(img, trigger));
    }
    if (stamped.empty()) {
        throw std::invalid_argument("eval_asr: every test label equals the target label");
    }
    std::vector<const Tensor*> imgs;
    for (const auto& t : stamped) imgs.push_back(&t);
    const auto preds = eval_detail::predict_dataset(model, imgs);
    std::size_t hits = 0;
    for (int p : preds) {
        if (p == target_label) ++hits;
    }
    return 100.0 * static_cast<double>(hits) / static_cast<double>(preds.size());
}

// ---------------------------------------------------------------------------
// Feature export and cluster diagnostics.
// ---------------------------------------------------------------------------

struct FeatureDump {
    Mat features;                         // N x d
    std::vector<int> labels;              // original class ids
    std::vector<std::uint8_t> poisoned_flags;
    std::string model_tag;

    std::size_t rows() const { return labels.size(); }
};

// Dumps extractor features for every poisoned sample plus a per-class
// fraction of the clean ones (first-in-order per class, deterministic).
inline FeatureDump extract_features(SplitModel& model, const Dataset& d, double clean_fraction) {
    if (clean_fraction < 0.0 || clean_fraction > 1.0) {
        throw std::invalid_argument("extract_features: clean_fraction must be in [0,1]");
    }
    std::vector<std::size_t> selected;
    std::map<int, std::vector<std::size_t>> clean_by_class;
    for (std::size_t i = 0; i < d.size(); ++i) {
        if (d.poisoned[i]) {
            selected.push_back(i);
        } else {
            clean_by_class[d.orig_labels[i]].push_back(i);
        }
    }
    for (const auto& [cls, idx] : clean_by_class) {
        const auto take = static_cast<std::size_t>(
            std::ceil(clean_fraction * static_cast<double>(idx.size())));
        for (std::size_t k = 0; k < take; ++k) selected.push_back(idx[k]);
    }

    FeatureDump dump;
    dump.model_tag = model.arch_id + "#v" + std::to_string(model.param_version);
    if (selected.empty()) {
        dump.features = Mat(0, static_cast<Eigen::Index>(model.feature_dim));
        return dump;
    }
    dump.features = Mat(static_cast<Eigen::Index>(selected.size()),
                        static_cast<Eigen::Index>(model.feature_dim));
    for (std::size_t start = 0; start < selected.size(); start += kEvalBatch) {
        const std::size_t end = std::min(start + kEvalBatch, selected.size());
        std::vector<const Tensor*> imgs;
        for (std::size_t k = start; k < end; ++k) imgs.push_back(&d.samples[selected[k]].image);
        const Mat f = model.features(batch_from_images(imgs), /*training=*/false);
        for (std::size_t k = start; k < end; ++k) {
            dump.features.row(static_cast<Eigen::Index>(k)) =
                f.row(static_cast<Eigen::Index>(k - start));
        }
    }
    for (std::size_t i : selected) {
        dump.labels.push_back(d.orig_labels[i]);
        dump.poisoned_flags.push_back(d.poisoned[i]);
    }
    return dump;
}

struct ClusterSeparation {
    double poison_cohesion = 0.0;   // mean pairwise cosine among poisoned rows
    double poison_isolation = 0.0;  // 1 - mean cosine to original-class clean centroid
};

namespace eval_detail {

inline double cosine(const Eigen::RowVectorXd& a, const Eigen::RowVectorXd& b) {
    const double na = a.norm();
    const double nb = b.norm();
    if (na < 1e-300 || nb < 1e-300) return 0.0;
    return a.dot(b) / (na * nb);
}

}  // namespace eval_detail

inline ClusterSeparation cluster_separation(const FeatureDump& dump) {
    std::vector<std::size_t> poi, cle;
    for (std::size_t i = 0; i < dump.rows(); ++i) {
        (dump.poisoned_flags[i] ? poi : cle).push_back(i);
    }
    if (poi.size() < 2 || cle.size() < 2) {
        throw std::invalid_argument("cluster_separation: need >= 2 poisoned and >= 2 clean rows");
    }

    ClusterSeparation out;
    double pairs = 0.0;
    for (std::size_t a = 0; a < poi.size(); ++a) {
        for (std::size_t b = a + 1; b < poi.size(); ++b) {
            out.poison_cohesion += eval_detail::cosine(
                dump.features.row(static_cast<Eigen::Index>(poi[a])),
                dump.features.row(static_cast<Eigen::Index>(poi[b])));
            pairs += 1.0;
        }
    }
    out.poison_cohesion /= pairs;

    std::map<int, Eigen::RowVectorXd> centroids;
    std::map<int, double> counts;
    for (std::size_t i : cle) {
        const int cls = dump.labels[i];
        auto it = centroids.find(cls);
        if (it == centroids.end()) {
            centroids[cls] = dump.features.row(static_cast<Eigen::Index>(i));
            counts[cls] = 1.0;
        } else {
            it->second += dump.features.row(static_cast<Eigen::Index>(i));
            counts[cls] += 1.0;
        }
    }
    for (auto& [cls, v] : centroids) v /= counts[cls];

    double used = 0.0;
    double mean_cos = 0.0;
    for (std::size_t i : poi) {
        const auto it = centroids.find(dump.labels[i]);
        if (it == centroids.end()) continue;
        mean_cos += eval_detail::cosine(dump.features.row(static_cast<Eigen::Index>(i)),
                                        it->second);
        used += 1.0;
    }
    if (used == 0.0) {
        throw std::invalid_argument(
            "cluster_separation: no clean rows share a class with any poisoned row");
    }
    out.poison_isolation = 1.0 - mean_cos / used;
    return out;
}

inline void write_feature_csv(const fs::path& path, const FeatureDump& dump) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open for write: " + path.string());
    f << "label,poisoned";
    for (Eigen::Index j = 0; j < dump.features.cols(); ++j) f << ",f" << j;
    f << "\n";
    for (std::size_t i = 0; i < dump.rows(); ++i) {
        f << dump.labels[i] << "," << static_cast<int>(dump.poisoned_flags[i]);
        for (Eigen::Index j = 0; j < dump.features.cols(); ++j) {
            f << "," << dump.features(static_cast<Eigen::Index>(i), j);
        }
        f << "\n";
    }
}

// ---------------------------------------------------------------------------
// Defense report.
// ---------------------------------------------------------------------------

struct DefenseReport {
    double asr_before = 0.0;
    double asr_after = 0.0;
    double ba_before = 0.0;
    double ba_after = 0.0;
    json attack_summary = json::object();
    json defense_summary = json::object();
    std::string trigger_provenance = "inverted";  // inverted | ground_truth | external

    void validate() const {
        for (double v : {asr_before, asr_after, ba_before, ba_after}) {
            if (v < 0.0 || v > 100.0) {
                throw std::invalid_argument("defense report: percentage outside [0,100]");
            }
        }
    }
};

inline json defense_report_json(const DefenseReport& r) {
    return json{{"asr_before", r.asr_before}, {"asr_after", r.asr_after},
                {"ba_before", r.ba_before},   {"ba_after", r.ba_after},
                {"attack", r.attack_summary}, {"defense", r.defense_summary},
                {"trigger_provenance", r.trigger_provenance}};
}

inline DefenseReport defense_report_from_json(const json& j) {
    DefenseReport r;
    r.asr_before = j.at("asr_before").get<double>();
    r.asr_after = j.at("asr_after").get<double>();
    r.ba_before = j.at("ba_before").get<double>();
    r.ba_after = j.at("ba_after").get<double>();
    r.attack_summary = j.at("attack");
    r.defense_summary = j.at("defense");
    r.trigger_provenance = j.at("trigger_provenance").get<std::string>();
    return r;
}

// Fixed-column TSV row for table assembly.
inline void write_metrics_tsv(const fs::path& path, const std::string& dataset_name,
                              const std::string& attack_name, const DefenseReport& r) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open for write: " + path.string());
    f << "dataset\tattack\ttrigger\tasr_before\tba_before\tasr_after\tba_after\n";
    f << dataset_name << "\t" << attack_name << "\t" << r.trigger_provenance << "\t"
      << r.asr_before << "\t" << r.ba_before << "\t" << r.asr_after << "\t" << r.ba_after << "\n";
}

}  // namespace bdtk
