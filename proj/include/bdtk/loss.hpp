#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "bdtk/nn.hpp"

namespace bdtk {

struct CeResult {
    double value = 0.0;  // mean over the batch
    Mat grad;            // w.r.t. logits
};

// Numerically stable softmax cross-entropy, mean-reduced over the batch.
inline CeResult softmax_cross_entropy(const Mat& logits, const std::vector<int>& labels) {
    const auto batch = logits.rows();
    if (static_cast<std::size_t>(batch) != labels.size()) {
        throw std::invalid_argument("softmax_cross_entropy: batch/label count mismatch");
    }
    CeResult r;
    r.grad.resize(batch, logits.cols());
    double total = 0.0;
    for (Eigen::Index i = 0; i < batch; ++i) {
        const double mx = logits.row(i).maxCoeff();
        const Eigen::ArrayXd shifted = logits.row(i).transpose().array() - mx;
        const Eigen::ArrayXd ex = shifted.exp();
        const double denom = ex.sum();
        const auto y = static_cast<Eigen::Index>(labels[static_cast<std::size_t>(i)]);
        if (y < 0 || y >= logits.cols()) {
            throw std::invalid_argument("softmax_cross_entropy: label out of range");
        }
        total += std::log(denom) - shifted(y);
        r.grad.row(i) = (ex / denom).matrix().transpose();
        r.grad(i, y) -= 1.0;
    }
    const double inv_b = 1.0 / static_cast<double>(batch);
    r.value = total * inv_b;
    r.grad *= inv_b;
    return r;
}

// Same objective against a single fixed target class for every sample.
inline CeResult softmax_cross_entropy_to_target(const Mat& logits, int target) {
    return softmax_cross_entropy(logits,
                                 std::vector<int>(static_cast<std::size_t>(logits.rows()), target));
}

}  // namespace bdtk
