#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "bdtk/rng.hpp"
#include "bdtk/tensor.hpp"

namespace bdtk {

// Activations move through the net as row-major matrices: one row per sample,
// flattened (C, H, W) order for spatial layers.
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;

struct Shape3 {
    std::size_t c = 0;
    std::size_t h = 0;
    std::size_t w = 0;

    std::size_t numel() const { return c * h * w; }
    bool operator==(const Shape3&) const = default;
};

// Named view of one parameter (or buffer) tensor inside a layer. Buffers are
// serialized and copied but never optimized.
struct ParamRef {
    std::string name;
    double* value = nullptr;
    double* grad = nullptr;  // nullptr for buffers
    std::size_t count = 0;
    std::vector<std::size_t> dims;
    bool is_buffer = false;
};

using ParamVisitor = std::function<void(const ParamRef&)>;

class Layer {
public:
    virtual ~Layer() = default;
    virtual Mat forward(const Mat& x, bool training) = 0;
    // Accumulates parameter gradients and returns the gradient w.r.t. input.
    virtual Mat backward(const Mat& gy) = 0;
    virtual void visit_params(const std::string& prefix, const ParamVisitor& fn) { (void)prefix, (void)fn; }
    virtual void zero_grad() {}
    // Frozen-model backward passes only need input gradients; disabling the
    // parameter accumulation skips the dominant GEMMs.
    virtual void set_param_grads(bool enabled) { (void)enabled; }
    // Fine-tuning stages normalize with batch statistics but must not drag
    // the stored running statistics toward their own input distribution.
    virtual void set_update_running_stats(bool enabled) { (void)enabled; }
    virtual std::size_t out_size() const = 0;
    virtual std::unique_ptr<Layer> clone() const = 0;
    virtual std::string describe() const = 0;
};

namespace nn_detail {

inline void he_normal_init(Mat& w, std::size_t fan_in, Rng& rng) {
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (Eigen::Index i = 0; i < w.rows(); ++i) {
        for (Eigen::Index j = 0; j < w.cols(); ++j) w(i, j) = rng.normal(0.0, stddev);
    }
}

}  // namespace nn_detail

// ---------------------------------------------------------------------------

class Dense final : public Layer {
public:
    Dense(std::string name, std::size_t in, std::size_t out, Rng& rng)
        : name_(std::move(name)),
          w_(Mat::Zero(static_cast<Eigen::Index>(out), static_cast<Eigen::Index>(in))),
          b_(Vec::Zero(static_cast<Eigen::Index>(out))),
          gw_(Mat::Zero(w_.rows(), w_.cols())),
          gb_(Vec::Zero(b_.size())) {
        nn_detail::he_normal_init(w_, in, rng);
    }

    Mat forward(const Mat& x, bool) override {
        x_ = x;
        Mat y = x * w_.transpose();
        y.rowwise() += b_.transpose();
        return y;
    }

    Mat backward(const Mat& gy) override {
        if (param_grads_) {
            gw_.noalias() += gy.transpose() * x_;
            gb_ += gy.colwise().sum().transpose();
        }
        return gy * w_;
    }

    void set_param_grads(bool enabled) override { param_grads_ = enabled; }

    void visit_params(const std::string& prefix, const ParamVisitor& fn) override {
        fn({prefix + name_ + ".weight", w_.data(), gw_.data(),
            static_cast<std::size_t>(w_.size()),
            {static_cast<std::size_t>(w_.rows()), static_cast<std::size_t>(w_.cols())}, false});
        fn({prefix + name_ + ".bias", b_.data(), gb_.data(), static_cast<std::size_t>(b_.size()),
            {static_cast<std::size_t>(b_.size())}, false});
    }

    void zero_grad() override {
        gw_.setZero();
        gb_.setZero();
    }

    std::size_t out_size() const override { return static_cast<std::size_t>(w_.rows()); }

    std::unique_ptr<Layer> clone() const override { return std::make_unique<Dense>(*this); }

    std::string describe() const override {
        return "dense " + std::to_string(w_.cols()) + "->" + std::to_string(w_.rows());
    }

private:
    std::string name_;
    Mat w_;
    Vec b_;
    Mat gw_;
    Vec gb_;
    Mat x_;
    bool param_grads_ = true;
};

class Relu final : public Layer {
public:
    explicit Relu(std::size_t size) : size_(size) {}

    Mat forward(const Mat& x, bool) override {
        mask_ = (x.array() > 0.0).cast<double>().matrix();
        return x.cwiseProduct(mask_);
    }

    Mat backward(const Mat& gy) override { return gy.cwiseProduct(mask_); }

    std::size_t out_size() const override { return size_; }

    std::unique_ptr<Layer> clone() const override { return std::make_unique<Relu>(*this); }

    std::string describe() const override { return "relu"; }

private:
    std::size_t size_;
    Mat mask_;
};

class Conv2d final : public Layer {
public:
    Conv2d(std::string name, Shape3 in, std::size_t out_c, std::size_t kernel, std::size_t stride,
           std::size_t pad, Rng& rng, bool bias = true)
        : name_(std::move(name)),
          in_(in),
          out_c_(out_c),
          k_(kernel),
          stride_(stride),
          pad_(pad),
          has_bias_(bias) {
        out_h_ = (in_.h + 2 * pad_ - k_) / stride_ + 1;
        out_w_ = (in_.w + 2 * pad_ - k_) / stride_ + 1;
        const std::size_t patch = in_.c * k_ * k_;
        w_ = Mat::Zero(static_cast<Eigen::Index>(out_c_), static_cast<Eigen::Index>(patch));
        gw_ = Mat::Zero(w_.rows(), w_.cols());
        b_ = Vec::Zero(static_cast<Eigen::Index>(out_c_));
        gb_ = Vec::Zero(b_.size());
        nn_detail::he_normal_init(w_, patch, rng);
        build_index();
    }

    Mat forward(const Mat& x, bool) override {
        const auto batch = x.rows();
        const std::size_t patch = in_.c * k_ * k_;
        const std::size_t positions = out_h_ * out_w_;
        col_.resize(static_cast<Eigen::Index>(patch),
                    static_cast<Eigen::Index>(static_cast<std::size_t>(batch) * positions));
        for (Eigen::Index b = 0; b < batch; ++b) {
            const double* src = x.row(b).data();
            const auto base = static_cast<std::size_t>(b) * positions;
            for (std::size_t r = 0; r < patch; ++r) {
                double* dst = &col_(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(base));
                const std::int32_t* idx = &src_index_[r * positions];
                for (std::size_t p = 0; p < positions; ++p) {
                    dst[p] = idx[p] >= 0 ? src[idx[p]] : 0.0;
                }
            }
        }
        Mat ycol = w_ * col_;  // (out_c, batch*positions)
        Mat y(batch, static_cast<Eigen::Index>(out_c_ * positions));
        for (Eigen::Index b = 0; b < batch; ++b) {
            const auto base = static_cast<std::size_t>(b) * positions;
            for (std::size_t oc = 0; oc < out_c_; ++oc) {
                const double add = has_bias_ ? b_(static_cast<Eigen::Index>(oc)) : 0.0;
                for (std::size_t p = 0; p < positions; ++p) {
                    y(b, static_cast<Eigen::Index>(oc * positions + p)) =
                        ycol(static_cast<Eigen::Index>(oc), static_cast<Eigen::Index>(base + p)) +
                        add;
                }
            }
        }
        return y;
    }

    Mat backward(const Mat& gy) override {
        const auto batch = gy.rows();
        const std::size_t positions = out_h_ * out_w_;
        const std::size_t patch = in_.c * k_ * k_;
        Mat gycol(static_cast<Eigen::Index>(out_c_),
                  static_cast<Eigen::Index>(static_cast<std::size_t>(batch) * positions));
        for (Eigen::Index b = 0; b < batch; ++b) {
            const auto base = static_cast<std::size_t>(b) * positions;
            for (std::size_t oc = 0; oc < out_c_; ++oc) {
                for (std::size_t p = 0; p < positions; ++p) {
                    gycol(static_cast<Eigen::Index>(oc), static_cast<Eigen::Index>(base + p)) =
                        gy(b, static_cast<Eigen::Index>(oc * positions + p));
                }
            }
        }
        if (param_grads_) {
            gw_.noalias() += gycol * col_.transpose();
            if (has_bias_) gb_ += gycol.rowwise().sum();
        }

        Mat gcol = w_.transpose() * gycol;  // (patch, batch*positions)
        Mat gx = Mat::Zero(batch, static_cast<Eigen::Index>(in_.numel()));
        for (Eigen::Index b = 0; b < batch; ++b) {
            double* dst = gx.row(b).data();
            const auto base = static_cast<std::size_t>(b) * positions;
            for (std::size_t r = 0; r < patch; ++r) {
                const double* g = &gcol(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(base));
                const std::int32_t* idx = &src_index_[r * positions];
                for (std::size_t p = 0; p < positions; ++p) {
                    if (idx[p] >= 0) dst[idx[p]] += g[p];
                }
            }
        }
        return gx;
    }

    void visit_params(const std::string& prefix, const ParamVisitor& fn) override {
        fn({prefix + name_ + ".weight", w_.data(), gw_.data(),
            static_cast<std::size_t>(w_.size()),
            {out_c_, in_.c, k_, k_}, false});
        if (has_bias_) {
            fn({prefix + name_ + ".bias", b_.data(), gb_.data(),
                static_cast<std::size_t>(b_.size()), {out_c_}, false});
        }
    }

    void zero_grad() override {
        gw_.setZero();
        gb_.setZero();
    }

    void set_param_grads(bool enabled) override { param_grads_ = enabled; }

    Shape3 out_shape() const { return {out_c_, out_h_, out_w_}; }
    std::size_t out_size() const override { return out_c_ * out_h_ * out_w_; }

    std::unique_ptr<Layer> clone() const override { return std::make_unique<Conv2d>(*this); }

    std::string describe() const override {
        return "conv " + std::to_string(in_.c) + "->" + std::to_string(out_c_) + " k" +
               std::to_string(k_) + " s" + std::to_string(stride_) + " p" + std::to_string(pad_);
    }

private:
    void build_index() {
        const std::size_t positions = out_h_ * out_w_;
        src_index_.assign(in_.c * k_ * k_ * positions, -1);
        std::size_t r = 0;
        for (std::size_t ci = 0; ci < in_.c; ++ci) {
            for (std::size_t ky = 0; ky < k_; ++ky) {
                for (std::size_t kx = 0; kx < k_; ++kx, ++r) {
                    for (std::size_t oy = 0; oy < out_h_; ++oy) {
                        for (std::size_t ox = 0; ox < out_w_; ++ox) {
                            const auto iy = static_cast<std::ptrdiff_t>(oy * stride_ + ky) -
                                            static_cast<std::ptrdiff_t>(pad_);
                            const auto ix = static_cast<std::ptrdiff_t>(ox * stride_ + kx) -
                                            static_cast<std::ptrdiff_t>(pad_);
                            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(in_.h) || ix < 0 ||
                                ix >= static_cast<std::ptrdiff_t>(in_.w)) {
                                continue;
                            }
                            src_index_[r * positions + oy * out_w_ + ox] = static_cast<std::int32_t>(
                                (ci * in_.h + static_cast<std::size_t>(iy)) * in_.w +
                                static_cast<std::size_t>(ix));
                        }
                    }
                }
            }
        }
    }

    std::string name_;
    Shape3 in_;
    std::size_t out_c_, k_, stride_, pad_;
    std::size_t out_h_ = 0, out_w_ = 0;
    bool has_bias_;
    Mat w_, gw_;
    Vec b_, gb_;
    Mat col_;
    std::vector<std::int32_t> src_index_;
    bool param_grads_ = true;
};

class MaxPool2d final : public Layer {
public:
    MaxPool2d(Shape3 in, std::size_t size)
        : in_(in), size_(size), out_h_(in.h / size), out_w_(in.w / size) {
        if (out_h_ == 0 || out_w_ == 0) {
            throw std::invalid_argument("maxpool: input smaller than pool window");
        }
    }

    Mat forward(const Mat& x, bool) override {
        const auto batch = x.rows();
        const std::size_t out_pos = out_h_ * out_w_;
        Mat y(batch, static_cast<Eigen::Index>(in_.c * out_pos));
        argmax_.resize(static_cast<std::size_t>(batch) * in_.c * out_pos);
        for (Eigen::Index b = 0; b < batch; ++b) {
            const double* src = x.row(b).data();
            for (std::size_t c = 0; c < in_.c; ++c) {
                for (std::size_t oy = 0; oy < out_h_; ++oy) {
                    for (std::size_t ox = 0; ox < out_w_; ++ox) {
                        double best = -1e300;
                        std::size_t best_idx = 0;
                        for (std::size_t dy = 0; dy < size_; ++dy) {
                            for (std::size_t dx = 0; dx < size_; ++dx) {
                                const std::size_t idx =
                                    (c * in_.h + oy * size_ + dy) * in_.w + ox * size_ + dx;
                                if (src[idx] > best) {
                                    best = src[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        const std::size_t o = (c * out_h_ + oy) * out_w_ + ox;
                        y(b, static_cast<Eigen::Index>(o)) = best;
                        argmax_[static_cast<std::size_t>(b) * in_.c * out_pos + o] = best_idx;
                    }
                }
            }
        }
        return y;
    }

    Mat backward(const Mat& gy) override {
        const auto batch = gy.rows();
        const std::size_t out_pos = out_h_ * out_w_;
        Mat gx = Mat::Zero(batch, static_cast<Eigen::Index>(in_.numel()));
        for (Eigen::Index b = 0; b < batch; ++b) {
            double* dst = gx.row(b).data();
            for (std::size_t o = 0; o < in_.c * out_pos; ++o) {
                dst[argmax_[static_cast<std::size_t>(b) * in_.c * out_pos + o]] +=
                    gy(b, static_cast<Eigen::Index>(o));
            }
        }
        return gx;
    }

    Shape3 out_shape() const { return {in_.c, out_h_, out_w_}; }
    std::size_t out_size() const override { return in_.c * out_h_ * out_w_; }

    std::unique_ptr<Layer> clone() const override { return std::make_unique<MaxPool2d>(*this); }

    std::string describe() const override { return "maxpool " + std::to_string(size_); }

private:
    Shape3 in_;
    std::size_t size_, out_h_, out_w_;
    std::vector<std::size_t> argmax_;
};

class GlobalAvgPool final : public Layer {
public:
    explicit GlobalAvgPool(Shape3 in) : in_(in) {}

    Mat forward(const Mat& x, bool) override {
        const auto batch = x.rows();
        const std::size_t pos = in_.h * in_.w;
        Mat y(batch, static_cast<Eigen::Index>(in_.c));
        for (Eigen::Index b = 0; b < batch; ++b) {
            for (std::size_t c = 0; c < in_.c; ++c) {
                y(b, static_cast<Eigen::Index>(c)) =
                    x.row(b)
                        .segment(static_cast<Eigen::Index>(c * pos), static_cast<Eigen::Index>(pos))
                        .mean();
            }
        }
        return y;
    }

    Mat backward(const Mat& gy) override {
        const auto batch = gy.rows();
        const std::size_t pos = in_.h * in_.w;
        Mat gx(batch, static_cast<Eigen::Index>(in_.numel()));
        for (Eigen::Index b = 0; b < batch; ++b) {
            for (std::size_t c = 0; c < in_.c; ++c) {
                gx.row(b).segment(static_cast<Eigen::Index>(c * pos),
                                  static_cast<Eigen::Index>(pos))
                    .setConstant(gy(b, static_cast<Eigen::Index>(c)) / static_cast<double>(pos));
            }
        }
        return gx;
    }

    std::size_t out_size() const override { return in_.c; }

    std::unique_ptr<Layer> clone() const override { return std::make_unique<GlobalAvgPool>(*this); }

    std::string describe() const override { return "gap"; }

private:
    Shape3 in_;
};

class GlobalMaxPool final : public Layer {
public:
    explicit GlobalMaxPool(Shape3 in) : in_(in) {}

    Mat forward(const Mat& x, bool) override {
        const auto batch = x.rows();
        const std::size_t pos = in_.h * in_.w;
        Mat y(batch, static_cast<Eigen::Index>(in_.c));
        argmax_.resize(static_cast<std::size_t>(batch) * in_.c);
        for (Eigen::Index b = 0; b < batch; ++b) {
            for (std::size_t c = 0; c < in_.c; ++c) {
                Eigen::Index best = 0;
                y(b, static_cast<Eigen::Index>(c)) =
                    x.row(b)
                        .segment(static_cast<Eigen::Index>(c * pos), static_cast<Eigen::Index>(pos))
                        .maxCoeff(&best);
                argmax_[static_cast<std::size_t>(b) * in_.c + c] =
                    c * pos + static_cast<std::size_t>(best);
            }
        }
        return y;
    }

    Mat backward(const Mat& gy) override {
        const auto batch = gy.rows();
        Mat gx = Mat::Zero(batch, static_cast<Eigen::Index>(in_.numel()));
        for (Eigen::Index b = 0; b < batch; ++b) {
            for (std::size_t c = 0; c < in_.c; ++c) {
                gx(b, static_cast<Eigen::Index>(argmax_[static_cast<std::size_t>(b) * in_.c + c])) +=
                    gy(b, static_cast<Eigen::Index>(c));
            }
        }
        return gx;
    }

    std::size_t out_size() const override { return in_.c; }

    std::unique_ptr<Layer> clone() const override { return std::make_unique<GlobalMaxPool>(*this); }

    std::string describe() const override { return "gmp"; }

private:
    Shape3 in_;
    std::vector<std::size_t> argmax_;
};

// Per-channel batch normalization over batch and spatial positions. Biased
// variance everywhere; running stats updated with momentum 0.1.
class BatchNorm2d final : public Layer {
public:
    BatchNorm2d(std::string name, Shape3 in, double eps = 1e-5, double momentum = 0.1)
        : name_(std::move(name)),
          in_(in),
          eps_(eps),
          momentum_(momentum),
          gamma_(Vec::Ones(static_cast<Eigen::Index>(in.c))),
          beta_(Vec::Zero(static_cast<Eigen::Index>(in.c))),
          ggamma_(Vec::Zero(static_cast<Eigen::Index>(in.c))),
          gbeta_(Vec::Zero(static_cast<Eigen::Index>(in.c))),
          running_mean_(Vec::Zero(static_cast<Eigen::Index>(in.c))),
          running_var_(Vec::Ones(static_cast<Eigen::Index>(in.c))) {}

    Mat forward(const Mat& x, bool training) override {
        const auto batch = x.rows();
        const std::size_t pos = in_.h * in_.w;
        training_ = training;
        Mat y(batch, x.cols());
        if (training) {
            xhat_.resize(batch, x.cols());
            mean_.resize(static_cast<Eigen::Index>(in_.c));
            inv_std_.resize(static_cast<Eigen::Index>(in_.c));
            const double n = static_cast<double>(batch) * static_cast<double>(pos);
            for (std::size_t c = 0; c < in_.c; ++c) {
                double sum = 0.0, sq = 0.0;
                for (Eigen::Index b = 0; b < batch; ++b) {
                    const auto seg = x.row(b).segment(static_cast<Eigen::Index>(c * pos),
                                                      static_cast<Eigen::Index>(pos));
                    sum += seg.sum();
                    sq += seg.squaredNorm();
                }
                const double mu = sum / n;
                const double var = sq / n - mu * mu;
                mean_(static_cast<Eigen::Index>(c)) = mu;
                inv_std_(static_cast<Eigen::Index>(c)) = 1.0 / std::sqrt(var + eps_);
                if (update_running_) {
                    running_mean_(static_cast<Eigen::Index>(c)) =
                        (1.0 - momentum_) * running_mean_(static_cast<Eigen::Index>(c)) +
                        momentum_ * mu;
                    running_var_(static_cast<Eigen::Index>(c)) =
                        (1.0 - momentum_) * running_var_(static_cast<Eigen::Index>(c)) +
                        momentum_ * var;
                }
                for (Eigen::Index b = 0; b < batch; ++b) {
                    auto xseg = x.row(b).segment(static_cast<Eigen::Index>(c * pos),
                                                 static_cast<Eigen::Index>(pos));
                    auto hseg = xhat_.row(b).segment(static_cast<Eigen::Index>(c * pos),
                                                     static_cast<Eigen::Index>(pos));
                    hseg = ((xseg.array() - mu) * inv_std_(static_cast<Eigen::Index>(c))).matrix();
                    y.row(b).segment(static_cast<Eigen::Index>(c * pos),
                                     static_cast<Eigen::Index>(pos)) =
                        (gamma_(static_cast<Eigen::Index>(c)) * hseg.array() +
                         beta_(static_cast<Eigen::Index>(c)))
                            .matrix();
                }
            }
        } else {
            xhat_.resize(batch, x.cols());
            for (std::size_t c = 0; c < in_.c; ++c) {
                const double inv =
                    1.0 / std::sqrt(running_var_(static_cast<Eigen::Index>(c)) + eps_);
                eval_inv_std_resized(c, inv);
                for (Eigen::Index b = 0; b < batch; ++b) {
                    const auto xseg = x.row(b).segment(static_cast<Eigen::Index>(c * pos),
                                                       static_cast<Eigen::Index>(pos));
                    auto hseg = xhat_.row(b).segment(static_cast<Eigen::Index>(c * pos),
                                                     static_cast<Eigen::Index>(pos));
                    hseg = ((xseg.array() - running_mean_(static_cast<Eigen::Index>(c))) * inv)
                               .matrix();
                    y.row(b).segment(static_cast<Eigen::Index>(c * pos),
                                     static_cast<Eigen::Index>(pos)) =
                        (gamma_(static_cast<Eigen::Index>(c)) * hseg.array() +
                         beta_(static_cast<Eigen::Index>(c)))
                            .matrix();
                }
            }
        }
        return y;
    }

    Mat backward(const Mat& gy) override {
        const auto batch = gy.rows();
        const std::size_t pos = in_.h * in_.w;
        Mat gx(batch, gy.cols());
        if (!training_) {
            for (std::size_t c = 0; c < in_.c; ++c) {
                const double scale = gamma_(static_cast<Eigen::Index>(c)) * eval_inv_std_[c];
                double sum_gy = 0.0, sum_gy_xhat = 0.0;
                for (Eigen::Index b = 0; b < batch; ++b) {
                    const auto gseg = gy.row(b).segment(static_cast<Eigen::Index>(c * pos),
                                                        static_cast<Eigen::Index>(pos));
                    const auto hseg = xhat_.row(b).segment(static_cast<Eigen::Index>(c * pos),
                                                           static_cast<Eigen::Index>(pos));
                    sum_gy += gseg.sum();
                    sum_gy_xhat += gseg.cwiseProduct(hseg).sum();
                    gx.row(b).segment(static_cast<Eigen::Index>(c * pos),
                                      static_cast<Eigen::Index>(pos)) = gseg * scale;
                }
                if (param_grads_) {
                    ggamma_(static_cast<Eigen::Index>(c)) += sum_gy_xhat;
                    gbeta_(static_cast<Eigen::Index>(c)) += sum_gy;
                }
            }
            return gx;
        }
        const double n = static_cast<double>(batch) * static_cast<double>(pos);
        for (std::size_t c = 0; c < in_.c; ++c) {
            double sum_gy = 0.0, sum_gy_xhat = 0.0;
            for (Eigen::Index b = 0; b < batch; ++b) {
                const auto gseg = gy.row(b).segment(static_cast<Eigen::Index>(c * pos),
                                                    static_cast<Eigen::Index>(pos));
                const auto hseg = xhat_.row(b).segment(static_cast<Eigen::Index>(c * pos),
                                                       static_cast<Eigen::Index>(pos));
                sum_gy += gseg.sum();
                sum_gy_xhat += gseg.cwiseProduct(hseg).sum();
            }
            if (param_grads_) {
                ggamma_(static_cast<Eigen::Index>(c)) += sum_gy_xhat;
                gbeta_(static_cast<Eigen::Index>(c)) += sum_gy;
            }
            const double scale =
                gamma_(static_cast<Eigen::Index>(c)) * inv_std_(static_cast<Eigen::Index>(c));
            for (Eigen::Index b = 0; b < batch; ++b) {
                const auto gseg = gy.row(b).segment(static_cast<Eigen::Index>(c * pos),
                                                    static_cast<Eigen::Index>(pos));
                const auto hseg = xhat_.row(b).segment(static_cast<Eigen::Index>(c * pos),
                                                       static_cast<Eigen::Index>(pos));
                gx.row(b).segment(static_cast<Eigen::Index>(c * pos),
                                  static_cast<Eigen::Index>(pos)) =
                    (scale * (gseg.array() - sum_gy / n - hseg.array() * (sum_gy_xhat / n)))
                        .matrix();
            }
        }
        return gx;
    }

    void visit_params(const std::string& prefix, const ParamVisitor& fn) override {
        fn({prefix + name_ + ".gamma", gamma_.data(), ggamma_.data(),
            static_cast<std::size_t>(gamma_.size()), {in_.c}, false});
        fn({prefix + name_ + ".beta", beta_.data(), gbeta_.data(),
            static_cast<std::size_t>(beta_.size()), {in_.c}, false});
        fn({prefix + name_ + ".running_mean", running_mean_.data(), nullptr,
            static_cast<std::size_t>(running_mean_.size()), {in_.c}, true});
        fn({prefix + name_ + ".running_var", running_var_.data(), nullptr,
            static_cast<std::size_t>(running_var_.size()), {in_.c}, true});
    }

    void zero_grad() override {
        ggamma_.setZero();
        gbeta_.setZero();
    }

    void set_param_grads(bool enabled) override { param_grads_ = enabled; }

    void set_update_running_stats(bool enabled) override { update_running_ = enabled; }

    std::size_t out_size() const override { return in_.numel(); }

    std::unique_ptr<Layer> clone() const override { return std::make_unique<BatchNorm2d>(*this); }

    std::string describe() const override { return "bn " + std::to_string(in_.c); }

private:
    void eval_inv_std_resized(std::size_t c, double inv) {
        if (eval_inv_std_.size() != in_.c) eval_inv_std_.assign(in_.c, 0.0);
        eval_inv_std_[c] = inv;
    }

    std::string name_;
    Shape3 in_;
    double eps_, momentum_;
    Vec gamma_, beta_, ggamma_, gbeta_;
    Vec running_mean_, running_var_;
    Mat xhat_;
    Vec mean_, inv_std_;
    std::vector<double> eval_inv_std_;
    bool training_ = false;
    bool param_grads_ = true;
    bool update_running_ = true;
};

// ---------------------------------------------------------------------------

class Network {
public:
    Network() = default;
    Network(Network&&) = default;
    Network& operator=(Network&&) = default;

    Network(const Network& other) { *this = other; }
    Network& operator=(const Network& other) {
        if (this != &other) {
            layers_.clear();
            layers_.reserve(other.layers_.size());
            for (const auto& l : other.layers_) layers_.push_back(l->clone());
        }
        return *this;
    }

    template <typename L, typename... Args>
    L* emplace(Args&&... args) {
        auto layer = std::make_unique<L>(std::forward<Args>(args)...);
        L* raw = layer.get();
        layers_.push_back(std::move(layer));
        return raw;
    }

    void append(std::unique_ptr<Layer> layer) { layers_.push_back(std::move(layer)); }

    Mat forward(Mat x, bool training = false) {
        for (auto& l : layers_) x = l->forward(x, training);
        return x;
    }

    Mat backward(Mat gy) {
        for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) gy = (*it)->backward(gy);
        return gy;
    }

    void visit_params(const std::string& prefix, const ParamVisitor& fn) {
        for (auto& l : layers_) l->visit_params(prefix, fn);
    }

    void zero_grad() {
        for (auto& l : layers_) l->zero_grad();
    }

    void set_param_grads(bool enabled) {
        for (auto& l : layers_) l->set_param_grads(enabled);
    }

    void set_update_running_stats(bool enabled) {
        for (auto& l : layers_) l->set_update_running_stats(enabled);
    }

    bool empty() const { return layers_.empty(); }

    std::size_t out_size() const { return layers_.back()->out_size(); }

    std::string describe() const {
        std::string out;
        for (const auto& l : layers_) {
            if (!out.empty()) out += " | ";
            out += l->describe();
        }
        return out;
    }

private:
    std::vector<std::unique_ptr<Layer>> layers_;
};

// ---------------------------------------------------------------------------
// Residual blocks. PreActBlock is the wide-resnet style basic block
// (BN-ReLU-conv twice, shortcut taken from the post-activation when shapes
// change); PostActBlock is the classic resnet basic block.
// ---------------------------------------------------------------------------

class PreActBlock final : public Layer {
public:
    PreActBlock(std::string name, Shape3 in, std::size_t out_c, std::size_t stride, Rng& rng)
        : name_(std::move(name)), in_(in), equal_(in.c == out_c && stride == 1) {
        bn1_ = std::make_unique<BatchNorm2d>("bn1", in);
        relu1_ = std::make_unique<Relu>(in.numel());
        conv1_ = std::make_unique<Conv2d>("conv1", in, out_c, 3, stride, 1, rng);
        const Shape3 mid = conv1_->out_shape();
        bn2_ = std::make_unique<BatchNorm2d>("bn2", mid);
        relu2_ = std::make_unique<Relu>(mid.numel());
        conv2_ = std::make_unique<Conv2d>("conv2", mid, out_c, 3, 1, 1, rng);
        if (!equal_) {
            shortcut_ = std::make_unique<Conv2d>("shortcut", in, out_c, 1, stride, 0, rng);
        }
        out_ = conv2_->out_shape();
    }

    PreActBlock(const PreActBlock& other)
        : name_(other.name_), in_(other.in_), out_(other.out_), equal_(other.equal_) {
        bn1_ = std::make_unique<BatchNorm2d>(*other.bn1_);
        relu1_ = std::make_unique<Relu>(*other.relu1_);
        conv1_ = std::make_unique<Conv2d>(*other.conv1_);
        bn2_ = std::make_unique<BatchNorm2d>(*other.bn2_);
        relu2_ = std::make_unique<Relu>(*other.relu2_);
        conv2_ = std::make_unique<Conv2d>(*other.conv2_);
        if (other.shortcut_) shortcut_ = std::make_unique<Conv2d>(*other.shortcut_);
    }

    Mat forward(const Mat& x, bool training) override {
        const Mat a = relu1_->forward(bn1_->forward(x, training), training);
        Mat h = conv2_->forward(
            relu2_->forward(bn2_->forward(conv1_->forward(a, training), training), training),
            training);
        if (equal_) {
            h += x;
        } else {
            h += shortcut_->forward(a, training);
        }
        return h;
    }

    Mat backward(const Mat& gy) override {
        Mat ga = conv1_->backward(bn2_->backward(relu2_->backward(conv2_->backward(gy))));
        if (!equal_) ga += shortcut_->backward(gy);
        Mat gx = bn1_->backward(relu1_->backward(ga));
        if (equal_) gx += gy;
        return gx;
    }

    void visit_params(const std::string& prefix, const ParamVisitor& fn) override {
        const std::string p = prefix + name_ + ".";
        bn1_->visit_params(p, fn);
        conv1_->visit_params(p, fn);
        bn2_->visit_params(p, fn);
        conv2_->visit_params(p, fn);
        if (shortcut_) shortcut_->visit_params(p, fn);
    }

    void zero_grad() override {
        bn1_->zero_grad();
        conv1_->zero_grad();
        bn2_->zero_grad();
        conv2_->zero_grad();
        if (shortcut_) shortcut_->zero_grad();
    }

    void set_param_grads(bool enabled) override {
        bn1_->set_param_grads(enabled);
        conv1_->set_param_grads(enabled);
        bn2_->set_param_grads(enabled);
        conv2_->set_param_grads(enabled);
        if (shortcut_) shortcut_->set_param_grads(enabled);
    }

    void set_update_running_stats(bool enabled) override {
        bn1_->set_update_running_stats(enabled);
        bn2_->set_update_running_stats(enabled);
    }

    Shape3 out_shape() const { return out_; }
    std::size_t out_size() const override { return out_.numel(); }

    std::unique_ptr<Layer> clone() const override { return std::make_unique<PreActBlock>(*this); }

    std::string describe() const override {
        return "preact_block " + std::to_string(in_.c) + "->" + std::to_string(out_.c);
    }

private:
    std::string name_;
    Shape3 in_, out_;
    bool equal_;
    std::unique_ptr<BatchNorm2d> bn1_, bn2_;
    std::unique_ptr<Relu> relu1_, relu2_;
    std::unique_ptr<Conv2d> conv1_, conv2_, shortcut_;
};

class PostActBlock final : public Layer {
public:
    PostActBlock(std::string name, Shape3 in, std::size_t out_c, std::size_t stride, Rng& rng)
        : name_(std::move(name)), in_(in), equal_(in.c == out_c && stride == 1) {
        conv1_ = std::make_unique<Conv2d>("conv1", in, out_c, 3, stride, 1, rng);
        const Shape3 mid = conv1_->out_shape();
        bn1_ = std::make_unique<BatchNorm2d>("bn1", mid);
        relu1_ = std::make_unique<Relu>(mid.numel());
        conv2_ = std::make_unique<Conv2d>("conv2", mid, out_c, 3, 1, 1, rng);
        bn2_ = std::make_unique<BatchNorm2d>("bn2", mid);
        if (!equal_) {
            sc_conv_ = std::make_unique<Conv2d>("shortcut", in, out_c, 1, stride, 0, rng);
            sc_bn_ = std::make_unique<BatchNorm2d>("shortcut_bn", mid);
        }
        relu_out_ = std::make_unique<Relu>(mid.numel());
        out_ = mid;
    }

    PostActBlock(const PostActBlock& other)
        : name_(other.name_), in_(other.in_), out_(other.out_), equal_(other.equal_) {
        conv1_ = std::make_unique<Conv2d>(*other.conv1_);
        bn1_ = std::make_unique<BatchNorm2d>(*other.bn1_);
        relu1_ = std::make_unique<Relu>(*other.relu1_);
        conv2_ = std::make_unique<Conv2d>(*other.conv2_);
        bn2_ = std::make_unique<BatchNorm2d>(*other.bn2_);
        if (other.sc_conv_) sc_conv_ = std::make_unique<Conv2d>(*other.sc_conv_);
        if (other.sc_bn_) sc_bn_ = std::make_unique<BatchNorm2d>(*other.sc_bn_);
        relu_out_ = std::make_unique<Relu>(*other.relu_out_);
    }

    Mat forward(const Mat& x, bool training) override {
        Mat h = bn2_->forward(
            conv2_->forward(
                relu1_->forward(bn1_->forward(conv1_->forward(x, training), training), training),
                training),
            training);
        if (equal_) {
            h += x;
        } else {
            h += sc_bn_->forward(sc_conv_->forward(x, training), training);
        }
        return relu_out_->forward(h, training);
    }

    Mat backward(const Mat& gy) override {
        const Mat gh = relu_out_->backward(gy);
        Mat gx = conv1_->backward(
            bn1_->backward(relu1_->backward(conv2_->backward(bn2_->backward(gh)))));
        if (equal_) {
            gx += gh;
        } else {
            gx += sc_conv_->backward(sc_bn_->backward(gh));
        }
        return gx;
    }

    void visit_params(const std::string& prefix, const ParamVisitor& fn) override {
        const std::string p = prefix + name_ + ".";
        conv1_->visit_params(p, fn);
        bn1_->visit_params(p, fn);
        conv2_->visit_params(p, fn);
        bn2_->visit_params(p, fn);
        if (sc_conv_) sc_conv_->visit_params(p, fn);
        if (sc_bn_) sc_bn_->visit_params(p, fn);
    }

    void zero_grad() override {
        conv1_->zero_grad();
        bn1_->zero_grad();
        conv2_->zero_grad();
        bn2_->zero_grad();
        if (sc_conv_) sc_conv_->zero_grad();
        if (sc_bn_) sc_bn_->zero_grad();
    }

    void set_param_grads(bool enabled) override {
        conv1_->set_param_grads(enabled);
        bn1_->set_param_grads(enabled);
        conv2_->set_param_grads(enabled);
        bn2_->set_param_grads(enabled);
        if (sc_conv_) sc_conv_->set_param_grads(enabled);
        if (sc_bn_) sc_bn_->set_param_grads(enabled);
    }

    void set_update_running_stats(bool enabled) override {
        bn1_->set_update_running_stats(enabled);
        bn2_->set_update_running_stats(enabled);
        if (sc_bn_) sc_bn_->set_update_running_stats(enabled);
    }

    Shape3 out_shape() const { return out_; }
    std::size_t out_size() const override { return out_.numel(); }

    std::unique_ptr<Layer> clone() const override { return std::make_unique<PostActBlock>(*this); }

    std::string describe() const override {
        return "postact_block " + std::to_string(in_.c) + "->" + std::to_string(out_.c);
    }

private:
    std::string name_;
    Shape3 in_, out_;
    bool equal_;
    std::unique_ptr<Conv2d> conv1_, conv2_, sc_conv_;
    std::unique_ptr<BatchNorm2d> bn1_, bn2_, sc_bn_;
    std::unique_ptr<Relu> relu1_, relu_out_;
};

}  // namespace bdtk
