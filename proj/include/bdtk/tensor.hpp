#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace bdtk {

// Dense row-major tensor of doubles. Images are (C, H, W), masks are (H, W),
// feature matrices are (N, D). Compute happens in double; the on-disk blob
// format is float32 (see io.hpp).
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0)
        : shape_(std::move(shape)), data_(count(shape_), fill) {}

    static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape), 0.0); }

    static Tensor full(std::vector<std::size_t> shape, double value) {
        return Tensor(std::move(shape), value);
    }

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t numel() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& raw() { return data_; }
    const std::vector<double>& raw() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    // (C, H, W) accessors for images.
    double& at3(std::size_t c, std::size_t y, std::size_t x) {
        return data_[(c * shape_[1] + y) * shape_[2] + x];
    }
    double at3(std::size_t c, std::size_t y, std::size_t x) const {
        return data_[(c * shape_[1] + y) * shape_[2] + x];
    }

    // (H, W) accessors for masks.
    double& at2(std::size_t y, std::size_t x) { return data_[y * shape_[1] + x]; }
    double at2(std::size_t y, std::size_t x) const { return data_[y * shape_[1] + x]; }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    void clamp01() {
        for (double& v : data_) v = std::clamp(v, 0.0, 1.0);
    }

    double abs_sum() const {
        double s = 0.0;
        for (double v : data_) s += std::abs(v);
        return s;
    }

    double sum() const { return std::accumulate(data_.begin(), data_.end(), 0.0); }

    double max_abs_diff(const Tensor& other) const {
        double m = 0.0;
        for (std::size_t i = 0; i < data_.size(); ++i) {
            m = std::max(m, std::abs(data_[i] - other.data_[i]));
        }
        return m;
    }

    bool operator==(const Tensor& other) const {
        return shape_ == other.shape_ && data_ == other.data_;
    }

    static std::size_t count(const std::vector<std::size_t>& shape) {
        std::size_t n = shape.empty() ? 0 : 1;
        for (std::size_t d : shape) n *= d;
        return n;
    }

private:
    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

inline std::string shape_str(const std::vector<std::size_t>& s) {
    std::string out = "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ", ";
        out += std::to_string(s[i]);
    }
    out += ")";
    return out;
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* ctx) {
    if (!a.same_shape(b)) {
        throw std::invalid_argument(std::string(ctx) + ": shape mismatch " +
                                    shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
}

}  // namespace bdtk
