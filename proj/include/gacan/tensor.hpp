#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "gacan/error.hpp"

namespace gacan {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& shape) {
    std::string s = "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + ")";
}

inline std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

/// Dense row-major array of doubles, rank 0 to 4.
class Tensor {
public:
    static constexpr std::size_t max_rank = 4;

    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
        check_shape();
        values_.assign(shape_size(shape_), fill);
    }

    Tensor(Shape shape, std::vector<double> values)
        : shape_(std::move(shape)), values_(std::move(values)) {
        check_shape();
        if (values_.size() != shape_size(shape_)) {
            throw DimensionError("tensor shape " + shape_str(shape_) + " needs " +
                                 std::to_string(shape_size(shape_)) + " values, got " +
                                 std::to_string(values_.size()));
        }
    }

    static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

    /// Rank-2 tensor from nested rows.
    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
        std::vector<double> v;
        std::size_t cols = rows.size() ? rows.begin()->size() : 0;
        for (const auto& r : rows) {
            if (r.size() != cols) throw DimensionError("ragged matrix literal");
            v.insert(v.end(), r.begin(), r.end());
        }
        return Tensor({rows.size(), cols}, std::move(v));
    }

    static Tensor vector(std::initializer_list<double> v) {
        return Tensor({v.size()}, std::vector<double>(v));
    }

    static Tensor identity(std::size_t n) {
        Tensor t({n, n});
        for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
        return t;
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return values_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    bool empty() const noexcept { return values_.empty(); }

    std::span<double> values() noexcept { return values_; }
    std::span<const double> values() const noexcept { return values_; }
    std::vector<double>& raw() noexcept { return values_; }
    const std::vector<double>& raw() const noexcept { return values_; }

    double& operator[](std::size_t i) { return values_[i]; }
    double operator[](std::size_t i) const { return values_[i]; }

    double& operator()(std::size_t i, std::size_t j) { return values_[i * shape_[1] + j]; }
    double operator()(std::size_t i, std::size_t j) const { return values_[i * shape_[1] + j]; }
    double& operator()(std::size_t i, std::size_t j, std::size_t k) {
        return values_[(i * shape_[1] + j) * shape_[2] + k];
    }
    double operator()(std::size_t i, std::size_t j, std::size_t k) const {
        return values_[(i * shape_[1] + j) * shape_[2] + k];
    }
    double& operator()(std::size_t i, std::size_t j, std::size_t k, std::size_t l) {
        return values_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
    }
    double operator()(std::size_t i, std::size_t j, std::size_t k, std::size_t l) const {
        return values_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
    }

    double item() const {
        if (values_.size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape_));
        return values_[0];
    }

    Tensor reshaped(Shape shape) const {
        if (shape_size(shape) != size()) {
            throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
        }
        return Tensor(std::move(shape), values_);
    }

    void fill(double v) { std::fill(values_.begin(), values_.end(), v); }

    bool all_finite() const {
        return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
    }

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape_ == b.shape_ && a.values_ == b.values_;
    }

private:
    void check_shape() const {
        if (shape_.size() > max_rank) {
            throw DimensionError("rank " + std::to_string(shape_.size()) + " exceeds 4: " + shape_str(shape_));
        }
        for (auto d : shape_) {
            if (d == 0) throw DimensionError("zero-sized axis in shape " + shape_str(shape_));
        }
    }

    Shape shape_;
    std::vector<double> values_;
};

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError("max_abs_diff shapes differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

} // namespace gacan
