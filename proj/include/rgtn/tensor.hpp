#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace rgtn {

[[noreturn]] inline void fail(const std::string& msg) { throw std::invalid_argument(msg); }

// const char* overload keeps successful checks allocation-free; build
// dynamic messages lazily via fail() on the error path instead.
inline void check(bool cond, const char* msg) {
    if (!cond) throw std::invalid_argument(msg);
}

inline void check(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

// Dense row-major tensor of 64-bit reals. Plain value type; gradient tracking
// happens on a Tape (see tape.hpp), which references tensors by value.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0)
        : shape_(std::move(shape)),
          data_(static_cast<std::size_t>(shape_numel(shape_)), fill) {
        for (auto d : shape_)
            if (d <= 0) fail("Tensor: nonpositive dimension in " + shape_str(shape_));
    }

    Tensor(Shape shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (static_cast<std::int64_t>(data_.size()) != shape_numel(shape_))
            fail("Tensor: data length " + std::to_string(data_.size()) +
                 " does not match shape " + shape_str(shape_));
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    const Shape& shape() const { return shape_; }
    std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
    std::size_t rank() const { return shape_.size(); }

    std::int64_t dim(std::size_t i) const { return shape_.at(i); }

    // 2-D views: rank-1 tensors count as a single row.
    std::int64_t rows() const { return rank() <= 1 ? 1 : shape_[0]; }
    std::int64_t cols() const { return rank() == 0 ? 1 : shape_.back(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& vec() { return data_; }
    const std::vector<double>& vec() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double& at(std::int64_t r, std::int64_t c) { return data_[static_cast<std::size_t>(r * cols() + c)]; }
    double at(std::int64_t r, std::int64_t c) const { return data_[static_cast<std::size_t>(r * cols() + c)]; }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool operator==(const Tensor& o) const {
        return shape_ == o.shape_ && data_ == o.data_;
    }

private:
    Shape shape_;
    std::vector<double> data_;
};

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    check(a.same_shape(b), "max_abs_diff: shape mismatch " + shape_str(a.shape()) +
                               " vs " + shape_str(b.shape()));
    double m = 0.0;
    for (std::int64_t i = 0; i < a.numel(); ++i)
        m = std::max(m, std::fabs(a[static_cast<std::size_t>(i)] - b[static_cast<std::size_t>(i)]));
    return m;
}

}  // namespace rgtn
