#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace ditlab {

struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Raised when an op produces NaN/Inf; carries the op name.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Dense row-major f64 tensor. The only value type in the library.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<size_t> shape)
        : shape_(std::move(shape)), data_(count(shape_), 0.0) {}

    Tensor(std::vector<size_t> shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (count(shape_) != data_.size()) {
            throw ShapeError("tensor: shape/data size mismatch");
        }
    }

    static Tensor zeros(std::vector<size_t> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<size_t> shape, double v) {
        Tensor t(std::move(shape));
        for (auto& x : t.data_) x = v;
        return t;
    }

    static Tensor ones(std::vector<size_t> shape) { return full(std::move(shape), 1.0); }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    static Tensor row_major(std::vector<size_t> shape, std::initializer_list<double> vals) {
        return Tensor(std::move(shape), std::vector<double>(vals));
    }

    const std::vector<size_t>& shape() const { return shape_; }
    size_t ndim() const { return shape_.size(); }
    size_t dim(size_t i) const { return shape_.at(i); }
    size_t numel() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& vec() { return data_; }
    const std::vector<double>& vec() const { return data_; }

    // 2-D helpers
    size_t rows() const { require_ndim(2, "rows"); return shape_[0]; }
    size_t cols() const { require_ndim(2, "cols"); return shape_[1]; }

    double& at(size_t i) { return data_[i]; }
    double at(size_t i) const { return data_[i]; }
    double& at(size_t i, size_t j) { return data_[i * shape_[1] + j]; }
    double at(size_t i, size_t j) const { return data_[i * shape_[1] + j]; }
    double& at(size_t i, size_t j, size_t k) { return data_[(i * shape_[1] + j) * shape_[2] + k]; }
    double at(size_t i, size_t j, size_t k) const { return data_[(i * shape_[1] + j) * shape_[2] + k]; }

    void fill(double v) { for (auto& x : data_) x = v; }

    Tensor reshaped(std::vector<size_t> shape) const {
        if (count(shape) != numel()) throw ShapeError("reshape: element count mismatch");
        return Tensor(std::move(shape), data_);
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (double v : data_) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }

    void require_finite(const char* op) const {
        if (!all_finite()) throw NumericError(std::string(op) + ": non-finite value produced");
    }

    static size_t count(const std::vector<size_t>& shape) {
        size_t n = 1;
        for (size_t s : shape) {
            if (s == 0) throw ShapeError("tensor: zero extent");
            n *= s;
        }
        return shape.empty() ? 0 : n;
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << "[";
        for (size_t i = 0; i < shape_.size(); ++i) os << (i ? "x" : "") << shape_[i];
        os << "]";
        return os.str();
    }

private:
    void require_ndim(size_t n, const char* what) const {
        if (shape_.size() != n) throw ShapeError(std::string(what) + ": expected " + std::to_string(n) + "-d tensor");
    }

    std::vector<size_t> shape_;
    std::vector<double> data_;
};

inline bool bit_equal(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    for (size_t i = 0; i < a.numel(); ++i) {
        if (a.at(i) != b.at(i)) return false;
    }
    return true;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw ShapeError("max_abs_diff: shape mismatch");
    double m = 0.0;
    for (size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a.at(i) - b.at(i)));
    return m;
}

inline double frobenius_norm(const Tensor& a) {
    double s = 0.0;
    for (size_t i = 0; i < a.numel(); ++i) s += a.at(i) * a.at(i);
    return std::sqrt(s);
}

}  // namespace ditlab
