#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "composer/alloc.hpp"
#include "composer/rng.hpp"

namespace composer {

using Shape = std::vector<std::int64_t>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        os << s[i] << (i + 1 < s.size() ? "x" : "");
    }
    os << "]";
    return os.str();
}

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (const auto d : s) {
        if (d <= 0) throw std::runtime_error("tensor: non-positive dimension in " + shape_str(s));
        n *= d;
    }
    return n;
}

// Dense row-major tensor. Copies are shallow (storage is shared); values are
// treated as immutable once an op has produced them. A tensor that requires
// grad owns a same-shaped gradient buffer, zero until backward fills it.
template <typename T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape) : shape_(std::move(shape)) {
        data_ = make_block<T>(static_cast<std::size_t>(shape_numel(shape_)));
        grad_ = std::make_shared<std::shared_ptr<Block<T>>>();
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

    static Tensor full(Shape shape, T value) {
        Tensor t(std::move(shape));
        for (std::int64_t i = 0; i < t.numel(); ++i) t.data()[i] = value;
        return t;
    }

    static Tensor scalar(T value) { return full({1}, value); }

    static Tensor from(Shape shape, const std::vector<T>& values) {
        Tensor t(std::move(shape));
        if (static_cast<std::int64_t>(values.size()) != t.numel()) {
            throw std::runtime_error("tensor: value count " + std::to_string(values.size()) +
                                     " does not fill " + shape_str(t.shape()));
        }
        for (std::int64_t i = 0; i < t.numel(); ++i) t.data()[i] = values[static_cast<std::size_t>(i)];
        return t;
    }

    static Tensor randn(Shape shape, SeededRng& rng, T stddev = T(1)) {
        Tensor t(std::move(shape));
        for (std::int64_t i = 0; i < t.numel(); ++i) {
            t.data()[i] = static_cast<T>(rng.normal()) * stddev;
        }
        return t;
    }

    bool defined() const { return static_cast<bool>(data_); }
    const Shape& shape() const { return shape_; }
    std::int64_t numel() const { return data_ ? static_cast<std::int64_t>(data_->size()) : 0; }
    int ndim() const { return static_cast<int>(shape_.size()); }
    std::int64_t dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }

    std::int64_t rows() const {
        if (ndim() != 2) throw std::runtime_error("tensor: rows() on non-2d " + shape_str(shape_));
        return shape_[0];
    }
    std::int64_t cols() const {
        if (ndim() != 2) throw std::runtime_error("tensor: cols() on non-2d " + shape_str(shape_));
        return shape_[1];
    }

    // Tensors are shallow handles onto shared storage, so pointer access is
    // const-qualified the way shared_ptr's get() is.
    T* data() const { return data_->data(); }

    T& at(std::int64_t i) const { return data()[i]; }
    T& at(std::int64_t i, std::int64_t j) const { return data()[i * cols() + j]; }

    T value() const {
        if (numel() != 1) throw std::runtime_error("tensor: value() on non-scalar " + shape_str(shape_));
        return data()[0];
    }

    bool requires_grad() const { return grad_ && *grad_; }

    // Gradient state lives behind a second indirection shared by every
    // shallow copy, so flipping it on one handle (an optimizer slot, a tape
    // capture, a named_params() entry) is seen by all of them.
    Tensor& set_requires_grad(bool on) {
        if (!defined()) throw std::runtime_error("tensor: set_requires_grad on an undefined tensor");
        if (on && !*grad_) {
            *grad_ = make_block<T>(static_cast<std::size_t>(numel()));
        } else if (!on) {
            grad_->reset();
        }
        return *this;
    }

    T* grad() const { return requires_grad() ? (*grad_)->data() : nullptr; }

    void zero_grad() {
        if (!requires_grad()) return;
        T* g = (*grad_)->data();
        for (std::size_t i = 0; i < (*grad_)->size(); ++i) g[i] = T(0);
    }

    Tensor clone() const {
        Tensor t(shape_);
        for (std::int64_t i = 0; i < numel(); ++i) t.data()[i] = data()[i];
        return t;
    }

    // Same storage (values and grad), new shape. Grad-transparent, so it
    // never needs a tape node.
    Tensor reshaped(Shape shape) const {
        if (shape_numel(shape) != numel()) {
            throw std::runtime_error("tensor: cannot reshape " + shape_str(shape_) + " to " +
                                     shape_str(shape));
        }
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_ = data_;
        t.grad_ = grad_;
        return t;
    }

    bool all_finite() const {
        for (std::int64_t i = 0; i < numel(); ++i) {
            if (!std::isfinite(static_cast<double>(data()[i]))) return false;
        }
        return true;
    }

    bool same_values(const Tensor& other) const {
        if (shape_ != other.shape_) return false;
        for (std::int64_t i = 0; i < numel(); ++i) {
            if (data()[i] != other.data()[i]) return false;
        }
        return true;
    }

    T max_abs() const {
        T m = T(0);
        for (std::int64_t i = 0; i < numel(); ++i) {
            const T a = data()[i] < T(0) ? -data()[i] : data()[i];
            if (a > m) m = a;
        }
        return m;
    }

private:
    Shape shape_;
    std::shared_ptr<Block<T>> data_;
    std::shared_ptr<std::shared_ptr<Block<T>>> grad_;
};

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw std::runtime_error("max_abs_diff: shape mismatch " + shape_str(a.shape()) + " vs " +
                                 shape_str(b.shape()));
    }
    T m = T(0);
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        const T d = std::abs(a.data()[i] - b.data()[i]);
        if (d > m) m = d;
    }
    return m;
}

}  // namespace composer
