#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "composer/tensor.hpp"

namespace composer {

// Cyclic Jacobi eigendecomposition of a symmetric matrix (done in double no
// matter the input precision). Returns eigenvalues in descending order;
// optionally fills eigenvectors as columns of V (row-major n x n).
inline std::vector<double> eigh_sym(std::vector<double> a, std::int64_t n,
                                    std::vector<double>* vecs = nullptr) {
    if (static_cast<std::int64_t>(a.size()) != n * n) throw std::runtime_error("eigh_sym: bad matrix size");
    std::vector<double> v;
    if (vecs) {
        v.assign(static_cast<std::size_t>(n * n), 0.0);
        for (std::int64_t i = 0; i < n; ++i) v[static_cast<std::size_t>(i * n + i)] = 1.0;
    }
    auto off_norm = [&]() {
        double s = 0.0;
        for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t j = i + 1; j < n; ++j) s += a[static_cast<std::size_t>(i * n + j)] * a[static_cast<std::size_t>(i * n + j)];
        return std::sqrt(2.0 * s);
    };
    double fro = 0.0;
    for (double x : a) fro += x * x;
    fro = std::sqrt(fro);
    const double tol = std::max(1e-300, 1e-13 * fro);
    for (int sweep = 0; sweep < 100 && off_norm() > tol; ++sweep) {
        for (std::int64_t p = 0; p < n; ++p) {
            for (std::int64_t q = p + 1; q < n; ++q) {
                const double apq = a[static_cast<std::size_t>(p * n + q)];
                if (std::abs(apq) < 1e-300) continue;
                const double app = a[static_cast<std::size_t>(p * n + p)];
                const double aqq = a[static_cast<std::size_t>(q * n + q)];
                const double theta = (aqq - app) / (2.0 * apq);
                const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (std::int64_t k = 0; k < n; ++k) {
                    const double akp = a[static_cast<std::size_t>(k * n + p)];
                    const double akq = a[static_cast<std::size_t>(k * n + q)];
                    a[static_cast<std::size_t>(k * n + p)] = c * akp - s * akq;
                    a[static_cast<std::size_t>(k * n + q)] = s * akp + c * akq;
                }
                for (std::int64_t k = 0; k < n; ++k) {
                    const double apk = a[static_cast<std::size_t>(p * n + k)];
                    const double aqk = a[static_cast<std::size_t>(q * n + k)];
                    a[static_cast<std::size_t>(p * n + k)] = c * apk - s * aqk;
                    a[static_cast<std::size_t>(q * n + k)] = s * apk + c * aqk;
                }
                if (vecs) {
                    for (std::int64_t k = 0; k < n; ++k) {
                        const double vkp = v[static_cast<std::size_t>(k * n + p)];
                        const double vkq = v[static_cast<std::size_t>(k * n + q)];
                        v[static_cast<std::size_t>(k * n + p)] = c * vkp - s * vkq;
                        v[static_cast<std::size_t>(k * n + q)] = s * vkp + c * vkq;
                    }
                }
            }
        }
    }
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    std::sort(order.begin(), order.end(), [&](std::int64_t x, std::int64_t y) {
        return a[static_cast<std::size_t>(x * n + x)] > a[static_cast<std::size_t>(y * n + y)];
    });
    std::vector<double> evals(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) evals[static_cast<std::size_t>(i)] = a[static_cast<std::size_t>(order[static_cast<std::size_t>(i)] * n + order[static_cast<std::size_t>(i)])];
    if (vecs) {
        vecs->assign(static_cast<std::size_t>(n * n), 0.0);
        for (std::int64_t j = 0; j < n; ++j) {
            const std::int64_t src = order[static_cast<std::size_t>(j)];
            for (std::int64_t i = 0; i < n; ++i) {
                (*vecs)[static_cast<std::size_t>(i * n + j)] = v[static_cast<std::size_t>(i * n + src)];
            }
        }
    }
    return evals;
}

// Singular values of an arbitrary (m x n) matrix, descending, via the
// eigenvalues of the smaller Gram matrix.
template <typename T>
std::vector<double> singular_values(const Tensor<T>& m) {
    if (m.ndim() != 2) throw std::runtime_error("singular_values: need 2d input, got " + shape_str(m.shape()));
    const std::int64_t rows = m.rows(), cols = m.cols();
    const bool use_cols = cols <= rows;
    const std::int64_t n = use_cols ? cols : rows;
    std::vector<double> gram(static_cast<std::size_t>(n * n), 0.0);
    for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t j = i; j < n; ++j) {
            double s = 0.0;
            if (use_cols) {
                for (std::int64_t k = 0; k < rows; ++k)
                    s += static_cast<double>(m.data()[k * cols + i]) * static_cast<double>(m.data()[k * cols + j]);
            } else {
                for (std::int64_t k = 0; k < cols; ++k)
                    s += static_cast<double>(m.data()[i * cols + k]) * static_cast<double>(m.data()[j * cols + k]);
            }
            gram[static_cast<std::size_t>(i * n + j)] = s;
            gram[static_cast<std::size_t>(j * n + i)] = s;
        }
    }
    std::vector<double> evals = eigh_sym(std::move(gram), n);
    for (double& e : evals) e = std::sqrt(std::max(0.0, e));
    return evals;
}

// Symmetric PSD square root via eigendecomposition, negative eigenvalues
// clamped to zero. Row-major n x n in, same out.
inline std::vector<double> sqrtm_psd(const std::vector<double>& a, std::int64_t n) {
    std::vector<double> vecs;
    std::vector<double> evals = eigh_sym(a, n, &vecs);
    std::vector<double> out(static_cast<std::size_t>(n * n), 0.0);
    for (std::int64_t k = 0; k < n; ++k) {
        const double s = std::sqrt(std::max(0.0, evals[static_cast<std::size_t>(k)]));
        if (s == 0.0) continue;
        for (std::int64_t i = 0; i < n; ++i) {
            const double vik = vecs[static_cast<std::size_t>(i * n + k)] * s;
            if (vik == 0.0) continue;
            for (std::int64_t j = 0; j < n; ++j) {
                out[static_cast<std::size_t>(i * n + j)] += vik * vecs[static_cast<std::size_t>(j * n + k)];
            }
        }
    }
    return out;
}

}  // namespace composer
