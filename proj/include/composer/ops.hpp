#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "composer/tape.hpp"
#include "composer/tensor.hpp"

// Differentiable primitives. Every op takes the tape first; a null tape means
// forward-only (the inference path) and records nothing. Outputs require grad
// exactly when a tape is present and some input requires grad. Backward
// closures accumulate into existing grad buffers, so parameter grads sum
// naturally across a batch of recorded steps.

namespace composer {

// ---- raw accumulate kernels (row-major, caller owns zeroing) ----

template <typename T>
void mm_nn_acc(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i) {
        const T* ai = a + i * k;
        T* ci = c + i * n;
        for (std::int64_t p = 0; p < k; ++p) {
            const T av = ai[p];
            if (av == T(0)) continue;
            const T* bp = b + p * n;
            for (std::int64_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// c (m x n) += a (m x k) * b^T, with b stored (n x k)
template <typename T>
void mm_nt_acc(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i) {
        const T* ai = a + i * k;
        T* ci = c + i * n;
        for (std::int64_t j = 0; j < n; ++j) {
            const T* bj = b + j * k;
            T s = T(0);
            for (std::int64_t p = 0; p < k; ++p) s += ai[p] * bj[p];
            ci[j] += s;
        }
    }
}

// c (k x n) += a^T * b, with a stored (m x k), b stored (m x n)
template <typename T>
void mm_tn_acc(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i) {
        const T* ai = a + i * k;
        const T* bi = b + i * n;
        for (std::int64_t p = 0; p < k; ++p) {
            const T av = ai[p];
            if (av == T(0)) continue;
            T* cp = c + p * n;
            for (std::int64_t j = 0; j < n; ++j) cp[j] += av * bi[j];
        }
    }
}

namespace detail {

template <typename T>
bool want_grad(Tape<T>* tape, std::initializer_list<const Tensor<T>*> inputs) {
    if (!tape) return false;
    for (const auto* t : inputs) {
        if (t && t->requires_grad()) return true;
    }
    return false;
}

inline void check(bool ok, const std::string& what) {
    if (!ok) throw std::runtime_error(what);
}

}  // namespace detail

// ---- elementwise ----

template <typename T>
Tensor<T> add(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
    detail::check(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> out(a.shape());
    for (std::int64_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
    if (detail::want_grad(tape, {&a, &b})) {
        out.set_requires_grad(true);
        tape->record([a, b, out]() mutable {
            for (std::int64_t i = 0; i < out.numel(); ++i) {
                const T g = out.grad()[i];
                if (a.grad()) a.grad()[i] += g;
                if (b.grad()) b.grad()[i] += g;
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> sub(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
    detail::check(a.shape() == b.shape(), "sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> out(a.shape());
    for (std::int64_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] - b.data()[i];
    if (detail::want_grad(tape, {&a, &b})) {
        out.set_requires_grad(true);
        tape->record([a, b, out]() mutable {
            for (std::int64_t i = 0; i < out.numel(); ++i) {
                const T g = out.grad()[i];
                if (a.grad()) a.grad()[i] += g;
                if (b.grad()) b.grad()[i] -= g;
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> mul(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
    detail::check(a.shape() == b.shape(), "mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> out(a.shape());
    for (std::int64_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
    if (detail::want_grad(tape, {&a, &b})) {
        out.set_requires_grad(true);
        tape->record([a, b, out]() mutable {
            for (std::int64_t i = 0; i < out.numel(); ++i) {
                const T g = out.grad()[i];
                if (a.grad()) a.grad()[i] += g * b.data()[i];
                if (b.grad()) b.grad()[i] += g * a.data()[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> scale(Tape<T>* tape, const Tensor<T>& a, T c) {
    Tensor<T> out(a.shape());
    for (std::int64_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] * c;
    if (detail::want_grad(tape, {&a})) {
        out.set_requires_grad(true);
        tape->record([a, out, c]() mutable {
            for (std::int64_t i = 0; i < out.numel(); ++i) a.grad()[i] += out.grad()[i] * c;
        });
    }
    return out;
}

// x * s where s is a learnable 1-element tensor
template <typename T>
Tensor<T> mul_scalar(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& s) {
    detail::check(s.numel() == 1, "mul_scalar: scale must be a 1-element tensor, got " + shape_str(s.shape()));
    const T sv = s.data()[0];
    Tensor<T> out(a.shape());
    for (std::int64_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] * sv;
    if (detail::want_grad(tape, {&a, &s})) {
        out.set_requires_grad(true);
        tape->record([a, s, out, sv]() mutable {
            T ds = T(0);
            for (std::int64_t i = 0; i < out.numel(); ++i) {
                const T g = out.grad()[i];
                if (a.grad()) a.grad()[i] += g * sv;
                ds += g * a.data()[i];
            }
            if (s.grad()) s.grad()[0] += ds;
        });
    }
    return out;
}

// ---- matmul family ----

template <typename T>
Tensor<T> matmul(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
    detail::check(a.ndim() == 2 && b.ndim() == 2 && a.cols() == b.rows(),
                  "matmul: bad shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const std::int64_t m = a.rows(), k = a.cols(), n = b.cols();
    Tensor<T> out({m, n});
    mm_nn_acc(a.data(), b.data(), out.data(), m, k, n);
    if (detail::want_grad(tape, {&a, &b})) {
        out.set_requires_grad(true);
        tape->record([a, b, out, m, k, n]() mutable {
            if (a.grad()) mm_nt_acc(out.grad(), b.data(), a.grad(), m, n, k);  // dA += dC * B^T
            if (b.grad()) mm_tn_acc(a.data(), out.grad(), b.grad(), m, k, n);  // dB += A^T * dC
        });
    }
    return out;
}

// a (m x k) times b^T with b stored (n x k)
template <typename T>
Tensor<T> matmul_nt(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
    detail::check(a.ndim() == 2 && b.ndim() == 2 && a.cols() == b.cols(),
                  "matmul_nt: bad shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
    const std::int64_t m = a.rows(), k = a.cols(), n = b.rows();
    Tensor<T> out({m, n});
    mm_nt_acc(a.data(), b.data(), out.data(), m, k, n);
    if (detail::want_grad(tape, {&a, &b})) {
        out.set_requires_grad(true);
        tape->record([a, b, out, m, k, n]() mutable {
            if (a.grad()) mm_nn_acc(out.grad(), b.data(), a.grad(), m, n, k);  // dA += dC * B
            if (b.grad()) mm_tn_acc(out.grad(), a.data(), b.grad(), m, n, k);  // dB += dC^T * A
        });
    }
    return out;
}

// y = x W^T + bias, with w stored (d_out x d_in); bias optional
template <typename T>
Tensor<T> linear(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias = nullptr) {
    detail::check(x.ndim() == 2 && w.ndim() == 2 && x.cols() == w.cols(),
                  "linear: bad shapes x=" + shape_str(x.shape()) + " w=" + shape_str(w.shape()));
    const std::int64_t n = x.rows(), din = x.cols(), dout = w.rows();
    if (bias) {
        detail::check(bias->numel() == dout, "linear: bias size " + std::to_string(bias->numel()) +
                                                 " != d_out " + std::to_string(dout));
    }
    Tensor<T> out({n, dout});
    mm_nt_acc(x.data(), w.data(), out.data(), n, din, dout);
    if (bias) {
        for (std::int64_t i = 0; i < n; ++i) {
            T* oi = out.data() + i * dout;
            for (std::int64_t j = 0; j < dout; ++j) oi[j] += bias->data()[j];
        }
    }
    const Tensor<T> b = bias ? *bias : Tensor<T>();
    if (detail::want_grad(tape, {&x, &w, bias})) {
        out.set_requires_grad(true);
        tape->record([x, w, b, out, n, din, dout]() mutable {
            if (x.grad()) mm_nn_acc(out.grad(), w.data(), x.grad(), n, dout, din);  // dX += dY * W
            if (w.grad()) mm_tn_acc(out.grad(), x.data(), w.grad(), n, dout, din);  // dW += dY^T * X
            if (b.defined() && b.grad()) {
                for (std::int64_t i = 0; i < n; ++i) {
                    const T* gi = out.grad() + i * dout;
                    for (std::int64_t j = 0; j < dout; ++j) b.grad()[j] += gi[j];
                }
            }
        });
    }
    return out;
}

// ---- nonlinearities ----

template <typename T>
Tensor<T> gelu(Tape<T>* tape, const Tensor<T>& x) {
    Tensor<T> out(x.shape());
    const T inv_sqrt2 = T(0.70710678118654752440);
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        const T v = x.data()[i];
        out.data()[i] = T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2));
    }
    if (detail::want_grad(tape, {&x})) {
        out.set_requires_grad(true);
        tape->record([x, out, inv_sqrt2]() mutable {
            const T inv_sqrt2pi = T(0.39894228040143267794);
            for (std::int64_t i = 0; i < x.numel(); ++i) {
                const T v = x.data()[i];
                const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
                const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
                x.grad()[i] += out.grad()[i] * (cdf + v * pdf);
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> softplus(Tape<T>* tape, const Tensor<T>& x) {
    Tensor<T> out(x.shape());
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        const T v = x.data()[i];
        out.data()[i] = std::max(v, T(0)) + std::log1p(std::exp(-std::abs(v)));
    }
    if (detail::want_grad(tape, {&x})) {
        out.set_requires_grad(true);
        tape->record([x, out]() mutable {
            for (std::int64_t i = 0; i < x.numel(); ++i) {
                const T sig = T(1) / (T(1) + std::exp(-x.data()[i]));
                x.grad()[i] += out.grad()[i] * sig;
            }
        });
    }
    return out;
}

// Row-wise softmax restricted to positions where mask[i*cols+j] != 0.
// Disallowed positions get probability exactly zero. An empty mask means
// everything is allowed.
template <typename T>
Tensor<T> softmax_masked(Tape<T>* tape, const Tensor<T>& scores, const std::vector<std::uint8_t>& mask) {
    detail::check(scores.ndim() == 2, "softmax_masked: need 2d scores, got " + shape_str(scores.shape()));
    const std::int64_t rows = scores.rows(), cols = scores.cols();
    detail::check(mask.empty() || static_cast<std::int64_t>(mask.size()) == rows * cols,
                  "softmax_masked: mask size " + std::to_string(mask.size()) + " != " +
                      std::to_string(rows * cols));
    Tensor<T> out({rows, cols});
    for (std::int64_t i = 0; i < rows; ++i) {
        const T* si = scores.data() + i * cols;
        T* oi = out.data() + i * cols;
        const std::uint8_t* mi = mask.empty() ? nullptr : mask.data() + i * cols;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::int64_t j = 0; j < cols; ++j) {
            if (!mi || mi[j]) mx = std::max(mx, si[j]);
        }
        if (mx == -std::numeric_limits<T>::infinity()) continue;  // fully masked row -> zeros
        T sum = T(0);
        for (std::int64_t j = 0; j < cols; ++j) {
            if (!mi || mi[j]) {
                oi[j] = std::exp(si[j] - mx);
                sum += oi[j];
            }
        }
        const T inv = T(1) / sum;
        for (std::int64_t j = 0; j < cols; ++j) oi[j] *= inv;
    }
    if (detail::want_grad(tape, {&scores})) {
        out.set_requires_grad(true);
        tape->record([scores, out, rows, cols]() mutable {
            for (std::int64_t i = 0; i < rows; ++i) {
                const T* pi = out.data() + i * cols;
                const T* gi = out.grad() + i * cols;
                T dot = T(0);
                for (std::int64_t j = 0; j < cols; ++j) dot += pi[j] * gi[j];
                T* xi = scores.grad() + i * cols;
                for (std::int64_t j = 0; j < cols; ++j) xi[j] += pi[j] * (gi[j] - dot);
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> layernorm(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                    T eps = T(1e-5)) {
    detail::check(x.ndim() == 2, "layernorm: need 2d input, got " + shape_str(x.shape()));
    const std::int64_t n = x.rows(), d = x.cols();
    detail::check(gain.numel() == d && bias.numel() == d, "layernorm: gain/bias size != " + std::to_string(d));
    Tensor<T> out({n, d});
    Tensor<T> inv_sd({n, 1});
    for (std::int64_t i = 0; i < n; ++i) {
        const T* xi = x.data() + i * d;
        T mu = T(0);
        for (std::int64_t j = 0; j < d; ++j) mu += xi[j];
        mu /= T(d);
        T var = T(0);
        for (std::int64_t j = 0; j < d; ++j) {
            const T c = xi[j] - mu;
            var += c * c;
        }
        var /= T(d);
        const T inv = T(1) / std::sqrt(var + eps);
        inv_sd.data()[i] = inv;
        T* oi = out.data() + i * d;
        for (std::int64_t j = 0; j < d; ++j) oi[j] = gain.data()[j] * ((xi[j] - mu) * inv) + bias.data()[j];
    }
    if (detail::want_grad(tape, {&x, &gain, &bias})) {
        out.set_requires_grad(true);
        tape->record([x, gain, bias, out, inv_sd, n, d]() mutable {
            for (std::int64_t i = 0; i < n; ++i) {
                const T* xi = x.data() + i * d;
                const T* gi = out.grad() + i * d;
                const T inv = inv_sd.data()[i];
                T mu = T(0);
                for (std::int64_t j = 0; j < d; ++j) mu += xi[j];
                mu /= T(d);
                // xhat and the two row sums the input gradient needs
                T sum_gx = T(0), sum_gxh = T(0);
                for (std::int64_t j = 0; j < d; ++j) {
                    const T xh = (xi[j] - mu) * inv;
                    const T gxh = gi[j] * gain.data()[j];
                    sum_gx += gxh;
                    sum_gxh += gxh * xh;
                    if (gain.grad()) gain.grad()[j] += gi[j] * xh;
                    if (bias.grad()) bias.grad()[j] += gi[j];
                }
                if (x.grad()) {
                    T* dxi = x.grad() + i * d;
                    for (std::int64_t j = 0; j < d; ++j) {
                        const T xh = (xi[j] - mu) * inv;
                        const T gxh = gi[j] * gain.data()[j];
                        dxi[j] += inv * (gxh - (sum_gx + xh * sum_gxh) / T(d));
                    }
                }
            }
        });
    }
    return out;
}

// ---- gather / concat / slice ----

template <typename T>
Tensor<T> gather_rows(Tape<T>* tape, const Tensor<T>& x, const std::vector<std::int64_t>& idx) {
    detail::check(x.ndim() == 2, "gather_rows: need 2d input, got " + shape_str(x.shape()));
    const std::int64_t d = x.cols();
    Tensor<T> out({static_cast<std::int64_t>(idx.size()), d});
    for (std::size_t i = 0; i < idx.size(); ++i) {
        detail::check(idx[i] >= 0 && idx[i] < x.rows(), "gather_rows: index " + std::to_string(idx[i]) +
                                                            " out of range for " + shape_str(x.shape()));
        const T* src = x.data() + idx[i] * d;
        T* dst = out.data() + static_cast<std::int64_t>(i) * d;
        for (std::int64_t j = 0; j < d; ++j) dst[j] = src[j];
    }
    if (detail::want_grad(tape, {&x})) {
        out.set_requires_grad(true);
        tape->record([x, out, idx, d]() mutable {
            for (std::size_t i = 0; i < idx.size(); ++i) {
                const T* g = out.grad() + static_cast<std::int64_t>(i) * d;
                T* dst = x.grad() + idx[i] * d;
                for (std::int64_t j = 0; j < d; ++j) dst[j] += g[j];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> concat_rows(Tape<T>* tape, const std::vector<Tensor<T>>& parts) {
    detail::check(!parts.empty(), "concat_rows: no parts");
    const std::int64_t d = parts[0].cols();
    std::int64_t n = 0;
    for (const auto& p : parts) {
        detail::check(p.ndim() == 2 && p.cols() == d, "concat_rows: column mismatch at " + shape_str(p.shape()));
        n += p.rows();
    }
    Tensor<T> out({n, d});
    std::int64_t r = 0;
    for (const auto& p : parts) {
        for (std::int64_t i = 0; i < p.rows(); ++i) {
            const T* src = p.data() + i * d;
            T* dst = out.data() + (r + i) * d;
            for (std::int64_t j = 0; j < d; ++j) dst[j] = src[j];
        }
        r += p.rows();
    }
    bool any = false;
    for (const auto& p : parts) any = any || p.requires_grad();
    if (tape && any) {
        out.set_requires_grad(true);
        tape->record([parts, out, d]() mutable {
            std::int64_t r = 0;
            for (auto& p : parts) {
                if (p.grad()) {
                    for (std::int64_t i = 0; i < p.rows(); ++i) {
                        const T* g = out.grad() + (r + i) * d;
                        T* dst = p.grad() + i * d;
                        for (std::int64_t j = 0; j < d; ++j) dst[j] += g[j];
                    }
                }
                r += p.rows();
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> slice_rows(Tape<T>* tape, const Tensor<T>& x, std::int64_t r0, std::int64_t r1) {
    detail::check(x.ndim() == 2 && r0 >= 0 && r1 > r0 && r1 <= x.rows(),
                  "slice_rows: bad range [" + std::to_string(r0) + "," + std::to_string(r1) + ") for " +
                      shape_str(x.shape()));
    const std::int64_t d = x.cols();
    Tensor<T> out({r1 - r0, d});
    for (std::int64_t i = r0; i < r1; ++i) {
        const T* src = x.data() + i * d;
        T* dst = out.data() + (i - r0) * d;
        for (std::int64_t j = 0; j < d; ++j) dst[j] = src[j];
    }
    if (detail::want_grad(tape, {&x})) {
        out.set_requires_grad(true);
        tape->record([x, out, r0, r1, d]() mutable {
            for (std::int64_t i = r0; i < r1; ++i) {
                const T* g = out.grad() + (i - r0) * d;
                T* dst = x.grad() + i * d;
                for (std::int64_t j = 0; j < d; ++j) dst[j] += g[j];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> slice_cols(Tape<T>* tape, const Tensor<T>& x, std::int64_t c0, std::int64_t c1) {
    detail::check(x.ndim() == 2 && c0 >= 0 && c1 > c0 && c1 <= x.cols(),
                  "slice_cols: bad range [" + std::to_string(c0) + "," + std::to_string(c1) + ") for " +
                      shape_str(x.shape()));
    const std::int64_t n = x.rows(), d = x.cols(), w = c1 - c0;
    Tensor<T> out({n, w});
    for (std::int64_t i = 0; i < n; ++i) {
        const T* src = x.data() + i * d + c0;
        T* dst = out.data() + i * w;
        for (std::int64_t j = 0; j < w; ++j) dst[j] = src[j];
    }
    if (detail::want_grad(tape, {&x})) {
        out.set_requires_grad(true);
        tape->record([x, out, c0, n, d, w]() mutable {
            for (std::int64_t i = 0; i < n; ++i) {
                const T* g = out.grad() + i * w;
                T* dst = x.grad() + i * d + c0;
                for (std::int64_t j = 0; j < w; ++j) dst[j] += g[j];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> concat_cols(Tape<T>* tape, const std::vector<Tensor<T>>& parts) {
    detail::check(!parts.empty(), "concat_cols: no parts");
    const std::int64_t n = parts[0].rows();
    std::int64_t d = 0;
    for (const auto& p : parts) {
        detail::check(p.ndim() == 2 && p.rows() == n, "concat_cols: row mismatch at " + shape_str(p.shape()));
        d += p.cols();
    }
    Tensor<T> out({n, d});
    std::int64_t c = 0;
    for (const auto& p : parts) {
        const std::int64_t w = p.cols();
        for (std::int64_t i = 0; i < n; ++i) {
            const T* src = p.data() + i * w;
            T* dst = out.data() + i * d + c;
            for (std::int64_t j = 0; j < w; ++j) dst[j] = src[j];
        }
        c += w;
    }
    bool any = false;
    for (const auto& p : parts) any = any || p.requires_grad();
    if (tape && any) {
        out.set_requires_grad(true);
        tape->record([parts, out, n, d]() mutable {
            std::int64_t c = 0;
            for (auto& p : parts) {
                const std::int64_t w = p.cols();
                if (p.grad()) {
                    for (std::int64_t i = 0; i < n; ++i) {
                        const T* g = out.grad() + i * d + c;
                        T* dst = p.grad() + i * w;
                        for (std::int64_t j = 0; j < w; ++j) dst[j] += g[j];
                    }
                }
                c += w;
            }
        });
    }
    return out;
}

// ---- grouped (block-diagonal) attention products ----
// Sequences of `group` rows are stacked: row b*group+i is token i of sample b.
// Attention never crosses samples, so scores are (n x group) blocks.

// scores[bg+i][j] = dot(q[bg+i], k[bg+j])
template <typename T>
Tensor<T> bmm_nt_group(Tape<T>* tape, const Tensor<T>& q, const Tensor<T>& k, std::int64_t group) {
    detail::check(q.shape() == k.shape() && q.ndim() == 2 && group > 0 && q.rows() % group == 0,
                  "bmm_nt_group: bad shapes q=" + shape_str(q.shape()) + " k=" + shape_str(k.shape()) +
                      " group=" + std::to_string(group));
    const std::int64_t n = q.rows(), d = q.cols(), nb = n / group;
    Tensor<T> out({n, group});
    for (std::int64_t b = 0; b < nb; ++b) {
        mm_nt_acc(q.data() + b * group * d, k.data() + b * group * d, out.data() + b * group * group,
                  group, d, group);
    }
    if (detail::want_grad(tape, {&q, &k})) {
        out.set_requires_grad(true);
        tape->record([q, k, out, group, d, nb]() mutable {
            for (std::int64_t b = 0; b < nb; ++b) {
                const T* g = out.grad() + b * group * group;
                if (q.grad()) mm_nn_acc(g, k.data() + b * group * d, q.grad() + b * group * d, group, group, d);
                if (k.grad()) mm_tn_acc(g, q.data() + b * group * d, k.grad() + b * group * d, group, group, d);
            }
        });
    }
    return out;
}

// out[bg+i] = sum_j p[bg+i][j] * v[bg+j]
template <typename T>
Tensor<T> bmm_nn_group(Tape<T>* tape, const Tensor<T>& p, const Tensor<T>& v, std::int64_t group) {
    detail::check(p.ndim() == 2 && v.ndim() == 2 && p.cols() == group && p.rows() == v.rows() &&
                      p.rows() % group == 0,
                  "bmm_nn_group: bad shapes p=" + shape_str(p.shape()) + " v=" + shape_str(v.shape()) +
                      " group=" + std::to_string(group));
    const std::int64_t n = p.rows(), d = v.cols(), nb = n / group;
    Tensor<T> out({n, d});
    for (std::int64_t b = 0; b < nb; ++b) {
        mm_nn_acc(p.data() + b * group * group, v.data() + b * group * d, out.data() + b * group * d,
                  group, group, d);
    }
    if (detail::want_grad(tape, {&p, &v})) {
        out.set_requires_grad(true);
        tape->record([p, v, out, group, d, nb]() mutable {
            for (std::int64_t b = 0; b < nb; ++b) {
                const T* g = out.grad() + b * group * d;
                if (p.grad()) mm_nt_acc(g, v.data() + b * group * d, p.grad() + b * group * group, group, d, group);
                if (v.grad()) mm_tn_acc(p.data() + b * group * group, g, v.grad() + b * group * d, group, group, d);
            }
        });
    }
    return out;
}

// Adds e[i % period] to row i of x (per-token positional term shared across
// the stacked samples).
template <typename T>
Tensor<T> add_cyclic(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& e, std::int64_t period) {
    detail::check(x.ndim() == 2 && e.ndim() == 2 && x.cols() == e.cols() && e.rows() == period &&
                      x.rows() % period == 0,
                  "add_cyclic: x=" + shape_str(x.shape()) + " e=" + shape_str(e.shape()));
    const std::int64_t n = x.rows(), d = x.cols();
    Tensor<T> out({n, d});
    for (std::int64_t i = 0; i < n; ++i) {
        const T* xi = x.data() + i * d;
        const T* ei = e.data() + (i % period) * d;
        T* oi = out.data() + i * d;
        for (std::int64_t j = 0; j < d; ++j) oi[j] = xi[j] + ei[j];
    }
    if (detail::want_grad(tape, {&x, &e})) {
        out.set_requires_grad(true);
        tape->record([x, e, out, period, n, d]() mutable {
            for (std::int64_t i = 0; i < n; ++i) {
                const T* g = out.grad() + i * d;
                if (x.grad()) {
                    T* dst = x.grad() + i * d;
                    for (std::int64_t j = 0; j < d; ++j) dst[j] += g[j];
                }
                if (e.grad()) {
                    T* dst = e.grad() + (i % period) * d;
                    for (std::int64_t j = 0; j < d; ++j) dst[j] += g[j];
                }
            }
        });
    }
    return out;
}

// Adds e[i / group] to row i of x. Used to give every token of a sample that
// sample's conditioning vector.
template <typename T>
Tensor<T> add_per_group(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& e, std::int64_t group) {
    detail::check(x.ndim() == 2 && e.ndim() == 2 && x.cols() == e.cols() && group > 0 &&
                      x.rows() == e.rows() * group,
                  "add_per_group: x=" + shape_str(x.shape()) + " e=" + shape_str(e.shape()) + " group=" +
                      std::to_string(group));
    const std::int64_t n = x.rows(), d = x.cols();
    Tensor<T> out({n, d});
    for (std::int64_t i = 0; i < n; ++i) {
        const T* xi = x.data() + i * d;
        const T* ei = e.data() + (i / group) * d;
        T* oi = out.data() + i * d;
        for (std::int64_t j = 0; j < d; ++j) oi[j] = xi[j] + ei[j];
    }
    if (detail::want_grad(tape, {&x, &e})) {
        out.set_requires_grad(true);
        tape->record([x, e, out, group, n, d]() mutable {
            for (std::int64_t i = 0; i < n; ++i) {
                const T* g = out.grad() + i * d;
                if (x.grad()) {
                    T* dst = x.grad() + i * d;
                    for (std::int64_t j = 0; j < d; ++j) dst[j] += g[j];
                }
                if (e.grad()) {
                    T* dst = e.grad() + (i / group) * d;
                    for (std::int64_t j = 0; j < d; ++j) dst[j] += g[j];
                }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> transpose(Tape<T>* tape, const Tensor<T>& x) {
    detail::check(x.ndim() == 2, "transpose: need 2d input, got " + shape_str(x.shape()));
    const std::int64_t n = x.rows(), d = x.cols();
    Tensor<T> out({d, n});
    for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t j = 0; j < d; ++j) out.data()[j * n + i] = x.data()[i * d + j];
    }
    if (detail::want_grad(tape, {&x})) {
        out.set_requires_grad(true);
        tape->record([x, out, n, d]() mutable {
            for (std::int64_t i = 0; i < n; ++i) {
                for (std::int64_t j = 0; j < d; ++j) x.grad()[i * d + j] += out.grad()[j * n + i];
            }
        });
    }
    return out;
}

// ---- reductions / losses ----

template <typename T>
Tensor<T> sum_all(Tape<T>* tape, const Tensor<T>& x) {
    Tensor<T> out({1});
    T s = T(0);
    for (std::int64_t i = 0; i < x.numel(); ++i) s += x.data()[i];
    out.data()[0] = s;
    if (detail::want_grad(tape, {&x})) {
        out.set_requires_grad(true);
        tape->record([x, out]() mutable {
            const T g = out.grad()[0];
            for (std::int64_t i = 0; i < x.numel(); ++i) x.grad()[i] += g;
        });
    }
    return out;
}

// sum((a - b)^2) over all elements
template <typename T>
Tensor<T> sq_diff_sum(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
    detail::check(a.shape() == b.shape(), "sq_diff_sum: shape mismatch " + shape_str(a.shape()) + " vs " +
                                              shape_str(b.shape()));
    Tensor<T> out({1});
    T s = T(0);
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        const T d = a.data()[i] - b.data()[i];
        s += d * d;
    }
    out.data()[0] = s;
    if (detail::want_grad(tape, {&a, &b})) {
        out.set_requires_grad(true);
        tape->record([a, b, out]() mutable {
            const T g = out.grad()[0];
            for (std::int64_t i = 0; i < a.numel(); ++i) {
                const T d = T(2) * (a.data()[i] - b.data()[i]) * g;
                if (a.grad()) a.grad()[i] += d;
                if (b.grad()) b.grad()[i] -= d;
            }
        });
    }
    return out;
}

// Symmetric uniform fake-quantization: x_q = clamp(round(x/scale), -qmax, qmax) * scale
// with qmax = 2^(bits-1) - 1. Straight-through gradient: passes where the
// pre-clamp integer lies inside the grid, zero where clamped. bits >= 16 is
// full-precision passthrough. This op's backward is a surrogate by contract,
// not the (a.e. zero) true derivative of the staircase forward.
template <typename T>
Tensor<T> fake_quantize(Tape<T>* tape, const Tensor<T>& x, int bits, T quant_scale) {
    if (bits >= 16) {
        Tensor<T> out = x.clone();
        if (detail::want_grad(tape, {&x})) {
            out.set_requires_grad(true);
            tape->record([x, out]() mutable {
                for (std::int64_t i = 0; i < x.numel(); ++i) x.grad()[i] += out.grad()[i];
            });
        }
        return out;
    }
    detail::check(bits >= 2, "fake_quantize: bits must be >= 2, got " + std::to_string(bits));
    detail::check(quant_scale > T(0), "fake_quantize: scale must be positive");
    const T qmax = static_cast<T>((1 << (bits - 1)) - 1);
    Tensor<T> out(x.shape());
    std::vector<std::uint8_t> pass(static_cast<std::size_t>(x.numel()));
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        const T q = std::round(x.data()[i] / quant_scale);
        const bool inside = q >= -qmax && q <= qmax;
        pass[static_cast<std::size_t>(i)] = inside ? 1 : 0;
        out.data()[i] = (inside ? q : (q < T(0) ? -qmax : qmax)) * quant_scale;
    }
    if (detail::want_grad(tape, {&x})) {
        out.set_requires_grad(true);
        tape->record([x, out, pass = std::move(pass)]() mutable {
            for (std::int64_t i = 0; i < x.numel(); ++i) {
                if (pass[static_cast<std::size_t>(i)]) x.grad()[i] += out.grad()[i];
            }
        });
    }
    return out;
}

// ---- image <-> patch tokens ----

// (B x img*img) images to (B*np x patch*patch) patch rows, np = (img/patch)^2,
// patches in raster order, pixels within a patch in raster order.
template <typename T>
Tensor<T> patchify(Tape<T>* tape, const Tensor<T>& x, std::int64_t img, std::int64_t patch) {
    detail::check(x.ndim() == 2 && x.cols() == img * img && img % patch == 0,
                  "patchify: bad shapes x=" + shape_str(x.shape()) + " img=" + std::to_string(img) +
                      " patch=" + std::to_string(patch));
    const std::int64_t bsz = x.rows(), side = img / patch, np = side * side, pp = patch * patch;
    Tensor<T> out({bsz * np, pp});
    for (std::int64_t b = 0; b < bsz; ++b) {
        const T* im = x.data() + b * img * img;
        for (std::int64_t p = 0; p < np; ++p) {
            const std::int64_t pr = p / side, pc = p % side;
            T* dst = out.data() + (b * np + p) * pp;
            for (std::int64_t r = 0; r < patch; ++r) {
                const T* src = im + (pr * patch + r) * img + pc * patch;
                for (std::int64_t c = 0; c < patch; ++c) dst[r * patch + c] = src[c];
            }
        }
    }
    if (detail::want_grad(tape, {&x})) {
        out.set_requires_grad(true);
        tape->record([x, out, bsz, img, patch, side, np, pp]() mutable {
            for (std::int64_t b = 0; b < bsz; ++b) {
                T* im = x.grad() + b * img * img;
                for (std::int64_t p = 0; p < np; ++p) {
                    const std::int64_t pr = p / side, pc = p % side;
                    const T* g = out.grad() + (b * np + p) * pp;
                    for (std::int64_t r = 0; r < patch; ++r) {
                        T* dst = im + (pr * patch + r) * img + pc * patch;
                        for (std::int64_t c = 0; c < patch; ++c) dst[c] += g[r * patch + c];
                    }
                }
            }
        });
    }
    return out;
}

// inverse of patchify: (B*np x patch*patch) -> (B x img*img)
template <typename T>
Tensor<T> unpatchify(Tape<T>* tape, const Tensor<T>& x, std::int64_t img, std::int64_t patch) {
    const std::int64_t side = img / patch, np = side * side, pp = patch * patch;
    detail::check(x.ndim() == 2 && x.cols() == pp && x.rows() % np == 0 && img % patch == 0,
                  "unpatchify: bad shapes x=" + shape_str(x.shape()) + " img=" + std::to_string(img) +
                      " patch=" + std::to_string(patch));
    const std::int64_t bsz = x.rows() / np;
    Tensor<T> out({bsz, img * img});
    for (std::int64_t b = 0; b < bsz; ++b) {
        T* im = out.data() + b * img * img;
        for (std::int64_t p = 0; p < np; ++p) {
            const std::int64_t pr = p / side, pc = p % side;
            const T* src = x.data() + (b * np + p) * pp;
            for (std::int64_t r = 0; r < patch; ++r) {
                T* dst = im + (pr * patch + r) * img + pc * patch;
                for (std::int64_t c = 0; c < patch; ++c) dst[c] = src[r * patch + c];
            }
        }
    }
    if (detail::want_grad(tape, {&x})) {
        out.set_requires_grad(true);
        tape->record([x, out, bsz, img, patch, side, np, pp]() mutable {
            for (std::int64_t b = 0; b < bsz; ++b) {
                const T* im = out.grad() + b * img * img;
                for (std::int64_t p = 0; p < np; ++p) {
                    const std::int64_t pr = p / side, pc = p % side;
                    T* dst = x.grad() + (b * np + p) * pp;
                    for (std::int64_t r = 0; r < patch; ++r) {
                        const T* src = im + (pr * patch + r) * img + pc * patch;
                        for (std::int64_t c = 0; c < patch; ++c) dst[r * patch + c] += src[c];
                    }
                }
            }
        });
    }
    return out;
}

}  // namespace composer
