#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "composer/tensor.hpp"

namespace composer {

// AdamW with decoupled weight decay: the decay multiplies the parameter
// directly, before the moment update, and never enters the moment estimates.
template <typename T>
class AdamW {
public:
    struct Hyper {
        T lr = T(1e-4);
        T beta1 = T(0.9);
        T beta2 = T(0.999);
        T eps = T(1e-8);
        T weight_decay = T(0.05);
    };

    explicit AdamW(Hyper h = {}) : h_(h) {}

    void add_param(std::string name, Tensor<T> p) {
        if (!p.requires_grad()) {
            throw std::runtime_error("adamw: parameter '" + name + "' does not require grad");
        }
        Slot s;
        s.name = std::move(name);
        s.p = std::move(p);
        s.m = Tensor<T>::zeros(s.p.shape());
        s.v = Tensor<T>::zeros(s.p.shape());
        slots_.push_back(std::move(s));
    }

    std::int64_t step_count() const { return t_; }
    const Hyper& hyper() const { return h_; }
    void set_lr(T lr) { h_.lr = lr; }

    std::size_t num_params() const { return slots_.size(); }
    std::int64_t num_elements() const {
        std::int64_t n = 0;
        for (const auto& s : slots_) n += s.p.numel();
        return n;
    }

    void zero_grad() {
        for (auto& s : slots_) s.p.zero_grad();
    }

    void step() {
        ++t_;
        const T bc1 = T(1) - std::pow(h_.beta1, static_cast<T>(t_));
        const T bc2 = T(1) - std::pow(h_.beta2, static_cast<T>(t_));
        for (auto& s : slots_) {
            T* p = s.p.data();
            const T* g = s.p.grad();
            T* m = s.m.data();
            T* v = s.v.data();
            for (std::int64_t i = 0; i < s.p.numel(); ++i) {
                if (!std::isfinite(static_cast<double>(g[i]))) {
                    throw std::runtime_error("adamw: non-finite gradient in parameter '" + s.name +
                                             "' at element " + std::to_string(i));
                }
                p[i] *= (T(1) - h_.lr * h_.weight_decay);
                m[i] = h_.beta1 * m[i] + (T(1) - h_.beta1) * g[i];
                v[i] = h_.beta2 * v[i] + (T(1) - h_.beta2) * g[i] * g[i];
                const T mhat = m[i] / bc1;
                const T vhat = v[i] / bc2;
                p[i] -= h_.lr * mhat / (std::sqrt(vhat) + h_.eps);
            }
        }
    }

private:
    struct Slot {
        std::string name;
        Tensor<T> p, m, v;
    };

    Hyper h_;
    std::int64_t t_ = 0;
    std::vector<Slot> slots_;
};

}  // namespace composer
