#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "composer/tape.hpp"
#include "composer/tensor.hpp"

namespace composer {

// Cumulative signal coefficients gamma_t for the forward process
// x_t = sqrt(gamma_t) x + sqrt(1 - gamma_t) eps, t in {1..T}.
//
// Closed form (cosine schedule): gamma_t = f(t) / f(0) with
//   f(t) = cos^2( ((t/T + s) / (1 + s)) * pi/2 ),  s = 0.008.
// The tail is floored at 1e-5 (then nudged where needed) so gamma stays in
// (0,1) and strictly decreasing — the raw value at t = T underflows to ~1e-33,
// which would blow up the x0 reconstruction during sampling.
template <typename T>
class NoiseSchedule {
public:
    static NoiseSchedule cosine(std::int64_t num_steps, double s = 0.008) {
        if (num_steps < 1) throw std::runtime_error("schedule: need at least one timestep");
        NoiseSchedule sch;
        sch.gamma_.resize(static_cast<std::size_t>(num_steps));
        const double f0 = f(0.0, static_cast<double>(num_steps), s);
        constexpr double kFloor = 1e-5;
        for (std::int64_t t = 1; t <= num_steps; ++t) {
            double g = f(static_cast<double>(t), static_cast<double>(num_steps), s) / f0;
            g = std::max(g, kFloor);
            sch.gamma_[static_cast<std::size_t>(t - 1)] = static_cast<T>(g);
        }
        for (std::int64_t t = 1; t < num_steps; ++t) {
            T& cur = sch.gamma_[static_cast<std::size_t>(t)];
            const T prev = sch.gamma_[static_cast<std::size_t>(t - 1)];
            if (cur >= prev) cur = prev * (T(1) - T(1e-6));
        }
        for (std::size_t i = 0; i < sch.gamma_.size(); ++i) {
            if (!(sch.gamma_[i] > T(0) && sch.gamma_[i] < T(1))) {
                throw std::runtime_error("schedule: gamma out of (0,1) at t=" + std::to_string(i + 1));
            }
            if (i && !(sch.gamma_[i] < sch.gamma_[i - 1])) {
                throw std::runtime_error("schedule: gamma not strictly decreasing at t=" + std::to_string(i + 1));
            }
        }
        return sch;
    }

    std::int64_t num_steps() const { return static_cast<std::int64_t>(gamma_.size()); }

    T gamma_t(std::int64_t t) const {
        if (t < 1 || t > num_steps()) {
            throw std::runtime_error("schedule: t=" + std::to_string(t) + " outside [1," +
                                     std::to_string(num_steps()) + "]");
        }
        return gamma_[static_cast<std::size_t>(t - 1)];
    }

private:
    static double f(double t, double big_t, double s) {
        const double u = ((t / big_t) + s) / (1.0 + s);
        const double c = std::cos(u * 1.5707963267948966);
        return c * c;
    }

    std::vector<T> gamma_;
};

// x_t = sqrt(gamma_t) x + sqrt(1 - gamma_t) eps
template <typename T>
Tensor<T> noising(Tape<T>* tape, const Tensor<T>& x, std::int64_t t, const Tensor<T>& eps,
                  const NoiseSchedule<T>& sch) {
    if (x.shape() != eps.shape()) {
        throw std::runtime_error("noising: eps shape " + shape_str(eps.shape()) + " != x shape " +
                                 shape_str(x.shape()));
    }
    const T g = sch.gamma_t(t);
    return add(tape, scale(tape, x, std::sqrt(g)), scale(tape, eps, std::sqrt(T(1) - g)));
}

}  // namespace composer
