#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "composer/tape.hpp"
#include "composer/tensor.hpp"

namespace composer {

template <typename T>
struct GradCheckReport {
    T max_rel_err = T(0);
    std::string worst;  // "param[index]" of the worst element
};

// Central-difference gradient check. loss_fn(tape) must rebuild the scalar
// loss from the current parameter values; it is called once with a tape for
// the analytic pass and twice per element for the numeric one.
template <typename T, typename LossFn>
GradCheckReport<T> check_gradients(std::vector<std::pair<std::string, Tensor<T>>> params, LossFn loss_fn,
                                   T h = T(1e-5)) {
    for (auto& [name, p] : params) p.zero_grad();
    Tape<T> tape;
    Tensor<T> loss = loss_fn(&tape);
    tape.backward(loss);

    std::vector<std::vector<T>> analytic;
    analytic.reserve(params.size());
    for (auto& [name, p] : params) {
        analytic.emplace_back(p.grad(), p.grad() + p.numel());
    }

    GradCheckReport<T> rep;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor<T>& p = params[pi].second;
        for (std::int64_t i = 0; i < p.numel(); ++i) {
            const T saved = p.data()[i];
            p.data()[i] = saved + h;
            const T lp = loss_fn(static_cast<Tape<T>*>(nullptr)).value();
            p.data()[i] = saved - h;
            const T lm = loss_fn(static_cast<Tape<T>*>(nullptr)).value();
            p.data()[i] = saved;
            const T gn = (lp - lm) / (T(2) * h);
            const T ga = analytic[pi][static_cast<std::size_t>(i)];
            const T rel = std::abs(ga - gn) / std::max({T(1), std::abs(ga), std::abs(gn)});
            if (rel > rep.max_rel_err) {
                rep.max_rel_err = rel;
                rep.worst = params[pi].first + "[" + std::to_string(i) + "]";
            }
        }
    }
    return rep;
}

}  // namespace composer
