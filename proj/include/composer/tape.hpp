#pragma once

#include <functional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "composer/tensor.hpp"

namespace composer {

// Reverse-mode tape. Ops that participate in a differentiable computation
// record one backward closure each; backward() seeds d(loss)=1 and replays
// the closures last-to-first. Passing a null tape to any op disables
// recording entirely, which is the inference path.
template <typename T>
class Tape {
public:
    void record(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }

    std::size_t size() const { return nodes_.size(); }

    void backward(Tensor<T>& loss) {
        if (loss.numel() != 1) {
            throw std::runtime_error("tape: backward needs a scalar loss, got " + shape_str(loss.shape()));
        }
        if (!loss.requires_grad()) {
            throw std::runtime_error("tape: loss does not require grad");
        }
        loss.grad()[0] = T(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    }

    void clear() { nodes_.clear(); }

private:
    std::vector<std::function<void()>> nodes_;
};

}  // namespace composer
