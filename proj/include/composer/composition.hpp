#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "composer/ops.hpp"
#include "composer/rng.hpp"
#include "composer/tensor.hpp"

namespace composer {

enum class Target : int { Q = 0, K = 1, V = 2, O = 3 };

inline const char* target_name(Target t) {
    switch (t) {
        case Target::Q: return "Q";
        case Target::K: return "K";
        case Target::V: return "V";
        case Target::O: return "O";
    }
    return "?";
}

inline Target target_from_name(const std::string& s) {
    if (s == "Q") return Target::Q;
    if (s == "K") return Target::K;
    if (s == "V") return Target::V;
    if (s == "O") return Target::O;
    throw std::runtime_error("unknown adaptation target '" + s + "' (expected Q, K, V or O)");
}

struct TargetKey {
    int layer = 0;
    Target target = Target::Q;

    bool operator==(const TargetKey& o) const { return layer == o.layer && target == o.target; }
    bool operator<(const TargetKey& o) const {
        if (layer != o.layer) return layer < o.layer;
        return static_cast<int>(target) < static_cast<int>(o.target);
    }
    std::string str() const { return "layer" + std::to_string(layer) + "." + target_name(target); }
};

template <typename T>
struct LowRankUpdate {
    Tensor<T> A;  // d x r
    Tensor<T> B;  // r x d
};

// Global instrumentation for the merge-once contract. An "inference
// application" is one denoiser forward pass executed under merged weights
// (i.e. one sampling step), not one per-target matmul.
struct Counters {
    static inline std::uint64_t merges = 0;
    static inline std::uint64_t inference_applications = 0;
    static inline std::uint64_t training_path_calls = 0;
    static inline std::uint64_t denoiser_calls = 0;

    static void reset() { merges = inference_applications = training_path_calls = denoiser_calls = 0; }
};

template <typename T>
struct UpdateSet {
    std::uint64_t id = 0;  // provenance: which generation produced it
    std::vector<TargetKey> keys;
    std::vector<LowRankUpdate<T>> updates;  // aligned with keys
    std::vector<Tensor<T>> gamma_act;       // aligned 1-element tensors; empty outside quant mode

    static std::uint64_t next_id() {
        static std::uint64_t n = 0;
        return ++n;
    }

    std::size_t size() const { return keys.size(); }

    const LowRankUpdate<T>* find(TargetKey k) const {
        for (std::size_t i = 0; i < keys.size(); ++i) {
            if (keys[i] == k) return &updates[i];
        }
        return nullptr;
    }

    const Tensor<T>* find_gamma(TargetKey k) const {
        if (gamma_act.empty()) return nullptr;
        for (std::size_t i = 0; i < keys.size(); ++i) {
            if (keys[i] == k) return &gamma_act[i];
        }
        return nullptr;
    }
};

template <typename T>
struct MergedWeights {
    std::uint64_t source_id = 0;  // UpdateSet that produced these weights
    std::vector<TargetKey> keys;
    std::vector<Tensor<T>> w;  // aligned: W' = W + AB per key

    const Tensor<T>* find(TargetKey k) const {
        for (std::size_t i = 0; i < keys.size(); ++i) {
            if (keys[i] == k) return &w[i];
        }
        return nullptr;
    }
};

namespace detail {

template <typename T>
void check_update_shape(const Tensor<T>& w, const LowRankUpdate<T>& u) {
    const bool ok = u.A.ndim() == 2 && u.B.ndim() == 2 && u.A.rows() == w.rows() &&
                    u.A.cols() == u.B.rows() && u.B.cols() == w.cols();
    if (!ok) {
        throw std::runtime_error("low-rank update A=" + shape_str(u.A.shape()) + " B=" +
                                 shape_str(u.B.shape()) + " inconsistent with W=" + shape_str(w.shape()));
    }
}

}  // namespace detail

// h = x W^T + (x B^T) A^T — the rank-r correction is applied right-to-left and
// the dense d x d product AB is never formed. Row convention: x is (n x d),
// h row i equals W x_i + A B x_i.
template <typename T>
Tensor<T> apply_training_path(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& w,
                              const LowRankUpdate<T>& u) {
    detail::check_update_shape(w, u);
    ++Counters::training_path_calls;
    Tensor<T> base = linear(tape, x, w);
    Tensor<T> bx = matmul_nt(tape, x, u.B);   // (n x r)
    Tensor<T> abx = matmul_nt(tape, bx, u.A); // (n x d)
    return add(tape, base, abx);
}

// W' = W + AB, materialized densely; W itself is untouched.
template <typename T>
Tensor<T> merge_one(const Tensor<T>& w, const LowRankUpdate<T>& u) {
    detail::check_update_shape(w, u);
    Tensor<T> wp = w.clone();
    mm_nn_acc(u.A.data(), u.B.data(), wp.data(), u.A.rows(), u.A.cols(), u.B.cols());
    return wp;
}

// Merges a whole UpdateSet against its frozen targets. One call = one merge
// event on the instrumentation counter, regardless of target count.
template <typename T>
MergedWeights<T> merge(const std::vector<Tensor<T>>& frozen, const UpdateSet<T>& set) {
    if (frozen.size() != set.size()) {
        throw std::runtime_error("merge: " + std::to_string(frozen.size()) + " frozen targets vs " +
                                 std::to_string(set.size()) + " updates");
    }
    MergedWeights<T> m;
    m.source_id = set.id;
    m.keys = set.keys;
    m.w.reserve(set.size());
    for (std::size_t i = 0; i < set.size(); ++i) {
        m.w.push_back(merge_one(frozen[i], set.updates[i]));
    }
    ++Counters::merges;
    return m;
}

// h = x W'^T, a single dense product; per-token cost independent of r.
template <typename T>
Tensor<T> apply_inference_path(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& w_merged) {
    return linear(tape, x, w_merged);
}

// max over n random probes of ||(Wx + ABx) - (W + AB)x||_inf
template <typename T>
T path_equivalence_check(const Tensor<T>& w, const LowRankUpdate<T>& u, int n_probes, SeededRng& rng) {
    if (n_probes < 1) throw std::runtime_error("path_equivalence_check: need at least one probe");
    Tensor<T> wp = merge_one(w, u);
    T worst = T(0);
    for (int p = 0; p < n_probes; ++p) {
        Tensor<T> x = Tensor<T>::randn({1, w.cols()}, rng);
        Tensor<T> ht = apply_training_path<T>(nullptr, x, w, u);
        Tensor<T> hi = apply_inference_path<T>(nullptr, x, wp);
        worst = std::max(worst, max_abs_diff(ht, hi));
    }
    return worst;
}

// Cost model (multiply-accumulates per token): the training path pays the
// dense product plus the two rank-r products; merged inference pays the dense
// product alone.
inline std::int64_t training_path_macs_per_token(std::int64_t d, std::int64_t r) { return d * d + 2 * d * r; }
inline std::int64_t inference_path_macs_per_token(std::int64_t d) { return d * d; }

}  // namespace composer
