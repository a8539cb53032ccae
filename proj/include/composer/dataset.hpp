#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "composer/rng.hpp"
#include "composer/tensor.hpp"

namespace composer {

// Procedural class-conditional images, regenerable bit-exactly from the seed.
// Class c is an oriented sinusoid with frequency f_c = 1 + c/2 and angle
// theta_c = pi*c/C, evaluated on centered coordinates, with a per-sample
// phase jitter drawn from [-0.5, 0.5] rad — narrow enough that class means
// stay well separated — plus one random Gaussian blob and sigma = 0.05 pixel
// noise, clipped to [-1, 1]. Sample i belongs to class i mod C, so counts are
// balanced within one.
template <typename T>
struct SyntheticDataset {
    std::uint64_t seed = 0;
    std::int64_t image_size = 16;
    std::int64_t num_classes = 10;
    Tensor<T> images;  // N x (image_size^2)
    std::vector<std::int64_t> labels;

    std::int64_t size() const { return images.defined() ? images.rows() : 0; }
    std::int64_t pixels() const { return image_size * image_size; }

    const T* image(std::int64_t i) const { return images.data() + i * pixels(); }

    // sample i is validation iff i % 8 == 7
    std::vector<std::int64_t> train_indices() const {
        std::vector<std::int64_t> idx;
        for (std::int64_t i = 0; i < size(); ++i) {
            if (i % 8 != 7) idx.push_back(i);
        }
        return idx;
    }
    std::vector<std::int64_t> val_indices() const {
        std::vector<std::int64_t> idx;
        for (std::int64_t i = 0; i < size(); ++i) {
            if (i % 8 == 7) idx.push_back(i);
        }
        return idx;
    }
};

template <typename T>
SyntheticDataset<T> gen_synthetic_dataset(std::uint64_t seed, std::int64_t n, std::int64_t c,
                                          std::int64_t image_size = 16) {
    if (c < 2 || n < c) throw std::runtime_error("dataset: need N >= C >= 2");
    SyntheticDataset<T> ds;
    ds.seed = seed;
    ds.image_size = image_size;
    ds.num_classes = c;
    ds.images = Tensor<T>({n, image_size * image_size});
    ds.labels.resize(static_cast<std::size_t>(n));
    SeededRng root(seed);
    SeededRng rng = root.split("dataset");
    const double pi = 3.14159265358979323846;
    for (std::int64_t i = 0; i < n; ++i) {
        const std::int64_t cls = i % c;
        ds.labels[static_cast<std::size_t>(i)] = cls;
        const double freq = 1.0 + 0.5 * static_cast<double>(cls);
        const double theta = pi * static_cast<double>(cls) / static_cast<double>(c);
        const double ct = std::cos(theta), st = std::sin(theta);
        const double phase = rng.uniform(-0.5, 0.5);
        const double bx = rng.uniform(-0.3, 0.3), by = rng.uniform(-0.3, 0.3);
        const double bw = rng.uniform(0.1, 0.2);
        const double ba = rng.uniform(0.2, 0.5) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
        T* img = ds.images.data() + i * ds.pixels();
        for (std::int64_t py = 0; py < image_size; ++py) {
            for (std::int64_t px = 0; px < image_size; ++px) {
                const double u = (static_cast<double>(px) - 0.5 * (image_size - 1)) / image_size;
                const double v = (static_cast<double>(py) - 0.5 * (image_size - 1)) / image_size;
                double val = 0.8 * std::sin(2.0 * pi * freq * (u * ct + v * st) + phase);
                const double du = u - bx, dv = v - by;
                val += ba * std::exp(-(du * du + dv * dv) / (2.0 * bw * bw));
                val += 0.05 * rng.normal();
                img[py * image_size + px] = static_cast<T>(std::min(1.0, std::max(-1.0, val)));
            }
        }
    }
    return ds;
}

// Fixed 32-dim random-projection + tanh features per sample; similarity is
// cosine. The projection is derived from the dataset seed, so the index is a
// pure function of the dataset.
template <typename T>
class SimilarityIndex {
public:
    static constexpr std::int64_t kFeatureDim = 32;

    static SimilarityIndex build(const SyntheticDataset<T>& ds) {
        SimilarityIndex idx;
        const std::int64_t n = ds.size(), p = ds.pixels();
        SeededRng rng = SeededRng(ds.seed).split("simfeat");
        std::vector<double> proj(static_cast<std::size_t>(kFeatureDim * p));
        const double scl = 1.0 / std::sqrt(static_cast<double>(p));
        for (auto& x : proj) x = rng.normal() * scl;
        idx.feats_.assign(static_cast<std::size_t>(n * kFeatureDim), 0.0);
        for (std::int64_t i = 0; i < n; ++i) {
            const T* img = ds.image(i);
            for (std::int64_t f = 0; f < kFeatureDim; ++f) {
                double s = 0.0;
                const double* pr = proj.data() + f * p;
                for (std::int64_t j = 0; j < p; ++j) s += pr[j] * static_cast<double>(img[j]);
                idx.feats_[static_cast<std::size_t>(i * kFeatureDim + f)] = std::tanh(s);
            }
        }
        idx.n_ = n;
        return idx;
    }

    std::int64_t size() const { return n_; }

    double cosine(std::int64_t i, std::int64_t j) const {
        const double* a = feats_.data() + i * kFeatureDim;
        const double* b = feats_.data() + j * kFeatureDim;
        double num = 0.0, na = 0.0, nb = 0.0;
        for (std::int64_t f = 0; f < kFeatureDim; ++f) {
            num += a[f] * b[f];
            na += a[f] * a[f];
            nb += b[f] * b[f];
        }
        return num / std::sqrt(std::max(na * nb, 1e-300));
    }

    const double* features(std::int64_t i) const { return feats_.data() + i * kFeatureDim; }

    // all indices ranked by similarity to the anchor, most similar first
    // (anchor itself ranks first); ties broken by lower index
    std::vector<std::int64_t> ranked_by_similarity(std::int64_t anchor) const {
        std::vector<std::int64_t> order(static_cast<std::size_t>(n_));
        std::iota(order.begin(), order.end(), 0);
        std::vector<double> sim(static_cast<std::size_t>(n_));
        for (std::int64_t i = 0; i < n_; ++i) sim[static_cast<std::size_t>(i)] = cosine(anchor, i);
        std::stable_sort(order.begin(), order.end(), [&](std::int64_t a, std::int64_t b) {
            return sim[static_cast<std::size_t>(a)] > sim[static_cast<std::size_t>(b)];
        });
        return order;
    }

private:
    std::int64_t n_ = 0;
    std::vector<double> feats_;
};

enum class BatchMode { vanilla, full_class, context_class, context_similarity };

inline const char* batch_mode_name(BatchMode m) {
    switch (m) {
        case BatchMode::vanilla: return "vanilla";
        case BatchMode::full_class: return "full_class";
        case BatchMode::context_class: return "context_class";
        case BatchMode::context_similarity: return "context_similarity";
    }
    return "?";
}

inline BatchMode batch_mode_from_name(const std::string& s) {
    if (s == "vanilla") return BatchMode::vanilla;
    if (s == "full_class") return BatchMode::full_class;
    if (s == "context_class") return BatchMode::context_class;
    if (s == "context_similarity") return BatchMode::context_similarity;
    throw std::runtime_error("unknown batch pipeline '" + s + "'");
}

struct BatchSpec {
    double alpha = 0.75;
    std::int64_t b = 16;
    BatchMode mode = BatchMode::context_class;

    std::int64_t similar_count() const {
        const auto k = static_cast<std::int64_t>(std::ceil(alpha * static_cast<double>(b)));
        if (k > b) throw std::runtime_error("batch spec: ceil(alpha*b) > b");
        return k;
    }
};

namespace detail {

// k distinct uniform draws out of pool (order randomized)
inline std::vector<std::int64_t> draw_without_replacement(const std::vector<std::int64_t>& pool,
                                                          std::int64_t k, SeededRng& rng) {
    std::vector<std::int64_t> p = pool;
    std::vector<std::int64_t> out;
    out.reserve(static_cast<std::size_t>(k));
    for (std::int64_t i = 0; i < k; ++i) {
        const std::uint64_t j = rng.range(p.size());
        out.push_back(p[j]);
        p[j] = p.back();
        p.pop_back();
    }
    return out;
}

}  // namespace detail

// Batch construction. Context modes put the exact ceil(alpha*b) "similar"
// samples first: same-class draws for context_class, the anchor's nearest
// neighbors (anchor included, ties by index) for context_similarity. The
// dissimilar remainder comes from other classes / the farthest similarity
// quartile. Draws are without replacement within a batch.
template <typename T>
std::vector<std::int64_t> sample_batch(const SyntheticDataset<T>& ds, const SimilarityIndex<T>* index,
                                       const BatchSpec& spec, std::int64_t anchor, SeededRng& rng,
                                       const std::vector<std::int64_t>* restrict_to = nullptr) {
    std::vector<std::int64_t> all;
    if (restrict_to) {
        all = *restrict_to;
    } else {
        all.resize(static_cast<std::size_t>(ds.size()));
        std::iota(all.begin(), all.end(), 0);
    }
    const bool needs_anchor = spec.mode != BatchMode::vanilla;
    if (needs_anchor && (anchor < 0 || anchor >= ds.size())) {
        throw std::runtime_error("sample_batch: anchor required for mode " +
                                 std::string(batch_mode_name(spec.mode)));
    }
    const std::int64_t cls = needs_anchor ? ds.labels[static_cast<std::size_t>(anchor)] : -1;
    std::vector<std::int64_t> same, other;
    for (std::int64_t i : all) {
        (ds.labels[static_cast<std::size_t>(i)] == cls ? same : other).push_back(i);
    }

    switch (spec.mode) {
        case BatchMode::vanilla:
            return detail::draw_without_replacement(all, spec.b, rng);
        case BatchMode::full_class: {
            if (static_cast<std::int64_t>(same.size()) < spec.b) {
                throw std::runtime_error("sample_batch: class " + std::to_string(cls) + " has " +
                                         std::to_string(same.size()) + " samples, batch needs " +
                                         std::to_string(spec.b));
            }
            return detail::draw_without_replacement(same, spec.b, rng);
        }
        case BatchMode::context_class: {
            const std::int64_t ks = spec.similar_count(), ko = spec.b - ks;
            if (static_cast<std::int64_t>(same.size()) < ks || static_cast<std::int64_t>(other.size()) < ko) {
                throw std::runtime_error("sample_batch: dataset too small for context_class split " +
                                         std::to_string(ks) + "+" + std::to_string(ko));
            }
            std::vector<std::int64_t> out = detail::draw_without_replacement(same, ks, rng);
            for (std::int64_t i : detail::draw_without_replacement(other, ko, rng)) out.push_back(i);
            return out;
        }
        case BatchMode::context_similarity: {
            if (!index) throw std::runtime_error("sample_batch: context_similarity needs a SimilarityIndex");
            const std::int64_t ks = spec.similar_count(), ko = spec.b - ks;
            std::vector<std::uint8_t> member(static_cast<std::size_t>(ds.size()), restrict_to ? 0 : 1);
            if (restrict_to) {
                for (std::int64_t i : *restrict_to) member[static_cast<std::size_t>(i)] = 1;
            }
            std::vector<std::int64_t> ranked;
            for (std::int64_t i : index->ranked_by_similarity(anchor)) {
                if (member[static_cast<std::size_t>(i)]) ranked.push_back(i);
            }
            if (static_cast<std::int64_t>(ranked.size()) < spec.b) {
                throw std::runtime_error("sample_batch: candidate pool smaller than batch");
            }
            std::vector<std::int64_t> out(ranked.begin(), ranked.begin() + ks);
            const std::int64_t q = std::max<std::int64_t>(ko, static_cast<std::int64_t>(ranked.size()) / 4);
            std::vector<std::int64_t> far(ranked.end() - q, ranked.end());  // farthest quartile
            for (std::int64_t i : detail::draw_without_replacement(far, ko, rng)) out.push_back(i);
            return out;
        }
    }
    throw std::runtime_error("sample_batch: bad mode");
}

}  // namespace composer
