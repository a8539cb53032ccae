#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "composer/adamw.hpp"
#include "composer/config.hpp"
#include "composer/dataset.hpp"
#include "composer/denoiser.hpp"
#include "composer/generator.hpp"
#include "composer/linalg.hpp"
#include "composer/train.hpp"
#include "composer/util.hpp"

namespace composer {

// ---------------------------------------------------------------------------
// test-time-training baseline

struct TTTSettings {
    std::int64_t steps = 20;
    double lr = 1e-3;
    double weight_decay = 0.0;
    std::int64_t k = 16;  // adaptation samples per class
};

// Direct per-class optimization of one low-rank update: A starts small
// random, B starts zero (so the update starts at exactly zero but both
// factors receive gradient), fitted on the k class samples closest to the
// class centroid in similarity-feature space.
template <typename T>
UpdateSet<T> ttt_adapt(Denoiser<T>& model, const SyntheticDataset<T>& ds, const SimilarityIndex<T>& index,
                       std::int64_t class_id, const std::vector<TargetKey>& keys, std::int64_t r,
                       const TTTSettings& tt, SeededRng& rng) {
    if (!model.is_frozen()) throw std::runtime_error("ttt_adapt: backbone must be frozen");
    std::vector<std::int64_t> pool;
    for (std::int64_t i : ds.train_indices()) {
        if (ds.labels[static_cast<std::size_t>(i)] == class_id) pool.push_back(i);
    }
    if (pool.empty()) throw std::runtime_error("ttt_adapt: class " + std::to_string(class_id) + " has no samples");

    double centroid[SimilarityIndex<T>::kFeatureDim] = {};
    for (std::int64_t i : pool) {
        const double* f = index.features(i);
        for (std::int64_t d = 0; d < SimilarityIndex<T>::kFeatureDim; ++d) centroid[d] += f[d];
    }
    for (double& v : centroid) v /= static_cast<double>(pool.size());
    auto centroid_sim = [&](std::int64_t i) {
        const double* f = index.features(i);
        double num = 0, na = 0, nb = 0;
        for (std::int64_t d = 0; d < SimilarityIndex<T>::kFeatureDim; ++d) {
            num += f[d] * centroid[d];
            na += f[d] * f[d];
            nb += centroid[d] * centroid[d];
        }
        return num / std::sqrt(std::max(na * nb, 1e-300));
    };
    std::stable_sort(pool.begin(), pool.end(),
                     [&](std::int64_t a, std::int64_t b) { return centroid_sim(a) > centroid_sim(b); });
    pool.resize(static_cast<std::size_t>(std::min<std::int64_t>(tt.k, static_cast<std::int64_t>(pool.size()))));
    BatchTensors<T> b = gather_batch(ds, pool);

    UpdateSet<T> set;
    set.id = UpdateSet<T>::next_id();
    set.keys = keys;
    const std::int64_t d = model.cfg.d;
    typename AdamW<T>::Hyper h;
    h.lr = static_cast<T>(tt.lr);
    h.weight_decay = static_cast<T>(tt.weight_decay);
    AdamW<T> opt(h);
    for (const TargetKey& key : keys) {
        LowRankUpdate<T> u;
        u.A = Tensor<T>::randn({d, r}, rng, T(0.02));
        u.B = Tensor<T>::zeros({r, d});
        u.A.set_requires_grad(true);
        u.B.set_requires_grad(true);
        set.updates.push_back(u);
        opt.add_param("ttt." + key.str() + ".A", set.updates.back().A);
        opt.add_param("ttt." + key.str() + ".B", set.updates.back().B);
    }

    std::vector<const UpdateSet<T>*> ups(b.classes.size(), &set);
    for (std::int64_t s = 0; s < tt.steps; ++s) {
        std::vector<std::int64_t> ts;
        Tensor<T> eps;
        draw_noise(rng, model, static_cast<std::int64_t>(b.classes.size()), ts, eps);
        Tape<T> tape;
        Tensor<T> loss = diffusion_loss(&tape, model, b.images, b.classes, ts, eps, &ups);
        const double lv = static_cast<double>(loss.value());
        if (!std::isfinite(lv)) {
            throw std::runtime_error("ttt_adapt: diverged at step " + std::to_string(s) +
                                     " (loss=" + std::to_string(lv) + ")");
        }
        tape.backward(loss);
        opt.step();
        opt.zero_grad();
    }
    return set;
}

// ---------------------------------------------------------------------------
// toy Frechet distance

namespace detail {

// fixed random feature map shared by every call: tanh(P x), P ~ N(0, 1/pix)
inline const std::vector<double>& frechet_projection(std::int64_t pixels) {
    static std::vector<double> proj;
    static std::int64_t built_for = -1;
    if (built_for != pixels) {
        SeededRng rng(UINT64_C(0x746f796672656368));
        proj.assign(static_cast<std::size_t>(32 * pixels), 0.0);
        const double scl = 1.0 / std::sqrt(static_cast<double>(pixels));
        for (double& v : proj) v = rng.normal() * scl;
        built_for = pixels;
    }
    return proj;
}

template <typename T>
void frechet_stats(const Tensor<T>& images, std::vector<double>& mu, std::vector<double>& cov) {
    const std::int64_t n = images.rows(), pix = images.cols(), fd = 32;
    const std::vector<double>& proj = frechet_projection(pix);
    std::vector<double> feats(static_cast<std::size_t>(n * fd));
    for (std::int64_t i = 0; i < n; ++i) {
        const T* img = images.data() + i * pix;
        for (std::int64_t f = 0; f < fd; ++f) {
            double s = 0.0;
            const double* pr = proj.data() + f * pix;
            for (std::int64_t j = 0; j < pix; ++j) s += pr[j] * static_cast<double>(img[j]);
            feats[static_cast<std::size_t>(i * fd + f)] = std::tanh(s);
        }
    }
    mu.assign(static_cast<std::size_t>(fd), 0.0);
    for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t f = 0; f < fd; ++f) mu[static_cast<std::size_t>(f)] += feats[static_cast<std::size_t>(i * fd + f)];
    }
    for (double& v : mu) v /= static_cast<double>(n);
    cov.assign(static_cast<std::size_t>(fd * fd), 0.0);
    for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t a = 0; a < fd; ++a) {
            const double da = feats[static_cast<std::size_t>(i * fd + a)] - mu[static_cast<std::size_t>(a)];
            for (std::int64_t b = 0; b < fd; ++b) {
                cov[static_cast<std::size_t>(a * fd + b)] +=
                    da * (feats[static_cast<std::size_t>(i * fd + b)] - mu[static_cast<std::size_t>(b)]);
            }
        }
    }
    const double denom = n > 1 ? static_cast<double>(n - 1) : 1.0;
    for (double& v : cov) v /= denom;
    for (std::int64_t i = 0; i < fd; ++i) cov[static_cast<std::size_t>(i * fd + i)] += 1e-6;
}

}  // namespace detail

// Frechet distance between Gaussian fits of fixed 32-dim random features:
// |mu1-mu2|^2 + tr(S1 + S2 - 2 sqrt(sqrt(S1) S2 sqrt(S1))). The projection is
// a process-wide constant, so values are comparable across runs.
template <typename T>
double toy_frechet(const Tensor<T>& set1, const Tensor<T>& set2) {
    if (set1.rows() < 2 || set2.rows() < 2) throw std::runtime_error("toy_frechet: need at least 2 images per set");
    if (set1.cols() != set2.cols()) throw std::runtime_error("toy_frechet: pixel count mismatch");
    std::vector<double> mu1, s1, mu2, s2;
    detail::frechet_stats(set1, mu1, s1);
    detail::frechet_stats(set2, mu2, s2);
    const std::int64_t fd = 32;
    double d2 = 0.0;
    for (std::int64_t i = 0; i < fd; ++i) {
        const double d = mu1[static_cast<std::size_t>(i)] - mu2[static_cast<std::size_t>(i)];
        d2 += d * d;
    }
    const std::vector<double> s1h = sqrtm_psd(s1, fd);
    std::vector<double> tmp(static_cast<std::size_t>(fd * fd), 0.0);
    std::vector<double> inner(static_cast<std::size_t>(fd * fd), 0.0);
    mm_nn_acc(s1h.data(), s2.data(), tmp.data(), fd, fd, fd);
    mm_nn_acc(tmp.data(), s1h.data(), inner.data(), fd, fd, fd);
    for (std::int64_t i = 0; i < fd; ++i) {  // symmetrize against drift
        for (std::int64_t j = i + 1; j < fd; ++j) {
            const double m = 0.5 * (inner[static_cast<std::size_t>(i * fd + j)] + inner[static_cast<std::size_t>(j * fd + i)]);
            inner[static_cast<std::size_t>(i * fd + j)] = m;
            inner[static_cast<std::size_t>(j * fd + i)] = m;
        }
    }
    const std::vector<double> cross = sqrtm_psd(inner, fd);
    double tr = 0.0;
    for (std::int64_t i = 0; i < fd; ++i) {
        tr += s1[static_cast<std::size_t>(i * fd + i)] + s2[static_cast<std::size_t>(i * fd + i)] -
              2.0 * cross[static_cast<std::size_t>(i * fd + i)];
    }
    return std::max(d2 + tr, 0.0);
}

// ---------------------------------------------------------------------------
// strategy comparison

enum class Strategy { static_backbone, ttt, composer };

inline const char* strategy_name(Strategy s) {
    switch (s) {
        case Strategy::static_backbone: return "static";
        case Strategy::ttt: return "ttt";
        case Strategy::composer: return "composer";
    }
    return "?";
}

struct StrategyReport {
    std::string strategy;
    double adapt_seconds = 0.0;
    double sample_seconds = 0.0;
    double total_seconds = 0.0;
    std::size_t peak_bytes = 0;
    std::uint64_t merges = 0;
    std::uint64_t inference_applications = 0;
    std::uint64_t denoiser_calls = 0;
    double frechet = 0.0;
    double val_loss = 0.0;
    bool failed = false;
    std::string error;
};

// samples_per_class images for every class; per_class may be null (static)
template <typename T>
Tensor<T> sample_image_set(Denoiser<T>& model, const std::vector<UpdateSet<T>>* per_class,
                           std::int64_t steps, std::int64_t samples_per_class, SeededRng& rng) {
    const std::int64_t c_num = model.cfg.num_classes, pix = model.cfg.pixels();
    Tensor<T> out({c_num * samples_per_class, pix});
    for (std::int64_t c = 0; c < c_num; ++c) {
        for (std::int64_t i = 0; i < samples_per_class; ++i) {
            Tensor<T> img = model.sample_loop(c, steps, per_class ? &(*per_class)[static_cast<std::size_t>(c)] : nullptr, rng);
            T* dst = out.data() + (c * samples_per_class + i) * pix;
            for (std::int64_t j = 0; j < pix; ++j) dst[j] = img.data()[j];
        }
    }
    return out;
}

// One adaptation strategy end to end: adapt every class, sample, then score.
// Timing covers adapt + sample only; the peak is read before scoring and
// includes whatever is resident when the phase starts (so strategies run in
// one process compare like for like). A failure is recorded, not thrown.
template <typename T>
StrategyReport run_strategy(Strategy which, Denoiser<T>& model, MetaGenerator<T>* gen,
                            const SyntheticDataset<T>& ds, const SimilarityIndex<T>& index,
                            const std::vector<TargetKey>& keys, std::int64_t r, std::int64_t steps,
                            std::int64_t samples_per_class, std::uint64_t seed, const TTTSettings& tt = {}) {
    StrategyReport rep;
    rep.strategy = strategy_name(which);
    try {
        if (which == Strategy::composer && !gen) throw std::runtime_error("run_strategy: composer needs a generator");
        const std::int64_t c_num = model.cfg.num_classes;
        SeededRng rng = SeededRng(seed).split("bench");
        Counters::reset();
        AllocStats::reset_peak();
        const double t0 = now_seconds();
        std::vector<UpdateSet<T>> sets;
        if (which == Strategy::composer) {
            sets = generate_all_classes(*gen);
        } else if (which == Strategy::ttt) {
            for (std::int64_t c = 0; c < c_num; ++c) sets.push_back(ttt_adapt(model, ds, index, c, keys, r, tt, rng));
        }
        const double t1 = now_seconds();
        Tensor<T> samples = sample_image_set(model, sets.empty() ? nullptr : &sets, steps, samples_per_class, rng);
        const double t2 = now_seconds();
        rep.adapt_seconds = t1 - t0;
        rep.sample_seconds = t2 - t1;
        rep.total_seconds = t2 - t0;
        rep.peak_bytes = static_cast<std::size_t>(AllocStats::peak_bytes());
        rep.merges = Counters::merges;
        rep.inference_applications = Counters::inference_applications;
        rep.denoiser_calls = Counters::denoiser_calls;

        BatchTensors<T> real = gather_batch(ds, ds.val_indices());
        rep.frechet = toy_frechet(samples, real.images);
        const auto val_n = static_cast<std::int64_t>(ds.val_indices().size());
        rep.val_loss = eval_val_loss<T>(model, ds, ds.val_indices(), std::min<std::int64_t>(16, val_n),
                                        sets.empty() ? nullptr : &sets, seed);
    } catch (const std::exception& e) {
        rep.failed = true;
        rep.error = e.what();
    }
    return rep;
}

// All three strategies under identical residency: everything any strategy
// needs is allocated before the first measurement begins.
template <typename T>
std::vector<StrategyReport> run_comparison(Denoiser<T>& model, MetaGenerator<T>& gen,
                                           const SyntheticDataset<T>& ds, const SimilarityIndex<T>& index,
                                           std::int64_t steps, std::int64_t samples_per_class,
                                           std::uint64_t seed, const TTTSettings& tt = {}) {
    const std::vector<TargetKey> keys = gen.keys;
    const std::int64_t r = gen.cfg.r;
    std::vector<StrategyReport> out;
    out.push_back(run_strategy(Strategy::static_backbone, model, &gen, ds, index, keys, r, steps,
                               samples_per_class, seed, tt));
    out.push_back(run_strategy(Strategy::ttt, model, &gen, ds, index, keys, r, steps, samples_per_class, seed, tt));
    out.push_back(run_strategy(Strategy::composer, model, &gen, ds, index, keys, r, steps, samples_per_class, seed, tt));
    return out;
}

// ---------------------------------------------------------------------------
// ablations

struct AblationPoint {
    std::string axis;
    std::string value;
    TrainCurve curve;
    double final_val_loss = 0.0;
    double frechet = 0.0;
    double seconds = 0.0;
    bool failed = false;
    std::string error;
};

inline const std::vector<std::pair<std::string, std::vector<std::string>>>& ablation_grids() {
    static const std::vector<std::pair<std::string, std::vector<std::string>>> grids = {
        {"r", {"4", "8", "16", "32"}},
        {"alpha", {"0", "0.25", "0.5", "0.75", "1"}},
        {"d_model", {"32", "64", "128"}},
        {"targets", {"QV", "QKVO"}},
        {"attention", {"global_local", "standard"}},
        {"arch", {"transformer", "mlp"}},
        {"pipeline", {"vanilla", "full_class", "context_class", "context_similarity"}},
        {"token_init", {"projected", "constant"}},
    };
    return grids;
}

inline std::string ablation_config_key(const std::string& axis) {
    if (axis == "r") return "composer.r";
    if (axis == "alpha") return "train.alpha";
    if (axis == "d_model") return "composer.d_model";
    if (axis == "targets") return "composer.targets";
    if (axis == "attention") return "composer.attention";
    if (axis == "arch") return "composer.arch";
    if (axis == "pipeline") return "train.pipeline";
    if (axis == "token_init") return "composer.token_init";
    std::string known;
    for (const auto& [name, values] : ablation_grids()) known += (known.empty() ? "" : ", ") + name;
    throw std::runtime_error("ablation: unknown axis '" + axis + "' (known: " + known + ")");
}

// Rejects out-of-grid values up front, before anything is trained.
inline void validate_ablation(const std::string& axis, const std::vector<std::string>& values) {
    ablation_config_key(axis);
    if (values.empty()) throw std::runtime_error("ablation: no values given for axis '" + axis + "'");
    for (const auto& [name, grid] : ablation_grids()) {
        if (name != axis) continue;
        for (const std::string& v : values) {
            if (std::find(grid.begin(), grid.end(), v) == grid.end()) {
                std::string allowed;
                for (const std::string& g : grid) allowed += (allowed.empty() ? "" : ", ") + g;
                throw std::runtime_error("ablation: value '" + v + "' not in the " + axis + " grid (" + allowed + ")");
            }
        }
    }
}

// One composer training per grid value on a shared frozen backbone. Failures
// are recorded per point and the sweep continues.
template <typename T>
std::vector<AblationPoint> run_ablation(const RunConfig& base, const std::string& axis,
                                        const std::vector<std::string>& values, Denoiser<T>& frozen,
                                        const SyntheticDataset<T>& ds, const SimilarityIndex<T>& index,
                                        const MetricSink& sink = {}) {
    validate_ablation(axis, values);
    if (!frozen.is_frozen()) throw std::runtime_error("ablation: backbone must be frozen");
    std::vector<AblationPoint> out;
    for (const std::string& v : values) {
        AblationPoint pt;
        pt.axis = axis;
        pt.value = v;
        const double t0 = now_seconds();
        try {
            RunConfig cfg = base;
            set_config_key(cfg, ablation_config_key(axis), v);
            validate_config(cfg);
            SeededRng init_rng = SeededRng(cfg.seed).split("composer-init");
            MetaGenerator<T> gen = MetaGenerator<T>::init(make_composer_config(cfg), frozen,
                                                          parse_targets(cfg.composer_targets), init_rng);
            pt.curve = train_composer(gen, frozen, ds, index, make_train_settings(cfg), sink);
            pt.final_val_loss = pt.curve.val_loss.back();
            SeededRng srng = SeededRng(cfg.seed).split("ablation-sample");
            std::vector<UpdateSet<T>> per_class = generate_all_classes(gen);
            Tensor<T> samples = sample_image_set(frozen, &per_class, cfg.bench_steps,
                                                 cfg.bench_samples_per_class, srng);
            pt.frechet = toy_frechet(samples, gather_batch(ds, ds.val_indices()).images);
        } catch (const std::exception& e) {
            pt.failed = true;
            pt.error = e.what();
        }
        pt.seconds = now_seconds() - t0;
        out.push_back(pt);
    }
    return out;
}

}  // namespace composer
