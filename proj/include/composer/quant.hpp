#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "composer/adamw.hpp"
#include "composer/dataset.hpp"
#include "composer/denoiser.hpp"
#include "composer/generator.hpp"
#include "composer/train.hpp"

namespace composer {

struct QuantStaticConfig {
    int w_bits = 4;  // backbone weights: 2, 4 or 8
    int a_bits = 8;  // hook-site activations: 8 only

    void validate() const {
        if (w_bits != 2 && w_bits != 4 && w_bits != 8) {
            throw std::runtime_error("quant: w_bits must be 2, 4 or 8, got " + std::to_string(w_bits));
        }
        if (a_bits != 8) {
            throw std::runtime_error("quant: a_bits must be 8, got " + std::to_string(a_bits));
        }
    }
};

// Symmetric per-tensor quantized copies of the adapted hook-site weights.
// Everything else in the backbone stays full precision.
template <typename T>
struct QuantizedBackbone {
    int w_bits = 4;
    std::vector<TargetKey> keys;
    std::vector<Tensor<T>> w_q;  // already dequantized onto the grid
    std::vector<T> w_scale;

    const Tensor<T>* find(TargetKey key) const {
        for (std::size_t i = 0; i < keys.size(); ++i) {
            if (keys[i] == key) return &w_q[i];
        }
        return nullptr;
    }
};

// scale = maxabs / (2^{b-1} - 1); an all-zero tensor keeps scale 1 so the
// grid stays well defined.
template <typename T>
QuantizedBackbone<T> quantize_backbone(const Denoiser<T>& model, const std::vector<TargetKey>& keys,
                                       int w_bits) {
    QuantStaticConfig{w_bits, 8}.validate();
    QuantizedBackbone<T> out;
    out.w_bits = w_bits;
    out.keys = keys;
    const T qmax = static_cast<T>((1 << (w_bits - 1)) - 1);
    for (const TargetKey& key : keys) {
        const Tensor<T>& w = model.frozen_weight(key);
        const T m = w.max_abs();
        const T scale = m > T(0) ? m / qmax : T(1);
        Tensor<T> q(w.shape());
        for (std::int64_t i = 0; i < w.numel(); ++i) {
            T lvl = std::nearbyint(w.data()[i] / scale);
            lvl = std::min(qmax, std::max(-qmax, lvl));
            q.data()[i] = lvl * scale;
        }
        out.w_q.push_back(q);
        out.w_scale.push_back(scale);
    }
    return out;
}

// Per-site activation scales from one teacher pass over a held-out batch:
// scale = maxabs of the raw site input (before any gamma) / (2^{a-1} - 1).
template <typename T>
std::vector<T> calibrate_act_scales(Denoiser<T>& teacher, const std::vector<TargetKey>& keys,
                                    const Tensor<T>& x_t, const std::vector<std::int64_t>& ts,
                                    const std::vector<std::int64_t>& classes, int a_bits) {
    SiteCapture<T> cap;
    cap.keys = keys;
    teacher.forward(nullptr, x_t, ts, classes, nullptr, nullptr, nullptr, &cap);
    const T qmax = static_cast<T>((1 << (a_bits - 1)) - 1);
    std::vector<T> scales;
    scales.reserve(keys.size());
    for (const Tensor<T>& x : cap.x) {
        const T m = x.max_abs();
        scales.push_back(m > T(0) ? m / qmax : T(1));
    }
    return scales;
}

// Student response at one hook site:
//   xq  = fake_quantize(gamma * x, a_bits, a_scale)
//   h_q = xq W_q^T + (xq B^T) A^T
// gamma and update may be null (baseline: gamma = 1, no correction).
template <typename T>
Tensor<T> quant_forward(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& w_q,
                        const LowRankUpdate<T>* update, const Tensor<T>* gamma, int a_bits, T a_scale) {
    Tensor<T> in = gamma ? mul_scalar(tape, x, *gamma) : x;
    Tensor<T> xq = fake_quantize(tape, in, a_bits, a_scale);
    Tensor<T> h = linear(tape, xq, w_q);
    if (update) h = add(tape, h, matmul_nt(tape, matmul_nt(tape, xq, update->B), update->A));
    return h;
}

// Distillation loss: squared teacher/student output gaps summed over every
// element of every hook site, divided by the batch size.
template <typename T>
Tensor<T> kd_loss(Tape<T>* tape, const std::vector<Tensor<T>>& h_teacher,
                  const std::vector<Tensor<T>>& h_student, std::int64_t batch) {
    if (h_teacher.size() != h_student.size() || h_teacher.empty()) {
        throw std::runtime_error("kd_loss: mismatched or empty site lists");
    }
    if (batch < 1) throw std::runtime_error("kd_loss: batch must be positive");
    Tensor<T> total = sq_diff_sum(tape, h_student[0], h_teacher[0]);
    for (std::size_t i = 1; i < h_teacher.size(); ++i) {
        total = add(tape, total, sq_diff_sum(tape, h_student[i], h_teacher[i]));
    }
    return scale(tape, total, T(1) / static_cast<T>(batch));
}

// Merged quantized weights W_q + AB for deployment-style sampling.
template <typename T>
MergedWeights<T> merge_quantized(const QuantizedBackbone<T>& qb, const UpdateSet<T>& set) {
    if (!(set.keys == qb.keys)) throw std::runtime_error("merge_quantized: key mismatch");
    return merge(qb.w_q, set);
}

// Plain quantized weights with no update, for the baseline sampler.
template <typename T>
MergedWeights<T> quantized_baseline_weights(const QuantizedBackbone<T>& qb) {
    MergedWeights<T> mw;
    mw.source_id = 0;
    mw.keys = qb.keys;
    for (const Tensor<T>& w : qb.w_q) mw.w.push_back(w.clone());
    ++Counters::merges;
    return mw;
}

// Activation treatment per site for quantized sampling. With a generated
// update set the per-target gammas come from it; otherwise gamma = 1.
template <typename T>
std::vector<ActQuantSite<T>> make_act_sites(const QuantizedBackbone<T>& qb, const std::vector<T>& scales,
                                            int a_bits, const UpdateSet<T>* set) {
    if (scales.size() != qb.keys.size()) throw std::runtime_error("make_act_sites: scale count mismatch");
    std::vector<ActQuantSite<T>> sites;
    sites.reserve(qb.keys.size());
    for (std::size_t i = 0; i < qb.keys.size(); ++i) {
        T g = T(1);
        if (set) {
            const Tensor<T>* gt = set->find_gamma(qb.keys[i]);
            if (!gt) throw std::runtime_error("make_act_sites: no gamma for " + qb.keys[i].str());
            g = gt->value();
        }
        sites.push_back({qb.keys[i], a_bits, scales[i], g});
    }
    return sites;
}

namespace detail {

template <typename T>
std::vector<std::int64_t> unique_classes(const std::vector<std::int64_t>& classes) {
    std::vector<std::int64_t> uniq;
    for (std::int64_t c : classes) {
        if (std::find(uniq.begin(), uniq.end(), c) == uniq.end()) uniq.push_back(c);
    }
    return uniq;
}

// Student site outputs for a captured teacher batch, one row block per
// sample so each one can use its own class update and gamma.
template <typename T>
std::vector<Tensor<T>> student_site_outputs(Tape<T>* tape, const SiteCapture<T>& cap,
                                            const QuantizedBackbone<T>& qb, const std::vector<T>& act_scales,
                                            int a_bits, const std::vector<const UpdateSet<T>*>& per_sample,
                                            std::int64_t np) {
    std::vector<Tensor<T>> h_q;
    h_q.reserve(qb.keys.size());
    for (std::size_t k = 0; k < qb.keys.size(); ++k) {
        std::vector<Tensor<T>> rows;
        rows.reserve(per_sample.size());
        for (std::size_t b = 0; b < per_sample.size(); ++b) {
            Tensor<T> xb = slice_rows(tape, cap.x[k], static_cast<std::int64_t>(b) * np,
                                      static_cast<std::int64_t>(b + 1) * np);
            const LowRankUpdate<T>* up = per_sample[b] ? per_sample[b]->find(qb.keys[k]) : nullptr;
            const Tensor<T>* g = per_sample[b] ? per_sample[b]->find_gamma(qb.keys[k]) : nullptr;
            rows.push_back(quant_forward(tape, xb, qb.w_q[k], up, g, a_bits, act_scales[k]));
        }
        h_q.push_back(concat_rows(tape, rows));
    }
    return h_q;
}

}  // namespace detail

// Mean distillation loss over fixed validation batches. gen == nullptr
// evaluates the zero-update, gamma = 1 quantized baseline.
template <typename T>
double eval_kd_loss(MetaGenerator<T>* gen, Denoiser<T>& teacher, const QuantizedBackbone<T>& qb,
                    const std::vector<T>& act_scales, int a_bits, const SyntheticDataset<T>& ds,
                    const TrainSettings& st, std::int64_t num_batches = 4) {
    const std::vector<std::int64_t> val = ds.val_indices();
    const std::int64_t nb = std::min<std::int64_t>(num_batches, static_cast<std::int64_t>(val.size()) / st.batch);
    if (nb < 1) throw std::runtime_error("eval_kd_loss: validation split smaller than one batch");
    SeededRng rng = SeededRng(st.seed).split("kd-eval");
    const std::int64_t np = teacher.cfg.num_patches();
    double total = 0.0;
    for (std::int64_t bi = 0; bi < nb; ++bi) {
        std::vector<std::int64_t> idx(val.begin() + static_cast<std::ptrdiff_t>(bi * st.batch),
                                      val.begin() + static_cast<std::ptrdiff_t>((bi + 1) * st.batch));
        BatchTensors<T> b = gather_batch(ds, idx);
        std::vector<std::int64_t> ts;
        Tensor<T> eps;
        draw_noise(rng, teacher, st.batch, ts, eps);
        SiteCapture<T> cap;
        cap.keys = qb.keys;
        teacher.forward(nullptr, noised_batch(b.images, ts, eps, teacher.schedule), ts, b.classes, nullptr,
                        nullptr, nullptr, &cap);

        std::vector<UpdateSet<T>> sets;
        std::vector<const UpdateSet<T>*> per_sample(b.classes.size(), nullptr);
        if (gen) {
            const std::vector<std::int64_t> uniq = detail::unique_classes<T>(b.classes);
            sets = gen->generate_batch(nullptr, uniq);
            for (std::size_t i = 0; i < b.classes.size(); ++i) {
                for (std::size_t u = 0; u < uniq.size(); ++u) {
                    if (uniq[u] == b.classes[i]) per_sample[i] = &sets[u];
                }
            }
        }
        std::vector<Tensor<T>> h_q =
            detail::student_site_outputs<T>(nullptr, cap, qb, act_scales, a_bits, per_sample, np);
        total += static_cast<double>(
            kd_loss<T>(nullptr, cap.h, h_q, static_cast<std::int64_t>(b.classes.size())).value());
    }
    return total / static_cast<double>(nb);
}

template <typename T>
struct QuantTrainResult {
    TrainCurve curve;        // val entries are distillation losses; [0] is pre-training
    double baseline_kd = 0;  // zero-update gamma=1 quantized baseline, same eval batches
    std::vector<T> act_scales;
};

// Quantization-aware distillation of the composer: the full-precision model
// teaches the quantized hook sites, the composer learns per-target updates
// and activation gammas, and its own weight matrices plus the generated
// factors see straight-through fake quantization while training.
template <typename T>
QuantTrainResult<T> train_quant_composer(MetaGenerator<T>& gen, Denoiser<T>& teacher,
                                         const QuantizedBackbone<T>& qb, int a_bits,
                                         const SyntheticDataset<T>& ds, const SimilarityIndex<T>& index,
                                         const TrainSettings& st, const MetricSink& sink = {}) {
    if (!teacher.is_frozen()) throw std::runtime_error("train_quant_composer: teacher must be frozen");
    if (!gen.cfg.quant) throw std::runtime_error("train_quant_composer: composer not in quant mode");
    if (!(gen.keys == qb.keys)) throw std::runtime_error("train_quant_composer: target key mismatch");
    QuantStaticConfig{qb.w_bits, a_bits}.validate();
    const std::uint32_t crc0 = teacher.checksum();

    QuantTrainResult<T> out;
    {
        const std::vector<std::int64_t> val = ds.val_indices();
        if (static_cast<std::int64_t>(val.size()) < st.batch) {
            throw std::runtime_error("train_quant_composer: validation split smaller than one batch");
        }
        std::vector<std::int64_t> idx(val.begin(), val.begin() + static_cast<std::ptrdiff_t>(st.batch));
        BatchTensors<T> b = gather_batch(ds, idx);
        SeededRng crng = SeededRng(st.seed).split("act-calib");
        std::vector<std::int64_t> ts;
        Tensor<T> eps;
        draw_noise(crng, teacher, st.batch, ts, eps);
        out.act_scales = calibrate_act_scales(teacher, qb.keys, noised_batch(b.images, ts, eps, teacher.schedule),
                                              ts, b.classes, a_bits);
    }
    gen.set_weight_bits(qb.w_bits);
    gen.set_trainable(true);

    typename AdamW<T>::Hyper h;
    h.lr = static_cast<T>(st.lr);
    h.weight_decay = static_cast<T>(st.weight_decay);
    AdamW<T> opt(h);
    for (auto& [name, p] : gen.named_params()) opt.add_param(name, p);

    SeededRng rng = SeededRng(st.seed).split("quant-train");
    const std::vector<std::int64_t> train_idx = ds.train_indices();
    const std::int64_t steps_per_epoch = static_cast<std::int64_t>(train_idx.size()) / st.batch;
    if (steps_per_epoch < 1) throw std::runtime_error("train_quant_composer: dataset too small for one batch");
    const std::int64_t np = teacher.cfg.num_patches();

    out.baseline_kd = eval_kd_loss<T>(nullptr, teacher, qb, out.act_scales, a_bits, ds, st);
    out.curve.val_loss.push_back(eval_kd_loss<T>(&gen, teacher, qb, out.act_scales, a_bits, ds, st));
    if (sink) sink("quant-train", 0, 0, "val_kd", out.curve.val_loss.back());

    BatchSpec spec{st.alpha, st.batch, st.pipeline};
    for (std::int64_t epoch = 1; epoch <= st.epochs; ++epoch) {
        double epoch_loss = 0.0;
        for (std::int64_t s = 0; s < steps_per_epoch; ++s) {
            const std::int64_t anchor =
                st.pipeline == BatchMode::vanilla ? -1 : train_idx[rng.range(train_idx.size())];
            const std::vector<std::int64_t> idx = sample_batch(ds, &index, spec, anchor, rng, &train_idx);
            BatchTensors<T> b = gather_batch(ds, idx);
            std::vector<std::int64_t> ts;
            Tensor<T> eps;
            draw_noise(rng, teacher, st.batch, ts, eps);
            SiteCapture<T> cap;
            cap.keys = qb.keys;
            teacher.forward(nullptr, noised_batch(b.images, ts, eps, teacher.schedule), ts, b.classes,
                            nullptr, nullptr, nullptr, &cap);

            Tape<T> tape;
            const std::vector<std::int64_t> uniq = detail::unique_classes<T>(b.classes);
            std::vector<UpdateSet<T>> sets = gen.generate_batch(&tape, uniq);
            std::vector<const UpdateSet<T>*> per_sample;
            per_sample.reserve(b.classes.size());
            for (std::int64_t c : b.classes) {
                for (std::size_t u = 0; u < uniq.size(); ++u) {
                    if (uniq[u] == c) per_sample.push_back(&sets[u]);
                }
            }
            std::vector<Tensor<T>> h_q =
                detail::student_site_outputs(&tape, cap, qb, out.act_scales, a_bits, per_sample, np);
            Tensor<T> loss = kd_loss(&tape, cap.h, h_q, static_cast<std::int64_t>(b.classes.size()));
            const double lv = static_cast<double>(loss.value());
            if (!std::isfinite(lv)) {
                throw std::runtime_error("train_quant_composer: diverged at epoch " + std::to_string(epoch) +
                                         " step " + std::to_string(s) + " (loss=" + std::to_string(lv) + ")");
            }
            epoch_loss += lv;
            tape.backward(loss);
            opt.step();
            opt.zero_grad();
        }
        if (teacher.checksum() != crc0) {
            throw std::runtime_error("train_quant_composer: teacher weights changed during epoch " +
                                     std::to_string(epoch) + " (integrity failure)");
        }
        out.curve.train_loss.push_back(epoch_loss / static_cast<double>(steps_per_epoch));
        out.curve.val_loss.push_back(eval_kd_loss<T>(&gen, teacher, qb, out.act_scales, a_bits, ds, st));
        if (sink) {
            sink("quant-train", epoch, 0, "train_kd", out.curve.train_loss.back());
            sink("quant-train", epoch, 0, "val_kd", out.curve.val_loss.back());
        }
    }
    return out;
}

}  // namespace composer
