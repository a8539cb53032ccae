#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "composer/composition.hpp"
#include "composer/ops.hpp"
#include "composer/rng.hpp"
#include "composer/schedule.hpp"
#include "composer/tape.hpp"
#include "composer/tensor.hpp"
#include "composer/util.hpp"

namespace composer {

struct DenoiserConfig {
    std::int64_t image_size = 16;
    std::int64_t patch_size = 4;
    std::int64_t d = 64;
    std::int64_t num_layers = 4;
    std::int64_t num_heads = 4;
    std::int64_t num_classes = 10;
    std::int64_t num_timesteps = 100;

    void validate() const {
        if (image_size % patch_size != 0) {
            throw std::runtime_error("backbone config: image_size " + std::to_string(image_size) +
                                     " not divisible by patch_size " + std::to_string(patch_size));
        }
        if (d % num_heads != 0) {
            throw std::runtime_error("backbone config: d " + std::to_string(d) +
                                     " not divisible by num_heads " + std::to_string(num_heads));
        }
        if (num_layers < 1 || num_classes < 1 || num_timesteps < 1) {
            throw std::runtime_error("backbone config: non-positive dimension");
        }
    }

    std::int64_t num_patches() const {
        const std::int64_t s = image_size / patch_size;
        return s * s;
    }
    std::int64_t pixels() const { return image_size * image_size; }
    std::int64_t patch_dim() const { return patch_size * patch_size; }
};

// layer index ascending, then Q,K,V,O within a layer
inline std::vector<TargetKey> collect_adaptation_targets(const DenoiserConfig& cfg,
                                                         const std::vector<Target>& subset) {
    if (subset.empty()) throw std::runtime_error("collect_adaptation_targets: empty target subset");
    std::vector<TargetKey> keys;
    for (std::int64_t layer = 0; layer < cfg.num_layers; ++layer) {
        for (Target t : {Target::Q, Target::K, Target::V, Target::O}) {
            for (Target s : subset) {
                if (s == t) keys.push_back({static_cast<int>(layer), t});
            }
        }
    }
    return keys;
}

// Per adapted site, how activations are treated under quantized inference:
// the site input x becomes fake_quantize(gamma * x, bits, scale) before the
// (merged, quantized) weight is applied. gamma defaults to 1 for the
// no-composer baseline.
template <typename T>
struct ActQuantSite {
    TargetKey key;
    int bits = 8;
    T scale = T(1);
    T gamma = T(1);
};

// Records (input, output) of selected frozen hook sites during a forward
// pass — the teacher side of distillation.
template <typename T>
struct SiteCapture {
    std::vector<TargetKey> keys;
    std::vector<Tensor<T>> x;  // site inputs, aligned with keys after the call
    std::vector<Tensor<T>> h;  // frozen-path outputs
};

// A small class-conditional denoising transformer over image patch tokens.
// Everything is trained once, then frozen; instance adaptation only ever
// enters through the Q/K/V/O hook points below.
template <typename T>
class Denoiser {
public:
    DenoiserConfig cfg;
    NoiseSchedule<T> schedule;

    struct Layer {
        Tensor<T> wq, wk, wv, wo;              // d x d, applied as x · W^T
        Tensor<T> ln1_g, ln1_b, ln2_g, ln2_b;  // d
        Tensor<T> ff1_w, ff1_b;                // 4d x d, 4d
        Tensor<T> ff2_w, ff2_b;                // d x 4d, d
    };

    Tensor<T> patch_w, patch_b;  // d x patch_dim, d
    Tensor<T> pos;               // num_patches x d
    Tensor<T> class_emb;         // num_classes x d
    Tensor<T> time_emb;          // T x d
    std::vector<Layer> layers;
    Tensor<T> lnf_g, lnf_b;      // d
    Tensor<T> head_w, head_b;    // patch_dim x d, patch_dim

    static Denoiser init(const DenoiserConfig& c, SeededRng& rng) {
        c.validate();
        Denoiser m;
        m.cfg = c;
        m.schedule = NoiseSchedule<T>::cosine(c.num_timesteps);
        const T w0 = T(0.02);
        m.patch_w = Tensor<T>::randn({c.d, c.patch_dim()}, rng, w0);
        m.patch_b = Tensor<T>::zeros({c.d});
        m.pos = Tensor<T>::randn({c.num_patches(), c.d}, rng, w0);
        m.class_emb = Tensor<T>::randn({c.num_classes, c.d}, rng, w0);
        m.time_emb = Tensor<T>::randn({c.num_timesteps, c.d}, rng, w0);
        for (std::int64_t l = 0; l < c.num_layers; ++l) {
            Layer lay;
            lay.wq = Tensor<T>::randn({c.d, c.d}, rng, w0);
            lay.wk = Tensor<T>::randn({c.d, c.d}, rng, w0);
            lay.wv = Tensor<T>::randn({c.d, c.d}, rng, w0);
            lay.wo = Tensor<T>::randn({c.d, c.d}, rng, w0);
            lay.ln1_g = Tensor<T>::full({c.d}, T(1));
            lay.ln1_b = Tensor<T>::zeros({c.d});
            lay.ln2_g = Tensor<T>::full({c.d}, T(1));
            lay.ln2_b = Tensor<T>::zeros({c.d});
            lay.ff1_w = Tensor<T>::randn({4 * c.d, c.d}, rng, w0);
            lay.ff1_b = Tensor<T>::zeros({4 * c.d});
            lay.ff2_w = Tensor<T>::randn({c.d, 4 * c.d}, rng, w0);
            lay.ff2_b = Tensor<T>::zeros({c.d});
            m.layers.push_back(std::move(lay));
        }
        m.lnf_g = Tensor<T>::full({c.d}, T(1));
        m.lnf_b = Tensor<T>::zeros({c.d});
        m.head_w = Tensor<T>::randn({c.patch_dim(), c.d}, rng, w0);
        m.head_b = Tensor<T>::zeros({c.patch_dim()});
        return m;
    }

    std::vector<std::pair<std::string, Tensor<T>>> named_params() {
        std::vector<std::pair<std::string, Tensor<T>>> out;
        out.emplace_back("backbone.patch_w", patch_w);
        out.emplace_back("backbone.patch_b", patch_b);
        out.emplace_back("backbone.pos", pos);
        out.emplace_back("backbone.class_emb", class_emb);
        out.emplace_back("backbone.time_emb", time_emb);
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const std::string p = "backbone.layer" + std::to_string(l) + ".";
            Layer& lay = layers[l];
            out.emplace_back(p + "wq", lay.wq);
            out.emplace_back(p + "wk", lay.wk);
            out.emplace_back(p + "wv", lay.wv);
            out.emplace_back(p + "wo", lay.wo);
            out.emplace_back(p + "ln1_g", lay.ln1_g);
            out.emplace_back(p + "ln1_b", lay.ln1_b);
            out.emplace_back(p + "ln2_g", lay.ln2_g);
            out.emplace_back(p + "ln2_b", lay.ln2_b);
            out.emplace_back(p + "ff1_w", lay.ff1_w);
            out.emplace_back(p + "ff1_b", lay.ff1_b);
            out.emplace_back(p + "ff2_w", lay.ff2_w);
            out.emplace_back(p + "ff2_b", lay.ff2_b);
        }
        out.emplace_back("backbone.lnf_g", lnf_g);
        out.emplace_back("backbone.lnf_b", lnf_b);
        out.emplace_back("backbone.head_w", head_w);
        out.emplace_back("backbone.head_b", head_b);
        return out;
    }

    void set_trainable(bool on) {
        for (auto& [name, p] : named_params()) p.set_requires_grad(on);
    }

    bool is_frozen() {
        for (auto& [name, p] : named_params()) {
            if (p.requires_grad()) return false;
        }
        return true;
    }

    std::uint32_t checksum() {
        std::uint32_t crc = 0;
        for (auto& [name, p] : named_params()) {
            crc = crc32(p.data(), static_cast<std::size_t>(p.numel()) * sizeof(T), crc);
            crc = crc32(name.data(), name.size(), crc);
        }
        return crc;
    }

    const Tensor<T>& frozen_weight(TargetKey k) const {
        if (k.layer < 0 || k.layer >= static_cast<int>(layers.size())) {
            throw std::runtime_error("backbone: no layer " + std::to_string(k.layer) + " for target " + k.str());
        }
        const Layer& lay = layers[static_cast<std::size_t>(k.layer)];
        switch (k.target) {
            case Target::Q: return lay.wq;
            case Target::K: return lay.wk;
            case Target::V: return lay.wv;
            case Target::O: return lay.wo;
        }
        throw std::runtime_error("backbone: bad target");
    }

    std::vector<Tensor<T>> frozen_targets(const std::vector<TargetKey>& keys) const {
        std::vector<Tensor<T>> out;
        out.reserve(keys.size());
        for (const TargetKey& k : keys) out.push_back(frozen_weight(k));
        return out;
    }

    // Predicted noise for a batch. Exactly one adaptation route may be given:
    //  - per_sample_updates: training path, one (possibly shared) UpdateSet
    //    pointer per batch row, null entries run frozen;
    //  - merged (+ optional act_quant): inference path, shared by the batch.
    Tensor<T> forward(Tape<T>* tape, const Tensor<T>& x_t, const std::vector<std::int64_t>& ts,
                      const std::vector<std::int64_t>& classes,
                      const std::vector<const UpdateSet<T>*>* per_sample_updates = nullptr,
                      const MergedWeights<T>* merged = nullptr,
                      const std::vector<ActQuantSite<T>>* act_quant = nullptr,
                      SiteCapture<T>* capture = nullptr) {
        const std::int64_t bsz = x_t.rows();
        if (x_t.cols() != cfg.pixels()) {
            throw std::runtime_error("backbone: input " + shape_str(x_t.shape()) + " != pixels " +
                                     std::to_string(cfg.pixels()));
        }
        if (static_cast<std::int64_t>(ts.size()) != bsz || static_cast<std::int64_t>(classes.size()) != bsz) {
            throw std::runtime_error("backbone: batch size mismatch between images, timesteps and classes");
        }
        if (per_sample_updates && merged) {
            throw std::runtime_error("backbone: cannot mix training-path and merged adaptation");
        }
        if (per_sample_updates && static_cast<std::int64_t>(per_sample_updates->size()) != bsz) {
            throw std::runtime_error("backbone: need one UpdateSet pointer per batch element");
        }
        ++Counters::denoiser_calls;
        if (merged) ++Counters::inference_applications;
        if (capture) {
            capture->x.assign(capture->keys.size(), Tensor<T>());
            capture->h.assign(capture->keys.size(), Tensor<T>());
        }

        const std::int64_t np = cfg.num_patches(), d = cfg.d, nh = cfg.num_heads, dh = d / nh;
        std::vector<std::int64_t> tidx(ts.size()), cidx(classes.size());
        for (std::size_t i = 0; i < ts.size(); ++i) {
            if (ts[i] < 1 || ts[i] > cfg.num_timesteps) {
                throw std::runtime_error("backbone: timestep " + std::to_string(ts[i]) + " outside [1," +
                                         std::to_string(cfg.num_timesteps) + "]");
            }
            tidx[i] = ts[i] - 1;
        }
        for (std::size_t i = 0; i < classes.size(); ++i) {
            if (classes[i] < 0 || classes[i] >= cfg.num_classes) {
                throw std::runtime_error("backbone: class " + std::to_string(classes[i]) + " outside [0," +
                                         std::to_string(cfg.num_classes) + ")");
            }
            cidx[i] = classes[i];
        }

        Tensor<T> patches = patchify(tape, x_t, cfg.image_size, cfg.patch_size);  // (B*np) x pp
        Tensor<T> x = linear(tape, patches, patch_w, &patch_b);                   // (B*np) x d
        x = add_cyclic(tape, x, pos, np);
        Tensor<T> cond = add(tape, gather_rows(tape, class_emb, cidx), gather_rows(tape, time_emb, tidx));
        x = add_per_group(tape, x, cond, np);

        const std::vector<std::uint8_t> no_mask;
        for (std::size_t l = 0; l < layers.size(); ++l) {
            Layer& lay = layers[l];
            const int li = static_cast<int>(l);
            Tensor<T> h = layernorm(tape, x, lay.ln1_g, lay.ln1_b);
            Tensor<T> q = adapted_site(tape, h, lay.wq, {li, Target::Q}, per_sample_updates, merged, act_quant, capture, np);
            Tensor<T> k = adapted_site(tape, h, lay.wk, {li, Target::K}, per_sample_updates, merged, act_quant, capture, np);
            Tensor<T> v = adapted_site(tape, h, lay.wv, {li, Target::V}, per_sample_updates, merged, act_quant, capture, np);
            std::vector<Tensor<T>> head_outs;
            head_outs.reserve(static_cast<std::size_t>(nh));
            for (std::int64_t hd = 0; hd < nh; ++hd) {
                Tensor<T> qh = slice_cols(tape, q, hd * dh, (hd + 1) * dh);
                Tensor<T> kh = slice_cols(tape, k, hd * dh, (hd + 1) * dh);
                Tensor<T> vh = slice_cols(tape, v, hd * dh, (hd + 1) * dh);
                Tensor<T> sc = scale(tape, bmm_nt_group(tape, qh, kh, np), T(1) / std::sqrt(static_cast<T>(dh)));
                Tensor<T> p = softmax_masked(tape, sc, no_mask);
                head_outs.push_back(bmm_nn_group(tape, p, vh, np));
            }
            Tensor<T> o = concat_cols(tape, head_outs);
            Tensor<T> attn_out = adapted_site(tape, o, lay.wo, {li, Target::O}, per_sample_updates, merged, act_quant, capture, np);
            x = add(tape, x, attn_out);
            Tensor<T> f = layernorm(tape, x, lay.ln2_g, lay.ln2_b);
            Tensor<T> f1 = gelu(tape, linear(tape, f, lay.ff1_w, &lay.ff1_b));
            Tensor<T> f2 = linear(tape, f1, lay.ff2_w, &lay.ff2_b);
            x = add(tape, x, f2);
        }
        Tensor<T> hf = layernorm(tape, x, lnf_g, lnf_b);
        Tensor<T> eps_patches = linear(tape, hf, head_w, &head_b);
        return unpatchify(tape, eps_patches, cfg.image_size, cfg.patch_size);
    }

    // DDPM ancestral sampling over an evenly strided timestep subsequence
    // t_i = T - floor(i*T/steps), i = 0..steps-1 (so steps=T walks every t).
    // Per step, with g_t = gamma_t and s the next (smaller) timestep:
    //   x0 = clip((x_t - sqrt(1-g_t) eps_hat) / sqrt(g_t), [-1,1])
    //   a  = g_t / g_s,  b = 1 - a
    //   mean = sqrt(g_s) b/(1-g_t) x0 + sqrt(a)(1-g_s)/(1-g_t) x_t
    //   var  = b (1-g_s)/(1-g_t)
    //   x_s = mean + sqrt(var) * fresh normal draw   (x_0 case: x = x0)
    // With updates present the weights are merged exactly once, before the loop.
    Tensor<T> sample_loop(std::int64_t class_id, std::int64_t steps, const UpdateSet<T>* updates,
                          SeededRng& rng, const std::vector<ActQuantSite<T>>* act_quant = nullptr,
                          const MergedWeights<T>* premerged = nullptr) {
        if (steps < 1 || steps > cfg.num_timesteps) {
            throw std::runtime_error("sample_loop: steps " + std::to_string(steps) + " outside [1," +
                                     std::to_string(cfg.num_timesteps) + "]");
        }
        MergedWeights<T> local;
        const MergedWeights<T>* merged = premerged;
        if (updates && !merged) {
            local = merge(frozen_targets(updates->keys), *updates);
            merged = &local;
        }
        const std::int64_t big_t = cfg.num_timesteps;
        std::vector<std::int64_t> times(static_cast<std::size_t>(steps));
        for (std::int64_t i = 0; i < steps; ++i) times[static_cast<std::size_t>(i)] = big_t - (i * big_t) / steps;

        Tensor<T> x = Tensor<T>::randn({1, cfg.pixels()}, rng);
        for (std::int64_t i = 0; i < steps; ++i) {
            const std::int64_t t = times[static_cast<std::size_t>(i)];
            const std::int64_t s = (i + 1 < steps) ? times[static_cast<std::size_t>(i + 1)] : 0;
            Tensor<T> eps_hat = forward(nullptr, x, {t}, {class_id}, nullptr, merged, merged ? act_quant : nullptr);
            const T gt = schedule.gamma_t(t);
            Tensor<T> x0({1, cfg.pixels()});
            const T inv_sq_gt = T(1) / std::sqrt(gt);
            const T sq_1mgt = std::sqrt(T(1) - gt);
            for (std::int64_t j = 0; j < x.numel(); ++j) {
                T v = (x.data()[j] - sq_1mgt * eps_hat.data()[j]) * inv_sq_gt;
                x0.data()[j] = std::min(T(1), std::max(T(-1), v));
            }
            if (s == 0) {
                x = x0;
                break;
            }
            const T gs = schedule.gamma_t(s);
            const T a = gt / gs;
            const T b = T(1) - a;
            const T c0 = std::sqrt(gs) * b / (T(1) - gt);
            const T c1 = std::sqrt(a) * (T(1) - gs) / (T(1) - gt);
            const T sd = std::sqrt(b * (T(1) - gs) / (T(1) - gt));
            Tensor<T> nx({1, cfg.pixels()});
            for (std::int64_t j = 0; j < x.numel(); ++j) {
                nx.data()[j] = c0 * x0.data()[j] + c1 * x.data()[j] + sd * static_cast<T>(rng.normal());
            }
            x = nx;
        }
        return x;
    }

private:
    // One adaptation hook point. Batched training path is bit-identical to
    // per-sample apply_training_path calls because every involved op is
    // row-local.
    Tensor<T> adapted_site(Tape<T>* tape, const Tensor<T>& h, const Tensor<T>& w, TargetKey key,
                           const std::vector<const UpdateSet<T>*>* per_sample_updates,
                           const MergedWeights<T>* merged, const std::vector<ActQuantSite<T>>* act_quant,
                           SiteCapture<T>* capture, std::int64_t group) {
        if (merged) {
            if (const Tensor<T>* wp = merged->find(key)) {
                Tensor<T> in = h;
                if (act_quant) {
                    for (const ActQuantSite<T>& site : *act_quant) {
                        if (site.key == key) {
                            in = fake_quantize(tape, scale(tape, h, site.gamma), site.bits, site.scale);
                            break;
                        }
                    }
                }
                return apply_inference_path(tape, in, *wp);
            }
            return linear(tape, h, w);
        }
        if (per_sample_updates) {
            bool any = false;
            for (const UpdateSet<T>* u : *per_sample_updates) {
                if (u && u->find(key)) any = true;
            }
            if (any) {
                ++Counters::training_path_calls;  // one fused batched application of this site
                Tensor<T> base = linear(tape, h, w);
                std::vector<Tensor<T>> corr;
                corr.reserve(per_sample_updates->size());
                for (std::size_t b = 0; b < per_sample_updates->size(); ++b) {
                    const UpdateSet<T>* u = (*per_sample_updates)[b];
                    const LowRankUpdate<T>* lr = u ? u->find(key) : nullptr;
                    if (lr) {
                        Tensor<T> hb = slice_rows(tape, h, static_cast<std::int64_t>(b) * group,
                                                  static_cast<std::int64_t>(b + 1) * group);
                        corr.push_back(matmul_nt(tape, matmul_nt(tape, hb, lr->B), lr->A));
                    } else {
                        corr.push_back(Tensor<T>::zeros({group, w.rows()}));
                    }
                }
                return add(tape, base, concat_rows(tape, corr));
            }
        }
        Tensor<T> out = linear(tape, h, w);
        if (capture) {
            for (std::size_t i = 0; i < capture->keys.size(); ++i) {
                if (capture->keys[i] == key) {
                    capture->x[i] = h;
                    capture->h[i] = out;
                }
            }
        }
        return out;
    }
};

}  // namespace composer
