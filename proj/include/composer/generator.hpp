#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "composer/composition.hpp"
#include "composer/denoiser.hpp"
#include "composer/layout.hpp"
#include "composer/ops.hpp"
#include "composer/rng.hpp"
#include "composer/tape.hpp"
#include "composer/tensor.hpp"

namespace composer {

enum class AttentionKind { global_local, standard };
enum class GeneratorArch { transformer, mlp };
enum class TokenInit { projected, constant };

struct ComposerConfig {
    std::int64_t r = 8;
    std::int64_t d_model = 64;
    std::int64_t L = 2;
    std::int64_t heads = 4;
    std::int64_t m = 1;
    AttentionKind attention = AttentionKind::global_local;
    GeneratorArch arch = GeneratorArch::transformer;
    TokenInit token_init = TokenInit::projected;
    FirstTokenRule first_token_rule = FirstTokenRule::first_to_first;
    bool quant = false;

    void validate() const {
        if (r < 1) throw std::runtime_error("composer config: r must be >= 1");
        if (d_model % heads != 0) {
            throw std::runtime_error("composer config: d_model " + std::to_string(d_model) +
                                     " not divisible by heads " + std::to_string(heads));
        }
        if (m < 1 || L < 1) throw std::runtime_error("composer config: m and L must be >= 1");
    }
};

// The meta-generator: stored component tokens (projected from the frozen
// weights, or constant-learnable) are concatenated with prompt tokens, run
// through an encoder under the global-local mask, and decoded into one
// LowRankUpdate per adaptation target.
//
// Extraction uses two separate per-token heads: the B head is zero-initialized
// (weight and bias), so every generated B — and hence every update AB — is
// exactly zero at the start of training, while the A head starts small-random
// so the B head receives nonzero gradient from step one. A single zero head
// over both factors would be a stationary point: dL/dA = (dL/dAB) B^T and
// dL/dB = A^T (dL/dAB) both vanish identically at A = B = 0.
template <typename T>
class MetaGenerator {
public:
    ComposerConfig cfg;
    std::int64_t d = 0;            // backbone attention width (update dimensions)
    std::int64_t num_classes = 0;  // prompt vocabulary
    std::vector<TargetKey> keys;
    SequenceLayout lay;

    struct Layer {
        Tensor<T> wq, wk, wv, wo;
        Tensor<T> ln1_g, ln1_b, ln2_g, ln2_b;
        Tensor<T> ff1_w, ff1_b, ff2_w, ff2_b;
    };

    static MetaGenerator init(const ComposerConfig& c, const Denoiser<T>& backbone,
                              const std::vector<Target>& subset, SeededRng& rng) {
        c.validate();
        MetaGenerator g;
        g.cfg = c;
        g.d = backbone.cfg.d;
        g.num_classes = backbone.cfg.num_classes;
        g.keys = collect_adaptation_targets(backbone.cfg, subset);
        g.lay = SequenceLayout::build(static_cast<int>(c.m), static_cast<int>(c.r), g.keys, c.quant);
        g.mask_ = build_mask(g.lay, c.first_token_rule);
        g.target_w_ = backbone.frozen_targets(g.keys);

        const std::int64_t dm = c.d_model, r = c.r;
        const T w0 = T(0.02);
        if (c.token_init == TokenInit::projected) {
            for (std::size_t t = 0; t < g.keys.size(); ++t) {
                g.proj_w_.push_back(Tensor<T>::randn({2 * r * dm, g.d * g.d}, rng, w0 / std::sqrt(static_cast<T>(g.d))));
                g.proj_b_.push_back(Tensor<T>::zeros({2 * r * dm}));
            }
        } else {
            for (std::size_t t = 0; t < g.keys.size(); ++t) {
                g.bank_.push_back(Tensor<T>::randn({2 * r, dm}, rng, w0));
            }
        }
        if (c.quant) {
            for (std::size_t t = 0; t < g.keys.size(); ++t) {
                g.gamma_tok_.push_back(Tensor<T>::randn({1, dm}, rng, w0));
            }
        }
        g.prompt_table_ = Tensor<T>::randn({g.num_classes, c.m * dm}, rng, w0);
        if (c.arch == GeneratorArch::transformer) {
            g.pos_table_ = Tensor<T>::randn({g.lay.length(), dm}, rng, w0);
            for (std::int64_t l = 0; l < c.L; ++l) {
                Layer lay;
                lay.wq = Tensor<T>::randn({dm, dm}, rng, w0);
                lay.wk = Tensor<T>::randn({dm, dm}, rng, w0);
                lay.wv = Tensor<T>::randn({dm, dm}, rng, w0);
                lay.wo = Tensor<T>::randn({dm, dm}, rng, w0);
                lay.ln1_g = Tensor<T>::full({dm}, T(1));
                lay.ln1_b = Tensor<T>::zeros({dm});
                lay.ln2_g = Tensor<T>::full({dm}, T(1));
                lay.ln2_b = Tensor<T>::zeros({dm});
                lay.ff1_w = Tensor<T>::randn({4 * dm, dm}, rng, w0);
                lay.ff1_b = Tensor<T>::zeros({4 * dm});
                lay.ff2_w = Tensor<T>::randn({dm, 4 * dm}, rng, w0);
                lay.ff2_b = Tensor<T>::zeros({dm});
                g.enc_.push_back(std::move(lay));
            }
        } else {
            const std::int64_t in = g.lay.length() * dm, hidden = 4 * dm;
            g.mlp_w1_ = Tensor<T>::randn({hidden, in}, rng, w0 / std::sqrt(static_cast<T>(g.lay.length())));
            g.mlp_b1_ = Tensor<T>::zeros({hidden});
            g.mlp_w2_ = Tensor<T>::randn({in, hidden}, rng, w0);
            g.mlp_b2_ = Tensor<T>::zeros({in});
        }
        g.lnf_g_ = Tensor<T>::full({dm}, T(1));
        g.lnf_b_ = Tensor<T>::zeros({dm});
        g.headA_w_ = Tensor<T>::randn({g.d, dm}, rng, w0);
        g.headA_b_ = Tensor<T>::zeros({g.d});
        g.headB_w_ = Tensor<T>::zeros({g.d, dm});  // exact zero updates at init
        g.headB_b_ = Tensor<T>::zeros({g.d});
        if (c.quant) {
            // bias solves softplus(b) = 1, so the decoded scale starts at
            // exactly 1 and the quantized student begins at the zero-update
            // baseline; the zero weight still receives gradient.
            g.headG_w_ = Tensor<T>::zeros({1, dm});
            g.headG_b_ = Tensor<T>::full({1}, static_cast<T>(0.5413248546129181));
        }
        return g;
    }

    bool frozen() const { return frozen_; }
    const std::vector<std::uint8_t>& mask() const { return mask_; }

    // Fake-quantize composer weight matrices (STE) during quant training;
    // 0 disables.
    void set_weight_bits(int bits) { w_bits_ = bits; }
    int weight_bits() const { return w_bits_; }

    std::vector<std::pair<std::string, Tensor<T>>> named_params() {
        std::vector<std::pair<std::string, Tensor<T>>> out;
        if (!frozen_) {
            if (cfg.token_init == TokenInit::projected) {
                for (std::size_t t = 0; t < proj_w_.size(); ++t) {
                    out.emplace_back("composer.proj" + std::to_string(t) + ".w", proj_w_[t]);
                    out.emplace_back("composer.proj" + std::to_string(t) + ".b", proj_b_[t]);
                }
            } else {
                for (std::size_t t = 0; t < bank_.size(); ++t) {
                    out.emplace_back("composer.bank" + std::to_string(t), bank_[t]);
                }
            }
            for (std::size_t t = 0; t < gamma_tok_.size(); ++t) {
                out.emplace_back("composer.gamma_tok" + std::to_string(t), gamma_tok_[t]);
            }
        }
        out.emplace_back("composer.prompt_table", prompt_table_);
        if (cfg.arch == GeneratorArch::transformer) {
            out.emplace_back("composer.pos_table", pos_table_);
            for (std::size_t l = 0; l < enc_.size(); ++l) {
                const std::string p = "composer.enc" + std::to_string(l) + ".";
                Layer& lay = enc_[l];
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
        } else {
            out.emplace_back("composer.mlp.w1", mlp_w1_);
            out.emplace_back("composer.mlp.b1", mlp_b1_);
            out.emplace_back("composer.mlp.w2", mlp_w2_);
            out.emplace_back("composer.mlp.b2", mlp_b2_);
        }
        out.emplace_back("composer.lnf_g", lnf_g_);
        out.emplace_back("composer.lnf_b", lnf_b_);
        out.emplace_back("composer.headA.w", headA_w_);
        out.emplace_back("composer.headA.b", headA_b_);
        out.emplace_back("composer.headB.w", headB_w_);
        out.emplace_back("composer.headB.b", headB_b_);
        if (cfg.quant) {
            out.emplace_back("composer.headG.w", headG_w_);
            out.emplace_back("composer.headG.b", headG_b_);
        }
        return out;
    }

    // Everything a checkpoint needs, including frozen bank tokens.
    std::vector<std::pair<std::string, Tensor<T>>> named_state() {
        auto out = named_params();
        if (frozen_) {
            for (std::size_t t = 0; t < bank_.size(); ++t) {
                out.emplace_back("composer.bank" + std::to_string(t), bank_[t]);
            }
            for (std::size_t t = 0; t < gamma_tok_.size(); ++t) {
                out.emplace_back("composer.gamma_tok" + std::to_string(t), gamma_tok_[t]);
            }
        }
        return out;
    }

    void set_trainable(bool on) {
        for (auto& [name, p] : named_params()) p.set_requires_grad(on);
    }

    // m prompt tokens for a class, reshaped from the class's table row
    Tensor<T> prompt_encode(Tape<T>* tape, std::int64_t class_id) {
        if (class_id < 0 || class_id >= num_classes) {
            throw std::runtime_error("prompt_encode: class " + std::to_string(class_id) + " outside [0," +
                                     std::to_string(num_classes) + ")");
        }
        return gather_rows(tape, prompt_table_, {class_id}).reshaped({cfg.m, cfg.d_model});
    }

    // Projector applied to one frozen weight matrix: 2r tokens, first r are
    // A-tokens, last r are B-tokens.
    Tensor<T> project_weights(Tape<T>* tape, std::size_t target_idx) {
        if (cfg.token_init != TokenInit::projected || frozen_) {
            throw std::runtime_error("project_weights: token bank is not in projected mode");
        }
        const Tensor<T>& w = target_w_[target_idx];
        Tensor<T> flat = w.reshaped({1, d * d});
        Tensor<T> tok = linear(tape, flat, qw(tape, proj_w_[target_idx]), &proj_b_[target_idx]);
        return tok.reshaped({2 * cfg.r, cfg.d_model});
    }

    // Replace the projector with its outputs as stored constants. The bank no
    // longer depends on the backbone weights afterwards.
    void freeze() {
        if (cfg.token_init != TokenInit::projected) {
            throw std::runtime_error("freeze: token bank is not in projected mode");
        }
        if (frozen_) throw std::runtime_error("freeze: token bank already frozen");
        bank_.clear();
        for (std::size_t t = 0; t < keys.size(); ++t) {
            bank_.push_back(project_weights(nullptr, t).clone());
        }
        for (auto& g : gamma_tok_) g = g.clone();
        for (auto& b : bank_) b.set_requires_grad(false);
        for (auto& g : gamma_tok_) g.set_requires_grad(false);
        proj_w_.clear();
        proj_b_.clear();
        frozen_ = true;
    }

    UpdateSet<T> generate(Tape<T>* tape, std::int64_t class_id) {
        return std::move(generate_batch(tape, {class_id})[0]);
    }

    // One UpdateSet per (distinct) class, computed in a single stacked
    // forward. Component tokens are shared tensors across the batch.
    std::vector<UpdateSet<T>> generate_batch(Tape<T>* tape, const std::vector<std::int64_t>& classes) {
        const std::int64_t nb = static_cast<std::int64_t>(classes.size());
        if (nb < 1) throw std::runtime_error("generate: empty class list");
        const std::int64_t ls = lay.length(), dm = cfg.d_model, r = cfg.r;

        std::vector<Tensor<T>> blocks;  // per target, shared across classes
        for (std::size_t t = 0; t < keys.size(); ++t) {
            Tensor<T> tok = (cfg.token_init == TokenInit::projected && !frozen_)
                                ? project_weights(tape, t)
                                : bank_[t];
            if (cfg.quant) tok = concat_rows(tape, {tok, gamma_tok_[t]});
            blocks.push_back(tok);
        }
        std::vector<Tensor<T>> parts;
        parts.reserve(static_cast<std::size_t>(nb) * (keys.size() + 1));
        for (std::int64_t c = 0; c < nb; ++c) {
            parts.push_back(prompt_encode(tape, classes[static_cast<std::size_t>(c)]));
            for (auto& b : blocks) parts.push_back(b);
        }
        Tensor<T> x = concat_rows(tape, parts);  // (nb*ls) x dm

        if (cfg.arch == GeneratorArch::transformer) {
            x = add_cyclic(tape, x, pos_table_, ls);
            x = encode(tape, x, nb);
        } else {
            Tensor<T> flat = x.reshaped({nb, ls * dm});
            Tensor<T> h = gelu(tape, linear(tape, flat, qw(tape, mlp_w1_), &mlp_b1_));
            x = linear(tape, h, qw(tape, mlp_w2_), &mlp_b2_).reshaped({nb * ls, dm});
        }
        x = layernorm(tape, x, lnf_g_, lnf_b_);

        Tensor<T> headA = qw(tape, headA_w_), headB = qw(tape, headB_w_);
        std::vector<UpdateSet<T>> out;
        out.reserve(static_cast<std::size_t>(nb));
        for (std::int64_t c = 0; c < nb; ++c) {
            UpdateSet<T> set;
            set.id = UpdateSet<T>::next_id();
            set.keys = keys;
            for (std::size_t t = 0; t < keys.size(); ++t) {
                const std::int64_t start = c * ls + lay.block_start(static_cast<int>(t) + 1);
                Tensor<T> ea = slice_rows(tape, x, start, start + r);
                Tensor<T> eb = slice_rows(tape, x, start + r, start + 2 * r);
                LowRankUpdate<T> u;
                u.A = qab(tape, transpose(tape, linear(tape, ea, headA, &headA_b_)));  // d x r
                u.B = qab(tape, linear(tape, eb, headB, &headB_b_));                   // r x d
                set.updates.push_back(std::move(u));
                if (cfg.quant) {
                    Tensor<T> eg = slice_rows(tape, x, start + 2 * r, start + 2 * r + 1);
                    set.gamma_act.push_back(softplus(tape, linear(tape, eg, qw(tape, headG_w_), &headG_b_)));
                }
            }
            out.push_back(std::move(set));
        }
        return out;
    }

private:
    Tensor<T> encode(Tape<T>* tape, Tensor<T> x, std::int64_t nb) {
        const std::int64_t ls = lay.length(), dm = cfg.d_model, nh = cfg.heads, dh = dm / nh;
        std::vector<std::uint8_t> tiled;
        if (cfg.attention == AttentionKind::global_local) {
            tiled.resize(static_cast<std::size_t>(nb * ls * ls));
            for (std::int64_t b = 0; b < nb; ++b) {
                std::copy(mask_.begin(), mask_.end(), tiled.begin() + b * ls * ls);
            }
        }
        for (auto& lay_p : enc_) {
            Tensor<T> h = layernorm(tape, x, lay_p.ln1_g, lay_p.ln1_b);
            Tensor<T> q = linear(tape, h, qw(tape, lay_p.wq));
            Tensor<T> k = linear(tape, h, qw(tape, lay_p.wk));
            Tensor<T> v = linear(tape, h, qw(tape, lay_p.wv));
            std::vector<Tensor<T>> outs;
            outs.reserve(static_cast<std::size_t>(nh));
            for (std::int64_t hd = 0; hd < nh; ++hd) {
                Tensor<T> qh = slice_cols(tape, q, hd * dh, (hd + 1) * dh);
                Tensor<T> kh = slice_cols(tape, k, hd * dh, (hd + 1) * dh);
                Tensor<T> vh = slice_cols(tape, v, hd * dh, (hd + 1) * dh);
                Tensor<T> sc = scale(tape, bmm_nt_group(tape, qh, kh, ls), T(1) / std::sqrt(static_cast<T>(dh)));
                Tensor<T> p = softmax_masked(tape, sc, tiled);
                outs.push_back(bmm_nn_group(tape, p, vh, ls));
            }
            Tensor<T> o = linear(tape, concat_cols(tape, outs), qw(tape, lay_p.wo));
            x = add(tape, x, o);
            Tensor<T> f = layernorm(tape, x, lay_p.ln2_g, lay_p.ln2_b);
            Tensor<T> f1 = gelu(tape, linear(tape, f, qw(tape, lay_p.ff1_w), &lay_p.ff1_b));
            Tensor<T> f2 = linear(tape, f1, qw(tape, lay_p.ff2_w), &lay_p.ff2_b);
            x = add(tape, x, f2);
        }
        return x;
    }

    // straight-through fake-quant of a composer weight matrix (quant training)
    Tensor<T> qw(Tape<T>* tape, const Tensor<T>& w) {
        if (w_bits_ == 0 || w_bits_ >= 16) return w;
        const T ma = w.max_abs();
        if (ma == T(0)) return w;
        const T qmax = static_cast<T>((1 << (w_bits_ - 1)) - 1);
        return fake_quantize(tape, w, w_bits_, ma / qmax);
    }

    // generated factors are kept in the same low-precision format
    Tensor<T> qab(Tape<T>* tape, const Tensor<T>& x) { return qw(tape, x); }

    std::vector<std::uint8_t> mask_;
    std::vector<Tensor<T>> target_w_;
    std::vector<Tensor<T>> proj_w_, proj_b_;
    std::vector<Tensor<T>> bank_;
    std::vector<Tensor<T>> gamma_tok_;
    Tensor<T> prompt_table_, pos_table_;
    std::vector<Layer> enc_;
    Tensor<T> mlp_w1_, mlp_b1_, mlp_w2_, mlp_b2_;
    Tensor<T> lnf_g_, lnf_b_;
    Tensor<T> headA_w_, headA_b_, headB_w_, headB_b_;
    Tensor<T> headG_w_, headG_b_;
    bool frozen_ = false;
    int w_bits_ = 0;
};

}  // namespace composer
