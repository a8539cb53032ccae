// Gate checks for the composed-update system. Each check prints one PASS/FAIL
// line with its measured values, tolerances and elapsed time; the process
// exit code is the number of failed checks. `--criterion N` (repeatable)
// restricts the run while developing.
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "composer/bench.hpp"
#include "composer/checkpoint.hpp"
#include "composer/config.hpp"
#include "composer/dataset.hpp"
#include "composer/finite_diff.hpp"
#include "composer/layout.hpp"
#include "composer/linalg.hpp"
#include "composer/quant.hpp"
#include "composer/train.hpp"

using namespace composer;
using F = float;
using D = double;

namespace {

std::string fnum(double v) {
    char b[48];
    std::snprintf(b, sizeof b, "%.6g", v);
    return b;
}

struct Outcome {
    bool pass = true;
    std::string detail;
};

// ---------------------------------------------------------------------------
// shared fixtures, built once on first use

struct SeedRun {
    SyntheticDataset<F> ds;
    SimilarityIndex<F> index;
    Denoiser<F> model;  // pretrained and frozen
};

class Lab {
public:
    // Pretrained backbone plus data for one seed of the default configuration.
    // Pretraining runs hotter (lr 1e-3) than the composer-fitting default.
    SeedRun& seed_run(std::uint64_t s) {
        auto it = runs_.find(s);
        if (it != runs_.end()) return it->second;
        RunConfig cfg;
        cfg.seed = s;
        SeedRun r;
        r.ds = gen_synthetic_dataset<F>(s, cfg.dataset_n, cfg.dataset_c, cfg.backbone_image_size);
        r.index = SimilarityIndex<F>::build(r.ds);
        SeededRng brng = SeededRng(s).split("backbone-init");
        r.model = Denoiser<F>::init(make_backbone_config(cfg), brng);
        TrainSettings st = make_train_settings(cfg);
        st.lr = 1e-3;
        st.pipeline = BatchMode::vanilla;
        pretrain_backbone(r.model, r.ds, st);
        return runs_.emplace(s, std::move(r)).first->second;
    }

    // dataset-only fixture (no training), for the sampler checks
    std::pair<SyntheticDataset<F>*, SimilarityIndex<F>*> data0() {
        if (!data_built_) {
            RunConfig cfg;
            data_ds_ = gen_synthetic_dataset<F>(0, cfg.dataset_n, cfg.dataset_c, cfg.backbone_image_size);
            data_index_ = SimilarityIndex<F>::build(data_ds_);
            data_built_ = true;
        }
        return {&data_ds_, &data_index_};
    }

private:
    std::map<std::uint64_t, SeedRun> runs_;
    SyntheticDataset<F> data_ds_;
    SimilarityIndex<F> data_index_;
    bool data_built_ = false;
};

// ---------------------------------------------------------------------------
// 1. additive and merged application paths agree

template <typename T>
double path_extreme(int instances, double factor_scale, SeededRng& rng) {
    double worst = 0.0;
    for (int i = 0; i < instances; ++i) {
        Tensor<T> w = Tensor<T>::randn({64, 64}, rng);
        LowRankUpdate<T> u;
        u.A = Tensor<T>::randn({64, 8}, rng, static_cast<T>(factor_scale));
        u.B = Tensor<T>::randn({8, 64}, rng, static_cast<T>(factor_scale));
        worst = std::max(worst, static_cast<double>(path_equivalence_check(w, u, 1, rng)));
    }
    return worst;
}

Outcome crit_paths(Lab&) {
    const double fs = 1.0 / std::sqrt(64.0);
    SeededRng r32(101), r64(102);
    const double m32 = path_extreme<F>(500, fs, r32);
    const double m64 = path_extreme<D>(500, fs, r64);
    Outcome o;
    o.pass = m32 <= 1e-4 && m64 <= 1e-10;
    o.detail = "32-bit max " + fnum(m32) + " (tol 1e-4), 64-bit max " + fnum(m64) + " (tol 1e-10), 500 instances each";
    return o;
}

// ---------------------------------------------------------------------------
// 2. zero extraction head leaves generation bit-identical

Outcome crit_zero_init(Lab&) {
    RunConfig cfg;
    SeededRng brng = SeededRng(2024).split("backbone-init");
    Denoiser<F> model = Denoiser<F>::init(make_backbone_config(cfg), brng);
    SeededRng grng = SeededRng(2024).split("composer-init");
    MetaGenerator<F> gen =
        MetaGenerator<F>::init(make_composer_config(cfg), model, parse_targets(cfg.composer_targets), grng);

    int identical = 0;
    for (int i = 0; i < 10; ++i) {
        const std::int64_t cls = i % cfg.dataset_c;
        UpdateSet<F> set = gen.generate(nullptr, cls);
        SeededRng ra(7000 + static_cast<std::uint64_t>(i));
        SeededRng rb(7000 + static_cast<std::uint64_t>(i));
        Tensor<F> base = model.sample_loop(cls, cfg.bench_steps, nullptr, ra);
        Tensor<F> adapted = model.sample_loop(cls, cfg.bench_steps, &set, rb);
        if (std::memcmp(base.data(), adapted.data(), sizeof(F) * static_cast<std::size_t>(base.numel())) == 0) {
            ++identical;
        }
    }
    Outcome o;
    o.pass = identical == 10;
    o.detail = std::to_string(identical) + "/10 prompt-seed pairs bit-identical at " +
               std::to_string(cfg.bench_steps) + " sampler steps";
    return o;
}

// ---------------------------------------------------------------------------
// 3. attention mask equals the rule enumeration; hubs connect the layout

std::vector<std::uint8_t> rule_mask(const SequenceLayout& lay, FirstTokenRule rule) {
    const int n = lay.length();
    std::vector<std::uint8_t> m(static_cast<std::size_t>(n) * static_cast<std::size_t>(n), 0);
    for (int q = 0; q < n; ++q) {
        for (int k = 0; k < n; ++k) {
            const TokenInfo& tq = lay.tokens[static_cast<std::size_t>(q)];
            const TokenInfo& tk = lay.tokens[static_cast<std::size_t>(k)];
            bool allow = false;
            if (tq.role == Role::prompt && tk.role == Role::prompt) allow = true;
            if (tq.role != Role::prompt && tk.role == Role::prompt) allow = true;
            if (tq.role != Role::prompt && tk.role != Role::prompt && tq.block == tk.block) allow = true;
            if (tq.role != Role::prompt && tk.role != Role::prompt && tq.offset == 0 &&
                (rule == FirstTokenRule::first_to_all || tk.offset == 0)) {
                allow = true;
            }
            if (allow) m[static_cast<std::size_t>(q) * static_cast<std::size_t>(n) + static_cast<std::size_t>(k)] = 1;
        }
    }
    return m;
}

Outcome crit_mask(Lab&) {
    const std::vector<TargetKey> pool = {{0, Target::Q}, {0, Target::K}, {0, Target::V},
                                         {0, Target::O}, {1, Target::Q}, {1, Target::V}};
    int layouts = 0;
    for (int m = 1; m <= 4; ++m) {
        for (std::size_t nk = 1; nk <= pool.size(); ++nk) {
            for (int r = 1; r <= 3; ++r) {
                for (bool quant : {false, true}) {
                    for (FirstTokenRule rule : {FirstTokenRule::first_to_first, FirstTokenRule::first_to_all}) {
                        std::vector<TargetKey> keys(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(nk));
                        SequenceLayout lay = SequenceLayout::build(m, r, keys, quant);
                        const int n = lay.length();
                        const std::vector<std::uint8_t> mask = build_mask(lay, rule);
                        if (mask != rule_mask(lay, rule)) {
                            return {false, "mask mismatch at m=" + std::to_string(m) + " blocks=" +
                                               std::to_string(nk) + " r=" + std::to_string(r)};
                        }
                        auto at = [&](int a, int b) {
                            return mask[static_cast<std::size_t>(a) * static_cast<std::size_t>(n) +
                                        static_cast<std::size_t>(b)] != 0;
                        };
                        auto reach2 = [&](int a, int b) {
                            if (at(a, b)) return true;
                            for (int w = 0; w < n; ++w) {
                                if (at(a, w) && at(w, b)) return true;
                            }
                            return false;
                        };
                        // every component token sees every prompt token directly
                        for (int q = m; q < n; ++q) {
                            for (int p = 0; p < m; ++p) {
                                if (!at(q, p)) return {false, "component token lost its prompt view"};
                            }
                        }
                        // any block's first token collects any component token in <= 2 hops
                        for (std::size_t bi = 0; bi < nk; ++bi) {
                            const int hub = lay.block_start(static_cast<int>(bi) + 1);
                            for (int k = m; k < n; ++k) {
                                if (!reach2(hub, k)) return {false, "hub cannot gather the layout in 2 hops"};
                            }
                        }
                        if (rule == FirstTokenRule::first_to_all) {
                            for (int q = m; q < n; ++q) {
                                for (int k = m; k < n; ++k) {
                                    if (!reach2(q, k)) return {false, "first_to_all left tokens unreachable"};
                                }
                            }
                        }
                        ++layouts;
                    }
                }
            }
        }
    }
    return {true, std::to_string(layouts) + " layouts (m<=4, blocks<=6) match the rule enumeration, hubs span in 2 hops"};
}

// ---------------------------------------------------------------------------
// 4. analytic gradients match central differences (64-bit, h = 1e-5)

template <typename Builder>
void fd_worst(const std::vector<std::pair<std::string, Tensor<D>>>& params, Builder&& build, const char* op,
              double& worst, std::string& worst_at) {
    for (auto& [name, p] : params) const_cast<Tensor<D>&>(p).set_requires_grad(true);
    auto rep = check_gradients<D>(params, std::forward<Builder>(build));
    if (rep.max_rel_err > worst) {
        worst = rep.max_rel_err;
        worst_at = std::string(op) + ":" + rep.worst;
    }
}

double primitive_grad_err(std::string& worst_at) {
    SeededRng rng(400);
    auto rnd = [&rng](Shape s, double scl = 1.0) {
        Tensor<D> t = Tensor<D>::randn(s, rng, scl);
        return t;
    };
    double worst = 0.0;
    Tensor<D> a = rnd({3, 4}), b = rnd({3, 4}), tgt34 = rnd({3, 4}), s1 = rnd({1});
    auto scal = [&](Tape<D>* t, const Tensor<D>& y, const Tensor<D>& tg) { return sq_diff_sum(t, y, tg); };
    fd_worst({{"a", a}, {"b", b}}, [&](Tape<D>* t) { return scal(t, add(t, a, b), tgt34); }, "add", worst, worst_at);
    fd_worst({{"a", a}, {"b", b}}, [&](Tape<D>* t) { return scal(t, sub(t, a, b), tgt34); }, "sub", worst, worst_at);
    fd_worst({{"a", a}, {"b", b}}, [&](Tape<D>* t) { return scal(t, mul(t, a, b), tgt34); }, "mul", worst, worst_at);
    fd_worst({{"a", a}}, [&](Tape<D>* t) { return scal(t, scale(t, a, 1.7), tgt34); }, "scale", worst, worst_at);
    fd_worst({{"a", a}, {"s", s1}}, [&](Tape<D>* t) { return scal(t, mul_scalar(t, a, s1), tgt34); }, "mul_scalar",
             worst, worst_at);
    fd_worst({{"a", a}}, [&](Tape<D>* t) { return scal(t, gelu(t, a), tgt34); }, "gelu", worst, worst_at);
    fd_worst({{"a", a}}, [&](Tape<D>* t) { return scal(t, softplus(t, a), tgt34); }, "softplus", worst, worst_at);

    Tensor<D> mb = rnd({4, 5}), mbt = rnd({5, 4}), tgt35 = rnd({3, 5});
    fd_worst({{"a", a}, {"b", mb}}, [&](Tape<D>* t) { return scal(t, matmul(t, a, mb), tgt35); }, "matmul", worst,
             worst_at);
    fd_worst({{"a", a}, {"b", mbt}}, [&](Tape<D>* t) { return scal(t, matmul_nt(t, a, mbt), tgt35); }, "matmul_nt",
             worst, worst_at);
    Tensor<D> w = rnd({5, 4}), bias = rnd({5});
    fd_worst({{"a", a}, {"w", w}, {"bias", bias}},
             [&](Tape<D>* t) { return scal(t, linear(t, a, w, &bias), tgt35); }, "linear", worst, worst_at);

    Tensor<D> q = rnd({4, 3}), k = rnd({4, 3}), tgt_s = rnd({4, 2});
    fd_worst({{"q", q}, {"k", k}}, [&](Tape<D>* t) { return scal(t, bmm_nt_group(t, q, k, 2), tgt_s); },
             "bmm_nt_group", worst, worst_at);
    Tensor<D> pm = rnd({4, 2}), v = rnd({4, 3}), tgt_o = rnd({4, 3});
    fd_worst({{"p", pm}, {"v", v}}, [&](Tape<D>* t) { return scal(t, bmm_nn_group(t, pm, v, 2), tgt_o); },
             "bmm_nn_group", worst, worst_at);

    Tensor<D> sc = rnd({3, 3}), tgt33 = rnd({3, 3});
    std::vector<std::uint8_t> mask = {1, 1, 0, 0, 1, 1, 1, 1, 1};
    fd_worst({{"sc", sc}}, [&](Tape<D>* t) { return scal(t, softmax_masked(t, sc, mask), tgt33); }, "softmax_masked",
             worst, worst_at);
    Tensor<D> lx = rnd({3, 6}), lg = rnd({6}, 0.5), lb = rnd({6}, 0.5), tgt36 = rnd({3, 6});
    fd_worst({{"x", lx}, {"g", lg}, {"b", lb}}, [&](Tape<D>* t) { return scal(t, layernorm(t, lx, lg, lb), tgt36); },
             "layernorm", worst, worst_at);

    Tensor<D> x4 = rnd({4, 6}), e2 = rnd({2, 6}), tgt46 = rnd({4, 6});
    fd_worst({{"x", x4}, {"e", e2}}, [&](Tape<D>* t) { return scal(t, add_cyclic(t, x4, e2, 2), tgt46); },
             "add_cyclic", worst, worst_at);
    fd_worst({{"x", x4}, {"e", e2}}, [&](Tape<D>* t) { return scal(t, add_per_group(t, x4, e2, 2), tgt46); },
             "add_per_group", worst, worst_at);

    Tensor<D> x = rnd({4, 5}), tgt_rows = rnd({3, 5});
    fd_worst({{"x", x}}, [&](Tape<D>* t) { return scal(t, gather_rows(t, x, {2, 0, 2}), tgt_rows); }, "gather_rows",
             worst, worst_at);
    fd_worst({{"x", x}}, [&](Tape<D>* t) { return scal(t, slice_rows(t, x, 1, 4), tgt_rows); }, "slice_rows", worst,
             worst_at);
    Tensor<D> tgt_cols = rnd({4, 3});
    fd_worst({{"x", x}}, [&](Tape<D>* t) { return scal(t, slice_cols(t, x, 2, 5), tgt_cols); }, "slice_cols", worst,
             worst_at);
    Tensor<D> y = rnd({2, 5}), tgt_cat = rnd({6, 5});
    fd_worst({{"x", x}, {"y", y}}, [&](Tape<D>* t) { return scal(t, concat_rows(t, {x, y}), tgt_cat); },
             "concat_rows", worst, worst_at);
    Tensor<D> z = rnd({4, 2}), tgt_cc = rnd({4, 7});
    fd_worst({{"x", x}, {"z", z}}, [&](Tape<D>* t) { return scal(t, concat_cols(t, {x, z}), tgt_cc); }, "concat_cols",
             worst, worst_at);
    Tensor<D> tgt_t = rnd({5, 4});
    fd_worst({{"x", x}}, [&](Tape<D>* t) { return scal(t, transpose(t, x), tgt_t); }, "transpose", worst, worst_at);
    fd_worst({{"x", x}}, [&](Tape<D>* t) { return sum_all(t, mul(t, x, x)); }, "sum_all", worst, worst_at);
    Tensor<D> img = rnd({2, 16}), tgt_p = rnd({8, 4});
    fd_worst({{"img", img}}, [&](Tape<D>* t) { return scal(t, patchify(t, img, 4, 2), tgt_p); }, "patchify", worst,
             worst_at);
    Tensor<D> other = rnd({4, 5});
    fd_worst({{"x", x}, {"other", other}}, [&](Tape<D>* t) { return sq_diff_sum(t, x, other); }, "sq_diff_sum",
             worst, worst_at);

    // fake_quantize rounds, so its almost-everywhere derivative is zero; the
    // shipped straight-through gradient must instead equal the clamp
    // surrogate's derivative away from the clamp boundary.
    Tensor<D> fq = rnd({2, 3}, 0.3);
    fq.data()[4] = 20.0;   // clamped high
    fq.data()[5] = -20.0;  // clamped low
    fq.set_requires_grad(true);
    fq.zero_grad();
    Tape<D> tape;
    Tensor<D> loss = sum_all(&tape, fake_quantize(&tape, fq, 8, 0.05));
    tape.backward(loss);
    const double qmax = 127.0 * 0.05;
    for (std::int64_t i = 0; i < fq.numel(); ++i) {
        const double expect = std::abs(fq.data()[i]) < qmax ? 1.0 : 0.0;
        const double rel = std::abs(fq.grad()[i] - expect);
        if (rel > worst) {
            worst = rel;
            worst_at = "fake_quantize[" + std::to_string(i) + "]";
        }
    }
    return worst;
}

double chain_grad_err(std::string& worst_at) {
    DenoiserConfig bc;
    bc.image_size = 8;
    bc.patch_size = 4;
    bc.d = 8;
    bc.num_layers = 1;
    bc.num_heads = 2;
    bc.num_classes = 4;
    bc.num_timesteps = 10;
    ComposerConfig cc;
    cc.r = 2;
    cc.d_model = 8;
    cc.L = 1;
    cc.heads = 2;
    cc.m = 1;
    SeededRng brng(404);
    Denoiser<D> model = Denoiser<D>::init(bc, brng);
    SeededRng grng(405);
    MetaGenerator<D> gen = MetaGenerator<D>::init(cc, model, {Target::Q, Target::V}, grng);
    for (auto& [name, p] : gen.named_params()) {
        SeededRng prng(SeededRng::fnv1a64(name) ^ 0x5eed);
        for (std::int64_t i = 0; i < p.numel(); ++i) p.data()[i] += static_cast<D>(0.05 * prng.normal());
    }
    gen.set_trainable(true);

    SeededRng drng(406);
    Tensor<D> images = Tensor<D>::randn({2, bc.pixels()}, drng);
    Tensor<D> eps = Tensor<D>::randn({2, bc.pixels()}, drng);
    const std::vector<std::int64_t> classes = {0, 1};
    const std::vector<std::int64_t> ts = {3, 7};
    auto loss_fn = [&](Tape<D>* tape) {
        std::vector<UpdateSet<D>> sets = gen.generate_batch(tape, classes);
        std::vector<const UpdateSet<D>*> ups = {&sets[0], &sets[1]};
        return diffusion_loss<D>(tape, model, images, classes, ts, eps, &ups);
    };
    auto rep = check_gradients<D>(gen.named_params(), loss_fn);
    worst_at = "chain:" + rep.worst;
    return rep.max_rel_err;
}

Outcome crit_gradients(Lab&) {
    std::string at_a, at_b;
    const double ea = primitive_grad_err(at_a);
    const double eb = chain_grad_err(at_b);
    Outcome o;
    o.pass = ea <= 1e-5 && eb <= 1e-5;
    o.detail = "primitives max rel " + fnum(ea) + " (worst " + at_a + "), generate-to-loss chain max rel " +
               fnum(eb) + " (tol 1e-5)";
    return o;
}

// ---------------------------------------------------------------------------
// 5. generated updates are numerically rank-r

Outcome crit_rank(Lab&) {
    RunConfig cfg;
    SeededRng brng = SeededRng(500).split("backbone-init");
    Denoiser<F> model = Denoiser<F>::init(make_backbone_config(cfg), brng);
    SeededRng grng = SeededRng(500).split("composer-init");
    MetaGenerator<F> gen =
        MetaGenerator<F>::init(make_composer_config(cfg), model, parse_targets(cfg.composer_targets), grng);

    double worst = 0.0;
    int sets = 0;
    for (int g = 0; g < 10; ++g) {
        for (auto& [name, p] : gen.named_params()) {
            // reshaping the heavy frozen-weight projections once is enough;
            // re-randomize the rest so every round emits different factors
            if (g > 0 && name.find(".proj") != std::string::npos) continue;
            SeededRng prng(SeededRng::fnv1a64(name) + static_cast<std::uint64_t>(g));
            for (std::int64_t i = 0; i < p.numel(); ++i) p.data()[i] = static_cast<F>(0.05 * prng.normal());
        }
        for (std::int64_t c = 0; c < cfg.dataset_c; ++c) {
            UpdateSet<F> set = gen.generate(nullptr, c);
            ++sets;
            for (const LowRankUpdate<F>& u : set.updates) {
                Tensor<F> ab = matmul<F>(nullptr, u.A, u.B);
                const std::vector<double> sv = singular_values(ab);
                const double ratio = sv[static_cast<std::size_t>(cfg.composer_r)] / std::max(sv[0], 1e-300);
                worst = std::max(worst, ratio);
            }
        }
    }
    Outcome o;
    o.pass = worst <= 1e-5;
    o.detail = std::to_string(sets) + " update sets, max sigma_{r+1}/sigma_1 = " + fnum(worst) + " (tol 1e-5)";
    return o;
}

// ---------------------------------------------------------------------------
// 6. adapted generation beats the static backbone; context batches help

Outcome crit_quality(Lab& lab) {
    RunConfig cfg;
    std::vector<double> v_static, v_comp, f_static, f_comp, v_ctx, v_van;
    for (std::uint64_t s : cfg.bench_seeds) {
        SeedRun& fx = lab.seed_run(s);
        RunConfig scfg = cfg;
        scfg.seed = s;
        const std::vector<TargetKey> keys =
            collect_adaptation_targets(fx.model.cfg, parse_targets(scfg.composer_targets));

        SeededRng g1 = SeededRng(s).split("composer-init");
        MetaGenerator<F> gen_ctx =
            MetaGenerator<F>::init(make_composer_config(scfg), fx.model, parse_targets(scfg.composer_targets), g1);
        TrainSettings st = make_train_settings(scfg);
        TrainCurve ctx_curve = train_composer(gen_ctx, fx.model, fx.ds, fx.index, st);

        SeededRng g2 = SeededRng(s).split("composer-init");
        MetaGenerator<F> gen_van =
            MetaGenerator<F>::init(make_composer_config(scfg), fx.model, parse_targets(scfg.composer_targets), g2);
        TrainSettings stv = st;
        stv.pipeline = BatchMode::vanilla;
        TrainCurve van_curve = train_composer(gen_van, fx.model, fx.ds, fx.index, stv);

        StrategyReport rs = run_strategy(Strategy::static_backbone, fx.model, &gen_ctx, fx.ds, fx.index, keys,
                                         scfg.composer_r, scfg.bench_steps, scfg.bench_samples_per_class, s);
        StrategyReport rc = run_strategy(Strategy::composer, fx.model, &gen_ctx, fx.ds, fx.index, keys,
                                         scfg.composer_r, scfg.bench_steps, scfg.bench_samples_per_class, s);
        if (rs.failed || rc.failed) return {false, "strategy run failed: " + rs.error + rc.error};
        v_static.push_back(rs.val_loss);
        v_comp.push_back(rc.val_loss);
        f_static.push_back(rs.frechet);
        f_comp.push_back(rc.frechet);
        v_ctx.push_back(ctx_curve.val_loss.back());
        v_van.push_back(van_curve.val_loss.back());
    }
    const double mvs = median(v_static), mvc = median(v_comp);
    const double mfs = median(f_static), mfc = median(f_comp);
    const double mctx = median(v_ctx), mvan = median(v_van);
    Outcome o;
    o.pass = mvc < mvs && mfc < mfs && mctx <= mvan;
    o.detail = "median val " + fnum(mvc) + (mvc < mvs ? " < " : " !< ") + fnum(mvs) + " static, frechet " +
               fnum(mfc) + (mfc < mfs ? " < " : " !< ") + fnum(mfs) + " static, context " + fnum(mctx) +
               (mctx <= mvan ? " <= " : " !<= ") + fnum(mvan) + " vanilla";
    return o;
}

// ---------------------------------------------------------------------------
// 7. adaptation overhead ordering at 50 sampler steps

Outcome crit_overhead(Lab& lab) {
    SeedRun& fx = lab.seed_run(0);
    RunConfig cfg;
    SeededRng grng = SeededRng(0).split("composer-init");
    MetaGenerator<F> gen =
        MetaGenerator<F>::init(make_composer_config(cfg), fx.model, parse_targets(cfg.composer_targets), grng);
    std::vector<StrategyReport> reps =
        run_comparison(fx.model, gen, fx.ds, fx.index, 50, cfg.bench_samples_per_class, 0, TTTSettings{});
    for (const StrategyReport& r : reps) {
        if (r.failed) return {false, r.strategy + " failed: " + r.error};
    }
    const StrategyReport &st = reps[0], &tt = reps[1], &co = reps[2];
    const double time_ratio = co.total_seconds / st.total_seconds;
    const double ttt_ratio = tt.total_seconds / st.total_seconds;
    const double peak_ratio = static_cast<double>(co.peak_bytes) / static_cast<double>(st.peak_bytes);
    Outcome o;
    o.pass = time_ratio <= 1.10 && ttt_ratio >= 2.0 && peak_ratio <= 1.25 && co.peak_bytes < tt.peak_bytes;
    o.detail = "composer/static time " + fnum(time_ratio) + " (<=1.10), ttt/static time " + fnum(ttt_ratio) +
               " (>=2), composer/static peak " + fnum(peak_ratio) + " (<=1.25), composer peak " +
               fnum(static_cast<double>(co.peak_bytes) / 1048576.0) + " MiB < ttt " +
               fnum(static_cast<double>(tt.peak_bytes) / 1048576.0) + " MiB";
    return o;
}

// ---------------------------------------------------------------------------
// 8. one merge, S merged applications per adapted generation

Outcome crit_one_merge(Lab&) {
    RunConfig cfg;
    SeededRng brng = SeededRng(800).split("backbone-init");
    Denoiser<F> model = Denoiser<F>::init(make_backbone_config(cfg), brng);
    SeededRng grng = SeededRng(800).split("composer-init");
    MetaGenerator<F> gen =
        MetaGenerator<F>::init(make_composer_config(cfg), model, parse_targets(cfg.composer_targets), grng);
    std::string log;
    bool ok = true;
    for (std::int64_t steps : {1, 10, 50}) {
        Counters::reset();
        UpdateSet<F> set = gen.generate(nullptr, 2);
        SeededRng srng(300 + static_cast<std::uint64_t>(steps));
        model.sample_loop(2, steps, &set, srng);
        const bool good = Counters::merges == 1 && Counters::inference_applications == static_cast<std::uint64_t>(steps) &&
                          Counters::denoiser_calls == static_cast<std::uint64_t>(steps);
        ok = ok && good;
        log += "S=" + std::to_string(steps) + ": " + std::to_string(Counters::merges) + " merge, " +
               std::to_string(Counters::inference_applications) + " applications; ";
    }
    return {ok, log + "expected 1 merge and S applications each"};
}

// ---------------------------------------------------------------------------
// 9. quantization-aware updates recover distillation loss and sample quality

Tensor<F> quant_sample_set(Denoiser<F>& model, const QuantizedBackbone<F>& qb, const std::vector<F>& scales,
                           MetaGenerator<F>* gen, std::int64_t steps, std::int64_t spc, SeededRng& rng) {
    const std::int64_t c_num = model.cfg.num_classes, pix = model.cfg.pixels();
    Tensor<F> out({c_num * spc, pix});
    MergedWeights<F> base;
    std::vector<ActQuantSite<F>> base_sites;
    if (!gen) {
        base = quantized_baseline_weights(qb);
        base_sites = make_act_sites(qb, scales, 8, static_cast<const UpdateSet<F>*>(nullptr));
    }
    for (std::int64_t c = 0; c < c_num; ++c) {
        UpdateSet<F> set;
        MergedWeights<F> merged;
        std::vector<ActQuantSite<F>> sites;
        if (gen) {
            set = gen->generate(nullptr, c);
            merged = merge_quantized(qb, set);
            sites = make_act_sites(qb, scales, 8, &set);
        }
        for (std::int64_t i = 0; i < spc; ++i) {
            Tensor<F> img = model.sample_loop(c, steps, nullptr, rng, gen ? &sites : &base_sites,
                                              gen ? &merged : &base);
            F* dst = out.data() + (c * spc + i) * pix;
            std::memcpy(dst, img.data(), sizeof(F) * static_cast<std::size_t>(pix));
        }
    }
    return out;
}

Outcome crit_quant(Lab& lab) {
    RunConfig cfg;
    std::map<int, std::vector<double>> kd_base, kd_comp, fre_base, fre_comp;
    for (std::uint64_t s : cfg.bench_seeds) {
        SeedRun& fx = lab.seed_run(s);
        const std::vector<TargetKey> keys =
            collect_adaptation_targets(fx.model.cfg, parse_targets(cfg.composer_targets));
        Tensor<F> real = gather_batch(fx.ds, fx.ds.val_indices()).images;
        for (int bits : {4, 2}) {
            RunConfig qcfg = cfg;
            qcfg.seed = s;
            qcfg.quant_enabled = true;
            qcfg.quant_w_bits = bits;
            QuantizedBackbone<F> qb = quantize_backbone(fx.model, keys, bits);
            SeededRng grng = SeededRng(s).split("composer-init");
            MetaGenerator<F> gen = MetaGenerator<F>::init(make_composer_config(qcfg), fx.model,
                                                          parse_targets(qcfg.composer_targets), grng);
            TrainSettings st = make_train_settings(qcfg);
            st.epochs = 3;  // distillation settles well before the full schedule
            QuantTrainResult<F> res = train_quant_composer(gen, fx.model, qb, 8, fx.ds, fx.index, st);
            kd_base[bits].push_back(res.baseline_kd);
            kd_comp[bits].push_back(res.curve.val_loss.back());

            SeededRng rb = SeededRng(s).split("quant-sample");
            SeededRng rc = SeededRng(s).split("quant-sample");
            Tensor<F> samp_base = quant_sample_set(fx.model, qb, res.act_scales, nullptr, cfg.bench_steps,
                                                   cfg.bench_samples_per_class, rb);
            Tensor<F> samp_comp = quant_sample_set(fx.model, qb, res.act_scales, &gen, cfg.bench_steps,
                                                   cfg.bench_samples_per_class, rc);
            fre_base[bits].push_back(toy_frechet(samp_base, real));
            fre_comp[bits].push_back(toy_frechet(samp_comp, real));
        }
    }
    auto gain = [&](int bits) {
        return (median(kd_base[bits]) - median(kd_comp[bits])) / median(kd_base[bits]);
    };
    bool pass = true;
    std::string log;
    for (int bits : {4, 2}) {
        const double kb = median(kd_base[bits]), kc = median(kd_comp[bits]);
        const double fb = median(fre_base[bits]), fc = median(fre_comp[bits]);
        pass = pass && kc < kb && fc < fb;
        log += "W" + std::to_string(bits) + "A8 kd " + fnum(kc) + (kc < kb ? " < " : " !< ") + fnum(kb) +
               ", frechet " + fnum(fc) + (fc < fb ? " < " : " !< ") + fnum(fb) + "; ";
    }
    const double g2 = gain(2), g4 = gain(4);
    pass = pass && g2 >= g4;
    log += "relative kd gain W2 " + fnum(g2) + (g2 >= g4 ? " >= " : " !>= ") + fnum(g4) + " W4";
    return {pass, log};
}

// ---------------------------------------------------------------------------
// 10. context batches are exact; similarity mode equals brute-force k-NN

Outcome crit_sampler(Lab& lab) {
    auto [dsp, idxp] = lab.data0();
    SyntheticDataset<F>& ds = *dsp;
    SimilarityIndex<F>& index = *idxp;
    std::vector<std::int64_t> pool = ds.train_indices();
    if (pool.size() > 1024) pool.resize(1024);

    SeededRng rng(1000);
    int batches = 0;
    for (double alpha : {0.0, 0.25, 0.5, 0.75, 1.0}) {
        for (std::int64_t b : {8, 16}) {
            BatchSpec spec{alpha, b, BatchMode::context_class};
            const std::int64_t ks = spec.similar_count();
            for (std::int64_t anchor : {5, 77, 400}) {
                const std::vector<std::int64_t> idx = sample_batch(ds, &index, spec, anchor, rng);
                const std::int64_t cls = ds.labels[static_cast<std::size_t>(anchor)];
                std::int64_t same = 0;
                for (std::int64_t i : idx) same += ds.labels[static_cast<std::size_t>(i)] == cls ? 1 : 0;
                if (static_cast<std::int64_t>(idx.size()) != b || same != ks) {
                    return {false, "context_class alpha=" + fnum(alpha) + " b=" + std::to_string(b) + " drew " +
                                       std::to_string(same) + " similar, wanted " + std::to_string(ks)};
                }
                ++batches;
            }

            BatchSpec sspec{alpha, b, BatchMode::context_similarity};
            for (std::int64_t anchor : {pool[1], pool[99], pool[500]}) {
                const std::vector<std::int64_t> idx = sample_batch(ds, &index, sspec, anchor, rng, &pool);
                // brute-force nearest neighbors over the pool, ties by index
                std::vector<std::pair<double, std::int64_t>> scored;
                for (std::int64_t i : pool) {
                    const double* fa = index.features(anchor);
                    const double* fi = index.features(i);
                    double num = 0, na = 0, nb = 0;
                    for (std::int64_t f = 0; f < SimilarityIndex<F>::kFeatureDim; ++f) {
                        num += fa[f] * fi[f];
                        na += fa[f] * fa[f];
                        nb += fi[f] * fi[f];
                    }
                    scored.emplace_back(-num / std::sqrt(std::max(na * nb, 1e-300)), i);
                }
                std::stable_sort(scored.begin(), scored.end());
                for (std::int64_t p = 0; p < ks; ++p) {
                    if (idx[static_cast<std::size_t>(p)] != scored[static_cast<std::size_t>(p)].second) {
                        return {false, "similarity prefix diverged from brute-force k-NN at alpha=" + fnum(alpha) +
                                           " b=" + std::to_string(b) + " pos=" + std::to_string(p)};
                    }
                }
                ++batches;
            }
        }
    }
    return {true, std::to_string(batches) + " batches exact over alpha x b grid, pool " +
                      std::to_string(pool.size()) + " for brute-force k-NN"};
}

// ---------------------------------------------------------------------------
// 11. checkpoints round-trip bit-exactly; reruns reproduce every metric

std::vector<double> deterministic_run() {
    RunConfig cfg;
    cfg.seed = 7;
    cfg.dataset_n = 256;
    cfg.dataset_c = 4;
    cfg.backbone_d = 32;
    cfg.backbone_layers = 2;
    cfg.backbone_heads = 2;
    cfg.backbone_t = 50;
    cfg.composer_r = 4;
    cfg.composer_d_model = 32;
    cfg.composer_l = 1;
    cfg.composer_heads = 2;
    cfg.train_epochs = 1;
    cfg.bench_steps = 10;
    cfg.bench_samples_per_class = 2;
    validate_config(cfg);

    SyntheticDataset<F> ds = gen_synthetic_dataset<F>(cfg.seed, cfg.dataset_n, cfg.dataset_c, cfg.backbone_image_size);
    SimilarityIndex<F> index = SimilarityIndex<F>::build(ds);
    SeededRng brng = SeededRng(cfg.seed).split("backbone-init");
    Denoiser<F> model = Denoiser<F>::init(make_backbone_config(cfg), brng);
    TrainSettings pst = make_train_settings(cfg);
    pst.lr = 1e-3;
    pst.pipeline = BatchMode::vanilla;
    TrainCurve pre = pretrain_backbone(model, ds, pst);

    SeededRng grng = SeededRng(cfg.seed).split("composer-init");
    MetaGenerator<F> gen =
        MetaGenerator<F>::init(make_composer_config(cfg), model, parse_targets(cfg.composer_targets), grng);
    TrainCurve fit = train_composer(gen, model, ds, index, make_train_settings(cfg));
    const std::vector<TargetKey> keys = collect_adaptation_targets(model.cfg, parse_targets(cfg.composer_targets));
    StrategyReport rep = run_strategy(Strategy::composer, model, &gen, ds, index, keys, cfg.composer_r,
                                      cfg.bench_steps, cfg.bench_samples_per_class, cfg.seed);
    if (rep.failed) throw std::runtime_error("determinism probe failed: " + rep.error);
    return {pre.val_loss.back(), fit.train_loss.back(), fit.val_loss.back(), rep.val_loss, rep.frechet};
}

Outcome crit_serialization(Lab&) {
    // byte-exact round trip through the container
    RunConfig cfg;
    SeededRng brng = SeededRng(1100).split("backbone-init");
    Denoiser<F> model = Denoiser<F>::init(make_backbone_config(cfg), brng);
    SeededRng grng = SeededRng(1100).split("composer-init");
    MetaGenerator<F> gen =
        MetaGenerator<F>::init(make_composer_config(cfg), model, parse_targets(cfg.composer_targets), grng);
    const std::string path =
        (std::filesystem::temp_directory_path() / "composer_acceptance_roundtrip.cmpz").string();
    bool bytes_ok = true;
    {
        const std::vector<std::uint8_t> before = encode_checkpoint(model.named_params());
        save_checkpoint(path, model.named_params());
        bytes_ok = bytes_ok && encode_checkpoint(load_checkpoint<F>(path)) == before;
    }
    {
        const std::vector<std::uint8_t> before = encode_checkpoint(gen.named_params());
        save_checkpoint(path, gen.named_params());
        bytes_ok = bytes_ok && encode_checkpoint(load_checkpoint<F>(path)) == before;
    }
    std::filesystem::remove(path);

    const std::vector<double> a = deterministic_run();
    const std::vector<double> b = deterministic_run();
    double rel = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        rel = std::max(rel, std::abs(a[i] - b[i]) / std::max({1e-12, std::abs(a[i]), std::abs(b[i])}));
    }
    Outcome o;
    o.pass = bytes_ok && rel <= 1e-5;
    o.detail = std::string("checkpoint bytes ") + (bytes_ok ? "identical" : "DIFFER") + ", rerun metric rel diff " +
               fnum(rel) + " (tol 1e-5) over " + std::to_string(a.size()) + " metrics";
    return o;
}

// ---------------------------------------------------------------------------

struct Entry {
    int id;
    const char* name;
    double budget_s;
    std::function<Outcome(Lab&)> fn;
};

}  // namespace

int main(int argc, char** argv) {
    const std::vector<Entry> entries = {
        {1, "path equivalence", 10, crit_paths},
        {2, "zero-update identity", 30, crit_zero_init},
        {3, "mask rules and reachability", 5, crit_mask},
        {4, "gradient correctness", 120, crit_gradients},
        {5, "update rank bound", 30, crit_rank},
        {6, "directional quality", 2700, crit_quality},
        {7, "overhead ordering", 600, crit_overhead},
        {8, "one-merge contract", 60, crit_one_merge},
        {9, "quantization compensation", 2700, crit_quant},
        {10, "context sampler exactness", 60, crit_sampler},
        {11, "serialization and determinism", 120, crit_serialization},
    };

    std::vector<int> wanted;
    for (int i = 1; i < argc; ++i) {
        const std::string arg = argv[i];
        if (arg == "--criterion" && i + 1 < argc) {
            wanted.push_back(std::atoi(argv[++i]));
        } else {
            std::fprintf(stderr, "usage: %s [--criterion N]...\n", argv[0]);
            return 2;
        }
    }

    Lab lab;
    int failures = 0, ran = 0;
    for (const Entry& e : entries) {
        if (!wanted.empty() && std::find(wanted.begin(), wanted.end(), e.id) == wanted.end()) continue;
        ++ran;
        const double t0 = now_seconds();
        Outcome o;
        try {
            o = e.fn(lab);
        } catch (const std::exception& ex) {
            o.pass = false;
            o.detail = std::string("exception: ") + ex.what();
        }
        const double dt = now_seconds() - t0;
        const bool in_budget = dt <= e.budget_s;
        const bool pass = o.pass && in_budget;
        if (!pass) ++failures;
        std::printf("[%2d] %s  %-30s %s%s  [%.1fs of %.0fs]\n", e.id, pass ? "PASS" : "FAIL", e.name,
                    o.detail.c_str(), in_budget ? "" : " (OVER TIME BUDGET)", dt, e.budget_s);
        std::fflush(stdout);
    }
    std::printf("%d/%d criteria passed\n", ran - failures, ran);
    return failures;
}
