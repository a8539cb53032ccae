#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include "composer/composition.hpp"
#include "composer/denoiser.hpp"
#include "composer/generator.hpp"
#include "composer/layout.hpp"
#include "composer/linalg.hpp"
#include "composer/quant.hpp"
#include "composer/schedule.hpp"

using namespace composer;
using F = float;

// ---------------------------------------------------------------------------
// layout and mask

TEST_CASE("layout orders prompt tokens then per-target component blocks") {
    std::vector<TargetKey> keys = {{0, Target::Q}, {0, Target::V}};
    SequenceLayout lay = SequenceLayout::build(2, 3, keys, false);
    REQUIRE(lay.length() == 2 + 2 * (2 * 3));
    REQUIRE(lay.tokens[0].role == Role::prompt);
    REQUIRE(lay.tokens[1].role == Role::prompt);
    REQUIRE(lay.tokens[2].role == Role::A);
    REQUIRE(lay.tokens[2].block == 1);
    REQUIRE(lay.tokens[2].offset == 0);
    REQUIRE(lay.tokens[5].role == Role::B);
    REQUIRE(lay.block_start(2) == 2 + 6);
    SequenceLayout lq = SequenceLayout::build(1, 2, keys, true);
    REQUIRE(lq.block_len() == 5);
    REQUIRE(lq.tokens.back().role == Role::gamma);
    REQUIRE_THROWS(SequenceLayout::build(0, 3, keys, false));
    REQUIRE_THROWS(SequenceLayout::build(1, 3, {}, false));
}

namespace {

// Independent rule-by-rule oracle over token descriptions.
std::vector<std::uint8_t> mask_oracle(const SequenceLayout& lay, FirstTokenRule rule) {
    const int n = lay.length();
    std::vector<std::uint8_t> m(static_cast<std::size_t>(n) * n, 0);
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
            if (allow) m[static_cast<std::size_t>(q) * n + k] = 1;
        }
    }
    return m;
}

}  // namespace

TEST_CASE("mask matches the rule oracle over small layouts") {
    std::vector<TargetKey> pool = {{0, Target::Q}, {0, Target::K}, {0, Target::V},
                                   {0, Target::O}, {1, Target::Q}, {1, Target::V}};
    for (int m = 1; m <= 3; ++m) {
        for (int r = 1; r <= 3; ++r) {
            for (std::size_t nt = 1; nt <= pool.size(); ++nt) {
                for (bool quant : {false, true}) {
                    std::vector<TargetKey> keys(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(nt));
                    SequenceLayout lay = SequenceLayout::build(m, r, keys, quant);
                    for (FirstTokenRule rule : {FirstTokenRule::first_to_first, FirstTokenRule::first_to_all}) {
                        REQUIRE(build_mask(lay, rule) == mask_oracle(lay, rule));
                    }
                }
            }
        }
    }
}

TEST_CASE("mask gives prompt rows exactly the prompt columns") {
    SequenceLayout lay = SequenceLayout::build(3, 2, {{0, Target::Q}, {1, Target::V}}, true);
    std::vector<std::uint8_t> mask = build_mask(lay);
    const int n = lay.length();
    for (int q = 0; q < n; ++q) {
        if (lay.tokens[static_cast<std::size_t>(q)].role != Role::prompt) continue;
        for (int k = 0; k < n; ++k) {
            const bool k_prompt = lay.tokens[static_cast<std::size_t>(k)].role == Role::prompt;
            REQUIRE(mask[static_cast<std::size_t>(q) * n + k] == (k_prompt ? 1 : 0));
        }
    }
}

TEST_CASE("mask connectivity: prompts in one hop, inter-block hub delivery within two hops") {
    SequenceLayout lay = SequenceLayout::build(2, 3, {{0, Target::Q}, {0, Target::V}, {1, Target::Q}}, false);
    std::vector<std::uint8_t> mask = build_mask(lay);
    const int n = lay.length();
    auto reach1 = [&](int q, int k) { return mask[static_cast<std::size_t>(q) * n + k] != 0; };
    auto reach2 = [&](int q, int k) {
        if (reach1(q, k)) return true;
        for (int mid = 0; mid < n; ++mid) {
            if (reach1(q, mid) && reach1(mid, k)) return true;
        }
        return false;
    };
    // every component token sees every prompt token directly
    for (int q = 0; q < n; ++q) {
        if (lay.tokens[static_cast<std::size_t>(q)].role == Role::prompt) continue;
        for (int k = 0; k < n; ++k) {
            if (lay.tokens[static_cast<std::size_t>(k)].role == Role::prompt) REQUIRE(reach1(q, k));
        }
    }
    // a block's first-token hub collects any token of any other block within
    // two attention layers (own hub -> other hub -> token)
    for (int bi = 1; bi < lay.num_blocks(); ++bi) {
        for (int k = 0; k < n; ++k) {
            if (lay.tokens[static_cast<std::size_t>(k)].role == Role::prompt) continue;
            REQUIRE(reach2(lay.block_start(bi), k));
        }
    }
    // under first_to_all, every component token reaches every component token
    // within two hops through its own block hub
    std::vector<std::uint8_t> wide = build_mask(lay, FirstTokenRule::first_to_all);
    auto wide1 = [&](int q, int k) { return wide[static_cast<std::size_t>(q) * n + k] != 0; };
    for (int q = 0; q < n; ++q) {
        if (lay.tokens[static_cast<std::size_t>(q)].role == Role::prompt) continue;
        for (int k = 0; k < n; ++k) {
            if (lay.tokens[static_cast<std::size_t>(k)].role == Role::prompt) continue;
            bool two = wide1(q, k);
            for (int mid = 0; mid < n && !two; ++mid) two = wide1(q, mid) && wide1(mid, k);
            REQUIRE(two);
        }
    }
}

// ---------------------------------------------------------------------------
// composition

TEST_CASE("training and inference paths agree and counters record the contract") {
    SeededRng rng(21);
    const std::int64_t d = 16, r = 4;
    Tensor<F> w = Tensor<F>::randn({d, d}, rng);
    LowRankUpdate<F> u;
    u.A = Tensor<F>::randn({d, r}, rng, 0.1f);
    u.B = Tensor<F>::randn({r, d}, rng, 0.1f);
    Counters::reset();
    REQUIRE(path_equivalence_check(w, u, 8, rng) <= 1e-4f);
    // merge_one materializes locally without touching the whole-set merge counter
    REQUIRE(Counters::merges == 0);
    REQUIRE(Counters::training_path_calls == 8);
}

TEST_CASE("merge_one leaves the frozen weight untouched and adds the exact product") {
    SeededRng rng(22);
    const std::int64_t d = 6, r = 2;
    Tensor<F> w = Tensor<F>::randn({d, d}, rng);
    Tensor<F> w_copy = w.clone();
    LowRankUpdate<F> u;
    u.A = Tensor<F>::randn({d, r}, rng);
    u.B = Tensor<F>::randn({r, d}, rng);
    Tensor<F> wp = merge_one(w, u);
    REQUIRE(std::memcmp(w.data(), w_copy.data(), sizeof(F) * static_cast<std::size_t>(d * d)) == 0);
    for (std::int64_t i = 0; i < d; ++i) {
        for (std::int64_t j = 0; j < d; ++j) {
            double ab = 0.0;
            for (std::int64_t k = 0; k < r; ++k) ab += double(u.A.at(i, k)) * double(u.B.at(k, j));
            REQUIRE(wp.at(i, j) == Catch::Approx(double(w.at(i, j)) + ab).margin(1e-5));
        }
    }
}

TEST_CASE("update shape mismatches are rejected with shapes in the message") {
    Tensor<F> w = Tensor<F>::zeros({6, 6});
    LowRankUpdate<F> u;
    u.A = Tensor<F>::zeros({6, 2});
    u.B = Tensor<F>::zeros({3, 6});  // inner mismatch
    REQUIRE_THROWS_WITH(merge_one(w, u), Catch::Matchers::ContainsSubstring("[6x2]"));
}

TEST_CASE("training path never materializes the dense update") {
    // cost model: the training path pays 2dr extra multiplies, not d^2
    REQUIRE(training_path_macs_per_token(64, 8) == 64 * 64 + 2 * 64 * 8);
    REQUIRE(inference_path_macs_per_token(64) == 64 * 64);
}

// ---------------------------------------------------------------------------
// schedule

TEST_CASE("cosine schedule is strictly decreasing inside (0,1) with a floored tail") {
    NoiseSchedule<F> sch = NoiseSchedule<F>::cosine(100);
    double prev = 1.0;
    for (std::int64_t t = 1; t <= 100; ++t) {
        const double g = sch.gamma_t(t);
        REQUIRE(g > 0.0);
        REQUIRE(g < 1.0);
        REQUIRE(g < prev);
        prev = g;
    }
    REQUIRE(sch.gamma_t(100) >= 1e-5f);
    REQUIRE(sch.gamma_t(1) > 0.9);
    REQUIRE_THROWS(sch.gamma_t(0));
    REQUIRE_THROWS(sch.gamma_t(101));
}

// ---------------------------------------------------------------------------
// denoiser

namespace {

DenoiserConfig tiny_backbone_cfg() {
    DenoiserConfig c;
    c.image_size = 8;
    c.patch_size = 4;
    c.d = 16;
    c.num_layers = 2;
    c.num_heads = 2;
    c.num_classes = 4;
    c.num_timesteps = 20;
    return c;
}

ComposerConfig tiny_composer_cfg() {
    ComposerConfig c;
    c.r = 2;
    c.d_model = 16;
    c.L = 1;
    c.heads = 2;
    c.m = 1;
    return c;
}

}  // namespace

TEST_CASE("denoiser forward returns per-pixel noise predictions deterministically") {
    SeededRng rng(31);
    Denoiser<F> model = Denoiser<F>::init(tiny_backbone_cfg(), rng);
    SeededRng data_rng(32);
    Tensor<F> x = Tensor<F>::randn({3, model.cfg.pixels()}, data_rng);
    Tensor<F> out1 = model.forward(nullptr, x, {1, 5, 20}, {0, 1, 3});
    Tensor<F> out2 = model.forward(nullptr, x, {1, 5, 20}, {0, 1, 3});
    REQUIRE(out1.rows() == 3);
    REQUIRE(out1.cols() == model.cfg.pixels());
    REQUIRE(std::memcmp(out1.data(), out2.data(), sizeof(F) * static_cast<std::size_t>(out1.numel())) == 0);
    // class conditioning changes the output
    Tensor<F> out3 = model.forward(nullptr, x, {1, 5, 20}, {1, 1, 3});
    REQUIRE(std::memcmp(out1.data(), out3.data(), sizeof(F) * static_cast<std::size_t>(out1.numel())) != 0);
    REQUIRE_THROWS(model.forward(nullptr, x, {1, 5}, {0, 1, 3}));
    REQUIRE_THROWS(model.forward(nullptr, x, {0, 5, 20}, {0, 1, 3}));
    REQUIRE_THROWS(model.forward(nullptr, x, {1, 5, 20}, {0, 1, 9}));
}

TEST_CASE("freezing and checksum detect any parameter change") {
    SeededRng rng(33);
    Denoiser<F> model = Denoiser<F>::init(tiny_backbone_cfg(), rng);
    model.set_trainable(false);
    REQUIRE(model.is_frozen());
    const std::uint32_t c0 = model.checksum();
    REQUIRE(c0 == model.checksum());
    model.layers[1].wv.data()[7] += 1e-3f;
    REQUIRE(model.checksum() != c0);
    model.set_trainable(true);
    REQUIRE(!model.is_frozen());
}

TEST_CASE("per-sample updates flow through the training path") {
    SeededRng rng(34);
    Denoiser<F> model = Denoiser<F>::init(tiny_backbone_cfg(), rng);
    std::vector<TargetKey> keys = collect_adaptation_targets(model.cfg, {Target::Q, Target::V});
    REQUIRE(keys.size() == 4);  // 2 layers x {Q, V}

    UpdateSet<F> zero;
    zero.keys = keys;
    for (const TargetKey& k : keys) {
        (void)k;
        LowRankUpdate<F> u;
        u.A = Tensor<F>::zeros({model.cfg.d, 2});
        u.B = Tensor<F>::zeros({2, model.cfg.d});
        zero.updates.push_back(u);
    }
    UpdateSet<F> live = zero;
    live.updates.clear();
    for (const TargetKey& k : keys) {
        (void)k;
        LowRankUpdate<F> u;
        u.A = Tensor<F>::randn({model.cfg.d, 2}, rng, 0.2f);
        u.B = Tensor<F>::randn({2, model.cfg.d}, rng, 0.2f);
        live.updates.push_back(u);
    }

    SeededRng data_rng(35);
    Tensor<F> x = Tensor<F>::randn({2, model.cfg.pixels()}, data_rng);
    Tensor<F> base = model.forward(nullptr, x, {3, 4}, {0, 1});
    std::vector<const UpdateSet<F>*> ups = {&zero, &live};
    Counters::reset();
    Tensor<F> mixed = model.forward(nullptr, x, {3, 4}, {0, 1}, &ups);
    REQUIRE(Counters::training_path_calls > 0);
    REQUIRE(Counters::merges == 0);
    // zero update leaves row 0 as the frozen output; the live row moves
    for (std::int64_t j = 0; j < model.cfg.pixels(); ++j) {
        REQUIRE(mixed.at(0, j) == base.at(0, j));
    }
    double diff = 0.0;
    for (std::int64_t j = 0; j < model.cfg.pixels(); ++j) {
        diff = std::max(diff, std::abs(double(mixed.at(1, j)) - double(base.at(1, j))));
    }
    REQUIRE(diff > 0.0);
}

TEST_CASE("merged forward equals the training path on the same update") {
    SeededRng rng(36);
    Denoiser<F> model = Denoiser<F>::init(tiny_backbone_cfg(), rng);
    std::vector<TargetKey> keys = collect_adaptation_targets(model.cfg, {Target::Q, Target::V});
    UpdateSet<F> set;
    set.keys = keys;
    for (const TargetKey& k : keys) {
        (void)k;
        LowRankUpdate<F> u;
        u.A = Tensor<F>::randn({model.cfg.d, 2}, rng, 0.1f);
        u.B = Tensor<F>::randn({2, model.cfg.d}, rng, 0.1f);
        set.updates.push_back(u);
    }
    SeededRng data_rng(37);
    Tensor<F> x = Tensor<F>::randn({2, model.cfg.pixels()}, data_rng);
    std::vector<const UpdateSet<F>*> ups = {&set, &set};
    Tensor<F> train_out = model.forward(nullptr, x, {2, 9}, {1, 2}, &ups);
    MergedWeights<F> merged = merge(model.frozen_targets(keys), set);
    Tensor<F> inf_out = model.forward(nullptr, x, {2, 9}, {1, 2}, nullptr, &merged);
    for (std::int64_t i = 0; i < train_out.numel(); ++i) {
        REQUIRE(std::abs(train_out.data()[i] - inf_out.data()[i]) <= 2e-4f);
    }
}

TEST_CASE("sample loop obeys step bounds, merges once, and lands in [-1,1]") {
    SeededRng rng(38);
    Denoiser<F> model = Denoiser<F>::init(tiny_backbone_cfg(), rng);
    std::vector<TargetKey> keys = collect_adaptation_targets(model.cfg, {Target::Q});
    UpdateSet<F> set;
    set.keys = keys;
    for (const TargetKey& k : keys) {
        (void)k;
        LowRankUpdate<F> u;
        u.A = Tensor<F>::randn({model.cfg.d, 2}, rng, 0.1f);
        u.B = Tensor<F>::randn({2, model.cfg.d}, rng, 0.1f);
        set.updates.push_back(u);
    }
    SeededRng srng(39);
    REQUIRE_THROWS(model.sample_loop(0, 0, nullptr, srng));
    REQUIRE_THROWS(model.sample_loop(0, 21, nullptr, srng));
    Counters::reset();
    Tensor<F> img = model.sample_loop(1, 10, &set, srng);
    REQUIRE(Counters::merges == 1);
    REQUIRE(Counters::inference_applications == 10);
    REQUIRE(Counters::denoiser_calls == 10);
    for (std::int64_t i = 0; i < img.numel(); ++i) {
        REQUIRE(img.data()[i] >= -1.0f);
        REQUIRE(img.data()[i] <= 1.0f);
    }
    // frozen sampling performs no merges and no merged-path applications
    Counters::reset();
    (void)model.sample_loop(1, 5, nullptr, srng);
    REQUIRE(Counters::merges == 0);
    REQUIRE(Counters::inference_applications == 0);
    REQUIRE(Counters::denoiser_calls == 5);
}

TEST_CASE("site capture records inputs and frozen outputs per adapted site") {
    SeededRng rng(40);
    Denoiser<F> model = Denoiser<F>::init(tiny_backbone_cfg(), rng);
    SiteCapture<F> cap;
    cap.keys = collect_adaptation_targets(model.cfg, {Target::Q, Target::V});
    SeededRng data_rng(41);
    Tensor<F> x = Tensor<F>::randn({2, model.cfg.pixels()}, data_rng);
    (void)model.forward(nullptr, x, {1, 2}, {0, 1}, nullptr, nullptr, nullptr, &cap);
    REQUIRE(cap.x.size() == cap.keys.size());
    const std::int64_t tokens = 2 * model.cfg.num_patches();
    for (std::size_t i = 0; i < cap.keys.size(); ++i) {
        REQUIRE(cap.x[i].defined());
        REQUIRE(cap.h[i].defined());
        REQUIRE(cap.x[i].rows() == tokens);
        REQUIRE(cap.x[i].cols() == model.cfg.d);
        // the frozen site output is input times the frozen weight
        const Tensor<F>& w = model.layers[static_cast<std::size_t>(cap.keys[i].layer)].wq;
        if (cap.keys[i].target == Target::Q) {
            Tensor<F> expect = linear<F>(nullptr, cap.x[i], w);
            for (std::int64_t j = 0; j < expect.numel(); ++j) {
                REQUIRE(cap.h[i].data()[j] == Catch::Approx(expect.data()[j]).margin(1e-6));
            }
        }
    }
}

// ---------------------------------------------------------------------------
// meta-generator

TEST_CASE("generator init produces exactly-zero updates via the zero B head") {
    SeededRng rng(50);
    Denoiser<F> backbone = Denoiser<F>::init(tiny_backbone_cfg(), rng);
    SeededRng grng(51);
    MetaGenerator<F> gen = MetaGenerator<F>::init(tiny_composer_cfg(), backbone, {Target::Q, Target::V}, grng);
    UpdateSet<F> set = gen.generate(nullptr, 0);
    REQUIRE(set.keys.size() == 4);
    bool a_nonzero = false;
    for (const LowRankUpdate<F>& u : set.updates) {
        for (std::int64_t i = 0; i < u.A.numel(); ++i) a_nonzero = a_nonzero || u.A.data()[i] != 0.0f;
        for (std::int64_t i = 0; i < u.B.numel(); ++i) REQUIRE(u.B.data()[i] == 0.0f);
    }
    REQUIRE(a_nonzero);  // the A head starts live so B receives gradient
}

TEST_CASE("zeroing both extraction heads forces A and B to exact zero") {
    SeededRng rng(52);
    Denoiser<F> backbone = Denoiser<F>::init(tiny_backbone_cfg(), rng);
    SeededRng grng(53);
    MetaGenerator<F> gen = MetaGenerator<F>::init(tiny_composer_cfg(), backbone, {Target::Q}, grng);
    for (auto& [name, p] : gen.named_params()) {
        if (name.find("head") != std::string::npos) {
            for (std::int64_t i = 0; i < p.numel(); ++i) p.data()[i] = 0.0f;
        }
    }
    UpdateSet<F> set = gen.generate(nullptr, 1);
    for (const LowRankUpdate<F>& u : set.updates) {
        for (std::int64_t i = 0; i < u.A.numel(); ++i) REQUIRE(u.A.data()[i] == 0.0f);
        for (std::int64_t i = 0; i < u.B.numel(); ++i) REQUIRE(u.B.data()[i] == 0.0f);
    }
}

TEST_CASE("generated updates have factor shapes d x r and r x d") {
    SeededRng rng(54);
    Denoiser<F> backbone = Denoiser<F>::init(tiny_backbone_cfg(), rng);
    SeededRng grng(55);
    ComposerConfig cc = tiny_composer_cfg();
    cc.r = 3;
    MetaGenerator<F> gen = MetaGenerator<F>::init(cc, backbone, {Target::Q, Target::K, Target::V, Target::O}, grng);
    std::vector<UpdateSet<F>> sets = gen.generate_batch(nullptr, {0, 2});
    REQUIRE(sets.size() == 2);
    for (const UpdateSet<F>& s : sets) {
        REQUIRE(s.keys.size() == 8);
        for (const LowRankUpdate<F>& u : s.updates) {
            REQUIRE(u.A.rows() == backbone.cfg.d);
            REQUIRE(u.A.cols() == 3);
            REQUIRE(u.B.rows() == 3);
            REQUIRE(u.B.cols() == backbone.cfg.d);
        }
    }
    REQUIRE_THROWS(gen.generate(nullptr, 99));
}

TEST_CASE("different prompts give different updates once the B head is live") {
    SeededRng rng(56);
    Denoiser<F> backbone = Denoiser<F>::init(tiny_backbone_cfg(), rng);
    SeededRng grng(57);
    MetaGenerator<F> gen = MetaGenerator<F>::init(tiny_composer_cfg(), backbone, {Target::Q}, grng);
    SeededRng prng(58);
    // named_params hands back shared handles; mutate in place
    for (auto& [name, p] : gen.named_params()) {
        if (name.find("headB") != std::string::npos) {
            Tensor<F> fresh = Tensor<F>::randn(p.shape(), prng, 0.05f);
            for (std::int64_t i = 0; i < p.numel(); ++i) p.data()[i] = fresh.data()[i];
        }
    }
    UpdateSet<F> s0 = gen.generate(nullptr, 0);
    UpdateSet<F> s1 = gen.generate(nullptr, 1);
    double diff = 0.0;
    for (std::size_t t = 0; t < s0.updates.size(); ++t) {
        diff = std::max(diff, double(max_abs_diff(s0.updates[t].B, s1.updates[t].B)));
    }
    REQUIRE(diff > 0.0);
    // and the same prompt reproduces bit-identically
    UpdateSet<F> s0b = gen.generate(nullptr, 0);
    for (std::size_t t = 0; t < s0.updates.size(); ++t) {
        REQUIRE(max_abs_diff(s0.updates[t].A, s0b.updates[t].A) == 0.0f);
        REQUIRE(max_abs_diff(s0.updates[t].B, s0b.updates[t].B) == 0.0f);
    }
}

TEST_CASE("generated update products never exceed rank r") {
    SeededRng rng(59);
    Denoiser<F> backbone = Denoiser<F>::init(tiny_backbone_cfg(), rng);
    SeededRng grng(60);
    ComposerConfig cc = tiny_composer_cfg();
    MetaGenerator<F> gen = MetaGenerator<F>::init(cc, backbone, {Target::Q, Target::V}, grng);
    SeededRng prng(61);
    for (auto& [name, p] : gen.named_params()) {
        Tensor<F> fresh = Tensor<F>::randn(p.shape(), prng, 0.05f);
        for (std::int64_t i = 0; i < p.numel(); ++i) p.data()[i] = fresh.data()[i];
    }
    UpdateSet<F> set = gen.generate(nullptr, 2);
    for (const LowRankUpdate<F>& u : set.updates) {
        Tensor<F> ab = Tensor<F>::zeros({u.A.rows(), u.B.cols()});
        mm_nn_acc(u.A.data(), u.B.data(), ab.data(), u.A.rows(), u.A.cols(), u.B.cols());
        std::vector<double> sv = singular_values(ab);
        REQUIRE(sv[0] > 0.0);
        REQUIRE(sv[static_cast<std::size_t>(cc.r)] / sv[0] <= 1e-5);
    }
}

TEST_CASE("freezing the token bank preserves generated updates in constant mode too") {
    SeededRng rng(62);
    Denoiser<F> backbone = Denoiser<F>::init(tiny_backbone_cfg(), rng);
    SeededRng grng(63);
    MetaGenerator<F> gen = MetaGenerator<F>::init(tiny_composer_cfg(), backbone, {Target::Q}, grng);
    UpdateSet<F> before = gen.generate(nullptr, 1);
    gen.freeze();
    REQUIRE(gen.frozen());
    UpdateSet<F> after = gen.generate(nullptr, 1);
    for (std::size_t t = 0; t < before.updates.size(); ++t) {
        REQUIRE(max_abs_diff(before.updates[t].A, after.updates[t].A) == 0.0f);
        REQUIRE(max_abs_diff(before.updates[t].B, after.updates[t].B) == 0.0f);
    }
    REQUIRE_THROWS(gen.freeze());  // double freeze

    ComposerConfig cc = tiny_composer_cfg();
    cc.token_init = TokenInit::constant;
    SeededRng grng2(64);
    MetaGenerator<F> gc = MetaGenerator<F>::init(cc, backbone, {Target::Q}, grng2);
    REQUIRE_THROWS(gc.freeze());  // nothing to project from
}

TEST_CASE("mlp and constant-token ablation variants generate valid updates") {
    SeededRng rng(65);
    Denoiser<F> backbone = Denoiser<F>::init(tiny_backbone_cfg(), rng);
    for (GeneratorArch arch : {GeneratorArch::transformer, GeneratorArch::mlp}) {
        for (TokenInit ti : {TokenInit::projected, TokenInit::constant}) {
            ComposerConfig cc = tiny_composer_cfg();
            cc.arch = arch;
            cc.token_init = ti;
            SeededRng grng(66);
            MetaGenerator<F> gen = MetaGenerator<F>::init(cc, backbone, {Target::Q, Target::V}, grng);
            UpdateSet<F> set = gen.generate(nullptr, 0);
            REQUIRE(set.keys.size() == 4);
            for (const LowRankUpdate<F>& u : set.updates) {
                REQUIRE(u.A.rows() == backbone.cfg.d);
                REQUIRE(u.B.cols() == backbone.cfg.d);
            }
        }
    }
}

TEST_CASE("quant mode decodes gamma through softplus, starting at exactly one") {
    SeededRng rng(67);
    Denoiser<F> backbone = Denoiser<F>::init(tiny_backbone_cfg(), rng);
    ComposerConfig cc = tiny_composer_cfg();
    cc.quant = true;
    SeededRng grng(68);
    MetaGenerator<F> gen = MetaGenerator<F>::init(cc, backbone, {Target::Q}, grng);
    UpdateSet<F> set = gen.generate(nullptr, 0);
    for (const TargetKey& k : set.keys) {
        const Tensor<F>* g = set.find_gamma(k);
        REQUIRE(g != nullptr);
        REQUIRE(g->value() == 1.0f);
    }
    // zeroing the gamma head gives softplus(0) = log 2
    for (auto& [name, p] : gen.named_params()) {
        if (name.find("headG") != std::string::npos) {
            for (std::int64_t i = 0; i < p.numel(); ++i) p.data()[i] = 0.0f;
        }
    }
    UpdateSet<F> zeroed = gen.generate(nullptr, 0);
    for (const TargetKey& k : zeroed.keys) {
        REQUIRE(zeroed.find_gamma(k)->value() == Catch::Approx(0.6931471805599453).epsilon(1e-6));
    }
    // non-quant sets carry no gamma
    SeededRng grng2(69);
    MetaGenerator<F> plain = MetaGenerator<F>::init(tiny_composer_cfg(), backbone, {Target::Q}, grng2);
    UpdateSet<F> pset = plain.generate(nullptr, 0);
    REQUIRE(pset.find_gamma(pset.keys[0]) == nullptr);
}

// ---------------------------------------------------------------------------
// quantization primitives

TEST_CASE("weight quantization snaps to a symmetric grid with max-abs scaling") {
    SeededRng rng(70);
    Denoiser<F> model = Denoiser<F>::init(tiny_backbone_cfg(), rng);
    std::vector<TargetKey> keys = collect_adaptation_targets(model.cfg, {Target::Q, Target::V});
    QuantizedBackbone<F> qb = quantize_backbone(model, keys, 4);
    REQUIRE(qb.w_bits == 4);
    REQUIRE(qb.w_q.size() == keys.size());
    const double qmax = 7.0;  // 2^(4-1) - 1
    const std::vector<Tensor<F>> frozen = model.frozen_targets(keys);
    for (std::size_t i = 0; i < keys.size(); ++i) {
        const Tensor<F>& w = frozen[i];
        float maxabs = 0.0f;
        for (std::int64_t j = 0; j < w.numel(); ++j) maxabs = std::max(maxabs, std::abs(w.data()[j]));
        REQUIRE(qb.w_scale[i] == Catch::Approx(maxabs / qmax).epsilon(1e-6));
        for (std::int64_t j = 0; j < qb.w_q[i].numel(); ++j) {
            const double code = double(qb.w_q[i].data()[j]) / double(qb.w_scale[i]);
            REQUIRE(std::abs(code - std::nearbyint(code)) < 1e-3);
            REQUIRE(std::abs(code) <= qmax + 1e-6);
        }
    }
    REQUIRE_THROWS(quantize_backbone(model, keys, 3));  // unsupported width
    QuantStaticConfig ok{2, 8};
    ok.validate();
    REQUIRE_THROWS(QuantStaticConfig{4, 4}.validate());
}

TEST_CASE("all-zero weights quantize with unit scale instead of dividing by zero") {
    SeededRng rng(71);
    Denoiser<F> model = Denoiser<F>::init(tiny_backbone_cfg(), rng);
    std::vector<TargetKey> keys = {{0, Target::Q}};
    Tensor<F>& w = model.layers[0].wq;
    for (std::int64_t i = 0; i < w.numel(); ++i) w.data()[i] = 0.0f;
    QuantizedBackbone<F> qb = quantize_backbone(model, keys, 8);
    REQUIRE(qb.w_scale[0] == 1.0f);
    for (std::int64_t i = 0; i < qb.w_q[0].numel(); ++i) REQUIRE(qb.w_q[0].data()[i] == 0.0f);
}

TEST_CASE("distillation loss sums site errors and averages over the batch") {
    // one site, h = [1, 0], h_q = [0, 0], batch of 1: loss = 1
    Tensor<F> h({1, 2});
    h.data()[0] = 1.0f;
    h.data()[1] = 0.0f;
    Tensor<F> hq = Tensor<F>::zeros({1, 2});
    Tensor<F> loss = kd_loss<F>(nullptr, {h}, {hq}, 1);
    REQUIRE(loss.value() == 1.0f);
    // averaging: same tensors declared as a batch of 2 halve the loss
    Tensor<F> loss2 = kd_loss<F>(nullptr, {h}, {hq}, 2);
    REQUIRE(loss2.value() == 0.5f);
}

TEST_CASE("quantized student with identity gamma and zero update reproduces the baseline sites") {
    SeededRng rng(72);
    Denoiser<F> model = Denoiser<F>::init(tiny_backbone_cfg(), rng);
    model.set_trainable(false);
    std::vector<TargetKey> keys = collect_adaptation_targets(model.cfg, {Target::Q, Target::V});
    QuantizedBackbone<F> qb = quantize_backbone(model, keys, 8);

    SeededRng drng(73);
    Tensor<F> x = Tensor<F>::randn({4, model.cfg.d}, drng);
    const std::size_t site = 1;
    Tensor<F> gamma = Tensor<F>::full({1}, 1.0f);
    LowRankUpdate<F> zero;
    zero.A = Tensor<F>::zeros({model.cfg.d, 2});
    zero.B = Tensor<F>::zeros({2, model.cfg.d});
    Tensor<F> with_zero = quant_forward<F>(nullptr, x, qb.w_q[site], &zero, &gamma, 8, 0.05f);
    Tensor<F> without = quant_forward<F>(nullptr, x, qb.w_q[site], nullptr, nullptr, 8, 0.05f);
    for (std::int64_t i = 0; i < with_zero.numel(); ++i) {
        REQUIRE(with_zero.data()[i] == without.data()[i]);
    }
}

TEST_CASE("activation calibration returns positive per-site scales from raw inputs") {
    SeededRng rng(74);
    Denoiser<F> model = Denoiser<F>::init(tiny_backbone_cfg(), rng);
    std::vector<TargetKey> keys = collect_adaptation_targets(model.cfg, {Target::Q, Target::V});
    SeededRng drng(75);
    Tensor<F> x_t = Tensor<F>::randn({4, model.cfg.pixels()}, drng);
    std::vector<F> scales = calibrate_act_scales(model, keys, x_t, {1, 2, 3, 4}, {0, 1, 2, 3}, 8);
    REQUIRE(scales.size() == keys.size());
    for (F s : scales) REQUIRE(s > 0.0f);
}

TEST_CASE("merging a quantized backbone counts as one merge and keeps the frozen grid intact") {
    SeededRng rng(76);
    Denoiser<F> model = Denoiser<F>::init(tiny_backbone_cfg(), rng);
    std::vector<TargetKey> keys = {{0, Target::Q}, {1, Target::V}};
    QuantizedBackbone<F> qb = quantize_backbone(model, keys, 4);
    Tensor<F> grid_copy = qb.w_q[0].clone();
    UpdateSet<F> set;
    set.keys = keys;
    for (const TargetKey& k : keys) {
        (void)k;
        LowRankUpdate<F> u;
        u.A = Tensor<F>::randn({model.cfg.d, 2}, rng, 0.1f);
        u.B = Tensor<F>::randn({2, model.cfg.d}, rng, 0.1f);
        set.updates.push_back(u);
    }
    Counters::reset();
    MergedWeights<F> m = merge_quantized(qb, set);
    REQUIRE(Counters::merges == 1);
    REQUIRE(m.keys == keys);
    REQUIRE(std::memcmp(grid_copy.data(), qb.w_q[0].data(),
                        sizeof(F) * static_cast<std::size_t>(grid_copy.numel())) == 0);
    Counters::reset();
    MergedWeights<F> base = quantized_baseline_weights(qb);
    REQUIRE(Counters::merges == 1);
    for (std::int64_t i = 0; i < base.w[0].numel(); ++i) {
        REQUIRE(base.w[0].data()[i] == qb.w_q[0].data()[i]);
    }
}
