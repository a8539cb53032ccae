#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "composer/adamw.hpp"
#include "composer/dataset.hpp"
#include "composer/denoiser.hpp"
#include "composer/generator.hpp"
#include "composer/schedule.hpp"
#include "composer/tape.hpp"

namespace composer {

struct TrainSettings {
    std::int64_t epochs = 6;  // desk-scale default; paper-scale schedules are config-reachable
    double lr = 1e-4;
    double weight_decay = 0.05;
    std::int64_t batch = 16;
    double alpha = 0.75;
    BatchMode pipeline = BatchMode::context_class;
    std::uint64_t seed = 0;
};

struct TrainCurve {
    std::vector<double> train_loss;  // mean step loss per epoch
    std::vector<double> val_loss;    // val_loss[0] is pre-training, then one per epoch
    // optional per-event sink: (phase, epoch, step, name, value)
};

using MetricSink = std::function<void(const std::string& phase, std::int64_t epoch, std::int64_t step,
                                      const std::string& name, double value)>;

template <typename T>
struct BatchTensors {
    Tensor<T> images;  // B x pixels
    std::vector<std::int64_t> classes;
};

template <typename T>
BatchTensors<T> gather_batch(const SyntheticDataset<T>& ds, const std::vector<std::int64_t>& idx) {
    BatchTensors<T> b;
    b.images = Tensor<T>({static_cast<std::int64_t>(idx.size()), ds.pixels()});
    b.classes.reserve(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        const T* src = ds.image(idx[i]);
        T* dst = b.images.data() + static_cast<std::int64_t>(i) * ds.pixels();
        for (std::int64_t j = 0; j < ds.pixels(); ++j) dst[j] = src[j];
        b.classes.push_back(ds.labels[static_cast<std::size_t>(idx[i])]);
    }
    return b;
}

// x_t assembled per sample from its own timestep
template <typename T>
Tensor<T> noised_batch(const Tensor<T>& images, const std::vector<std::int64_t>& ts, const Tensor<T>& eps,
                       const NoiseSchedule<T>& schedule) {
    const std::int64_t bsz = images.rows(), pix = images.cols();
    if (eps.shape() != images.shape()) {
        throw std::runtime_error("noised_batch: eps shape " + shape_str(eps.shape()) + " != images " +
                                 shape_str(images.shape()));
    }
    Tensor<T> x_t({bsz, pix});
    for (std::int64_t i = 0; i < bsz; ++i) {
        const T g = schedule.gamma_t(ts[static_cast<std::size_t>(i)]);
        const T sg = std::sqrt(g), sn = std::sqrt(T(1) - g);
        const T* xi = images.data() + i * pix;
        const T* ei = eps.data() + i * pix;
        T* ti = x_t.data() + i * pix;
        for (std::int64_t j = 0; j < pix; ++j) ti[j] = sg * xi[j] + sn * ei[j];
    }
    return x_t;
}

// mean over the batch of the summed squared error between drawn and predicted
// noise
template <typename T>
Tensor<T> diffusion_loss(Tape<T>* tape, Denoiser<T>& model, const Tensor<T>& images,
                         const std::vector<std::int64_t>& classes, const std::vector<std::int64_t>& ts,
                         const Tensor<T>& eps, const std::vector<const UpdateSet<T>*>* updates = nullptr) {
    Tensor<T> x_t = noised_batch(images, ts, eps, model.schedule);
    Tensor<T> pred = model.forward(tape, x_t, ts, classes, updates);
    return scale(tape, sq_diff_sum(tape, pred, eps), T(1) / static_cast<T>(images.rows()));
}

template <typename T>
void draw_noise(SeededRng& rng, const Denoiser<T>& model, std::int64_t bsz,
                std::vector<std::int64_t>& ts, Tensor<T>& eps) {
    ts.resize(static_cast<std::size_t>(bsz));
    for (auto& t : ts) t = static_cast<std::int64_t>(rng.range(static_cast<std::uint64_t>(model.cfg.num_timesteps))) + 1;
    eps = Tensor<T>::randn({bsz, model.cfg.pixels()}, rng);
}

// Validation denoising loss with fixed draws: the same eval_seed gives the
// same (t, eps) stream, so strategies are compared on identical noise.
template <typename T>
double eval_val_loss(Denoiser<T>& model, const SyntheticDataset<T>& ds,
                     const std::vector<std::int64_t>& indices, std::int64_t batch,
                     const std::vector<UpdateSet<T>>* per_class_updates, std::uint64_t eval_seed) {
    SeededRng rng = SeededRng(eval_seed).split("val-eval");
    double total = 0.0;
    std::int64_t count = 0;
    for (std::size_t at = 0; at + static_cast<std::size_t>(batch) <= indices.size();
         at += static_cast<std::size_t>(batch)) {
        std::vector<std::int64_t> idx(indices.begin() + static_cast<std::ptrdiff_t>(at),
                                      indices.begin() + static_cast<std::ptrdiff_t>(at) + batch);
        BatchTensors<T> b = gather_batch(ds, idx);
        std::vector<std::int64_t> ts;
        Tensor<T> eps;
        draw_noise(rng, model, batch, ts, eps);
        std::vector<const UpdateSet<T>*> ups;
        const std::vector<const UpdateSet<T>*>* ups_ptr = nullptr;
        if (per_class_updates) {
            for (std::int64_t c : b.classes) ups.push_back(&(*per_class_updates)[static_cast<std::size_t>(c)]);
            ups_ptr = &ups;
        }
        total += static_cast<double>(diffusion_loss<T>(nullptr, model, b.images, b.classes, ts, eps, ups_ptr).value());
        ++count;
    }
    if (!count) throw std::runtime_error("eval_val_loss: not enough validation samples for one batch");
    return total / static_cast<double>(count);
}

// one UpdateSet per class, generated without a tape (for evaluation)
template <typename T>
std::vector<UpdateSet<T>> generate_all_classes(MetaGenerator<T>& gen) {
    std::vector<std::int64_t> classes(static_cast<std::size_t>(gen.num_classes));
    for (std::size_t i = 0; i < classes.size(); ++i) classes[i] = static_cast<std::int64_t>(i);
    return gen.generate_batch(nullptr, classes);
}

// Trains the denoiser on the synthetic dataset with vanilla batches, then
// freezes every parameter. Divergence (non-finite loss) aborts with a state
// dump in the message.
template <typename T>
TrainCurve pretrain_backbone(Denoiser<T>& model, const SyntheticDataset<T>& ds, const TrainSettings& st,
                             const MetricSink& sink = {}) {
    model.set_trainable(true);
    typename AdamW<T>::Hyper h;
    h.lr = static_cast<T>(st.lr);
    h.weight_decay = static_cast<T>(st.weight_decay);
    AdamW<T> opt(h);
    for (auto& [name, p] : model.named_params()) opt.add_param(name, p);

    SeededRng rng = SeededRng(st.seed).split("pretrain");
    const std::vector<std::int64_t> train_idx = ds.train_indices();
    const std::vector<std::int64_t> val_idx = ds.val_indices();
    const std::int64_t steps_per_epoch = static_cast<std::int64_t>(train_idx.size()) / st.batch;
    if (steps_per_epoch < 1) throw std::runtime_error("pretrain: dataset too small for one batch");

    TrainCurve curve;
    curve.val_loss.push_back(eval_val_loss<T>(model, ds, val_idx, st.batch, nullptr, st.seed));
    if (sink) sink("pretrain", 0, 0, "val_loss", curve.val_loss.back());
    BatchSpec spec{0.0, st.batch, BatchMode::vanilla};
    for (std::int64_t epoch = 1; epoch <= st.epochs; ++epoch) {
        double epoch_loss = 0.0;
        for (std::int64_t s = 0; s < steps_per_epoch; ++s) {
            const std::vector<std::int64_t> idx = sample_batch<T>(ds, nullptr, spec, -1, rng, &train_idx);
            BatchTensors<T> b = gather_batch(ds, idx);
            std::vector<std::int64_t> ts;
            Tensor<T> eps;
            draw_noise(rng, model, st.batch, ts, eps);
            Tape<T> tape;
            Tensor<T> loss = diffusion_loss(&tape, model, b.images, b.classes, ts, eps);
            const double lv = static_cast<double>(loss.value());
            if (!std::isfinite(lv)) {
                throw std::runtime_error("pretrain: diverged at epoch " + std::to_string(epoch) + " step " +
                                         std::to_string(s) + " (loss=" + std::to_string(lv) +
                                         ", lr=" + std::to_string(st.lr) + ", seed=" + std::to_string(st.seed) + ")");
            }
            epoch_loss += lv;
            loss.set_requires_grad(true);
            tape.backward(loss);
            opt.step();
            opt.zero_grad();
        }
        curve.train_loss.push_back(epoch_loss / static_cast<double>(steps_per_epoch));
        curve.val_loss.push_back(eval_val_loss<T>(model, ds, val_idx, st.batch, nullptr, st.seed));
        if (sink) {
            sink("pretrain", epoch, 0, "train_loss", curve.train_loss.back());
            sink("pretrain", epoch, 0, "val_loss", curve.val_loss.back());
        }
    }
    model.set_trainable(false);
    return curve;
}

// Composer training: backbone stays frozen (checksummed every epoch), every
// batch element is adapted with the UpdateSet generated from its own class,
// and only generator parameters receive gradient.
template <typename T>
TrainCurve train_composer(MetaGenerator<T>& gen, Denoiser<T>& model, const SyntheticDataset<T>& ds,
                          const SimilarityIndex<T>& index, const TrainSettings& st,
                          const MetricSink& sink = {}) {
    if (!model.is_frozen()) throw std::runtime_error("train_composer: backbone is not frozen");
    const std::uint32_t crc0 = model.checksum();
    gen.set_trainable(true);

    typename AdamW<T>::Hyper h;
    h.lr = static_cast<T>(st.lr);
    h.weight_decay = static_cast<T>(st.weight_decay);
    AdamW<T> opt(h);
    for (auto& [name, p] : gen.named_params()) opt.add_param(name, p);

    SeededRng rng = SeededRng(st.seed).split("train-composer");
    const std::vector<std::int64_t> train_idx = ds.train_indices();
    const std::vector<std::int64_t> val_idx = ds.val_indices();
    const std::int64_t steps_per_epoch = static_cast<std::int64_t>(train_idx.size()) / st.batch;
    if (steps_per_epoch < 1) throw std::runtime_error("train_composer: dataset too small for one batch");

    auto val_with_updates = [&]() {
        std::vector<UpdateSet<T>> per_class = generate_all_classes(gen);
        return eval_val_loss<T>(model, ds, val_idx, st.batch, &per_class, st.seed);
    };

    TrainCurve curve;
    curve.val_loss.push_back(val_with_updates());
    if (sink) sink("train-composer", 0, 0, "val_loss", curve.val_loss.back());
    BatchSpec spec{st.alpha, st.batch, st.pipeline};
    for (std::int64_t epoch = 1; epoch <= st.epochs; ++epoch) {
        double epoch_loss = 0.0;
        for (std::int64_t s = 0; s < steps_per_epoch; ++s) {
            const std::int64_t anchor =
                st.pipeline == BatchMode::vanilla
                    ? -1
                    : train_idx[rng.range(train_idx.size())];
            const std::vector<std::int64_t> idx = sample_batch(ds, &index, spec, anchor, rng, &train_idx);
            BatchTensors<T> b = gather_batch(ds, idx);

            std::vector<std::int64_t> uniq;
            for (std::int64_t c : b.classes) {
                bool seen = false;
                for (std::int64_t u : uniq) seen = seen || u == c;
                if (!seen) uniq.push_back(c);
            }
            Tape<T> tape;
            std::vector<UpdateSet<T>> sets = gen.generate_batch(&tape, uniq);
            std::vector<const UpdateSet<T>*> ups;
            ups.reserve(b.classes.size());
            for (std::int64_t c : b.classes) {
                for (std::size_t u = 0; u < uniq.size(); ++u) {
                    if (uniq[u] == c) ups.push_back(&sets[u]);
                }
            }
            std::vector<std::int64_t> ts;
            Tensor<T> eps;
            draw_noise(rng, model, st.batch, ts, eps);
            Tensor<T> loss = diffusion_loss(&tape, model, b.images, b.classes, ts, eps, &ups);
            const double lv = static_cast<double>(loss.value());
            if (!std::isfinite(lv)) {
                throw std::runtime_error("train_composer: diverged at epoch " + std::to_string(epoch) +
                                         " step " + std::to_string(s) + " (loss=" + std::to_string(lv) + ")");
            }
            epoch_loss += lv;
            loss.set_requires_grad(true);
            tape.backward(loss);
            opt.step();
            opt.zero_grad();
        }
        if (model.checksum() != crc0) {
            throw std::runtime_error("train_composer: backbone weights changed during epoch " +
                                     std::to_string(epoch) + " (integrity failure)");
        }
        curve.train_loss.push_back(epoch_loss / static_cast<double>(steps_per_epoch));
        curve.val_loss.push_back(val_with_updates());
        if (sink) {
            sink("train-composer", epoch, 0, "train_loss", curve.train_loss.back());
            sink("train-composer", epoch, 0, "val_loss", curve.val_loss.back());
        }
    }
    return curve;
}

}  // namespace composer
