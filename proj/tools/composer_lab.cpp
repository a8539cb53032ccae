// composer-lab: command-line front end over the composer library.
//
// Artifact layout (all under --out, default ./out):
//   backbone.cmpz[.config]        pretrained denoiser weights + the config used
//   composer.cmpz[.config]        trained meta-generator weights
//   composer_quant.cmpz[.config]  quantization-aware meta-generator weights
//   *.jsonl / *.csv               reports; every one embeds the resolved
//                                 config and the build id
//   *.pgm                         images (plain-text P2, [-1,1] -> [0,255])
//
// Exit codes: 0 success, 1 failure, 2 missing prerequisite artifact (the
// message says which command produces it).

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "composer/composer.hpp"

#ifndef COMPOSERLAB_BUILD_ID
#define COMPOSERLAB_BUILD_ID "unknown"
#endif

namespace {

using F = float;
namespace fs = std::filesystem;
using namespace composer;

struct MissingPrereq : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct CommonArgs {
    std::string config = "";  // path, or "default"/"" for built-in defaults
    std::vector<std::string> sets;
    std::int64_t seed = -1;  // <0: keep the config's seed
    std::string out = "out";
};

void add_common(CLI::App* cmd, CommonArgs& a) {
    cmd->add_option("--config", a.config, "config file path, or 'default' for built-in defaults");
    cmd->add_option("--set", a.sets, "override a config key, key=value (repeatable)")
        ->take_all();
    cmd->add_option("--seed", a.seed, "override the run seed");
    cmd->add_option("--out", a.out, "artifact directory")->capture_default_str();
}

std::string artifact(const CommonArgs& a, const std::string& name) {
    return (fs::path(a.out) / name).string();
}

// Config precedence: --config file (or literal 'default') > the sidecar of an
// existing backbone checkpoint in --out > built-in defaults. --set overrides
// and --seed apply on top, in that order.
RunConfig resolve_config(const CommonArgs& a) {
    RunConfig cfg;
    if (!a.config.empty() && a.config != "default") {
        cfg = load_config(a.config, {});
    } else if (a.config.empty() && fs::exists(artifact(a, "backbone.cmpz.config"))) {
        cfg = parse_config_text(read_sidecar(artifact(a, "backbone.cmpz")));
    }
    for (const std::string& s : a.sets) apply_override(cfg, s);
    if (a.seed >= 0) cfg.seed = static_cast<std::uint64_t>(a.seed);
    validate_config(cfg);
    return cfg;
}

void require_artifact(const std::string& path, const std::string& producer) {
    if (!fs::exists(path)) {
        throw MissingPrereq("missing prerequisite '" + path + "'; run `composer-lab " + producer +
                            "` first (same --out)");
    }
}

SyntheticDataset<F> make_dataset(const RunConfig& cfg) {
    return gen_synthetic_dataset<F>(cfg.seed, cfg.dataset_n, cfg.dataset_c, cfg.backbone_image_size);
}

Denoiser<F> fresh_backbone(const RunConfig& cfg) {
    SeededRng rng = SeededRng(cfg.seed).split("backbone-init");
    return Denoiser<F>::init(make_backbone_config(cfg), rng);
}

Denoiser<F> load_backbone(const CommonArgs& a, const RunConfig& cfg) {
    const std::string path = artifact(a, "backbone.cmpz");
    require_artifact(path, "pretrain");
    Denoiser<F> model = fresh_backbone(cfg);
    auto params = model.named_params();
    assign_named(params, load_checkpoint<F>(path));
    model.set_trainable(false);
    return model;
}

MetaGenerator<F> fresh_generator(const RunConfig& cfg, const Denoiser<F>& backbone) {
    SeededRng rng = SeededRng(cfg.seed).split("composer-init");
    return MetaGenerator<F>::init(make_composer_config(cfg), backbone, parse_targets(cfg.composer_targets), rng);
}

MetaGenerator<F> load_generator(const CommonArgs& a, const RunConfig& cfg, const Denoiser<F>& backbone,
                                const std::string& name, const std::string& producer) {
    const std::string path = artifact(a, name);
    require_artifact(path, producer);
    MetaGenerator<F> gen = fresh_generator(cfg, backbone);
    auto params = gen.named_params();
    assign_named(params, load_checkpoint<F>(path));
    gen.set_trainable(false);
    return gen;
}

void save_model(const std::string& path, std::vector<std::pair<std::string, Tensor<F>>> params,
                const RunConfig& cfg) {
    save_checkpoint(path, params);
    write_sidecar(path, config_to_text(cfg));
}

MetricsWriter open_metrics(const CommonArgs& a, const RunConfig& cfg, const std::string& name) {
    return MetricsWriter(artifact(a, name), COMPOSERLAB_BUILD_ID, config_to_text(cfg));
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

// --------------------------------------------------------------------------
// subcommands

int cmd_pretrain(const CommonArgs& a) {
    const RunConfig cfg = resolve_config(a);
    SyntheticDataset<F> ds = make_dataset(cfg);
    Denoiser<F> model = fresh_backbone(cfg);
    MetricsWriter mw = open_metrics(a, cfg, "pretrain.jsonl");
    TrainCurve curve = pretrain_backbone(model, ds, make_train_settings(cfg), mw.sink());
    save_model(artifact(a, "backbone.cmpz"), model.named_params(), cfg);
    mw.note("saved", {{"path", artifact(a, "backbone.cmpz")},
                      {"val_loss_initial", curve.val_loss.front()},
                      {"val_loss_final", curve.val_loss.back()}});
    std::cout << "pretrain: val loss " << curve.val_loss.front() << " -> " << curve.val_loss.back() << "\n"
              << "saved " << artifact(a, "backbone.cmpz") << "\n";
    return 0;
}

int cmd_train_composer(const CommonArgs& a) {
    const RunConfig cfg = resolve_config(a);
    SyntheticDataset<F> ds = make_dataset(cfg);
    Denoiser<F> model = load_backbone(a, cfg);
    SimilarityIndex<F> index = SimilarityIndex<F>::build(ds);
    MetaGenerator<F> gen = fresh_generator(cfg, model);
    MetricsWriter mw = open_metrics(a, cfg, "train_composer.jsonl");
    TrainCurve curve = train_composer(gen, model, ds, index, make_train_settings(cfg), mw.sink());
    save_model(artifact(a, "composer.cmpz"), gen.named_params(), cfg);
    mw.note("saved", {{"path", artifact(a, "composer.cmpz")},
                      {"val_loss_initial", curve.val_loss.front()},
                      {"val_loss_final", curve.val_loss.back()}});
    std::cout << "train-composer: val loss " << curve.val_loss.front() << " -> " << curve.val_loss.back()
              << "\n"
              << "saved " << artifact(a, "composer.cmpz") << "\n";
    return 0;
}

int cmd_generate(const CommonArgs& a, std::int64_t class_id, std::int64_t steps, std::int64_t count) {
    const RunConfig cfg = resolve_config(a);
    Denoiser<F> model = load_backbone(a, cfg);
    MetaGenerator<F> gen = load_generator(a, cfg, model, "composer.cmpz", "train-composer");
    if (class_id < 0 || class_id >= model.cfg.num_classes) {
        throw std::runtime_error("generate: class " + std::to_string(class_id) + " outside [0," +
                                 std::to_string(model.cfg.num_classes) + ")");
    }
    if (steps <= 0) steps = cfg.bench_steps;
    UpdateSet<F> set = gen.generate(nullptr, class_id);
    SeededRng rng = SeededRng(cfg.seed).split("generate");
    MetricsWriter mw = open_metrics(a, cfg, "generate.jsonl");
    std::vector<std::string> files;
    for (std::int64_t i = 0; i < count; ++i) {
        Tensor<F> img = model.sample_loop(class_id, steps, &set, rng);
        std::string path = artifact(a, "gen_c" + std::to_string(class_id) + "_s" + std::to_string(cfg.seed) +
                                           "_t" + std::to_string(steps) + "_" + std::to_string(i) + ".pgm");
        write_pgm(path, img, model.cfg.image_size);
        files.push_back(path);
    }
    mw.note("generated", {{"class", class_id}, {"steps", steps}, {"files", files}});
    for (const std::string& f : files) std::cout << f << "\n";
    return 0;
}

int cmd_evaluate(const CommonArgs& a) {
    const RunConfig cfg = resolve_config(a);
    SyntheticDataset<F> ds = make_dataset(cfg);
    Denoiser<F> model = load_backbone(a, cfg);
    MetaGenerator<F> gen = load_generator(a, cfg, model, "composer.cmpz", "train-composer");
    MetricsWriter mw = open_metrics(a, cfg, "evaluate.jsonl");

    const std::vector<std::int64_t> val = ds.val_indices();
    const auto batch = std::min<std::int64_t>(cfg.train_batch, static_cast<std::int64_t>(val.size()));
    std::vector<UpdateSet<F>> per_class = generate_all_classes(gen);
    const double val_static = eval_val_loss<F>(model, ds, val, batch, nullptr, cfg.seed);
    const double val_composer = eval_val_loss<F>(model, ds, val, batch, &per_class, cfg.seed);

    BatchTensors<F> real = gather_batch(ds, val);
    SeededRng rng_s = SeededRng(cfg.seed).split("evaluate-static");
    Tensor<F> imgs_static =
        sample_image_set<F>(model, nullptr, cfg.bench_steps, cfg.bench_samples_per_class, rng_s);
    SeededRng rng_c = SeededRng(cfg.seed).split("evaluate-composer");
    Tensor<F> imgs_composer =
        sample_image_set<F>(model, &per_class, cfg.bench_steps, cfg.bench_samples_per_class, rng_c);
    const double fr_static = toy_frechet(imgs_static, real.images);
    const double fr_composer = toy_frechet(imgs_composer, real.images);

    const std::string cfgline = config_one_line(config_to_text(cfg));
    CsvWriter csv(artifact(a, "evaluate.csv"), {"metric", "value", "build", "config"});
    csv.row({"val_loss_static", fmt(val_static), COMPOSERLAB_BUILD_ID, cfgline});
    csv.row({"val_loss_composer", fmt(val_composer), COMPOSERLAB_BUILD_ID, cfgline});
    csv.row({"frechet_static", fmt(fr_static), COMPOSERLAB_BUILD_ID, cfgline});
    csv.row({"frechet_composer", fmt(fr_composer), COMPOSERLAB_BUILD_ID, cfgline});
    mw.note("evaluate", {{"val_loss_static", val_static},
                         {"val_loss_composer", val_composer},
                         {"frechet_static", fr_static},
                         {"frechet_composer", fr_composer}});
    std::cout << "val loss: static " << val_static << ", composer " << val_composer << "\n"
              << "toy-frechet: static " << fr_static << ", composer " << fr_composer << "\n"
              << "wrote " << artifact(a, "evaluate.csv") << "\n";
    return 0;
}

int cmd_bench(const CommonArgs& a, std::int64_t n_seeds) {
    const RunConfig cfg = resolve_config(a);
    SyntheticDataset<F> ds = make_dataset(cfg);
    Denoiser<F> model = load_backbone(a, cfg);
    MetaGenerator<F> gen = load_generator(a, cfg, model, "composer.cmpz", "train-composer");
    SimilarityIndex<F> index = SimilarityIndex<F>::build(ds);
    MetricsWriter mw = open_metrics(a, cfg, "bench.jsonl");

    std::vector<std::uint64_t> seeds = cfg.bench_seeds;
    if (n_seeds > 0) {
        seeds.clear();
        for (std::int64_t i = 0; i < n_seeds; ++i) seeds.push_back(cfg.seed + static_cast<std::uint64_t>(i));
    }

    const std::string cfgline = config_one_line(config_to_text(cfg));
    CsvWriter csv(artifact(a, "bench.csv"),
                  {"strategy", "seed", "adapt_seconds", "sample_seconds", "total_seconds", "peak_bytes",
                   "merges", "inference_applications", "denoiser_calls", "frechet", "val_loss", "failed",
                   "error", "build", "config"});
    std::vector<std::vector<double>> totals(3), peaks(3), frechets(3), vals(3);
    std::vector<std::string> names;
    for (std::uint64_t s : seeds) {
        std::vector<StrategyReport> reps =
            run_comparison(model, gen, ds, index, cfg.bench_steps, cfg.bench_samples_per_class, s);
        if (names.empty()) {
            for (const StrategyReport& r : reps) names.push_back(r.strategy);
        }
        for (std::size_t i = 0; i < reps.size(); ++i) {
            const StrategyReport& r = reps[i];
            csv.row({r.strategy, std::to_string(s), fmt(r.adapt_seconds), fmt(r.sample_seconds),
                     fmt(r.total_seconds), std::to_string(r.peak_bytes), std::to_string(r.merges),
                     std::to_string(r.inference_applications), std::to_string(r.denoiser_calls),
                     fmt(r.frechet), fmt(r.val_loss), r.failed ? "true" : "false", r.error,
                     COMPOSERLAB_BUILD_ID, cfgline});
            mw.note("strategy", {{"strategy", r.strategy},
                                 {"seed", s},
                                 {"total_seconds", r.total_seconds},
                                 {"peak_bytes", r.peak_bytes},
                                 {"frechet", r.frechet},
                                 {"val_loss", r.val_loss},
                                 {"failed", r.failed}});
            if (!r.failed) {
                totals[i].push_back(r.total_seconds);
                peaks[i].push_back(static_cast<double>(r.peak_bytes));
                frechets[i].push_back(r.frechet);
                vals[i].push_back(r.val_loss);
            }
        }
    }
    for (std::size_t i = 0; i < names.size(); ++i) {
        if (totals[i].empty()) continue;
        csv.row({names[i], "median", fmt(0), fmt(0), fmt(median(totals[i])), fmt(median(peaks[i])), "", "", "",
                 fmt(median(frechets[i])), fmt(median(vals[i])), "false", "", COMPOSERLAB_BUILD_ID, cfgline});
        std::cout << names[i] << ": median total " << median(totals[i]) << "s, peak "
                  << median(peaks[i]) / (1024.0 * 1024.0) << " MiB, frechet " << median(frechets[i])
                  << ", val loss " << median(vals[i]) << "\n";
    }
    std::cout << "wrote " << artifact(a, "bench.csv") << "\n";
    return 0;
}

int cmd_ablate(const CommonArgs& a, const std::string& axis, std::vector<std::string> values) {
    const RunConfig cfg = resolve_config(a);
    if (values.empty()) {
        for (const auto& [name, grid] : ablation_grids()) {
            if (name == axis) values = grid;
        }
    }
    validate_ablation(axis, values);
    SyntheticDataset<F> ds = make_dataset(cfg);
    Denoiser<F> model = load_backbone(a, cfg);
    SimilarityIndex<F> index = SimilarityIndex<F>::build(ds);
    MetricsWriter mw = open_metrics(a, cfg, "ablate_" + axis + ".jsonl");
    std::vector<AblationPoint> points = run_ablation(cfg, axis, values, model, ds, index, mw.sink());

    const std::string cfgline = config_one_line(config_to_text(cfg));
    CsvWriter csv(artifact(a, "ablate_" + axis + ".csv"),
                  {"axis", "value", "final_val_loss", "frechet", "seconds", "failed", "error", "build",
                   "config"});
    for (const AblationPoint& p : points) {
        csv.row({p.axis, p.value, fmt(p.final_val_loss), fmt(p.frechet), fmt(p.seconds),
                 p.failed ? "true" : "false", p.error, COMPOSERLAB_BUILD_ID, cfgline});
        mw.note("ablation_point", {{"axis", p.axis},
                                   {"value", p.value},
                                   {"final_val_loss", p.final_val_loss},
                                   {"frechet", p.frechet},
                                   {"failed", p.failed}});
        std::cout << axis << "=" << p.value << ": "
                  << (p.failed ? "FAILED (" + p.error + ")"
                               : "val loss " + fmt(p.final_val_loss) + ", frechet " + fmt(p.frechet))
                  << "\n";
    }
    std::cout << "wrote " << artifact(a, "ablate_" + axis + ".csv") << "\n";
    return 0;
}

int cmd_quant_train(const CommonArgs& a) {
    RunConfig cfg = resolve_config(a);
    set_config_key(cfg, "quant.enabled", "true");  // the command implies quant mode
    validate_config(cfg);
    SyntheticDataset<F> ds = make_dataset(cfg);
    Denoiser<F> model = load_backbone(a, cfg);
    SimilarityIndex<F> index = SimilarityIndex<F>::build(ds);
    MetaGenerator<F> gen = fresh_generator(cfg, model);
    QuantizedBackbone<F> qb = quantize_backbone(model, gen.keys, static_cast<int>(cfg.quant_w_bits));
    MetricsWriter mw = open_metrics(a, cfg, "quant_train.jsonl");
    QuantTrainResult<F> res = train_quant_composer(gen, model, qb, static_cast<int>(cfg.quant_a_bits), ds,
                                                   index, make_train_settings(cfg), mw.sink());
    save_model(artifact(a, "composer_quant.cmpz"), gen.named_params(), cfg);

    const std::string cfgline = config_one_line(config_to_text(cfg));
    CsvWriter csv(artifact(a, "quant_train.csv"),
                  {"w_bits", "a_bits", "kd_baseline", "kd_initial", "kd_final", "build", "config"});
    csv.row({std::to_string(cfg.quant_w_bits), std::to_string(cfg.quant_a_bits), fmt(res.baseline_kd),
             fmt(res.curve.val_loss.front()), fmt(res.curve.val_loss.back()), COMPOSERLAB_BUILD_ID, cfgline});
    mw.note("saved", {{"path", artifact(a, "composer_quant.cmpz")},
                      {"kd_baseline", res.baseline_kd},
                      {"kd_initial", res.curve.val_loss.front()},
                      {"kd_final", res.curve.val_loss.back()}});
    std::cout << "quant-train (W" << cfg.quant_w_bits << "A" << cfg.quant_a_bits << "): kd baseline "
              << res.baseline_kd << ", initial " << res.curve.val_loss.front() << ", final "
              << res.curve.val_loss.back() << "\n"
              << "saved " << artifact(a, "composer_quant.cmpz") << "\n";
    return 0;
}

int cmd_ttt(const CommonArgs& a) {
    const RunConfig cfg = resolve_config(a);
    SyntheticDataset<F> ds = make_dataset(cfg);
    Denoiser<F> model = load_backbone(a, cfg);
    SimilarityIndex<F> index = SimilarityIndex<F>::build(ds);
    MetricsWriter mw = open_metrics(a, cfg, "ttt.jsonl");

    const std::vector<TargetKey> keys =
        collect_adaptation_targets(model.cfg, parse_targets(cfg.composer_targets));
    TTTSettings tt;
    SeededRng rng = SeededRng(cfg.seed).split("ttt");
    const std::string cfgline = config_one_line(config_to_text(cfg));
    CsvWriter csv(artifact(a, "ttt.csv"),
                  {"class", "adapt_seconds", "val_loss", "frechet", "build", "config"});
    std::vector<UpdateSet<F>> sets;
    double adapt_total = 0.0;
    for (std::int64_t c = 0; c < model.cfg.num_classes; ++c) {
        const double t0 = now_seconds();
        sets.push_back(ttt_adapt(model, ds, index, c, keys, cfg.composer_r, tt, rng));
        const double dt = now_seconds() - t0;
        adapt_total += dt;
        csv.row({std::to_string(c), fmt(dt), "", "", COMPOSERLAB_BUILD_ID, cfgline});
        mw.event("ttt", 0, c, "adapt_seconds", dt);
    }
    const std::vector<std::int64_t> val = ds.val_indices();
    const auto batch = std::min<std::int64_t>(cfg.train_batch, static_cast<std::int64_t>(val.size()));
    const double val_loss = eval_val_loss<F>(model, ds, val, batch, &sets, cfg.seed);
    Tensor<F> imgs = sample_image_set<F>(model, &sets, cfg.bench_steps, cfg.bench_samples_per_class, rng);
    const double frechet = toy_frechet(imgs, gather_batch(ds, val).images);
    csv.row({"all", fmt(adapt_total), fmt(val_loss), fmt(frechet), COMPOSERLAB_BUILD_ID, cfgline});
    mw.note("ttt_summary", {{"adapt_seconds", adapt_total}, {"val_loss", val_loss}, {"frechet", frechet}});
    std::cout << "ttt: adapt " << adapt_total << "s over " << model.cfg.num_classes << " classes, val loss "
              << val_loss << ", frechet " << frechet << "\n"
              << "wrote " << artifact(a, "ttt.csv") << "\n";
    return 0;
}

int cmd_export_data(const CommonArgs& a, std::int64_t per_class) {
    const RunConfig cfg = resolve_config(a);
    SyntheticDataset<F> ds = make_dataset(cfg);
    const fs::path dir = fs::path(a.out) / "data";
    fs::create_directories(dir);
    MetricsWriter mw = open_metrics(a, cfg, "export_data.jsonl");
    const std::string cfgline = config_one_line(config_to_text(cfg));
    CsvWriter csv((dir / "labels.csv").string(), {"file", "index", "class", "split", "build", "config"});
    std::vector<std::int64_t> written(static_cast<std::size_t>(cfg.dataset_c), 0);
    std::int64_t total = 0;
    for (std::int64_t i = 0; i < ds.size(); ++i) {
        const auto cls = static_cast<std::size_t>(ds.labels[static_cast<std::size_t>(i)]);
        if (written[cls] >= per_class) continue;
        ++written[cls];
        ++total;
        const std::string name = "class" + std::to_string(cls) + "_" + std::to_string(i) + ".pgm";
        write_pgm((dir / name).string(), ds.image(i), ds.image_size, ds.image_size);
        csv.row({name, std::to_string(i), std::to_string(cls), i % 8 == 7 ? "val" : "train",
                 COMPOSERLAB_BUILD_ID, cfgline});
    }
    mw.note("exported", {{"images", total}, {"dir", dir.string()}});
    std::cout << "exported " << total << " images to " << dir.string() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"composer-lab: instance-adaptive low-rank updates for a toy diffusion backbone"};
    app.require_subcommand(1);

    CommonArgs args;
    std::int64_t gen_class = 0, gen_steps = 0, gen_count = 1;
    std::int64_t bench_seeds = 0;
    std::string ablate_axis;
    std::vector<std::string> ablate_values;
    std::int64_t export_count = 8;

    CLI::App* pretrain = app.add_subcommand("pretrain", "train the backbone on the synthetic dataset");
    CLI::App* trainc = app.add_subcommand("train-composer", "train the meta-generator on a frozen backbone");
    CLI::App* generate = app.add_subcommand("generate", "sample images for one class with composed weights");
    generate->add_option("--class", gen_class, "class id")->required();
    generate->add_option("--steps", gen_steps, "sampling steps (default: bench.steps)");
    generate->add_option("--count", gen_count, "number of images")->capture_default_str();
    CLI::App* evaluate = app.add_subcommand("evaluate", "validation loss and toy-Frechet, static vs composed");
    CLI::App* bench = app.add_subcommand("bench", "compare static / ttt / composer strategies");
    bench->add_option("--seeds", bench_seeds, "benchmark seed count (seed, seed+1, ...; default: bench.seeds)");
    CLI::App* ablate = app.add_subcommand("ablate", "sweep one config axis, one composer training per value");
    ablate->add_option("--axis", ablate_axis, "axis name (r, alpha, d_model, targets, attention, arch, pipeline, token_init)")
        ->required();
    ablate->add_option("--values", ablate_values, "subset of grid values (default: the whole grid)")->take_all();
    CLI::App* quant = app.add_subcommand("quant-train", "quantization-aware composer distillation");
    CLI::App* ttt = app.add_subcommand("ttt", "per-class test-time training baseline");
    CLI::App* expdata = app.add_subcommand("export-data", "write dataset images as PGM plus a label table");
    expdata->add_option("--count", export_count, "images per class")->capture_default_str();

    for (CLI::App* cmd : {pretrain, trainc, generate, evaluate, bench, ablate, quant, ttt, expdata}) {
        add_common(cmd, args);
    }

    CLI11_PARSE(app, argc, argv);

    try {
        fs::create_directories(args.out);
        if (pretrain->parsed()) return cmd_pretrain(args);
        if (trainc->parsed()) return cmd_train_composer(args);
        if (generate->parsed()) return cmd_generate(args, gen_class, gen_steps, gen_count);
        if (evaluate->parsed()) return cmd_evaluate(args);
        if (bench->parsed()) return cmd_bench(args, bench_seeds);
        if (ablate->parsed()) return cmd_ablate(args, ablate_axis, ablate_values);
        if (quant->parsed()) return cmd_quant_train(args);
        if (ttt->parsed()) return cmd_ttt(args);
        if (expdata->parsed()) return cmd_export_data(args, export_count);
    } catch (const MissingPrereq& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
