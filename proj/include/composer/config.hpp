#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "composer/composition.hpp"
#include "composer/dataset.hpp"
#include "composer/denoiser.hpp"
#include "composer/generator.hpp"
#include "composer/train.hpp"

namespace composer {

// Every run is described by this closed key set. Files use `key = value`
// lines with `#` comments; later lines and command-line overrides win.
struct RunConfig {
    std::uint64_t seed = 0;

    std::int64_t dataset_n = 1280;
    std::int64_t dataset_c = 10;

    std::int64_t backbone_image_size = 16;
    std::int64_t backbone_patch_size = 4;
    std::int64_t backbone_d = 64;
    std::int64_t backbone_layers = 4;
    std::int64_t backbone_heads = 4;
    std::int64_t backbone_t = 100;

    std::int64_t composer_r = 8;
    std::int64_t composer_d_model = 64;
    std::int64_t composer_l = 2;
    std::int64_t composer_heads = 4;
    std::int64_t composer_m = 1;
    std::string composer_targets = "QV";
    std::string composer_attention = "global_local";
    std::string composer_arch = "transformer";
    std::string composer_token_init = "projected";

    std::int64_t train_epochs = 6;
    double train_lr = 1e-4;
    double train_weight_decay = 0.05;
    std::int64_t train_batch = 16;
    double train_alpha = 0.75;
    std::string train_pipeline = "context_class";

    bool quant_enabled = false;
    std::int64_t quant_w_bits = 4;
    std::int64_t quant_a_bits = 8;

    std::int64_t bench_steps = 50;
    std::int64_t bench_samples_per_class = 8;
    std::vector<std::uint64_t> bench_seeds = {0, 1, 2};
};

namespace detail {

inline std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

inline std::int64_t parse_int(const std::string& key, const std::string& v) {
    std::size_t used = 0;
    std::int64_t out = 0;
    try {
        out = std::stoll(v, &used);
    } catch (const std::exception&) {
        throw std::runtime_error("config: " + key + " expects an integer, got '" + v + "'");
    }
    if (used != v.size()) throw std::runtime_error("config: " + key + " expects an integer, got '" + v + "'");
    return out;
}

inline double parse_double(const std::string& key, const std::string& v) {
    std::size_t used = 0;
    double out = 0;
    try {
        out = std::stod(v, &used);
    } catch (const std::exception&) {
        throw std::runtime_error("config: " + key + " expects a number, got '" + v + "'");
    }
    if (used != v.size()) throw std::runtime_error("config: " + key + " expects a number, got '" + v + "'");
    return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true") return true;
    if (v == "false") return false;
    throw std::runtime_error("config: " + key + " expects true or false, got '" + v + "'");
}

inline std::vector<std::uint64_t> parse_seed_list(const std::string& key, const std::string& v) {
    std::vector<std::uint64_t> out;
    std::stringstream ss(v);
    std::string part;
    while (std::getline(ss, part, ',')) {
        part = trim(part);
        if (part.empty()) throw std::runtime_error("config: " + key + " has an empty entry in '" + v + "'");
        out.push_back(static_cast<std::uint64_t>(parse_int(key, part)));
    }
    if (out.empty()) throw std::runtime_error("config: " + key + " needs at least one seed");
    return out;
}

}  // namespace detail

// Adapted targets are written as a subset of "QKVO"; parsing normalizes to
// that canonical order and rejects anything else.
inline std::vector<Target> parse_targets(const std::string& s) {
    if (s.empty()) throw std::runtime_error("config: composer.targets must not be empty");
    bool seen[4] = {false, false, false, false};
    for (char c : s) {
        int i;
        switch (c) {
            case 'Q': i = 0; break;
            case 'K': i = 1; break;
            case 'V': i = 2; break;
            case 'O': i = 3; break;
            default:
                throw std::runtime_error("config: composer.targets may only contain QKVO, got '" + s + "'");
        }
        if (seen[i]) throw std::runtime_error("config: composer.targets repeats '" + std::string(1, c) + "'");
        seen[i] = true;
    }
    std::vector<Target> out;
    if (seen[0]) out.push_back(Target::Q);
    if (seen[1]) out.push_back(Target::K);
    if (seen[2]) out.push_back(Target::V);
    if (seen[3]) out.push_back(Target::O);
    return out;
}

inline std::string targets_str(const std::vector<Target>& ts) {
    std::string out;
    for (Target t : ts) out += target_name(t);
    return out;
}

inline void set_config_key(RunConfig& c, const std::string& key, const std::string& value) {
    using detail::parse_bool;
    using detail::parse_double;
    using detail::parse_int;
    if (key == "seed") c.seed = static_cast<std::uint64_t>(parse_int(key, value));
    else if (key == "dataset.N") c.dataset_n = parse_int(key, value);
    else if (key == "dataset.C") c.dataset_c = parse_int(key, value);
    else if (key == "backbone.image_size") c.backbone_image_size = parse_int(key, value);
    else if (key == "backbone.patch_size") c.backbone_patch_size = parse_int(key, value);
    else if (key == "backbone.d") c.backbone_d = parse_int(key, value);
    else if (key == "backbone.layers") c.backbone_layers = parse_int(key, value);
    else if (key == "backbone.heads") c.backbone_heads = parse_int(key, value);
    else if (key == "backbone.T") c.backbone_t = parse_int(key, value);
    else if (key == "composer.r") c.composer_r = parse_int(key, value);
    else if (key == "composer.d_model") c.composer_d_model = parse_int(key, value);
    else if (key == "composer.L") c.composer_l = parse_int(key, value);
    else if (key == "composer.heads") c.composer_heads = parse_int(key, value);
    else if (key == "composer.m") c.composer_m = parse_int(key, value);
    else if (key == "composer.targets") c.composer_targets = value;
    else if (key == "composer.attention") c.composer_attention = value;
    else if (key == "composer.arch") c.composer_arch = value;
    else if (key == "composer.token_init") c.composer_token_init = value;
    else if (key == "train.epochs") c.train_epochs = parse_int(key, value);
    else if (key == "train.lr") c.train_lr = parse_double(key, value);
    else if (key == "train.weight_decay") c.train_weight_decay = parse_double(key, value);
    else if (key == "train.batch") c.train_batch = parse_int(key, value);
    else if (key == "train.alpha") c.train_alpha = parse_double(key, value);
    else if (key == "train.pipeline") c.train_pipeline = value;
    else if (key == "quant.enabled") c.quant_enabled = parse_bool(key, value);
    else if (key == "quant.w_bits") c.quant_w_bits = parse_int(key, value);
    else if (key == "quant.a_bits") c.quant_a_bits = parse_int(key, value);
    else if (key == "bench.steps") c.bench_steps = parse_int(key, value);
    else if (key == "bench.samples_per_class") c.bench_samples_per_class = parse_int(key, value);
    else if (key == "bench.seeds") c.bench_seeds = detail::parse_seed_list(key, value);
    else throw std::runtime_error("config: unknown key '" + key + "'");
}

// Full cross-field validation; every message names the offending key.
inline void validate_config(const RunConfig& c) {
    auto positive = [](const char* key, std::int64_t v) {
        if (v < 1) throw std::runtime_error("config: " + std::string(key) + " must be positive, got " + std::to_string(v));
    };
    positive("dataset.N", c.dataset_n);
    positive("dataset.C", c.dataset_c);
    positive("backbone.image_size", c.backbone_image_size);
    positive("backbone.patch_size", c.backbone_patch_size);
    positive("backbone.d", c.backbone_d);
    positive("backbone.layers", c.backbone_layers);
    positive("backbone.heads", c.backbone_heads);
    positive("backbone.T", c.backbone_t);
    positive("composer.r", c.composer_r);
    positive("composer.d_model", c.composer_d_model);
    positive("composer.L", c.composer_l);
    positive("composer.heads", c.composer_heads);
    positive("composer.m", c.composer_m);
    positive("train.epochs", c.train_epochs);
    positive("train.batch", c.train_batch);
    positive("bench.steps", c.bench_steps);
    positive("bench.samples_per_class", c.bench_samples_per_class);
    if (c.backbone_image_size % c.backbone_patch_size != 0) {
        throw std::runtime_error("config: backbone.patch_size must divide backbone.image_size");
    }
    if (c.backbone_d % c.backbone_heads != 0) {
        throw std::runtime_error("config: backbone.heads must divide backbone.d");
    }
    if (c.composer_d_model % c.composer_heads != 0) {
        throw std::runtime_error("config: composer.heads must divide composer.d_model");
    }
    if (!(c.train_lr > 0)) throw std::runtime_error("config: train.lr must be positive");
    if (c.train_weight_decay < 0) throw std::runtime_error("config: train.weight_decay must be non-negative");
    if (c.train_alpha < 0 || c.train_alpha > 1) {
        throw std::runtime_error("config: train.alpha must be in [0,1], got " + std::to_string(c.train_alpha));
    }
    parse_targets(c.composer_targets);
    if (c.composer_attention != "global_local" && c.composer_attention != "standard") {
        throw std::runtime_error("config: composer.attention must be global_local or standard, got '" +
                                 c.composer_attention + "'");
    }
    if (c.composer_arch != "transformer" && c.composer_arch != "mlp") {
        throw std::runtime_error("config: composer.arch must be transformer or mlp, got '" + c.composer_arch + "'");
    }
    if (c.composer_token_init != "projected" && c.composer_token_init != "constant") {
        throw std::runtime_error("config: composer.token_init must be projected or constant, got '" +
                                 c.composer_token_init + "'");
    }
    batch_mode_from_name(c.train_pipeline);  // throws on unknown names
    if (c.quant_enabled) {
        if (c.quant_w_bits != 2 && c.quant_w_bits != 4 && c.quant_w_bits != 8) {
            throw std::runtime_error("config: quant.w_bits must be 2, 4 or 8, got " + std::to_string(c.quant_w_bits));
        }
        if (c.quant_a_bits != 8) {
            throw std::runtime_error("config: quant.a_bits must be 8, got " + std::to_string(c.quant_a_bits));
        }
    }
    if (c.bench_steps > c.backbone_t) {
        throw std::runtime_error("config: bench.steps must not exceed backbone.T");
    }
    if (c.bench_seeds.empty()) throw std::runtime_error("config: bench.seeds needs at least one seed");
}

inline void apply_override(RunConfig& c, const std::string& assignment) {
    const std::size_t eq = assignment.find('=');
    if (eq == std::string::npos) {
        throw std::runtime_error("config: override '" + assignment + "' is not of the form key=value");
    }
    set_config_key(c, detail::trim(assignment.substr(0, eq)), detail::trim(assignment.substr(eq + 1)));
}

inline RunConfig parse_config_text(const std::string& text) {
    RunConfig c;
    std::stringstream ss(text);
    std::string line;
    std::int64_t lineno = 0;
    while (std::getline(ss, line)) {
        ++lineno;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw std::runtime_error("config: line " + std::to_string(lineno) + " is not of the form key = value");
        }
        set_config_key(c, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    }
    return c;
}

inline RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides = {}) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config: cannot open '" + path + "'");
    std::stringstream buf;
    buf << in.rdbuf();
    RunConfig c = parse_config_text(buf.str());
    for (const std::string& o : overrides) apply_override(c, o);
    validate_config(c);
    return c;
}

inline std::string config_to_text(const RunConfig& c) {
    std::ostringstream out;
    out << "seed = " << c.seed << "\n";
    out << "dataset.N = " << c.dataset_n << "\n";
    out << "dataset.C = " << c.dataset_c << "\n";
    out << "backbone.image_size = " << c.backbone_image_size << "\n";
    out << "backbone.patch_size = " << c.backbone_patch_size << "\n";
    out << "backbone.d = " << c.backbone_d << "\n";
    out << "backbone.layers = " << c.backbone_layers << "\n";
    out << "backbone.heads = " << c.backbone_heads << "\n";
    out << "backbone.T = " << c.backbone_t << "\n";
    out << "composer.r = " << c.composer_r << "\n";
    out << "composer.d_model = " << c.composer_d_model << "\n";
    out << "composer.L = " << c.composer_l << "\n";
    out << "composer.heads = " << c.composer_heads << "\n";
    out << "composer.m = " << c.composer_m << "\n";
    out << "composer.targets = " << targets_str(parse_targets(c.composer_targets)) << "\n";
    out << "composer.attention = " << c.composer_attention << "\n";
    out << "composer.arch = " << c.composer_arch << "\n";
    out << "composer.token_init = " << c.composer_token_init << "\n";
    out << "train.epochs = " << c.train_epochs << "\n";
    out << "train.lr = " << c.train_lr << "\n";
    out << "train.weight_decay = " << c.train_weight_decay << "\n";
    out << "train.batch = " << c.train_batch << "\n";
    out << "train.alpha = " << c.train_alpha << "\n";
    out << "train.pipeline = " << c.train_pipeline << "\n";
    out << "quant.enabled = " << (c.quant_enabled ? "true" : "false") << "\n";
    out << "quant.w_bits = " << c.quant_w_bits << "\n";
    out << "quant.a_bits = " << c.quant_a_bits << "\n";
    out << "bench.steps = " << c.bench_steps << "\n";
    out << "bench.samples_per_class = " << c.bench_samples_per_class << "\n";
    out << "bench.seeds = ";
    for (std::size_t i = 0; i < c.bench_seeds.size(); ++i) out << (i ? "," : "") << c.bench_seeds[i];
    out << "\n";
    return out.str();
}

inline DenoiserConfig make_backbone_config(const RunConfig& c) {
    DenoiserConfig d;
    d.image_size = c.backbone_image_size;
    d.patch_size = c.backbone_patch_size;
    d.d = c.backbone_d;
    d.num_layers = c.backbone_layers;
    d.num_heads = c.backbone_heads;
    d.num_classes = c.dataset_c;
    d.num_timesteps = c.backbone_t;
    d.validate();
    return d;
}

inline ComposerConfig make_composer_config(const RunConfig& c) {
    ComposerConfig g;
    g.r = c.composer_r;
    g.d_model = c.composer_d_model;
    g.L = c.composer_l;
    g.heads = c.composer_heads;
    g.m = c.composer_m;
    g.attention = c.composer_attention == "standard" ? AttentionKind::standard : AttentionKind::global_local;
    g.arch = c.composer_arch == "mlp" ? GeneratorArch::mlp : GeneratorArch::transformer;
    g.token_init = c.composer_token_init == "constant" ? TokenInit::constant : TokenInit::projected;
    g.quant = c.quant_enabled;
    g.validate();
    return g;
}

inline TrainSettings make_train_settings(const RunConfig& c) {
    TrainSettings st;
    st.epochs = c.train_epochs;
    st.lr = c.train_lr;
    st.weight_decay = c.train_weight_decay;
    st.batch = c.train_batch;
    st.alpha = c.train_alpha;
    st.pipeline = batch_mode_from_name(c.train_pipeline);
    st.seed = c.seed;
    return st;
}

}  // namespace composer
