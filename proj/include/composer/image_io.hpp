#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>

#include "composer/tensor.hpp"

namespace composer {

// Plain-text PGM (P2). Pixel values map [-1, 1] onto [0, 255]; out-of-range
// inputs clip.
template <typename T>
void write_pgm(const std::string& path, const T* pixels, std::int64_t width, std::int64_t height) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("pgm: cannot open '" + path + "' for writing");
    out << "P2\n" << width << " " << height << "\n255\n";
    for (std::int64_t y = 0; y < height; ++y) {
        for (std::int64_t x = 0; x < width; ++x) {
            const double v = (static_cast<double>(pixels[y * width + x]) + 1.0) * 0.5 * 255.0;
            const int g = std::min(255, std::max(0, static_cast<int>(std::lround(v))));
            out << (x ? " " : "") << g;
        }
        out << "\n";
    }
    if (!out) throw std::runtime_error("pgm: write failed for '" + path + "'");
}

template <typename T>
void write_pgm(const std::string& path, const Tensor<T>& image, std::int64_t image_size) {
    if (image.numel() != image_size * image_size) {
        throw std::runtime_error("pgm: image has " + std::to_string(image.numel()) + " pixels, expected " +
                                 std::to_string(image_size * image_size));
    }
    write_pgm(path, image.data(), image_size, image_size);
}

// Reads a P2 file back to [-1, 1] floats (comments allowed, as produced by
// common tools).
template <typename T>
Tensor<T> read_pgm(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("pgm: cannot open '" + path + "'");
    auto next_token = [&in, &path]() {
        std::string tok;
        while (in >> tok) {
            if (tok[0] == '#') {
                std::string rest;
                std::getline(in, rest);
                continue;
            }
            return tok;
        }
        throw std::runtime_error("pgm: '" + path + "' ended early");
    };
    if (next_token() != "P2") throw std::runtime_error("pgm: '" + path + "' is not a P2 file");
    const std::int64_t w = std::stoll(next_token());
    const std::int64_t h = std::stoll(next_token());
    const std::int64_t maxval = std::stoll(next_token());
    if (w < 1 || h < 1 || maxval < 1) throw std::runtime_error("pgm: '" + path + "' has an invalid header");
    Tensor<T> out({h, w});
    for (std::int64_t i = 0; i < w * h; ++i) {
        const std::int64_t g = std::stoll(next_token());
        out.data()[i] = static_cast<T>(2.0 * static_cast<double>(g) / static_cast<double>(maxval) - 1.0);
    }
    return out;
}

}  // namespace composer
