#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "composer/tensor.hpp"
#include "composer/util.hpp"

namespace composer {

// Checkpoint container, little-endian throughout:
//   "CMPZ" | version u32 | tensors... | crc32 u32
// one tensor = name_len u32 | name | dtype u8 (0=f32, 1=f64) | ndim u8 |
//              dims u64 each | raw values
// The CRC covers every byte before it, so an empty set is 12 bytes.
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& b, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_u64(std::vector<std::uint8_t>& b, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

struct ByteReader {
    const std::vector<std::uint8_t>& buf;
    std::size_t at = 0;

    void need(std::size_t n, const char* what) const {
        if (at + n > buf.size()) {
            throw std::runtime_error("checkpoint: truncated while reading " + std::string(what) +
                                     " at byte " + std::to_string(at) + " (file has " +
                                     std::to_string(buf.size()) + " bytes)");
        }
    }
    std::uint8_t u8(const char* what) {
        need(1, what);
        return buf[at++];
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf[at++]) << (8 * i);
        return v;
    }
    std::uint64_t u64(const char* what) {
        need(8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[at++]) << (8 * i);
        return v;
    }
};

template <typename T>
constexpr std::uint8_t dtype_code() {
    static_assert(sizeof(T) == 4 || sizeof(T) == 8, "checkpoint supports f32 and f64 tensors");
    return sizeof(T) == 4 ? 0 : 1;
}

}  // namespace detail

template <typename T>
std::vector<std::uint8_t> encode_checkpoint(const std::vector<std::pair<std::string, Tensor<T>>>& items) {
    std::vector<std::uint8_t> buf;
    buf.push_back('C');
    buf.push_back('M');
    buf.push_back('P');
    buf.push_back('Z');
    detail::put_u32(buf, kCheckpointVersion);
    for (const auto& [name, t] : items) {
        detail::put_u32(buf, static_cast<std::uint32_t>(name.size()));
        buf.insert(buf.end(), name.begin(), name.end());
        buf.push_back(detail::dtype_code<T>());
        buf.push_back(static_cast<std::uint8_t>(t.ndim()));
        for (std::int64_t d = 0; d < t.ndim(); ++d) detail::put_u64(buf, static_cast<std::uint64_t>(t.dim(d)));
        for (std::int64_t i = 0; i < t.numel(); ++i) {
            if constexpr (sizeof(T) == 4) {
                detail::put_u32(buf, std::bit_cast<std::uint32_t>(t.data()[i]));
            } else {
                detail::put_u64(buf, std::bit_cast<std::uint64_t>(t.data()[i]));
            }
        }
    }
    detail::put_u32(buf, crc32(buf.data(), buf.size()));
    return buf;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> decode_checkpoint(const std::vector<std::uint8_t>& buf) {
    if (buf.size() < 12) {
        throw std::runtime_error("checkpoint: file too small (" + std::to_string(buf.size()) +
                                 " bytes, minimum is 12)");
    }
    if (buf[0] != 'C' || buf[1] != 'M' || buf[2] != 'P' || buf[3] != 'Z') {
        throw std::runtime_error("checkpoint: bad magic (expected CMPZ)");
    }
    std::uint32_t stored_crc = 0;
    for (int i = 0; i < 4; ++i) stored_crc |= static_cast<std::uint32_t>(buf[buf.size() - 4 + i]) << (8 * i);
    const std::uint32_t actual_crc = crc32(buf.data(), buf.size() - 4);
    if (stored_crc != actual_crc) {
        char msg[128];
        std::snprintf(msg, sizeof(msg), "checkpoint: crc mismatch at byte %zu (stored %08x, computed %08x)",
                      buf.size() - 4, stored_crc, actual_crc);
        throw std::runtime_error(msg);
    }

    detail::ByteReader r{buf, 4};
    const std::uint32_t version = r.u32("version");
    if (version != kCheckpointVersion) {
        throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
    }
    std::vector<std::pair<std::string, Tensor<T>>> items;
    const std::size_t payload_end = buf.size() - 4;
    while (r.at < payload_end) {
        const std::uint32_t name_len = r.u32("name length");
        if (r.at + name_len > payload_end) {
            throw std::runtime_error("checkpoint: name length " + std::to_string(name_len) +
                                     " overruns payload at byte " + std::to_string(r.at));
        }
        std::string name(buf.begin() + static_cast<std::ptrdiff_t>(r.at),
                         buf.begin() + static_cast<std::ptrdiff_t>(r.at + name_len));
        r.at += name_len;
        const std::uint8_t dtype = r.u8("dtype");
        if (dtype != detail::dtype_code<T>()) {
            throw std::runtime_error("checkpoint: tensor '" + name + "' has dtype code " +
                                     std::to_string(dtype) + ", expected " +
                                     std::to_string(detail::dtype_code<T>()));
        }
        const std::uint8_t ndim = r.u8("ndim");
        Shape shape;
        std::int64_t numel = 1;
        for (std::uint8_t d = 0; d < ndim; ++d) {
            const std::uint64_t dim = r.u64("dimension");
            if (dim == 0 || dim > (1ULL << 32)) {
                throw std::runtime_error("checkpoint: tensor '" + name + "' has invalid dimension " +
                                         std::to_string(dim));
            }
            shape.push_back(static_cast<std::int64_t>(dim));
            numel *= static_cast<std::int64_t>(dim);
        }
        Tensor<T> t(shape);
        for (std::int64_t i = 0; i < numel; ++i) {
            if constexpr (sizeof(T) == 4) {
                t.data()[i] = std::bit_cast<T>(r.u32("values"));
            } else {
                t.data()[i] = std::bit_cast<T>(r.u64("values"));
            }
        }
        items.emplace_back(std::move(name), std::move(t));
    }
    return items;
}

template <typename T>
void save_checkpoint(const std::string& path, const std::vector<std::pair<std::string, Tensor<T>>>& items) {
    const std::vector<std::uint8_t> buf = encode_checkpoint(items);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!out) throw std::runtime_error("checkpoint: write failed for '" + path + "'");
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
    std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_checkpoint<T>(buf);
}

// Copies loaded values into live parameters matched by name; every name and
// shape must line up exactly.
template <typename T>
void assign_named(std::vector<std::pair<std::string, Tensor<T>>>& params,
                  const std::vector<std::pair<std::string, Tensor<T>>>& loaded) {
    if (params.size() != loaded.size()) {
        throw std::runtime_error("checkpoint: expected " + std::to_string(params.size()) + " tensors, file has " +
                                 std::to_string(loaded.size()));
    }
    for (auto& [name, p] : params) {
        const Tensor<T>* src = nullptr;
        for (const auto& [lname, lt] : loaded) {
            if (lname == name) {
                src = &lt;
                break;
            }
        }
        if (!src) throw std::runtime_error("checkpoint: missing tensor '" + name + "'");
        if (src->shape() != p.shape()) {
            throw std::runtime_error("checkpoint: tensor '" + name + "' has shape " + shape_str(src->shape()) +
                                     ", expected " + shape_str(p.shape()));
        }
        for (std::int64_t i = 0; i < p.numel(); ++i) p.data()[i] = src->data()[i];
    }
}

// Sidecar carrying the exact resolved configuration a checkpoint was
// produced under.
inline void write_sidecar(const std::string& ckpt_path, const std::string& config_text) {
    const std::string path = ckpt_path + ".config";
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
    out << config_text;
    if (!out) throw std::runtime_error("checkpoint: write failed for '" + path + "'");
}

inline std::string read_sidecar(const std::string& ckpt_path) {
    const std::string path = ckpt_path + ".config";
    std::ifstream in(path);
    if (!in) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

}  // namespace composer
