#pragma once

#include <qsine/errors.hpp>
#include <qsine/nn/tensor.hpp>

#include <bit>
#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

namespace qsine::nn {

// Checkpoint layout (all integers u32 little-endian):
//   "SGNT" | version | entry count |
//   per entry: name length, name bytes, rank, dims... |
//   tensor data as float32 little-endian, entries in manifest order.

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) {
        throw DataError("checkpoint: truncated file");
    }
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

} // namespace detail

template <typename T>
void write_checkpoint(const std::string& path, const std::vector<std::pair<std::string, Tensor<T>*>>& tensors) {
    std::ofstream os(path, std::ios::binary);
    if (!os) {
        throw DataError("checkpoint: cannot open " + path + " for writing");
    }
    os.write("SGNT", 4);
    detail::put_u32(os, kCheckpointVersion);
    detail::put_u32(os, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        detail::put_u32(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::put_u32(os, static_cast<std::uint32_t>(t->rank()));
        for (auto d : t->shape) {
            detail::put_u32(os, static_cast<std::uint32_t>(d));
        }
    }
    for (const auto& [name, t] : tensors) {
        for (const T v : t->data) {
            detail::put_u32(os, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
        }
    }
    if (!os) {
        throw DataError("checkpoint: write failed for " + path);
    }
}

/// Loads into pre-built tensors; the stored manifest must match names and shapes.
template <typename T>
void read_checkpoint(const std::string& path, const std::vector<std::pair<std::string, Tensor<T>*>>& tensors) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw DataError("checkpoint: cannot open " + path);
    }
    char magic[4];
    if (!is.read(magic, 4) || std::string(magic, 4) != "SGNT") {
        throw DataError("checkpoint: bad magic in " + path);
    }
    if (detail::get_u32(is) != kCheckpointVersion) {
        throw DataError("checkpoint: unsupported version in " + path);
    }
    const std::uint32_t count = detail::get_u32(is);
    if (count != tensors.size()) {
        throw DataError("checkpoint: " + path + " has " + std::to_string(count) + " tensors, model expects " +
                        std::to_string(tensors.size()));
    }
    for (const auto& [name, t] : tensors) {
        const std::uint32_t len = detail::get_u32(is);
        std::string stored(len, '\0');
        if (!is.read(stored.data(), len)) {
            throw DataError("checkpoint: truncated manifest");
        }
        const std::uint32_t rank = detail::get_u32(is);
        std::vector<std::size_t> shape(rank);
        for (auto& d : shape) {
            d = detail::get_u32(is);
        }
        if (stored != name || shape != t->shape) {
            throw DataError("checkpoint: manifest mismatch at " + name + " (file has " + stored + " " +
                            shape_string(shape) + ")");
        }
    }
    for (const auto& [name, t] : tensors) {
        for (auto& v : t->data) {
            v = static_cast<T>(std::bit_cast<float>(detail::get_u32(is)));
        }
    }
}

} // namespace qsine::nn
