#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "blockgrad/errors.hpp"
#include "blockgrad/tensor.hpp"

namespace blockgrad {

// Binary container shared by model checkpoints ("BGCKPT1\n") and dataset
// dumps ("BGDATA1\n"). Per record: name length (u32 LE), name bytes,
// rank (u32 LE), dims (u32 LE each), raw little-endian f32 payload.
inline constexpr char kCheckpointMagic[] = "BGCKPT1\n";
inline constexpr char kDatasetMagic[] = "BGDATA1\n";

struct NamedArray {
    std::string name;
    Shape shape;
    std::vector<float> values;
};

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw ParseError("truncated container");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void write_f32(std::ostream& os, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    write_u32(os, bits);
}

inline float read_f32(std::istream& is) {
    const std::uint32_t bits = read_u32(is);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

}  // namespace detail

inline void save_container(const std::string& path, const char* magic,
                           const std::vector<NamedArray>& arrays) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ParseError("cannot open " + path + " for writing");
    os.write(magic, 8);
    for (const NamedArray& a : arrays) {
        detail::write_u32(os, static_cast<std::uint32_t>(a.name.size()));
        os.write(a.name.data(), static_cast<std::streamsize>(a.name.size()));
        detail::write_u32(os, static_cast<std::uint32_t>(a.shape.size()));
        for (int d : a.shape) detail::write_u32(os, static_cast<std::uint32_t>(d));
        for (float v : a.values) detail::write_f32(os, v);
    }
}

inline std::vector<NamedArray> load_container(const std::string& path, const char* magic) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ParseError("cannot open " + path);
    char got[8];
    is.read(got, 8);
    if (!is || std::memcmp(got, magic, 8) != 0) {
        throw ParseError(path + ": bad magic, expected " + std::string(magic, 7));
    }
    std::vector<NamedArray> out;
    while (true) {
        is.peek();
        if (is.eof()) break;
        NamedArray a;
        const std::uint32_t name_len = detail::read_u32(is);
        a.name.resize(name_len);
        is.read(a.name.data(), name_len);
        const std::uint32_t rank = detail::read_u32(is);
        std::size_t numel = 1;
        for (std::uint32_t i = 0; i < rank; ++i) {
            const std::uint32_t d = detail::read_u32(is);
            a.shape.push_back(static_cast<int>(d));
            numel *= d;
        }
        a.values.resize(numel);
        for (std::size_t i = 0; i < numel; ++i) a.values[i] = detail::read_f32(is);
        if (!is) throw ParseError(path + ": truncated record for " + a.name);
        out.push_back(std::move(a));
    }
    return out;
}

template <typename S>
void save_checkpoint(const std::string& path, const LayerRegistry<S>& registry) {
    std::vector<NamedArray> arrays;
    arrays.reserve(registry.size());
    for (const auto& e : registry) {
        NamedArray a;
        a.name = e.name;
        a.shape = e.tensor.shape();
        a.values.reserve(e.tensor.size());
        for (S v : e.tensor.data()) a.values.push_back(static_cast<float>(v));
        arrays.push_back(std::move(a));
    }
    save_container(path, kCheckpointMagic, arrays);
}

/// Loads a checkpoint into an existing registry; names, order and shapes
/// must match the registry exactly.
template <typename S>
void load_checkpoint(const std::string& path, LayerRegistry<S>& registry) {
    const std::vector<NamedArray> arrays = load_container(path, kCheckpointMagic);
    if (arrays.size() != registry.size()) {
        throw StateError(path + ": checkpoint has " + std::to_string(arrays.size()) +
                         " layers, registry has " + std::to_string(registry.size()));
    }
    for (std::size_t i = 0; i < arrays.size(); ++i) {
        const NamedArray& a = arrays[i];
        auto& e = registry[i];
        if (a.name != e.name || a.shape != e.tensor.shape()) {
            throw StateError(path + ": layer " + a.name + " does not match registry entry " +
                             e.name);
        }
        auto dst = e.tensor.data();
        for (std::size_t j = 0; j < a.values.size(); ++j) dst[j] = static_cast<S>(a.values[j]);
    }
}

}  // namespace blockgrad
