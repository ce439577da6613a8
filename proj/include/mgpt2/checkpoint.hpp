#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "mgpt2/nn.hpp"

namespace mgpt2::nn {

// Sectioned binary container for named parameter blocks.
//
//   magic "MGPT2CKPT" | version u32 | block count u32
//   per block: name (u32 length + bytes) | dtype u8 (0 = f32, 1 = f64)
//              | ndim u32 | dims i64[ndim] | values (little endian)
//
// Base weights and adapters live in separate files built from the same
// container; the split is by which parameters the caller passes in.

inline constexpr char kCheckpointMagic[] = "MGPT2CKPT";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TensorBlob {
    Shape shape;
    std::uint8_t dtype = 0;  // 0 = f32, 1 = f64
    std::vector<double> data;
};

namespace detail {

template <class T>
void write_pod(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    return v;
}

}  // namespace detail

template <class S>
void save_checkpoint(const std::string& path, const std::vector<Parameter<S>*>& params) {
    std::ofstream os(path, std::ios::binary);
    check_contract(os.good(), "cannot open checkpoint for writing: " + path);
    os.write(kCheckpointMagic, 9);
    detail::write_pod<std::uint32_t>(os, kCheckpointVersion);
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
    for (const auto* p : params) {
        detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(p->name.size()));
        os.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
        detail::write_pod<std::uint8_t>(os, sizeof(S) == 4 ? 0 : 1);
        const auto& shape = p->value.shape();
        detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(shape.size()));
        for (int d : shape) detail::write_pod<std::int64_t>(os, d);
        os.write(reinterpret_cast<const char*>(p->value.values().data()),
                 static_cast<std::streamsize>(p->value.values().size() * sizeof(S)));
    }
    check_contract(os.good(), "checkpoint write failed: " + path);
}

inline std::map<std::string, TensorBlob> load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is.good()) throw FormatError("cannot open checkpoint: " + path);
    char magic[9];
    is.read(magic, 9);
    if (!is.good() || std::memcmp(magic, kCheckpointMagic, 9) != 0)
        throw FormatError("bad checkpoint magic in " + path);
    const auto version = detail::read_pod<std::uint32_t>(is);
    if (version != kCheckpointVersion)
        throw FormatError("unsupported checkpoint version " + std::to_string(version));
    const auto count = detail::read_pod<std::uint32_t>(is);
    std::map<std::string, TensorBlob> blocks;
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name_len = detail::read_pod<std::uint32_t>(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        TensorBlob blob;
        blob.dtype = detail::read_pod<std::uint8_t>(is);
        const auto ndim = detail::read_pod<std::uint32_t>(is);
        std::int64_t n = 1;
        for (std::uint32_t d = 0; d < ndim; ++d) {
            const auto dim = detail::read_pod<std::int64_t>(is);
            blob.shape.push_back(static_cast<int>(dim));
            n *= dim;
        }
        blob.data.resize(static_cast<std::size_t>(n));
        if (blob.dtype == 0) {
            std::vector<float> tmp(static_cast<std::size_t>(n));
            is.read(reinterpret_cast<char*>(tmp.data()),
                    static_cast<std::streamsize>(n * sizeof(float)));
            std::copy(tmp.begin(), tmp.end(), blob.data.begin());
        } else {
            is.read(reinterpret_cast<char*>(blob.data.data()),
                    static_cast<std::streamsize>(n * sizeof(double)));
        }
        if (!is.good()) throw FormatError("truncated checkpoint: " + path);
        blocks.emplace(std::move(name), std::move(blob));
    }
    return blocks;
}

// Copies matching blocks into the given parameters; every parameter must be
// present with an identical shape.
template <class S>
void restore_parameters(const std::map<std::string, TensorBlob>& blocks,
                        const std::vector<Parameter<S>*>& params) {
    for (auto* p : params) {
        auto it = blocks.find(p->name);
        if (it == blocks.end()) throw FormatError("checkpoint is missing block '" + p->name + "'");
        check_contract(it->second.shape == p->value.shape(),
                       "checkpoint shape mismatch for '" + p->name + "'");
        auto& vals = p->value.values();
        for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = static_cast<S>(it->second.data[i]);
    }
}

}  // namespace mgpt2::nn
