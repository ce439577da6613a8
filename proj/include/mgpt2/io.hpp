#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "mgpt2/error.hpp"

namespace mgpt2::io {

inline std::string read_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is.good()) throw FormatError("cannot open file: " + path);
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

inline void write_file(const std::string& path, const std::string& content) {
    const auto parent = std::filesystem::path(path).parent_path();
    if (!parent.empty()) std::filesystem::create_directories(parent);
    std::ofstream os(path, std::ios::binary);
    check_contract(os.good(), "cannot open file for writing: " + path);
    os.write(content.data(), static_cast<std::streamsize>(content.size()));
    check_contract(os.good(), "write failed: " + path);
}

// FNV-1a, used for input content hashes in run manifests.
inline std::uint64_t fnv1a(const std::string& data) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : data) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[i] = digits[v & 0xf];
        v >>= 4;
    }
    return s;
}

// ---------------------------------------------------------------------------
// Base64 (standard alphabet, padded)
// ---------------------------------------------------------------------------

inline std::string base64_encode(const void* data, std::size_t len) {
    static const char* table = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    const auto* p = static_cast<const unsigned char*>(data);
    std::string out;
    out.reserve((len + 2) / 3 * 4);
    std::size_t i = 0;
    for (; i + 3 <= len; i += 3) {
        const std::uint32_t v = (p[i] << 16) | (p[i + 1] << 8) | p[i + 2];
        out.push_back(table[(v >> 18) & 63]);
        out.push_back(table[(v >> 12) & 63]);
        out.push_back(table[(v >> 6) & 63]);
        out.push_back(table[v & 63]);
    }
    if (i + 1 == len) {
        const std::uint32_t v = p[i] << 16;
        out.push_back(table[(v >> 18) & 63]);
        out.push_back(table[(v >> 12) & 63]);
        out.push_back('=');
        out.push_back('=');
    } else if (i + 2 == len) {
        const std::uint32_t v = (p[i] << 16) | (p[i + 1] << 8);
        out.push_back(table[(v >> 18) & 63]);
        out.push_back(table[(v >> 12) & 63]);
        out.push_back(table[(v >> 6) & 63]);
        out.push_back('=');
    }
    return out;
}

inline std::vector<unsigned char> base64_decode(const std::string& text) {
    auto decode_char = [](char c) -> int {
        if (c >= 'A' && c <= 'Z') return c - 'A';
        if (c >= 'a' && c <= 'z') return c - 'a' + 26;
        if (c >= '0' && c <= '9') return c - '0' + 52;
        if (c == '+') return 62;
        if (c == '/') return 63;
        if (c == '=') return -1;
        throw FormatError("invalid base64 character");
    };
    if (text.size() % 4 != 0) throw FormatError("base64 length must be a multiple of 4");
    std::vector<unsigned char> out;
    out.reserve(text.size() / 4 * 3);
    for (std::size_t i = 0; i < text.size(); i += 4) {
        int vals[4];
        int pad = 0;
        for (int j = 0; j < 4; ++j) {
            vals[j] = decode_char(text[i + j]);
            if (vals[j] < 0) {
                vals[j] = 0;
                ++pad;
            }
        }
        const std::uint32_t v = (vals[0] << 18) | (vals[1] << 12) | (vals[2] << 6) | vals[3];
        out.push_back(static_cast<unsigned char>((v >> 16) & 0xff));
        if (pad < 2) out.push_back(static_cast<unsigned char>((v >> 8) & 0xff));
        if (pad < 1) out.push_back(static_cast<unsigned char>(v & 0xff));
    }
    return out;
}

}  // namespace mgpt2::io
