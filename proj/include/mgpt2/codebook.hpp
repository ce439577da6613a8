#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "mgpt2/error.hpp"
#include "mgpt2/rng.hpp"

namespace mgpt2::vq {

// Quantization targets plus the EMA statistics that maintain them. Entries
// move by EMA cluster means, not by gradient updates; usage counters feed the
// dead-code reset sweep.
template <class S>
struct Codebook {
    int n = 0;  // entry count
    int d = 0;  // entry width
    std::vector<S> entries;                 // N x D
    std::vector<double> ema_cluster_size;   // N
    std::vector<double> ema_cluster_sum;    // N x D
    std::vector<std::int64_t> usage_count;  // N, since the last reset sweep
    double decay = 0.99;
    double epsilon = 1e-5;

    static Codebook random_init(int n, int d, Rng& rng, double scale = 1.0) {
        check_config(n >= 1 && d >= 1, "codebook dimensions must be positive");
        Codebook cb;
        cb.n = n;
        cb.d = d;
        cb.entries.resize(static_cast<std::size_t>(n) * d);
        for (auto& v : cb.entries) v = static_cast<S>(rng.gaussian(0.0, scale));
        cb.ema_cluster_size.assign(n, 0.0);
        cb.ema_cluster_sum.assign(static_cast<std::size_t>(n) * d, 0.0);
        cb.usage_count.assign(n, 0);
        return cb;
    }

    const S* entry(int k) const { return entries.data() + static_cast<std::size_t>(k) * d; }
    S* entry(int k) { return entries.data() + static_cast<std::size_t>(k) * d; }
};

// Exhaustive nearest-neighbor assignment, ties resolved toward the lowest
// index. Distances accumulate in double so the argmin is stable regardless of
// vectorization.
template <class S>
std::vector<int> quantize_indices(const Codebook<S>& cb, const S* latents, std::int64_t count) {
    check_contract(count > 0, "cannot quantize an empty latent sequence");
    std::vector<int> ids(count);
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < count; ++i) {
        const S* z = latents + i * cb.d;
        double best = std::numeric_limits<double>::infinity();
        int best_k = 0;
        for (int k = 0; k < cb.n; ++k) {
            const S* e = cb.entry(k);
            double dist = 0;
#pragma omp simd reduction(+ : dist)
            for (int j = 0; j < cb.d; ++j) {
                const double diff = static_cast<double>(z[j]) - static_cast<double>(e[j]);
                dist += diff * diff;
            }
            if (dist < best) {
                best = dist;
                best_k = k;
            }
        }
        ids[i] = best_k;
    }
    return ids;
}

// One EMA step from a batch of assignments:
//   size_k <- decay*size_k + (1-decay)*count_k
//   sum_k  <- decay*sum_k  + (1-decay)*sum of latents assigned to k
//   entry_k <- sum_k / max(size_k, eps)   for every k touched at least once
// Codes with no statistics yet keep their initialization; codes with stale
// statistics hold position (the ratio is invariant under shared decay) until
// a reset re-seeds them. Also bumps usage counters.
template <class S>
void ema_update(Codebook<S>& cb, const S* latents, const std::vector<int>& indices) {
    const std::int64_t count = static_cast<std::int64_t>(indices.size());
    std::vector<double> batch_count(cb.n, 0.0);
    std::vector<double> batch_sum(static_cast<std::size_t>(cb.n) * cb.d, 0.0);
    for (std::int64_t i = 0; i < count; ++i) {
        const int k = indices[i];
        check_contract(k >= 0 && k < cb.n, "assignment index out of codebook range");
        batch_count[k] += 1.0;
        const S* z = latents + i * cb.d;
        double* s = batch_sum.data() + static_cast<std::size_t>(k) * cb.d;
        for (int j = 0; j < cb.d; ++j) s[j] += static_cast<double>(z[j]);
        ++cb.usage_count[k];
    }
    for (int k = 0; k < cb.n; ++k) {
        cb.ema_cluster_size[k] =
            cb.decay * cb.ema_cluster_size[k] + (1.0 - cb.decay) * batch_count[k];
        double* s = cb.ema_cluster_sum.data() + static_cast<std::size_t>(k) * cb.d;
        const double* bs = batch_sum.data() + static_cast<std::size_t>(k) * cb.d;
        for (int j = 0; j < cb.d; ++j) s[j] = cb.decay * s[j] + (1.0 - cb.decay) * bs[j];
        if (cb.ema_cluster_size[k] > 0.0) {
            const double denom = std::max(cb.ema_cluster_size[k], cb.epsilon);
            S* e = cb.entry(k);
            for (int j = 0; j < cb.d; ++j) e[j] = static_cast<S>(s[j] / denom);
        }
    }
}

// Re-seeds every code whose usage since the last sweep fell below the
// threshold with a pool latent plus a little jitter, then clears counters.
// Returns the number of codes reset.
template <class S>
int reset_dead_codes(Codebook<S>& cb, const std::vector<S>& pool, Rng& rng,
                     std::int64_t usage_threshold = 1, double jitter = 0.01) {
    check_contract(!pool.empty() && pool.size() % cb.d == 0,
                   "reset pool must hold whole latents");
    const std::int64_t pool_count = static_cast<std::int64_t>(pool.size()) / cb.d;
    int resets = 0;
    for (int k = 0; k < cb.n; ++k) {
        if (cb.usage_count[k] >= usage_threshold) continue;
        const S* src = pool.data() + rng.uniform_int(pool_count) * cb.d;
        S* e = cb.entry(k);
        for (int j = 0; j < cb.d; ++j)
            e[j] = static_cast<S>(static_cast<double>(src[j]) + jitter * rng.gaussian());
        // Fresh statistics so the next assignment snaps cleanly.
        cb.ema_cluster_size[k] = 0.0;
        std::fill_n(cb.ema_cluster_sum.begin() + static_cast<std::size_t>(k) * cb.d, cb.d, 0.0);
        ++resets;
    }
    std::fill(cb.usage_count.begin(), cb.usage_count.end(), 0);
    return resets;
}

// ---------------------------------------------------------------------------
// Serialization. A codebook file is "MGPT2CBK" + one section; the part-aware
// pair file is "MGPT2PAB" + body section + hand section.
// ---------------------------------------------------------------------------

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

template <class S>
void write_codebook_section(std::ostream& os, const Codebook<S>& cb) {
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(cb.n));
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(cb.d));
    write_pod<std::uint8_t>(os, sizeof(S) == 4 ? 0 : 1);
    write_pod<double>(os, cb.decay);
    write_pod<double>(os, cb.epsilon);
    os.write(reinterpret_cast<const char*>(cb.entries.data()),
             static_cast<std::streamsize>(cb.entries.size() * sizeof(S)));
    os.write(reinterpret_cast<const char*>(cb.ema_cluster_size.data()),
             static_cast<std::streamsize>(cb.ema_cluster_size.size() * sizeof(double)));
    os.write(reinterpret_cast<const char*>(cb.ema_cluster_sum.data()),
             static_cast<std::streamsize>(cb.ema_cluster_sum.size() * sizeof(double)));
    os.write(reinterpret_cast<const char*>(cb.usage_count.data()),
             static_cast<std::streamsize>(cb.usage_count.size() * sizeof(std::int64_t)));
}

template <class S>
Codebook<S> read_codebook_section(std::istream& is, const std::string& path) {
    Codebook<S> cb;
    cb.n = static_cast<int>(read_pod<std::uint32_t>(is));
    cb.d = static_cast<int>(read_pod<std::uint32_t>(is));
    const auto dtype = read_pod<std::uint8_t>(is);
    if (dtype != (sizeof(S) == 4 ? 0 : 1))
        throw FormatError("codebook dtype does not match build in " + path);
    cb.decay = read_pod<double>(is);
    cb.epsilon = read_pod<double>(is);
    cb.entries.resize(static_cast<std::size_t>(cb.n) * cb.d);
    cb.ema_cluster_size.resize(cb.n);
    cb.ema_cluster_sum.resize(static_cast<std::size_t>(cb.n) * cb.d);
    cb.usage_count.resize(cb.n);
    is.read(reinterpret_cast<char*>(cb.entries.data()),
            static_cast<std::streamsize>(cb.entries.size() * sizeof(S)));
    is.read(reinterpret_cast<char*>(cb.ema_cluster_size.data()),
            static_cast<std::streamsize>(cb.ema_cluster_size.size() * sizeof(double)));
    is.read(reinterpret_cast<char*>(cb.ema_cluster_sum.data()),
            static_cast<std::streamsize>(cb.ema_cluster_sum.size() * sizeof(double)));
    is.read(reinterpret_cast<char*>(cb.usage_count.data()),
            static_cast<std::streamsize>(cb.usage_count.size() * sizeof(std::int64_t)));
    if (!is.good()) throw FormatError("truncated codebook file: " + path);
    return cb;
}

}  // namespace detail

inline constexpr char kCodebookMagic[] = "MGPT2CBK";
inline constexpr char kPartPairMagic[] = "MGPT2PAB";

template <class S>
void save_codebook(const std::string& path, const Codebook<S>& cb) {
    std::ofstream os(path, std::ios::binary);
    check_contract(os.good(), "cannot open codebook file for writing: " + path);
    os.write(kCodebookMagic, 8);
    detail::write_codebook_section(os, cb);
    check_contract(os.good(), "codebook write failed: " + path);
}

template <class S>
Codebook<S> load_codebook(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is.good()) throw FormatError("cannot open codebook file: " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is.good() || std::memcmp(magic, kCodebookMagic, 8) != 0)
        throw FormatError("bad codebook magic in " + path);
    return detail::read_codebook_section<S>(is, path);
}

template <class S>
void save_codebook_pair(const std::string& path, const Codebook<S>& body,
                        const Codebook<S>& hand) {
    std::ofstream os(path, std::ios::binary);
    check_contract(os.good(), "cannot open codebook pair file for writing: " + path);
    os.write(kPartPairMagic, 8);
    detail::write_codebook_section(os, body);
    detail::write_codebook_section(os, hand);
    check_contract(os.good(), "codebook pair write failed: " + path);
}

template <class S>
std::pair<Codebook<S>, Codebook<S>> load_codebook_pair(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is.good()) throw FormatError("cannot open codebook pair file: " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is.good() || std::memcmp(magic, kPartPairMagic, 8) != 0)
        throw FormatError("bad codebook pair magic in " + path);
    auto body = detail::read_codebook_section<S>(is, path);
    auto hand = detail::read_codebook_section<S>(is, path);
    return {std::move(body), std::move(hand)};
}

}  // namespace mgpt2::vq
