#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string_view>

namespace cpolab {

using Rng = std::mt19937_64;

/// Derives an independent 64-bit seed for a named purpose ("data", "init",
/// "train", "sample", ...) from a single run seed.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream);

/// Same, with an additional integer index (per-sample, per-step streams).
std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream, std::uint64_t index);

inline Rng make_rng(std::uint64_t seed, std::string_view stream) {
    return Rng{derive_seed(seed, stream)};
}

void fill_normal(Rng& rng, std::span<double> out);
double uniform01(Rng& rng);

/// 64-bit FNV-1a; used for content hashes in file headers.
std::uint64_t fnv1a64(std::string_view bytes);

}  // namespace cpolab
