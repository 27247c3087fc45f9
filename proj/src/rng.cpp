#include "cpolab/rng.hpp"

namespace cpolab {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

}  // namespace

std::uint64_t fnv1a64(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream) {
    return splitmix64(splitmix64(seed) ^ fnv1a64(stream));
}

std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream, std::uint64_t index) {
    return splitmix64(derive_seed(seed, stream) ^ splitmix64(index + 0x632be59bd9b4e019ULL));
}

void fill_normal(Rng& rng, std::span<double> out) {
    std::normal_distribution<double> normal(0.0, 1.0);
    for (double& v : out) v = normal(rng);
}

double uniform01(Rng& rng) {
    return std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

}  // namespace cpolab
