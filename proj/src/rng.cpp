#include "aulab/rng.hpp"

namespace aulab {

namespace {

// FNV-1a over bytes, then one splitmix round to spread low bits.
uint64_t fnv1a(const void* data, size_t n, uint64_t h) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

uint64_t finalize(uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

}  // namespace

uint64_t mix_seed(uint64_t seed, const char* tag) {
    uint64_t h = fnv1a(&seed, sizeof(seed), 0xcbf29ce484222325ull);
    size_t n = 0;
    while (tag[n]) ++n;
    return finalize(fnv1a(tag, n, h));
}

uint64_t mix_seed(uint64_t seed, const std::string& tag) {
    uint64_t h = fnv1a(&seed, sizeof(seed), 0xcbf29ce484222325ull);
    return finalize(fnv1a(tag.data(), tag.size(), h));
}

uint64_t mix_seed(uint64_t seed, uint64_t salt) {
    uint64_t h = fnv1a(&seed, sizeof(seed), 0xcbf29ce484222325ull);
    return finalize(fnv1a(&salt, sizeof(salt), h));
}

}  // namespace aulab
