#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace fedtsa {

using Rng = std::mt19937_64;

// splitmix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Derives an independent stream seed from a master seed and a tag path,
// e.g. derive_seed(master, {kLocalUpdateStream, client, round}).
constexpr std::uint64_t derive_seed(std::uint64_t master,
                                    std::initializer_list<std::uint64_t> tags) {
    std::uint64_t h = mix64(master);
    for (std::uint64_t t : tags) h = mix64(h ^ mix64(t + 0x632be59bd9b4e019ULL));
    return h;
}

// Stream tags; keep values stable, they are part of the reproducibility contract.
enum StreamTag : std::uint64_t {
    kDataStream = 1,
    kSplitStream = 2,
    kPartitionStream = 3,
    kProfileStream = 4,
    kInitStream = 5,
    kLocalUpdateStream = 6,
    kDistillStream = 7,
};

} // namespace fedtsa
