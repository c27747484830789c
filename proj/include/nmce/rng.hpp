#pragma once

#include <cstdint>
#include <random>

namespace nmce {

using Rng = std::mt19937_64;

/// splitmix64 finalizer, used to derive independent stream seeds.
constexpr std::uint64_t mix_seed(std::uint64_t x)
{
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Seed for stream `index` of a run seeded with `seed` (per-step, per-batch, ...).
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index)
{
    return mix_seed(mix_seed(seed) ^ (index * 0xd1b54a32d192ed03ULL + 0x2545f4914f6cdd1dULL));
}

inline Rng make_rng(std::uint64_t seed, std::uint64_t index)
{
    return Rng(derive_seed(seed, index));
}

} // namespace nmce
