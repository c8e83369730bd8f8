#pragma once

#include <cstdint>

namespace itrans {

// Stateless counter-based generator: every draw is a pure function of its
// key, so Monte Carlo results do not depend on scheduling or thread count.
inline std::uint64_t mix64(std::uint64_t z)
{
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t hash_key(std::uint64_t seed, std::uint64_t stream, std::uint64_t index,
                              std::uint64_t dim)
{
  std::uint64_t h = mix64(seed);
  h = mix64(h ^ stream);
  h = mix64(h ^ index);
  return mix64(h ^ dim);
}

// Uniform in [0,1) with 53 random bits.
inline double uniform01(std::uint64_t seed, std::uint64_t stream, std::uint64_t index,
                        std::uint64_t dim)
{
  return (hash_key(seed, stream, index, dim) >> 11) * 0x1.0p-53;
}

// Pseudo-random permutation of [0, n) evaluated pointwise (Kensler's
// cycle-walking hash permutation). Used for Latin hypercube stratification.
inline std::uint32_t permute_index(std::uint32_t i, std::uint32_t n, std::uint32_t key)
{
  if (n <= 1) return 0;
  std::uint32_t w = n - 1;
  w |= w >> 1;
  w |= w >> 2;
  w |= w >> 4;
  w |= w >> 8;
  w |= w >> 16;
  do {
    i ^= key;
    i *= 0xe170893d;
    i ^= key >> 16;
    i ^= (i & w) >> 4;
    i ^= key >> 8;
    i *= 0x0929eb3f;
    i ^= key >> 23;
    i ^= (i & w) >> 1;
    i *= 1 | key >> 27;
    i *= 0x6935fa69;
    i ^= (i & w) >> 11;
    i *= 0x74dcb303;
    i ^= (i & w) >> 2;
    i *= 0x9e501cc3;
    i ^= (i & w) >> 2;
    i *= 0xc860a3df;
    i &= w;
    i ^= i >> 5;
  } while (i >= n);
  return (i + key) % n;
}

// Latin hypercube coordinate: sample i of n in dimension dim.
inline double stratified01(std::uint64_t seed, std::uint64_t stream, std::uint32_t i,
                           std::uint32_t n, std::uint32_t dim)
{
  auto key = static_cast<std::uint32_t>(hash_key(seed, stream, 0xffffffffULL, dim));
  std::uint32_t cell = permute_index(i, n, key);
  double jitter = uniform01(seed, stream, i, dim);
  return (cell + jitter) / n;
}

} // namespace itrans
