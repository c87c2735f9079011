#pragma once

#include "fewseg/tensor.hpp"

#include <cstdint>
#include <random>

namespace fewseg {

using Rng = std::mt19937_64;

/// Seed for an independent stream derived from (base, stream) via splitmix64.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

template <typename T>
Tensor<T> normal_tensor(int h, int w, int c, double stddev, Rng& rng) {
  Tensor<T> t(h, w, c);
  std::normal_distribution<double> dist(0.0, stddev);
  for (T& v : t.data) v = static_cast<T>(dist(rng));
  return t;
}

template <typename T>
Tensor<T> uniform_tensor(int h, int w, int c, double lo, double hi, Rng& rng) {
  Tensor<T> t(h, w, c);
  std::uniform_real_distribution<double> dist(lo, hi);
  for (T& v : t.data) v = static_cast<T>(dist(rng));
  return t;
}

}  // namespace fewseg
