#pragma once

#include <Eigen/Dense>
#include <bit>
#include <cstdarg>
#include <cstdint>
#include <cstdio>
#include <string>
#include <string_view>

#include "nn/error.hpp"

namespace gencdr {

// All numerics run in 64-bit floats.  Row-major storage so that a row is a
// contiguous sample / time step, matching the (batch x feature) and
// (time x feature) conventions used throughout.
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;

static_assert(std::endian::native == std::endian::little,
              "artifact serialization assumes a little-endian host");

inline bool all_finite(const Mat& m) { return m.allFinite(); }
inline bool all_finite(const Vec& v) { return v.allFinite(); }

// FNV-1a, used for config hashes and parameter checksums.
inline uint64_t fnv1a64(const void* data, size_t len, uint64_t seed = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  uint64_t h = seed;
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t fnv1a64(std::string_view s, uint64_t seed = 0xcbf29ce484222325ull) {
  return fnv1a64(s.data(), s.size(), seed);
}

inline uint64_t hash_matrix(const Mat& m, uint64_t seed = 0xcbf29ce484222325ull) {
  uint64_t h = seed;
  int64_t rows = m.rows(), cols = m.cols();
  h = fnv1a64(&rows, sizeof rows, h);
  h = fnv1a64(&cols, sizeof cols, h);
  return fnv1a64(m.data(), sizeof(double) * static_cast<size_t>(m.size()), h);
}

// printf-style convenience used for diagnostics and report formatting.
inline std::string strf(const char* fmt, ...) {
  va_list args;
  va_start(args, fmt);
  va_list copy;
  va_copy(copy, args);
  int n = std::vsnprintf(nullptr, 0, fmt, copy);
  va_end(copy);
  std::string out(n > 0 ? static_cast<size_t>(n) : 0, '\0');
  if (n > 0) std::vsnprintf(out.data(), out.size() + 1, fmt, args);
  va_end(args);
  return out;
}

}  // namespace gencdr
