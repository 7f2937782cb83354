#pragma once

#include <string>
#include <vector>

#include "nn/common.hpp"
#include "nn/rng.hpp"

namespace gencdr {

// A named trainable tensor with its gradient accumulator.  Frozen parameters
// keep their values but are skipped by the optimizer; an fnv checksum of the
// value buffer lets freeze contracts be verified after later training phases.
struct Param {
  std::string name;
  Mat value;
  Mat grad;
  bool frozen = false;

  Param() = default;
  Param(std::string n, int rows, int cols) : name(std::move(n)) {
    value = Mat::Zero(rows, cols);
    grad = Mat::Zero(rows, cols);
  }

  void zero_grad() { grad.setZero(); }

  void freeze() { frozen = true; }

  uint64_t checksum() const { return hash_matrix(value); }

  // Xavier-uniform initialization: U(-b, b) with b = sqrt(6 / (fan_in + fan_out)).
  void init_xavier(Rng& rng) {
    double b = std::sqrt(6.0 / static_cast<double>(value.rows() + value.cols()));
    for (int i = 0; i < value.rows(); ++i)
      for (int j = 0; j < value.cols(); ++j) value(i, j) = rng.uniform(-b, b);
  }

  void init_gaussian(Rng& rng, double stddev) {
    for (int i = 0; i < value.rows(); ++i)
      for (int j = 0; j < value.cols(); ++j) value(i, j) = stddev * rng.gaussian();
  }
};

using ParamList = std::vector<Param*>;

inline void zero_grads(const ParamList& params) {
  for (Param* p : params) p->zero_grad();
}

inline size_t total_size(const ParamList& params) {
  size_t n = 0;
  for (const Param* p : params) n += static_cast<size_t>(p->value.size());
  return n;
}

}  // namespace gencdr
