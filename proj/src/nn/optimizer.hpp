#pragma once

#include <unordered_map>

#include "nn/param.hpp"

namespace gencdr {

struct AdamWConfig {
  double lr = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// Decoupled weight decay Adam.  Slots are keyed by parameter name; a frozen
// parameter is skipped entirely (value and moments untouched).  The update is
//   m <- b1 m + (1-b1) g,  v <- b2 v + (1-b2) g^2
//   theta <- theta - lr * (mhat / (sqrt(vhat) + eps) + wd * theta)
// with bias-corrected mhat, vhat.
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg) : cfg_(cfg) {}

  void step(const ParamList& params);
  int64_t steps() const { return t_; }
  const AdamWConfig& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }

 private:
  struct Slot {
    Mat m, v;
  };
  AdamWConfig cfg_;
  int64_t t_ = 0;
  std::unordered_map<std::string, Slot> slots_;
};

}  // namespace gencdr
