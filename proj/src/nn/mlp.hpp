#pragma once

#include "nn/layers.hpp"

namespace gencdr {

// Three-linear stack with tanh between: d_in -> hidden -> hidden -> d_out.
// Every linear is LoRA-capable so domain adapters can attach to a frozen
// encoder without touching base weights.
class MlpCoder {
 public:
  struct Cache {
    LoraCache c1, c2, c3;
    Mat h1, h2;  // post-tanh activations
  };

  MlpCoder() = default;
  MlpCoder(const std::string& name, int d_in, int hidden, int d_out, Rng& rng);

  Mat forward(const Mat& x, const LoraActivation* act, Rng* dropout_rng, Cache* cache) const;
  // Accumulates parameter gradients; returns dx when want_dx.
  Mat backward(const Mat& dy, const Cache& cache, const LoraActivation* act, bool want_dx);

  void add_adapter(const std::string& name, int rank, double alpha, double dropout, Rng& rng);
  void collect_base(ParamList& out);
  void collect_adapter(const std::string& name, ParamList& out);

  int d_in() const { return l1.d_in(); }
  int d_out() const { return l3.d_out(); }

  LoraLinear l1, l2, l3;
};

}  // namespace gencdr
