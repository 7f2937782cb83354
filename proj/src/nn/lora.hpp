#pragma once

#include <deque>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "nn/param.hpp"

namespace gencdr {

// Low-rank residual attached to a frozen or trainable base weight:
// delta(x) = scale * B (A x), scale = alpha / rank.  A is Xavier-uniform,
// B starts at zero so a fresh adapter is an exact no-op.
struct LoraAdapter {
  Param a;  // rank x d_in
  Param b;  // d_out x rank
  int rank = 0;
  double alpha = 0.0;
  double scale = 0.0;
  double dropout = 0.0;  // applied to A x, training only
};

// Which adapters participate in a forward pass and with what mixing weights.
// `per_pos` (rows = time steps, cols = adapters) overrides `weights` when the
// mixture varies along the sequence (mixture-of-experts gating).
struct LoraActivation {
  std::vector<std::string> names;
  Vec weights;                 // static weight per adapter
  const Mat* per_pos = nullptr;

  static LoraActivation uniform(std::vector<std::string> names_, double w = 1.0) {
    LoraActivation act;
    act.weights = Vec::Constant(static_cast<long>(names_.size()), w);
    act.names = std::move(names_);
    return act;
  }
};

struct LoraCache {
  Mat x;
  std::vector<Mat> ax;     // per adapter: dropout(x A^T), rows = time steps
  std::vector<Mat> mask;   // inverted dropout mask, empty when unused
  std::vector<Mat> delta;  // per adapter: scale * ax B^T, kept only when mix grads are wanted
  bool keep_delta = false;
};

// Linear layer y = W0 x (+ bias) plus any number of named low-rank adapters.
// Adapters are stored in insertion order so parameter traversal, checkpoint
// layout and training are deterministic.
class LoraLinear {
 public:
  LoraLinear() = default;
  LoraLinear(std::string name, int d_out, int d_in, bool with_bias);

  void init_xavier(Rng& rng) { w0.init_xavier(rng); }

  LoraAdapter& add_adapter(const std::string& adapter_name, int rank, double alpha,
                           double dropout, Rng& rng);
  bool has_adapter(const std::string& adapter_name) const;
  LoraAdapter& adapter(const std::string& adapter_name);
  const LoraAdapter& adapter(const std::string& adapter_name) const;

  // x: rows are positions/samples.  When `act` is null no adapter contributes.
  // `dropout_rng` non-null enables adapter dropout (training mode).
  Mat forward(const Mat& x, const LoraActivation* act, Rng* dropout_rng,
              LoraCache* cache) const;

  // Accumulates parameter gradients (skipping frozen params' accumulation is
  // harmless; the optimizer ignores them).  Returns d(loss)/d(x) when
  // `want_dx`.  `dmix`, when non-null, receives d(loss)/d(mixing weight) per
  // position and adapter (requires cache.keep_delta on the forward call).
  Mat backward(const Mat& dy, const LoraCache& cache, const LoraActivation* act,
               bool want_dx, Mat* dmix);

  void collect_base(ParamList& out);
  void collect_adapter(const std::string& adapter_name, ParamList& out);
  void collect_all(ParamList& out);

  int d_in() const { return static_cast<int>(w0.value.cols()); }
  int d_out() const { return static_cast<int>(w0.value.rows()); }
  const std::string& name() const { return name_; }
  const std::deque<std::pair<std::string, LoraAdapter>>& adapters() const { return adapters_; }

  Param w0;
  Param bias;
  bool with_bias = false;

 private:
  std::string name_;
  // Deque so collected Param pointers stay valid when later adapters attach.
  std::deque<std::pair<std::string, LoraAdapter>> adapters_;
};

// Spec-level convenience: every adapter active with weight one, no dropout.
Vec lora_forward(const LoraLinear& layer, const Vec& x);
Vec lora_forward(const LoraLinear& layer, const Vec& x, const LoraActivation& act);

}  // namespace gencdr
