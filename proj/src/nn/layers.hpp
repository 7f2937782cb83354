#pragma once

#include <span>
#include <string>
#include <vector>

#include "nn/lora.hpp"
#include "nn/ops.hpp"

namespace gencdr {

// --- elementwise tanh ------------------------------------------------------

inline Mat tanh_forward(const Mat& x) { return x.array().tanh(); }

// dy through tanh given the forward *output* y.
inline Mat tanh_backward(const Mat& y, const Mat& dy) {
  return dy.cwiseProduct((1.0 - y.array().square()).matrix());
}

// --- layer norm (over the feature dimension, per row) -----------------------

struct LayerNormCache {
  Mat xhat;
  Vec inv_std;
};

struct LayerNorm {
  Param gamma;
  Param beta;
  static constexpr double kEps = 1e-5;

  LayerNorm() = default;
  LayerNorm(const std::string& name, int d);

  Mat forward(const Mat& x, LayerNormCache* cache) const;
  Mat backward(const Mat& dy, const LayerNormCache& cache);
  void collect(ParamList& out);
};

// --- embedding table ---------------------------------------------------------

struct Embedding {
  Param table;  // vocab x d

  Embedding() = default;
  Embedding(const std::string& name, int vocab, int d) : table(name, vocab, d) {}

  Mat forward(std::span<const int> ids) const;
  void backward(std::span<const int> ids, const Mat& dy);
  Vec row(int id) const;
};

// --- multi-head attention ----------------------------------------------------

struct AttentionCache {
  LoraCache q, k, v, o;
  Mat qm, km, vm;            // post-projection activations
  std::vector<Mat> probs;    // per head, rows = queries
  Mat concat;                // pre-output-projection context
};

// Self-attention over a full sequence.  The causal variant lets position i
// attend to positions [0, i]; row i of the output depends only on rows <= i of
// the input, exactly (masked probabilities are hard zeros).
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(const std::string& name, int d_model, int num_heads, Rng& rng);

  Mat forward(const Mat& x, bool causal, const LoraActivation* act, Rng* dropout_rng,
              AttentionCache* cache) const;
  // Returns dx; accumulates weight gradients.  `dmix` collects mixing-weight
  // gradients summed over the four projections.
  Mat backward(const Mat& dy, const AttentionCache& cache, bool causal,
               const LoraActivation* act, Mat* dmix);

  void collect_base(ParamList& out);
  void collect_adapter(const std::string& name, ParamList& out);
  void add_adapter(const std::string& name, int rank, double alpha, double dropout, Rng& rng);

  int d_model() const { return wq.d_out(); }
  int heads() const { return num_heads_; }

  LoraLinear wq, wk, wv, wo;

 private:
  int num_heads_ = 0;
};

}  // namespace gencdr
