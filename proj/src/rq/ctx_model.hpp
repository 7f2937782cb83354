#pragma once

#include <vector>

#include "nn/mlp.hpp"

namespace gencdr {

// Masked-token-modeling context model: a small bidirectional transformer over
// the M code slots of one item.  Inputs are level-offset code tokens (masked
// slots replaced by a shared MASK token) plus a level embedding; each level
// has its own classification head over that level's codebook entries.
class CtxModel {
 public:
  CtxModel() = default;
  CtxModel(const std::string& name, const std::vector<int>& level_sizes, int d_ctx,
           int num_heads, int d_ff, int num_blocks, Rng& rng);

  // Mean negative log-likelihood of the true codes at the masked positions.
  // Accumulates parameter gradients (scaled by `grad_scale`) when with_grad.
  double loss(const std::vector<int>& codes, const std::vector<int>& mask_positions,
              bool with_grad, double grad_scale = 1.0);

  void collect(ParamList& out);
  int num_levels() const { return static_cast<int>(level_sizes_.size()); }

 private:
  struct Block {
    LayerNorm ln1;
    MultiHeadAttention attn;
    LayerNorm ln2;
    LoraLinear ff1, ff2;
  };

  std::vector<int> level_sizes_;
  std::vector<int> offsets_;
  int mask_token_ = 0;
  Embedding tok_emb_;
  Embedding level_emb_;
  std::vector<Block> blocks_;
  LayerNorm ln_f_;
  std::vector<LoraLinear> heads_;
};

}  // namespace gencdr
