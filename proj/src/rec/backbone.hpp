#pragma once

#include <span>
#include <string>
#include <vector>

#include "nn/layers.hpp"

namespace gencdr {

struct RecBackboneConfig {
  int vocab = 0;
  int d_model = 64;
  int num_heads = 4;
  int d_ff = 256;
  int num_blocks = 2;
  int max_pos = 256;
};

// Which linear layers a LoRA adapter attaches to.  The output head is off by
// default: adapters steer logits through the hidden states they reshape.
struct AdapterScope {
  bool attention = true;
  bool ffn = true;
  bool head = false;
};

struct RecBlockCache {
  LayerNormCache ln1, ln2;
  AttentionCache attn;
  LoraCache ff1, ff2;
  Mat x_in, x_mid, f_hidden;
};

struct BackboneCache {
  // Set before forward() to collect adapter mixing-weight gradients later.
  bool want_mix = false;
  std::vector<int> ids;
  std::vector<int> pos_ids;
  std::vector<RecBlockCache> blocks;
  LayerNormCache lnf;
  LoraCache head;
  Mat h_final;  // post-final-norm hidden states, one row per position
};

// Decoder-only transformer over SID token streams: learned token and position
// embeddings, pre-norm causal blocks (attention + tanh feed-forward), a final
// norm, and an untied zero-initialized output head.  Every linear is
// LoRA-capable; `act` selects and weights the co-active adapters.
class RecBackbone {
 public:
  struct Block {
    LayerNorm ln1;
    MultiHeadAttention attn;
    LayerNorm ln2;
    LoraLinear ff1, ff2;
  };

  RecBackbone() = default;
  RecBackbone(const RecBackboneConfig& cfg, Rng& rng);

  // Next-token logits at every position (rows: positions, cols: vocab).
  Mat forward(std::span<const int> tokens, const LoraActivation* act, Rng* dropout_rng,
              BackboneCache* cache) const;
  // Accumulates parameter gradients from per-position logit gradients.  When
  // the cache was built with want_mix, `dmix` receives the per-position
  // mixing-weight gradients summed over every adapter-bearing layer.
  void backward(const Mat& dlogits, BackboneCache& cache, const LoraActivation* act, Mat* dmix);

  void add_adapter(const std::string& name, int rank, double alpha, double dropout, Rng& rng,
                   const AdapterScope& scope = {});
  bool has_adapter(const std::string& name) const;
  const std::vector<std::pair<std::string, AdapterScope>>& adapters() const { return adapters_; }

  void collect_base(ParamList& out);
  void collect_adapter(const std::string& name, ParamList& out);
  void freeze_base();
  void freeze_adapter(const std::string& name);

  uint64_t base_hash() const;
  uint64_t adapter_hash(const std::string& name) const;

  const RecBackboneConfig& config() const { return cfg_; }

  Embedding tok_emb;
  Embedding pos_emb;
  std::vector<Block> blocks;
  LayerNorm ln_f;
  LoraLinear head;

 private:
  const AdapterScope& scope_of(const std::string& name) const;

  RecBackboneConfig cfg_;
  std::vector<std::pair<std::string, AdapterScope>> adapters_;
};

}  // namespace gencdr
