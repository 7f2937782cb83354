#pragma once

#include <filesystem>

#include "rq/codebooks.hpp"
#include "rq/ctx_model.hpp"

namespace gencdr {

struct RqVaeConfig {
  int input_dim = 0;       // item embedding dimension (from data)
  int latent_dim = 32;
  int hidden = 128;
  int levels = 3;          // M
  int codebook_size = 256; // K
  int ctx_dim = 32;
  int ctx_heads = 2;
  int ctx_ff = 64;
  int ctx_blocks = 2;
};

// The discrete semantic encoder: MLP encoder/decoder around M residual
// codebooks, plus the masked-code context model used only during pretraining.
class RqVae {
 public:
  RqVae() = default;
  RqVae(const RqVaeConfig& cfg, Rng& rng);

  const RqVaeConfig& config() const { return cfg_; }
  bool frozen() const { return frozen_; }
  void freeze();

  // Encoder forward without adapters (the tokenizer's own view).  Domain
  // adapters attach to `encoder` externally and pass their own activation.
  Vec encode(const Vec& x) const;
  Mat encode_batch(const Mat& x) const;
  Vec decode(const Vec& z_hat) const;
  QuantizeResult quantize(const Vec& z) const { return residual_quantize(z, codebooks); }

  void collect(ParamList& out);               // everything (pretraining group)
  uint64_t weights_hash() const;              // encoder + decoder + codebooks

  void save(const std::filesystem::path& path) const;
  static RqVae load(const std::filesystem::path& path);

  MlpCoder encoder;
  MlpCoder decoder;
  CodebookSet codebooks;
  CtxModel ctx;

 private:
  RqVaeConfig cfg_;
  bool frozen_ = false;
};

}  // namespace gencdr
