#pragma once

#include <vector>

#include "rq/rq_vae.hpp"

namespace gencdr {

struct PretrainConfig {
  double mu = 1.0;       // weight of L_Q
  double lambda = 0.1;   // weight of L_MTM
  double beta = 0.25;    // commitment coefficient inside L_Q
  double mask_rate = 0.0;  // <= 0 means the 1/M default
  int epochs = 100;
  double lr = 1e-4;
  int batch = 512;
};

struct PretrainEpochLog {
  double l_total = 0.0;
  double l_rec = 0.0;
  double l_q = 0.0;
  double l_mtm = 0.0;
};

// Joint training of encoder, decoder, codebooks and the masked-code context
// model on the full cross-domain catalog; the model is frozen on return.
// Loss: L_REC + mu * L_Q + lambda * L_MTM, averaged per batch.
std::vector<PretrainEpochLog> pretrain(RqVae& model, const Mat& embeddings,
                                       const PretrainConfig& cfg, uint64_t seed);

}  // namespace gencdr
