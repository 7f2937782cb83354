#pragma once

#include <vector>

#include "nn/param.hpp"

namespace gencdr {

// M residual codebook levels, each K_d entries of the shared latent dimension.
struct CodebookSet {
  std::vector<Param> levels;

  CodebookSet() = default;
  CodebookSet(const std::string& name, int num_levels, int entries_per_level, int latent_dim);

  int num_levels() const { return static_cast<int>(levels.size()); }
  int latent_dim() const { return levels.empty() ? 0 : static_cast<int>(levels[0].value.cols()); }
  int entries(int level) const { return static_cast<int>(levels[static_cast<size_t>(level)].value.rows()); }

  void collect(ParamList& out);
};

struct QuantizeResult {
  std::vector<int> codes;      // chosen entry per level
  Vec z_hat;                   // sum of chosen entries
  std::vector<Vec> residuals;  // r_0 = z, r_{d+1} = r_d - e_{c_d}; size M (pre-choice residuals)
};

// Greedy per-level nearest neighbor on the running residual, squared
// Euclidean metric, ties broken toward the lowest index.
QuantizeResult residual_quantize(const Vec& z, const CodebookSet& codebooks);

// Quantization loss values for one item.  L_REC = ||x - x_hat||^2;
// L_Q = sum_d ||sg(r_d) - e_{c_d}||^2 + beta ||r_d - sg(e_{c_d})||^2.
// Gradient flow (enforced by callers' backward passes): the first term updates
// codebooks only, the second updates the encoder only.
struct RqLosses {
  double l_rec = 0.0;
  double l_q = 0.0;
};
RqLosses rq_losses(const Vec& x, const Vec& x_hat, const std::vector<Vec>& residuals,
                   const std::vector<int>& codes, const CodebookSet& codebooks, double beta);

}  // namespace gencdr
