#pragma once

#include <filesystem>

#include "adapt/adapters.hpp"
#include "rq/sids.hpp"

namespace gencdr {

// Closed-form KL divergence of a diagonal Gaussian N(m, diag(exp(s))) to the
// standard normal: 0.5 * sum_j (m_j^2 + exp(s_j) - 1 - s_j).
double vib_kl(const Vec& m, const Vec& s);

struct RouterArch {
  int hidden = 128;  // trunk width
  int d_r = 16;      // bottleneck dimension
};

struct RouterOutput {
  Vec m;       // posterior mean
  Vec s;       // posterior log-variance
  Vec z_r;     // bottleneck representation fed to the gate
  double alpha = 0.0;
  double kl = 0.0;
};

// Item-level routing network: a two-layer trunk reads the raw item embedding,
// Gaussian heads produce the bottleneck posterior, and a scalar gate on the
// bottleneck sample yields alpha in [0, 1].  Evaluation uses the posterior
// mean, so routing is deterministic outside training.
class ItemRouter {
 public:
  struct Cache {
    LoraCache c1, c2, cm, cs, cg;
    Mat h1, h2;
    Vec noise;  // empty when z_r = m
    RouterOutput out;
  };

  ItemRouter() = default;
  ItemRouter(int d_in, const RouterArch& arch, Rng& rng);

  // `sample` draws z_r = m + exp(s/2) .* eps via reparameterization;
  // `fixed_noise` substitutes a caller-held eps so checks can pin the draw.
  RouterOutput forward(const Vec& x, bool sample, Rng* rng, Cache* cache,
                       const Vec* fixed_noise = nullptr) const;

  // Accumulates gradients for d(loss)/d(alpha) = dalpha plus kl_weight times
  // the KL term's gradient, using the forward cache.
  void backward(double dalpha, double kl_weight, const Cache& cache);

  void collect(ParamList& out);
  uint64_t weights_hash() const;
  int d_in() const { return l1.d_in(); }
  const RouterArch& arch() const { return arch_; }

  void save(const std::filesystem::path& path) const;
  static ItemRouter load(const std::filesystem::path& path);

  LoraLinear l1, l2, m_head, s_head, gate;

 private:
  RouterArch arch_;
};

struct FusedLatent {
  Vec z_uni;
  Vec z_spec;
  Vec z_fused;  // (1 - alpha) * z_uni + alpha * z_spec
  double alpha = 0.0;
};

// Routes one item: universal and adapted encoder views fused by the router's
// gate.  Training mode samples the bottleneck; evaluation is deterministic.
FusedLatent route_item(const Vec& x, const std::string& domain, const DomainAdapterSet& adapters,
                       const ItemRouter& router, bool train_mode, Rng* rng = nullptr);

struct RouterTrainConfig {
  double vib_weight = 1e-3;
  int epochs = 30;
  double lr = 1e-3;
  int batch = 256;
};

struct RouterEpochLog {
  double l_rec = 0.0;
  double l_vib = 0.0;
};

// Second-phase objective: reconstruct x from the decoded quantized fused
// latent, plus vib_weight times the bottleneck KL.  Adapters and tokenizer
// stay frozen; only the router moves.
std::vector<RouterEpochLog> train_router(ItemRouter& router, const Mat& items,
                                         const std::vector<std::string>& item_domains,
                                         DomainAdapterSet& adapters,
                                         const RouterTrainConfig& cfg, uint64_t seed);

struct RoutingRow {
  std::string item_id;
  std::string domain;
  double alpha = 0.0;
};

struct FusedAssignment {
  SidTable sids;
  std::vector<RoutingRow> report;  // sorted by item id
};

// Eval-mode routing of every item followed by quantization of the fused
// latents through the frozen codebooks, with the usual collision suffixes.
FusedAssignment assign_fused_sids(const std::vector<std::string>& ids, const Mat& embeddings,
                                  const std::vector<std::string>& item_domains,
                                  const DomainAdapterSet& adapters, const ItemRouter& router);

void write_routing_report_tsv(const std::filesystem::path& path,
                              const std::vector<RoutingRow>& rows);

// One row per item and view (z_uni / z_spec / z_fused) for external plots.
void write_embedding_dump_tsv(const std::filesystem::path& path,
                              const std::vector<std::string>& ids,
                              const std::vector<std::string>& item_domains,
                              const DomainAdapterSet& adapters, const ItemRouter& router,
                              const Mat& embeddings);

}  // namespace gencdr
