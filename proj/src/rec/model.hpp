#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "adapt/router.hpp"
#include "rec/backbone.hpp"

namespace gencdr {

struct ExpertConfig {
  int num_experts = 4;
  int rank = 64;
  double alpha = 128.0;
  double dropout = 0.05;
};

struct SpecificConfig {
  int rank = 32;
  double alpha = 64.0;
  double dropout = 0.05;
};

// The N universal adapters plus the softmax gate that mixes them.  The gate
// reads the mean of the embedding-level hidden states (token plus position
// embeddings averaged over the sequence), which is available before any
// adapter-bearing layer runs, so the mixture it produces is well defined.
// The gate starts at zero, making the initial mixture exactly uniform; the
// `average` flag pins it there permanently ("w/o MoE Gate (Avg.)").
class UniversalExpertMix {
 public:
  UniversalExpertMix() = default;
  UniversalExpertMix(RecBackbone& backbone, const ExpertConfig& cfg, Rng& rng);

  int num_experts() const { return static_cast<int>(names_.size()); }
  const std::vector<std::string>& expert_names() const { return names_; }
  const ExpertConfig& config() const { return cfg_; }

  // Mixing weights for one sequence: softmax(gate(mean embedding)), or the
  // constant 1/N vector when `average` is set.  `cache`/`mean_emb` capture
  // what the gate gradient needs.
  Vec gate_weights(const RecBackbone& backbone, std::span<const int> tokens, LoraCache* cache,
                   Vec* mean_emb) const;

  void collect_gate(ParamList& out) { gate.collect_base(out); }
  uint64_t gate_hash() const;

  LoraLinear gate;  // num_experts x d_model
  bool average = false;

 private:
  std::vector<std::string> names_;
  ExpertConfig cfg_;
};

// Everything one forward pass records for the matching backward pass.
struct UniversalCache {
  BackboneCache bb;
  LoraCache gate;
  Vec mean_emb;       // gate input
  Vec g;              // expert mixing weights
  LoraActivation act; // experts first, then the specific adapter when present
  int experts = 0;    // leading columns of dmix that feed the gate gradient
};

// Next-token logits at every position under the expert mixture.  `h_t`, when
// requested, receives the final-norm hidden state at the last position.
Mat universal_forward(const RecBackbone& backbone, const UniversalExpertMix& mix,
                      std::span<const int> tokens, Rng* dropout_rng, UniversalCache* cache,
                      Vec* h_t = nullptr);

// Universal mixture plus the domain's adapter at weight one.
Mat specific_forward(const RecBackbone& backbone, const UniversalExpertMix& mix,
                     const std::string& domain, std::span<const int> tokens, Rng* dropout_rng,
                     UniversalCache* cache, Vec* h_t = nullptr);

// Backpropagates per-position logit gradients.  Gate gradients flow only when
// the cache was built with bb.want_mix set (training the universal phase).
void universal_backward(RecBackbone& backbone, UniversalExpertMix& mix, const Mat& dlogits,
                        UniversalCache& cache);

// Probability-space fusion of the two views: (1 - gamma) * p_uni + gamma *
// p_spec.  gamma = 0 is pure universal, gamma = 1 pure domain-specific.
Vec fuse_predictions(const Vec& p_uni, const Vec& p_spec, double gamma);

// The user-level routing gate shares the item router's architecture; its
// input is h_t, the backbone's final hidden state at the last context
// position, and its output gamma weighs the specific view.
using UserRouter = ItemRouter;

// gamma for one query.  Training mode samples the bottleneck posterior;
// evaluation uses its mean, so routing is deterministic outside training.
double user_route(const Vec& h_t, const UserRouter& router, bool train_mode, Rng* rng = nullptr);

// Backbone + experts + gate + per-domain adapters with phase provenance.
class RecModel {
 public:
  RecModel() = default;
  RecModel(const RecBackboneConfig& backbone_cfg, const ExpertConfig& experts, uint64_t seed);

  static std::string specific_name(const std::string& domain) { return "spec:" + domain; }
  void add_specific(const std::string& domain, const SpecificConfig& cfg, uint64_t seed);
  bool has_specific(const std::string& domain) const;
  std::vector<std::string> specific_domains() const;
  const SpecificConfig& specific_config(const std::string& domain) const;

  // Universal-phase parameters: backbone base, every expert, the gate.
  void collect_universal(ParamList& out);
  void freeze_universal();
  bool universal_frozen() const;
  uint64_t universal_hash() const;

  void record_phase(const std::string& phase, uint64_t seed);
  const std::vector<std::pair<std::string, uint64_t>>& phases() const { return phases_; }

  void save(const std::filesystem::path& path) const;
  static RecModel load(const std::filesystem::path& path);

  RecBackbone backbone;
  UniversalExpertMix mix;

 private:
  std::vector<std::pair<std::string, SpecificConfig>> specifics_;
  std::vector<std::pair<std::string, uint64_t>> phases_;
};

struct RecTrainConfig {
  int epochs = 10;
  double lr = 5e-5;
  int batch = 8;  // sequences per optimizer step
};

struct RecEpochLog {
  double loss = 0.0;  // mean next-token cross-entropy
};

// Universal phase: next-token cross-entropy over every position of every
// cross-domain sequence, updating the backbone, all experts and the gate
// (the from-scratch desk-scale backbone must train here; a frozen random
// backbone would push the whole task into the adapters).  Freezes the
// universal parameters on completion.
std::vector<RecEpochLog> train_universal(RecModel& model,
                                         const std::vector<std::vector<int>>& sequences,
                                         const RecTrainConfig& cfg, uint64_t seed);

// Specific phase for one domain: same objective on single-domain sequences,
// updating only that domain's adapter over the frozen universal mixture.
// Freezes the adapter on completion.
std::vector<RecEpochLog> train_specific(RecModel& model, const std::string& domain,
                                        const std::vector<std::vector<int>>& sequences,
                                        const RecTrainConfig& cfg, uint64_t seed);

// One held-out query for router training or evaluation: the encoded context
// (ending in the target domain's tag) and the true item's tokens.
struct RouterSample {
  std::vector<int> context;
  std::vector<int> target;
  std::string domain;
};

// Probabilities the fusion rule consumes, one entry per target token:
// p_uni[j] and p_spec[j] are the full-vocabulary softmax probabilities of
// target token j given the context and the preceding target tokens.
struct TargetScores {
  Vec h_t;
  Vec p_uni;
  Vec p_spec;  // equals p_uni when the domain has no adapter
};
TargetScores score_target(const RecModel& model, std::span<const int> context,
                          std::span<const int> target, const std::string& domain);

struct UserRouterTrainConfig {
  double vib_weight = 1e-3;
  int epochs = 20;
  double lr = 1e-3;
  int batch = 16;
};

struct UserRouterEpochLog {
  double l_pred = 0.0;  // mean -log P_final(target token)
  double l_vib = 0.0;   // mean bottleneck KL
};

// Third phase: gamma's router trained on held-out queries against the fused
// prediction loss plus vib_weight times the bottleneck KL.  All generative
// parameters stay frozen; gamma is computed once per query from h_t.
std::vector<UserRouterEpochLog> train_user_router(UserRouter& router, const RecModel& model,
                                                  const std::vector<RouterSample>& samples,
                                                  const UserRouterTrainConfig& cfg, uint64_t seed);

}  // namespace gencdr
