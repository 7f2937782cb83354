#pragma once

#include <string>
#include <vector>

#include "trie/prefix_tree.hpp"
#include "trie/step_model.hpp"

namespace gencdr {

enum class FusionOrder {
  kMaskThenFuse,  // mask each model's logits, normalize, then convex-combine
  kFuseThenMask,  // softmax each model over the full vocab, combine, then mask
};

// Per-query scoring rule: (1 - gamma) * universal + gamma * specific, so
// gamma = 0 is pure universal and gamma = 1 pure domain-specific.  With no
// specific model the universal distribution is used alone regardless of gamma.
struct FusedScorer {
  const StepModel* universal = nullptr;
  const StepModel* specific = nullptr;
  double gamma = 0.0;
  FusionOrder order = FusionOrder::kMaskThenFuse;
};

struct BeamResult {
  std::string item_id;
  double log_prob = 0.0;
  std::vector<int> tokens;
};

// Deterministic constrained beam search of depth tree.depth().  At each step
// every surviving prefix is extended only along tree edges; per-step
// distributions follow the scorer's fusion rule; scores are sums of per-step
// log-probabilities.  Ordering: score descending, then lexicographic token
// order.  Returns at most k completed items.
std::vector<BeamResult> beam_generate(const FusedScorer& scorer, std::span<const int> context,
                                      const PrefixTree& tree, int beam_width, int k);

// Unconstrained variant used by the no-prefix-tree ablation: the beam may
// emit any vocabulary token; finished paths are checked against `tree`
// afterwards.  `proposals` holds every completed path in rank order with its
// score; paths that resolve to a leaf also carry the item id.
struct UnconstrainedResult {
  std::vector<BeamResult> ranked;                // valid items, at most k
  std::vector<std::vector<int>> invalid_paths;   // completed paths with no leaf
  int proposals = 0;                             // completed beam entries
};
UnconstrainedResult unconstrained_generate(const FusedScorer& scorer,
                                           std::span<const int> context, const PrefixTree& tree,
                                           int beam_width, int k);

}  // namespace gencdr
