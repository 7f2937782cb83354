#pragma once

#include "rec/model.hpp"
#include "trie/step_model.hpp"

namespace gencdr {

// Incremental next-token scorer over the trained model, for beam decoding.
// The context is run once per query; per-block key/value rows for it are
// shared (immutably) by every beam fork, and each fork carries only the few
// rows of its own generated tail, so cloning is cheap.  Expert mixing
// weights are computed once from the context and held fixed while tokens
// are generated -- re-routing per step would invalidate every cached
// key/value row.  With the mixture pinned that way, logits match the full
// forward pass up to floating-point summation order.
class RecStepModel : public StepModel {
 public:
  // An empty domain scores the pure universal mixture; otherwise that
  // domain's adapter is co-active at weight one (the specific view).
  explicit RecStepModel(const RecModel& model, std::string domain = "");

  std::unique_ptr<DecodeState> begin(std::span<const int> context) const override;
  void advance(DecodeState& state, int token) const override;
  Vec logits_at(const DecodeState& state, std::span<const int> tokens) const override;
  Vec full_logits(const DecodeState& state) const override;
  int vocab_size() const override;

  // h_t: the final-norm hidden state at the last context position, the
  // user-level router's input.
  Vec context_hidden(std::span<const int> context) const;

 private:
  const RecModel* model_;
  std::string domain_;
};

}  // namespace gencdr
