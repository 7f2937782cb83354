#pragma once

#include <memory>
#include <span>

#include "nn/common.hpp"

namespace gencdr {

// Opaque per-prefix decoding state produced by a StepModel.  Cloning must be
// cheap relative to a forward pass: beams fork states at every level.
struct DecodeState {
  virtual ~DecodeState() = default;
  virtual std::unique_ptr<DecodeState> clone() const = 0;
};

// Next-token scorer used by the decoder.  `begin` consumes the (already
// tokenized) user context; `advance` appends one generated token.  Logit
// queries are lazy so that constrained decoding only pays for the tokens a
// prefix tree actually allows.  All methods must be deterministic.
class StepModel {
 public:
  virtual ~StepModel() = default;

  virtual std::unique_ptr<DecodeState> begin(std::span<const int> context) const = 0;
  virtual void advance(DecodeState& state, int token) const = 0;

  // Next-token logits for exactly the requested tokens; other entries of the
  // returned vector are unspecified and must not be read.
  virtual Vec logits_at(const DecodeState& state, std::span<const int> tokens) const = 0;
  // Next-token logits over the whole vocabulary.
  virtual Vec full_logits(const DecodeState& state) const = 0;

  virtual int vocab_size() const = 0;
};

}  // namespace gencdr
