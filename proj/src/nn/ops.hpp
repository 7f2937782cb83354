#pragma once

#include <span>
#include <vector>

#include "nn/common.hpp"

namespace gencdr {

// Softmax restricted to `valid` indices: probabilities over the valid set sum
// to one, every other entry is exactly zero.  The max over valid logits is
// subtracted before exponentiation.  Throws constraint violation when `valid`
// is empty, shape error when an index is out of range.
Vec masked_softmax(const Vec& logits, std::span<const int> valid);

// log of masked_softmax over the valid entries; invalid entries get -inf.
Vec masked_log_softmax(const Vec& logits, std::span<const int> valid);

// Plain full softmax of a single logit row (max-subtracted).
Vec softmax(const Vec& logits);

// In-place row-wise softmax over the first `cols` entries of each row; used by
// attention where row i of a causal score matrix is valid up to and including
// column i.
void softmax_rows_prefix(Mat& scores, const std::vector<int>& prefix_len);

// Cross entropy of one logit row against a target index.
// Returns loss; if dlogits is non-null it receives softmax(logits) - onehot.
double softmax_xent(const Vec& logits, int target, Vec* dlogits);

// Numerically stable log(sum(exp(logits))).
double logsumexp(const Vec& logits);

}  // namespace gencdr
