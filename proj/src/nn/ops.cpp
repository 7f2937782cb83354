#include "nn/ops.hpp"

#include <cmath>
#include <limits>

namespace gencdr {

namespace {

double max_over(const Vec& logits, std::span<const int> valid) {
  double m = -std::numeric_limits<double>::infinity();
  for (int idx : valid) {
    if (idx < 0 || idx >= logits.size())
      throw Error(ErrorCode::kShape,
                  strf("masked softmax index %d out of range [0, %ld)", idx, long(logits.size())));
    m = std::max(m, logits[idx]);
  }
  return m;
}

}  // namespace

Vec masked_softmax(const Vec& logits, std::span<const int> valid) {
  if (valid.empty())
    throw Error(ErrorCode::kConstraint, "masked softmax over an empty valid set");
  double m = max_over(logits, valid);
  Vec out = Vec::Zero(logits.size());
  double z = 0.0;
  for (int idx : valid) {
    double e = std::exp(logits[idx] - m);
    out[idx] = e;
    z += e;
  }
  for (int idx : valid) out[idx] /= z;
  return out;
}

Vec masked_log_softmax(const Vec& logits, std::span<const int> valid) {
  if (valid.empty())
    throw Error(ErrorCode::kConstraint, "masked softmax over an empty valid set");
  double m = max_over(logits, valid);
  double z = 0.0;
  for (int idx : valid) z += std::exp(logits[idx] - m);
  double lz = std::log(z) + m;
  Vec out = Vec::Constant(logits.size(), -std::numeric_limits<double>::infinity());
  for (int idx : valid) out[idx] = logits[idx] - lz;
  return out;
}

Vec softmax(const Vec& logits) {
  double m = logits.maxCoeff();
  Vec e = (logits.array() - m).exp();
  return e / e.sum();
}

void softmax_rows_prefix(Mat& scores, const std::vector<int>& prefix_len) {
  if (static_cast<int>(prefix_len.size()) != scores.rows())
    throw Error(ErrorCode::kShape, "prefix length list does not match score rows");
  for (int i = 0; i < scores.rows(); ++i) {
    int n = prefix_len[static_cast<size_t>(i)];
    if (n < 1 || n > scores.cols())
      throw Error(ErrorCode::kConstraint, strf("attention row %d has invalid prefix %d", i, n));
    auto row = scores.row(i);
    double m = row.head(n).maxCoeff();
    double z = 0.0;
    for (int j = 0; j < n; ++j) {
      double e = std::exp(row(j) - m);
      row(j) = e;
      z += e;
    }
    for (int j = 0; j < n; ++j) row(j) /= z;
    for (int j = n; j < scores.cols(); ++j) row(j) = 0.0;
  }
}

double softmax_xent(const Vec& logits, int target, Vec* dlogits) {
  if (target < 0 || target >= logits.size())
    throw Error(ErrorCode::kShape, strf("cross entropy target %d out of range", target));
  double m = logits.maxCoeff();
  Vec e = (logits.array() - m).exp();
  double z = e.sum();
  double loss = std::log(z) + m - logits[target];
  if (dlogits) {
    *dlogits = e / z;
    (*dlogits)[target] -= 1.0;
  }
  return loss;
}

double logsumexp(const Vec& logits) {
  double m = logits.maxCoeff();
  return std::log((logits.array() - m).exp().sum()) + m;
}

}  // namespace gencdr
