#include "rq/codebooks.hpp"

namespace gencdr {

CodebookSet::CodebookSet(const std::string& name, int num_levels, int entries_per_level,
                         int latent_dim) {
  if (num_levels < 1)
    throw Error(ErrorCode::kInvalidArgument, "codebook set needs at least one level");
  if (entries_per_level < 2)
    throw Error(ErrorCode::kInvalidArgument, "codebooks need at least two entries per level");
  for (int d = 0; d < num_levels; ++d)
    levels.emplace_back(strf("%s.%d", name.c_str(), d), entries_per_level, latent_dim);
}

void CodebookSet::collect(ParamList& out) {
  for (Param& p : levels) out.push_back(&p);
}

QuantizeResult residual_quantize(const Vec& z, const CodebookSet& codebooks) {
  if (codebooks.num_levels() == 0)
    throw Error(ErrorCode::kInvalidArgument, "empty codebook set");
  if (z.size() != codebooks.latent_dim())
    throw Error(ErrorCode::kShape,
                strf("latent has dimension %ld, codebooks expect %d", long(z.size()),
                     codebooks.latent_dim()));
  QuantizeResult out;
  out.z_hat = Vec::Zero(z.size());
  Vec r = z;
  for (int d = 0; d < codebooks.num_levels(); ++d) {
    const Mat& entries = codebooks.levels[static_cast<size_t>(d)].value;
    int best = 0;
    double best_dist = (r - entries.row(0).transpose()).squaredNorm();
    for (int k = 1; k < entries.rows(); ++k) {
      double dist = (r - entries.row(k).transpose()).squaredNorm();
      if (dist < best_dist) {  // strict: ties keep the lowest index
        best_dist = dist;
        best = k;
      }
    }
    out.codes.push_back(best);
    out.residuals.push_back(r);
    out.z_hat += entries.row(best).transpose();
    r -= entries.row(best).transpose();
  }
  return out;
}

RqLosses rq_losses(const Vec& x, const Vec& x_hat, const std::vector<Vec>& residuals,
                   const std::vector<int>& codes, const CodebookSet& codebooks, double beta) {
  if (x.size() != x_hat.size())
    throw Error(ErrorCode::kShape, "reconstruction dimension mismatch");
  if (residuals.size() != codes.size() ||
      static_cast<int>(codes.size()) != codebooks.num_levels())
    throw Error(ErrorCode::kShape, "levels of residuals, codes and codebooks disagree");
  RqLosses out;
  out.l_rec = (x - x_hat).squaredNorm();
  for (size_t d = 0; d < codes.size(); ++d) {
    const Mat& entries = codebooks.levels[d].value;
    int c = codes[d];
    if (c < 0 || c >= entries.rows())
      throw Error(ErrorCode::kShape, strf("code %d out of range at level %zu", c, d));
    double dist = (residuals[d] - entries.row(c).transpose()).squaredNorm();
    out.l_q += dist + beta * dist;  // identical value; gradients differ by stop-gradient
  }
  return out;
}

}  // namespace gencdr
