#include "nn/gradcheck.hpp"

#include <cmath>

namespace gencdr {

GradCheckReport grad_check(const std::function<double()>& loss,
                           std::span<Param* const> params, double epsilon) {
  if (!(epsilon > 0.0) || epsilon > 1e-2)
    throw Error(ErrorCode::kInvalidArgument,
                strf("finite-difference epsilon %g outside (0, 1e-2]", epsilon));
  double l1 = loss();
  double l2 = loss();
  if (l1 != l2)
    throw Error(ErrorCode::kDeterminism,
                strf("loss closure is not deterministic: %.17g vs %.17g", l1, l2));

  GradCheckReport report;
  for (Param* p : params) {
    for (int i = 0; i < p->value.rows(); ++i) {
      for (int j = 0; j < p->value.cols(); ++j) {
        double saved = p->value(i, j);
        p->value(i, j) = saved + epsilon;
        double fp = loss();
        p->value(i, j) = saved - epsilon;
        double fm = loss();
        p->value(i, j) = saved;
        double numeric = (fp - fm) / (2.0 * epsilon);
        double analytic = p->grad(i, j);
        double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-12});
        double rel = std::abs(analytic - numeric) / denom;
        ++report.checked;
        if (rel > report.max_rel_error) {
          report.max_rel_error = rel;
          report.worst_param = p->name;
          report.worst_row = i;
          report.worst_col = j;
        }
      }
    }
  }
  return report;
}

}  // namespace gencdr
