#pragma once

#include <functional>
#include <span>
#include <string>

#include "nn/param.hpp"

namespace gencdr {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  int worst_row = -1;
  int worst_col = -1;
  int64_t checked = 0;
};

// Central finite differences against the analytic gradients already stored in
// each parameter's `grad`.  `loss` must be a pure deterministic function of the
// parameter values: it is evaluated twice up front and a mismatch raises a
// determinism error.  Relative error uses max(|analytic|, |numeric|, 1e-12) as
// the denominator.  `epsilon` must lie in (0, 1e-2].
GradCheckReport grad_check(const std::function<double()>& loss,
                           std::span<Param* const> params, double epsilon = 1e-5);

}  // namespace gencdr
