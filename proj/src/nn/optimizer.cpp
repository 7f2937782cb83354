#include "nn/optimizer.hpp"

#include <cmath>

namespace gencdr {

void AdamW::step(const ParamList& params) {
  ++t_;
  double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (Param* p : params) {
    if (p->frozen) continue;
    if (!all_finite(p->grad))
      throw Error(ErrorCode::kDivergence, "non-finite gradient for parameter " + p->name);
    Slot& s = slots_[p->name];
    if (s.m.size() == 0) {
      s.m = Mat::Zero(p->value.rows(), p->value.cols());
      s.v = Mat::Zero(p->value.rows(), p->value.cols());
    }
    s.m = cfg_.beta1 * s.m + (1.0 - cfg_.beta1) * p->grad;
    s.v = cfg_.beta2 * s.v + (1.0 - cfg_.beta2) * p->grad.cwiseProduct(p->grad);
    Mat mhat = s.m / c1;
    Mat denom = (s.v / c2).cwiseSqrt();
    denom.array() += cfg_.eps;
    p->value -= cfg_.lr * (mhat.cwiseQuotient(denom) + cfg_.weight_decay * p->value);
  }
}

}  // namespace gencdr
