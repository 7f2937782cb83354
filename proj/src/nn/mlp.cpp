#include "nn/mlp.hpp"

namespace gencdr {

MlpCoder::MlpCoder(const std::string& name, int d_in, int hidden, int d_out, Rng& rng)
    : l1(name + ".l1", hidden, d_in, true),
      l2(name + ".l2", hidden, hidden, true),
      l3(name + ".l3", d_out, hidden, true) {
  l1.init_xavier(rng);
  l2.init_xavier(rng);
  l3.init_xavier(rng);
}

Mat MlpCoder::forward(const Mat& x, const LoraActivation* act, Rng* dropout_rng,
                      Cache* cache) const {
  Mat h1 = tanh_forward(l1.forward(x, act, dropout_rng, cache ? &cache->c1 : nullptr));
  Mat h2 = tanh_forward(l2.forward(h1, act, dropout_rng, cache ? &cache->c2 : nullptr));
  Mat y = l3.forward(h2, act, dropout_rng, cache ? &cache->c3 : nullptr);
  if (cache) {
    cache->h1 = std::move(h1);
    cache->h2 = std::move(h2);
    return y;
  }
  return y;
}

Mat MlpCoder::backward(const Mat& dy, const Cache& cache, const LoraActivation* act,
                       bool want_dx) {
  Mat dh2 = l3.backward(dy, cache.c3, act, true, nullptr);
  dh2 = tanh_backward(cache.h2, dh2);
  Mat dh1 = l2.backward(dh2, cache.c2, act, true, nullptr);
  dh1 = tanh_backward(cache.h1, dh1);
  return l1.backward(dh1, cache.c1, act, want_dx, nullptr);
}

void MlpCoder::add_adapter(const std::string& name, int rank, double alpha, double dropout,
                           Rng& rng) {
  l1.add_adapter(name, rank, alpha, dropout, rng);
  l2.add_adapter(name, rank, alpha, dropout, rng);
  l3.add_adapter(name, rank, alpha, dropout, rng);
}

void MlpCoder::collect_base(ParamList& out) {
  l1.collect_base(out);
  l2.collect_base(out);
  l3.collect_base(out);
}

void MlpCoder::collect_adapter(const std::string& name, ParamList& out) {
  l1.collect_adapter(name, out);
  l2.collect_adapter(name, out);
  l3.collect_adapter(name, out);
}

}  // namespace gencdr
