#include "nn/layers.hpp"

#include <cmath>

namespace gencdr {

// --- layer norm --------------------------------------------------------------

LayerNorm::LayerNorm(const std::string& name, int d)
    : gamma(name + ".gamma", d, 1), beta(name + ".beta", d, 1) {
  gamma.value.setOnes();
}

Mat LayerNorm::forward(const Mat& x, LayerNormCache* cache) const {
  const long d = x.cols();
  if (d != gamma.value.rows())
    throw Error(ErrorCode::kShape, strf("layer norm expects %ld features, got %ld",
                                        long(gamma.value.rows()), d));
  Mat xhat(x.rows(), d);
  Vec inv_std(x.rows());
  for (int i = 0; i < x.rows(); ++i) {
    double mu = x.row(i).mean();
    double var = (x.row(i).array() - mu).square().mean();
    double is = 1.0 / std::sqrt(var + kEps);
    xhat.row(i) = (x.row(i).array() - mu) * is;
    inv_std[i] = is;
  }
  Mat y = xhat.cwiseProduct(gamma.value.col(0).transpose().replicate(x.rows(), 1));
  y.rowwise() += beta.value.col(0).transpose();
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv_std);
  }
  return y;
}

Mat LayerNorm::backward(const Mat& dy, const LayerNormCache& cache) {
  const Mat& xhat = cache.xhat;
  const long d = dy.cols();
  gamma.grad.col(0) += dy.cwiseProduct(xhat).colwise().sum().transpose();
  beta.grad.col(0) += dy.colwise().sum().transpose();
  Mat dxhat = dy.cwiseProduct(gamma.value.col(0).transpose().replicate(dy.rows(), 1));
  Mat dx(dy.rows(), d);
  for (int i = 0; i < dy.rows(); ++i) {
    double m1 = dxhat.row(i).mean();
    double m2 = dxhat.row(i).cwiseProduct(xhat.row(i)).mean();
    dx.row(i) =
        cache.inv_std[i] * (dxhat.row(i).array() - m1 - xhat.row(i).array() * m2).matrix();
  }
  return dx;
}

void LayerNorm::collect(ParamList& out) {
  out.push_back(&gamma);
  out.push_back(&beta);
}

// --- embedding ----------------------------------------------------------------

Mat Embedding::forward(std::span<const int> ids) const {
  Mat out(static_cast<long>(ids.size()), table.value.cols());
  for (size_t t = 0; t < ids.size(); ++t) {
    int id = ids[t];
    if (id < 0 || id >= table.value.rows())
      throw Error(ErrorCode::kLookup,
                  strf("embedding id %d out of range [0, %ld) in %s", id,
                       long(table.value.rows()), table.name.c_str()));
    out.row(static_cast<long>(t)) = table.value.row(id);
  }
  return out;
}

void Embedding::backward(std::span<const int> ids, const Mat& dy) {
  for (size_t t = 0; t < ids.size(); ++t)
    table.grad.row(ids[t]) += dy.row(static_cast<long>(t));
}

Vec Embedding::row(int id) const {
  if (id < 0 || id >= table.value.rows())
    throw Error(ErrorCode::kLookup, strf("embedding id %d out of range", id));
  return table.value.row(id).transpose();
}

// --- multi-head attention -------------------------------------------------------

MultiHeadAttention::MultiHeadAttention(const std::string& name, int d_model, int num_heads,
                                       Rng& rng)
    : wq(name + ".wq", d_model, d_model, false),
      wk(name + ".wk", d_model, d_model, false),
      wv(name + ".wv", d_model, d_model, false),
      wo(name + ".wo", d_model, d_model, false),
      num_heads_(num_heads) {
  if (d_model % num_heads != 0)
    throw Error(ErrorCode::kInvalidArgument,
                strf("d_model %d not divisible by %d heads", d_model, num_heads));
  wq.init_xavier(rng);
  wk.init_xavier(rng);
  wv.init_xavier(rng);
  wo.init_xavier(rng);
}

Mat MultiHeadAttention::forward(const Mat& x, bool causal, const LoraActivation* act,
                                Rng* dropout_rng, AttentionCache* cache) const {
  const long t = x.rows();
  const int dh = d_model() / num_heads_;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  AttentionCache local;
  AttentionCache* c = cache ? cache : &local;
  c->qm = wq.forward(x, act, dropout_rng, cache ? &c->q : nullptr);
  c->km = wk.forward(x, act, dropout_rng, cache ? &c->k : nullptr);
  c->vm = wv.forward(x, act, dropout_rng, cache ? &c->v : nullptr);
  c->probs.assign(static_cast<size_t>(num_heads_), Mat());
  Mat concat(t, d_model());
  std::vector<int> prefix(static_cast<size_t>(t));
  for (long i = 0; i < t; ++i) prefix[static_cast<size_t>(i)] = causal ? static_cast<int>(i) + 1
                                                                       : static_cast<int>(t);
  for (int h = 0; h < num_heads_; ++h) {
    auto qh = c->qm.middleCols(h * dh, dh);
    auto kh = c->km.middleCols(h * dh, dh);
    auto vh = c->vm.middleCols(h * dh, dh);
    Mat scores = (qh * kh.transpose()) * inv_sqrt;
    softmax_rows_prefix(scores, prefix);
    concat.middleCols(h * dh, dh).noalias() = scores * vh;
    c->probs[static_cast<size_t>(h)] = std::move(scores);
  }
  c->concat = concat;
  return wo.forward(concat, act, dropout_rng, cache ? &c->o : nullptr);
}

Mat MultiHeadAttention::backward(const Mat& dy, const AttentionCache& cache, bool causal,
                                 const LoraActivation* act, Mat* dmix) {
  const long t = dy.rows();
  const int dh = d_model() / num_heads_;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  Mat dmix_part;
  Mat dconcat = wo.backward(dy, cache.o, act, true, dmix ? &dmix_part : nullptr);
  if (dmix) *dmix = dmix_part;

  Mat dq = Mat::Zero(t, d_model());
  Mat dk = Mat::Zero(t, d_model());
  Mat dv = Mat::Zero(t, d_model());
  for (int h = 0; h < num_heads_; ++h) {
    const Mat& p = cache.probs[static_cast<size_t>(h)];
    auto qh = cache.qm.middleCols(h * dh, dh);
    auto kh = cache.km.middleCols(h * dh, dh);
    auto vh = cache.vm.middleCols(h * dh, dh);
    Mat dctx = dconcat.middleCols(h * dh, dh);
    Mat dp = dctx * vh.transpose();        // t x t
    dv.middleCols(h * dh, dh).noalias() = p.transpose() * dctx;
    // softmax backward per row; masked entries have p == 0 so they drop out.
    Mat ds(t, t);
    for (long i = 0; i < t; ++i) {
      long n = causal ? i + 1 : t;
      double dot = 0.0;
      for (long j = 0; j < n; ++j) dot += p(i, j) * dp(i, j);
      for (long j = 0; j < n; ++j) ds(i, j) = p(i, j) * (dp(i, j) - dot);
      for (long j = n; j < t; ++j) ds(i, j) = 0.0;
    }
    dq.middleCols(h * dh, dh).noalias() = (ds * kh) * inv_sqrt;
    dk.middleCols(h * dh, dh).noalias() = (ds.transpose() * qh) * inv_sqrt;
  }
  Mat dx = wq.backward(dq, cache.q, act, true, dmix ? &dmix_part : nullptr);
  if (dmix) *dmix += dmix_part;
  dx += wk.backward(dk, cache.k, act, true, dmix ? &dmix_part : nullptr);
  if (dmix) *dmix += dmix_part;
  dx += wv.backward(dv, cache.v, act, true, dmix ? &dmix_part : nullptr);
  if (dmix) *dmix += dmix_part;
  return dx;
}

void MultiHeadAttention::collect_base(ParamList& out) {
  wq.collect_base(out);
  wk.collect_base(out);
  wv.collect_base(out);
  wo.collect_base(out);
}

void MultiHeadAttention::collect_adapter(const std::string& name, ParamList& out) {
  wq.collect_adapter(name, out);
  wk.collect_adapter(name, out);
  wv.collect_adapter(name, out);
  wo.collect_adapter(name, out);
}

void MultiHeadAttention::add_adapter(const std::string& name, int rank, double alpha,
                                     double dropout, Rng& rng) {
  wq.add_adapter(name, rank, alpha, dropout, rng);
  wk.add_adapter(name, rank, alpha, dropout, rng);
  wv.add_adapter(name, rank, alpha, dropout, rng);
  wo.add_adapter(name, rank, alpha, dropout, rng);
}

}  // namespace gencdr
