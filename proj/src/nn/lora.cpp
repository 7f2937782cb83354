#include "nn/lora.hpp"

#include <algorithm>

namespace gencdr {

LoraLinear::LoraLinear(std::string name, int d_out, int d_in, bool with_bias_)
    : w0(name + ".w0", d_out, d_in), with_bias(with_bias_), name_(std::move(name)) {
  if (with_bias) bias = Param(name_ + ".bias", d_out, 1);
}

LoraAdapter& LoraLinear::add_adapter(const std::string& adapter_name, int rank, double alpha,
                                     double dropout, Rng& rng) {
  if (rank < 1 || rank > std::min(d_in(), d_out()))
    throw Error(ErrorCode::kInvalidArgument,
                strf("adapter rank %d invalid for %dx%d layer %s", rank, d_out(), d_in(),
                     name_.c_str()));
  if (has_adapter(adapter_name))
    throw Error(ErrorCode::kState, "adapter already attached: " + adapter_name);
  LoraAdapter ad;
  ad.a = Param(name_ + "." + adapter_name + ".a", rank, d_in());
  ad.b = Param(name_ + "." + adapter_name + ".b", d_out(), rank);
  ad.a.init_xavier(rng);
  // b stays zero: a fresh adapter must not change the layer output.
  ad.rank = rank;
  ad.alpha = alpha;
  ad.scale = alpha / static_cast<double>(rank);
  ad.dropout = dropout;
  adapters_.emplace_back(adapter_name, std::move(ad));
  return adapters_.back().second;
}

bool LoraLinear::has_adapter(const std::string& adapter_name) const {
  for (const auto& [n, _] : adapters_)
    if (n == adapter_name) return true;
  return false;
}

LoraAdapter& LoraLinear::adapter(const std::string& adapter_name) {
  for (auto& [n, ad] : adapters_)
    if (n == adapter_name) return ad;
  throw Error(ErrorCode::kLookup, "no adapter named " + adapter_name + " on layer " + name_);
}

const LoraAdapter& LoraLinear::adapter(const std::string& adapter_name) const {
  return const_cast<LoraLinear*>(this)->adapter(adapter_name);
}

Mat LoraLinear::forward(const Mat& x, const LoraActivation* act, Rng* dropout_rng,
                        LoraCache* cache) const {
  if (x.cols() != d_in())
    throw Error(ErrorCode::kShape,
                strf("layer %s expects %d input columns, got %ld", name_.c_str(), d_in(),
                     long(x.cols())));
  Mat y = x * w0.value.transpose();
  if (with_bias) y.rowwise() += bias.value.col(0).transpose();
  if (cache) {
    cache->x = x;
    cache->ax.clear();
    cache->mask.clear();
    cache->delta.clear();
  }
  if (!act) return y;
  if (act->per_pos &&
      (act->per_pos->rows() != x.rows() ||
       act->per_pos->cols() != static_cast<long>(act->names.size())))
    throw Error(ErrorCode::kShape, "per-position mixing weights have wrong shape");
  for (size_t k = 0; k < act->names.size(); ++k) {
    const LoraAdapter& ad = adapter(act->names[k]);
    Mat ax = x * ad.a.value.transpose();  // T x r
    Mat mask;
    if (dropout_rng && ad.dropout > 0.0) {
      mask = Mat::Zero(ax.rows(), ax.cols());
      double keep = 1.0 - ad.dropout;
      for (int i = 0; i < mask.rows(); ++i)
        for (int j = 0; j < mask.cols(); ++j)
          mask(i, j) = dropout_rng->uniform() < keep ? 1.0 / keep : 0.0;
      ax = ax.cwiseProduct(mask);
    }
    Mat delta = ad.scale * (ax * ad.b.value.transpose());  // T x d_out
    if (act->per_pos) {
      y += delta.cwiseProduct(act->per_pos->col(static_cast<long>(k)).replicate(1, delta.cols()));
    } else {
      y += act->weights[static_cast<long>(k)] * delta;
    }
    if (cache) {
      cache->ax.push_back(std::move(ax));
      cache->mask.push_back(std::move(mask));
      if (cache->keep_delta) cache->delta.push_back(std::move(delta));
    }
  }
  return y;
}

Mat LoraLinear::backward(const Mat& dy, const LoraCache& cache, const LoraActivation* act,
                         bool want_dx, Mat* dmix) {
  w0.grad.noalias() += dy.transpose() * cache.x;
  if (with_bias) bias.grad.col(0) += dy.colwise().sum().transpose();
  Mat dx;
  if (want_dx) dx.noalias() = dy * w0.value;
  if (act) {
    if (dmix) {
      if (!cache.keep_delta)
        throw Error(ErrorCode::kState, "mix gradients need keep_delta on the forward cache");
      *dmix = Mat::Zero(dy.rows(), static_cast<long>(act->names.size()));
    }
    for (size_t k = 0; k < act->names.size(); ++k) {
      LoraAdapter& ad = adapter(act->names[k]);
      // Weighted upstream gradient for this adapter.
      Mat g;
      if (act->per_pos) {
        g = dy.cwiseProduct(act->per_pos->col(static_cast<long>(k)).replicate(1, dy.cols()));
      } else {
        g = act->weights[static_cast<long>(k)] * dy;
      }
      if (dmix)
        dmix->col(static_cast<long>(k)) = dy.cwiseProduct(cache.delta[k]).rowwise().sum();
      const Mat& ax = cache.ax[k];
      ad.b.grad.noalias() += ad.scale * (g.transpose() * ax);
      Mat dax = ad.scale * (g * ad.b.value);  // T x r
      if (cache.mask[k].size() != 0) dax = dax.cwiseProduct(cache.mask[k]);
      ad.a.grad.noalias() += dax.transpose() * cache.x;
      if (want_dx) dx.noalias() += dax * ad.a.value;
    }
  }
  return dx;
}

void LoraLinear::collect_base(ParamList& out) {
  out.push_back(&w0);
  if (with_bias) out.push_back(&bias);
}

void LoraLinear::collect_adapter(const std::string& adapter_name, ParamList& out) {
  LoraAdapter& ad = adapter(adapter_name);
  out.push_back(&ad.a);
  out.push_back(&ad.b);
}

void LoraLinear::collect_all(ParamList& out) {
  collect_base(out);
  for (auto& [n, ad] : adapters_) {
    out.push_back(&ad.a);
    out.push_back(&ad.b);
  }
}

Vec lora_forward(const LoraLinear& layer, const Vec& x) {
  std::vector<std::string> names;
  for (const auto& [n, _] : layer.adapters()) names.push_back(n);
  return lora_forward(layer, x, LoraActivation::uniform(std::move(names)));
}

Vec lora_forward(const LoraLinear& layer, const Vec& x, const LoraActivation& act) {
  Mat row = x.transpose();
  Mat y = layer.forward(row, &act, nullptr, nullptr);
  return y.row(0).transpose();
}

}  // namespace gencdr
