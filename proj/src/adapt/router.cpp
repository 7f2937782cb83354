#include "adapt/router.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>

#include "nn/archive.hpp"
#include "nn/optimizer.hpp"

namespace gencdr {

namespace {

double sigmoid(double g) {
  if (g >= 0.0) return 1.0 / (1.0 + std::exp(-g));
  const double e = std::exp(g);
  return e / (1.0 + e);
}

}  // namespace

double vib_kl(const Vec& m, const Vec& s) {
  if (m.size() != s.size())
    throw Error(ErrorCode::kShape,
                strf("mean has %ld entries, log-variance has %ld", m.size(), s.size()));
  double total = 0.0;
  for (long j = 0; j < m.size(); ++j)
    total += m[j] * m[j] + std::exp(s[j]) - 1.0 - s[j];
  return 0.5 * total;
}

ItemRouter::ItemRouter(int d_in, const RouterArch& arch, Rng& rng)
    : l1("router.l1", arch.hidden, d_in, true),
      l2("router.l2", arch.hidden, arch.hidden, true),
      m_head("router.m", arch.d_r, arch.hidden, true),
      s_head("router.s", arch.d_r, arch.hidden, true),
      gate("router.gate", 1, arch.d_r, true),
      arch_(arch) {
  if (d_in < 1 || arch.hidden < 1 || arch.d_r < 1)
    throw Error(ErrorCode::kConfig,
                strf("router dims must be positive: d_in=%d hidden=%d d_r=%d", d_in, arch.hidden,
                     arch.d_r));
  l1.init_xavier(rng);
  l2.init_xavier(rng);
  m_head.init_xavier(rng);
  s_head.init_xavier(rng);
  gate.init_xavier(rng);
}

RouterOutput ItemRouter::forward(const Vec& x, bool sample, Rng* rng, Cache* cache,
                                 const Vec* fixed_noise) const {
  if (x.size() != l1.d_in())
    throw Error(ErrorCode::kShape,
                strf("router expects %d-dimensional input, got %ld", l1.d_in(), x.size()));
  Cache local;
  Cache& c = cache ? *cache : local;
  auto* self = const_cast<ItemRouter*>(this);

  Mat x_row = x.transpose();
  c.h1 = tanh_forward(self->l1.forward(x_row, nullptr, nullptr, &c.c1));
  c.h2 = tanh_forward(self->l2.forward(c.h1, nullptr, nullptr, &c.c2));
  RouterOutput out;
  out.m = self->m_head.forward(c.h2, nullptr, nullptr, &c.cm).row(0).transpose();
  out.s = self->s_head.forward(c.h2, nullptr, nullptr, &c.cs).row(0).transpose();
  if (sample) {
    if (fixed_noise != nullptr) {
      if (fixed_noise->size() != out.m.size())
        throw Error(ErrorCode::kShape, "fixed noise has the wrong dimension");
      c.noise = *fixed_noise;
    } else {
      if (rng == nullptr)
        throw Error(ErrorCode::kInvalidArgument, "sampling the bottleneck needs an rng");
      c.noise = Vec(out.m.size());
      for (long j = 0; j < c.noise.size(); ++j) c.noise[j] = rng->gaussian();
    }
    out.z_r = out.m + (out.s.array() / 2.0).exp().matrix().cwiseProduct(c.noise);
  } else {
    c.noise = Vec();
    out.z_r = out.m;
  }
  const double g = self->gate.forward(out.z_r.transpose(), nullptr, nullptr, &c.cg)(0, 0);
  out.alpha = sigmoid(g);
  out.kl = vib_kl(out.m, out.s);
  c.out = out;
  return out;
}

void ItemRouter::backward(double dalpha, double kl_weight, const Cache& cache) {
  const RouterOutput& o = cache.out;
  Mat dg(1, 1);
  dg(0, 0) = dalpha * o.alpha * (1.0 - o.alpha);
  Mat dz_r = gate.backward(dg, cache.cg, nullptr, true, nullptr);

  Mat dm = dz_r;
  Mat ds = Mat::Zero(1, o.s.size());
  if (cache.noise.size() != 0) {
    // z_r = m + exp(s/2) .* eps, so ds gets dz_r .* eps .* exp(s/2) / 2.
    ds = dz_r.cwiseProduct(
        (cache.noise.array() * (o.s.array() / 2.0).exp() * 0.5).matrix().transpose());
  }
  if (kl_weight != 0.0) {
    dm += kl_weight * o.m.transpose();
    ds += kl_weight * 0.5 * ((o.s.array().exp() - 1.0).matrix().transpose());
  }
  Mat dh2 = m_head.backward(dm, cache.cm, nullptr, true, nullptr);
  dh2 += s_head.backward(ds, cache.cs, nullptr, true, nullptr);
  Mat dh1 = l2.backward(tanh_backward(cache.h2, dh2), cache.c2, nullptr, true, nullptr);
  l1.backward(tanh_backward(cache.h1, dh1), cache.c1, nullptr, false, nullptr);
}

void ItemRouter::collect(ParamList& out) {
  l1.collect_base(out);
  l2.collect_base(out);
  m_head.collect_base(out);
  s_head.collect_base(out);
  gate.collect_base(out);
}

uint64_t ItemRouter::weights_hash() const {
  auto* self = const_cast<ItemRouter*>(this);
  ParamList params;
  self->collect(params);
  uint64_t h = fnv1a64("item_router");
  for (const Param* p : params) {
    h = fnv1a64(p->name, h);
    h = hash_matrix(p->value, h);
  }
  return h;
}

void ItemRouter::save(const std::filesystem::path& path) const {
  auto* self = const_cast<ItemRouter*>(this);
  ParamList params;
  self->collect(params);
  nlohmann::json meta{{"kind", "item_router"},
                      {"d_in", l1.d_in()},
                      {"hidden", arch_.hidden},
                      {"d_r", arch_.d_r}};
  save_params(path, {params.data(), params.size()}, meta);
}

ItemRouter ItemRouter::load(const std::filesystem::path& path) {
  Archive ar = load_params(path);
  if (ar.meta.value("kind", "") != "item_router")
    throw Error(ErrorCode::kIntegrity, path.string() + " does not hold an item router");
  RouterArch arch;
  arch.hidden = ar.meta.at("hidden").get<int>();
  arch.d_r = ar.meta.at("d_r").get<int>();
  Rng rng(0, "router-load");
  ItemRouter router(ar.meta.at("d_in").get<int>(), arch, rng);
  ParamList params;
  router.collect(params);
  restore_params(ar, params);
  return router;
}

FusedLatent route_item(const Vec& x, const std::string& domain, const DomainAdapterSet& adapters,
                       const ItemRouter& router, bool train_mode, Rng* rng) {
  FusedLatent out;
  out.z_uni = adapters.tokenizer().encode(x);
  out.z_spec = adapters.encode_specific(x.transpose(), domain).row(0).transpose();
  out.alpha = router.forward(x, train_mode, rng, nullptr).alpha;
  out.z_fused = (1.0 - out.alpha) * out.z_uni + out.alpha * out.z_spec;
  return out;
}

std::vector<RouterEpochLog> train_router(ItemRouter& router, const Mat& items,
                                         const std::vector<std::string>& item_domains,
                                         DomainAdapterSet& adapters,
                                         const RouterTrainConfig& cfg, uint64_t seed) {
  RqVae& tok = adapters.tokenizer();
  if (!tok.frozen())
    throw Error(ErrorCode::kState, "router training requires a frozen tokenizer");
  if (!adapters.all_frozen())
    throw Error(ErrorCode::kState, "router training requires trained, frozen adapters");
  if (items.rows() == 0) throw Error(ErrorCode::kInvalidArgument, "router training needs items");
  if (static_cast<size_t>(items.rows()) != item_domains.size())
    throw Error(ErrorCode::kShape,
                strf("%ld items but %zu domain labels", items.rows(), item_domains.size()));
  if (items.cols() != router.d_in())
    throw Error(ErrorCode::kShape,
                strf("items have %ld columns, router expects %d", items.cols(), router.d_in()));
  for (const std::string& d : item_domains)
    if (!adapters.has(d))
      throw Error(ErrorCode::kLookup, "no adapter for domain '" + d + "'");
  if (cfg.vib_weight < 0.0)
    throw Error(ErrorCode::kConfig, strf("negative VIB weight %g", cfg.vib_weight));

  ParamList params;
  router.collect(params);
  AdamWConfig opt_cfg;
  opt_cfg.lr = cfg.lr;
  AdamW opt(opt_cfg);
  Rng rng(seed, "router-train");

  const int n = static_cast<int>(items.rows());
  const int bsz = std::min(cfg.batch, n);
  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);

  std::vector<RouterEpochLog> log;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng erng = rng.fork(strf("epoch%d", epoch));
    erng.shuffle(order);
    double rec_sum = 0.0, vib_sum = 0.0;
    for (int start = 0; start < n; start += bsz) {
      const int b = std::min(bsz, n - start);
      zero_grads(params);

      Mat x(b, items.cols());
      for (int i = 0; i < b; ++i) x.row(i) = items.row(order[static_cast<size_t>(start + i)]);
      Mat z_uni = tok.encode_batch(x);
      Mat z_spec(b, z_uni.cols());
      std::vector<ItemRouter::Cache> caches(static_cast<size_t>(b));
      Mat zhat(b, z_uni.cols());
      Mat spec_minus_uni(b, z_uni.cols());
      for (int i = 0; i < b; ++i) {
        const std::string& d = item_domains[static_cast<size_t>(order[static_cast<size_t>(start + i)])];
        z_spec.row(i) = adapters.encode_specific(x.row(i), d).row(0);
        RouterOutput out = router.forward(x.row(i).transpose(), true, &erng,
                                          &caches[static_cast<size_t>(i)]);
        Vec z_fused = (1.0 - out.alpha) * z_uni.row(i).transpose() +
                      out.alpha * z_spec.row(i).transpose();
        zhat.row(i) = residual_quantize(z_fused, tok.codebooks).z_hat.transpose();
        spec_minus_uni.row(i) = z_spec.row(i) - z_uni.row(i);
        vib_sum += out.kl;
      }
      MlpCoder::Cache dcache;
      Mat xhat = tok.decoder.forward(zhat, nullptr, nullptr, &dcache);
      const double batch_rec = (xhat - x).squaredNorm() / b;
      double batch_vib = 0.0;
      for (int i = 0; i < b; ++i) batch_vib += caches[static_cast<size_t>(i)].out.kl / b;
      if (!std::isfinite(batch_rec + batch_vib))
        throw Error(ErrorCode::kDivergence,
                    strf("non-finite router loss at epoch %d", epoch));
      Mat dxhat = (2.0 / b) * (xhat - x);
      // Straight-through across quantization: the decoder's input gradient is
      // taken as the fused latent's gradient.
      Mat dz_fused = tok.decoder.backward(dxhat, dcache, nullptr, true);
      for (int i = 0; i < b; ++i) {
        const double dalpha = dz_fused.row(i).dot(spec_minus_uni.row(i));
        router.backward(dalpha, cfg.vib_weight / b, caches[static_cast<size_t>(i)]);
      }
      opt.step(params);
      rec_sum += batch_rec * b;
    }
    log.push_back({rec_sum / n, vib_sum / n});
  }
  return log;
}

FusedAssignment assign_fused_sids(const std::vector<std::string>& ids, const Mat& embeddings,
                                  const std::vector<std::string>& item_domains,
                                  const DomainAdapterSet& adapters, const ItemRouter& router) {
  if (ids.size() != static_cast<size_t>(embeddings.rows()) || ids.size() != item_domains.size())
    throw Error(ErrorCode::kShape,
                strf("%zu ids, %ld embeddings, %zu domain labels", ids.size(), embeddings.rows(),
                     item_domains.size()));
  const RqVae& tok = adapters.tokenizer();
  if (!tok.frozen())
    throw Error(ErrorCode::kState, "fused assignment requires a frozen tokenizer");

  Mat fused(embeddings.rows(), tok.config().latent_dim);
  FusedAssignment out;
  out.report.reserve(ids.size());
  for (long i = 0; i < embeddings.rows(); ++i) {
    FusedLatent fl = route_item(embeddings.row(i).transpose(), item_domains[static_cast<size_t>(i)],
                                adapters, router, false);
    fused.row(i) = fl.z_fused.transpose();
    out.report.push_back({ids[static_cast<size_t>(i)], item_domains[static_cast<size_t>(i)],
                          fl.alpha});
  }
  out.sids = assign_sids(ids, fused, tok.codebooks);
  std::sort(out.report.begin(), out.report.end(),
            [](const RoutingRow& a, const RoutingRow& b) { return a.item_id < b.item_id; });
  return out;
}

void write_routing_report_tsv(const std::filesystem::path& path,
                              const std::vector<RoutingRow>& rows) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  for (const RoutingRow& r : rows)
    out << r.item_id << '\t' << r.domain << '\t' << strf("%.6f", r.alpha) << '\n';
  if (!out.good()) throw Error(ErrorCode::kIo, "failed writing " + path.string());
}

void write_embedding_dump_tsv(const std::filesystem::path& path,
                              const std::vector<std::string>& ids,
                              const std::vector<std::string>& item_domains,
                              const DomainAdapterSet& adapters, const ItemRouter& router,
                              const Mat& embeddings) {
  if (ids.size() != static_cast<size_t>(embeddings.rows()) || ids.size() != item_domains.size())
    throw Error(ErrorCode::kShape, "embedding dump inputs disagree in length");
  std::vector<size_t> order(ids.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return ids[a] < ids[b]; });
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  auto emit = [&](const std::string& id, const std::string& domain, const char* kind,
                  const Vec& v) {
    out << id << '\t' << domain << '\t' << kind << '\t';
    for (long j = 0; j < v.size(); ++j) out << (j ? "," : "") << strf("%.6f", v[j]);
    out << '\n';
  };
  for (size_t idx : order) {
    FusedLatent fl = route_item(embeddings.row(static_cast<long>(idx)).transpose(),
                                item_domains[idx], adapters, router, false);
    emit(ids[idx], item_domains[idx], "z_uni", fl.z_uni);
    emit(ids[idx], item_domains[idx], "z_spec", fl.z_spec);
    emit(ids[idx], item_domains[idx], "z_fused", fl.z_fused);
  }
  if (!out.good()) throw Error(ErrorCode::kIo, "failed writing " + path.string());
}

}  // namespace gencdr
