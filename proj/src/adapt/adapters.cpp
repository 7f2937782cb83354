#include "adapt/adapters.hpp"

#include <algorithm>
#include <numeric>

#include "nn/archive.hpp"
#include "nn/optimizer.hpp"

namespace gencdr {

DomainAdapterSet::DomainAdapterSet(RqVae* tokenizer, AdapterConfig cfg)
    : tok_(tokenizer), cfg_(cfg) {
  if (tok_ == nullptr)
    throw Error(ErrorCode::kInvalidArgument, "adapter set needs a tokenizer");
  if (cfg_.rank < 1 || cfg_.alpha <= 0.0)
    throw Error(ErrorCode::kConfig,
                strf("adapter rank/alpha must be positive, got %d/%g", cfg_.rank, cfg_.alpha));
  if (cfg_.dropout < 0.0 || cfg_.dropout >= 1.0)
    throw Error(ErrorCode::kConfig, strf("adapter dropout %g outside [0, 1)", cfg_.dropout));
}

RqVae& DomainAdapterSet::tokenizer() const {
  if (tok_ == nullptr) throw Error(ErrorCode::kState, "adapter set is not bound to a tokenizer");
  return *tok_;
}

bool DomainAdapterSet::has(const std::string& domain) const {
  return std::find(domains_.begin(), domains_.end(), domain) != domains_.end();
}

void DomainAdapterSet::add_domain(const std::string& domain, Rng& rng) {
  if (domain.empty()) throw Error(ErrorCode::kInvalidArgument, "empty domain name");
  if (has(domain)) throw Error(ErrorCode::kState, "domain already attached: " + domain);
  tokenizer().encoder.add_adapter(domain, cfg_.rank, cfg_.alpha, cfg_.dropout, rng);
  domains_.push_back(domain);
}

Mat DomainAdapterSet::encode_specific(const Mat& x, const std::string& domain, Rng* dropout_rng,
                                      MlpCoder::Cache* cache) const {
  if (!has(domain))
    throw Error(ErrorCode::kLookup, "no adapter for domain '" + domain + "'");
  LoraActivation act = LoraActivation::uniform({domain});
  return tokenizer().encoder.forward(x, &act, dropout_rng, cache);
}

void DomainAdapterSet::collect_domain(const std::string& domain, ParamList& out) {
  if (!has(domain))
    throw Error(ErrorCode::kLookup, "no adapter for domain '" + domain + "'");
  tokenizer().encoder.collect_adapter(domain, out);
}

void DomainAdapterSet::freeze_domain(const std::string& domain) {
  ParamList params;
  collect_domain(domain, params);
  for (Param* p : params) p->frozen = true;
}

void DomainAdapterSet::freeze_all() {
  for (const std::string& d : domains_) freeze_domain(d);
}

bool DomainAdapterSet::all_frozen() const {
  auto* self = const_cast<DomainAdapterSet*>(this);
  for (const std::string& d : domains_) {
    ParamList params;
    self->collect_domain(d, params);
    for (const Param* p : params)
      if (!p->frozen) return false;
  }
  return true;
}

uint64_t DomainAdapterSet::domain_hash(const std::string& domain) const {
  auto* self = const_cast<DomainAdapterSet*>(this);
  ParamList params;
  self->collect_domain(domain, params);
  uint64_t h = fnv1a64(domain);
  for (const Param* p : params) {
    h = fnv1a64(p->name, h);
    h = hash_matrix(p->value, h);
  }
  return h;
}

void DomainAdapterSet::save(const std::filesystem::path& path) const {
  auto* self = const_cast<DomainAdapterSet*>(this);
  ParamList params;
  for (const std::string& d : domains_) self->collect_domain(d, params);
  nlohmann::json meta{{"kind", "domain_adapters"},
                      {"domains", domains_},
                      {"rank", cfg_.rank},
                      {"alpha", cfg_.alpha},
                      {"dropout", cfg_.dropout},
                      {"epochs", cfg_.epochs},
                      {"lr", cfg_.lr},
                      {"batch", cfg_.batch}};
  save_params(path, {params.data(), params.size()}, meta);
}

DomainAdapterSet DomainAdapterSet::load(const std::filesystem::path& path, RqVae& tokenizer) {
  Archive ar = load_params(path);
  if (ar.meta.value("kind", "") != "domain_adapters")
    throw Error(ErrorCode::kIntegrity,
                path.string() + " does not hold domain adapters");
  AdapterConfig cfg;
  cfg.rank = ar.meta.at("rank").get<int>();
  cfg.alpha = ar.meta.at("alpha").get<double>();
  cfg.dropout = ar.meta.at("dropout").get<double>();
  cfg.epochs = ar.meta.value("epochs", cfg.epochs);
  cfg.lr = ar.meta.value("lr", cfg.lr);
  cfg.batch = ar.meta.value("batch", cfg.batch);
  DomainAdapterSet set(&tokenizer, cfg);
  Rng init_rng(0, "adapter-load");
  ParamList params;
  for (const auto& d : ar.meta.at("domains").get<std::vector<std::string>>()) {
    set.add_domain(d, init_rng);
    set.collect_domain(d, params);
  }
  restore_params(ar, params);
  return set;
}

std::vector<AdapterEpochLog> train_adapter(DomainAdapterSet& adapters, const std::string& domain,
                                           const Mat& items, uint64_t seed) {
  RqVae& tok = adapters.tokenizer();
  if (!tok.frozen())
    throw Error(ErrorCode::kState, "adapter training requires a frozen tokenizer");
  if (items.rows() == 0)
    throw Error(ErrorCode::kInvalidArgument,
                "adapter training for domain '" + domain + "' received no items");
  if (items.cols() != tok.config().input_dim)
    throw Error(ErrorCode::kShape,
                strf("items have %ld columns, tokenizer expects %d", items.cols(),
                     tok.config().input_dim));
  if (!all_finite(items))
    throw Error(ErrorCode::kInvalidArgument, "non-finite item embeddings");

  const AdapterConfig& cfg = adapters.config();
  Rng rng(seed, "adapter-" + domain);
  if (!adapters.has(domain)) {
    Rng init_rng = rng.fork("init");
    adapters.add_domain(domain, init_rng);
  }
  ParamList params;
  adapters.collect_domain(domain, params);
  AdamWConfig opt_cfg;
  opt_cfg.lr = cfg.lr;
  AdamW opt(opt_cfg);

  const int n = static_cast<int>(items.rows());
  const int bsz = std::min(cfg.batch, n);
  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);

  std::vector<AdapterEpochLog> log;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng erng = rng.fork(strf("epoch%d", epoch));
    erng.shuffle(order);
    double epoch_loss = 0.0;
    int seen = 0;
    for (int start = 0; start < n; start += bsz) {
      const int b = std::min(bsz, n - start);
      Mat x(b, items.cols());
      for (int i = 0; i < b; ++i) x.row(i) = items.row(order[static_cast<size_t>(start + i)]);

      zero_grads(params);
      LoraActivation act = LoraActivation::uniform({domain});
      MlpCoder::Cache ecache;
      Mat z = tok.encoder.forward(x, &act, &erng, &ecache);
      Mat zhat(b, z.cols());
      for (int i = 0; i < b; ++i)
        zhat.row(i) = residual_quantize(z.row(i).transpose(), tok.codebooks).z_hat.transpose();
      MlpCoder::Cache dcache;
      Mat xhat = tok.decoder.forward(zhat, nullptr, nullptr, &dcache);
      const double batch_loss = (xhat - x).squaredNorm() / b;
      if (!std::isfinite(batch_loss))
        throw Error(ErrorCode::kDivergence,
                    strf("non-finite adapter loss for domain '%s' at epoch %d", domain.c_str(),
                         epoch));
      Mat dxhat = (2.0 / b) * (xhat - x);
      Mat dz = tok.decoder.backward(dxhat, dcache, nullptr, true);
      // Quantization is a straight-through pass: the reconstruction gradient
      // reaches the adapted encoder unchanged.
      tok.encoder.backward(dz, ecache, &act, false);
      opt.step(params);
      epoch_loss += batch_loss * b;
      seen += b;
    }
    log.push_back({epoch_loss / seen});
  }
  return log;
}

}  // namespace gencdr
