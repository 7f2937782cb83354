#include "rec/model.hpp"

#include <algorithm>
#include <numeric>

#include "nn/archive.hpp"
#include "nn/ops.hpp"
#include "nn/optimizer.hpp"

namespace gencdr {

UniversalExpertMix::UniversalExpertMix(RecBackbone& backbone, const ExpertConfig& cfg, Rng& rng)
    : cfg_(cfg) {
  if (cfg.num_experts < 0)
    throw Error(ErrorCode::kConfig, strf("negative expert count %d", cfg.num_experts));
  for (int i = 0; i < cfg.num_experts; ++i) {
    std::string name = strf("uni%d", i);
    backbone.add_adapter(name, cfg.rank, cfg.alpha, cfg.dropout, rng);
    names_.push_back(std::move(name));
  }
  // Zero weights make softmax(gate(.)) uniform, so an untrained gate and the
  // "w/o MoE Gate (Avg.)" ablation coincide at initialization.  With zero
  // experts (the backbone-only ablation) the gate exists but never runs.
  gate = LoraLinear("mix.gate", std::max(cfg.num_experts, 1), backbone.config().d_model, true);
}

Vec UniversalExpertMix::gate_weights(const RecBackbone& backbone, std::span<const int> tokens,
                                     LoraCache* cache, Vec* mean_emb) const {
  const int n = num_experts();
  if (tokens.empty()) throw Error(ErrorCode::kInvalidArgument, "empty token sequence");
  Vec mean = Vec::Zero(backbone.config().d_model);
  for (size_t t = 0; t < tokens.size(); ++t)
    mean += backbone.tok_emb.row(tokens[t]) + backbone.pos_emb.row(static_cast<int>(t));
  mean /= static_cast<double>(tokens.size());
  if (mean_emb) *mean_emb = mean;
  if (n == 0) return Vec();
  if (average) return Vec::Constant(n, 1.0 / n);
  Mat logits = gate.forward(mean.transpose(), nullptr, nullptr, cache);
  return softmax(logits.row(0).transpose());
}

uint64_t UniversalExpertMix::gate_hash() const {
  ParamList params;
  const_cast<UniversalExpertMix*>(this)->collect_gate(params);
  uint64_t h = fnv1a64("moe-gate");
  for (const Param* p : params) {
    h = fnv1a64(p->name, h);
    h = hash_matrix(p->value, h);
  }
  return h;
}

namespace {

Mat mixture_forward(const RecBackbone& backbone, const UniversalExpertMix& mix,
                    const std::string* domain, std::span<const int> tokens, Rng* dropout_rng,
                    UniversalCache* cache, Vec* h_t) {
  UniversalCache local;
  UniversalCache& c = cache ? *cache : local;
  c.g = mix.gate_weights(backbone, tokens, cache ? &c.gate : nullptr, &c.mean_emb);
  c.experts = mix.num_experts();
  c.act.names = mix.expert_names();
  c.act.weights = c.g;
  if (domain) {
    std::string name = RecModel::specific_name(*domain);
    if (!backbone.has_adapter(name))
      throw Error(ErrorCode::kLookup, "no specific adapter for domain '" + *domain + "'");
    c.act.names.push_back(std::move(name));
    c.act.weights.conservativeResize(c.experts + 1);
    c.act.weights[c.experts] = 1.0;
  }
  BackboneCache* bb = (cache || h_t) ? &c.bb : nullptr;
  const LoraActivation* act = c.act.names.empty() ? nullptr : &c.act;
  Mat logits = backbone.forward(tokens, act, dropout_rng, bb);
  if (h_t) *h_t = c.bb.h_final.row(c.bb.h_final.rows() - 1).transpose();
  return logits;
}

}  // namespace

Mat universal_forward(const RecBackbone& backbone, const UniversalExpertMix& mix,
                      std::span<const int> tokens, Rng* dropout_rng, UniversalCache* cache,
                      Vec* h_t) {
  return mixture_forward(backbone, mix, nullptr, tokens, dropout_rng, cache, h_t);
}

Mat specific_forward(const RecBackbone& backbone, const UniversalExpertMix& mix,
                     const std::string& domain, std::span<const int> tokens, Rng* dropout_rng,
                     UniversalCache* cache, Vec* h_t) {
  return mixture_forward(backbone, mix, &domain, tokens, dropout_rng, cache, h_t);
}

void universal_backward(RecBackbone& backbone, UniversalExpertMix& mix, const Mat& dlogits,
                        UniversalCache& cache) {
  Mat dmixw;
  const LoraActivation* act = cache.act.names.empty() ? nullptr : &cache.act;
  backbone.backward(dlogits, cache.bb, act, act && cache.bb.want_mix ? &dmixw : nullptr);
  if (!cache.bb.want_mix || mix.average || cache.experts < 2) return;
  // Per-expert gradient: the mixing weight is shared by every position and
  // adapter-bearing layer, so it is the sum of the per-position entries.
  const int n = cache.experts;
  Vec dg(n);
  for (int k = 0; k < n; ++k) dg[k] = dmixw.col(k).sum();
  const double inner = cache.g.head(n).dot(dg);
  Vec dlogit = cache.g.head(n).cwiseProduct(dg - Vec::Constant(n, inner));
  Mat dmean = mix.gate.backward(dlogit.transpose(), cache.gate, nullptr, true, nullptr);
  const long t = static_cast<long>(cache.bb.ids.size());
  Mat demb = (dmean / static_cast<double>(t)).replicate(t, 1);
  backbone.tok_emb.backward(cache.bb.ids, demb);
  backbone.pos_emb.backward(cache.bb.pos_ids, demb);
}

Vec fuse_predictions(const Vec& p_uni, const Vec& p_spec, double gamma) {
  if (p_uni.size() != p_spec.size())
    throw Error(ErrorCode::kShape, strf("fusing distributions of size %ld and %ld",
                                        long(p_uni.size()), long(p_spec.size())));
  if (!(gamma >= 0.0 && gamma <= 1.0))
    throw Error(ErrorCode::kInvalidArgument, strf("gamma %g outside [0, 1]", gamma));
  return (1.0 - gamma) * p_uni + gamma * p_spec;
}

double user_route(const Vec& h_t, const UserRouter& router, bool train_mode, Rng* rng) {
  return router.forward(h_t, train_mode, rng, nullptr).alpha;
}

RecModel::RecModel(const RecBackboneConfig& backbone_cfg, const ExpertConfig& experts,
                   uint64_t seed) {
  Rng rng(seed, "rec-model");
  backbone = RecBackbone(backbone_cfg, rng);
  Rng erng = rng.fork("experts");
  mix = UniversalExpertMix(backbone, experts, erng);
}

void RecModel::add_specific(const std::string& domain, const SpecificConfig& cfg, uint64_t seed) {
  if (domain.empty()) throw Error(ErrorCode::kInvalidArgument, "empty domain name");
  if (has_specific(domain))
    throw Error(ErrorCode::kState, "domain '" + domain + "' already has a specific adapter");
  Rng rng(seed, "spec:" + domain);
  backbone.add_adapter(specific_name(domain), cfg.rank, cfg.alpha, cfg.dropout, rng);
  specifics_.emplace_back(domain, cfg);
}

bool RecModel::has_specific(const std::string& domain) const {
  return backbone.has_adapter(specific_name(domain));
}

std::vector<std::string> RecModel::specific_domains() const {
  std::vector<std::string> out;
  for (const auto& [d, _] : specifics_) out.push_back(d);
  return out;
}

const SpecificConfig& RecModel::specific_config(const std::string& domain) const {
  for (const auto& [d, cfg] : specifics_)
    if (d == domain) return cfg;
  throw Error(ErrorCode::kLookup, "no specific adapter for domain '" + domain + "'");
}

void RecModel::collect_universal(ParamList& out) {
  backbone.collect_base(out);
  for (const std::string& name : mix.expert_names()) backbone.collect_adapter(name, out);
  // A gate over fewer than two experts never influences the output, so its
  // parameters stay out of the universal training group.
  if (mix.num_experts() >= 2) mix.collect_gate(out);
}

void RecModel::freeze_universal() {
  ParamList params;
  collect_universal(params);
  for (Param* p : params) p->frozen = true;
}

bool RecModel::universal_frozen() const {
  ParamList params;
  const_cast<RecModel*>(this)->collect_universal(params);
  return std::all_of(params.begin(), params.end(), [](const Param* p) { return p->frozen; });
}

uint64_t RecModel::universal_hash() const {
  ParamList params;
  const_cast<RecModel*>(this)->collect_universal(params);
  uint64_t h = fnv1a64("rec-universal");
  for (const Param* p : params) {
    h = fnv1a64(p->name, h);
    h = hash_matrix(p->value, h);
  }
  return h;
}

void RecModel::record_phase(const std::string& phase, uint64_t seed) {
  phases_.emplace_back(phase, seed);
}

void RecModel::save(const std::filesystem::path& path) const {
  auto* self = const_cast<RecModel*>(this);
  ParamList params;
  self->collect_universal(params);
  for (const auto& [d, _] : specifics_) self->backbone.collect_adapter(specific_name(d), params);

  const RecBackboneConfig& b = backbone.config();
  const ExpertConfig& e = mix.config();
  nlohmann::json specs = nlohmann::json::array();
  for (const auto& [d, cfg] : specifics_)
    specs.push_back({{"domain", d},
                     {"rank", cfg.rank},
                     {"alpha", cfg.alpha},
                     {"dropout", cfg.dropout}});
  nlohmann::json phases = nlohmann::json::array();
  for (const auto& [phase, seed] : phases_) phases.push_back({{"phase", phase}, {"seed", seed}});
  nlohmann::json meta{{"kind", "rec_model"},
                      {"backbone",
                       {{"vocab", b.vocab},
                        {"d_model", b.d_model},
                        {"num_heads", b.num_heads},
                        {"d_ff", b.d_ff},
                        {"num_blocks", b.num_blocks},
                        {"max_pos", b.max_pos}}},
                      {"experts",
                       {{"num_experts", e.num_experts},
                        {"rank", e.rank},
                        {"alpha", e.alpha},
                        {"dropout", e.dropout}}},
                      {"average", mix.average},
                      {"specifics", specs},
                      {"phases", phases}};
  save_params(path, {params.data(), params.size()}, meta);
}

RecModel RecModel::load(const std::filesystem::path& path) {
  Archive ar = load_params(path);
  if (ar.meta.value("kind", "") != "rec_model")
    throw Error(ErrorCode::kIntegrity, "archive at " + path.string() + " is not a rec model");
  try {
    const auto& jb = ar.meta.at("backbone");
    RecBackboneConfig b{jb.at("vocab").get<int>(),      jb.at("d_model").get<int>(),
                        jb.at("num_heads").get<int>(),  jb.at("d_ff").get<int>(),
                        jb.at("num_blocks").get<int>(), jb.at("max_pos").get<int>()};
    const auto& je = ar.meta.at("experts");
    ExpertConfig e{je.at("num_experts").get<int>(), je.at("rank").get<int>(),
                   je.at("alpha").get<double>(), je.at("dropout").get<double>()};
    RecModel model(b, e, 0);
    model.mix.average = ar.meta.value("average", false);
    for (const auto& js : ar.meta.at("specifics")) {
      SpecificConfig cfg{js.at("rank").get<int>(), js.at("alpha").get<double>(),
                         js.at("dropout").get<double>()};
      model.add_specific(js.at("domain").get<std::string>(), cfg, 0);
    }
    for (const auto& jp : ar.meta.value("phases", nlohmann::json::array()))
      model.record_phase(jp.at("phase").get<std::string>(), jp.at("seed").get<uint64_t>());
    ParamList params;
    model.collect_universal(params);
    for (const auto& d : model.specific_domains())
      model.backbone.collect_adapter(specific_name(d), params);
    restore_params(ar, params);
    return model;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kParse, strf("malformed rec model manifest: %s", e.what()));
  }
}

namespace {

// Shared epoch loop for the two autoregressive phases.  `domain` null trains
// the universal mixture (with gate gradients); otherwise only that domain's
// adapter learns over the frozen mixture.
std::vector<RecEpochLog> train_autoregressive(RecModel& model, const std::string* domain,
                                              const std::vector<std::vector<int>>& sequences,
                                              const RecTrainConfig& cfg, uint64_t seed,
                                              const std::string& rng_label,
                                              const std::string& loss_label) {
  if (cfg.epochs < 0 || cfg.lr <= 0.0 || cfg.batch < 1)
    throw Error(ErrorCode::kConfig, "bad training configuration");
  long predicted = 0;
  for (const auto& s : sequences) predicted += std::max<long>(0, static_cast<long>(s.size()) - 1);
  if (predicted == 0)
    throw Error(ErrorCode::kInvalidArgument, "no sequence offers a next-token target");

  ParamList params;
  if (domain) {
    model.backbone.collect_adapter(RecModel::specific_name(*domain), params);
  } else {
    model.collect_universal(params);
  }

  AdamWConfig opt_cfg;
  opt_cfg.lr = cfg.lr;
  AdamW opt(opt_cfg);
  Rng rng(seed, rng_label);

  const int n = static_cast<int>(sequences.size());
  const int bsz = std::min(cfg.batch, n);
  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);

  std::vector<RecEpochLog> log;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng erng = rng.fork(strf("epoch%d", epoch));
    erng.shuffle(order);
    double loss_sum = 0.0;
    long loss_count = 0;
    for (int start = 0; start < n; start += bsz) {
      const int b = std::min(bsz, n - start);
      zero_grads(params);
      long batch_tokens = 0;
      for (int i = 0; i < b; ++i) {
        const auto& seq = sequences[static_cast<size_t>(order[static_cast<size_t>(start + i)])];
        batch_tokens += std::max<long>(0, static_cast<long>(seq.size()) - 1);
      }
      if (batch_tokens == 0) continue;
      for (int i = 0; i < b; ++i) {
        const auto& seq = sequences[static_cast<size_t>(order[static_cast<size_t>(start + i)])];
        const long t = static_cast<long>(seq.size());
        if (t < 2) continue;
        UniversalCache cache;
        cache.bb.want_mix = domain == nullptr;
        Mat logits = mixture_forward(model.backbone, model.mix, domain, seq, &erng, &cache,
                                     nullptr);
        Mat dlogits = Mat::Zero(t, logits.cols());
        for (long p = 0; p + 1 < t; ++p) {
          Vec drow;
          loss_sum += softmax_xent(logits.row(p).transpose(), seq[static_cast<size_t>(p) + 1],
                                   &drow);
          dlogits.row(p) = drow.transpose() / static_cast<double>(batch_tokens);
          ++loss_count;
        }
        universal_backward(model.backbone, model.mix, dlogits, cache);
      }
      opt.step(params);
    }
    RecEpochLog entry;
    entry.loss = loss_sum / static_cast<double>(loss_count);
    if (!std::isfinite(entry.loss))
      throw Error(ErrorCode::kDivergence,
                  strf("non-finite %s loss at epoch %d", loss_label.c_str(), epoch));
    log.push_back(entry);
  }
  return log;
}

}  // namespace

std::vector<RecEpochLog> train_universal(RecModel& model,
                                         const std::vector<std::vector<int>>& sequences,
                                         const RecTrainConfig& cfg, uint64_t seed) {
  auto log =
      train_autoregressive(model, nullptr, sequences, cfg, seed, "rec-universal", "universal");
  model.freeze_universal();
  model.record_phase("universal", seed);
  return log;
}

std::vector<RecEpochLog> train_specific(RecModel& model, const std::string& domain,
                                        const std::vector<std::vector<int>>& sequences,
                                        const RecTrainConfig& cfg, uint64_t seed) {
  if (sequences.empty())
    throw Error(ErrorCode::kInvalidArgument, "no sequences for domain '" + domain + "'");
  if (!model.has_specific(domain))
    throw Error(ErrorCode::kLookup, "no specific adapter for domain '" + domain + "'");
  if (!model.universal_frozen())
    throw Error(ErrorCode::kState, "universal phase must be frozen before specific training");
  auto log = train_autoregressive(model, &domain, sequences, cfg, seed, "rec-spec:" + domain,
                                  "specific");
  model.backbone.freeze_adapter(RecModel::specific_name(domain));
  model.record_phase("specific:" + domain, seed);
  return log;
}

TargetScores score_target(const RecModel& model, std::span<const int> context,
                          std::span<const int> target, const std::string& domain) {
  if (context.empty()) throw Error(ErrorCode::kInvalidArgument, "empty context");
  if (target.empty()) throw Error(ErrorCode::kInvalidArgument, "empty target");
  for (int tk : target)
    if (tk < 0 || tk >= model.backbone.config().vocab)
      throw Error(ErrorCode::kLookup, strf("target token %d outside the vocabulary", tk));
  std::vector<int> full(context.begin(), context.end());
  full.insert(full.end(), target.begin(), target.end());
  const long ctx = static_cast<long>(context.size());
  const long m = static_cast<long>(target.size());

  TargetScores out;
  out.p_uni.resize(m);
  out.p_spec.resize(m);
  UniversalCache cache;
  Mat lu = universal_forward(model.backbone, model.mix, full, nullptr, &cache, nullptr);
  out.h_t = cache.bb.h_final.row(ctx - 1).transpose();
  for (long j = 0; j < m; ++j) {
    Vec p = softmax(lu.row(ctx - 1 + j).transpose());
    out.p_uni[j] = p[target[static_cast<size_t>(j)]];
  }
  if (model.has_specific(domain)) {
    Mat ls = specific_forward(model.backbone, model.mix, domain, full, nullptr, nullptr, nullptr);
    for (long j = 0; j < m; ++j) {
      Vec p = softmax(ls.row(ctx - 1 + j).transpose());
      out.p_spec[j] = p[target[static_cast<size_t>(j)]];
    }
  } else {
    out.p_spec = out.p_uni;
  }
  return out;
}

std::vector<UserRouterEpochLog> train_user_router(UserRouter& router, const RecModel& model,
                                                  const std::vector<RouterSample>& samples,
                                                  const UserRouterTrainConfig& cfg,
                                                  uint64_t seed) {
  if (samples.empty()) throw Error(ErrorCode::kInvalidArgument, "router training needs queries");
  if (cfg.vib_weight < 0.0)
    throw Error(ErrorCode::kConfig, strf("negative VIB weight %g", cfg.vib_weight));
  if (router.d_in() != model.backbone.config().d_model)
    throw Error(ErrorCode::kShape, strf("router reads %d features, backbone hidden size is %d",
                                        router.d_in(), model.backbone.config().d_model));
  if (!model.universal_frozen())
    throw Error(ErrorCode::kState, "router training requires a frozen universal phase");
  for (const auto& d : model.specific_domains()) {
    ParamList sp;
    const_cast<RecModel&>(model).backbone.collect_adapter(RecModel::specific_name(d), sp);
    for (const Param* p : sp)
      if (!p->frozen)
        throw Error(ErrorCode::kState, "router training requires frozen specific adapters");
  }

  // The generative stack is frozen, so every query's probabilities and h_t
  // are constants of training; score them once.
  std::vector<TargetScores> scores;
  scores.reserve(samples.size());
  for (const auto& s : samples) scores.push_back(score_target(model, s.context, s.target, s.domain));

  ParamList params;
  router.collect(params);
  AdamWConfig opt_cfg;
  opt_cfg.lr = cfg.lr;
  AdamW opt(opt_cfg);
  Rng rng(seed, "user-router");

  const int n = static_cast<int>(samples.size());
  const int bsz = std::min(cfg.batch, n);
  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);

  std::vector<UserRouterEpochLog> log;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng erng = rng.fork(strf("epoch%d", epoch));
    erng.shuffle(order);
    double pred_sum = 0.0, vib_sum = 0.0;
    for (int start = 0; start < n; start += bsz) {
      const int b = std::min(bsz, n - start);
      zero_grads(params);
      for (int i = 0; i < b; ++i) {
        const TargetScores& ts = scores[static_cast<size_t>(order[static_cast<size_t>(start + i)])];
        ItemRouter::Cache rcache;
        RouterOutput ro = router.forward(ts.h_t, true, &erng, &rcache);
        const long m = ts.p_uni.size();
        double dgamma = 0.0;
        for (long j = 0; j < m; ++j) {
          const double pf = (1.0 - ro.alpha) * ts.p_uni[j] + ro.alpha * ts.p_spec[j];
          pred_sum += -std::log(pf) / static_cast<double>(m);
          dgamma += -(ts.p_spec[j] - ts.p_uni[j]) / pf / static_cast<double>(m);
        }
        vib_sum += ro.kl;
        router.backward(dgamma / b, cfg.vib_weight / b, rcache);
      }
      opt.step(params);
    }
    UserRouterEpochLog entry;
    entry.l_pred = pred_sum / n;
    entry.l_vib = vib_sum / n;
    if (!std::isfinite(entry.l_pred + entry.l_vib))
      throw Error(ErrorCode::kDivergence, strf("non-finite router loss at epoch %d", epoch));
    log.push_back(entry);
  }
  return log;
}

}  // namespace gencdr
