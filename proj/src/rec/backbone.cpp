#include "rec/backbone.hpp"

#include <numeric>

namespace gencdr {

namespace {

// `act` restricted to the adapters a layer group actually carries, plus the
// source column of each kept name so mixing-weight gradients can be scattered
// back into the full activation's column order.
struct ScopedAct {
  LoraActivation act;
  Mat per_pos;
  std::vector<long> src;
  bool any = false;

  const LoraActivation* get() const { return any ? &act : nullptr; }
};

// Fills `out` in place: `out.act.per_pos` may point at `out.per_pos`, so the
// object must already live at its final address.
void restrict_act(ScopedAct& out, const LoraActivation* full, bool AdapterScope::*flag,
                  const std::vector<std::pair<std::string, AdapterScope>>& scopes) {
  if (!full) return;
  for (size_t k = 0; k < full->names.size(); ++k) {
    for (const auto& [name, scope] : scopes) {
      if (name != full->names[k] || !(scope.*flag)) continue;
      out.act.names.push_back(full->names[k]);
      out.src.push_back(static_cast<long>(k));
      break;
    }
  }
  if (out.act.names.empty()) return;
  const long n = static_cast<long>(out.src.size());
  if (full->per_pos) {
    out.per_pos.resize(full->per_pos->rows(), n);
    for (long k = 0; k < n; ++k) out.per_pos.col(k) = full->per_pos->col(out.src[static_cast<size_t>(k)]);
    out.act.per_pos = &out.per_pos;
  } else {
    out.act.weights.resize(n);
    for (long k = 0; k < n; ++k) out.act.weights[k] = full->weights[out.src[static_cast<size_t>(k)]];
  }
  out.any = true;
}

void scatter_mix(Mat* dmix, const Mat& part, const std::vector<long>& src) {
  if (!dmix || part.size() == 0) return;
  for (size_t k = 0; k < src.size(); ++k) dmix->col(src[k]) += part.col(static_cast<long>(k));
}

}  // namespace

RecBackbone::RecBackbone(const RecBackboneConfig& cfg, Rng& rng) : cfg_(cfg) {
  if (cfg.vocab < 2) throw Error(ErrorCode::kConfig, "backbone vocabulary must hold two tokens");
  if (cfg.d_model < 1 || cfg.d_ff < 1 || cfg.num_blocks < 1 || cfg.max_pos < 1)
    throw Error(ErrorCode::kConfig, "backbone dimensions must be positive");
  tok_emb = Embedding("rec.tok", cfg.vocab, cfg.d_model);
  tok_emb.table.init_gaussian(rng, 0.02);
  pos_emb = Embedding("rec.pos", cfg.max_pos, cfg.d_model);
  pos_emb.table.init_gaussian(rng, 0.02);
  for (int b = 0; b < cfg.num_blocks; ++b) {
    Block blk;
    std::string bn = strf("rec.b%d", b);
    blk.ln1 = LayerNorm(bn + ".ln1", cfg.d_model);
    blk.attn = MultiHeadAttention(bn + ".attn", cfg.d_model, cfg.num_heads, rng);
    blk.ln2 = LayerNorm(bn + ".ln2", cfg.d_model);
    blk.ff1 = LoraLinear(bn + ".ff1", cfg.d_ff, cfg.d_model, true);
    blk.ff2 = LoraLinear(bn + ".ff2", cfg.d_model, cfg.d_ff, true);
    blk.ff1.init_xavier(rng);
    blk.ff2.init_xavier(rng);
    blocks.push_back(std::move(blk));
  }
  ln_f = LayerNorm("rec.lnf", cfg.d_model);
  // The head stays zero so an untrained model is exactly the uniform
  // predictor: initial cross-entropy is ln(vocab) per token.
  head = LoraLinear("rec.head", cfg.vocab, cfg.d_model, false);
}

Mat RecBackbone::forward(std::span<const int> tokens, const LoraActivation* act, Rng* dropout_rng,
                         BackboneCache* cache) const {
  const long t = static_cast<long>(tokens.size());
  if (t == 0) throw Error(ErrorCode::kInvalidArgument, "empty token sequence");
  if (t > cfg_.max_pos)
    throw Error(ErrorCode::kConstraint,
                strf("sequence of %ld tokens exceeds %d positions", t, cfg_.max_pos));
  if (act)
    for (const std::string& n : act->names)
      if (!has_adapter(n)) throw Error(ErrorCode::kLookup, "no adapter named " + n + " on the backbone");
  ScopedAct attn_act, ffn_act, head_act;
  restrict_act(attn_act, act, &AdapterScope::attention, adapters_);
  restrict_act(ffn_act, act, &AdapterScope::ffn, adapters_);
  restrict_act(head_act, act, &AdapterScope::head, adapters_);

  std::vector<int> ids(tokens.begin(), tokens.end());
  std::vector<int> pos_ids(static_cast<size_t>(t));
  std::iota(pos_ids.begin(), pos_ids.end(), 0);
  Mat h = tok_emb.forward(ids) + pos_emb.forward(pos_ids);

  if (cache) {
    cache->ids = ids;
    cache->pos_ids = pos_ids;
    cache->blocks.assign(blocks.size(), RecBlockCache{});
  }
  auto* self = const_cast<RecBackbone*>(this);
  for (size_t b = 0; b < blocks.size(); ++b) {
    Block& blk = self->blocks[b];
    RecBlockCache* bc = cache ? &cache->blocks[b] : nullptr;
    if (bc && cache->want_mix) {
      bc->attn.q.keep_delta = bc->attn.k.keep_delta = bc->attn.v.keep_delta =
          bc->attn.o.keep_delta = true;
      bc->ff1.keep_delta = bc->ff2.keep_delta = true;
    }
    if (bc) bc->x_in = h;
    Mat a = blk.attn.forward(blk.ln1.forward(h, bc ? &bc->ln1 : nullptr), true, attn_act.get(),
                             dropout_rng, bc ? &bc->attn : nullptr);
    h += a;
    if (bc) bc->x_mid = h;
    Mat f1 = blk.ff1.forward(blk.ln2.forward(h, bc ? &bc->ln2 : nullptr), ffn_act.get(),
                             dropout_rng, bc ? &bc->ff1 : nullptr);
    Mat f_hidden = tanh_forward(f1);
    if (bc) bc->f_hidden = f_hidden;
    h += blk.ff2.forward(f_hidden, ffn_act.get(), dropout_rng, bc ? &bc->ff2 : nullptr);
  }
  if (cache && cache->want_mix) cache->head.keep_delta = true;
  Mat hf = ln_f.forward(h, cache ? &cache->lnf : nullptr);
  if (cache) cache->h_final = hf;
  return self->head.forward(hf, head_act.get(), dropout_rng, cache ? &cache->head : nullptr);
}

void RecBackbone::backward(const Mat& dlogits, BackboneCache& cache, const LoraActivation* act,
                           Mat* dmix) {
  ScopedAct attn_act, ffn_act, head_act;
  restrict_act(attn_act, act, &AdapterScope::attention, adapters_);
  restrict_act(ffn_act, act, &AdapterScope::ffn, adapters_);
  restrict_act(head_act, act, &AdapterScope::head, adapters_);
  if (dmix && act) *dmix = Mat::Zero(dlogits.rows(), static_cast<long>(act->names.size()));

  Mat part;
  Mat dhf = head.backward(dlogits, cache.head, head_act.get(), true,
                          dmix && head_act.any ? &part : nullptr);
  scatter_mix(dmix, head_act.any ? part : Mat(), head_act.src);
  Mat dh = ln_f.backward(dhf, cache.lnf);
  for (size_t bi = blocks.size(); bi-- > 0;) {
    Block& blk = blocks[bi];
    RecBlockCache& c = cache.blocks[bi];
    Mat df_hidden = blk.ff2.backward(dh, c.ff2, ffn_act.get(), true,
                                     dmix && ffn_act.any ? &part : nullptr);
    scatter_mix(dmix, ffn_act.any ? part : Mat(), ffn_act.src);
    Mat df1 = tanh_backward(c.f_hidden, df_hidden);
    Mat dln2 = blk.ff1.backward(df1, c.ff1, ffn_act.get(), true,
                                dmix && ffn_act.any ? &part : nullptr);
    scatter_mix(dmix, ffn_act.any ? part : Mat(), ffn_act.src);
    Mat dmid = dh + blk.ln2.backward(dln2, c.ln2);
    Mat dattn = blk.attn.backward(dmid, c.attn, true, attn_act.get(),
                                  dmix && attn_act.any ? &part : nullptr);
    scatter_mix(dmix, attn_act.any ? part : Mat(), attn_act.src);
    Mat dln1 = blk.ln1.backward(dattn, c.ln1);
    dh = dmid + dln1;
  }
  tok_emb.backward(cache.ids, dh);
  pos_emb.backward(cache.pos_ids, dh);
}

void RecBackbone::add_adapter(const std::string& name, int rank, double alpha, double dropout,
                              Rng& rng, const AdapterScope& scope) {
  if (!scope.attention && !scope.ffn && !scope.head)
    throw Error(ErrorCode::kConfig, "adapter '" + name + "' attaches to no layer group");
  if (has_adapter(name)) throw Error(ErrorCode::kState, "adapter already attached: " + name);
  for (Block& blk : blocks) {
    if (scope.attention) blk.attn.add_adapter(name, rank, alpha, dropout, rng);
    if (scope.ffn) {
      blk.ff1.add_adapter(name, rank, alpha, dropout, rng);
      blk.ff2.add_adapter(name, rank, alpha, dropout, rng);
    }
  }
  if (scope.head) head.add_adapter(name, rank, alpha, dropout, rng);
  adapters_.emplace_back(name, scope);
}

bool RecBackbone::has_adapter(const std::string& name) const {
  for (const auto& [n, _] : adapters_)
    if (n == name) return true;
  return false;
}

const AdapterScope& RecBackbone::scope_of(const std::string& name) const {
  for (const auto& [n, scope] : adapters_)
    if (n == name) return scope;
  throw Error(ErrorCode::kLookup, "no adapter named " + name + " on the backbone");
}

void RecBackbone::collect_base(ParamList& out) {
  out.push_back(&tok_emb.table);
  out.push_back(&pos_emb.table);
  for (Block& blk : blocks) {
    blk.ln1.collect(out);
    blk.attn.collect_base(out);
    blk.ln2.collect(out);
    blk.ff1.collect_base(out);
    blk.ff2.collect_base(out);
  }
  ln_f.collect(out);
  head.collect_base(out);
}

void RecBackbone::collect_adapter(const std::string& name, ParamList& out) {
  const AdapterScope& scope = scope_of(name);
  for (Block& blk : blocks) {
    if (scope.attention) blk.attn.collect_adapter(name, out);
    if (scope.ffn) {
      blk.ff1.collect_adapter(name, out);
      blk.ff2.collect_adapter(name, out);
    }
  }
  if (scope.head) head.collect_adapter(name, out);
}

void RecBackbone::freeze_base() {
  ParamList params;
  collect_base(params);
  for (Param* p : params) p->frozen = true;
}

void RecBackbone::freeze_adapter(const std::string& name) {
  ParamList params;
  collect_adapter(name, params);
  for (Param* p : params) p->frozen = true;
}

uint64_t RecBackbone::base_hash() const {
  ParamList params;
  const_cast<RecBackbone*>(this)->collect_base(params);
  uint64_t h = fnv1a64("rec-base");
  for (const Param* p : params) {
    h = fnv1a64(p->name, h);
    h = hash_matrix(p->value, h);
  }
  return h;
}

uint64_t RecBackbone::adapter_hash(const std::string& name) const {
  ParamList params;
  const_cast<RecBackbone*>(this)->collect_adapter(name, params);
  uint64_t h = fnv1a64(name);
  for (const Param* p : params) {
    h = fnv1a64(p->name, h);
    h = hash_matrix(p->value, h);
  }
  return h;
}

}  // namespace gencdr
