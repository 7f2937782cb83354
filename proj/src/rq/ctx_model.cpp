#include "rq/ctx_model.hpp"

#include <algorithm>

namespace gencdr {

CtxModel::CtxModel(const std::string& name, const std::vector<int>& level_sizes, int d_ctx,
                   int num_heads, int d_ff, int num_blocks, Rng& rng)
    : level_sizes_(level_sizes) {
  int total = 0;
  for (int k : level_sizes_) {
    if (k < 2) throw Error(ErrorCode::kInvalidArgument, "codebook level too small for MTM");
    offsets_.push_back(total);
    total += k;
  }
  mask_token_ = total;
  tok_emb_ = Embedding(name + ".tok", total + 1, d_ctx);
  tok_emb_.table.init_gaussian(rng, 0.02);
  level_emb_ = Embedding(name + ".pos", num_levels(), d_ctx);
  level_emb_.table.init_gaussian(rng, 0.02);
  for (int b = 0; b < num_blocks; ++b) {
    Block blk;
    std::string bn = strf("%s.b%d", name.c_str(), b);
    blk.ln1 = LayerNorm(bn + ".ln1", d_ctx);
    blk.attn = MultiHeadAttention(bn + ".attn", d_ctx, num_heads, rng);
    blk.ln2 = LayerNorm(bn + ".ln2", d_ctx);
    blk.ff1 = LoraLinear(bn + ".ff1", d_ff, d_ctx, true);
    blk.ff2 = LoraLinear(bn + ".ff2", d_ctx, d_ff, true);
    blk.ff1.init_xavier(rng);
    blk.ff2.init_xavier(rng);
    blocks_.push_back(std::move(blk));
  }
  ln_f_ = LayerNorm(name + ".lnf", d_ctx);
  for (size_t d = 0; d < level_sizes_.size(); ++d) {
    heads_.emplace_back(strf("%s.head%zu", name.c_str(), d), level_sizes_[d], d_ctx, true);
    heads_.back().init_xavier(rng);
  }
}

double CtxModel::loss(const std::vector<int>& codes, const std::vector<int>& mask_positions,
                      bool with_grad, double grad_scale) {
  const int m = num_levels();
  if (static_cast<int>(codes.size()) != m)
    throw Error(ErrorCode::kShape, strf("expected %d codes, got %zu", m, codes.size()));
  if (mask_positions.empty())
    throw Error(ErrorCode::kInvalidArgument, "masked-code loss needs at least one masked position");
  std::vector<int> masked = mask_positions;
  std::sort(masked.begin(), masked.end());
  masked.erase(std::unique(masked.begin(), masked.end()), masked.end());
  for (int p : masked)
    if (p < 0 || p >= m)
      throw Error(ErrorCode::kInvalidArgument, strf("mask position %d outside [0, %d)", p, m));
  if (m == 1 && static_cast<int>(masked.size()) == m)
    throw Error(ErrorCode::kConstraint,
                "degenerate context: every code of a single-level id is masked");

  std::vector<int> ids(static_cast<size_t>(m));
  std::vector<bool> is_masked(static_cast<size_t>(m), false);
  for (int p : masked) is_masked[static_cast<size_t>(p)] = true;
  std::vector<int> level_ids(static_cast<size_t>(m));
  for (int d = 0; d < m; ++d) {
    int c = codes[static_cast<size_t>(d)];
    if (c < 0 || c >= level_sizes_[static_cast<size_t>(d)])
      throw Error(ErrorCode::kShape, strf("code %d out of range at level %d", c, d));
    ids[static_cast<size_t>(d)] =
        is_masked[static_cast<size_t>(d)] ? mask_token_ : offsets_[static_cast<size_t>(d)] + c;
    level_ids[static_cast<size_t>(d)] = d;
  }

  // Forward.
  struct BlockCache {
    LayerNormCache ln1, ln2;
    AttentionCache attn;
    LoraCache ff1, ff2;
    Mat x_in, x_mid, f_hidden;
  };
  Mat h = tok_emb_.forward(ids) + level_emb_.forward(level_ids);
  std::vector<BlockCache> caches(blocks_.size());
  for (size_t b = 0; b < blocks_.size(); ++b) {
    Block& blk = blocks_[b];
    BlockCache& c = caches[b];
    c.x_in = h;
    Mat a = blk.attn.forward(blk.ln1.forward(h, with_grad ? &c.ln1 : nullptr), false, nullptr,
                             nullptr, with_grad ? &c.attn : nullptr);
    h += a;
    c.x_mid = h;
    Mat f1 = blk.ff1.forward(blk.ln2.forward(h, with_grad ? &c.ln2 : nullptr), nullptr, nullptr,
                             with_grad ? &c.ff1 : nullptr);
    c.f_hidden = tanh_forward(f1);
    h += blk.ff2.forward(c.f_hidden, nullptr, nullptr, with_grad ? &c.ff2 : nullptr);
  }
  LayerNormCache lnf_cache;
  Mat hf = ln_f_.forward(h, with_grad ? &lnf_cache : nullptr);

  double total = 0.0;
  Mat dhf = Mat::Zero(hf.rows(), hf.cols());
  for (int p : masked) {
    LoraLinear& head = heads_[static_cast<size_t>(p)];
    Mat row = hf.row(p);
    LoraCache hc;
    Mat logits = head.forward(row, nullptr, nullptr, with_grad ? &hc : nullptr);
    Vec dlogits;
    total += softmax_xent(logits.row(0).transpose(), codes[static_cast<size_t>(p)],
                          with_grad ? &dlogits : nullptr);
    if (with_grad) {
      double scale = grad_scale / static_cast<double>(masked.size());
      Mat dl = (scale * dlogits).transpose();
      Mat drow = head.backward(dl, hc, nullptr, true, nullptr);
      dhf.row(p) += drow.row(0);
    }
  }
  double mean_loss = total / static_cast<double>(masked.size());

  if (with_grad) {
    Mat dh = ln_f_.backward(dhf, lnf_cache);
    for (size_t bi = blocks_.size(); bi-- > 0;) {
      Block& blk = blocks_[bi];
      BlockCache& c = caches[bi];
      // FFN branch.
      Mat df_hidden = blk.ff2.backward(dh, c.ff2, nullptr, true, nullptr);
      Mat df1 = tanh_backward(c.f_hidden, df_hidden);
      Mat dln2 = blk.ff1.backward(df1, c.ff1, nullptr, true, nullptr);
      Mat dmid = dh + blk.ln2.backward(dln2, c.ln2);
      // Attention branch.
      Mat dattn = blk.attn.backward(dmid, c.attn, false, nullptr, nullptr);
      Mat dln1 = blk.ln1.backward(dattn, c.ln1);
      dh = dmid + dln1;
    }
    tok_emb_.backward(ids, dh);
    level_emb_.backward(level_ids, dh);
  }
  return mean_loss;
}

void CtxModel::collect(ParamList& out) {
  out.push_back(&tok_emb_.table);
  out.push_back(&level_emb_.table);
  for (Block& blk : blocks_) {
    blk.ln1.collect(out);
    blk.attn.collect_base(out);
    blk.ln2.collect(out);
    blk.ff1.collect_base(out);
    blk.ff2.collect_base(out);
  }
  ln_f_.collect(out);
  for (LoraLinear& h : heads_) h.collect_base(out);
}

}  // namespace gencdr
