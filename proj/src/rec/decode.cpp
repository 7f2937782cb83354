#include "rec/decode.hpp"

#include <algorithm>

#include "nn/ops.hpp"

namespace gencdr {

namespace {

// Key/value rows of one block, grown a row at a time.  Only the first
// `filled` rows are meaningful; capacity doubles so appends stay amortized.
struct BlockKv {
  Mat k, v;
  long filled = 0;

  void reserve(long rows, int d) {
    k.resize(rows, d);
    v.resize(rows, d);
  }
  void append(const Mat& krow, const Mat& vrow) {
    if (filled == k.rows()) {
      long cap = std::max<long>(4, 2 * k.rows());
      k.conservativeResize(cap, krow.cols());
      v.conservativeResize(cap, vrow.cols());
    }
    k.row(filled) = krow.row(0);
    v.row(filled) = vrow.row(0);
    ++filled;
  }
};

struct ScopedActs {
  LoraActivation attn, ffn, head;
};

const LoraActivation* maybe(const LoraActivation& a) { return a.names.empty() ? nullptr : &a; }

// Static-weight restriction of `full` to the adapters a layer group carries.
LoraActivation restrict_static(const LoraActivation& full, bool AdapterScope::*flag,
                               const RecBackbone& backbone) {
  LoraActivation out;
  std::vector<double> w;
  for (size_t i = 0; i < full.names.size(); ++i) {
    for (const auto& [name, scope] : backbone.adapters()) {
      if (name != full.names[i] || !(scope.*flag)) continue;
      out.names.push_back(name);
      w.push_back(full.weights[static_cast<long>(i)]);
      break;
    }
  }
  out.weights.resize(static_cast<long>(w.size()));
  for (size_t i = 0; i < w.size(); ++i) out.weights[static_cast<long>(i)] = w[i];
  return out;
}

struct RecState : DecodeState {
  // Immutable after begin(): activations, the context's key/value rows, and
  // its length.  Shared across beam forks.
  struct Ctx {
    ScopedActs acts;
    std::vector<BlockKv> blocks;
    int len = 0;
  };

  std::shared_ptr<const Ctx> ctx;
  std::vector<BlockKv> tail;  // generated positions only, one entry per block
  Vec h_last;                 // post-final-norm hidden at the newest position
  int pos = 0;                // positions consumed so far

  std::unique_ptr<DecodeState> clone() const override { return std::make_unique<RecState>(*this); }
};

// One token through every block at position `pos`: computes this position's
// query/key/value, attends over the context rows then the tail rows then
// itself (the full causal window), appends the new key/value rows to `tail`,
// and returns the post-final-norm hidden row.
Vec step_token(const RecBackbone& bb, const ScopedActs& acts, int token, int pos,
               const std::vector<BlockKv>* ctx, std::vector<BlockKv>& tail) {
  const int dm = bb.config().d_model;
  const int nh = bb.config().num_heads;
  const int dh = dm / nh;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  if (pos >= bb.config().max_pos)
    throw Error(ErrorCode::kConstraint,
                strf("decoding past position %d exceeds %d positions", pos, bb.config().max_pos));
  Mat x(1, dm);
  x.row(0) = (bb.tok_emb.row(token) + bb.pos_emb.row(pos)).transpose();
  for (size_t b = 0; b < bb.blocks.size(); ++b) {
    const RecBackbone::Block& blk = bb.blocks[b];
    BlockKv& t = tail[b];
    Mat xn = blk.ln1.forward(x, nullptr);
    Mat q = blk.attn.wq.forward(xn, maybe(acts.attn), nullptr, nullptr);
    Mat kk = blk.attn.wk.forward(xn, maybe(acts.attn), nullptr, nullptr);
    Mat vv = blk.attn.wv.forward(xn, maybe(acts.attn), nullptr, nullptr);
    const long nc = ctx ? (*ctx)[b].filled : 0;
    const long nt = t.filled;
    Mat concat(1, dm);
    for (int h = 0; h < nh; ++h) {
      auto qh = q.row(0).segment(h * dh, dh);
      Vec scores(nc + nt + 1);
      for (long i = 0; i < nc; ++i)
        scores[i] = qh.dot((*ctx)[b].k.row(i).segment(h * dh, dh)) * inv_sqrt;
      for (long i = 0; i < nt; ++i)
        scores[nc + i] = qh.dot(t.k.row(i).segment(h * dh, dh)) * inv_sqrt;
      scores[nc + nt] = qh.dot(kk.row(0).segment(h * dh, dh)) * inv_sqrt;
      Vec p = softmax(scores);
      Vec o = p[nc + nt] * vv.row(0).segment(h * dh, dh).transpose();
      for (long i = 0; i < nc; ++i)
        o += p[i] * (*ctx)[b].v.row(i).segment(h * dh, dh).transpose();
      for (long i = 0; i < nt; ++i)
        o += p[nc + i] * t.v.row(i).segment(h * dh, dh).transpose();
      concat.row(0).segment(h * dh, dh) = o.transpose();
    }
    x += blk.attn.wo.forward(concat, maybe(acts.attn), nullptr, nullptr);
    Mat f1 = blk.ff1.forward(blk.ln2.forward(x, nullptr), maybe(acts.ffn), nullptr, nullptr);
    x += blk.ff2.forward(tanh_forward(f1), maybe(acts.ffn), nullptr, nullptr);
    t.append(kk, vv);
  }
  return bb.ln_f.forward(x, nullptr).row(0).transpose();
}

const RecState& down(const DecodeState& state) {
  const auto* st = dynamic_cast<const RecState*>(&state);
  if (!st) throw Error(ErrorCode::kInternal, "decode state from a different step model");
  return *st;
}

}  // namespace

RecStepModel::RecStepModel(const RecModel& model, std::string domain)
    : model_(&model), domain_(std::move(domain)) {
  if (!domain_.empty() && !model.has_specific(domain_))
    throw Error(ErrorCode::kLookup, "no specific adapter for domain '" + domain_ + "'");
}

std::unique_ptr<DecodeState> RecStepModel::begin(std::span<const int> context) const {
  if (context.empty()) throw Error(ErrorCode::kInvalidArgument, "empty decoding context");
  const RecBackbone& bb = model_->backbone;
  auto ctx = std::make_shared<RecState::Ctx>();

  LoraActivation full;
  full.names = model_->mix.expert_names();
  full.weights = model_->mix.gate_weights(bb, context, nullptr, nullptr);
  if (!domain_.empty()) {
    full.names.push_back(RecModel::specific_name(domain_));
    const long n = full.weights.size();
    full.weights.conservativeResize(n + 1);
    full.weights[n] = 1.0;
  }
  ctx->acts.attn = restrict_static(full, &AdapterScope::attention, bb);
  ctx->acts.ffn = restrict_static(full, &AdapterScope::ffn, bb);
  ctx->acts.head = restrict_static(full, &AdapterScope::head, bb);

  ctx->blocks.assign(bb.blocks.size(), BlockKv{});
  for (BlockKv& blk : ctx->blocks) blk.reserve(static_cast<long>(context.size()), bb.config().d_model);
  Vec h;
  for (size_t i = 0; i < context.size(); ++i)
    h = step_token(bb, ctx->acts, context[i], static_cast<int>(i), nullptr, ctx->blocks);
  ctx->len = static_cast<int>(context.size());

  auto st = std::make_unique<RecState>();
  st->ctx = std::move(ctx);
  st->tail.assign(bb.blocks.size(), BlockKv{});
  st->h_last = std::move(h);
  st->pos = static_cast<int>(context.size());
  return st;
}

void RecStepModel::advance(DecodeState& state, int token) const {
  auto& st = const_cast<RecState&>(down(state));
  st.h_last = step_token(model_->backbone, st.ctx->acts, token, st.pos, &st.ctx->blocks, st.tail);
  ++st.pos;
}

Vec RecStepModel::logits_at(const DecodeState& state, std::span<const int> tokens) const {
  const RecState& st = down(state);
  const LoraLinear& head = model_->backbone.head;
  const LoraActivation& ha = st.ctx->acts.head;
  // Head adapters share A x across the requested tokens.
  std::vector<std::pair<double, const Mat*>> deltas;  // (weight * scale, B)
  std::vector<Vec> ax;
  for (size_t k = 0; k < ha.names.size(); ++k) {
    const LoraAdapter& ad = head.adapter(ha.names[k]);
    deltas.emplace_back(ha.weights[static_cast<long>(k)] * ad.scale, &ad.b.value);
    ax.push_back(ad.a.value * st.h_last);
  }
  Vec out = Vec::Zero(head.d_out());
  for (int t : tokens) {
    if (t < 0 || t >= head.d_out())
      throw Error(ErrorCode::kLookup, strf("token %d outside the vocabulary", t));
    double l = head.w0.value.row(t).dot(st.h_last);
    if (head.with_bias) l += head.bias.value(t, 0);
    for (size_t k = 0; k < deltas.size(); ++k)
      l += deltas[k].first * deltas[k].second->row(t).dot(ax[k]);
    out[t] = l;
  }
  return out;
}

Vec RecStepModel::full_logits(const DecodeState& state) const {
  const RecState& st = down(state);
  Mat h(1, st.h_last.size());
  h.row(0) = st.h_last.transpose();
  Mat logits =
      model_->backbone.head.forward(h, maybe(st.ctx->acts.head), nullptr, nullptr);
  return logits.row(0).transpose();
}

int RecStepModel::vocab_size() const { return model_->backbone.config().vocab; }

Vec RecStepModel::context_hidden(std::span<const int> context) const {
  auto state = begin(context);
  return down(*state).h_last;
}

}  // namespace gencdr
