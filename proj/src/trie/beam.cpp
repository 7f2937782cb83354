#include "trie/beam.hpp"

#include <algorithm>
#include <cmath>

#include "nn/ops.hpp"

namespace gencdr {

namespace {

struct Entry {
  std::vector<int> tokens;
  double lp = 0.0;
  uint32_t node = PrefixTree::kRoot;
  std::unique_ptr<DecodeState> uni;
  std::unique_ptr<DecodeState> spec;
};

struct Candidate {
  size_t parent;
  int token;
  double lp;
  uint32_t node;
};

void validate(const FusedScorer& scorer, int beam_width, int k) {
  if (!scorer.universal) throw Error(ErrorCode::kInvalidArgument, "scorer has no universal model");
  if (scorer.specific && !(scorer.gamma >= 0.0 && scorer.gamma <= 1.0))
    throw Error(ErrorCode::kInvalidArgument,
                strf("fusion weight %g outside [0, 1]", scorer.gamma));
  if (k < 1) throw Error(ErrorCode::kConfig, "k must be at least 1");
  if (beam_width < k)
    throw Error(ErrorCode::kConfig, strf("beam width %d smaller than k %d", beam_width, k));
}

// Fused next-token probabilities restricted to `valid`.
Vec step_probs(const FusedScorer& s, const Entry& e, const std::vector<int>& valid) {
  if (s.order == FusionOrder::kMaskThenFuse) {
    Vec pu = masked_softmax(s.universal->logits_at(*e.uni, valid), valid);
    if (!s.specific) return pu;
    Vec ps = masked_softmax(s.specific->logits_at(*e.spec, valid), valid);
    return (1.0 - s.gamma) * pu + s.gamma * ps;
  }
  Vec p = softmax(s.universal->full_logits(*e.uni));
  if (s.specific) {
    Vec ps = softmax(s.specific->full_logits(*e.spec));
    p = (1.0 - s.gamma) * p + s.gamma * ps;
  }
  double z = 0.0;
  for (int idx : valid) {
    if (idx < 0 || idx >= p.size())
      throw Error(ErrorCode::kShape, strf("valid token %d out of vocabulary", idx));
    z += p[idx];
  }
  Vec out = Vec::Zero(p.size());
  if (z > 0.0)
    for (int idx : valid) out[idx] = p[idx] / z;
  return out;
}

// Score-descending order with lexicographic (prefix, token) tie-break.
bool candidate_less(const std::vector<Entry>& entries, const Candidate& a, const Candidate& b) {
  if (a.lp != b.lp) return a.lp > b.lp;
  const std::vector<int>& ta = entries[a.parent].tokens;
  const std::vector<int>& tb = entries[b.parent].tokens;
  for (size_t i = 0; i < ta.size(); ++i)
    if (ta[i] != tb[i]) return ta[i] < tb[i];
  return a.token < b.token;
}

std::vector<Entry> advance_beam(const FusedScorer& scorer, std::vector<Entry>& entries,
                                std::vector<Candidate>& cands, int beam_width) {
  std::sort(cands.begin(), cands.end(), [&](const Candidate& a, const Candidate& b) {
    return candidate_less(entries, a, b);
  });
  if (static_cast<int>(cands.size()) > beam_width) cands.resize(static_cast<size_t>(beam_width));
  std::vector<Entry> next;
  next.reserve(cands.size());
  for (const Candidate& c : cands) {
    Entry e;
    e.tokens = entries[c.parent].tokens;
    e.tokens.push_back(c.token);
    e.lp = c.lp;
    e.node = c.node;
    e.uni = entries[c.parent].uni->clone();
    scorer.universal->advance(*e.uni, c.token);
    if (scorer.specific) {
      e.spec = entries[c.parent].spec->clone();
      scorer.specific->advance(*e.spec, c.token);
    }
    next.push_back(std::move(e));
  }
  return next;
}

Entry make_root(const FusedScorer& scorer, std::span<const int> context) {
  Entry root;
  root.uni = scorer.universal->begin(context);
  if (scorer.specific) root.spec = scorer.specific->begin(context);
  return root;
}

}  // namespace

std::vector<BeamResult> beam_generate(const FusedScorer& scorer, std::span<const int> context,
                                      const PrefixTree& tree, int beam_width, int k) {
  validate(scorer, beam_width, k);
  std::vector<Entry> entries;
  entries.push_back(make_root(scorer, context));
  for (int level = 0; level < tree.depth(); ++level) {
    std::vector<Candidate> cands;
    for (size_t idx = 0; idx < entries.size(); ++idx) {
      const Entry& e = entries[idx];
      auto kids = tree.children(e.node);
      std::vector<int> valid;
      valid.reserve(kids.size());
      for (const auto& edge : kids) valid.push_back(edge.token);
      Vec p = step_probs(scorer, e, valid);
      for (const auto& edge : kids)
        cands.push_back(Candidate{idx, edge.token, e.lp + std::log(p[edge.token]), edge.node});
    }
    entries = advance_beam(scorer, entries, cands, beam_width);
  }
  std::vector<BeamResult> out;
  for (const Entry& e : entries) {
    if (static_cast<int>(out.size()) == k) break;
    out.push_back(BeamResult{tree.leaf_item(e.node), e.lp, e.tokens});
  }
  return out;
}

UnconstrainedResult unconstrained_generate(const FusedScorer& scorer,
                                           std::span<const int> context, const PrefixTree& tree,
                                           int beam_width, int k) {
  validate(scorer, beam_width, k);
  const int vocab = scorer.universal->vocab_size();
  std::vector<Entry> entries;
  entries.push_back(make_root(scorer, context));
  for (int level = 0; level < tree.depth(); ++level) {
    std::vector<Candidate> cands;
    for (size_t idx = 0; idx < entries.size(); ++idx) {
      const Entry& e = entries[idx];
      Vec p = softmax(scorer.universal->full_logits(*e.uni));
      if (scorer.specific) {
        Vec ps = softmax(scorer.specific->full_logits(*e.spec));
        p = (1.0 - scorer.gamma) * p + scorer.gamma * ps;
      }
      for (int tok = 0; tok < vocab; ++tok)
        cands.push_back(Candidate{idx, tok, e.lp + std::log(p[tok]), 0});
    }
    entries = advance_beam(scorer, entries, cands, beam_width);
  }
  UnconstrainedResult result;
  result.proposals = static_cast<int>(entries.size());
  for (const Entry& e : entries) {
    uint32_t node = PrefixTree::kRoot;
    bool ok = true;
    for (int tok : e.tokens) {
      int64_t next = tree.child(node, tok);
      if (next < 0) {
        ok = false;
        break;
      }
      node = static_cast<uint32_t>(next);
    }
    if (ok && tree.is_leaf(node)) {
      if (static_cast<int>(result.ranked.size()) < k)
        result.ranked.push_back(BeamResult{tree.leaf_item(node), e.lp, e.tokens});
    } else {
      result.invalid_paths.push_back(e.tokens);
    }
  }
  return result;
}

}  // namespace gencdr
