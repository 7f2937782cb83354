#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <optional>
#include <set>

#include "nn/archive.hpp"
#include "nn/gradcheck.hpp"
#include "nn/ops.hpp"
#include "rec/decode.hpp"
#include "rec/vocab.hpp"
#include "trie/beam.hpp"

using namespace gencdr;

namespace {

template <typename F>
std::optional<ErrorCode> thrown(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  return std::nullopt;
}

// Two levels of four codes, two dedup suffixes, two domains: 15 tokens.
SidVocabulary demo_vocab() { return SidVocabulary({4, 4}, 2, {"books", "movies"}); }

// Eight items per domain; item i carries codes (i % 4, i / 4).
SidTable demo_sids() {
  SidTable t;
  for (int i = 0; i < 8; ++i) t.emplace_back(strf("B%d", i), SemanticId{{i % 4, i / 4}, 0});
  for (int i = 0; i < 8; ++i) t.emplace_back(strf("M%d", i), SemanticId{{i % 4, i / 4}, 0});
  return t;
}

const SemanticId& sid_of(const SidTable& sids, const std::string& id) {
  for (const auto& [item, sid] : sids)
    if (item == id) return sid;
  throw Error(ErrorCode::kLookup, "no sid for " + id);
}

// Cross-domain profile: books and movies alternate along the shared +1 chain.
std::vector<Event> cross_user(int start, int len) {
  std::vector<Event> ev;
  int cur = start;
  for (int t = 0; t < len; ++t) {
    const bool book = t % 2 == 0;
    ev.push_back({strf(book ? "B%d" : "M%d", cur), book ? "books" : "movies", t});
    cur = (cur + 1) % 8;
  }
  return ev;
}

// Movies-only profile following the planted domain-specific +3 chain.
std::vector<Event> movie_user(int start, int len) {
  std::vector<Event> ev;
  int cur = start;
  for (int t = 0; t < len; ++t) {
    ev.push_back({strf("M%d", cur), "movies", t});
    cur = (cur + 3) % 8;
  }
  return ev;
}

RecBackboneConfig rec_cfg(int vocab) {
  RecBackboneConfig cfg;
  cfg.vocab = vocab;
  cfg.d_model = 32;
  cfg.num_heads = 2;
  cfg.d_ff = 64;
  cfg.num_blocks = 2;
  cfg.max_pos = 64;
  return cfg;
}

ExpertConfig tiny_experts(double dropout = 0.05) {
  ExpertConfig e;
  e.num_experts = 2;
  e.rank = 4;
  e.alpha = 8.0;
  e.dropout = dropout;
  return e;
}

SpecificConfig tiny_specific() {
  SpecificConfig s;
  s.rank = 4;
  s.alpha = 8.0;
  s.dropout = 0.05;
  return s;
}

double mean_ce(const RecModel& model, const std::vector<std::vector<int>>& seqs,
               const std::string* domain) {
  double sum = 0.0;
  long count = 0;
  for (const auto& s : seqs) {
    Mat logits = domain
                     ? specific_forward(model.backbone, model.mix, *domain, s, nullptr, nullptr)
                     : universal_forward(model.backbone, model.mix, s, nullptr, nullptr);
    for (long p = 0; p + 1 < static_cast<long>(s.size()); ++p) {
      sum += softmax_xent(logits.row(p).transpose(), s[static_cast<size_t>(p) + 1], nullptr);
      ++count;
    }
  }
  return sum / static_cast<double>(count);
}

struct Pipeline {
  SidVocabulary vocab;
  SidTable sids;
  RecModel model;
};

// Universal phase on cross-domain +1 chains, then a movies adapter on the
// planted +3 chains.
Pipeline trained_pipeline(uint64_t seed, int uni_epochs, int spec_epochs) {
  Pipeline p{demo_vocab(), demo_sids(),
             RecModel(rec_cfg(15), tiny_experts(), seed)};
  std::vector<std::vector<int>> uni_seqs;
  for (int u = 0; u < 20; ++u)
    uni_seqs.push_back(
        encode_training_sequence(cross_user(u % 8, 8), p.sids, p.vocab, 64));
  RecTrainConfig ucfg;
  ucfg.epochs = uni_epochs;
  ucfg.lr = 1e-3;
  ucfg.batch = 8;
  train_universal(p.model, uni_seqs, ucfg, seed);

  std::vector<std::vector<int>> movie_seqs;
  for (int u = 0; u < 16; ++u)
    movie_seqs.push_back(
        encode_training_sequence(movie_user(u % 8, 8), p.sids, p.vocab, 64));
  p.model.add_specific("movies", tiny_specific(), seed + 1);
  RecTrainConfig scfg;
  scfg.epochs = spec_epochs;
  scfg.lr = 3e-3;
  scfg.batch = 8;
  train_specific(p.model, "movies", movie_seqs, scfg, seed + 2);
  return p;
}

RouterSample make_sample(const std::vector<Event>& events, const std::string& target_item,
                         const std::string& domain, const Pipeline& p) {
  RouterSample s;
  s.context = encode_history(events, p.sids, p.vocab, domain, 64);
  s.target = p.vocab.sid_tokens(sid_of(p.sids, target_item));
  s.domain = domain;
  return s;
}

}  // namespace

TEST_CASE("vocabulary blocks are disjoint and fully described") {
  SidVocabulary v = demo_vocab();
  CHECK(v.size() == 15);
  CHECK(v.levels() == 2);
  CHECK(v.tokens_per_item() == 5);
  CHECK(v.code_token(0, 0) == 0);
  CHECK(v.code_token(0, 3) == 3);
  CHECK(v.code_token(1, 0) == 4);
  CHECK(v.dedup_token(0) == 8);
  CHECK(v.dedup_token(1) == 9);
  CHECK(v.bos() == 10);
  CHECK(v.eos() == 11);
  CHECK(v.sep() == 12);
  CHECK(v.domain_tag("books") == 13);
  CHECK(v.domain_tag("movies") == 14);
  // Every token index has exactly one description.
  std::set<std::string> seen;
  for (int t = 0; t < v.size(); ++t) seen.insert(v.describe(t));
  CHECK(seen.size() == static_cast<size_t>(v.size()));
  CHECK(v.describe(0) == "L0:0");
  CHECK(v.describe(5) == "L1:1");
  CHECK(v.describe(9) == "DEDUP:1");
  CHECK(v.describe(10) == "BOS");
  CHECK(v.describe(14) == "DOM:movies");

  CHECK(v.sid_tokens(SemanticId{{1, 2}, 1}) == std::vector<int>{1, 6, 9});

  CHECK(thrown([&] { v.code_token(0, 4); }) == ErrorCode::kLookup);
  CHECK(thrown([&] { v.code_token(2, 0); }) == ErrorCode::kLookup);
  CHECK(thrown([&] { v.dedup_token(2); }) == ErrorCode::kLookup);
  CHECK(thrown([&] { v.domain_tag("games"); }) == ErrorCode::kLookup);
  CHECK(thrown([&] { v.sid_tokens(SemanticId{{1}, 0}); }) == ErrorCode::kShape);
  CHECK(thrown([] { SidVocabulary({4, 4}, 2, {"a", "a"}); }) == ErrorCode::kConfig);

  SidVocabulary back = SidVocabulary::from_json(v.to_json());
  CHECK(back.size() == v.size());
  CHECK(back.domain_tag("movies") == v.domain_tag("movies"));
  CHECK(back.describe(9) == v.describe(9));

  SidTable sids = demo_sids();
  SidVocabulary sized = SidVocabulary::from_sids({4, 4}, sids, {"books", "movies"});
  CHECK(sized.dedup_count() == 1);  // demo table has no collisions
}

TEST_CASE("history encoding follows the serialization rule") {
  SidVocabulary v({8, 8, 8}, 1, {"A", "B"});
  SidTable sids{{"x", SemanticId{{5, 2, 7}, 0}}};

  // Empty history is just the cue.
  CHECK(encode_history({}, sids, v, "B", 16) == std::vector<int>{v.bos(), v.domain_tag("B")});

  // One item: BOS, tagA, codes 5|2|7, dedup 0, SEP, tagB.
  std::vector<Event> one{{"x", "A", 0}};
  CHECK(encode_history(one, sids, v, "B", 16) ==
        std::vector<int>{v.bos(), v.domain_tag("A"), v.code_token(0, 5), v.code_token(1, 2),
                         v.code_token(2, 7), v.dedup_token(0), v.sep(), v.domain_tag("B")});

  SidVocabulary dv = demo_vocab();
  SidTable dsids = demo_sids();

  // Truncation keeps exactly the most recent items, order preserved.
  std::vector<Event> many = cross_user(0, 100);
  std::vector<int> tokens = encode_history(many, dsids, dv, "movies", 52);
  CHECK(tokens.size() == 52);
  std::vector<int> expect{dv.bos()};
  for (size_t i = 90; i < 100; ++i) {
    const Event& e = many[i];
    expect.push_back(dv.domain_tag(e.domain));
    for (int tok : dv.sid_tokens(sid_of(dsids, e.item_id))) expect.push_back(tok);
    expect.push_back(dv.sep());
  }
  expect.push_back(dv.domain_tag("movies"));
  CHECK(tokens == expect);

  // Chronological interleaving: timestamps win over input order.
  std::vector<Event> shuffled{{"B1", "books", 5}, {"M2", "movies", 1}, {"B0", "books", 3}};
  std::vector<int> ordered = encode_history(shuffled, dsids, dv, "books", 64);
  std::vector<Event> sorted{{"M2", "movies", 1}, {"B0", "books", 3}, {"B1", "books", 5}};
  CHECK(ordered == encode_history(sorted, dsids, dv, "books", 64));

  CHECK(thrown([&] { encode_history(one, sids, v, "B", 5); }) == ErrorCode::kConfig);
  std::vector<Event> unknown{{"nope", "books", 0}};
  CHECK(thrown([&] { encode_history(unknown, dsids, dv, "books", 64); }) == ErrorCode::kLookup);
  CHECK(thrown([&] { encode_history(one, sids, v, "C", 16); }) == ErrorCode::kLookup);

  // Training serialization: BOS + items, no trailing cue.
  std::vector<int> train = encode_training_sequence(one, sids, v, 16);
  CHECK(train == std::vector<int>{v.bos(), v.domain_tag("A"), v.code_token(0, 5),
                                  v.code_token(1, 2), v.code_token(2, 7), v.dedup_token(0),
                                  v.sep()});
}

TEST_CASE("token paths round-trip through the prefix tree") {
  SidVocabulary v = demo_vocab();
  SidTable sids = demo_sids();
  SidTable movies;
  for (const auto& e : sids)
    if (e.first[0] == 'M') movies.push_back(e);
  std::vector<SidPath> paths = sid_token_paths(movies, v);
  REQUIRE(paths.size() == 8);
  CHECK(paths[0].tokens == std::vector<int>{v.code_token(0, 0), v.code_token(1, 0),
                                            v.dedup_token(0)});
  PrefixTree tree = PrefixTree::build("movies", paths);
  CHECK(tree.depth() == 3);
  std::vector<SidPath> out = tree.enumerate();
  std::set<std::string> ids;
  for (const auto& sp : out) ids.insert(sp.item_id);
  CHECK(ids.size() == 8);
  for (const auto& sp : out) CHECK(sp.tokens == sid_token_paths({{sp.item_id, sid_of(sids, sp.item_id)}}, v)[0].tokens);
}

TEST_CASE("untrained model is exactly the uniform predictor") {
  Rng rng(3, "uniform");
  RecBackbone bb(rec_cfg(15), rng);
  std::vector<int> seq{10, 13, 0, 4, 8, 12};
  Mat logits = bb.forward(seq, nullptr, nullptr, nullptr);
  const double lnv = std::log(15.0);
  for (long p = 0; p < logits.rows(); ++p) {
    double ce = softmax_xent(logits.row(p).transpose(), 3, nullptr);
    CHECK(std::abs(ce - lnv) < 1e-9);
  }
}

TEST_CASE("causal masking is exact") {
  Rng rng(4, "causal");
  RecBackbone bb(rec_cfg(15), rng);
  // Give the head weight so logits actually depend on the hidden states.
  bb.head.w0.value = Mat::Zero(15, 32);
  Rng hr(5, "head");
  bb.head.w0.init_gaussian(hr, 0.3);
  std::vector<int> a{10, 13, 0, 4, 8, 12, 14, 1};
  std::vector<int> b = a;
  for (size_t i = 4; i < b.size(); ++i) b[i] = static_cast<int>((b[i] + 7) % 15);
  Mat la = bb.forward(a, nullptr, nullptr, nullptr);
  Mat lb = bb.forward(b, nullptr, nullptr, nullptr);
  CHECK((la.topRows(4) - lb.topRows(4)).cwiseAbs().maxCoeff() == 0.0);
  CHECK((la.row(4) - lb.row(4)).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("zero-initialized adapters are an exact no-op") {
  RecModel model(rec_cfg(15), tiny_experts(), 9);
  model.add_specific("movies", tiny_specific(), 10);
  Rng hr(11, "head");
  model.backbone.head.w0.init_gaussian(hr, 0.3);
  std::vector<int> seq{10, 13, 0, 4, 8, 12, 14};
  Mat bare = model.backbone.forward(seq, nullptr, nullptr, nullptr);
  Mat uni = universal_forward(model.backbone, model.mix, seq, nullptr, nullptr);
  Mat spec = specific_forward(model.backbone, model.mix, "movies", seq, nullptr, nullptr);
  CHECK((bare - uni).cwiseAbs().maxCoeff() == 0.0);
  CHECK((bare - spec).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("zero experts degenerate to the bare backbone") {
  ExpertConfig none = tiny_experts();
  none.num_experts = 0;
  RecModel model(rec_cfg(15), none, 19);
  Rng hr(20, "head");
  model.backbone.head.w0.init_gaussian(hr, 0.3);
  std::vector<int> seq{10, 13, 0, 4, 8, 12};
  Mat bare = model.backbone.forward(seq, nullptr, nullptr, nullptr);
  Mat uni = universal_forward(model.backbone, model.mix, seq, nullptr, nullptr);
  CHECK((bare - uni).cwiseAbs().maxCoeff() == 0.0);
  CHECK(model.mix.gate_weights(model.backbone, seq, nullptr, nullptr).size() == 0);

  // The backbone-only variant still trains.
  SidVocabulary v = demo_vocab();
  SidTable sids = demo_sids();
  std::vector<std::vector<int>> seqs;
  for (int u = 0; u < 12; ++u)
    seqs.push_back(encode_training_sequence(cross_user(u % 8, 8), sids, v, 64));
  RecModel fresh(rec_cfg(15), none, 19);
  RecTrainConfig cfg;
  cfg.epochs = 3;
  cfg.lr = 1e-3;
  std::vector<RecEpochLog> log = train_universal(fresh, seqs, cfg, 19);
  CHECK(log.back().loss < log.front().loss);
}

TEST_CASE("expert mixture is convex and gate-consistent") {
  std::vector<int> seq{10, 13, 0, 4, 8, 12};

  // N = 1: the gate is constant one and the mixture is that single adapter.
  ExpertConfig one = tiny_experts(0.0);
  one.num_experts = 1;
  RecModel m1(rec_cfg(15), one, 21);
  Rng br(22, "b");
  ParamList pl;
  m1.backbone.collect_adapter("uni0", pl);
  for (Param* p : pl) p->value.setConstant(0.05);
  Vec g = m1.mix.gate_weights(m1.backbone, seq, nullptr, nullptr);
  REQUIRE(g.size() == 1);
  CHECK(g[0] == 1.0);
  LoraActivation act = LoraActivation::uniform({"uni0"});
  Mat direct = m1.backbone.forward(seq, &act, nullptr, nullptr);
  Mat mixed = universal_forward(m1.backbone, m1.mix, seq, nullptr, nullptr);
  CHECK((direct - mixed).cwiseAbs().maxCoeff() == 0.0);

  // Zero gate weights mean a uniform mixture, identical to the Avg ablation.
  RecModel m2(rec_cfg(15), tiny_experts(0.0), 23);
  Vec g2 = m2.mix.gate_weights(m2.backbone, seq, nullptr, nullptr);
  CHECK(g2[0] == 0.5);
  CHECK(g2[1] == 0.5);

  // Identical experts make the output independent of the gate.
  ParamList e0, e1;
  m2.backbone.collect_adapter("uni0", e0);
  m2.backbone.collect_adapter("uni1", e1);
  REQUIRE(e0.size() == e1.size());
  Rng fill(24, "experts");
  for (size_t i = 0; i < e0.size(); ++i) {
    e0[i]->value.setZero();
    for (long j = 0; j < e0[i]->value.size(); ++j) e0[i]->value.data()[j] = 0.1 * fill.gaussian();
    e1[i]->value = e0[i]->value;
  }
  Rng gr(25, "gate");
  m2.mix.gate.w0.init_gaussian(gr, 1.0);  // strongly non-uniform gate
  Vec skew = m2.mix.gate_weights(m2.backbone, seq, nullptr, nullptr);
  CHECK(std::abs(skew[0] - 0.5) > 1e-3);
  Mat gated = universal_forward(m2.backbone, m2.mix, seq, nullptr, nullptr);
  m2.mix.average = true;
  Mat averaged = universal_forward(m2.backbone, m2.mix, seq, nullptr, nullptr);
  CHECK((gated - averaged).cwiseAbs().maxCoeff() < 1e-12);
  Vec avg = m2.mix.gate_weights(m2.backbone, seq, nullptr, nullptr);
  CHECK(avg[0] == 0.5);
  CHECK(avg[1] == 0.5);
}

TEST_CASE("backbone rejects bad inputs and bad adapters") {
  Rng rng(31, "bad");
  RecBackbone bb(rec_cfg(15), rng);
  CHECK(thrown([&] { bb.forward(std::vector<int>{}, nullptr, nullptr, nullptr); }) ==
        ErrorCode::kInvalidArgument);
  std::vector<int> long_seq(65, 0);
  CHECK(thrown([&] { bb.forward(long_seq, nullptr, nullptr, nullptr); }) ==
        ErrorCode::kConstraint);
  std::vector<int> seq{0, 1, 2};
  LoraActivation ghost = LoraActivation::uniform({"nope"});
  CHECK(thrown([&] { bb.forward(seq, &ghost, nullptr, nullptr); }) == ErrorCode::kLookup);
  AdapterScope none{false, false, false};
  CHECK(thrown([&] { bb.add_adapter("x", 2, 4.0, 0.0, rng, none); }) == ErrorCode::kConfig);
  bb.add_adapter("x", 2, 4.0, 0.0, rng);
  CHECK(thrown([&] { bb.add_adapter("x", 2, 4.0, 0.0, rng); }) == ErrorCode::kState);
  RecBackboneConfig zero = rec_cfg(1);
  CHECK(thrown([&] { RecBackbone(zero, rng); }) == ErrorCode::kConfig);
}

TEST_CASE("head-scoped adapters reach only the head") {
  Rng rng(32, "scope");
  RecBackbone bb(rec_cfg(15), rng);
  AdapterScope head_only{false, false, true};
  bb.add_adapter("h", 2, 4.0, 0.0, rng, head_only);
  ParamList hp;
  bb.collect_adapter("h", hp);
  REQUIRE(hp.size() == 2);  // one A/B pair: the head alone
  for (Param* p : hp)
    for (long j = 0; j < p->value.size(); ++j) p->value.data()[j] = 0.1 + 0.01 * j;
  std::vector<int> seq{0, 1, 2, 3};
  LoraActivation act = LoraActivation::uniform({"h"});
  Mat with = bb.forward(seq, &act, nullptr, nullptr);
  Mat without = bb.forward(seq, nullptr, nullptr, nullptr);
  CHECK((with - without).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("universal and specific gradients pass finite differences") {
  RecBackboneConfig cfg;
  cfg.vocab = 9;
  cfg.d_model = 8;
  cfg.num_heads = 2;
  cfg.d_ff = 12;
  cfg.num_blocks = 2;
  cfg.max_pos = 8;
  ExpertConfig experts;
  experts.num_experts = 2;
  experts.rank = 2;
  experts.alpha = 4.0;
  experts.dropout = 0.0;
  RecModel model(cfg, experts, 41);
  SpecificConfig sc;
  sc.rank = 2;
  sc.alpha = 4.0;
  sc.dropout = 0.0;
  model.add_specific("d", sc, 42);

  // Give the head and every adapter B real weight so gradients flow end to
  // end (a zero head blocks everything below it).
  Rng rr(43, "rand");
  model.backbone.head.w0.init_gaussian(rr, 0.3);
  for (const std::string& name : {std::string("uni0"), std::string("uni1"),
                                  RecModel::specific_name("d")}) {
    ParamList pl;
    model.backbone.collect_adapter(name, pl);
    for (Param* p : pl)
      for (long j = 0; j < p->value.size(); ++j) p->value.data()[j] += 0.1 * rr.gaussian();
  }
  Rng gr(44, "gate");
  model.mix.gate.w0.init_gaussian(gr, 0.5);

  std::vector<int> seq{0, 3, 5, 1, 8, 2};
  const long t = static_cast<long>(seq.size());

  auto run = [&](bool universal, bool with_grad) {
    UniversalCache cache;
    cache.bb.want_mix = universal && with_grad;
    const std::string domain = "d";
    Mat logits = universal
                     ? universal_forward(model.backbone, model.mix, seq, nullptr, &cache)
                     : specific_forward(model.backbone, model.mix, domain, seq, nullptr, &cache);
    double total = 0.0;
    Mat dlogits = Mat::Zero(t, logits.cols());
    for (long p = 0; p + 1 < t; ++p) {
      Vec drow;
      total +=
          softmax_xent(logits.row(p).transpose(), seq[static_cast<size_t>(p) + 1], &drow);
      dlogits.row(p) = drow.transpose() / static_cast<double>(t - 1);
    }
    if (with_grad) universal_backward(model.backbone, model.mix, dlogits, cache);
    return total / static_cast<double>(t - 1);
  };

  ParamList uparams;
  model.collect_universal(uparams);
  zero_grads(uparams);
  run(true, true);
  GradCheckReport urep = grad_check([&] { return run(true, false); }, uparams, 1e-5);
  CHECK(urep.max_rel_error < 1e-4);

  ParamList sparams;
  model.backbone.collect_adapter(RecModel::specific_name("d"), sparams);
  zero_grads(sparams);
  run(false, true);
  GradCheckReport srep = grad_check([&] { return run(false, false); }, sparams, 1e-5);
  CHECK(srep.max_rel_error < 1e-4);
}

TEST_CASE("user router fusion gradient passes finite differences") {
  Rng rng(45, "router");
  UserRouter router(8, RouterArch{12, 4}, rng);
  Vec h(8);
  for (long i = 0; i < 8; ++i) h[i] = rng.gaussian();
  Vec noise(4);
  for (long i = 0; i < 4; ++i) noise[i] = rng.gaussian();
  const double pu = 0.6, ps = 0.3, w = 1e-3;

  auto loss = [&](bool with_grad) {
    ItemRouter::Cache cache;
    RouterOutput out = router.forward(h, true, nullptr, &cache, &noise);
    const double pf = (1.0 - out.alpha) * pu + out.alpha * ps;
    if (with_grad) router.backward(-(ps - pu) / pf, w, cache);
    return -std::log(pf) + w * out.kl;
  };
  ParamList params;
  router.collect(params);
  zero_grads(params);
  loss(true);
  GradCheckReport rep = grad_check([&] { return loss(false); }, params, 1e-5);
  CHECK(rep.max_rel_error < 1e-4);
}

TEST_CASE("universal training reduces the loss and freezes the phase") {
  SidVocabulary v = demo_vocab();
  SidTable sids = demo_sids();
  std::vector<std::vector<int>> seqs;
  for (int u = 0; u < 20; ++u)
    seqs.push_back(encode_training_sequence(cross_user(u % 8, 8), sids, v, 64));
  RecModel model(rec_cfg(15), tiny_experts(), 7);
  const double init = mean_ce(model, seqs, nullptr);
  CHECK(std::abs(init - std::log(15.0)) < 1e-9);  // zero head: uniform predictor
  RecTrainConfig cfg;
  cfg.epochs = 5;
  cfg.lr = 1e-3;
  cfg.batch = 8;
  std::vector<RecEpochLog> log = train_universal(model, seqs, cfg, 7);
  REQUIRE(log.size() == 5);
  CHECK(log.back().loss < log.front().loss);
  CHECK(model.universal_frozen());
  REQUIRE(model.phases().size() == 1);
  CHECK(model.phases()[0].first == "universal");
  CHECK(model.phases()[0].second == 7);

  CHECK(thrown([&] { train_universal(model, {}, cfg, 7); }) == ErrorCode::kInvalidArgument);
  std::vector<std::vector<int>> tiny{{3}};
  CHECK(thrown([&] { train_universal(model, tiny, cfg, 7); }) == ErrorCode::kInvalidArgument);
}

TEST_CASE("specific phase requires a frozen universal phase") {
  RecModel model(rec_cfg(15), tiny_experts(), 8);
  model.add_specific("movies", tiny_specific(), 9);
  std::vector<std::vector<int>> seqs{{10, 13, 0, 4, 8, 12}};
  RecTrainConfig cfg;
  cfg.epochs = 1;
  CHECK(thrown([&] { train_specific(model, "movies", seqs, cfg, 1); }) == ErrorCode::kState);
  CHECK(thrown([&] { train_specific(model, "books", seqs, cfg, 1); }) == ErrorCode::kLookup);
  CHECK(thrown([&] { train_specific(model, "movies", {}, cfg, 1); }) ==
        ErrorCode::kInvalidArgument);
  CHECK(thrown([&] { model.add_specific("movies", tiny_specific(), 2); }) == ErrorCode::kState);
  CHECK(thrown([&] { model.add_specific("", tiny_specific(), 2); }) ==
        ErrorCode::kInvalidArgument);
}

TEST_CASE("specific adapters beat the universal model on planted transitions") {
  int wins = 0;
  for (uint64_t seed : {11, 12, 13}) {
    Pipeline p = trained_pipeline(seed, 6, 8);
    const uint64_t uni_hash = p.model.universal_hash();  // freeze contract baseline

    std::vector<std::vector<int>> eval_seqs;
    for (int u = 0; u < 8; ++u)
      eval_seqs.push_back(
          encode_training_sequence(movie_user((u * 5 + 2) % 8, 8), p.sids, p.vocab, 64));
    const std::string dom = "movies";
    const double spec = mean_ce(p.model, eval_seqs, &dom);
    const double uni = mean_ce(p.model, eval_seqs, nullptr);
    if (spec < uni) ++wins;

    CHECK(p.model.universal_hash() == uni_hash);
    REQUIRE(p.model.phases().size() == 2);
    CHECK(p.model.phases()[1].first == "specific:movies");
  }
  CHECK(wins >= 2);
}

TEST_CASE("prediction fusion is the stated convex rule") {
  Vec pu(2), ps(2);
  pu << 0.5, 0.5;
  ps << 1.0, 0.0;
  Vec mid = fuse_predictions(pu, ps, 0.5);
  CHECK(mid[0] == doctest::Approx(0.75).epsilon(1e-12));
  CHECK(mid[1] == doctest::Approx(0.25).epsilon(1e-12));
  CHECK((fuse_predictions(pu, ps, 0.0) - pu).cwiseAbs().maxCoeff() == 0.0);
  CHECK((fuse_predictions(pu, ps, 1.0) - ps).cwiseAbs().maxCoeff() == 0.0);
  CHECK(thrown([&] { fuse_predictions(pu, ps, -0.1); }) == ErrorCode::kInvalidArgument);
  CHECK(thrown([&] { fuse_predictions(pu, ps, 1.5); }) == ErrorCode::kInvalidArgument);
  Vec p3(3);
  p3 << 0.2, 0.3, 0.5;
  CHECK(thrown([&] { fuse_predictions(pu, p3, 0.5); }) == ErrorCode::kShape);

  // Any convex combination of distributions is a distribution.
  Rng rng(51, "fuse");
  for (int trial = 0; trial < 20; ++trial) {
    Vec a(5), b(5);
    for (long i = 0; i < 5; ++i) a[i] = rng.uniform(0.01, 1.0);
    for (long i = 0; i < 5; ++i) b[i] = rng.uniform(0.01, 1.0);
    a /= a.sum();
    b /= b.sum();
    Vec f = fuse_predictions(a, b, rng.uniform());
    CHECK(f.minCoeff() >= 0.0);
    CHECK(std::abs(f.sum() - 1.0) < 1e-9);
  }
}

TEST_CASE("user routing gate saturates and is deterministic in eval mode") {
  Rng rng(52, "route");
  UserRouter router(32, RouterArch{16, 4}, rng);
  Vec h(32);
  for (long i = 0; i < 32; ++i) h[i] = rng.gaussian();
  const double g1 = user_route(h, router, false);
  const double g2 = user_route(h, router, false);
  CHECK(g1 == g2);
  CHECK(g1 >= 0.0);
  CHECK(g1 <= 1.0);

  router.gate.bias.value(0, 0) = 60.0;
  CHECK(user_route(h, router, false) > 1.0 - 1e-12);
  router.gate.bias.value(0, 0) = -60.0;
  CHECK(user_route(h, router, false) < 1e-12);

  Vec m(1), s(1);
  m << 1.0;
  s << 0.0;
  CHECK(vib_kl(m, s) == 0.5);
}

TEST_CASE("paper defaults are pinned") {
  ExpertConfig e;
  CHECK(e.num_experts == 4);
  CHECK(e.rank == 64);
  CHECK(e.alpha == 128.0);
  RecTrainConfig t;
  CHECK(t.epochs == 10);
  CHECK(t.lr == 5e-5);
  CHECK(t.batch == 8);
  UserRouterTrainConfig u;
  CHECK(u.vib_weight == 1e-3);
  RecBackboneConfig b;
  CHECK(b.d_model == 64);
  CHECK(b.num_heads == 4);
  CHECK(b.num_blocks == 2);
  CHECK(b.max_pos == 256);
}

TEST_CASE("router training is inert when both views agree") {
  SidVocabulary v = demo_vocab();
  SidTable sids = demo_sids();
  std::vector<std::vector<int>> seqs;
  for (int u = 0; u < 12; ++u)
    seqs.push_back(encode_training_sequence(cross_user(u % 8, 8), sids, v, 64));
  RecModel model(rec_cfg(15), tiny_experts(), 61);
  RecTrainConfig cfg;
  cfg.epochs = 2;
  cfg.lr = 1e-3;
  train_universal(model, seqs, cfg, 61);

  // No specific adapter anywhere: P_spec == P_uni for every query, so the
  // prediction loss cannot depend on gamma.
  Pipeline p{v, sids, std::move(model)};
  std::vector<RouterSample> samples;
  for (int u = 0; u < 8; ++u) {
    std::vector<Event> ev = cross_user(u % 8, 8);
    Event last = ev.back();
    ev.pop_back();
    samples.push_back(make_sample(ev, last.item_id, last.domain, p));
  }
  Rng rrng(62, "router");
  UserRouter router(32, RouterArch{16, 4}, rrng);
  UserRouterTrainConfig rcfg;
  rcfg.epochs = 6;
  rcfg.lr = 3e-3;
  std::vector<UserRouterEpochLog> log = train_user_router(router, p.model, samples, rcfg, 62);
  REQUIRE(log.size() == 6);
  CHECK(std::abs(log.back().l_pred - log.front().l_pred) < 1e-9);

  // Unfrozen generative parameters are rejected.
  RecModel fresh(rec_cfg(15), tiny_experts(), 63);
  CHECK(thrown([&] { train_user_router(router, fresh, samples, rcfg, 1); }) ==
        ErrorCode::kState);
  CHECK(thrown([&] { train_user_router(router, p.model, {}, rcfg, 1); }) ==
        ErrorCode::kInvalidArgument);
}

TEST_CASE("router sends specialists to the specific view") {
  int wins = 0;
  for (uint64_t seed : {71, 72, 73, 74, 75}) {
    Pipeline p = trained_pipeline(seed, 6, 8);

    std::vector<RouterSample> samples;
    std::vector<size_t> specialist_idx, cross_idx;
    for (int u = 0; u < 16; ++u) {  // movies specialists, +3 chain targets
      std::vector<Event> ev = movie_user((u + static_cast<int>(seed)) % 8, 8);
      Event last = ev.back();
      ev.pop_back();
      specialist_idx.push_back(samples.size());
      samples.push_back(make_sample(ev, last.item_id, "movies", p));
    }
    for (int u = 0; u < 16; ++u) {  // cross-domain users, +1 chain movie targets
      std::vector<Event> ev = cross_user((u + static_cast<int>(seed)) % 8, 8);
      Event last = ev.back();  // index 7 is odd: a movies event
      ev.pop_back();
      cross_idx.push_back(samples.size());
      samples.push_back(make_sample(ev, last.item_id, "movies", p));
    }

    Rng rrng(seed, "router-init");
    UserRouter router(32, RouterArch{32, 8}, rrng);
    UserRouterTrainConfig rcfg;
    rcfg.epochs = 20;
    rcfg.lr = 3e-3;
    rcfg.batch = 8;
    train_user_router(router, p.model, samples, rcfg, seed);

    auto median_gamma = [&](const std::vector<size_t>& idx) {
      std::vector<double> gs;
      for (size_t i : idx) {
        TargetScores ts = score_target(p.model, samples[i].context, samples[i].target,
                                       samples[i].domain);
        gs.push_back(user_route(ts.h_t, router, false));
      }
      std::sort(gs.begin(), gs.end());
      return gs[gs.size() / 2];
    };
    if (median_gamma(specialist_idx) > median_gamma(cross_idx)) ++wins;
  }
  CHECK(wins >= 3);
}

TEST_CASE("model checkpoints round-trip with phases and freezes") {
  Pipeline p = trained_pipeline(81, 3, 3);
  std::filesystem::path tmp =
      std::filesystem::temp_directory_path() / "gencdr_test_rec_model.bin";
  p.model.save(tmp);
  RecModel back = RecModel::load(tmp);
  CHECK(back.universal_hash() == p.model.universal_hash());
  CHECK(back.backbone.adapter_hash("spec:movies") ==
        p.model.backbone.adapter_hash("spec:movies"));
  CHECK(back.universal_frozen());
  CHECK(back.phases() == p.model.phases());
  CHECK(back.specific_domains() == std::vector<std::string>{"movies"});

  std::vector<int> probe{10, 13, 0, 4, 8, 12, 14};
  Mat a = specific_forward(p.model.backbone, p.model.mix, "movies", probe, nullptr, nullptr);
  Mat b = specific_forward(back.backbone, back.mix, "movies", probe, nullptr, nullptr);
  CHECK((a - b).cwiseAbs().maxCoeff() == 0.0);
  std::filesystem::remove(tmp);

  // A foreign archive is rejected by kind.
  std::filesystem::path other =
      std::filesystem::temp_directory_path() / "gencdr_test_rec_other.bin";
  Param dummy("x", 1, 1);
  const Param* pl[] = {&dummy};
  save_params(other, pl, nlohmann::json{{"kind", "something_else"}});
  CHECK(thrown([&] { RecModel::load(other); }) == ErrorCode::kIntegrity);
  std::filesystem::remove(other);
}

TEST_CASE("incremental decoding matches the full forward pass") {
  Pipeline p = trained_pipeline(91, 4, 4);
  std::vector<Event> ev = movie_user(2, 6);
  std::vector<int> ctx = encode_history(ev, p.sids, p.vocab, "movies", 64);

  RecStepModel uni(p.model);
  RecStepModel spec(p.model, "movies");
  CHECK(uni.vocab_size() == 15);
  CHECK(thrown([&] { RecStepModel(p.model, "books"); }) == ErrorCode::kLookup);
  CHECK(thrown([&] { uni.begin(std::vector<int>{}); }) == ErrorCode::kInvalidArgument);

  auto state = uni.begin(ctx);
  Vec h_t;
  Mat full = universal_forward(p.model.backbone, p.model.mix, ctx, nullptr, nullptr, &h_t);
  Vec inc = uni.full_logits(*state);
  CHECK((inc - full.row(full.rows() - 1).transpose()).cwiseAbs().maxCoeff() < 1e-9);
  CHECK((uni.context_hidden(ctx) - h_t).cwiseAbs().maxCoeff() < 1e-9);

  // Advance along an item path; parity must hold at every step.  The step
  // model pins the gate's mixing weights at the context, so the reference
  // forward pass must activate the experts with those same weights rather
  // than re-routing over the grown sequence.
  LoraActivation pinned;
  pinned.names = p.model.mix.expert_names();
  pinned.weights = p.model.mix.gate_weights(p.model.backbone, ctx, nullptr, nullptr);
  std::vector<int> path = p.vocab.sid_tokens(sid_of(p.sids, "M5"));
  std::vector<int> grown = ctx;
  for (int tok : path) {
    uni.advance(*state, tok);
    grown.push_back(tok);
    Mat ref = p.model.backbone.forward(grown, &pinned, nullptr, nullptr);
    CHECK((uni.full_logits(*state) - ref.row(ref.rows() - 1).transpose())
              .cwiseAbs()
              .maxCoeff() < 1e-9);
  }

  // logits_at agrees with full_logits on the requested entries.
  std::vector<int> ask{0, 3, 7, 14};
  Vec lazy = uni.logits_at(*state, ask);
  Vec dense = uni.full_logits(*state);
  for (int tok : ask) CHECK(std::abs(lazy[tok] - dense[tok]) < 1e-12);
  CHECK(thrown([&] { uni.logits_at(*state, std::vector<int>{99}); }) == ErrorCode::kLookup);

  // Clones are independent of the original's later advances.
  auto st2 = uni.begin(ctx);
  auto fork = st2->clone();
  Vec before = uni.full_logits(*fork);
  uni.advance(*st2, path[0]);
  CHECK((uni.full_logits(*fork) - before).cwiseAbs().maxCoeff() == 0.0);

  // The specific view matches its own full forward.
  auto sp = spec.begin(ctx);
  Mat sfull =
      specific_forward(p.model.backbone, p.model.mix, "movies", ctx, nullptr, nullptr);
  CHECK((spec.full_logits(*sp) - sfull.row(sfull.rows() - 1).transpose())
            .cwiseAbs()
            .maxCoeff() < 1e-9);
}

TEST_CASE("beam decoding over the trained model returns valid ranked items") {
  Pipeline p = trained_pipeline(95, 5, 6);
  SidTable movies;
  for (const auto& e : p.sids)
    if (e.first[0] == 'M') movies.push_back(e);
  PrefixTree tree = PrefixTree::build("movies", sid_token_paths(movies, p.vocab));

  std::vector<Event> ev = movie_user(1, 6);
  std::vector<int> ctx = encode_history(ev, p.sids, p.vocab, "movies", 64);
  RecStepModel uni(p.model);
  RecStepModel spec(p.model, "movies");
  FusedScorer scorer;
  scorer.universal = &uni;
  scorer.specific = &spec;
  scorer.gamma = 0.5;

  std::vector<BeamResult> results = beam_generate(scorer, ctx, tree, 8, 5);
  REQUIRE(results.size() == 5);
  std::set<std::string> seen;
  for (size_t i = 0; i < results.size(); ++i) {
    CHECK(std::isfinite(results[i].log_prob));
    if (i > 0) CHECK(results[i].log_prob <= results[i - 1].log_prob);
    seen.insert(results[i].item_id);
    uint32_t node = tree.walk(results[i].tokens);
    CHECK(tree.is_leaf(node));
    CHECK(tree.leaf_item(node) == results[i].item_id);
  }
  CHECK(seen.size() == results.size());
}
