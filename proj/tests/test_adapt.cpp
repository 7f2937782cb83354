#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <set>

#include "adapt/router.hpp"
#include "nn/gradcheck.hpp"
#include "rq/pretrain.hpp"

using namespace gencdr;

namespace {

Mat random_mat(int rows, int cols, Rng& rng, double scale = 1.0) {
  Mat m(rows, cols);
  for (int i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.gaussian();
  return m;
}

// Concept-structured catalog: each row is one of `concepts` well-separated
// centers plus small noise.  Returns the catalog and each row's concept.
std::pair<Mat, std::vector<int>> concept_catalog(int n, int dim, int concepts, double sep,
                                                 double noise, Rng& rng) {
  Mat centers = random_mat(concepts, dim, rng);
  for (int c = 0; c < concepts; ++c) centers.row(c) *= sep / centers.row(c).norm();
  Mat out(n, dim);
  std::vector<int> label(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    int c = rng.uniform_int(concepts);
    label[static_cast<size_t>(i)] = c;
    for (int j = 0; j < dim; ++j) out(i, j) = centers(c, j) + noise * rng.gaussian();
  }
  return {out, label};
}

RqVaeConfig tiny_vae(int input_dim, int k = 6, int levels = 2) {
  RqVaeConfig cfg;
  cfg.input_dim = input_dim;
  cfg.latent_dim = 4;
  cfg.hidden = 16;
  cfg.levels = levels;
  cfg.codebook_size = k;
  cfg.ctx_dim = 8;
  cfg.ctx_heads = 2;
  cfg.ctx_ff = 12;
  cfg.ctx_blocks = 1;
  return cfg;
}

RqVae frozen_tokenizer(const Mat& catalog, uint64_t seed, int k = 6, int levels = 2,
                       int epochs = 8) {
  Rng rng(seed, "init");
  RqVae model(tiny_vae(static_cast<int>(catalog.cols()), k, levels), rng);
  PretrainConfig cfg;
  cfg.epochs = epochs;
  cfg.lr = 3e-3;
  cfg.batch = 16;
  pretrain(model, catalog, cfg, seed);
  return model;
}

AdapterConfig desk_adapters(int epochs = 20, double lr = 3e-3) {
  AdapterConfig cfg;
  cfg.rank = 4;
  cfg.alpha = 8.0;
  cfg.dropout = 0.05;
  cfg.epochs = epochs;
  cfg.lr = lr;
  cfg.batch = 32;
  return cfg;
}

double recon_from_latents(const RqVae& tok, const Mat& items, const Mat& z) {
  double total = 0.0;
  for (long i = 0; i < items.rows(); ++i) {
    Vec zhat = residual_quantize(z.row(i).transpose(), tok.codebooks).z_hat;
    total += (items.row(i).transpose() - tok.decode(zhat)).squaredNorm();
  }
  return total / static_cast<double>(items.rows());
}

double recon_error(const RqVae& tok, const Mat& items) {
  return recon_from_latents(tok, items, tok.encode_batch(items));
}

double recon_error_specific(const DomainAdapterSet& adapters, const std::string& domain,
                            const Mat& items) {
  const RqVae& tok = adapters.tokenizer();
  return recon_from_latents(tok, items, adapters.encode_specific(items, domain));
}

}  // namespace

TEST_CASE("vib_kl closed forms") {
  CHECK(vib_kl(Vec::Zero(3), Vec::Zero(3)) == 0.0);
  Vec m1(1), s0(1);
  m1 << 1.0;
  s0 << 0.0;
  CHECK(vib_kl(m1, s0) == doctest::Approx(0.5).epsilon(1e-12));
  Vec m0(1), s1(1);
  m0 << 0.0;
  s1 << 1.0;
  CHECK(vib_kl(m0, s1) == doctest::Approx(0.5 * (std::exp(1.0) - 2.0)).epsilon(1e-9));
  CHECK(vib_kl(m0, s1) == doctest::Approx(0.35914).epsilon(1e-4));

  SUBCASE("non-negative, zero only at the prior") {
    Rng rng(900, "kl");
    for (int t = 0; t < 200; ++t) {
      Vec m = random_mat(5, 1, rng, 2.0).col(0);
      Vec s = random_mat(5, 1, rng, 1.5).col(0);
      double kl = vib_kl(m, s);
      CHECK(kl >= 0.0);
      if (m.cwiseAbs().maxCoeff() > 1e-6 || s.cwiseAbs().maxCoeff() > 1e-6) CHECK(kl > 0.0);
    }
  }

  SUBCASE("length mismatch is a shape error") {
    try {
      vib_kl(Vec::Zero(2), Vec::Zero(3));
      FAIL("expected throw");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::kShape);
    }
  }
}

TEST_CASE("fresh adapters are exact no-ops") {
  Rng drng(910, "data");
  auto [catalog, labels] = concept_catalog(60, 8, 4, 4.0, 0.2, drng);
  RqVae tok = frozen_tokenizer(catalog, 21);
  DomainAdapterSet adapters(&tok, desk_adapters());
  Rng arng(1, "ad");
  adapters.add_domain("books", arng);

  // Zero-initialized B makes the adapted encoder bitwise equal to the base,
  // so the adapted reconstruction error equals the universal one exactly.
  Mat z_uni = tok.encode_batch(catalog);
  Mat z_spec = adapters.encode_specific(catalog, "books");
  CHECK((z_uni - z_spec).cwiseAbs().maxCoeff() == 0.0);
  CHECK(recon_error_specific(adapters, "books", catalog) == recon_error(tok, catalog));
}

// Best achievable reconstruction given the frozen codebooks and decoder: with
// two levels every quantized latent is one of K*K lattice points, so the
// optimum is an exhaustive scan over their decodings.  No encoder — universal
// or adapted — can do better; training can only re-assign items to cells.
double lattice_oracle_recon(const RqVae& tok, const Mat& items) {
  REQUIRE(tok.config().levels == 2);
  int k = tok.config().codebook_size;
  const Mat& e0 = tok.codebooks.levels[0].value;
  const Mat& e1 = tok.codebooks.levels[1].value;
  std::vector<Vec> decodings;
  decodings.reserve(static_cast<size_t>(k) * static_cast<size_t>(k));
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j) decodings.push_back(tok.decode((e0.row(i) + e1.row(j)).transpose()));
  double total = 0.0;
  for (long r = 0; r < items.rows(); ++r) {
    double best = std::numeric_limits<double>::infinity();
    for (const Vec& d : decodings)
      best = std::min(best, (items.row(r).transpose() - d).squaredNorm());
    total += best;
  }
  return total / static_cast<double>(items.rows());
}

TEST_CASE("adapter training beats the universal encoder on a shifted domain") {
  // Domain items are the base concepts pushed through a planted rank-3 linear
  // shift (x -> x + U V^T x), which a rank-4 adapter on the first encoder
  // layer can cancel.  The tokenizer is pretrained on the base catalog only,
  // so the shifted domain is off its manifold: the universal encoder assigns
  // some items to the wrong codebook cells, and with the decoder and
  // codebooks frozen, re-assigning cells is exactly what adapter training can
  // fix.  The adapted reconstruction must come out below the universal one
  // (median over three seeds) while never beating the exhaustive lattice
  // optimum.
  int wins = 0;
  for (uint64_t seed = 7; seed <= 9; ++seed) {
    Rng drng(1000 + seed, "data");
    auto [catalog, labels] = concept_catalog(160, 8, 4, 5.0, 0.15, drng);
    Mat vs = random_mat(3, 8, drng);
    Mat us = random_mat(3, 8, drng);
    for (int r = 0; r < 3; ++r) {
      vs.row(r) /= vs.row(r).norm();
      us.row(r) /= us.row(r).norm();
    }
    Mat shifted = catalog;
    for (long i = 0; i < shifted.rows(); ++i)
      for (int r = 0; r < 3; ++r)
        shifted.row(i) += (2.0 * catalog.row(i).dot(vs.row(r)) / 5.0) * us.row(r);

    RqVae tok = frozen_tokenizer(catalog, 40 + seed, /*k=*/8, /*levels=*/2, /*epochs=*/20);
    double universal = recon_error(tok, shifted);
    double oracle = lattice_oracle_recon(tok, shifted);
    CHECK(universal >= oracle - 1e-9);

    DomainAdapterSet adapters(&tok, desk_adapters(30, 1e-4));
    auto log = train_adapter(adapters, "shifted", shifted, seed);
    REQUIRE(log.size() == 30);
    CHECK(std::isfinite(log.back().l_adapter));
    double adapted = recon_error_specific(adapters, "shifted", shifted);
    CHECK(adapted >= oracle - 1e-9);
    if (adapted < universal) ++wins;
  }
  CHECK(wins >= 2);  // median over 3 seeds
}

TEST_CASE("adapter training moves only the target domain") {
  Rng drng(930, "data");
  auto [catalog, labels] = concept_catalog(50, 8, 4, 4.0, 0.2, drng);
  RqVae tok = frozen_tokenizer(catalog, 22);
  uint64_t tok_hash = tok.weights_hash();
  DomainAdapterSet adapters(&tok, desk_adapters(5));
  Rng arng(2, "ad");
  adapters.add_domain("other", arng);
  uint64_t other_hash = adapters.domain_hash("other");

  train_adapter(adapters, "target", catalog, 7);
  CHECK(tok.weights_hash() == tok_hash);
  CHECK(adapters.domain_hash("other") == other_hash);
  CHECK(adapters.has("target"));

  SUBCASE("empty domain is rejected") {
    Mat none(0, 8);
    try {
      train_adapter(adapters, "hollow", none, 7);
      FAIL("expected throw");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::kInvalidArgument);
    }
  }

  SUBCASE("unfrozen tokenizer is rejected") {
    Rng rng(3, "init");
    RqVae fresh(tiny_vae(8), rng);
    DomainAdapterSet fresh_adapters(&fresh, desk_adapters(2));
    try {
      train_adapter(fresh_adapters, "d", catalog, 7);
      FAIL("expected throw");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::kState);
    }
  }
}

TEST_CASE("routing boundaries and determinism") {
  Rng drng(940, "data");
  auto [catalog, labels] = concept_catalog(40, 8, 4, 4.0, 0.2, drng);
  RqVae tok = frozen_tokenizer(catalog, 23);
  DomainAdapterSet adapters(&tok, desk_adapters(5));
  train_adapter(adapters, "films", catalog, 7);

  Rng rrng(4, "router");
  ItemRouter router(8, {16, 6}, rrng);
  Vec x = catalog.row(3).transpose();

  SUBCASE("gate forced low reduces fusion to the universal latent") {
    router.gate.w0.value.setZero();
    router.gate.bias.value.setConstant(-1e9);
    FusedLatent fl = route_item(x, "films", adapters, router, false);
    CHECK(fl.alpha == 0.0);
    CHECK((fl.z_fused - fl.z_uni).cwiseAbs().maxCoeff() == 0.0);
  }

  SUBCASE("gate forced high reduces fusion to the specific latent") {
    router.gate.w0.value.setZero();
    router.gate.bias.value.setConstant(1e9);
    FusedLatent fl = route_item(x, "films", adapters, router, false);
    CHECK(fl.alpha == 1.0);
    CHECK((fl.z_fused - fl.z_spec).cwiseAbs().maxCoeff() == 0.0);
  }

  SUBCASE("zero gate gives the midpoint convex combination") {
    router.gate.w0.value.setZero();
    router.gate.bias.value.setZero();
    FusedLatent fl = route_item(x, "films", adapters, router, false);
    CHECK(fl.alpha == 0.5);
    Vec expect = 0.5 * fl.z_uni + 0.5 * fl.z_spec;
    CHECK((fl.z_fused - expect).cwiseAbs().maxCoeff() == 0.0);
  }

  SUBCASE("evaluation-mode routing is deterministic") {
    FusedLatent a = route_item(x, "films", adapters, router, false);
    FusedLatent b = route_item(x, "films", adapters, router, false);
    CHECK(a.alpha == b.alpha);
    CHECK((a.z_fused - b.z_fused).cwiseAbs().maxCoeff() == 0.0);
  }

  SUBCASE("missing adapter is a lookup error") {
    try {
      route_item(x, "unknown", adapters, router, false);
      FAIL("expected throw");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::kLookup);
    }
  }

  SUBCASE("convex combination worked example") {
    Vec z_uni(2), z_spec(2);
    z_uni << 1.0, 0.0;
    z_spec << 0.0, 1.0;
    const double alpha = 0.5;
    Vec z_fused = (1.0 - alpha) * z_uni + alpha * z_spec;
    CHECK(z_fused[0] == 0.5);
    CHECK(z_fused[1] == 0.5);
  }
}

TEST_CASE("reparameterized routing gradients pass the checker") {
  Rng rng(950, "router-grad");
  ItemRouter router(6, {10, 4}, rng);
  Vec x = random_mat(6, 1, rng).col(0);
  Vec noise = random_mat(4, 1, rng).col(0);
  const double kl_weight = 0.37;

  ParamList params;
  router.collect(params);
  zero_grads(params);
  ItemRouter::Cache cache;
  router.forward(x, true, nullptr, &cache, &noise);
  router.backward(1.0, kl_weight, cache);

  auto loss = [&]() {
    RouterOutput out = router.forward(x, true, nullptr, nullptr, &noise);
    return out.alpha + kl_weight * out.kl;
  };
  GradCheckReport rep = grad_check(loss, params, 1e-5);
  CHECK(rep.max_rel_error < 1e-4);
}

TEST_CASE("router training holds every frozen hash still") {
  Rng drng(960, "data");
  auto [catalog, labels] = concept_catalog(50, 8, 2, 4.0, 0.2, drng);
  std::vector<std::string> domains;
  for (int l : labels) domains.push_back(l == 0 ? "books" : "films");
  RqVae tok = frozen_tokenizer(catalog, 24);
  DomainAdapterSet adapters(&tok, desk_adapters(5));
  Mat books(0, 8), films(0, 8);
  for (long i = 0; i < catalog.rows(); ++i) {
    Mat& dst = domains[static_cast<size_t>(i)] == "books" ? books : films;
    dst.conservativeResize(dst.rows() + 1, Eigen::NoChange);
    dst.row(dst.rows() - 1) = catalog.row(i);
  }
  train_adapter(adapters, "books", books, 7);
  train_adapter(adapters, "films", films, 7);
  adapters.freeze_all();
  uint64_t tok_hash = tok.weights_hash();
  uint64_t books_hash = adapters.domain_hash("books");
  uint64_t films_hash = adapters.domain_hash("films");

  Rng rrng(5, "router");
  ItemRouter router(8, {16, 6}, rrng);
  uint64_t router_before = router.weights_hash();
  RouterTrainConfig cfg;
  cfg.epochs = 6;
  cfg.batch = 16;
  auto log = train_router(router, catalog, domains, adapters, cfg, 99);
  REQUIRE(log.size() == 6);
  for (const auto& ep : log) {
    CHECK(std::isfinite(ep.l_rec));
    CHECK(std::isfinite(ep.l_vib));
    CHECK(ep.l_vib >= 0.0);
  }
  CHECK(tok.weights_hash() == tok_hash);
  CHECK(adapters.domain_hash("books") == books_hash);
  CHECK(adapters.domain_hash("films") == films_hash);
  CHECK(router.weights_hash() != router_before);

  SUBCASE("unfrozen adapters are rejected") {
    DomainAdapterSet loose(&tok, desk_adapters(2));
    Rng arng(6, "ad");
    loose.add_domain("books2", arng);
    std::vector<std::string> d2(static_cast<size_t>(catalog.rows()), "books2");
    Rng rr(7, "router");
    ItemRouter r2(8, {16, 6}, rr);
    try {
      train_router(r2, catalog, d2, loose, cfg, 1);
      FAIL("expected throw");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::kState);
    }
  }

  SUBCASE("unknown domain label is a lookup error") {
    std::vector<std::string> bad(static_cast<size_t>(catalog.rows()), "mystery");
    Rng rr(8, "router");
    ItemRouter r2(8, {16, 6}, rr);
    try {
      train_router(r2, catalog, bad, adapters, cfg, 1);
      FAIL("expected throw");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::kLookup);
    }
  }

  SUBCASE("runaway learning rate surfaces as divergence with an epoch") {
    Rng rr(9, "router");
    ItemRouter r2(8, {16, 6}, rr);
    RouterTrainConfig wild = cfg;
    wild.lr = 1e9;
    wild.epochs = 4;
    try {
      train_router(r2, catalog, domains, adapters, wild, 1);
      FAIL("expected throw");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::kDivergence);
      CHECK(std::string(e.what()).find("epoch") != std::string::npos);
    }
  }
}

TEST_CASE("no-op adapters make the reconstruction loss alpha-invariant") {
  Rng drng(970, "data");
  auto [catalog, labels] = concept_catalog(40, 8, 3, 4.0, 0.2, drng);
  std::vector<std::string> domains(static_cast<size_t>(catalog.rows()), "only");
  RqVae tok = frozen_tokenizer(catalog, 25);
  DomainAdapterSet adapters(&tok, desk_adapters(2));
  Rng arng(10, "ad");
  adapters.add_domain("only", arng);  // untrained: exact copy of the base encoder
  adapters.freeze_all();

  double baseline = recon_error(tok, catalog);
  Rng rrng(11, "router");
  ItemRouter router(8, {16, 6}, rrng);
  RouterTrainConfig cfg;
  cfg.epochs = 5;
  cfg.batch = 40;
  auto log = train_router(router, catalog, domains, adapters, cfg, 42);
  for (const auto& ep : log) CHECK(std::abs(ep.l_rec - baseline) < 1e-9);
}

TEST_CASE("fused assignment reduces to universal ids when the gate is closed") {
  Rng drng(980, "data");
  auto [catalog, labels] = concept_catalog(40, 8, 4, 4.0, 0.2, drng);
  std::vector<std::string> ids;
  for (int i = 0; i < catalog.rows(); ++i) ids.push_back(strf("it_%03d", i));
  std::vector<std::string> domains(static_cast<size_t>(catalog.rows()), "books");
  RqVae tok = frozen_tokenizer(catalog, 26);
  DomainAdapterSet adapters(&tok, desk_adapters(5));
  train_adapter(adapters, "books", catalog, 7);
  adapters.freeze_all();
  Rng rrng(12, "router");
  ItemRouter router(8, {16, 6}, rrng);
  router.gate.w0.value.setZero();
  router.gate.bias.value.setConstant(-1e9);

  FusedAssignment fused = assign_fused_sids(ids, catalog, domains, adapters, router);
  SidTable uni = assign_sids(ids, catalog, tok);
  REQUIRE(fused.sids.size() == uni.size());
  for (size_t i = 0; i < uni.size(); ++i) {
    CHECK(fused.sids[i].first == uni[i].first);
    CHECK(fused.sids[i].second == uni[i].second);
  }
  for (const RoutingRow& row : fused.report) CHECK(row.alpha == 0.0);
}

TEST_CASE("fused assignment is injective and its report is ordered") {
  Rng drng(990, "data");
  auto [catalog, labels] = concept_catalog(60, 8, 5, 4.0, 0.25, drng);
  std::vector<std::string> ids;
  for (int i = 0; i < catalog.rows(); ++i) ids.push_back(strf("it_%03d", i));
  std::vector<std::string> domains;
  for (int l : labels) domains.push_back(l % 2 == 0 ? "books" : "films");
  RqVae tok = frozen_tokenizer(catalog, 27);
  DomainAdapterSet adapters(&tok, desk_adapters(5));
  train_adapter(adapters, "books", catalog, 7);
  train_adapter(adapters, "films", catalog, 8);
  adapters.freeze_all();
  Rng rrng(13, "router");
  ItemRouter router(8, {16, 6}, rrng);
  RouterTrainConfig cfg;
  cfg.epochs = 4;
  cfg.batch = 32;
  train_router(router, catalog, domains, adapters, cfg, 5);

  FusedAssignment fused = assign_fused_sids(ids, catalog, domains, adapters, router);
  std::set<std::vector<int>> seen;
  for (const auto& [id, sid] : fused.sids) {
    std::vector<int> key = sid.codes;
    key.push_back(sid.dedup);
    CHECK(seen.insert(key).second);
  }
  REQUIRE(fused.report.size() == ids.size());
  for (size_t i = 1; i < fused.report.size(); ++i)
    CHECK(fused.report[i - 1].item_id < fused.report[i].item_id);
  for (const RoutingRow& row : fused.report) {
    CHECK(row.alpha >= 0.0);
    CHECK(row.alpha <= 1.0);
  }

  namespace fs = std::filesystem;
  fs::path path = fs::temp_directory_path() / "gencdr_routing_report.tsv";
  write_routing_report_tsv(path, fused.report);
  std::ifstream in(path);
  std::string line;
  size_t lines = 0;
  while (std::getline(in, line)) {
    CHECK(std::count(line.begin(), line.end(), '\t') == 2);
    ++lines;
  }
  CHECK(lines == fused.report.size());
  fs::remove(path);
}

TEST_CASE("fused ids keep cross-domain concept pairs together more than specific ids") {
  // Paired catalogs: domain B holds the same concepts as domain A, pushed
  // through a planted linear shift.  Counting over the ground-truth pairs,
  // fused assignments share the coarsest code at least as often as
  // fully-specific assignments, and strictly more in the median seed.
  std::vector<double> fused_share, spec_share;
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    Rng drng(1000 + seed, "data");
    const int n_pairs = 30, dim = 8, concepts = 4;
    auto [base, labels] = concept_catalog(n_pairs, dim, concepts, 5.0, 0.10, drng);
    Mat shift_w = Mat::Identity(dim, dim) + random_mat(dim, dim, drng, 0.10);
    Vec shift_c = random_mat(dim, 1, drng, 0.6).col(0);
    Mat shifted = base * shift_w.transpose();
    shifted.rowwise() += shift_c.transpose();

    Mat all(2 * n_pairs, dim);
    all << base, shifted;
    std::vector<std::string> domains;
    std::vector<std::string> ids;
    for (int i = 0; i < n_pairs; ++i) {
      domains.push_back("a");
      ids.push_back(strf("a_%03d", i));
    }
    for (int i = 0; i < n_pairs; ++i) {
      domains.push_back("b");
      ids.push_back(strf("b_%03d", i));
    }

    RqVae tok = frozen_tokenizer(all, 40 + seed, concepts, 2, 14);
    DomainAdapterSet adapters(&tok, desk_adapters(80, 1e-2));
    train_adapter(adapters, "a", base, seed);
    train_adapter(adapters, "b", shifted, seed + 50);
    adapters.freeze_all();
    Rng rrng(60 + seed, "router");
    ItemRouter router(dim, {16, 6}, rrng);
    RouterTrainConfig rcfg;
    rcfg.epochs = 8;
    rcfg.batch = 32;
    train_router(router, all, domains, adapters, rcfg, seed);

    auto level0 = [&](const SidTable& sids) {
      std::map<std::string, int> head;
      for (const auto& [id, sid] : sids) head[id] = sid.codes[0];
      return head;
    };
    FusedAssignment fused = assign_fused_sids(ids, all, domains, adapters, router);
    auto fused_head = level0(fused.sids);

    // Fully-specific ids: quantize the adapted latent directly (alpha == 1).
    Mat spec(2 * n_pairs, tok.config().latent_dim);
    for (long i = 0; i < all.rows(); ++i)
      spec.row(i) =
          adapters.encode_specific(all.row(i), domains[static_cast<size_t>(i)]).row(0);
    auto spec_head = level0(assign_sids(ids, spec, tok.codebooks));

    int fused_hits = 0, spec_hits = 0;
    for (int i = 0; i < n_pairs; ++i) {
      std::string a = strf("a_%03d", i), b = strf("b_%03d", i);
      fused_hits += fused_head[a] == fused_head[b] ? 1 : 0;
      spec_hits += spec_head[a] == spec_head[b] ? 1 : 0;
    }
    fused_share.push_back(static_cast<double>(fused_hits) / n_pairs);
    spec_share.push_back(static_cast<double>(spec_hits) / n_pairs);
  }
  std::sort(fused_share.begin(), fused_share.end());
  std::sort(spec_share.begin(), spec_share.end());
  CHECK(fused_share[2] > spec_share[2]);  // medians over 5 seeds
}

TEST_CASE("adapter and router artifacts restore bitwise behavior") {
  namespace fs = std::filesystem;
  Rng drng(1010, "data");
  auto [catalog, labels] = concept_catalog(40, 8, 4, 4.0, 0.2, drng);
  RqVae tok = frozen_tokenizer(catalog, 28);
  DomainAdapterSet adapters(&tok, desk_adapters(4));
  train_adapter(adapters, "books", catalog, 7);
  train_adapter(adapters, "films", catalog, 8);

  fs::path apath = fs::temp_directory_path() / "gencdr_adapters_test.bin";
  adapters.save(apath);

  fs::path tpath = fs::temp_directory_path() / "gencdr_tok_test.bin";
  tok.save(tpath);
  RqVae tok2 = RqVae::load(tpath);
  DomainAdapterSet back = DomainAdapterSet::load(apath, tok2);
  fs::remove(apath);
  fs::remove(tpath);
  CHECK(back.domains() == adapters.domains());
  Mat za = adapters.encode_specific(catalog, "films");
  Mat zb = back.encode_specific(catalog, "films");
  CHECK((za - zb).cwiseAbs().maxCoeff() == 0.0);
  CHECK(back.domain_hash("books") == adapters.domain_hash("books"));

  Rng rrng(14, "router");
  ItemRouter router(8, {16, 6}, rrng);
  fs::path rpath = fs::temp_directory_path() / "gencdr_router_test.bin";
  router.save(rpath);
  ItemRouter router2 = ItemRouter::load(rpath);
  fs::remove(rpath);
  CHECK(router2.weights_hash() == router.weights_hash());
  Vec x = catalog.row(5).transpose();
  CHECK(router.forward(x, false, nullptr, nullptr).alpha ==
        router2.forward(x, false, nullptr, nullptr).alpha);
}
