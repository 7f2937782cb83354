#include "rq/pretrain.hpp"

#include <algorithm>
#include <numeric>

#include "nn/optimizer.hpp"

namespace gencdr {

namespace {

// Deterministic Lloyd k-means; empty clusters keep their previous center.
Mat kmeans(const Mat& points, int k, int iters, Rng& rng) {
  const long n = points.rows();
  Mat centers(k, points.cols());
  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  for (int c = 0; c < k; ++c)
    centers.row(c) = points.row(order[static_cast<size_t>(c) % static_cast<size_t>(n)]);
  if (n < k)  // break duplicate seeds apart
    for (int c = 0; c < k; ++c)
      for (int j = 0; j < centers.cols(); ++j) centers(c, j) += 0.01 * rng.gaussian();

  std::vector<int> assign(static_cast<size_t>(n), 0);
  for (int it = 0; it < iters; ++it) {
    for (long i = 0; i < n; ++i) {
      int best = 0;
      double best_d = (points.row(i) - centers.row(0)).squaredNorm();
      for (int c = 1; c < k; ++c) {
        double d = (points.row(i) - centers.row(c)).squaredNorm();
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      assign[static_cast<size_t>(i)] = best;
    }
    Mat sums = Mat::Zero(k, points.cols());
    std::vector<int> counts(static_cast<size_t>(k), 0);
    for (long i = 0; i < n; ++i) {
      sums.row(assign[static_cast<size_t>(i)]) += points.row(i);
      ++counts[static_cast<size_t>(assign[static_cast<size_t>(i)])];
    }
    for (int c = 0; c < k; ++c)
      if (counts[static_cast<size_t>(c)] > 0)
        centers.row(c) = sums.row(c) / counts[static_cast<size_t>(c)];
  }
  return centers;
}

// Level 0 from k-means on the first batch's latents; deeper levels seeded
// from that batch's running residuals plus a small jitter, which places
// entries in the region quantization will actually visit.
void init_codebooks(RqVae& model, const Mat& first_batch, Rng& rng) {
  Mat z = model.encode_batch(first_batch);
  CodebookSet& cbs = model.codebooks;
  Rng krng = rng.fork("kmeans");
  cbs.levels[0].value = kmeans(z, cbs.entries(0), 10, krng);
  Mat r = z;
  for (int d = 0; d < cbs.num_levels(); ++d) {
    const Mat& entries = cbs.levels[static_cast<size_t>(d)].value;
    if (d > 0) {
      Mat& lvl = cbs.levels[static_cast<size_t>(d)].value;
      double scale = std::max(1e-3, std::sqrt(r.squaredNorm() / static_cast<double>(r.size())));
      for (int c = 0; c < lvl.rows(); ++c) {
        long src = static_cast<long>(c) % r.rows();
        for (int j = 0; j < lvl.cols(); ++j)
          lvl(c, j) = r(src, j) + 0.05 * scale * rng.gaussian();
      }
    }
    // Advance residuals through this (now initialized) level.
    for (long i = 0; i < r.rows(); ++i) {
      int best = 0;
      double best_d = (r.row(i) - entries.row(0)).squaredNorm();
      for (int k = 1; k < entries.rows(); ++k) {
        double dd = (r.row(i) - entries.row(k)).squaredNorm();
        if (dd < best_d) {
          best_d = dd;
          best = k;
        }
      }
      r.row(i) -= entries.row(best);
    }
  }
}

}  // namespace

std::vector<PretrainEpochLog> pretrain(RqVae& model, const Mat& embeddings,
                                       const PretrainConfig& cfg, uint64_t seed) {
  if (model.frozen()) throw Error(ErrorCode::kState, "tokenizer is frozen");
  if (embeddings.rows() == 0) throw Error(ErrorCode::kInvalidArgument, "empty catalog");
  if (embeddings.cols() != model.config().input_dim)
    throw Error(ErrorCode::kShape, "embedding dimension does not match the tokenizer");
  if (cfg.mu < 0 || cfg.lambda < 0 || cfg.beta < 0)
    throw Error(ErrorCode::kConfig, "loss weights must be non-negative");
  const int m = model.codebooks.num_levels();
  double mask_rate = cfg.mask_rate > 0 ? cfg.mask_rate : 1.0 / static_cast<double>(m);
  if (!(mask_rate > 0.0 && mask_rate < 1.0))
    throw Error(ErrorCode::kConfig, strf("mask rate %g outside (0, 1)", mask_rate));

  Rng rng(seed, "tokenizer-pretrain");
  const long n = embeddings.rows();
  const int batch = std::max(1, cfg.batch);
  init_codebooks(model, embeddings.topRows(std::min<long>(n, batch)), rng);

  ParamList params;
  model.collect(params);
  AdamWConfig ocfg;
  ocfg.lr = cfg.lr;
  AdamW opt(ocfg);

  std::vector<PretrainEpochLog> log;
  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng erng = rng.fork(strf("epoch%d", epoch));
    erng.shuffle(order);
    PretrainEpochLog ep;
    std::vector<std::vector<int>> used(static_cast<size_t>(m));
    for (int d = 0; d < m; ++d)
      used[static_cast<size_t>(d)].assign(static_cast<size_t>(model.codebooks.entries(d)), 0);
    // Per-level residuals from the most recent batch, for dead-entry reseeding.
    std::vector<std::vector<Vec>> reseed_pool(static_cast<size_t>(m));

    for (long start = 0; start < n; start += batch) {
      long bsz = std::min<long>(batch, n - start);
      Mat xb(bsz, embeddings.cols());
      for (long i = 0; i < bsz; ++i)
        xb.row(i) = embeddings.row(order[static_cast<size_t>(start + i)]);

      zero_grads(params);
      MlpCoder::Cache enc_cache, dec_cache;
      Mat z = model.encoder.forward(xb, nullptr, nullptr, &enc_cache);
      Mat zhat(bsz, z.cols());
      std::vector<QuantizeResult> quants(static_cast<size_t>(bsz));
      for (long i = 0; i < bsz; ++i) {
        quants[static_cast<size_t>(i)] = model.quantize(z.row(i).transpose());
        zhat.row(i) = quants[static_cast<size_t>(i)].z_hat.transpose();
      }
      Mat xhat = model.decoder.forward(zhat, nullptr, nullptr, &dec_cache);

      const double inv_b = 1.0 / static_cast<double>(bsz);
      Mat dxhat = 2.0 * inv_b * (xhat - xb);
      Mat dzhat = model.decoder.backward(dxhat, dec_cache, nullptr, true);
      Mat dz = dzhat;  // straight-through: reconstruction gradient bypasses quantization

      for (auto& pool : reseed_pool) pool.clear();
      double batch_rec = 0.0, batch_q = 0.0, batch_mtm = 0.0;
      for (long i = 0; i < bsz; ++i) {
        const QuantizeResult& q = quants[static_cast<size_t>(i)];
        RqLosses l = rq_losses(xb.row(i).transpose(), xhat.row(i).transpose(), q.residuals,
                               q.codes, model.codebooks, cfg.beta);
        batch_rec += l.l_rec;
        batch_q += l.l_q;
        for (int d = 0; d < m; ++d) {
          int c = q.codes[static_cast<size_t>(d)];
          ++used[static_cast<size_t>(d)][static_cast<size_t>(c)];
          const Vec& r = q.residuals[static_cast<size_t>(d)];
          Vec e = model.codebooks.levels[static_cast<size_t>(d)].value.row(c).transpose();
          // First L_Q term: codebooks chase the (stop-gradient) residuals.
          model.codebooks.levels[static_cast<size_t>(d)].grad.row(c) +=
              (cfg.mu * 2.0 * inv_b) * (e - r).transpose();
          // Commitment term: the encoder commits to the (stop-gradient) entries.
          dz.row(i) += (cfg.mu * cfg.beta * 2.0 * inv_b) * (r - e).transpose();
          reseed_pool[static_cast<size_t>(d)].push_back(r);
        }
        if (cfg.lambda > 0.0) {
          std::vector<int> mask;
          for (int d = 0; d < m; ++d)
            if (erng.uniform() < mask_rate) mask.push_back(d);
          if (mask.empty()) mask.push_back(erng.uniform_int(m));
          batch_mtm += model.ctx.loss(q.codes, mask, true, cfg.lambda * inv_b);
        }
      }
      model.encoder.backward(dz, enc_cache, nullptr, false);

      ep.l_rec += batch_rec;
      ep.l_q += batch_q;
      ep.l_mtm += batch_mtm;
      double batch_total =
          (batch_rec + cfg.mu * batch_q + cfg.lambda * batch_mtm) * inv_b;
      if (!std::isfinite(batch_total))
        throw Error(ErrorCode::kDivergence,
                    strf("non-finite pretraining loss at epoch %d", epoch));
      opt.step(params);
    }

    ep.l_rec /= static_cast<double>(n);
    ep.l_q /= static_cast<double>(n);
    ep.l_mtm /= static_cast<double>(n);
    ep.l_total = ep.l_rec + cfg.mu * ep.l_q + cfg.lambda * ep.l_mtm;
    log.push_back(ep);

    // Re-seed entries unused across the whole epoch (only meaningful when the
    // quantization loss participates; with mu == 0 codebooks are inert).
    if (cfg.mu > 0.0) {
      Rng rrng = rng.fork(strf("reseed%d", epoch));
      for (int d = 0; d < m; ++d) {
        const auto& pool = reseed_pool[static_cast<size_t>(d)];
        if (pool.empty()) continue;
        Mat& lvl = model.codebooks.levels[static_cast<size_t>(d)].value;
        for (int c = 0; c < lvl.rows(); ++c) {
          if (used[static_cast<size_t>(d)][static_cast<size_t>(c)] > 0) continue;
          const Vec& src = pool[static_cast<size_t>(rrng.uniform_int(static_cast<int>(pool.size())))];
          for (int j = 0; j < lvl.cols(); ++j) lvl(c, j) = src[j] + 0.01 * rrng.gaussian();
        }
      }
    }
  }
  model.freeze();
  return log;
}

}  // namespace gencdr
