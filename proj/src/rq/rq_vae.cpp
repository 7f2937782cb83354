#include "rq/rq_vae.hpp"

#include "nn/archive.hpp"

namespace gencdr {

RqVae::RqVae(const RqVaeConfig& cfg, Rng& rng) : cfg_(cfg) {
  if (cfg.input_dim < 1) throw Error(ErrorCode::kConfig, "tokenizer input dimension unset");
  encoder = MlpCoder("enc", cfg.input_dim, cfg.hidden, cfg.latent_dim, rng);
  decoder = MlpCoder("dec", cfg.latent_dim, cfg.hidden, cfg.input_dim, rng);
  codebooks = CodebookSet("codebook", cfg.levels, cfg.codebook_size, cfg.latent_dim);
  std::vector<int> level_sizes(static_cast<size_t>(cfg.levels), cfg.codebook_size);
  ctx = CtxModel("ctx", level_sizes, cfg.ctx_dim, cfg.ctx_heads, cfg.ctx_ff, cfg.ctx_blocks, rng);
}

void RqVae::freeze() {
  ParamList all;
  collect(all);
  for (Param* p : all) p->freeze();
  frozen_ = true;
}

Vec RqVae::encode(const Vec& x) const {
  Mat row = x.transpose();
  return encoder.forward(row, nullptr, nullptr, nullptr).row(0).transpose();
}

Mat RqVae::encode_batch(const Mat& x) const { return encoder.forward(x, nullptr, nullptr, nullptr); }

Vec RqVae::decode(const Vec& z_hat) const {
  Mat row = z_hat.transpose();
  return decoder.forward(row, nullptr, nullptr, nullptr).row(0).transpose();
}

void RqVae::collect(ParamList& out) {
  encoder.collect_base(out);
  decoder.collect_base(out);
  codebooks.collect(out);
  ctx.collect(out);
}

uint64_t RqVae::weights_hash() const {
  ParamList core;
  auto* self = const_cast<RqVae*>(this);
  self->encoder.collect_base(core);
  self->decoder.collect_base(core);
  self->codebooks.collect(core);
  uint64_t h = 0xcbf29ce484222325ull;
  for (const Param* p : core) h = fnv1a64(p->name, hash_matrix(p->value, h));
  return h;
}

void RqVae::save(const std::filesystem::path& path) const {
  ParamList all;
  const_cast<RqVae*>(this)->collect(all);
  std::vector<const Param*> view(all.begin(), all.end());
  nlohmann::json meta = {{"kind", "rq_vae"},
                         {"input_dim", cfg_.input_dim},
                         {"latent_dim", cfg_.latent_dim},
                         {"hidden", cfg_.hidden},
                         {"levels", cfg_.levels},
                         {"codebook_size", cfg_.codebook_size},
                         {"ctx_dim", cfg_.ctx_dim},
                         {"ctx_heads", cfg_.ctx_heads},
                         {"ctx_ff", cfg_.ctx_ff},
                         {"ctx_blocks", cfg_.ctx_blocks},
                         {"frozen", frozen_}};
  save_params(path, view, meta);
}

RqVae RqVae::load(const std::filesystem::path& path) {
  Archive ar = load_params(path);
  if (ar.meta.value("kind", "") != "rq_vae")
    throw Error(ErrorCode::kIntegrity, path.string() + " does not hold a tokenizer checkpoint");
  RqVaeConfig cfg;
  cfg.input_dim = ar.meta.at("input_dim").get<int>();
  cfg.latent_dim = ar.meta.at("latent_dim").get<int>();
  cfg.hidden = ar.meta.at("hidden").get<int>();
  cfg.levels = ar.meta.at("levels").get<int>();
  cfg.codebook_size = ar.meta.at("codebook_size").get<int>();
  cfg.ctx_dim = ar.meta.at("ctx_dim").get<int>();
  cfg.ctx_heads = ar.meta.at("ctx_heads").get<int>();
  cfg.ctx_ff = ar.meta.at("ctx_ff").get<int>();
  cfg.ctx_blocks = ar.meta.at("ctx_blocks").get<int>();
  Rng rng(0, "rq-vae-load");  // values are overwritten below
  RqVae model(cfg, rng);
  ParamList all;
  model.collect(all);
  restore_params(ar, all);
  model.frozen_ = ar.meta.value("frozen", false);
  return model;
}

}  // namespace gencdr
